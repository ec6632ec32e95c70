/**
 * SPTQ archive writer/reader, byte-compatible with the Python toolkit:
 * "SPTQ" | version u32 LE | header_len u64 LE | compact sorted-key JSON
 * header (name -> {byte_len, byte_offset, dtype, shape}) | payload with each
 * tensor 64-byte aligned. Writing is canonical, so identical tensor maps
 * produce identical bytes.
 */

export type SptqDtype = "f32" | "i8" | "i4";

export interface SptqTensor {
  dtype: SptqDtype;
  shape: number[];
  /** f32 -> Float32Array, i8/i4 -> Int8Array */
  data: Float32Array | Int8Array;
}

const MAGIC = Buffer.from("SPTQ", "ascii");
const VERSION = 1;
const ALIGNMENT = 64;

const DTYPE_SIZE: Record<SptqDtype, number> = { f32: 4, i8: 1, i4: 1 };

function align(n: number): number {
  return Math.ceil(n / ALIGNMENT) * ALIGNMENT;
}

export function f32Tensor(data: Float32Array, shape: number[]): SptqTensor {
  if (data.length !== shape.reduce((a, b) => a * b, 1)) {
    throw new Error(`tensor data length ${data.length} does not match shape [${shape}]`);
  }
  return { dtype: "f32", shape, data };
}

export function writeSptq(tensors: Map<string, SptqTensor>): Buffer {
  const names = [...tensors.keys()].sort();
  for (const name of names) {
    if (!name) throw new Error("tensor names must be non-empty");
  }
  const header: Record<string, unknown> = {};
  let offset = 0;
  for (const name of names) {
    const t = tensors.get(name)!;
    const byteLen = t.data.length * DTYPE_SIZE[t.dtype];
    // key insertion order matches Python's sort_keys output
    header[name] = {
      byte_len: byteLen,
      byte_offset: offset,
      dtype: t.dtype,
      shape: t.shape,
    };
    offset = align(offset + byteLen);
  }
  const headerBytes = Buffer.from(JSON.stringify(header), "utf8");
  const payloadLen = names.length
    ? (() => {
        const last = header[names[names.length - 1]] as { byte_offset: number; byte_len: number };
        return last.byte_offset + last.byte_len;
      })()
    : 0;
  const out = Buffer.alloc(16 + headerBytes.length + payloadLen);
  MAGIC.copy(out, 0);
  out.writeUInt32LE(VERSION, 4);
  out.writeBigUInt64LE(BigInt(headerBytes.length), 8);
  headerBytes.copy(out, 16);
  const payloadStart = 16 + headerBytes.length;
  for (const name of names) {
    const t = tensors.get(name)!;
    const rec = header[name] as { byte_offset: number };
    let pos = payloadStart + rec.byte_offset;
    if (t.dtype === "f32") {
      const arr = t.data as Float32Array;
      for (let i = 0; i < arr.length; i++) {
        out.writeFloatLE(arr[i], pos);
        pos += 4;
      }
    } else {
      const arr = t.data as Int8Array;
      for (let i = 0; i < arr.length; i++) {
        out.writeInt8(arr[i], pos);
        pos += 1;
      }
    }
  }
  return out;
}

export function readSptq(buf: Buffer): Map<string, SptqTensor> {
  if (buf.length < 4 || !buf.subarray(0, 4).equals(MAGIC)) {
    throw new Error("not an SPTQ archive (bad magic)");
  }
  const version = buf.readUInt32LE(4);
  if (version !== VERSION) {
    throw new Error(`unsupported SPTQ version ${version}`);
  }
  const headerLen = Number(buf.readBigUInt64LE(8));
  const header = JSON.parse(buf.subarray(16, 16 + headerLen).toString("utf8")) as Record<
    string,
    { byte_len: number; byte_offset: number; dtype: SptqDtype; shape: number[] }
  >;
  const payload = buf.subarray(16 + headerLen);
  const out = new Map<string, SptqTensor>();
  for (const [name, rec] of Object.entries(header)) {
    const n = rec.shape.reduce((a, b) => a * b, 1);
    if (rec.byte_offset + rec.byte_len > payload.length) {
      throw new Error(`tensor ${name} extends past end of payload`);
    }
    if (rec.dtype === "f32") {
      const arr = new Float32Array(n);
      for (let i = 0; i < n; i++) arr[i] = payload.readFloatLE(rec.byte_offset + 4 * i);
      out.set(name, { dtype: rec.dtype, shape: rec.shape, data: arr });
    } else if (rec.dtype === "i8" || rec.dtype === "i4") {
      const arr = new Int8Array(n);
      for (let i = 0; i < n; i++) arr[i] = payload.readInt8(rec.byte_offset + i);
      out.set(name, { dtype: rec.dtype, shape: rec.shape, data: arr });
    } else {
      throw new Error(`tensor ${name} has unknown dtype ${rec.dtype}`);
    }
  }
  return out;
}
