/**
 * Minimal safetensors reader: u64 LE header length, JSON header mapping
 * tensor name -> { dtype, shape, data_offsets }, then raw tensor bytes.
 * F16 and BF16 payloads are upcast to f32 deterministically.
 */

export interface TensorInfo {
  dtype: string;
  shape: number[];
  dataOffsets: [number, number];
}

export interface SafetensorsFile {
  tensors: Map<string, TensorInfo>;
  metadata: Record<string, string> | null;
  data: Buffer;
}

export function parseSafetensors(buf: Buffer): SafetensorsFile {
  if (buf.length < 8) {
    throw new Error("safetensors: file shorter than the 8-byte header length");
  }
  const headerLen = Number(buf.readBigUInt64LE(0));
  if (8 + headerLen > buf.length) {
    throw new Error(`safetensors: header of ${headerLen} bytes exceeds file size`);
  }
  let header: Record<string, unknown>;
  try {
    header = JSON.parse(buf.subarray(8, 8 + headerLen).toString("utf8"));
  } catch (e) {
    throw new Error(`safetensors: malformed JSON header: ${(e as Error).message}`);
  }
  const data = buf.subarray(8 + headerLen);
  const tensors = new Map<string, TensorInfo>();
  let metadata: Record<string, string> | null = null;
  for (const [name, raw] of Object.entries(header)) {
    if (name === "__metadata__") {
      metadata = raw as Record<string, string>;
      continue;
    }
    const rec = raw as { dtype: string; shape: number[]; data_offsets: [number, number] };
    if (!rec || typeof rec.dtype !== "string" || !Array.isArray(rec.shape)) {
      throw new Error(`safetensors: malformed record for tensor ${name}`);
    }
    const [begin, end] = rec.data_offsets;
    if (begin < 0 || end < begin || end > data.length) {
      throw new Error(`safetensors: tensor ${name} range [${begin}, ${end}) out of bounds`);
    }
    tensors.set(name, { dtype: rec.dtype, shape: rec.shape.map(Number), dataOffsets: [begin, end] });
  }
  return { tensors, metadata, data };
}

export function numel(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

function halfToFloat(h: number): number {
  const sign = (h & 0x8000) >> 15;
  const exp = (h & 0x7c00) >> 10;
  const frac = h & 0x03ff;
  let value: number;
  if (exp === 0) {
    value = frac * 2 ** -24; // subnormal
  } else if (exp === 0x1f) {
    value = frac ? Number.NaN : Number.POSITIVE_INFINITY;
  } else {
    value = (1 + frac * 2 ** -10) * 2 ** (exp - 15);
  }
  return sign ? -value : value;
}

/** Extract one tensor as a Float32Array (copies; upcasts F16/BF16 exactly). */
export function tensorToFloat32(file: SafetensorsFile, name: string): Float32Array {
  const info = file.tensors.get(name);
  if (!info) {
    throw new Error(`safetensors: no tensor named ${name}`);
  }
  const [begin, end] = info.dataOffsets;
  const raw = file.data.subarray(begin, end);
  const n = numel(info.shape);
  const out = new Float32Array(n);
  switch (info.dtype) {
    case "F32": {
      if (raw.length !== 4 * n) throw new Error(`safetensors: ${name} byte count mismatch`);
      for (let i = 0; i < n; i++) out[i] = raw.readFloatLE(4 * i);
      return out;
    }
    case "F16": {
      if (raw.length !== 2 * n) throw new Error(`safetensors: ${name} byte count mismatch`);
      for (let i = 0; i < n; i++) out[i] = halfToFloat(raw.readUInt16LE(2 * i));
      return out;
    }
    case "BF16": {
      if (raw.length !== 2 * n) throw new Error(`safetensors: ${name} byte count mismatch`);
      const view = new DataView(new ArrayBuffer(4));
      for (let i = 0; i < n; i++) {
        view.setUint32(0, raw.readUInt16LE(2 * i) << 16, false);
        out[i] = view.getFloat32(0, false);
      }
      return out;
    }
    default:
      throw new Error(`safetensors: unsupported dtype ${info.dtype} for tensor ${name}`);
  }
}
