/** Test helpers: build safetensors buffers and synthetic Mamba checkpoints. */

export interface RawTensor {
  dtype: "F32" | "F16" | "BF16";
  shape: number[];
  /** values; encoded per dtype (F16/BF16 round-trip through the narrow type) */
  values: number[] | Float32Array;
}

function floatToHalfBits(value: number): number {
  const f32 = new Float32Array([value]);
  const bits = new Uint32Array(f32.buffer)[0];
  const sign = (bits >>> 16) & 0x8000;
  let exp = (bits >>> 23) & 0xff;
  let frac = bits & 0x7fffff;
  if (exp === 0xff) return sign | 0x7c00 | (frac ? 1 : 0);
  const newExp = exp - 127 + 15;
  if (newExp >= 0x1f) return sign | 0x7c00;
  if (newExp <= 0) return sign; // flush tiny values to zero (test values avoid subnormals)
  return sign | (newExp << 10) | (frac >>> 13);
}

function bf16Bits(value: number): number {
  const f32 = new Float32Array([value]);
  return new Uint32Array(f32.buffer)[0] >>> 16; // truncate (tests use exactly-representable values)
}

export function buildSafetensors(tensors: Record<string, RawTensor>): Buffer {
  const header: Record<string, unknown> = {};
  const chunks: Buffer[] = [];
  let offset = 0;
  for (const [name, t] of Object.entries(tensors)) {
    const values = Array.from(t.values);
    let buf: Buffer;
    if (t.dtype === "F32") {
      buf = Buffer.alloc(4 * values.length);
      values.forEach((v, i) => buf.writeFloatLE(v, 4 * i));
    } else if (t.dtype === "F16") {
      buf = Buffer.alloc(2 * values.length);
      values.forEach((v, i) => buf.writeUInt16LE(floatToHalfBits(v), 2 * i));
    } else {
      buf = Buffer.alloc(2 * values.length);
      values.forEach((v, i) => buf.writeUInt16LE(bf16Bits(v), 2 * i));
    }
    header[name] = { dtype: t.dtype, shape: t.shape, data_offsets: [offset, offset + buf.length] };
    chunks.push(buf);
    offset += buf.length;
  }
  const headerBytes = Buffer.from(JSON.stringify(header), "utf8");
  const lenBuf = Buffer.alloc(8);
  lenBuf.writeBigUInt64LE(BigInt(headerBytes.length));
  return Buffer.concat([lenBuf, headerBytes, ...chunks]);
}

/** Deterministic pseudo-random floats in [-0.5, 0.5) (xorshift; no deps). */
export function pseudoRandom(n: number, seed: number): Float32Array {
  let state = (seed >>> 0) || 1;
  const out = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    state ^= state << 13;
    state >>>= 0;
    state ^= state >> 17;
    state ^= state << 5;
    state >>>= 0;
    out[i] = Math.fround(state / 2 ** 32 - 0.5);
  }
  return out;
}

export interface ToyDims {
  layers: number;
  dModel: number;
  dInner: number;
  dState: number;
  dConv: number;
  dtRank: number;
  vocab: number;
}

export const TOY_DIMS: ToyDims = {
  layers: 2,
  dModel: 8,
  dInner: 16,
  dState: 4,
  dConv: 3,
  dtRank: 2,
  vocab: 24,
};

/** A full synthetic checkpoint in the state-spaces layout (with conv bias). */
export function buildToyCheckpoint(
  dims: ToyDims = TOY_DIMS,
  naming: "orig" | "hf" = "orig",
  withLmHead = true
): Record<string, RawTensor> {
  const { layers, dModel, dInner, dState, dConv, dtRank, vocab } = dims;
  const embKey = naming === "orig" ? "backbone.embedding.weight" : "backbone.embeddings.weight";
  let seed = 1;
  const f32 = (shape: number[]): RawTensor => ({
    dtype: "F32",
    shape,
    values: pseudoRandom(shape.reduce((a, b) => a * b, 1), seed++),
  });
  const ckpt: Record<string, RawTensor> = { [embKey]: f32([vocab, dModel]) };
  for (let i = 0; i < layers; i++) {
    const p = `backbone.layers.${i}.`;
    ckpt[p + "mixer.in_proj.weight"] = f32([2 * dInner, dModel]);
    ckpt[p + "mixer.conv1d.weight"] = f32([dInner, 1, dConv]);
    ckpt[p + "mixer.conv1d.bias"] = f32([dInner]);
    ckpt[p + "mixer.x_proj.weight"] = f32([dtRank + 2 * dState, dInner]);
    ckpt[p + "mixer.dt_proj.weight"] = f32([dInner, dtRank]);
    ckpt[p + "mixer.dt_proj.bias"] = f32([dInner]);
    ckpt[p + "mixer.A_log"] = f32([dInner, dState]);
    ckpt[p + "mixer.D"] = f32([dInner]);
    ckpt[p + "mixer.out_proj.weight"] = f32([dModel, dInner]);
    ckpt[p + "norm.weight"] = f32([dModel]);
  }
  ckpt["backbone.norm_f.weight"] = f32([dModel]);
  if (withLmHead) {
    ckpt["lm_head.weight"] = f32([vocab, dModel]);
  }
  return ckpt;
}
