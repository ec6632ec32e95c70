/**
 * Mapping from public Mamba checkpoint tensor names (state-spaces originals
 * and the HF transformers port share the backbone.* layout) onto the SPTQ
 * canonical scheme. The conv kernel is reshaped from [d_inner, 1, K] to
 * [K, d_inner]; conv1d.bias has no slot in the canonical scheme and is
 * dropped with a warning.
 */

import { SafetensorsFile, numel, tensorToFloat32 } from "./safetensors.js";
import { SptqTensor, f32Tensor } from "./sptq.js";

export interface ModelConfig {
  n_layers: number;
  d_model: number;
  d_inner: number;
  d_state: number;
  d_conv: number;
  dt_rank: number;
  vocab_size: number;
}

export interface ConversionResult {
  tensors: Map<string, SptqTensor>;
  config: ModelConfig;
  /** "src -> dst" lines, in source order */
  manifest: string[];
  dropped: string[];
  paramCount: number;
  sourceParamCount: number;
}

const MIXER_MAP: Record<string, string> = {
  "mixer.in_proj.weight": "in_proj",
  "mixer.conv1d.weight": "conv1d.weight",
  "mixer.x_proj.weight": "x_proj",
  "mixer.dt_proj.weight": "dt_proj.weight",
  "mixer.dt_proj.bias": "dt_proj.bias",
  "mixer.A_log": "A_log",
  "mixer.D": "D",
  "mixer.out_proj.weight": "out_proj",
  "norm.weight": "norm.weight",
};

const DROPPED = new Set(["mixer.conv1d.bias"]);

export function mapName(src: string): { dst: string | null; drop: boolean } {
  if (src === "backbone.embedding.weight" || src === "backbone.embeddings.weight") {
    return { dst: "embedding.weight", drop: false };
  }
  if (src === "backbone.norm_f.weight") {
    return { dst: "norm_f.weight", drop: false };
  }
  if (src === "lm_head.weight") {
    return { dst: "lm_head.weight", drop: false };
  }
  const m = src.match(/^backbone\.layers\.(\d+)\.(.+)$/);
  if (m) {
    const [, layer, rest] = m;
    if (DROPPED.has(rest)) {
      return { dst: null, drop: true };
    }
    const mapped = MIXER_MAP[rest];
    if (mapped) {
      return { dst: `layers.${layer}.${mapped}`, drop: false };
    }
  }
  return { dst: null, drop: false };
}

/** Reshape a conv kernel from [E, 1, K] or [E, K] (row-major) to [K, E]. */
export function reshapeConvKernel(data: Float32Array, shape: number[]): { data: Float32Array; shape: number[] } {
  let e: number, k: number;
  if (shape.length === 3 && shape[1] === 1) {
    [e, , k] = shape;
  } else if (shape.length === 2) {
    [e, k] = shape;
  } else {
    throw new Error(`conv kernel has unexpected shape [${shape}]`);
  }
  const out = new Float32Array(k * e);
  for (let ei = 0; ei < e; ei++) {
    for (let ki = 0; ki < k; ki++) {
      out[ki * e + ei] = data[ei * k + ki];
    }
  }
  return { data: out, shape: [k, e] };
}

export function deriveConfig(tensors: Map<string, SptqTensor>): ModelConfig {
  let nLayers = 0;
  for (const name of tensors.keys()) {
    const m = name.match(/^layers\.(\d+)\./);
    if (m) nLayers = Math.max(nLayers, Number(m[1]) + 1);
  }
  const need = (name: string): SptqTensor => {
    const t = tensors.get(name);
    if (!t) throw new Error(`cannot derive config: converted set is missing ${name}`);
    return t;
  };
  const emb = need("embedding.weight");
  const inProj = need("layers.0.in_proj");
  const aLog = need("layers.0.A_log");
  const conv = need("layers.0.conv1d.weight");
  const dtW = need("layers.0.dt_proj.weight");
  return {
    n_layers: nLayers,
    d_model: emb.shape[1],
    d_inner: inProj.shape[0] / 2,
    d_state: aLog.shape[1],
    d_conv: conv.shape[0],
    dt_rank: dtW.shape[1],
    vocab_size: emb.shape[0],
  };
}

export function convertCheckpoint(file: SafetensorsFile): ConversionResult {
  const out = new Map<string, SptqTensor>();
  const manifest: string[] = [];
  const dropped: string[] = [];
  const unmatched: string[] = [];
  let sourceParamCount = 0;

  for (const [src, info] of file.tensors) {
    sourceParamCount += numel(info.shape);
    const { dst, drop } = mapName(src);
    if (drop) {
      dropped.push(src);
      continue;
    }
    if (!dst) {
      unmatched.push(src);
      continue;
    }
    const data = tensorToFloat32(file, src);
    if (dst.endsWith("conv1d.weight")) {
      const r = reshapeConvKernel(data, info.shape);
      out.set(dst, f32Tensor(r.data, r.shape));
      manifest.push(`${src} [${info.shape}] -> ${dst} [${r.shape}]`);
    } else {
      out.set(dst, f32Tensor(data, info.shape));
      manifest.push(`${src} -> ${dst}`);
    }
  }
  if (unmatched.length) {
    throw new Error(
      `unknown tensor layout; unmatched names: ${unmatched.sort().join(", ")}`
    );
  }
  if (!out.has("lm_head.weight")) {
    const emb = out.get("embedding.weight");
    if (!emb) throw new Error("checkpoint has neither lm_head.weight nor an embedding to tie");
    out.set("lm_head.weight", f32Tensor(new Float32Array(emb.data as Float32Array), emb.shape));
    manifest.push("(tied) embedding.weight -> lm_head.weight");
  }
  const config = deriveConfig(out);
  let paramCount = 0;
  for (const t of out.values()) paramCount += t.data.length;
  return { tensors: out, config, manifest, dropped, paramCount, sourceParamCount };
}
