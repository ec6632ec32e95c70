"""Experiment harness: quantization policy construction, calibration-driven
hooks, fidelity measurement against the FP baseline, and the config grid.

Weights and activations are quantized per-tensor (the baseline policy).
Activation fake-quant attaches only to the four linear-output taps; the SSM
output and the effective matrices A̅/Δ̅/B̅ are never quantized.
"""

from __future__ import annotations

import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .archive import Tensor, load_archive, save_archive
from .errors import ConfigError, DataError
from .model import (
    QUANTIZABLE_TAPS,
    Hook,
    HookSet,
    MambaBlockWeights,
    MambaModel,
    ModelConfig,
    TapPoint,
    model_forward,
    model_tensors,
    model_from_tensors,
    tap_key,
)
from .quant import QuantizedTensor, dequantize, fake_quant_static, qmax, quantize_per_tensor
from .smoothing import (
    DEFAULT_TARGETS,
    SmoothingFactors,
    apply_smoothing,
    compute_model_smoothing,
    transform_stats,
)
from .stats import OutlierReport, StatsMap, calibrate_model, detect_outliers, zero_outlier_hook

SCOPE_MLP = "mlp"
SCOPE_ALL = "all"

_MLP_SUFFIXES = ("in_proj", "x_proj", "dt_proj.weight", "out_proj")

_SUFFIX_ATTR = {
    "in_proj": "in_proj",
    "conv1d.weight": "conv_weight",
    "x_proj": "x_proj",
    "dt_proj.weight": "dt_proj_weight",
    "out_proj": "out_proj",
}

_NOTATION_RE = re.compile(r"^W(\d+)(?:A(\d+))?$")


@dataclass(frozen=True)
class QuantConfig:
    """One experiment cell: WnAm notation plus scope/smoothing/ablation knobs."""

    wbits: Optional[int] = None
    abits: Optional[int] = None
    scope: str = SCOPE_MLP
    smooth_alpha: Optional[float] = None
    ablate_outliers: bool = False
    sigma_mult: float = 6.0

    def __post_init__(self):
        if self.wbits not in (None, 4, 8):
            raise ConfigError(f"wbits must be 4, 8 or none, got {self.wbits}")
        if self.abits not in (None, 8):
            raise ConfigError(f"abits must be 8 or none, got {self.abits}")
        if self.abits is not None and self.wbits is None:
            raise ConfigError("activation quantization requires weight quantization")
        if self.scope not in (SCOPE_MLP, SCOPE_ALL):
            raise ConfigError(f"scope must be 'mlp' or 'all', got {self.scope!r}")
        if self.smooth_alpha is not None and not 0.0 <= self.smooth_alpha <= 1.0:
            raise ConfigError(f"smooth_alpha must be in [0, 1], got {self.smooth_alpha}")
        if self.sigma_mult <= 0:
            raise ConfigError("sigma_mult must be positive")

    @property
    def notation(self) -> str:
        if self.wbits is None:
            return "fp"
        if self.abits is None:
            return f"W{self.wbits}"
        return f"W{self.wbits}A{self.abits}"

    @property
    def needs_stats(self) -> bool:
        return self.abits is not None or self.ablate_outliers or self.smooth_alpha is not None

    @classmethod
    def from_notation(cls, notation: str, **kwargs) -> "QuantConfig":
        text = notation.strip()
        if text.lower() in ("fp", "baseline", "none"):
            return cls(wbits=None, abits=None, **kwargs)
        m = _NOTATION_RE.match(text)
        if not m:
            raise ConfigError(f"cannot parse quantization notation {notation!r}")
        abits = int(m.group(2)) if m.group(2) else None
        return cls(wbits=int(m.group(1)), abits=abits, **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls.from_notation(
            str(d.get("config", "fp")),
            scope=d.get("scope", SCOPE_MLP),
            smooth_alpha=d.get("alpha"),
            ablate_outliers=bool(d.get("ablate", False)),
            sigma_mult=float(d.get("sigma_mult", 6.0)),
        )

    def to_dict(self) -> dict:
        return {
            "config": self.notation,
            "scope": self.scope,
            "alpha": self.smooth_alpha,
            "ablate": self.ablate_outliers,
            "sigma_mult": self.sigma_mult,
        }


class FakeQuantHook(Hook):
    """Static-scale activation fake-quant at a tap (scale from calibration)."""

    kind = "fake_quant"

    def __init__(self, scale: float, bits: int):
        self.scale = float(scale)
        self.bits = bits

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return fake_quant_static(x, self.scale, self.bits)


# ---------------------------------------------------------------------------
# Token corpora
# ---------------------------------------------------------------------------


@dataclass
class TokenCorpus:
    """Disjoint calibration/evaluation splits of a token stream."""

    calibration: list[np.ndarray]
    evaluation: list[np.ndarray]


def generate_tokens(n: int, vocab_size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=n, dtype=np.int64).astype("<u4")


def save_tokens(ids: np.ndarray, path) -> None:
    np.asarray(ids, dtype="<u4").tofile(path)


def load_tokens(path) -> np.ndarray:
    ids = np.fromfile(path, dtype="<u4")
    if ids.size == 0:
        raise DataError(f"token file {path} is empty")
    return ids


def split_corpus(ids: np.ndarray, seq_len: int) -> TokenCorpus:
    """Chop a token stream into seq_len windows; first half calibrates,
    second half evaluates."""
    ids = np.asarray(ids)
    n_seq = ids.size // seq_len
    if n_seq < 2:
        raise DataError(
            f"corpus of {ids.size} tokens yields {n_seq} sequence(s) of length "
            f"{seq_len}; need at least 2 for disjoint calibration/evaluation splits"
        )
    seqs = [ids[i * seq_len : (i + 1) * seq_len] for i in range(n_seq)]
    half = n_seq // 2
    return TokenCorpus(calibration=seqs[:half], evaluation=seqs[half:])


# ---------------------------------------------------------------------------
# Weight quantization and policy construction
# ---------------------------------------------------------------------------


def scoped_weight_names(config: ModelConfig, scope: str) -> list[str]:
    """Canonical names of the tensors quantized under a scope."""
    names = []
    for i in range(config.n_layers):
        for suffix in _MLP_SUFFIXES:
            names.append(f"layers.{i}.{suffix}")
        if scope == SCOPE_ALL:
            names.append(f"layers.{i}.conv1d.weight")
    if scope == SCOPE_ALL:
        names += ["embedding.weight", "lm_head.weight"]
    return names


def _get_weight(model: MambaModel, name: str) -> np.ndarray:
    if name == "embedding.weight":
        return model.embedding
    if name == "lm_head.weight":
        return model.lm_head
    _, layer, suffix = name.split(".", 2)
    return getattr(model.layers[int(layer)], _SUFFIX_ATTR[suffix])


def _set_weight(model: MambaModel, name: str, value: np.ndarray) -> None:
    if name == "embedding.weight":
        model.embedding = value
    elif name == "lm_head.weight":
        model.lm_head = value
    else:
        _, layer, suffix = name.split(".", 2)
        setattr(model.layers[int(layer)], _SUFFIX_ATTR[suffix], value)


def quantize_model_weights(
    model: MambaModel, bits: int, scope: str
) -> tuple[MambaModel, dict[str, QuantizedTensor]]:
    """Fake-quantize scoped weights per-tensor; returns the model copy and the
    integer payloads keyed by canonical name."""
    out = model.copy()
    quantized: dict[str, QuantizedTensor] = {}
    for name in scoped_weight_names(model.config, scope):
        q = quantize_per_tensor(_get_weight(out, name), bits)
        quantized[name] = q
        _set_weight(out, name, dequantize(q))
    return out, quantized


@dataclass
class Prepared:
    """A model plus everything build_hooks derived for one config cell."""

    config: QuantConfig
    model: MambaModel
    hooks: HookSet
    factors: Optional[list[SmoothingFactors]] = None
    act_scales: Optional[dict[tuple[int, TapPoint], float]] = None
    quantized: Optional[dict[str, QuantizedTensor]] = None
    outlier_reports: Optional[list[OutlierReport]] = None


def prepare(config: QuantConfig, model: MambaModel, stats: Optional[StatsMap] = None) -> Prepared:
    """Apply smoothing and weight quantization, build the tap HookSet."""
    if config.needs_stats and stats is None:
        raise ConfigError(
            f"config {config.notation} needs calibration stats "
            "(activation quantization, smoothing or ablation requested)"
        )
    prepared_model = model
    factors = None
    if config.smooth_alpha is not None:
        factors = compute_model_smoothing(model, stats, config.smooth_alpha, DEFAULT_TARGETS)
        prepared_model = apply_smoothing(model, factors)
        stats = transform_stats(stats, factors)

    quantized = None
    if config.wbits is not None:
        prepared_model, quantized = quantize_model_weights(prepared_model, config.wbits, config.scope)
    elif prepared_model is model:
        prepared_model = model.copy()

    hooks = HookSet()
    reports = None
    if config.ablate_outliers:
        reports = [
            detect_outliers(stats[(layer, tap)], config.sigma_mult)
            for layer in range(model.config.n_layers)
            for tap in sorted(QUANTIZABLE_TAPS, key=lambda t: t.value)
        ]
        zero = zero_outlier_hook(reports, QUANTIZABLE_TAPS)
        for (layer, tap), hook_list in zero.items():
            for h in hook_list:
                hooks.add(layer, tap, h)

    act_scales = None
    if config.abits is not None:
        act_scales = {}
        for layer in range(model.config.n_layers):
            for tap in sorted(QUANTIZABLE_TAPS, key=lambda t: t.value):
                peak = float(stats[(layer, tap)].absmax.max())
                scale = qmax(config.abits) / peak if peak > 0 else 1.0
                act_scales[(layer, tap)] = scale
                hooks.add(layer, tap, FakeQuantHook(scale, config.abits))

    return Prepared(
        config=config,
        model=prepared_model,
        hooks=hooks,
        factors=factors,
        act_scales=act_scales,
        quantized=quantized,
        outlier_reports=reports,
    )


def build_hooks(
    config: QuantConfig, model: MambaModel, stats: Optional[StatsMap] = None
) -> tuple[MambaModel, HookSet]:
    p = prepare(config, model, stats)
    return p.model, p.hooks


# ---------------------------------------------------------------------------
# Fidelity measurement
# ---------------------------------------------------------------------------


class _CaptureHook(Hook):
    kind = "capture"

    def __init__(self):
        self.value: Optional[np.ndarray] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.value = x
        return x


class _MetricAcc:
    def __init__(self):
        self.sq_diff = 0.0
        self.dot = 0.0
        self.norm_a = 0.0
        self.norm_b = 0.0
        self.max_abs = 0.0
        self.n = 0
        self.top1_hits = 0
        self.top1_total = 0

    def update(self, a: np.ndarray, b: np.ndarray, top1: bool = False) -> None:
        a64 = a.astype(np.float64).ravel()
        b64 = b.astype(np.float64).ravel()
        d = a64 - b64
        self.sq_diff += float(d @ d)
        self.dot += float(a64 @ b64)
        self.norm_a += float(a64 @ a64)
        self.norm_b += float(b64 @ b64)
        self.max_abs = max(self.max_abs, float(np.abs(d).max(initial=0.0)))
        self.n += a64.size
        if top1:
            self.top1_hits += int(np.sum(a.argmax(axis=1) == b.argmax(axis=1)))
            self.top1_total += a.shape[0]

    def metrics(self) -> dict:
        denom = math.sqrt(self.norm_a * self.norm_b)
        cosine = self.dot / denom if denom > 0 else 1.0
        out = {
            "mse": self.sq_diff / self.n if self.n else 0.0,
            "cosine": cosine,
            "max_abs": self.max_abs,
        }
        if self.top1_total:
            out["top1_agreement"] = self.top1_hits / self.top1_total
        return out


@dataclass
class FidelityReport:
    config: QuantConfig
    mse: float
    cosine: float
    max_abs: float
    top1_agreement: float
    per_layer: list[dict]
    outliers: dict = field(default_factory=dict)
    smoothing: Optional[list[SmoothingFactors]] = None
    runtime_s: float = 0.0  # stderr-only; never serialized (outputs stay byte-identical)

    def to_dict(self) -> dict:
        out = {
            "config": self.config.notation,
            "scope": self.config.scope,
            "alpha": self.config.smooth_alpha,
            "ablate": self.config.ablate_outliers,
            "metrics": {
                "mse": self.mse,
                "cosine": self.cosine,
                "max_abs": self.max_abs,
                "top1_agreement": self.top1_agreement,
            },
            "per_layer": self.per_layer,
            "outliers": self.outliers,
        }
        if self.smoothing is not None:
            out["smoothing"] = [f.to_dict() for f in self.smoothing]
        return out


ModelOrPair = "MambaModel | tuple[MambaModel, HookSet] | Prepared"


def _as_pair(m) -> tuple[MambaModel, HookSet]:
    if isinstance(m, Prepared):
        return m.model, m.hooks
    if isinstance(m, MambaModel):
        return m, HookSet()
    return m


def _hooks_with_captures(hooks: HookSet, n_layers: int):
    copied = HookSet()
    for (layer, tap), hook_list in hooks.items():
        for h in hook_list:
            copied.add(layer, tap, h)
    captures = []
    for layer in range(n_layers):
        cap = _CaptureHook()
        copied.add(layer, TapPoint.OUT_PROJ_OUT, cap)
        captures.append(cap)
    return copied, captures


def evaluate_fidelity(
    baseline: ModelOrPair,
    candidate: ModelOrPair,
    sequences: Sequence[np.ndarray],
    config: Optional[QuantConfig] = None,
    outliers: Optional[dict] = None,
    smoothing: Optional[list[SmoothingFactors]] = None,
) -> FidelityReport:
    """Run both models over the corpus; aggregate logit and per-layer metrics.

    Per-layer rows compare the OutProjOut activations; the end-to-end row
    compares logits and carries the top-1 agreement rate.
    """
    base_model, base_hooks = _as_pair(baseline)
    cand_model, cand_hooks = _as_pair(candidate)
    if len(sequences) == 0:
        raise DataError("evaluation corpus is empty")
    n_layers = base_model.config.n_layers
    layer_acc = [_MetricAcc() for _ in range(n_layers)]
    logit_acc = _MetricAcc()

    start = time.perf_counter()
    for seq in sequences:
        bh, bcaps = _hooks_with_captures(base_hooks, n_layers)
        logits_b = model_forward(base_model, seq, bh)
        ch, ccaps = _hooks_with_captures(cand_hooks, n_layers)
        logits_c = model_forward(cand_model, seq, ch)
        logit_acc.update(logits_b, logits_c, top1=True)
        for i in range(n_layers):
            layer_acc[i].update(bcaps[i].value, ccaps[i].value)
    runtime = time.perf_counter() - start

    m = logit_acc.metrics()
    per_layer = [{"layer": i, **acc.metrics()} for i, acc in enumerate(layer_acc)]
    return FidelityReport(
        config=config if config is not None else QuantConfig(),
        mse=m["mse"],
        cosine=m["cosine"],
        max_abs=m["max_abs"],
        top1_agreement=m["top1_agreement"],
        per_layer=per_layer,
        outliers=outliers or {},
        smoothing=smoothing,
        runtime_s=runtime,
    )


# ---------------------------------------------------------------------------
# Synthetic outlier-injected models
# ---------------------------------------------------------------------------


def make_outlier_model(
    config: ModelConfig,
    outlier_channels: Sequence[int],
    magnitude: float,
    seed: int,
) -> MambaModel:
    """Random model whose in_proj x-branch rows at the given indices are scaled
    by `magnitude`, so calibration provably flags those channels."""
    channels = [int(c) for c in outlier_channels]
    for c in channels:
        if not 0 <= c < config.d_inner:
            raise DataError(f"outlier channel {c} out of range [0, {config.d_inner})")
    if magnitude <= 0:
        raise DataError(f"outlier magnitude must be positive, got {magnitude}")
    rng = np.random.default_rng(seed)

    def lin(n_out: int, n_in: int) -> np.ndarray:
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_out, n_in)).astype(np.float32)

    embedding = (rng.normal(0.0, 1.0, size=(config.vocab_size, config.d_model)) * 0.1).astype(
        np.float32
    )
    layers = []
    for _ in range(config.n_layers):
        in_proj = lin(2 * config.d_inner, config.d_model)
        if channels:
            in_proj[channels, :] *= np.float32(magnitude)
        dt = np.exp(
            rng.uniform(math.log(1e-3), math.log(1e-1), size=config.d_inner)
        )
        dt_bias = np.log(np.expm1(dt)).astype(np.float32)
        a_log = np.log(np.arange(1, config.d_state + 1, dtype=np.float64))
        layers.append(
            MambaBlockWeights(
                in_proj=in_proj,
                conv_weight=lin(config.d_conv, config.d_inner),
                x_proj=lin(config.dt_rank + 2 * config.d_state, config.d_inner),
                dt_proj_weight=lin(config.d_inner, config.dt_rank),
                dt_proj_bias=dt_bias,
                A_log=np.broadcast_to(a_log, (config.d_inner, config.d_state))
                .astype(np.float32)
                .copy(),
                D=np.ones(config.d_inner, dtype=np.float32),
                out_proj=lin(config.d_model, config.d_inner),
                norm_weight=np.ones(config.d_model, dtype=np.float32),
            )
        )
    return MambaModel(
        config=config,
        embedding=embedding,
        layers=layers,
        norm_f=np.ones(config.d_model, dtype=np.float32),
        lm_head=embedding.copy(),
    )


def random_model(config: ModelConfig, seed: int) -> MambaModel:
    """Well-conditioned random model (no injected outliers)."""
    return make_outlier_model(config, [], 1.0, seed)


# ---------------------------------------------------------------------------
# Grid execution
# ---------------------------------------------------------------------------


def _outlier_summary(stats: Optional[StatsMap], sigma_mult: float) -> dict:
    if stats is None:
        return {}
    per_tap = {}
    for (layer, tap), st in sorted(stats.items(), key=lambda kv: kv[1].key):
        rep = detect_outliers(st, sigma_mult)
        per_tap[st.key] = {
            "count": len(rep.outlier_channels),
            "fraction": rep.fraction,
            "threshold": rep.threshold,
        }
    return {"sigma_mult": sigma_mult, "per_tap": per_tap}


def run_grid(
    model: MambaModel,
    corpus: TokenCorpus,
    configs: Sequence[QuantConfig],
) -> list[FidelityReport]:
    """Evaluate each config against the shared FP baseline. SSM_PTQ_THREADS
    caps cell parallelism (default: serial)."""
    if not configs:
        return []
    stats = None
    if any(c.needs_stats for c in configs):
        stats = calibrate_model(model, corpus.calibration)

    def run_cell(cfg: QuantConfig) -> FidelityReport:
        p = prepare(cfg, model, stats)
        return evaluate_fidelity(
            model,
            p,
            corpus.evaluation,
            config=cfg,
            outliers=_outlier_summary(stats, cfg.sigma_mult),
            smoothing=p.factors,
        )

    n_threads = int(os.environ.get("SSM_PTQ_THREADS", "1") or "1")
    if n_threads > 1 and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            return list(pool.map(run_cell, configs))
    return [run_cell(cfg) for cfg in configs]


# ---------------------------------------------------------------------------
# Quantized-model archives
# ---------------------------------------------------------------------------


def quantized_archive_tensors(p: Prepared) -> dict:
    """Archive map for a prepared model: int payloads + "<name>.scale"
    sidecars, smoothing pre_scale vectors, and activation scales."""
    tensors: dict = dict(model_tensors(p.model))
    if p.quantized:
        for name, q in p.quantized.items():
            tensors[name] = Tensor(q.values, q.dtype)
            tensors[f"{name}.scale"] = np.asarray(q.scales, dtype=np.float32)
    if p.act_scales:
        tensors["act_bits"] = Tensor(np.array(p.config.abits, dtype=np.int8), "i8")
        for (layer, tap), scale in p.act_scales.items():
            tensors[f"layers.{layer}.act_scale.{tap.value}"] = np.float32(scale)
    return tensors


def save_quantized_model(p: Prepared, path) -> None:
    save_archive(quantized_archive_tensors(p), path)


def infer_quant_config(tensors: dict) -> QuantConfig:
    """Reconstruct the WnAm cell an archive was produced under (for reports)."""
    wbits = None
    for name, t in tensors.items():
        if name == "act_bits":
            continue
        if t.dtype == "i4":
            wbits = 4
            break
        if t.dtype == "i8":
            wbits = 8
    abits = int(tensors["act_bits"].data) if "act_bits" in tensors else None
    scope = SCOPE_MLP
    if "embedding.weight" in tensors and tensors["embedding.weight"].dtype != "f32":
        scope = SCOPE_ALL
    if wbits is None:
        return QuantConfig()
    return QuantConfig(wbits=wbits, abits=abits, scope=scope)


def load_eval_model(
    archive_path, config: "ModelConfig | str | Path"
) -> tuple[MambaModel, HookSet, QuantConfig]:
    """Load a (possibly quantized) model archive plus its activation hooks and
    the inferred quantization cell."""
    if not isinstance(config, ModelConfig):
        config = ModelConfig.from_json_file(config)
    tensors = load_archive(archive_path)
    model = model_from_tensors(tensors, config)
    hooks = HookSet()
    if "act_bits" in tensors:
        bits = int(tensors["act_bits"].data)
        for name, t in sorted(tensors.items()):
            parts = name.split(".")
            if len(parts) == 4 and parts[0] == "layers" and parts[2] == "act_scale":
                layer = int(parts[1])
                tap = TapPoint.from_name(parts[3])
                hooks.add(layer, tap, FakeQuantHook(float(t.data), bits))
    return model, hooks, infer_quant_config(tensors)
