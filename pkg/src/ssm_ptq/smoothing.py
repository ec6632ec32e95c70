"""SmoothQuant-style migration of quantization difficulty from activations
to weights.

Per consuming layer with input activation X and weight W, the per-channel
factor s_j = max|X_j|^alpha / max|W_j|^(1-alpha) rescales X -> X/s and the
consumer's input columns W_:j -> s_j * W_:j, leaving the product unchanged.

How the inverse scale 1/s reaches X depends on the producer:
  conv     consumes the in_proj x-half   -> fold into in_proj rows (exact; the
            depthwise conv kernel absorbs s per channel)
  dt_proj  consumes the x_proj dt-slice  -> fold into x_proj rows (exact)
  x_proj   consumes the conv+SiLU output -> SiLU blocks folding; 1/s is kept
            as a pre_scale multiplier fused into the x_proj input
  out_proj consumes the gated product    -> SiLU blocks folding; pre_scale
  in_proj  consumes the RMSNorm output   -> fold into the norm scale (exact)

The conv and dt_proj folds rescale the quantized InProjOut / XProjOut tap
activations themselves, which is what flattens outlier channels before
activation fake-quant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .model import MambaModel, TapPoint, tap_key
from .stats import StatsMap

# Consumers the calibration taps can provide activation absmax for, applied in
# this order. The in_proj target needs the (untapped) norm output and is only
# reachable through explicit factors.
DEFAULT_TARGETS = ("conv", "x_proj", "dt_proj", "out_proj")
ALL_TARGETS = DEFAULT_TARGETS + ("in_proj",)

# target -> tap the consumed activation is read from (None: not tap-observable)
_TARGET_TAP = {
    "conv": TapPoint.IN_PROJ_OUT,
    "x_proj": TapPoint.CONV_OUT,
    "dt_proj": TapPoint.X_PROJ_OUT,
    "out_proj": TapPoint.GATE_OUT,
    "in_proj": None,
}


@dataclass
class SmoothingFactors:
    """Per-channel factors for one consuming layer in one block."""

    layer: int
    target: str  # consumer: conv | x_proj | dt_proj | out_proj | in_proj
    s: np.ndarray  # f32 [C_i], > 0
    alpha: float

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float32)
        if self.target not in ALL_TARGETS:
            raise ConfigError(f"unknown smoothing target {self.target!r}")
        if self.s.ndim != 1 or (self.s.size and self.s.min() <= 0):
            raise ConfigError(f"smoothing factors must be a positive vector, got {self.s.shape}")

    @property
    def tap(self) -> Optional[TapPoint]:
        """Tap the consumed activation is observed at (None for in_proj)."""
        return _TARGET_TAP[self.target]

    def to_dict(self) -> dict:
        tap = self.tap
        return {
            "tap": tap_key(self.layer, tap) if tap is not None else f"layers.{self.layer}.norm_out",
            "target": self.target,
            "alpha": self.alpha,
            "s": [float(v) for v in self.s],
        }


def compute_smoothing(act_absmax: np.ndarray, w_absmax: np.ndarray, alpha: float) -> np.ndarray:
    """s_j = max|X_j|^alpha / max|W_j|^(1-alpha); degenerate channels get 1."""
    act = np.asarray(act_absmax, dtype=np.float64)
    w = np.asarray(w_absmax, dtype=np.float64)
    if act.shape != w.shape or act.ndim != 1:
        raise ShapeError(f"absmax length mismatch: {act.shape} vs {w.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"migration strength alpha must be in [0, 1], got {alpha}")
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.power(act, alpha) / np.power(w, 1.0 - alpha)
    s = np.where(np.isfinite(s) & (s > 0.0), s, 1.0)
    return s.astype(np.float32)


def _consumer_col_absmax(lw, target: str) -> np.ndarray:
    """Column absmax of the consuming weight over its input dimension."""
    tables = {
        "conv": lambda: np.abs(lw.conv_weight).max(axis=0),
        "x_proj": lambda: np.abs(lw.x_proj).max(axis=0),
        "dt_proj": lambda: np.abs(lw.dt_proj_weight).max(axis=0),
        "out_proj": lambda: np.abs(lw.out_proj).max(axis=0),
        "in_proj": lambda: np.abs(lw.in_proj).max(axis=0),
    }
    return tables[target]()


def _consumed_act_absmax(stats_map: StatsMap, layer: int, target: str, lw) -> np.ndarray:
    tap = _TARGET_TAP[target]
    if tap is None:
        raise ConfigError(
            "target 'in_proj' consumes the norm output, which no tap records; "
            "construct its SmoothingFactors explicitly"
        )
    key = (layer, tap)
    if key not in stats_map:
        raise ConfigError(f"calibration stats missing for {tap_key(layer, tap)}")
    absmax = stats_map[key].absmax
    if target == "conv":
        return absmax[: lw.conv_weight.shape[1]]
    if target == "dt_proj":
        return absmax[: lw.dt_proj_weight.shape[1]]
    return absmax


def compute_model_smoothing(
    model: MambaModel,
    stats_map: StatsMap,
    alpha: float,
    targets: Sequence[str] = DEFAULT_TARGETS,
) -> list[SmoothingFactors]:
    """Factors for every (layer, target), from calibration stats and weights."""
    factors = []
    for layer, lw in enumerate(model.layers):
        for target in targets:
            act = _consumed_act_absmax(stats_map, layer, target, lw)
            w = _consumer_col_absmax(lw, target)
            factors.append(SmoothingFactors(layer, target, compute_smoothing(act, w, alpha), alpha))
    return factors


def apply_smoothing(model: MambaModel, factors: Sequence[SmoothingFactors]) -> MambaModel:
    """Return a smoothed copy; unquantized output is unchanged (within f32)."""
    out = model.copy()
    for f in factors:
        if not 0 <= f.layer < len(out.layers):
            raise ConfigError(f"smoothing factor references layer {f.layer} of {len(out.layers)}")
        lw = out.layers[f.layer]
        s = f.s.astype(np.float32)
        if f.target == "conv":
            d_inner = lw.conv_weight.shape[1]
            if s.shape != (d_inner,):
                raise ShapeError(f"conv smoothing expects [{d_inner}], got {s.shape}")
            lw.in_proj[:d_inner, :] /= s[:, None]
            lw.conv_weight *= s[None, :]
        elif f.target == "dt_proj":
            dt_rank = lw.dt_proj_weight.shape[1]
            if s.shape != (dt_rank,):
                raise ShapeError(f"dt_proj smoothing expects [{dt_rank}], got {s.shape}")
            lw.x_proj[:dt_rank, :] /= s[:, None]
            lw.dt_proj_weight *= s[None, :]
        elif f.target == "x_proj":
            d_inner = lw.x_proj.shape[1]
            if s.shape != (d_inner,):
                raise ShapeError(f"x_proj smoothing expects [{d_inner}], got {s.shape}")
            prev = lw.pre_scale_x if lw.pre_scale_x is not None else np.ones(d_inner, np.float32)
            lw.pre_scale_x = (prev / s).astype(np.float32)
            lw.x_proj *= s[None, :]
        elif f.target == "out_proj":
            d_inner = lw.out_proj.shape[1]
            if s.shape != (d_inner,):
                raise ShapeError(f"out_proj smoothing expects [{d_inner}], got {s.shape}")
            prev = lw.pre_scale_out if lw.pre_scale_out is not None else np.ones(d_inner, np.float32)
            lw.pre_scale_out = (prev / s).astype(np.float32)
            lw.out_proj *= s[None, :]
        elif f.target == "in_proj":
            d_model = lw.in_proj.shape[1]
            if s.shape != (d_model,):
                raise ShapeError(f"in_proj smoothing expects [{d_model}], got {s.shape}")
            lw.norm_weight /= s
            lw.in_proj *= s[None, :]
        else:
            raise ConfigError(f"no producer can absorb the inverse scale for {f.target!r}")
    return out


def transform_stats(stats_map: StatsMap, factors: Sequence[SmoothingFactors]) -> StatsMap:
    """Rescale calibration stats to match the smoothed model's tap activations.

    Only the conv and dt_proj folds change tap distributions (tap channels
    divide by s exactly); pre_scale multipliers apply downstream of their tap.
    """
    out = {key: st.copy() for key, st in stats_map.items()}
    for f in factors:
        if f.target == "conv":
            key = (f.layer, TapPoint.IN_PROJ_OUT)
            sl = slice(0, f.s.size)
        elif f.target == "dt_proj":
            key = (f.layer, TapPoint.X_PROJ_OUT)
            sl = slice(0, f.s.size)
        else:
            continue
        if key not in out:
            continue
        st = out[key]
        s32 = f.s.astype(np.float32)
        s64 = f.s.astype(np.float64)
        st.absmax[sl] /= s32
        st.sum[sl] /= s64
        st.sum_sq[sl] /= s64 * s64
    return out
