"""Selective-SSM model: weights, tap points, hooks and the forward pass.

The block follows the reference Mamba composition: RMSNorm -> in_proj ->
{x-branch: causal conv -> SiLU -> x_proj -> (dt, B, C) -> dt_proj -> softplus
-> discretize -> selective scan} gated by SiLU(z) -> out_proj -> residual.
Named tap points expose every intermediate [T x C] activation to hooks.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from . import ops
from .archive import Tensor, load_archive, save_archive
from .errors import ConfigError, DataError, MissingTensorError, ShapeError
from .kernels import selective_scan_kernel


class TapPoint(enum.Enum):
    """Named activation views inside one block; values are the JSON/tap-key names."""

    IN_PROJ_OUT = "in_proj_out"
    CONV_OUT = "conv_out"
    X_PROJ_OUT = "x_proj_out"
    DT_PROJ_OUT = "dt_proj_out"
    SSM_OUT = "ssm_out"
    GATE_OUT = "gate_out"
    OUT_PROJ_OUT = "out_proj_out"

    @classmethod
    def from_name(cls, name: str) -> "TapPoint":
        for tap in cls:
            if tap.value == name:
                return tap
        raise ConfigError(f"unknown tap point {name!r}")


# The four linear-layer outputs; activation fake-quant may attach here and
# nowhere else (the SSM output and the effective matrices stay in f32).
QUANTIZABLE_TAPS = frozenset(
    {TapPoint.IN_PROJ_OUT, TapPoint.X_PROJ_OUT, TapPoint.DT_PROJ_OUT, TapPoint.OUT_PROJ_OUT}
)

ALL_TAPS = tuple(TapPoint)


def tap_key(layer: int, tap: TapPoint) -> str:
    return f"layers.{layer}.{tap.value}"


def parse_tap_key(key: str) -> tuple[int, TapPoint]:
    parts = key.split(".")
    if len(parts) != 3 or parts[0] != "layers":
        raise ConfigError(f"malformed tap key {key!r}")
    return int(parts[1]), TapPoint.from_name(parts[2])


class Hook:
    """Shape-preserving transform attached to a (layer, tap); kind labels it."""

    kind = "hook"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FnHook(Hook):
    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], kind: str = "fn"):
        self.fn = fn
        self.kind = kind

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fn(x)


class ZeroChannelsHook(Hook):
    """Zeroes the given channels of a [T x C] activation before downstream use."""

    kind = "zero_channels"

    def __init__(self, channels):
        self.channels = np.asarray(sorted(int(c) for c in channels), dtype=np.int64)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.channels.size == 0:
            return x
        if self.channels.size and self.channels[-1] >= x.shape[1]:
            raise ShapeError(
                f"zero_channels: channel {int(self.channels[-1])} out of range for width {x.shape[1]}"
            )
        out = x.copy()
        out[:, self.channels] = 0.0
        return out


class HookSet:
    """Per-(layer, tap) hook lists, applied in registration order."""

    def __init__(self):
        self._hooks: dict[tuple[int, TapPoint], list[Hook]] = {}

    def add(self, layer: int, tap: TapPoint, hook: Hook) -> "HookSet":
        self._hooks.setdefault((layer, tap), []).append(hook)
        return self

    def run(self, layer: int, tap: TapPoint, x: np.ndarray) -> np.ndarray:
        hooks = self._hooks.get((layer, tap))
        if not hooks:
            return x
        for hook in hooks:
            y = hook(x)
            if y.shape != x.shape:
                raise ShapeError(
                    f"hook {hook.kind!r} at {tap_key(layer, tap)} changed shape "
                    f"{x.shape} -> {y.shape}"
                )
            x = y
        return x

    def items(self) -> Iterator[tuple[tuple[int, TapPoint], list[Hook]]]:
        return iter(self._hooks.items())

    def __len__(self) -> int:
        return sum(len(v) for v in self._hooks.values())


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_state: int
    d_conv: int
    dt_rank: int
    vocab_size: int
    d_inner: int = 0  # defaults to 2 * d_model

    def __post_init__(self):
        if self.d_inner == 0:
            object.__setattr__(self, "d_inner", 2 * self.d_model)
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"ModelConfig.{f.name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {f.name: int(d[f.name]) for f in fields(cls) if f.name in d}
        missing = {f.name for f in fields(cls) if f.name != "d_inner"} - kwargs.keys()
        if missing:
            raise ConfigError(f"model config missing fields: {sorted(missing)}")
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MambaBlockWeights:
    """Time-invariant parameters of one block (all float32)."""

    in_proj: np.ndarray  # [2*d_inner, d_model]
    conv_weight: np.ndarray  # [d_conv, d_inner]
    x_proj: np.ndarray  # [dt_rank + 2*d_state, d_inner]
    dt_proj_weight: np.ndarray  # [d_inner, dt_rank]
    dt_proj_bias: np.ndarray  # [d_inner]
    A_log: np.ndarray  # [d_inner, d_state]
    D: np.ndarray  # [d_inner]
    out_proj: np.ndarray  # [d_model, d_inner]
    norm_weight: np.ndarray  # [d_model]
    # Smoothing multipliers fused into the consuming linear's input (None = 1).
    pre_scale_x: Optional[np.ndarray] = None  # [d_inner], x_proj input
    pre_scale_dt: Optional[np.ndarray] = None  # [dt_rank], dt_proj input
    pre_scale_out: Optional[np.ndarray] = None  # [d_inner], out_proj input

    def copy(self) -> "MambaBlockWeights":
        kwargs = {
            f.name: (None if getattr(self, f.name) is None else getattr(self, f.name).copy())
            for f in fields(self)
        }
        return MambaBlockWeights(**kwargs)


@dataclass
class MambaModel:
    config: ModelConfig
    embedding: np.ndarray  # [vocab_size, d_model]
    layers: list[MambaBlockWeights]
    norm_f: np.ndarray  # [d_model]
    lm_head: np.ndarray  # [vocab_size, d_model]

    def copy(self) -> "MambaModel":
        return MambaModel(
            config=self.config,
            embedding=self.embedding.copy(),
            layers=[lw.copy() for lw in self.layers],
            norm_f=self.norm_f.copy(),
            lm_head=self.lm_head.copy(),
        )


def discretize(A_log: np.ndarray, delta: np.ndarray, B: np.ndarray):
    """Zero-order-hold discretization: A̅ = exp(-exp(A_log) * Δ̅), B̅ = Δ̅ ⊙ B.

    A_log: [E, S]; delta: [T, E] (>= 0, softplus output); B: [T, S].
    Returns (a_bar [T, E, S], b_bar [T, E, S]).
    """
    A_log = np.asarray(A_log, dtype=np.float32)
    delta = np.asarray(delta, dtype=np.float32)
    B = np.asarray(B, dtype=np.float32)
    if A_log.ndim != 2 or delta.ndim != 2 or delta.shape[1] != A_log.shape[0]:
        raise ShapeError(f"discretize shapes incompatible: A_log {A_log.shape}, delta {delta.shape}")
    if B.ndim != 2 or B.shape[0] != delta.shape[0] or B.shape[1] != A_log.shape[1]:
        raise ShapeError(f"discretize B shape {B.shape} incompatible with {A_log.shape}")
    a_cont = np.exp(A_log, dtype=np.float32)
    a_bar = np.exp(-(delta[:, :, None] * a_cont[None, :, :]), dtype=np.float32)
    b_bar = delta[:, :, None] * B[:, None, :]
    return a_bar, b_bar


def selective_scan(a_bar, b_bar, c_t, u, d, h0=None):
    """Sequential selective-scan recurrence; dispatches to the active kernel."""
    a_bar = np.asarray(a_bar, dtype=np.float32)
    b_bar = np.asarray(b_bar, dtype=np.float32)
    c_t = np.asarray(c_t, dtype=np.float32)
    u = np.asarray(u, dtype=np.float32)
    d = np.asarray(d, dtype=np.float32)
    if a_bar.shape != b_bar.shape or a_bar.ndim != 3:
        raise ShapeError(f"selective_scan A̅ {a_bar.shape} vs B̅ {b_bar.shape}")
    n_steps, n_chan, n_state = a_bar.shape
    if c_t.shape != (n_steps, n_state):
        raise ShapeError(f"selective_scan C {c_t.shape}, expected {(n_steps, n_state)}")
    if u.shape != (n_steps, n_chan):
        raise ShapeError(f"selective_scan u {u.shape}, expected {(n_steps, n_chan)}")
    if d.shape != (n_chan,):
        raise ShapeError(f"selective_scan D {d.shape}, expected {(n_chan,)}")
    if h0 is not None and np.asarray(h0).shape != (n_chan, n_state):
        raise ShapeError(f"selective_scan h0 {np.asarray(h0).shape}, expected {(n_chan, n_state)}")
    return selective_scan_kernel(a_bar, b_bar, c_t, u, d, h0)


def block_forward(
    w: MambaBlockWeights, u: np.ndarray, hooks: Optional[HookSet] = None, layer: int = 0
) -> np.ndarray:
    """One block on a [T x d_model] input; returns input + block output."""
    hooks = hooks if hooks is not None else HookSet()
    u = np.asarray(u, dtype=np.float32)
    d_inner = w.in_proj.shape[0] // 2
    dt_rank = w.dt_proj_weight.shape[1]
    d_state = w.A_log.shape[1]

    resid = u
    xn = ops.rmsnorm(u, w.norm_weight)
    xz = ops.matmul(xn, w.in_proj.T)
    xz = hooks.run(layer, TapPoint.IN_PROJ_OUT, xz)
    xb, z = xz[:, :d_inner], xz[:, d_inner:]

    xc = ops.silu(ops.causal_conv1d(xb, w.conv_weight))
    xc = hooks.run(layer, TapPoint.CONV_OUT, xc)

    x_in = xc * w.pre_scale_x[None, :] if w.pre_scale_x is not None else xc
    xdbl = ops.matmul(x_in, w.x_proj.T)
    xdbl = hooks.run(layer, TapPoint.X_PROJ_OUT, xdbl)
    dt = xdbl[:, :dt_rank]
    b_t = xdbl[:, dt_rank : dt_rank + d_state]
    c_t = xdbl[:, dt_rank + d_state :]

    dt_in = dt * w.pre_scale_dt[None, :] if w.pre_scale_dt is not None else dt
    dt_lin = ops.matmul(dt_in, w.dt_proj_weight.T) + w.dt_proj_bias[None, :]
    dt_lin = hooks.run(layer, TapPoint.DT_PROJ_OUT, dt_lin)
    delta = ops.softplus(dt_lin)

    a_bar, b_bar = discretize(w.A_log, delta, b_t)
    y, _ = selective_scan(a_bar, b_bar, c_t, xc, w.D)
    y = hooks.run(layer, TapPoint.SSM_OUT, y)

    g = y * ops.silu(z)
    g = hooks.run(layer, TapPoint.GATE_OUT, g)

    g_in = g * w.pre_scale_out[None, :] if w.pre_scale_out is not None else g
    out = ops.matmul(g_in, w.out_proj.T)
    out = hooks.run(layer, TapPoint.OUT_PROJ_OUT, out)
    return resid + out


def model_forward(
    model: MambaModel, token_ids: np.ndarray, hooks: Optional[HookSet] = None
) -> np.ndarray:
    """Embedding -> blocks -> final norm -> lm head; returns [T x vocab] logits."""
    ids = np.asarray(token_ids)
    if ids.ndim != 1:
        raise ShapeError(f"token_ids must be rank-1, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise DataError(
            f"token id out of range [0, {model.config.vocab_size}): "
            f"min {int(ids.min())}, max {int(ids.max())}"
        )
    h = model.embedding[ids].astype(np.float32, copy=True)
    for i, lw in enumerate(model.layers):
        h = block_forward(lw, h, hooks, i)
    h = ops.rmsnorm(h, model.norm_f)
    return ops.matmul(h, model.lm_head.T)


# ---------------------------------------------------------------------------
# Canonical archive naming and model IO
# ---------------------------------------------------------------------------

_LAYER_FIELDS = (
    ("in_proj", "in_proj", lambda c: (2 * c.d_inner, c.d_model)),
    ("conv1d.weight", "conv_weight", lambda c: (c.d_conv, c.d_inner)),
    ("x_proj", "x_proj", lambda c: (c.dt_rank + 2 * c.d_state, c.d_inner)),
    ("dt_proj.weight", "dt_proj_weight", lambda c: (c.d_inner, c.dt_rank)),
    ("dt_proj.bias", "dt_proj_bias", lambda c: (c.d_inner,)),
    ("A_log", "A_log", lambda c: (c.d_inner, c.d_state)),
    ("D", "D", lambda c: (c.d_inner,)),
    ("out_proj", "out_proj", lambda c: (c.d_model, c.d_inner)),
    ("norm.weight", "norm_weight", lambda c: (c.d_model,)),
)

_PRE_SCALE_FIELDS = (
    ("x_proj.pre_scale", "pre_scale_x", lambda c: (c.d_inner,)),
    ("dt_proj.pre_scale", "pre_scale_dt", lambda c: (c.dt_rank,)),
    ("out_proj.pre_scale", "pre_scale_out", lambda c: (c.d_inner,)),
)


def canonical_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Required tensor names and shapes for a model archive."""
    shapes: dict[str, tuple[int, ...]] = {
        "embedding.weight": (config.vocab_size, config.d_model),
        "norm_f.weight": (config.d_model,),
        "lm_head.weight": (config.vocab_size, config.d_model),
    }
    for i in range(config.n_layers):
        for suffix, _, shape_fn in _LAYER_FIELDS:
            shapes[f"layers.{i}.{suffix}"] = shape_fn(config)
    return shapes


def model_tensors(model: MambaModel) -> dict[str, np.ndarray]:
    """Flatten a model into its canonical named-tensor map."""
    out: dict[str, np.ndarray] = {
        "embedding.weight": model.embedding,
        "norm_f.weight": model.norm_f,
        "lm_head.weight": model.lm_head,
    }
    for i, lw in enumerate(model.layers):
        for suffix, attr, _ in _LAYER_FIELDS:
            out[f"layers.{i}.{suffix}"] = getattr(lw, attr)
        for suffix, attr, _ in _PRE_SCALE_FIELDS:
            value = getattr(lw, attr)
            if value is not None:
                out[f"layers.{i}.{suffix}"] = value
    return out


def save_model(model: MambaModel, archive_path, config_path=None) -> None:
    save_archive(model_tensors(model), archive_path)
    if config_path is not None:
        Path(config_path).write_text(
            json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n"
        )


def _resolve_f32(tensors: dict[str, Tensor], name: str, shape: tuple[int, ...]) -> np.ndarray:
    """Fetch a tensor as f32, transparently dequantizing int payloads via
    their "<name>.scale" sidecar."""
    if name not in tensors:
        raise MissingTensorError(f"archive is missing tensor {name!r}")
    t = tensors[name]
    if t.shape != shape:
        raise ShapeError(f"tensor {name!r} has shape {list(t.shape)}, expected {list(shape)}")
    if t.dtype == "f32":
        return t.data
    scale_name = f"{name}.scale"
    if scale_name not in tensors:
        raise MissingTensorError(f"archive is missing tensor {scale_name!r} for {t.dtype} payload")
    scales = tensors[scale_name].data
    if scales.ndim == 0:
        return t.data.astype(np.float32) / np.float32(scales)
    if scales.shape == (shape[0],):
        return t.data.astype(np.float32) / scales.reshape((-1,) + (1,) * (len(shape) - 1))
    raise ShapeError(
        f"tensor {scale_name!r} has shape {list(scales.shape)}, expected scalar or [{shape[0]}]"
    )


def model_from_tensors(tensors: dict[str, Tensor], config: ModelConfig) -> MambaModel:
    layers = []
    for i in range(config.n_layers):
        kwargs = {}
        for suffix, attr, shape_fn in _LAYER_FIELDS:
            kwargs[attr] = _resolve_f32(tensors, f"layers.{i}.{suffix}", shape_fn(config))
        for suffix, attr, shape_fn in _PRE_SCALE_FIELDS:
            name = f"layers.{i}.{suffix}"
            if name in tensors:
                kwargs[attr] = _resolve_f32(tensors, name, shape_fn(config))
        layers.append(MambaBlockWeights(**kwargs))
    return MambaModel(
        config=config,
        embedding=_resolve_f32(tensors, "embedding.weight", (config.vocab_size, config.d_model)),
        layers=layers,
        norm_f=_resolve_f32(tensors, "norm_f.weight", (config.d_model,)),
        lm_head=_resolve_f32(tensors, "lm_head.weight", (config.vocab_size, config.d_model)),
    )


def load_model(archive_path, config_path) -> MambaModel:
    """Load a model archive, shape-checking every tensor against the config."""
    config = ModelConfig.from_json_file(config_path)
    return model_from_tensors(load_archive(archive_path), config)
