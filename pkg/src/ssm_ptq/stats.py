"""Calibration-time channel statistics and the 6-sigma outlier-channel detector.

ChannelStats objects are mergeable (absmax by max, count/sum/sum_sq by sum),
so calibration can be sharded and combined. Outliers at a tap are channels
whose absmax exceeds mean + sigma_mult * std of the per-channel absmax
distribution (population std, strict inequality).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .model import (
    ALL_TAPS,
    Hook,
    HookSet,
    MambaModel,
    ModelConfig,
    TapPoint,
    model_forward,
    tap_key,
)

BASIS_CHANNEL_ABSMAX = "channel_absmax"
BASIS_ACTIVATION = "activation"


def tap_width(config: ModelConfig, tap: TapPoint) -> int:
    """Channel count of a tap's [T x C] activation."""
    widths = {
        TapPoint.IN_PROJ_OUT: 2 * config.d_inner,
        TapPoint.CONV_OUT: config.d_inner,
        TapPoint.X_PROJ_OUT: config.dt_rank + 2 * config.d_state,
        TapPoint.DT_PROJ_OUT: config.d_inner,
        TapPoint.SSM_OUT: config.d_inner,
        TapPoint.GATE_OUT: config.d_inner,
        TapPoint.OUT_PROJ_OUT: config.d_model,
    }
    return widths[tap]


@dataclass
class ChannelStats:
    layer: int
    tap: TapPoint
    n_channels: int
    absmax: np.ndarray = field(default=None)  # f32 [C]
    count: int = 0
    sum: np.ndarray = field(default=None)  # f64 [C]
    sum_sq: np.ndarray = field(default=None)  # f64 [C]

    def __post_init__(self):
        if self.absmax is None:
            self.absmax = np.zeros(self.n_channels, dtype=np.float32)
        if self.sum is None:
            self.sum = np.zeros(self.n_channels, dtype=np.float64)
        if self.sum_sq is None:
            self.sum_sq = np.zeros(self.n_channels, dtype=np.float64)

    @property
    def key(self) -> str:
        return tap_key(self.layer, self.tap)

    def record(self, activation: np.ndarray) -> "ChannelStats":
        act = np.asarray(activation, dtype=np.float32)
        if act.ndim != 2 or act.shape[1] != self.n_channels:
            raise ShapeError(
                f"stats for {self.key} expect [T x {self.n_channels}], got {act.shape}"
            )
        np.maximum(self.absmax, np.abs(act).max(axis=0), out=self.absmax)
        self.count += act.shape[0]
        self.sum += act.sum(axis=0, dtype=np.float64)
        self.sum_sq += np.square(act, dtype=np.float64).sum(axis=0)
        return self

    def copy(self) -> "ChannelStats":
        return ChannelStats(
            self.layer, self.tap, self.n_channels,
            self.absmax.copy(), self.count, self.sum.copy(), self.sum_sq.copy(),
        )


def record(stats: ChannelStats, activation: np.ndarray) -> ChannelStats:
    return stats.record(activation)


def merge(a: ChannelStats, b: ChannelStats) -> ChannelStats:
    if (a.layer, a.tap, a.n_channels) != (b.layer, b.tap, b.n_channels):
        raise ConfigError(
            f"cannot merge stats for {a.key}[{a.n_channels}] with {b.key}[{b.n_channels}]"
        )
    return ChannelStats(
        a.layer,
        a.tap,
        a.n_channels,
        np.maximum(a.absmax, b.absmax),
        a.count + b.count,
        a.sum + b.sum,
        a.sum_sq + b.sum_sq,
    )


class RecordHook(Hook):
    """Observation-only hook: accumulates channel stats, returns input unchanged."""

    kind = "record"

    def __init__(self, stats: ChannelStats):
        self.stats = stats

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.stats.record(x)
        return x


StatsMap = dict[tuple[int, TapPoint], ChannelStats]


def make_stats_map(config: ModelConfig, taps: Sequence[TapPoint] = ALL_TAPS) -> StatsMap:
    return {
        (layer, tap): ChannelStats(layer, tap, tap_width(config, tap))
        for layer in range(config.n_layers)
        for tap in taps
    }


def calibrate_model(
    model: MambaModel,
    sequences: Iterable[np.ndarray],
    taps: Sequence[TapPoint] = ALL_TAPS,
) -> StatsMap:
    """Run record hooks over a corpus and return the merged per-tap stats."""
    stats = make_stats_map(model.config, taps)
    hooks = HookSet()
    for (layer, tap), st in stats.items():
        hooks.add(layer, tap, RecordHook(st))
    n = 0
    for seq in sequences:
        model_forward(model, seq, hooks)
        n += 1
    if n == 0:
        raise DataError("calibration corpus is empty")
    return stats


@dataclass
class OutlierReport:
    layer: int
    tap: TapPoint
    channel_absmax: np.ndarray
    mu: float
    sigma: float
    threshold: float
    outlier_channels: list[int]
    fraction: float

    def to_dict(self) -> dict:
        return {
            "tap": tap_key(self.layer, self.tap),
            "mu": self.mu,
            "sigma": self.sigma,
            "threshold": self.threshold,
            "outlier_channels": [int(c) for c in self.outlier_channels],
            "fraction": self.fraction,
            "channel_absmax": [float(v) for v in self.channel_absmax],
        }


def detect_outliers(
    stats: ChannelStats, sigma_mult: float = 6.0, basis: str = BASIS_CHANNEL_ABSMAX
) -> OutlierReport:
    """Flag channels whose absmax exceeds mu + sigma_mult * sigma (strict).

    basis "channel_absmax" (default): mu/sigma over the per-channel absmax
    vector. basis "activation": mu/sigma over all raw activation scalars seen
    at the tap (the alternative reading of "the layer mean").
    """
    if stats.count <= 0:
        raise DataError(f"no activations recorded for {stats.key}")
    if stats.n_channels < 2:
        raise DataError(f"{stats.key}: outlier detection needs >= 2 channels")
    vec = stats.absmax.astype(np.float64)
    if basis == BASIS_CHANNEL_ABSMAX:
        mu = float(vec.mean())
        sigma = float(math.sqrt(max(0.0, float(np.mean((vec - mu) ** 2)))))
    elif basis == BASIS_ACTIVATION:
        total = stats.n_channels * stats.count
        mu = float(stats.sum.sum() / total)
        var = float(stats.sum_sq.sum() / total - mu * mu)
        sigma = float(math.sqrt(max(0.0, var)))
    else:
        raise ConfigError(f"unknown outlier statistic basis {basis!r}")
    threshold = mu + sigma_mult * sigma
    outliers = [int(c) for c in np.nonzero(vec > threshold)[0]]
    return OutlierReport(
        layer=stats.layer,
        tap=stats.tap,
        channel_absmax=stats.absmax.copy(),
        mu=mu,
        sigma=sigma,
        threshold=threshold,
        outlier_channels=outliers,
        fraction=len(outliers) / stats.n_channels,
    )


def zero_outlier_hook(
    reports: Sequence[OutlierReport], scope: Iterable[TapPoint]
) -> HookSet:
    """HookSet zeroing each report's outlier channels at every scoped tap."""
    from .model import ZeroChannelsHook

    scope = set(scope)
    covered = {r.tap for r in reports}
    missing = scope - covered
    if missing:
        raise ConfigError(
            "no outlier report covers tap(s): " + ", ".join(sorted(t.value for t in missing))
        )
    hooks = HookSet()
    for rep in reports:
        if rep.tap in scope:
            hooks.add(rep.layer, rep.tap, ZeroChannelsHook(rep.outlier_channels))
    return hooks


# ---------------------------------------------------------------------------
# JSON round-trip for stats files
# ---------------------------------------------------------------------------


def stats_to_dict(stats_map: StatsMap) -> dict:
    taps = {}
    for (_, _), st in sorted(stats_map.items(), key=lambda kv: kv[1].key):
        taps[st.key] = {
            "n_channels": st.n_channels,
            "count": int(st.count),
            "absmax": [float(v) for v in st.absmax],
            "sum": [float(v) for v in st.sum],
            "sum_sq": [float(v) for v in st.sum_sq],
        }
    return {"taps": taps}


def report_from_dict(d: dict) -> OutlierReport:
    from .model import parse_tap_key

    layer, tap = parse_tap_key(d["tap"])
    return OutlierReport(
        layer=layer,
        tap=tap,
        channel_absmax=np.asarray(d["channel_absmax"], dtype=np.float32),
        mu=float(d["mu"]),
        sigma=float(d["sigma"]),
        threshold=float(d["threshold"]),
        outlier_channels=[int(c) for c in d["outlier_channels"]],
        fraction=float(d["fraction"]),
    )


def stats_from_dict(d: dict) -> StatsMap:
    from .model import parse_tap_key

    out: StatsMap = {}
    for key, rec in d["taps"].items():
        layer, tap = parse_tap_key(key)
        st = ChannelStats(
            layer,
            tap,
            int(rec["n_channels"]),
            np.asarray(rec["absmax"], dtype=np.float32),
            int(rec["count"]),
            np.asarray(rec["sum"], dtype=np.float64),
            np.asarray(rec["sum_sq"], dtype=np.float64),
        )
        out[(layer, tap)] = st
    return out
