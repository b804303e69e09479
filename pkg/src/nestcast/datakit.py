"""Synthetic data with planted regions, chronological splits, normalization,
and the binary dataset format.

Node series are built as region trend + per-node offset + iid gaussian noise.
Each node draws from its own RNG stream keyed by (seed, node index), so
generation is order-independent and reproducible node by node.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .binio import (
    MAGIC_DATASET,
    TruncatedFileError,
    pack_u32,
    read_file,
    write_file,
)

_HEADER = struct.Struct("<5I")  # n_nodes, n_steps, n_channels, steps_per_day, start_offset


@dataclass
class SeriesTensor:
    """A panel of node series: values[n_nodes, n_steps, n_channels], float64.

    start_offset is the absolute step index of column 0 within the daily/weekly
    cycle; slicing keeps it honest so calendar embeddings stay aligned.
    """

    values: np.ndarray
    steps_per_day: int
    days_per_week: int = 7
    start_offset: int = 0
    labels: np.ndarray | None = None
    region_trends: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"values must be (nodes, steps, channels), got {self.values.shape}")
        if self.steps_per_day < 1 or self.days_per_week < 1:
            raise ValueError("steps_per_day and days_per_week must be >= 1")
        if self.start_offset < 0:
            raise ValueError(f"start_offset must be >= 0, got {self.start_offset}")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def slice_time(self, start: int, stop: int) -> "SeriesTensor":
        if not (0 <= start < stop <= self.n_steps):
            raise ValueError(f"bad time slice [{start}, {stop}) for {self.n_steps} steps")
        trends = None if self.region_trends is None else self.region_trends[:, start:stop]
        return replace(
            self,
            values=self.values[:, start:stop],
            start_offset=self.start_offset + start,
            region_trends=trends,
        )


def synthetic_region_trends(
    n_regions: int,
    n_steps: int,
    steps_per_day: int,
    days_per_week: int,
    start_offset: int,
    channels: int,
    separation: float,
    regime_period_days: float,
    regime_strength: float,
    seed: int,
    wander_strength: float = 0.0,
    wander_lag: int = 4,
) -> np.ndarray:
    """Planted per-region trends: daily + weekly sinusoids, optional piecewise
    regime offsets, optional lead-lag wander. Returns
    (n_regions, n_steps, channels).

    The wander is one shared trajectory that region m trails by m*wander_lag
    steps: region 0 leads, the others repeat its path later. The trajectory
    is moving-average smoothed white noise, so beyond the smoothing width it
    cannot be extrapolated from any region's own past; the only way to know a
    lagging region's near future is to have watched the leader.
    """
    t = np.arange(start_offset, start_offset + n_steps, dtype=np.float64)
    day = 2.0 * math.pi * t / steps_per_day
    week = 2.0 * math.pi * t / (steps_per_day * days_per_week)
    trends = np.empty((n_regions, n_steps, channels), dtype=np.float64)
    wander = None
    if wander_strength > 0:
        if wander_lag < 0:
            raise ValueError(f"wander_lag must be >= 0, got {wander_lag}")
        smooth = 4
        max_lag = wander_lag * (n_regions - 1)
        wrng = np.random.default_rng([seed, 4])
        white = wrng.normal(size=n_steps + max_lag + smooth - 1)
        kernel = np.full(smooth, 1.0 / smooth)
        path = np.convolve(white, kernel, mode="valid")
        # unit variance after averaging, then scaled to the requested size
        wander = path * (wander_strength * math.sqrt(float(smooth)))
    for m in range(n_regions):
        rng = np.random.default_rng([seed, 1, m])
        for c in range(channels):
            level = separation * m
            amp_d = separation * rng.uniform(0.5, 1.0)
            amp_w = separation * rng.uniform(0.25, 0.5)
            ph_d, ph_w = rng.uniform(0.0, 2.0 * math.pi, size=2)
            trends[m, :, c] = level + amp_d * np.sin(day + ph_d) + amp_w * np.sin(week + ph_w)
        if regime_period_days > 0 and regime_strength > 0:
            seg_len = max(1, int(round(regime_period_days * steps_per_day)))
            n_seg = (n_steps + seg_len - 1) // seg_len
            offsets = rng.uniform(-1.0, 1.0, size=(n_seg, channels)) * regime_strength
            for s in range(n_seg):
                trends[m, s * seg_len : (s + 1) * seg_len, :] += offsets[s]
        if wander is not None:
            max_lag = wander_lag * (n_regions - 1)
            lag = wander_lag * m
            seg = wander[max_lag - lag : max_lag - lag + n_steps]
            trends[m] += seg[:, None]
    return trends


def generate_synthetic(
    n_regions: int = 3,
    nodes_per_region: int = 16,
    n_days: int = 30,
    steps_per_day: int = 96,
    channels: int = 1,
    noise_sigma: float = 1.0,
    separation: float = 5.0,
    node_offset_sigma: float = 0.25,
    regime_period_days: float = 0.0,
    regime_strength: float = 0.0,
    wander_strength: float = 0.0,
    wander_lag: int = 4,
    days_per_week: int = 7,
    start_offset: int = 0,
    seed: int = 0,
) -> SeriesTensor:
    """Planted-region panel; labels and region trends ride along for tests."""
    if n_regions < 1 or nodes_per_region < 1 or n_days < 1:
        raise ValueError("n_regions, nodes_per_region and n_days must be >= 1")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    n_steps = n_days * steps_per_day
    n_nodes = n_regions * nodes_per_region
    trends = synthetic_region_trends(
        n_regions,
        n_steps,
        steps_per_day,
        days_per_week,
        start_offset,
        channels,
        separation,
        regime_period_days,
        regime_strength,
        seed,
        wander_strength=wander_strength,
        wander_lag=wander_lag,
    )
    values = np.empty((n_nodes, n_steps, channels), dtype=np.float64)
    for i in range(n_nodes):
        rng = np.random.default_rng([seed, 2, i])
        offset = rng.normal(0.0, node_offset_sigma, size=channels)
        noise = rng.normal(0.0, noise_sigma, size=(n_steps, channels))
        values[i] = trends[i // nodes_per_region] + offset + noise
    labels = np.repeat(np.arange(n_regions), nodes_per_region)
    return SeriesTensor(
        values,
        steps_per_day=steps_per_day,
        days_per_week=days_per_week,
        start_offset=start_offset,
        labels=labels,
        region_trends=trends,
    )


def chronological_split(
    series: SeriesTensor,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    min_length: int = 1,
) -> tuple[SeriesTensor, SeriesTensor, SeriesTensor]:
    """Contiguous train/val/test split covering [0, n_steps) exactly."""
    r1, r2, r3 = ratios
    if min(r1, r2, r3) <= 0 or abs(r1 + r2 + r3 - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")
    t = series.n_steps
    b1 = int(math.floor(t * r1 + 1e-9))
    b2 = int(math.floor(t * (r1 + r2) + 1e-9))
    lengths = (b1, b2 - b1, t - b2)
    if min(lengths) < min_length:
        raise ValueError(f"split lengths {lengths} below minimum {min_length}")
    return series.slice_time(0, b1), series.slice_time(b1, b2), series.slice_time(b2, t)


@dataclass
class NormStats:
    """Per-node per-channel z-score statistics, shaped (n_nodes, 1, n_channels)."""

    mean: np.ndarray
    std: np.ndarray


def compute_norm_stats(train: SeriesTensor, std_floor: float = 1e-8) -> NormStats:
    mean = train.values.mean(axis=1, keepdims=True)
    std = train.values.std(axis=1, keepdims=True)
    return NormStats(mean=mean, std=np.maximum(std, std_floor))


def normalize(series: SeriesTensor, stats: NormStats) -> SeriesTensor:
    if stats.mean.shape[0] != series.n_nodes or stats.mean.shape[2] != series.n_channels:
        raise ValueError(
            f"stats for {stats.mean.shape[0]} nodes / {stats.mean.shape[2]} channels "
            f"applied to ({series.n_nodes}, {series.n_channels})"
        )
    return replace(series, values=(series.values - stats.mean) / stats.std)


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Invert normalize on any (n_nodes, steps, n_channels) block."""
    return values * stats.std + stats.mean


def save_dataset(path, series: SeriesTensor) -> None:
    header = pack_u32(
        series.n_nodes,
        series.n_steps,
        series.n_channels,
        series.steps_per_day,
        series.start_offset,
    )
    write_file(path, MAGIC_DATASET, header + np.ascontiguousarray(series.values).tobytes())


def _declared_payload_len(payload: bytes) -> int:
    if len(payload) < _HEADER.size:
        raise TruncatedFileError(f"payload shorter than the {_HEADER.size}-byte header")
    n_nodes, n_steps, n_channels, _, _ = _HEADER.unpack(payload[: _HEADER.size])
    return _HEADER.size + 8 * n_nodes * n_steps * n_channels


def load_dataset(path) -> SeriesTensor:
    payload = read_file(path, MAGIC_DATASET, _declared_payload_len)
    n_nodes, n_steps, n_channels, steps_per_day, start_offset = _HEADER.unpack(
        payload[: _HEADER.size]
    )
    values = np.frombuffer(payload[_HEADER.size :], dtype="<f8").reshape(
        n_nodes, n_steps, n_channels
    )
    return SeriesTensor(
        values.copy(),
        steps_per_day=steps_per_day,
        start_offset=start_offset,
    )
