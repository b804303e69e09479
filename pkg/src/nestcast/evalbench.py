"""Forecast metrics, attention cost accounting, and wall-time benchmarking.

MAPE masks targets with |truth| below a threshold instead of dividing by
near-zeros; a fully masked target yields NaN, never a fake 0. The multiply-add
model here is closed-form and must agree exactly with the instrumented
counters in numcore: only matmul-type products are counted, split into an
"attention" bucket (QK^T and probs@V inside scaled-dot attention) and a
"projection" bucket (every linear/matmul elsewhere). Softmax, scaling, and
additions are free by convention.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig


def _paired(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty arrays have no error")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.abs(pred - truth).mean())


def rmse(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    e = pred - truth
    return float(np.sqrt((e * e).mean()))


@dataclass
class MapeResult:
    value_pct: float  # NaN when every target is masked
    n_used: int
    n_masked: int


def mape(pred, truth, threshold: float = 1e-4) -> MapeResult:
    """Mean absolute percentage error over targets with |truth| >= threshold."""
    pred, truth = _paired(pred, truth)
    keep = np.abs(truth) >= threshold
    n_used = int(keep.sum())
    if n_used == 0:
        return MapeResult(float("nan"), 0, int(truth.size))
    pct = np.abs((pred[keep] - truth[keep]) / truth[keep]).mean() * 100.0
    return MapeResult(float(pct), n_used, int(truth.size - n_used))


def metrics_report(pred, truth, threshold: float = 1e-4) -> dict:
    m = mape(pred, truth, threshold)
    return {
        "mae": mae(pred, truth),
        "rmse": rmse(pred, truth),
        "mape_pct": None if m.n_used == 0 else m.value_pct,
        "mape_masked": m.n_masked,
    }


def per_step_metrics(pred, truth) -> dict[int, dict]:
    """mae/rmse at each 1-based step offset for (N, H, C) forecasts."""
    pred, truth = _paired(pred, truth)
    if pred.ndim != 3:
        raise ValueError(f"expected (N, H, C), got {pred.shape}")
    return {
        h + 1: {"mae": mae(pred[:, h], truth[:, h]), "rmse": rmse(pred[:, h], truth[:, h])}
        for h in range(pred.shape[1])
    }


def quantile_coverage(quantile_preds, truth, levels) -> dict:
    """Empirical coverage of stacked quantile forecasts.

    quantile_preds[q, ...] per level; per-level coverage is the fraction of
    targets at or below the predicted quantile (inclusive); band coverage is
    the fraction inside [lowest level, highest level].
    """
    preds = np.asarray(quantile_preds, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    levels = tuple(float(x) for x in levels)
    if len(levels) < 1 or preds.shape[0] != len(levels):
        raise ValueError(
            f"need one prediction block per level: {preds.shape[0]} blocks, {len(levels)} levels"
        )
    if preds.shape[1:] != truth.shape:
        raise ValueError(f"shape mismatch: preds {preds.shape} vs truth {truth.shape}")
    if truth.size == 0:
        raise ValueError("empty arrays have no coverage")
    per_level = {
        tau: float((truth <= preds[j]).mean()) for j, tau in enumerate(levels)
    }
    band = float(((preds[0] <= truth) & (truth <= preds[-1])).mean())
    return {
        "per_level": per_level,
        "band": band,
        "nominal_band": levels[-1] - levels[0],
    }


def attention_cost(
    cfg: ModelConfig, batch: int = 1, with_guidance: bool = True
) -> dict[str, int]:
    """Exact multiply counts of one forward pass, split like the counters.

    with_guidance mirrors the forward contract: a zero-guidance pass encodes
    the region window once and reuses it, a guided pass encodes twice.
    """
    n, m, b = cfg.n_nodes, cfg.n_regions, batch
    d, da = cfg.embed_dim, cfg.attn_dim
    lc = cfg.lookback * cfg.channels
    pc = cfg.patch_len * cfg.channels
    q = cfg.n_quantiles

    attention = 0
    projection = b * n * lc * d
    projection += (2 if with_guidance else 1) * b * m * pc * d
    if cfg.cross_attention:
        attention += cfg.layers * 4 * b * n * m * da
        projection += cfg.layers * 4 * b * d * da * (n + m)
    if cfg.use_mlp:
        projection += cfg.layers * 4 * b * d * d * (n + m)
    if cfg.cross_attention:
        attention += 2 * b * n * m * da
        projection += 2 * b * d * da * (n + m)
    projection += b * n * d * pc
    projection += 2 * q * b * m * d * pc
    return {
        "attention": attention,
        "projection": projection,
        "total": attention + projection,
    }


def self_attention_reference_cost(n_tokens: int, attn_dim: int, layers: int) -> int:
    """Attention-bucket multiplies if the same stack ran full token-to-token
    self-attention instead: 2 * N^2 * d_a per layer."""
    return 2 * layers * n_tokens * n_tokens * attn_dim


@dataclass
class BenchResult:
    median_s: float
    runs: list[float]
    n_warmup: int


def bench(fn, n_runs: int = 10, n_warmup: int = 2) -> BenchResult:
    """Median wall time of fn() over n_runs timed calls after n_warmup."""
    if n_runs < 1 or n_warmup < 0:
        raise ValueError("need n_runs >= 1 and n_warmup >= 0")
    for _ in range(n_warmup):
        fn()
    runs = []
    for _ in range(n_runs):
        start = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - start)
    return BenchResult(median_s=float(np.median(runs)), runs=runs, n_warmup=n_warmup)


def write_csv(path, rows: list[dict]) -> None:
    """Write dict rows; columns ordered by first appearance across rows."""
    if not rows:
        raise ValueError("no rows to write")
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
