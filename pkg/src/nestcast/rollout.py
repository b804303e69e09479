"""Autoregressive multi-patch forecasting.

A trained model emits one patch per forward pass. To reach an arbitrary
horizon H the rollout runs ceil(H / P) passes, feeding each pass's node patch
back into the sliding history. Guidance for the first patch comes from the
model's own boundary quantiles under zero guidance (it has not seen the
future yet); every later patch is guided by the median of the next-region
quantiles the previous pass produced. Passing the true pooled series instead
gives the teacher-forced variant used for gap analysis.

Past-guidance models pool their own sliding history instead, which needs the
node-to-region labels.

The regional quantile track mirrors the node forecast: window k's quantiles
are the ones that guided it (boundary quantiles for k = 0, next-region
quantiles from pass k-1 afterwards), concatenated and trimmed to H steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .model import ModelConfig, forward
from .regionalize import pool_series


@dataclass
class RolloutResult:
    node: np.ndarray  # (N, H, C)
    region_quantiles: np.ndarray  # (Q, M, H, C)
    n_patches: int
    horizon: int


def persistence_forecast(context: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed step: the no-model baseline."""
    context = np.asarray(context, dtype=np.float64)
    if context.ndim != 3 or context.shape[1] < 1:
        raise ValueError(f"context must be (N, T >= 1, C), got {context.shape}")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    return np.repeat(context[:, -1:, :], horizon, axis=1)


def _validate_rollout_args(cfg, context, horizon, labels, oracle_pooled, n_patches):
    if context.ndim != 3 or context.shape[0] != cfg.n_nodes or context.shape[2] != cfg.channels:
        raise ValueError(
            f"context shape {context.shape} does not match ({cfg.n_nodes}, T, {cfg.channels})"
        )
    need = cfg.lookback if cfg.guidance_mode == "future" else max(cfg.lookback, cfg.patch_len)
    if context.shape[1] < need:
        raise ValueError(f"context has {context.shape[1]} steps, needs at least {need}")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if cfg.guidance_mode == "past" and labels is None:
        raise ValueError("past-guidance rollout needs node-to-region labels for pooling")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (cfg.n_nodes,):
            raise ValueError(f"labels shape {labels.shape} does not match ({cfg.n_nodes},)")
    if oracle_pooled is not None:
        oracle_pooled = np.asarray(oracle_pooled, dtype=np.float64)
        need_steps = n_patches * cfg.patch_len
        if oracle_pooled.ndim != 3 or oracle_pooled.shape[0] != cfg.n_regions or (
            oracle_pooled.shape[2] != cfg.channels
        ):
            raise ValueError(
                f"oracle_pooled shape {oracle_pooled.shape} does not match "
                f"({cfg.n_regions}, T, {cfg.channels})"
            )
        if oracle_pooled.shape[1] < need_steps:
            raise ValueError(
                f"oracle_pooled covers {oracle_pooled.shape[1]} steps, "
                f"needs {need_steps} for {n_patches} patches"
            )
    return labels, oracle_pooled


def rollout(
    ps: nc.ParamStore,
    cfg: ModelConfig,
    context: np.ndarray,
    t_last: int,
    horizon: int,
    labels: np.ndarray | None = None,
    oracle_pooled: np.ndarray | None = None,
) -> RolloutResult:
    """Forecast `horizon` steps past t_last, starting from observed context.

    context: (N, T, C) node history whose last column is step t_last.
    oracle_pooled: optional (M, >= ceil(H/P)*P, C) true pooled values for the
    steps after t_last; when given, patches are teacher-forced with it.
    """
    context = np.asarray(context, dtype=np.float64)
    p = cfg.patch_len
    n_patches = -(-horizon // p)
    labels, oracle_pooled = _validate_rollout_args(
        cfg, context, horizon, labels, oracle_pooled, n_patches
    )

    hist = context.copy()
    t = int(t_last)
    node_patches = []
    window_quantiles = []
    with nc.no_grad():
        for k in range(n_patches):
            win = hist[:, -cfg.lookback :]
            if cfg.guidance_mode == "past":
                guidance = pool_series(hist[:, -p:], labels, cfg.n_regions)
                bundle = forward(ps, cfg, win, guidance, t)
                if k == 0:
                    window_quantiles.append(bundle.boundary_values().copy())
            elif oracle_pooled is not None:
                guidance = oracle_pooled[:, k * p : (k + 1) * p]
                bundle = forward(ps, cfg, win, guidance, t)
                if k == 0:
                    window_quantiles.append(bundle.boundary_values().copy())
            else:
                if k == 0:
                    bootstrap = forward(ps, cfg, win, None, t)
                    quants = bootstrap.boundary_values().copy()
                    window_quantiles.append(quants)
                    guidance = quants[cfg.median_index]
                bundle = forward(ps, cfg, win, guidance, t)
            node_patches.append(bundle.node_values().copy())
            if k + 1 < n_patches:
                next_quants = bundle.region_next_values().copy()
                window_quantiles.append(next_quants)
                if cfg.guidance_mode == "future" and oracle_pooled is None:
                    guidance = next_quants[cfg.median_index]
            hist = np.concatenate([hist, node_patches[-1]], axis=1)[:, -max(cfg.lookback, p) :]
            t += p

    node = np.concatenate(node_patches, axis=1)[:, :horizon]
    quantiles = np.concatenate(window_quantiles, axis=2)[:, :, :horizon]
    return RolloutResult(
        node=node, region_quantiles=quantiles, n_patches=n_patches, horizon=horizon
    )


def long_horizon_eval(
    ps: nc.ParamStore,
    cfg: ModelConfig,
    context: np.ndarray,
    t_last: int,
    future: np.ndarray,
    offsets: tuple[int, ...] = (16, 20, 24, 36, 48),
    labels: np.ndarray | None = None,
) -> dict:
    """Error of the self-guided rollout at specific step offsets.

    future: (N, F, C) truth for steps t_last+1 onward, F >= max(offsets).
    Returns {"model": {h: {"mae", "rmse"}}, "persistence": same} where the
    step offset h is 1-based: h = 1 is the first unobserved step.
    """
    future = np.asarray(future, dtype=np.float64)
    offsets = tuple(int(h) for h in offsets)
    if not offsets or min(offsets) < 1:
        raise ValueError(f"offsets must be positive, got {offsets}")
    if future.shape[0] != context.shape[0] or future.shape[1] < max(offsets):
        raise ValueError(
            f"future shape {future.shape} does not cover max offset {max(offsets)}"
        )
    result = rollout(ps, cfg, context, t_last, max(offsets), labels=labels)
    flat = persistence_forecast(context, max(offsets))
    report: dict = {"model": {}, "persistence": {}}
    for h in offsets:
        truth = future[:, h - 1]
        for name, pred in (("model", result.node[:, h - 1]), ("persistence", flat[:, h - 1])):
            err = pred - truth
            report[name][h] = {
                "mae": float(np.abs(err).mean()),
                "rmse": float(np.sqrt((err * err).mean())),
            }
    return report
