"""Training loop with scheduled sampling over self-generated guidance.

Each step on a "future"-guidance model runs two forward passes. Pass one sees
the zero guidance window; its boundary quantiles provide both the recovery
loss and (detached) the model's own guess of the upcoming regional window.
Per sample a Bernoulli(p_tf) draw picks the true pooled window or that guess
as guidance for pass two, whose node and next-region outputs carry the other
two loss terms. p_tf decays geometrically per epoch down to a floor, so early
epochs train mostly teacher-forced and late epochs mostly self-guided,
matching how the model is used at inference.

Past-guidance models skip the sampling machinery: the guidance window is
observed history, so a single pass supervises all three heads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .model import ForecastBundle, ModelConfig, forward


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    lam1: float = 0.1
    lam2: float = 0.2
    ss_gamma: float = 0.97
    ss_floor: float = 0.25
    patience: int = 30
    seed: int = 0
    val_batch: int = 256

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1 or self.val_batch < 1:
            raise ValueError("epochs, batch_size, patience and val_batch must be >= 1")
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("lr/eps/weight_decay/clip_norm out of range")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not (0 < self.ss_gamma <= 1) or not (0 <= self.ss_floor <= 1):
            raise ValueError("ss_gamma must be in (0, 1], ss_floor in [0, 1]")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("loss weights must be nonnegative")


def sampling_prob(epoch: int, gamma: float = 0.97, floor: float = 0.25) -> float:
    """Teacher-forcing probability at a 0-based epoch: max(floor, gamma**epoch)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return max(floor, gamma**epoch)


class AdamW:
    """Adam with decoupled weight decay. Tensors whose grad is None are skipped
    entirely, so parameters outside the active graph neither move nor decay."""

    def __init__(
        self,
        params: nc.ParamStore,
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ) -> None:
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, tensor in self.params.items():
            g = tensor.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            tensor.data -= self.lr * (update + self.weight_decay * tensor.data)


def clip_global_norm(params: nc.ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint 2-norm is at most max_norm.
    Returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for _, tensor in params.items():
        if tensor.grad is not None:
            total += float(np.sum(tensor.grad * tensor.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for _, tensor in params.items():
            if tensor.grad is not None:
                tensor.grad *= scale
    return norm


@dataclass
class Batch:
    windows: np.ndarray  # (B, N, L, C)
    t_abs: np.ndarray  # (B,) absolute calendar step of the last observed point
    node_target: np.ndarray  # (B, N, P, C)
    region_current: np.ndarray  # (B, M, P, C) pooled truth for t+1 .. t+P
    region_next: np.ndarray  # (B, M, P, C) pooled truth for t+P+1 .. t+2P
    guidance_past: np.ndarray  # (B, M, P, C) pooled truth for t-P+1 .. t


class WindowSet:
    """Sliding training windows over one contiguous split.

    values: node series (N, T, C); pooled: region means (M, T, C) on the same
    steps; start_offset: absolute calendar index of column 0.
    """

    def __init__(
        self,
        values: np.ndarray,
        pooled: np.ndarray,
        cfg: ModelConfig,
        start_offset: int = 0,
    ) -> None:
        values = np.asarray(values, dtype=np.float64)
        pooled = np.asarray(pooled, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != cfg.n_nodes or values.shape[2] != cfg.channels:
            raise ValueError(
                f"values shape {values.shape} does not match ({cfg.n_nodes}, T, {cfg.channels})"
            )
        if pooled.shape != (cfg.n_regions, values.shape[1], cfg.channels):
            raise ValueError(
                f"pooled shape {pooled.shape} does not match "
                f"({cfg.n_regions}, {values.shape[1]}, {cfg.channels})"
            )
        self.values = values
        self.pooled = pooled
        self.cfg = cfg
        self.start_offset = int(start_offset)
        first = cfg.lookback - 1
        if cfg.guidance_mode == "past":
            first = max(cfg.lookback, cfg.patch_len) - 1
        last = values.shape[1] - 2 * cfg.patch_len - 1
        if last < first:
            raise ValueError(
                f"split of {values.shape[1]} steps is too short for lookback "
                f"{cfg.lookback} plus two patches of {cfg.patch_len}"
            )
        self.indices = np.arange(first, last + 1)

    def __len__(self) -> int:
        return len(self.indices)

    def gather(self, ts: np.ndarray) -> Batch:
        cfg = self.cfg
        p = cfg.patch_len
        windows, node_t, reg_cur, reg_next, guid_past = [], [], [], [], []
        for t in np.asarray(ts, dtype=np.int64):
            windows.append(self.values[:, t - cfg.lookback + 1 : t + 1])
            node_t.append(self.values[:, t + 1 : t + p + 1])
            reg_cur.append(self.pooled[:, t + 1 : t + p + 1])
            reg_next.append(self.pooled[:, t + p + 1 : t + 2 * p + 1])
            guid_past.append(self.pooled[:, t - p + 1 : t + 1])
        return Batch(
            windows=np.stack(windows),
            t_abs=np.asarray(ts, dtype=np.int64) + self.start_offset,
            node_target=np.stack(node_t),
            region_current=np.stack(reg_cur),
            region_next=np.stack(reg_next),
            guidance_past=np.stack(guid_past),
        )


@dataclass
class StepStats:
    total: float
    node: float
    region_next: float
    boundary: float
    grad_norm: float
    teacher_fraction: float


def _losses(
    cfg: ModelConfig,
    guided: ForecastBundle,
    recovery: ForecastBundle,
    batch: Batch,
    lam1: float,
    lam2: float,
):
    l_node = nc.huber_loss(guided.node_patch, batch.node_target, cfg.huber_delta)
    l_next = nc.pinball_loss(guided.region_next, batch.region_next, cfg.quantiles)
    l_bd = nc.pinball_loss(recovery.boundary, batch.region_current, cfg.quantiles)
    total = nc.add(l_node, nc.add(nc.scale(l_next, lam1), nc.scale(l_bd, lam2)))
    return total, l_node, l_next, l_bd


def train_step(
    ps: nc.ParamStore,
    cfg: ModelConfig,
    opt: AdamW,
    batch: Batch,
    p_tf: float,
    rng: np.random.Generator,
    lam1: float = 0.1,
    lam2: float = 0.2,
    clip_norm: float = 5.0,
) -> StepStats:
    b = batch.windows.shape[0]
    if cfg.guidance_mode == "past":
        rng.random(b)  # keep the stream aligned with future-guidance runs
        bundle = forward(ps, cfg, batch.windows, batch.guidance_past, batch.t_abs)
        total, l_node, l_next, l_bd = _losses(cfg, bundle, bundle, batch, lam1, lam2)
        teacher_fraction = 1.0
    else:
        recovery = forward(ps, cfg, batch.windows, None, batch.t_abs)
        z_hat = recovery.boundary.data[cfg.median_index].copy()
        teacher = rng.random(b) < p_tf
        guidance = np.where(
            teacher[:, None, None, None], batch.region_current, z_hat
        )
        guided = forward(ps, cfg, batch.windows, guidance, batch.t_abs)
        total, l_node, l_next, l_bd = _losses(cfg, guided, recovery, batch, lam1, lam2)
        teacher_fraction = float(teacher.mean())
    ps.zero_grad()
    total.backward()
    norm = clip_global_norm(ps, clip_norm)
    opt.step()
    return StepStats(
        total=float(total.data),
        node=float(l_node.data),
        region_next=float(l_next.data),
        boundary=float(l_bd.data),
        grad_norm=norm,
        teacher_fraction=teacher_fraction,
    )


def validation_mae(
    ps: nc.ParamStore, cfg: ModelConfig, ws: WindowSet, batch_size: int = 256
) -> float:
    """Self-guided one-patch node MAE over every window of the split."""
    err_sum = 0.0
    count = 0
    with nc.no_grad():
        for start in range(0, len(ws.indices), batch_size):
            batch = ws.gather(ws.indices[start : start + batch_size])
            if cfg.guidance_mode == "past":
                guidance = batch.guidance_past
            else:
                recovery = forward(ps, cfg, batch.windows, None, batch.t_abs)
                guidance = recovery.boundary.data[cfg.median_index]
            guided = forward(ps, cfg, batch.windows, guidance, batch.t_abs)
            err_sum += float(np.abs(guided.node_patch.data - batch.node_target).sum())
            count += batch.node_target.size
    return err_sum / count


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_val_mae: float = float("inf")
    best_epoch: int = -1
    epochs_run: int = 0
    early_stopped: bool = False


def train_loop(
    ps: nc.ParamStore,
    cfg: ModelConfig,
    train_ws: WindowSet,
    val_ws: WindowSet,
    tcfg: TrainConfig,
    history_path=None,
) -> TrainResult:
    """Train in place, early-stop on validation MAE, restore the best epoch.

    Bitwise reproducible for fixed inputs and TrainConfig: every stochastic
    choice in epoch e is drawn from default_rng([seed, e]).
    """
    opt = AdamW(
        ps,
        lr=tcfg.lr,
        beta1=tcfg.beta1,
        beta2=tcfg.beta2,
        eps=tcfg.eps,
        weight_decay=tcfg.weight_decay,
    )
    result = TrainResult()
    best_snapshot = None
    bad_epochs = 0
    fh = open(history_path, "w") if history_path is not None else None
    try:
        for epoch in range(tcfg.epochs):
            rng = np.random.default_rng([tcfg.seed, epoch])
            p_tf = sampling_prob(epoch, tcfg.ss_gamma, tcfg.ss_floor)
            order = rng.permutation(train_ws.indices)
            losses = []
            for start in range(0, len(order), tcfg.batch_size):
                batch = train_ws.gather(order[start : start + tcfg.batch_size])
                stats = train_step(
                    ps,
                    cfg,
                    opt,
                    batch,
                    p_tf,
                    rng,
                    lam1=tcfg.lam1,
                    lam2=tcfg.lam2,
                    clip_norm=tcfg.clip_norm,
                )
                losses.append(stats.total)
            val = validation_mae(ps, cfg, val_ws, tcfg.val_batch)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_mae": val,
                "p_tf": p_tf,
            }
            result.history.append(record)
            result.epochs_run = epoch + 1
            if fh is not None:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
            if val < result.best_val_mae:
                result.best_val_mae = val
                result.best_epoch = epoch
                best_snapshot = {name: t.data.copy() for name, t in ps.items()}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= tcfg.patience:
                    result.early_stopped = True
                    break
    finally:
        if fh is not None:
            fh.close()
    if best_snapshot is not None:
        for name, tensor in ps.items():
            tensor.data = best_snapshot[name]
    return result
