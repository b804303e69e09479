"""Cross-scale forecaster: node history plus regional future guidance.

One forward pass consumes a node window X[t-L+1 .. t] and a regional guidance
window Z[t+1 .. t+P] (teacher-forced, self-generated, or zero) and emits

* a node patch forecast X[t+1 .. t+P],
* quantile forecasts of the next regional window Z[t+P+1 .. t+2P], and
* boundary quantiles for Z[t+1 .. t+P], decoded from the zero-guidance
  regional encoding attending the enriched node states. The boundary head runs
  in every pass; it supervises guidance recovery during training and
  bootstraps the first rollout patch at inference.

Both token sets live in embed_dim; attention projects to attn_dim and back.
Within a layer the node tokens attend the region tokens first, then the
region tokens attend the already-enriched node tokens, strictly in that
order. All tensors are float64 on the numcore tape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .binio import MAGIC_CHECKPOINT, TruncatedFileError, pack_u32, read_file, write_file

GUIDANCE_MODES = ("future", "past")


@dataclass
class ModelConfig:
    n_nodes: int
    n_regions: int
    channels: int = 1
    lookback: int = 12
    patch_len: int = 4
    embed_dim: int = 32
    attn_dim: int | None = None  # None: 2 * embed_dim
    layers: int = 2
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    steps_per_day: int = 96
    days_per_week: int = 7
    huber_delta: float = 1.0
    use_mlp: bool = True
    cross_attention: bool = True
    guidance_mode: str = "future"

    def __post_init__(self) -> None:
        if self.attn_dim is None:
            self.attn_dim = 2 * self.embed_dim
        self.quantiles = tuple(float(q) for q in self.quantiles)
        if min(self.n_nodes, self.n_regions, self.channels, self.lookback,
               self.patch_len, self.embed_dim, self.attn_dim, self.layers,
               self.steps_per_day, self.days_per_week) < 1:
            raise ValueError("all size fields must be >= 1")
        if self.n_regions > self.n_nodes:
            raise ValueError(f"n_regions {self.n_regions} exceeds n_nodes {self.n_nodes}")
        qs = self.quantiles
        if any(not (0.0 < q < 1.0) for q in qs) or any(a >= b for a, b in zip(qs, qs[1:])):
            raise ValueError(f"quantiles must be strictly increasing within (0, 1), got {qs}")
        if 0.5 not in qs:
            raise ValueError(f"the median level 0.5 must be among the quantiles, got {qs}")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ValueError(f"guidance_mode must be one of {GUIDANCE_MODES}")

    @property
    def n_quantiles(self) -> int:
        return len(self.quantiles)

    @property
    def median_index(self) -> int:
        return self.quantiles.index(0.5)

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "n_regions": self.n_regions,
            "channels": self.channels,
            "lookback": self.lookback,
            "patch_len": self.patch_len,
            "embed_dim": self.embed_dim,
            "attn_dim": self.attn_dim,
            "layers": self.layers,
            "quantiles": list(self.quantiles),
            "steps_per_day": self.steps_per_day,
            "days_per_week": self.days_per_week,
            "huber_delta": self.huber_delta,
            "use_mlp": self.use_mlp,
            "cross_attention": self.cross_attention,
            "guidance_mode": self.guidance_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["quantiles"] = tuple(d["quantiles"])
        return cls(**d)


def init_params(cfg: ModelConfig, seed: int = 0) -> nc.ParamStore:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases,
    normal(0, 0.02) embedding tables. Layout is a pure function of cfg."""
    rng = np.random.default_rng([seed, 3])
    ps = nc.ParamStore()

    def weight(name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        ps.add(name, rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def bias(name: str, n: int) -> None:
        ps.add(name, np.zeros(n))

    def table(name: str, rows: int, cols: int) -> None:
        ps.add(name, rng.normal(0.0, 0.02, size=(rows, cols)))

    d, da = cfg.embed_dim, cfg.attn_dim
    weight("encode.node.w", cfg.lookback * cfg.channels, d)
    bias("encode.node.b", d)
    weight("encode.region.w", cfg.patch_len * cfg.channels, d)
    bias("encode.region.b", d)
    table("embed.node", cfg.n_nodes, d)
    table("embed.region", cfg.n_regions, d)
    table("embed.time_of_day", cfg.steps_per_day, d)
    table("embed.day_of_week", cfg.days_per_week, d)

    def attn_block(prefix: str) -> None:
        weight(f"{prefix}.wq", d, da)
        weight(f"{prefix}.wk", d, da)
        weight(f"{prefix}.wv", d, da)
        weight(f"{prefix}.wo", da, d)
        bias(f"{prefix}.ob", d)

    def mlp_block(prefix: str) -> None:
        weight(f"{prefix}.w1", d, 2 * d)
        bias(f"{prefix}.b1", 2 * d)
        weight(f"{prefix}.w2", 2 * d, d)
        bias(f"{prefix}.b2", d)

    for i in range(cfg.layers):
        attn_block(f"layer{i}.node_from_region")
        mlp_block(f"layer{i}.node_mlp")
        attn_block(f"layer{i}.region_from_node")
        mlp_block(f"layer{i}.region_mlp")

    attn_block("boundary.attn")
    weight("head.node.w", d, cfg.patch_len * cfg.channels)
    bias("head.node.b", cfg.patch_len * cfg.channels)
    for j in range(cfg.n_quantiles):
        weight(f"head.region.q{j}.w", d, cfg.patch_len * cfg.channels)
        bias(f"head.region.q{j}.b", cfg.patch_len * cfg.channels)
    for j in range(cfg.n_quantiles):
        weight(f"head.boundary.q{j}.w", d, cfg.patch_len * cfg.channels)
        bias(f"head.boundary.q{j}.b", cfg.patch_len * cfg.channels)
    return ps


def _calendar_embedding(ps: nc.ParamStore, cfg: ModelConfig, step_idx: np.ndarray) -> nc.Tensor:
    """Mean time-of-day plus day-of-week embedding over step_idx[batch, window]."""
    if step_idx.min() < 0:
        raise ValueError(f"window reaches before step 0 (min index {step_idx.min()})")
    tod = nc.embedding_mean(ps["embed.time_of_day"], step_idx % cfg.steps_per_day)
    dow = nc.embedding_mean(
        ps["embed.day_of_week"], (step_idx // cfg.steps_per_day) % cfg.days_per_week
    )
    return nc.add(tod, dow)


def encode_past(
    ps: nc.ParamStore, cfg: ModelConfig, windows: np.ndarray, t_last: np.ndarray
) -> nc.Tensor:
    """Node tokens: linear(flattened window) + calendar embedding + node embedding."""
    b = windows.shape[0]
    flat = windows.reshape(b, cfg.n_nodes, cfg.lookback * cfg.channels)
    h = nc.linear(flat, ps["encode.node.w"], ps["encode.node.b"])
    steps = t_last[:, None] + np.arange(-cfg.lookback + 1, 1)[None, :]
    te = nc.reshape(_calendar_embedding(ps, cfg, steps), (b, 1, cfg.embed_dim))
    return nc.add(nc.add(h, te), ps["embed.node"])


def guidance_window_steps(cfg: ModelConfig, t_last: np.ndarray) -> np.ndarray:
    """Absolute step indices of the guidance window for each sample."""
    if cfg.guidance_mode == "future":
        rel = np.arange(1, cfg.patch_len + 1)
    else:
        rel = np.arange(-cfg.patch_len + 1, 1)
    return t_last[:, None] + rel[None, :]


def encode_guidance(
    ps: nc.ParamStore, cfg: ModelConfig, guidance: np.ndarray | None, t_last: np.ndarray
) -> nc.Tensor:
    """Region tokens from a guidance window; None encodes the all-zero window."""
    b = t_last.shape[0]
    if guidance is None:
        flat = np.zeros((b, cfg.n_regions, cfg.patch_len * cfg.channels))
    else:
        flat = guidance.reshape(b, cfg.n_regions, cfg.patch_len * cfg.channels)
    h = nc.linear(flat, ps["encode.region.w"], ps["encode.region.b"])
    te = nc.reshape(
        _calendar_embedding(ps, cfg, guidance_window_steps(cfg, t_last)),
        (b, 1, cfg.embed_dim),
    )
    return nc.add(nc.add(h, te), ps["embed.region"])


def _mlp(ps: nc.ParamStore, prefix: str, h: nc.Tensor) -> nc.Tensor:
    inner = nc.relu(nc.linear(h, ps[f"{prefix}.w1"], ps[f"{prefix}.b1"]))
    return nc.linear(inner, ps[f"{prefix}.w2"], ps[f"{prefix}.b2"])


def _attend(ps: nc.ParamStore, prefix: str, query: nc.Tensor, context: nc.Tensor) -> nc.Tensor:
    out = nc.scaled_dot_attention(
        nc.matmul(query, ps[f"{prefix}.wq"]),
        nc.matmul(context, ps[f"{prefix}.wk"]),
        nc.matmul(context, ps[f"{prefix}.wv"]),
    )
    return nc.linear(out, ps[f"{prefix}.wo"], ps[f"{prefix}.ob"])


def cross_scale_layer(
    ps: nc.ParamStore, cfg: ModelConfig, index: int, hx: nc.Tensor, hz: nc.Tensor
) -> tuple[nc.Tensor, nc.Tensor]:
    """One exchange: nodes read regions, then regions read the updated nodes."""
    if cfg.cross_attention:
        hx = nc.add(hx, _attend(ps, f"layer{index}.node_from_region", hx, hz))
    if cfg.use_mlp:
        hx = nc.add(hx, _mlp(ps, f"layer{index}.node_mlp", hx))
    if cfg.cross_attention:
        hz = nc.add(hz, _attend(ps, f"layer{index}.region_from_node", hz, hx))
    if cfg.use_mlp:
        hz = nc.add(hz, _mlp(ps, f"layer{index}.region_mlp", hz))
    return hx, hz


@dataclass
class ForecastBundle:
    """One forward pass's outputs, still on the tape.

    Unbatched shapes: node_patch (N, P, C); region_next and boundary
    (Q, M, P, C), one block per quantile level in config order. Batched calls
    get a batch axis after the leading quantile axis.
    """

    node_patch: nc.Tensor
    region_next: nc.Tensor
    boundary: nc.Tensor
    batched: bool

    def node_values(self) -> np.ndarray:
        return self.node_patch.data

    def region_next_values(self) -> np.ndarray:
        return self.region_next.data

    def boundary_values(self) -> np.ndarray:
        return self.boundary.data


def _quantile_heads(
    ps: nc.ParamStore, cfg: ModelConfig, prefix: str, h: nc.Tensor, b: int
) -> nc.Tensor:
    blocks = []
    for j in range(cfg.n_quantiles):
        out = nc.linear(h, ps[f"{prefix}.q{j}.w"], ps[f"{prefix}.q{j}.b"])
        blocks.append(
            nc.reshape(out, (b, cfg.n_regions, cfg.patch_len, cfg.channels))
        )
    return nc.stack0(blocks)


def forward(
    ps: nc.ParamStore,
    cfg: ModelConfig,
    window: np.ndarray,
    guidance: np.ndarray | None,
    t_last,
) -> ForecastBundle:
    """Run the forecaster on one window or a batch of windows.

    window: (N, L, C) or (B, N, L, C); guidance: matching (M, P, C) /
    (B, M, P, C) or None for the zero window; t_last: the absolute calendar
    index of the last observed step, scalar or (B,).
    """
    window = np.asarray(window, dtype=np.float64)
    batched = window.ndim == 4
    if not batched:
        window = window[None]
        if guidance is not None:
            guidance = np.asarray(guidance, dtype=np.float64)[None]
        t_last = np.array([t_last])
    t_last = np.asarray(t_last, dtype=np.int64)
    b = window.shape[0]
    if window.shape != (b, cfg.n_nodes, cfg.lookback, cfg.channels):
        raise ValueError(
            f"window shape {window.shape} does not match config "
            f"(B, {cfg.n_nodes}, {cfg.lookback}, {cfg.channels})"
        )
    if guidance is not None:
        guidance = np.asarray(guidance, dtype=np.float64)
        if guidance.shape != (b, cfg.n_regions, cfg.patch_len, cfg.channels):
            raise ValueError(
                f"guidance shape {guidance.shape} does not match config "
                f"(B, {cfg.n_regions}, {cfg.patch_len}, {cfg.channels})"
            )
    if t_last.shape != (b,):
        raise ValueError(f"t_last shape {t_last.shape} does not match batch {b}")

    hx = encode_past(ps, cfg, window, t_last)
    hz_zero = encode_guidance(ps, cfg, None, t_last)
    hz = hz_zero if guidance is None else encode_guidance(ps, cfg, guidance, t_last)
    for i in range(cfg.layers):
        hx, hz = cross_scale_layer(ps, cfg, i, hx, hz)

    node_flat = nc.linear(hx, ps["head.node.w"], ps["head.node.b"])
    node_patch = nc.reshape(node_flat, (b, cfg.n_nodes, cfg.patch_len, cfg.channels))
    region_next = _quantile_heads(ps, cfg, "head.region", hz, b)

    if cfg.cross_attention:
        recovered = _attend(ps, "boundary.attn", hz_zero, hx)
    else:
        recovered = hz_zero
    boundary = _quantile_heads(ps, cfg, "head.boundary", recovered, b)

    if not batched:
        node_patch = nc.reshape(node_patch, (cfg.n_nodes, cfg.patch_len, cfg.channels))
        region_next = nc.reshape(
            region_next, (cfg.n_quantiles, cfg.n_regions, cfg.patch_len, cfg.channels)
        )
        boundary = nc.reshape(
            boundary, (cfg.n_quantiles, cfg.n_regions, cfg.patch_len, cfg.channels)
        )
    return ForecastBundle(node_patch, region_next, boundary, batched)


@dataclass
class LossParts:
    node: float
    region_next: float
    boundary: float
    total: float


def composite_loss(
    bundle: ForecastBundle,
    node_target: np.ndarray,
    region_target_next: np.ndarray,
    region_target_current: np.ndarray,
    cfg: ModelConfig,
    lam1: float = 0.1,
    lam2: float = 0.2,
) -> tuple[nc.Tensor, LossParts]:
    """huber(node) + lam1 * pinball(next region) + lam2 * pinball(boundary)."""
    l_node = nc.huber_loss(bundle.node_patch, node_target, cfg.huber_delta)
    l_region = nc.pinball_loss(bundle.region_next, region_target_next, cfg.quantiles)
    l_bd = nc.pinball_loss(bundle.boundary, region_target_current, cfg.quantiles)
    total = nc.add(l_node, nc.add(nc.scale(l_region, lam1), nc.scale(l_bd, lam2)))
    parts = LossParts(
        node=float(l_node.data),
        region_next=float(l_region.data),
        boundary=float(l_bd.data),
        total=float(total.data),
    )
    return total, parts


def save_checkpoint(
    path,
    ps: nc.ParamStore,
    cfg: ModelConfig,
    seed: int,
    step: int,
    extra: dict | None = None,
) -> None:
    """extra: optional JSON-serializable metadata (normalization stats, split
    ratios, ...) stored alongside the required fields."""
    manifest = {
        "config": cfg.to_dict(),
        "seed": int(seed),
        "step": int(step),
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in ps.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    parts = [pack_u32(len(blob)), blob]
    for _, t in ps.items():
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    write_file(path, MAGIC_CHECKPOINT, b"".join(parts))


def _checkpoint_payload_len(payload: bytes) -> int:
    if len(payload) < 4:
        raise TruncatedFileError("payload shorter than the manifest length field")
    (blob_len,) = struct.unpack("<I", payload[:4])
    if len(payload) < 4 + blob_len:
        raise TruncatedFileError("payload shorter than the declared manifest")
    manifest = json.loads(payload[4 : 4 + blob_len])
    n_values = sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
    return 4 + blob_len + 8 * n_values


@dataclass
class Checkpoint:
    params: nc.ParamStore
    config: ModelConfig
    seed: int
    step: int
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    payload = read_file(path, MAGIC_CHECKPOINT, _checkpoint_payload_len)
    (blob_len,) = struct.unpack("<I", payload[:4])
    manifest = json.loads(payload[4 : 4 + blob_len])
    cfg = ModelConfig.from_dict(manifest["config"])
    ps = nc.ParamStore()
    pos = 4 + blob_len
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        data = np.frombuffer(payload[pos : pos + 8 * n], dtype="<f8").reshape(shape)
        ps.add(entry["name"], data.copy())
        pos += 8 * n
    expected = init_params(cfg, seed=0)
    if expected.names() != ps.names():
        raise ValueError(f"{path}: tensor layout does not match the stored config")
    for name, t in expected.items():
        if t.shape != ps[name].shape:
            raise ValueError(
                f"{path}: tensor {name!r} has shape {ps[name].shape}, expected {t.shape}"
            )
    return Checkpoint(
        params=ps,
        config=cfg,
        seed=manifest["seed"],
        step=manifest["step"],
        extra=manifest.get("extra", {}),
    )
