"""Spectral regionalization of node series.

Nodes are compared through a gaussian kernel over temporal chunks, embedded
with the leading eigenvectors of the symmetric normalized laplacian, and
clustered by seeded k-means. The resulting assignment drives region pooling
(the coarse series the forecaster is guided by) and per-region prototypes.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .binio import MAGIC_REGIONS, TruncatedFileError, pack_u32, read_file, write_file
from .datakit import SeriesTensor

logger = logging.getLogger(__name__)

AFFINITY_MODES = ("subsequence", "chunk_mean")


def build_affinity(
    values: np.ndarray,
    n_chunks: int = 100,
    sigma: float | None = None,
    mode: str = "subsequence",
) -> tuple[np.ndarray, float]:
    """Gaussian affinity over chunked series.

    values[n_nodes, n_steps, n_channels]. The time axis is cut into n_chunks
    equal pieces (trailing remainder dropped). Each pair's exponent is the mean
    over chunks of the squared chunk distance, scaled by 1/(2 sigma^2). In
    "subsequence" mode a chunk is compared sample by sample; "chunk_mean"
    compares per-chunk averages. sigma=None uses the median pairwise distance.

    Returns (affinity, sigma). Diagonal is zero; the matrix is exactly
    symmetric.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError(f"values must be (nodes, steps, channels), got {values.shape}")
    n_nodes, n_steps, n_channels = values.shape
    if n_nodes < 2:
        raise ValueError(f"need at least 2 nodes, got {n_nodes}")
    if mode not in AFFINITY_MODES:
        raise ValueError(f"mode must be one of {AFFINITY_MODES}, got {mode!r}")
    if not (1 <= n_chunks <= n_steps):
        raise ValueError(f"n_chunks must lie in [1, {n_steps}], got {n_chunks}")
    if sigma is not None and sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")

    chunk_len = n_steps // n_chunks
    used = n_chunks * chunk_len
    chunks = values[:, :used, :].reshape(n_nodes, n_chunks, chunk_len, n_channels)
    if mode == "chunk_mean":
        feats = chunks.mean(axis=2).reshape(n_nodes, -1)
    else:
        feats = chunks.reshape(n_nodes, -1)

    sq_norms = (feats * feats).sum(axis=1)
    sq_dist = sq_norms[:, None] + sq_norms[None, :] - 2.0 * (feats @ feats.T)
    np.maximum(sq_dist, 0.0, out=sq_dist)
    sq_dist = (sq_dist + sq_dist.T) / 2.0  # exact symmetry despite BLAS rounding
    mean_sq = sq_dist / n_chunks

    if sigma is None:
        iu = np.triu_indices(n_nodes, k=1)
        med = float(np.median(mean_sq[iu]))
        sigma = math.sqrt(med) if med > 0 else 1.0

    affinity = np.exp(-mean_sq / (2.0 * sigma * sigma))
    np.fill_diagonal(affinity, 0.0)
    return affinity, float(sigma)


def normalized_laplacian(affinity: np.ndarray) -> np.ndarray:
    """Symmetric normalized laplacian I - D^-1/2 A D^-1/2."""
    a = np.asarray(affinity, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"affinity must be square, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ValueError("affinity must be symmetric")
    degrees = a.sum(axis=1)
    dead = np.flatnonzero(degrees <= 0.0)
    if dead.size:
        raise ValueError(f"zero-degree nodes {dead.tolist()}: affinity row sums must be positive")
    inv_sqrt = 1.0 / np.sqrt(degrees)
    lap = -(a * np.outer(inv_sqrt, inv_sqrt))
    np.fill_diagonal(lap, lap.diagonal() + 1.0)
    return lap


def spectral_embed(
    lap: np.ndarray, n_components: int, row_normalize: bool = True
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Leading (smallest-eigenvalue) eigenvectors of the laplacian.

    Returns (embedding[n, n_components], eigenvalues[n_components], zero_rows).
    Rows with vanishing norm are left at zero and their indices reported.
    Eigenvalue ties resolve by the deterministic LAPACK ordering.
    """
    lap = np.asarray(lap, dtype=np.float64)
    n = lap.shape[0]
    if not (1 <= n_components <= n):
        raise ValueError(f"n_components must lie in [1, {n}], got {n_components}")
    try:
        eigvals, eigvecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"eigensolver failed to converge: {exc}") from exc
    emb = eigvecs[:, :n_components].copy()
    zero_rows: list[int] = []
    if row_normalize:
        norms = np.sqrt((emb * emb).sum(axis=1))
        zero_rows = np.flatnonzero(norms < 1e-12).tolist()
        if zero_rows:
            logger.warning("spectral embedding has all-zero rows at nodes %s", zero_rows)
        safe = np.where(norms < 1e-12, 1.0, norms)
        emb = emb / safe[:, None]
        emb[zero_rows] = 0.0
    return emb, eigvals[:n_components].copy(), zero_rows


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int
    restart: int
    objective_trace: list[float]


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)  # duplicate points: any choice is equivalent
        else:
            idx = rng.choice(n, p=closest / total)
        centers[j] = points[idx]
        closest = np.minimum(closest, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(
    points: np.ndarray,
    k: int,
    n_init: int = 10,
    max_iter: int = 300,
    seed: int = 0,
) -> KMeansResult:
    """Lloyd iterations with k-means++ seeding and restart selection.

    Deterministic for a given seed: restart r draws from its own RNG stream
    (seed, r), ties in assignment break toward the lowest center index, the
    best restart is the first one attaining the minimum inertia, and empty
    clusters are repaired by reseeding the point farthest from its center.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be 2d, got {points.shape}")
    n = points.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if n_init < 1 or max_iter < 1:
        raise ValueError("n_init and max_iter must be >= 1")

    best: KMeansResult | None = None
    for restart in range(n_init):
        rng = np.random.default_rng([seed, restart])
        centers = _plus_plus_init(points, k, rng)
        labels = np.full(n, -1, dtype=np.int64)
        trace: list[float] = []
        n_iter = 0
        for n_iter in range(1, max_iter + 1):
            sq = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = sq.argmin(axis=1)
            own = sq[np.arange(n), new_labels]
            for empty in range(k):
                if not np.any(new_labels == empty):
                    far = int(own.argmax())
                    new_labels[far] = empty
                    own[far] = 0.0
            trace.append(float(own.sum()))
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for j in range(k):
                centers[j] = points[labels == j].mean(axis=0)
        inertia = float(((points - centers[labels]) ** 2).sum())
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, centers, inertia, n_iter, restart, trace)
    return best


def assignment_matrix(labels: np.ndarray, n_regions: int) -> np.ndarray:
    labels = np.asarray(labels)
    onehot = np.zeros((labels.shape[0], n_regions), dtype=np.float64)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return onehot


def _region_counts(labels: np.ndarray, n_regions: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels), minlength=n_regions)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"regions {empty.tolist()} are empty")
    return counts


def pool_regions(x, assignment: np.ndarray) -> np.ndarray:
    """Mean-pool node values to regions: x[n_nodes, ...] -> [n_regions, ...]."""
    x = np.asarray(x, dtype=np.float64)
    onehot = np.asarray(assignment, dtype=np.float64)
    labels = onehot.argmax(axis=1)
    return pool_series(x, labels, onehot.shape[1])


def pool_series(values: np.ndarray, labels: np.ndarray, n_regions: int) -> np.ndarray:
    """Mean over each region's nodes along axis 0, any trailing shape."""
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    if values.shape[0] != labels.shape[0]:
        raise ValueError(f"{values.shape[0]} rows vs {labels.shape[0]} labels")
    counts = _region_counts(labels, n_regions)
    out = np.zeros((n_regions,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, labels, values)
    return out / counts.reshape((n_regions,) + (1,) * (values.ndim - 1))


def region_prototypes(assignment: np.ndarray, flat_series: np.ndarray) -> np.ndarray:
    """Least-squares prototypes (S^T S)^-1 S^T X; equals per-region means."""
    onehot = np.asarray(assignment, dtype=np.float64)
    x = np.asarray(flat_series, dtype=np.float64)
    if onehot.shape[0] != x.shape[0]:
        raise ValueError(f"{onehot.shape[0]} assignment rows vs {x.shape[0]} series rows")
    counts = _region_counts(onehot.argmax(axis=1), onehot.shape[1])
    return (onehot.T @ x) / counts[:, None]


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """Pair-counting agreement between two labelings, chance-corrected."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"label shapes differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    _, a_idx = np.unique(a, return_inverse=True)
    _, b_idx = np.unique(b, return_inverse=True)
    table = np.zeros((a_idx.max() + 1, b_idx.max() + 1))
    np.add.at(table, (a_idx, b_idx), 1.0)

    def pairs(x):
        return (x * (x - 1.0) / 2.0).sum()

    sum_cells = pairs(table)
    sum_rows = pairs(table.sum(axis=1))
    sum_cols = pairs(table.sum(axis=0))
    total = n * (n - 1.0) / 2.0
    expected = sum_rows * sum_cols / total
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


@dataclass
class RegionConfig:
    n_regions: int | None = None  # None: round(0.2 * n_nodes), floor 1
    n_chunks: int = 100
    sigma: float | None = None
    affinity_mode: str = "subsequence"
    kmeans_n_init: int = 10
    kmeans_max_iter: int = 300
    seed: int = 0


@dataclass
class RegionModel:
    labels: np.ndarray
    n_regions: int
    prototypes: np.ndarray
    sigma: float
    n_chunks: int
    seed: int
    embedding: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.labels.shape[0]

    @property
    def assignment(self) -> np.ndarray:
        return assignment_matrix(self.labels, self.n_regions)

    def pool(self, values: np.ndarray) -> np.ndarray:
        return pool_series(values, self.labels, self.n_regions)


def regionalize(series: SeriesTensor, cfg: RegionConfig) -> RegionModel:
    """Affinity -> laplacian -> spectral embedding -> k-means -> prototypes.

    Run this on the training split only; the assignment is then reused for
    validation and test pooling.
    """
    n_nodes = series.n_nodes
    m = cfg.n_regions if cfg.n_regions is not None else max(1, round(0.2 * n_nodes))
    if not (1 <= m <= n_nodes):
        raise ValueError(f"n_regions must lie in [1, {n_nodes}], got {m}")
    affinity, sigma = build_affinity(
        series.values, n_chunks=cfg.n_chunks, sigma=cfg.sigma, mode=cfg.affinity_mode
    )
    lap = normalized_laplacian(affinity)
    emb, _, _ = spectral_embed(lap, m)
    clustering = kmeans(
        emb, m, n_init=cfg.kmeans_n_init, max_iter=cfg.kmeans_max_iter, seed=cfg.seed
    )
    flat = series.values.reshape(n_nodes, -1)
    protos = region_prototypes(assignment_matrix(clustering.labels, m), flat)
    return RegionModel(
        labels=clustering.labels.copy(),
        n_regions=m,
        prototypes=protos,
        sigma=sigma,
        n_chunks=cfg.n_chunks,
        seed=cfg.seed,
        embedding=emb,
    )


def save_region_model(path, model: RegionModel) -> None:
    manifest = {
        "n_nodes": int(model.n_nodes),
        "n_regions": int(model.n_regions),
        "n_chunks": int(model.n_chunks),
        "sigma": float(model.sigma),
        "seed": int(model.seed),
        "proto_cols": int(model.prototypes.shape[1]),
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    payload = (
        pack_u32(len(blob))
        + blob
        + np.asarray(model.labels, dtype="<u4").tobytes()
        + np.ascontiguousarray(model.prototypes, dtype="<f8").tobytes()
    )
    write_file(path, MAGIC_REGIONS, payload)


def _region_payload_len(payload: bytes) -> int:
    if len(payload) < 4:
        raise TruncatedFileError("payload shorter than the manifest length field")
    (blob_len,) = struct.unpack("<I", payload[:4])
    if len(payload) < 4 + blob_len:
        raise TruncatedFileError("payload shorter than the declared manifest")
    manifest = json.loads(payload[4 : 4 + blob_len])
    return 4 + blob_len + 4 * manifest["n_nodes"] + 8 * manifest["n_regions"] * manifest["proto_cols"]


def load_region_model(path) -> RegionModel:
    payload = read_file(path, MAGIC_REGIONS, _region_payload_len)
    (blob_len,) = struct.unpack("<I", payload[:4])
    manifest = json.loads(payload[4 : 4 + blob_len])
    pos = 4 + blob_len
    n_nodes, n_regions = manifest["n_nodes"], manifest["n_regions"]
    labels = np.frombuffer(payload[pos : pos + 4 * n_nodes], dtype="<u4").astype(np.int64)
    pos += 4 * n_nodes
    protos = np.frombuffer(payload[pos:], dtype="<f8").reshape(
        n_regions, manifest["proto_cols"]
    )
    return RegionModel(
        labels=labels,
        n_regions=n_regions,
        prototypes=protos.copy(),
        sigma=manifest["sigma"],
        n_chunks=manifest["n_chunks"],
        seed=manifest["seed"],
    )
