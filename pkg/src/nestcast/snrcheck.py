"""Numerical verification of the cluster-averaging SNR lower bound.

Model: each node in a cluster observes its true signal s_i plus iid gaussian
noise of per-component variance sigma^2. Averaging the cluster into a center
divides the noise variance by the cluster size k, so the center's SNR is
k * ||mean_i s_i||^2 / sigma^2. The claimed lower bound is

    snr_center >= (1 + (k - 1) * rho) * mean_i snr(s_i),

with rho the average pairwise cosine between the true signals. The verifier
evaluates both sides directly and reports any violation instead of assuming
the algebra; a Monte-Carlo estimator cross-checks the analytic center SNR.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoisyCluster",
    "BoundReport",
    "BoundStudy",
    "signal_snr",
    "avg_correlation",
    "verify_snr_bound",
    "random_cluster",
    "empirical_center_snr",
    "run_bound_study",
]


@dataclass
class NoisyCluster:
    """True signals (k, n_steps) plus the iid noise variance they are read through."""

    signals: np.ndarray
    noise_var: float

    def __post_init__(self) -> None:
        self.signals = np.atleast_2d(np.asarray(self.signals, dtype=np.float64))
        if self.noise_var <= 0:
            raise ValueError(f"noise variance must be positive, got {self.noise_var}")
        if self.signals.ndim != 2 or self.signals.shape[0] < 1:
            raise ValueError(f"signals must be (k, n_steps) with k >= 1, got {self.signals.shape}")
        if not np.any((self.signals * self.signals).sum(axis=1) > 0):
            raise ValueError("at least one signal must be nonzero")

    @property
    def size(self) -> int:
        return self.signals.shape[0]


def signal_snr(signal: np.ndarray, noise_var: float) -> float:
    """Signal power over per-component noise variance (not in dB)."""
    if noise_var <= 0:
        raise ValueError(f"noise variance must be positive, got {noise_var}")
    s = np.asarray(signal, dtype=np.float64)
    return float((s * s).sum() / noise_var)


def avg_correlation(cluster: NoisyCluster) -> float:
    """Mean pairwise cosine between the true signals (k >= 2)."""
    k = cluster.size
    if k < 2:
        raise ValueError(f"need at least 2 signals, got {k}")
    norms = np.sqrt((cluster.signals * cluster.signals).sum(axis=1))
    if np.any(norms == 0):
        raise ValueError("zero-norm signal has no defined correlation")
    unit = cluster.signals / norms[:, None]
    gram = unit @ unit.T
    return float((gram.sum() - np.trace(gram)) / (k * (k - 1)))


@dataclass
class BoundReport:
    snr_center: float
    bound: float
    mean_snr: float
    avg_corr: float
    slack: float
    holds: bool


def verify_snr_bound(cluster: NoisyCluster, tol: float = 1e-10) -> BoundReport:
    """Evaluate both sides of the averaging bound on a known decomposition."""
    k = cluster.size
    center = cluster.signals.mean(axis=0)
    snr_center = k * signal_snr(center, cluster.noise_var)
    per_node = np.array([signal_snr(s, cluster.noise_var) for s in cluster.signals])
    mean_snr = float(per_node.mean())
    rho = avg_correlation(cluster) if k >= 2 else 0.0
    bound = (1.0 + (k - 1) * rho) * mean_snr
    slack = snr_center - bound
    return BoundReport(
        snr_center=snr_center,
        bound=bound,
        mean_snr=mean_snr,
        avg_corr=rho,
        slack=slack,
        holds=bool(slack >= -tol),
    )


def random_cluster(
    seed: int,
    n_steps: int = 48,
    size_range: tuple[int, int] = (2, 20),
) -> NoisyCluster:
    """Random correlated sinusoidal signals sharing a common norm.

    Each node mixes a shared base sinusoid with its own distinct-frequency
    sinusoid at a random mixing angle, so pairwise correlations are
    nonnegative and all signal norms coincide.
    """
    rng = np.random.default_rng([seed, 77])
    k = int(rng.integers(size_range[0], size_range[1] + 1))
    max_freq = n_steps // 2
    if k + 1 > max_freq - 1:
        raise ValueError(f"n_steps {n_steps} too short for {k} distinct frequencies")
    freqs = rng.choice(np.arange(1, max_freq), size=k + 1, replace=False)
    t = np.arange(n_steps)

    def unit_wave(freq: int, phase: float) -> np.ndarray:
        w = np.sin(2.0 * np.pi * freq * t / n_steps + phase)
        return w / np.linalg.norm(w)

    base = unit_wave(int(freqs[0]), rng.uniform(0, 2 * np.pi))
    amplitude = rng.uniform(0.5, 1.5)
    mix = rng.uniform(0.0, np.pi / 2.0, size=k)
    signals = np.empty((k, n_steps))
    for i in range(k):
        own = unit_wave(int(freqs[i + 1]), rng.uniform(0, 2 * np.pi))
        signals[i] = amplitude * (np.cos(mix[i]) * base + np.sin(mix[i]) * own)
    return NoisyCluster(signals=signals, noise_var=float(rng.uniform(0.25, 1.0)))


def empirical_center_snr(
    cluster: NoisyCluster,
    n_samples: int = 100_000,
    seed: int = 0,
    chunk: int = 2000,
) -> float:
    """Monte-Carlo SNR of the cluster center under sampled node noise."""
    k, n_steps = cluster.signals.shape
    center = cluster.signals.mean(axis=0)
    rng = np.random.default_rng([seed, 13])
    sq_sum = 0.0
    done = 0
    sigma = np.sqrt(cluster.noise_var)
    while done < n_samples:
        b = min(chunk, n_samples - done)
        noise = rng.normal(0.0, sigma, size=(b, k, n_steps))
        center_noise = noise.mean(axis=1)
        sq_sum += float((center_noise * center_noise).sum())
        done += b
    noise_var_hat = sq_sum / (n_samples * n_steps)
    return float((center * center).sum() / noise_var_hat)


@dataclass
class BoundStudy:
    clusters_tested: int
    violations: int
    min_slack: float
    violating_clusters: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "clusters_tested": self.clusters_tested,
            "violations": self.violations,
            "min_slack": self.min_slack,
            "violating_clusters": self.violating_clusters,
        }


def run_bound_study(
    n_clusters: int = 1000,
    seed: int = 0,
    tol: float = 1e-10,
    n_steps: int = 48,
    size_range: tuple[int, int] = (2, 20),
) -> BoundStudy:
    """Verify the bound over many random clusters; dump any violator verbatim."""
    violations = 0
    min_slack = np.inf
    dumped: list[dict] = []
    for i in range(n_clusters):
        cluster = random_cluster(seed + i, n_steps=n_steps, size_range=size_range)
        report = verify_snr_bound(cluster, tol=tol)
        min_slack = min(min_slack, report.slack)
        if not report.holds:
            violations += 1
            dumped.append(
                {
                    "cluster_index": i,
                    "signals": cluster.signals.tolist(),
                    "noise_var": cluster.noise_var,
                    "snr_center": report.snr_center,
                    "bound": report.bound,
                    "slack": report.slack,
                }
            )
    return BoundStudy(
        clusters_tested=n_clusters,
        violations=violations,
        min_slack=float(min_slack),
        violating_clusters=dumped,
    )
