"""End-to-end acceptance surface: one check per shipped claim.

Each test is a single pass/fail line covering one headline property of the
package, with its own wall-clock budget. Slow pieces (the ablation study,
the full demo) live here rather than in the per-module suites.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from nestcast import numcore as nc
from nestcast.cli import main
from nestcast.datakit import generate_synthetic, load_dataset, save_dataset
from nestcast.evalbench import attention_cost, bench, mae, mape, rmse
from nestcast.model import (
    ModelConfig,
    composite_loss,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from nestcast.regionalize import (
    RegionConfig,
    adjusted_rand_index,
    kmeans,
    pool_series,
    regionalize,
)
from nestcast.rollout import rollout
from nestcast.snrcheck import NoisyCluster, run_bound_study, verify_snr_bound
from nestcast.trainer import AdamW

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))
import ablation_study  # noqa: E402


def test_01_composite_gradient_matches_finite_differences():
    """Analytic gradient of the full training loss is exact on a small model."""
    t0 = time.perf_counter()
    cfg = ModelConfig(
        n_nodes=8, n_regions=2, channels=1, lookback=4, patch_len=2,
        embed_dim=8, layers=2, quantiles=(0.1, 0.5, 0.9), steps_per_day=8,
    )
    ps = init_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    window = rng.normal(size=(cfg.n_nodes, cfg.lookback, cfg.channels))
    guidance = rng.normal(size=(cfg.n_regions, cfg.patch_len, cfg.channels))
    node_t = rng.normal(size=(cfg.n_nodes, cfg.patch_len, cfg.channels))
    reg_next = rng.normal(size=(cfg.n_regions, cfg.patch_len, cfg.channels))
    reg_cur = rng.normal(size=(cfg.n_regions, cfg.patch_len, cfg.channels))

    def f(params):
        bundle = forward(params, cfg, window, guidance, 11)
        total, _ = composite_loss(bundle, node_t, reg_next, reg_cur, cfg)
        return total

    report = nc.gradient_check(f, ps, eps=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    assert report.passed, f"max rel err {report.max_rel_err:.3e}"
    assert report.max_rel_err < 1e-4
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"


def test_02_pooled_snr_bound_holds_on_1000_random_clusters():
    """Averaging-gain bound: no violations, and both equality cases are tight."""
    t0 = time.perf_counter()
    study = run_bound_study(n_clusters=1000, seed=0, tol=1e-10, n_steps=48)
    elapsed = time.perf_counter() - t0
    assert study.clusters_tested == 1000
    assert study.violations == 0, study.violating_clusters[:1]
    assert study.min_slack >= -1e-10

    t = np.arange(48.0)
    wave = np.sin(2 * np.pi * t / 48)
    singleton = verify_snr_bound(NoisyCluster(wave[None, :], 0.5))
    assert abs(singleton.slack) <= 1e-10
    identical = verify_snr_bound(NoisyCluster(np.tile(wave, (6, 1)), 0.5))
    assert abs(identical.slack) <= 1e-10
    assert elapsed < 10.0, f"bound study took {elapsed:.1f}s"


def test_03_region_recovery_ari_at_least_095_over_10_seeds():
    """Spectral pipeline recovers planted regions from well-separated trends."""
    t0 = time.perf_counter()
    aris = []
    for seed in range(10):
        series = generate_synthetic(
            n_regions=3, nodes_per_region=16, n_days=4, steps_per_day=24,
            noise_sigma=1.0, separation=5.0, seed=seed,
        )
        region = regionalize(
            series, RegionConfig(n_regions=3, n_chunks=min(100, series.n_steps), seed=seed)
        )
        aris.append(adjusted_rand_index(region.labels, series.labels))
    elapsed = time.perf_counter() - t0
    assert min(aris) >= 0.95, f"ARIs {aris}"
    assert elapsed < 30.0, f"recovery sweep took {elapsed:.1f}s"


def test_04_pooling_shrinks_noise_like_one_over_sqrt_group_size():
    """Residual std of pooled signals sits near noise_sigma / sqrt(16)."""
    sigma = 2.0
    series = generate_synthetic(
        n_regions=3, nodes_per_region=16, n_days=14, steps_per_day=96,
        noise_sigma=sigma, seed=0,
    )
    pooled = pool_series(series.values, series.labels, 3)
    resid = pooled - series.region_trends
    expected = sigma / 4.0
    stds = resid.std(axis=1)
    assert np.all(np.abs(stds - expected) / expected <= 0.15), stds


def test_05_kmeans_matches_brute_force_at_micro_scale():
    """Restarted Lloyd hits the global 2-way objective for every tiny instance."""
    for trial in range(20):
        rng = np.random.default_rng([6, trial])
        n = int(rng.integers(4, 9))
        points = rng.normal(size=(n, 2))
        result = kmeans(points, 2, n_init=10, seed=trial)

        best = np.inf
        for mask_bits in range(1, 2 ** (n - 1)):
            mask = np.array([(mask_bits >> i) & 1 for i in range(n)], dtype=bool)
            obj = 0.0
            for part in (points[mask], points[~mask]):
                center = part.mean(axis=0)
                obj += float(((part - center) ** 2).sum())
            best = min(best, obj)
        assert np.isclose(result.inertia, best, rtol=1e-10, atol=1e-12), (
            f"trial {trial}: inertia {result.inertia} vs brute force {best}"
        )


def test_06_metrics_match_naive_oracles():
    """MAE/RMSE/MAPE agree with direct formulas; RMSE never drops below MAE."""
    rng = np.random.default_rng(42)
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=int(rng.integers(1, 4))))
        pred = rng.normal(size=shape)
        truth = rng.normal(size=shape)
        assert abs(mae(pred, truth) - np.abs(pred - truth).mean()) <= 1e-12
        r = rmse(pred, truth)
        assert abs(r - np.sqrt(((pred - truth) ** 2).mean())) <= 1e-12
        keep = np.abs(truth) >= 1e-4
        if keep.any():
            naive = np.abs((pred[keep] - truth[keep]) / truth[keep]).mean() * 100.0
            assert abs(mape(pred, truth).value_pct - naive) <= 1e-12
        assert r >= mae(pred, truth) - 1e-15


def test_07_pinball_training_recovers_noise_quantiles():
    """A quantile head trained on constant signal + noise lands on the
    empirical 10/50/90 percent points and the 10-90 band covers ~80%."""
    levels = (0.1, 0.5, 0.9)
    c, sigma = 1.0, 0.5
    rng = np.random.default_rng(123)
    train = c + sigma * rng.normal(size=4000)
    held_out = c + sigma * rng.normal(size=4000)

    ps = nc.ParamStore()
    head = ps.add("head", np.zeros((3, 1)))
    # staged lr drop: adam's terminal oscillation shrinks with the last lr
    for lr, steps in ((0.05, 500), (0.01, 500), (0.002, 500)):
        opt = AdamW(ps, lr=lr, weight_decay=0.0)
        for _ in range(steps):
            pred = nc.add(head, np.zeros((3, train.size)))
            loss = nc.pinball_loss(pred, train, levels)
            ps.zero_grad()
            loss.backward()
            opt.step()

    fitted = head.data.ravel()
    empirical = np.quantile(train, levels)
    assert np.all(np.abs(fitted - empirical) <= 0.05), (fitted, empirical)
    covered = np.mean((held_out >= fitted[0]) & (held_out <= fitted[2]))
    assert 0.75 <= covered <= 0.85, f"band coverage {covered:.3f}"


def test_08_full_model_beats_both_ablations_on_lead_lag_data():
    """Future guidance and cross-scale attention each earn their keep on data
    where one region's future is written in another region's past."""
    t0 = time.perf_counter()
    wins_fg = wins_ca = 0
    margins = []
    for seed in range(5):
        row = ablation_study.run_seed(seed, epochs=100, horizon=4, stride=2)
        wins_fg += row["full_mae"] < row["wofg_mae"]
        wins_ca += row["full_mae"] < row["woca_mae"]
        margins.append(
            f"seed {seed}: full={row['full_mae']:.4f} "
            f"wofg={row['wofg_mae']:.4f} woca={row['woca_mae']:.4f}"
        )
    elapsed = time.perf_counter() - t0
    detail = "; ".join(margins)
    assert wins_fg >= 4, f"guidance ablation wins {wins_fg}/5 ({detail})"
    assert wins_ca >= 4, f"attention ablation wins {wins_ca}/5 ({detail})"
    assert elapsed < 1200.0, f"ablation study took {elapsed:.1f}s"


def test_09_attention_cost_scales_linearly_in_node_count():
    """Counted attention madds double exactly with N; wall time nearly does."""
    sizes = (512, 1024, 2048)
    regions = 64

    def make_cfg(n):
        return ModelConfig(
            n_nodes=n, n_regions=regions, channels=1, lookback=12, patch_len=4,
            embed_dim=32, layers=2, quantiles=(0.1, 0.5, 0.9), steps_per_day=96,
        )

    counted = [attention_cost(make_cfg(n), batch=1, with_guidance=True)["attention"]
               for n in sizes]
    assert counted[1] == 2 * counted[0]
    assert counted[2] == 2 * counted[1]

    medians = []
    with threadpool_limits(limits=1):
        for n in sizes:
            cfg = make_cfg(n)
            ps = init_params(cfg, seed=0)
            rng = np.random.default_rng([0, 9, n])
            windows = rng.normal(size=(1, n, cfg.lookback, 1))
            guidance = rng.normal(size=(1, regions, cfg.patch_len, 1))
            node_t = rng.normal(size=(1, n, cfg.patch_len, 1))
            reg_t = rng.normal(size=(1, regions, cfg.patch_len, 1))
            t_last = np.full(1, cfg.steps_per_day)

            def step():
                bundle = forward(ps, cfg, windows, guidance, t_last)
                total, _ = composite_loss(bundle, node_t, reg_t, reg_t, cfg)
                ps.zero_grad()
                total.backward()

            medians.append(bench(step, n_runs=21, n_warmup=5).median_s)
    ratios = [medians[i] / medians[i - 1] for i in (1, 2)]
    assert all(1.7 <= r <= 2.6 for r in ratios), f"wall ratios {ratios}"


def test_10_rollout_contracts_hold_across_horizons():
    """Exact horizon length, first-patch invariance, bitwise determinism."""
    cfg = ModelConfig(
        n_nodes=6, n_regions=2, channels=1, lookback=8, patch_len=4,
        embed_dim=8, layers=1, quantiles=(0.1, 0.5, 0.9), steps_per_day=8,
    )
    ps = init_params(cfg, seed=3)
    rng = np.random.default_rng(5)
    context = rng.normal(size=(6, 60, 1))
    labels = np.array([0, 1, 0, 1, 0, 1])

    results = {}
    for horizon in (4, 7, 12, 48):
        r = rollout(ps, cfg, context, 59, horizon, labels=labels)
        assert r.node.shape == (6, horizon, 1)
        results[horizon] = r

    first_patch = results[4].node
    for horizon in (7, 12, 48):
        np.testing.assert_array_equal(
            results[horizon].node[:, :4], first_patch,
            err_msg=f"first patch changed under horizon {horizon}",
        )

    again = rollout(ps, cfg, context, 59, 12, labels=labels)
    np.testing.assert_array_equal(again.node, results[12].node)
    np.testing.assert_array_equal(again.region_quantiles, results[12].region_quantiles)


def test_11_files_round_trip_bitwise_and_corruption_is_diagnosed(tmp_path):
    """Datasets and checkpoints reload exactly; each corruption mode gets its
    own error type."""
    from nestcast.binio import BadMagicError, ChecksumError, TruncatedFileError

    series = generate_synthetic(
        n_regions=2, nodes_per_region=4, n_days=2, steps_per_day=8, seed=9
    )
    dpath = tmp_path / "x.nest"
    save_dataset(dpath, series)
    loaded = load_dataset(dpath)
    np.testing.assert_array_equal(loaded.values, series.values)
    assert loaded.steps_per_day == series.steps_per_day
    assert loaded.start_offset == series.start_offset

    cfg = ModelConfig(
        n_nodes=8, n_regions=2, channels=1, lookback=4, patch_len=2,
        embed_dim=8, layers=1, quantiles=(0.1, 0.5, 0.9), steps_per_day=8,
    )
    ps = init_params(cfg, seed=1)
    cpath = tmp_path / "m.ckpt"
    save_checkpoint(cpath, ps, cfg, seed=1, step=5, extra={"note": [1, 2]})
    ckpt = load_checkpoint(cpath)
    assert ckpt.config == cfg and ckpt.seed == 1 and ckpt.step == 5
    for name, tensor in ps.items():
        np.testing.assert_array_equal(ckpt.params[name].data, tensor.data)

    raw = dpath.read_bytes()
    bad_magic = tmp_path / "magic.nest"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_dataset(bad_magic)
    short = tmp_path / "short.nest"
    short.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedFileError):
        load_dataset(short)
    flipped = bytearray(raw)
    flipped[-3] ^= 0xFF
    bad_sum = tmp_path / "sum.nest"
    bad_sum.write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        load_dataset(bad_sum)


def test_12_demo_is_deterministic_fast_and_beats_persistence(tmp_path, capsys):
    """`demo --seed 7` twice: identical summaries, inside budget, model wins."""
    out_dir = str(tmp_path / "demo")
    t0 = time.perf_counter()
    assert main(["demo", "--seed", "7", "--out-dir", out_dir]) == 0
    first = capsys.readouterr().out
    assert main(["demo", "--seed", "7", "--out-dir", out_dir]) == 0
    second = capsys.readouterr().out
    elapsed = time.perf_counter() - t0
    assert first == second, "demo output changed between identical runs"
    assert "beats_persistence=yes" in first, first
    assert elapsed < 900.0, f"two demo runs took {elapsed:.1f}s"
