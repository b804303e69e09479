"""Optimizer, scheduled sampling, and training-loop behavior."""

import json

import numpy as np
import pytest

from nestcast import numcore as nc
from nestcast.model import ModelConfig, forward, init_params
from nestcast.trainer import (
    AdamW,
    TrainConfig,
    WindowSet,
    clip_global_norm,
    sampling_prob,
    train_loop,
    train_step,
    validation_mae,
)


def small_config(**overrides) -> ModelConfig:
    base = dict(
        n_nodes=6,
        n_regions=2,
        channels=1,
        lookback=8,
        patch_len=2,
        embed_dim=8,
        attn_dim=8,
        layers=1,
        quantiles=(0.1, 0.5, 0.9),
        steps_per_day=24,
        days_per_week=7,
    )
    base.update(overrides)
    return ModelConfig(**base)


def synthetic_windows(cfg, n_steps=60, seed=0, start_offset=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps)
    base = np.stack(
        [np.sin(2 * np.pi * t / cfg.steps_per_day + i) for i in range(cfg.n_nodes)]
    )[..., None]
    values = base + 0.3 * rng.normal(size=(cfg.n_nodes, n_steps, 1))
    labels = np.repeat(np.arange(cfg.n_regions), cfg.n_nodes // cfg.n_regions)
    pooled = np.stack([values[labels == r].mean(axis=0) for r in range(cfg.n_regions)])
    return WindowSet(values, pooled, cfg, start_offset=start_offset)


class TestSamplingProb:
    def test_schedule_values(self):
        assert sampling_prob(0) == 1.0
        assert abs(sampling_prob(1) - 0.97) < 1e-15
        assert abs(sampling_prob(2) - 0.97**2) < 1e-15
        assert sampling_prob(1000) == 0.25

    def test_monotone_nonincreasing_until_floor(self):
        vals = [sampling_prob(e) for e in range(200)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 0.25

    def test_custom_floor_and_negative_epoch(self):
        assert sampling_prob(5, gamma=0.5, floor=0.9) == 0.9
        with pytest.raises(ValueError):
            sampling_prob(-1)


class TestAdamW:
    def test_single_step_matches_formula(self):
        ps = nc.ParamStore()
        p = ps.add("w", np.array([1.0, -2.0]))
        g = np.array([0.5, 0.25])
        p.grad = g.copy()
        lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
        opt = AdamW(ps, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
        opt.step()
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        mhat = m / (1 - b1)
        vhat = v / (1 - b2)
        expected = np.array([1.0, -2.0]) - lr * (
            mhat / (np.sqrt(vhat) + eps) + wd * np.array([1.0, -2.0])
        )
        np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)

    def test_two_steps_accumulate_moments(self):
        ps = nc.ParamStore()
        p = ps.add("w", np.array([0.5]))
        lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.0
        opt = AdamW(ps, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
        ref = np.array([0.5])
        m = np.zeros(1)
        v = np.zeros(1)
        for t, gval in enumerate([0.3, -0.7], start=1):
            g = np.array([gval])
            p.grad = g.copy()
            opt.step()
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-15)

    def test_none_grad_skipped_entirely(self):
        ps = nc.ParamStore()
        a = ps.add("a", np.array([1.0]))
        b = ps.add("b", np.array([2.0]))
        a.grad = np.array([1.0])
        opt = AdamW(ps, lr=0.1, weight_decay=0.5)
        opt.step()
        assert b.data[0] == 2.0  # no update, no decay
        assert a.data[0] != 1.0

    def test_zero_grad_still_decays(self):
        ps = nc.ParamStore()
        p = ps.add("w", np.array([4.0]))
        p.grad = np.zeros(1)
        opt = AdamW(ps, lr=0.1, weight_decay=0.01)
        opt.step()
        np.testing.assert_allclose(p.data, 4.0 * (1 - 0.1 * 0.01), rtol=0, atol=1e-15)


class TestClip:
    def make_store(self, grads):
        ps = nc.ParamStore()
        for i, g in enumerate(grads):
            t = ps.add(f"p{i}", np.zeros_like(np.asarray(g, dtype=np.float64)))
            t.grad = np.asarray(g, dtype=np.float64)
        return ps

    def test_under_threshold_untouched(self):
        ps = self.make_store([[3.0], [4.0]])  # norm 5
        norm = clip_global_norm(ps, 5.0)
        assert norm == 5.0
        assert ps["p0"].grad[0] == 3.0 and ps["p1"].grad[0] == 4.0

    def test_over_threshold_scaled(self):
        ps = self.make_store([[6.0], [8.0]])  # norm 10
        norm = clip_global_norm(ps, 5.0)
        assert norm == 10.0
        np.testing.assert_allclose(ps["p0"].grad, [3.0], atol=1e-15)
        np.testing.assert_allclose(ps["p1"].grad, [4.0], atol=1e-15)

    def test_none_grads_ignored(self):
        ps = self.make_store([[1.0]])
        ps.add("free", np.ones(3))
        assert clip_global_norm(ps, 10.0) == 1.0


class TestWindowSet:
    def test_index_range_future_mode(self):
        cfg = small_config(lookback=4, patch_len=2)
        ws = synthetic_windows(cfg, n_steps=12)
        # first t with a full lookback is 3; last with 2 patches ahead is 7
        assert ws.indices.tolist() == [3, 4, 5, 6, 7]

    def test_index_range_past_mode_wide_patch(self):
        cfg = small_config(lookback=4, patch_len=6, guidance_mode="past")
        ws = synthetic_windows(cfg, n_steps=24)
        assert ws.indices[0] == 5
        assert ws.indices[-1] == 24 - 2 * 6 - 1

    def test_too_short_split_rejected(self):
        cfg = small_config(lookback=8, patch_len=2)
        with pytest.raises(ValueError, match="too short"):
            synthetic_windows(cfg, n_steps=11)

    def test_gather_slices_match_hand_indexing(self):
        cfg = small_config(lookback=4, patch_len=2)
        ws = synthetic_windows(cfg, n_steps=20, start_offset=100)
        batch = ws.gather(np.array([5, 9]))
        t = 9
        np.testing.assert_array_equal(batch.windows[1], ws.values[:, 6:10])
        np.testing.assert_array_equal(batch.node_target[1], ws.values[:, 10:12])
        np.testing.assert_array_equal(batch.region_current[1], ws.pooled[:, 10:12])
        np.testing.assert_array_equal(batch.region_next[1], ws.pooled[:, 12:14])
        np.testing.assert_array_equal(batch.guidance_past[1], ws.pooled[:, 8:10])
        assert batch.t_abs.tolist() == [105, 109]

    def test_shape_mismatches_rejected(self):
        cfg = small_config()
        values = np.zeros((cfg.n_nodes, 40, 1))
        with pytest.raises(ValueError, match="pooled"):
            WindowSet(values, np.zeros((3, 40, 1)), cfg)
        with pytest.raises(ValueError, match="values"):
            WindowSet(np.zeros((2, 40, 1)), np.zeros((2, 40, 1)), cfg)


class TestTrainStep:
    def test_parameters_move_and_losses_finite(self):
        cfg = small_config()
        ps = init_params(cfg, seed=0)
        before = {name: t.data.copy() for name, t in ps.items()}
        ws = synthetic_windows(cfg)
        opt = AdamW(ps, lr=1e-3)
        batch = ws.gather(ws.indices[:8])
        stats = train_step(ps, cfg, opt, batch, 1.0, np.random.default_rng(0))
        assert np.isfinite([stats.total, stats.node, stats.region_next, stats.boundary]).all()
        assert stats.teacher_fraction == 1.0
        moved = [name for name, t in ps.items() if not np.array_equal(t.data, before[name])]
        assert len(moved) > 0.9 * len(before)

    def test_boundary_head_gets_gradient_under_full_teacher_forcing(self):
        cfg = small_config()
        ps = init_params(cfg, seed=1)
        ws = synthetic_windows(cfg)
        opt = AdamW(ps, lr=0.0)
        batch = ws.gather(ws.indices[:8])
        train_step(ps, cfg, opt, batch, 1.0, np.random.default_rng(0))
        g = ps["head.boundary.q0.w"].grad
        assert g is not None and np.any(g != 0.0)

    def test_self_guidance_changes_the_guided_pass(self):
        cfg = small_config()
        ws = synthetic_windows(cfg)
        batch = ws.gather(ws.indices[:8])
        outcomes = []
        for p_tf in (0.0, 1.0):
            ps = init_params(cfg, seed=2)
            opt = AdamW(ps, lr=0.0)
            stats = train_step(ps, cfg, opt, batch, p_tf, np.random.default_rng(0))
            outcomes.append(stats)
        assert outcomes[0].teacher_fraction == 0.0
        assert outcomes[1].teacher_fraction == 1.0
        # same init, same data: only the guidance source differs
        assert outcomes[0].node != outcomes[1].node
        assert outcomes[0].boundary == outcomes[1].boundary  # recovery pass unaffected

    def test_guess_is_detached_from_the_recovery_graph(self):
        cfg = small_config()
        ws = synthetic_windows(cfg)
        batch = ws.gather(ws.indices[:6])
        ps_a = init_params(cfg, seed=3)
        ps_b = ps_a.copy()

        opt = AdamW(ps_a, lr=0.0)
        train_step(ps_a, cfg, opt, batch, 0.0, np.random.default_rng(5), clip_norm=1e9)

        with nc.no_grad():
            frozen = forward(ps_b, cfg, batch.windows, None, batch.t_abs)
            z_hat = frozen.boundary.data[cfg.median_index].copy()
        teacher = np.random.default_rng(5).random(batch.windows.shape[0]) < 0.0
        guidance = np.where(teacher[:, None, None, None], batch.region_current, z_hat)
        recovery = forward(ps_b, cfg, batch.windows, None, batch.t_abs)
        guided = forward(ps_b, cfg, batch.windows, guidance, batch.t_abs)
        total = nc.add(
            nc.huber_loss(guided.node_patch, batch.node_target, cfg.huber_delta),
            nc.add(
                nc.scale(nc.pinball_loss(guided.region_next, batch.region_next, cfg.quantiles), 0.1),
                nc.scale(
                    nc.pinball_loss(recovery.boundary, batch.region_current, cfg.quantiles), 0.2
                ),
            ),
        )
        ps_b.zero_grad()
        total.backward()
        for name, t in ps_a.items():
            ga, gb = t.grad, ps_b[name].grad
            assert (ga is None) == (gb is None)
            if ga is not None:
                np.testing.assert_allclose(ga, gb, rtol=0, atol=1e-12)

    def test_past_mode_single_pass(self):
        cfg = small_config(guidance_mode="past")
        ps = init_params(cfg, seed=4)
        ws = synthetic_windows(cfg)
        opt = AdamW(ps, lr=1e-3)
        stats = train_step(ps, cfg, opt, ws.gather(ws.indices[:8]), 0.5, np.random.default_rng(0))
        assert np.isfinite(stats.total)
        assert stats.teacher_fraction == 1.0


class TestTrainLoop:
    def run_loop(self, tcfg=None, cfg=None, seed=0, history_path=None):
        cfg = cfg or small_config()
        ps = init_params(cfg, seed=seed)
        train_ws = synthetic_windows(cfg, n_steps=80, seed=1)
        val_ws = synthetic_windows(cfg, n_steps=40, seed=2, start_offset=80)
        tcfg = tcfg or TrainConfig(epochs=3, batch_size=16, lr=3e-3, seed=seed)
        result = train_loop(ps, cfg, train_ws, val_ws, tcfg, history_path=history_path)
        return ps, result, val_ws

    def test_bitwise_reproducible(self):
        ps1, r1, _ = self.run_loop()
        ps2, r2, _ = self.run_loop()
        assert r1.history == r2.history
        for name, t in ps1.items():
            assert np.array_equal(t.data, ps2[name].data)

    def test_loss_decreases_on_learnable_signal(self):
        tcfg = TrainConfig(epochs=6, batch_size=16, lr=1e-2, seed=0)
        _, result, _ = self.run_loop(tcfg=tcfg)
        assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]

    def test_best_epoch_params_are_restored(self):
        cfg = small_config()
        ps, result, val_ws = self.run_loop(cfg=cfg)
        recomputed = validation_mae(ps, cfg, val_ws)
        assert abs(recomputed - result.best_val_mae) < 1e-12

    def test_early_stop_with_frozen_params(self):
        tcfg = TrainConfig(epochs=10, batch_size=16, lr=0.0, patience=1, seed=0)
        _, result, _ = self.run_loop(tcfg=tcfg)
        assert result.early_stopped
        assert result.epochs_run == 2
        assert result.best_epoch == 0

    def test_history_jsonl_schema(self, tmp_path):
        path = tmp_path / "history.jsonl"
        _, result, _ = self.run_loop(history_path=path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == result.epochs_run
        for line in lines:
            rec = json.loads(line)
            assert set(rec) == {"epoch", "train_loss", "val_mae", "p_tf"}

    def test_history_p_tf_follows_schedule(self):
        _, result, _ = self.run_loop()
        for rec in result.history:
            assert rec["p_tf"] == sampling_prob(rec["epoch"])


class TestTrainConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": 0},
            {"batch_size": 0},
            {"lr": -1.0},
            {"beta1": 1.0},
            {"ss_gamma": 0.0},
            {"ss_floor": 1.5},
            {"clip_norm": 0.0},
            {"lam1": -0.1},
        ],
    )
    def test_bad_values_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)
