"""Autodiff core: frozen-value oracles, finite-difference gradients, counters."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestcast import numcore as nc


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestForwardOracles:
    def test_linear_hand_value(self):
        x = np.array([[1.0, 2.0]])
        w = np.array([[1.0, 0.0], [0.0, 2.0]])
        b = np.array([1.0, 1.0])
        y = nc.linear(x, w, b)
        np.testing.assert_allclose(y.data, [[2.0, 5.0]], rtol=0, atol=0)

    def test_attention_hand_value(self):
        # a=1, b=2, d=1: logits [1, -1], weights softmax -> sigmoid(2) on value 2
        q = np.array([[1.0]])
        k = np.array([[1.0], [-1.0]])
        v = np.array([[2.0], [0.0]])
        out = nc.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data, [[2.0 * sigmoid(2.0)]], rtol=1e-15)

    def test_huber_hand_values(self):
        # |e| <= delta quadratic; outside linear: e=2, delta=1 -> 1.5
        p = nc.Tensor(np.array([2.0]))
        np.testing.assert_allclose(nc.huber_loss(p, np.array([0.0]), 1.0).data, 1.5)
        p = nc.Tensor(np.array([0.5]))
        np.testing.assert_allclose(nc.huber_loss(p, np.array([0.0]), 1.0).data, 0.125)

    def test_pinball_hand_values(self):
        # level 0.9: overshooting by 1 costs 0.1, undershooting by 1 costs 0.9
        tau = 0.9
        over = nc.pinball_loss(nc.Tensor(np.array([[1.0]])), np.array([0.0]), [tau])
        under = nc.pinball_loss(nc.Tensor(np.array([[-1.0]])), np.array([0.0]), [tau])
        np.testing.assert_allclose(over.data, 0.1)
        np.testing.assert_allclose(under.data, 0.9)

    def test_pinball_minimizer_is_the_sample_quantile(self):
        # scan candidate constants against an empirical sample: the loss
        # minimum must sit at the tau-quantile, not at 1 - tau
        rng = np.random.default_rng(0)
        sample = rng.normal(size=2000)
        grid = np.linspace(-3, 3, 601)
        for tau in (0.1, 0.9):
            losses = [
                float(nc.pinball_loss(nc.Tensor(np.full((1, 2000), g)), sample, [tau]).data)
                for g in grid
            ]
            best = grid[int(np.argmin(losses))]
            assert abs(best - np.quantile(sample, tau)) < 0.05

    def test_attention_matches_independent_softmax_oracle(self):
        rng = np.random.default_rng(7)
        q, k, v = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        logits = q @ k.T / np.sqrt(5.0)
        ref_rows = np.exp(logits - logits.max(axis=1, keepdims=True))
        ref = (ref_rows / ref_rows.sum(axis=1, keepdims=True)) @ v
        np.testing.assert_allclose(nc.scaled_dot_attention(q, k, v).data, ref, rtol=1e-13)


class TestSoftmaxStability:
    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.uniform(-600.0, 600.0, size=(5, 7))
        probs = nc.stable_softmax(logits, axis=-1)
        assert np.all(probs >= 0.0)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(4, 6)) * 10
        shift = rng.uniform(-100, 100)
        np.testing.assert_allclose(
            nc.stable_softmax(logits + shift),
            nc.stable_softmax(logits),
            rtol=0,
            atol=1e-10,
        )


def _check(f, params, tol=1e-4):
    report = nc.gradient_check(f, params, eps=1e-5, tol=tol)
    assert report.passed, str(report)


class TestOpGradients:
    """Central finite differences vs the tape, 100 seeds per op."""

    def test_linear(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ps = nc.ParamStore()
            w = ps.add("w", rng.normal(size=(3, 2)))
            b = ps.add("b", rng.normal(size=2))
            x = rng.normal(size=(4, 3))
            _check(lambda p: nc.mean_all(nc.linear(x, p["w"], p["b"])), ps)

    def test_matmul_including_batched(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ps = nc.ParamStore()
            a = ps.add("a", rng.normal(size=(2, 3, 4)))
            b = ps.add("b", rng.normal(size=(4, 2)))
            _check(lambda p: nc.sum_all(nc.matmul(p["a"], p["b"])), ps)

    def test_attention(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ps = nc.ParamStore()
            ps.add("q", rng.normal(size=(3, 5)))
            ps.add("k", rng.normal(size=(4, 5)))
            ps.add("v", rng.normal(size=(4, 5)))
            _check(
                lambda p: nc.mean_all(nc.scaled_dot_attention(p["q"], p["k"], p["v"])), ps
            )

    def test_attention_batched(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ps = nc.ParamStore()
            ps.add("q", rng.normal(size=(2, 3, 4)))
            ps.add("k", rng.normal(size=(2, 5, 4)))
            ps.add("v", rng.normal(size=(2, 5, 4)))
            _check(
                lambda p: nc.mean_all(nc.scaled_dot_attention(p["q"], p["k"], p["v"])), ps
            )

    def test_relu_away_from_kink(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ps = nc.ParamStore()
            raw = rng.normal(size=(3, 4))
            ps.add("x", np.sign(raw) * (np.abs(raw) + 0.05))
            _check(lambda p: nc.sum_all(nc.relu(p["x"])), ps)

    def test_embedding_mean(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ps = nc.ParamStore()
            ps.add("table", rng.normal(size=(6, 3)))
            idx = rng.integers(0, 6, size=(2, 4))
            _check(lambda p: nc.mean_all(nc.embedding_mean(p["table"], idx)), ps)

    def test_huber_away_from_kink(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ps = nc.ParamStore()
            pred = ps.add("p", rng.normal(size=(3, 2)))
            e = rng.normal(size=(3, 2))
            e = np.sign(e) * np.where(np.abs(np.abs(e) - 1.0) < 0.05, np.abs(e) + 0.1, np.abs(e))
            target = pred.data - e
            _check(lambda p: nc.huber_loss(p["p"], target, 1.0), ps)

    def test_pinball_away_from_kink(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ps = nc.ParamStore()
            pred = ps.add("p", rng.normal(size=(2, 3, 2)))
            target = pred.data[0] - np.sign(rng.normal(size=(3, 2))) * rng.uniform(
                0.1, 1.0, size=(3, 2)
            )
            _check(lambda p: nc.pinball_loss(p["p"], target, [0.1, 0.9]), ps)

    def test_broadcast_add_paths(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ps = nc.ParamStore()
            ps.add("h", rng.normal(size=(2, 3, 4)))
            ps.add("row", rng.normal(size=(3, 4)))
            ps.add("tok", rng.normal(size=(2, 1, 4)))
            _check(
                lambda p: nc.mean_all(nc.add(nc.add(p["h"], p["row"]), p["tok"])), ps
            )

    def test_composite_graph(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            ps = nc.ParamStore()
            ps.add("w1", rng.normal(size=(4, 6)))
            ps.add("b1", rng.normal(size=6))
            ps.add("w2", rng.normal(size=(6, 2)))
            ps.add("b2", rng.normal(size=2))
            x = rng.normal(size=(5, 4))
            target = rng.normal(size=(5, 2)) * 3

            def f(p):
                h = nc.relu(nc.linear(x, p["w1"], p["b1"]))
                y = nc.linear(h, p["w2"], p["b2"])
                a = nc.scaled_dot_attention(y, y, y)
                stacked = nc.stack0([y, nc.scale(a, 0.5)])
                pieces = nc.add(
                    nc.huber_loss(nc.reshape(y, (10,)), target.reshape(10), 1.0),
                    nc.pinball_loss(stacked, target, [0.2, 0.8]),
                )
                return pieces

            _check(f, ps)


class TestGradCheckContract:
    def test_eps_range_enforced(self):
        ps = nc.ParamStore()
        ps.add("x", np.ones(2))
        with pytest.raises(ValueError):
            nc.gradient_check(lambda p: nc.sum_all(p["x"]), ps, eps=1e-8)
        with pytest.raises(ValueError):
            nc.gradient_check(lambda p: nc.sum_all(p["x"]), ps, eps=1e-3)

    def test_nonfinite_rejected(self):
        ps = nc.ParamStore()
        ps.add("x", np.array([1.0]))
        with pytest.raises(ValueError, match="non-finite"):
            nc.gradient_check(lambda p: nc.Tensor(np.float64("nan")), ps)

    def test_report_lists_every_tensor(self):
        ps = nc.ParamStore()
        ps.add("a", np.ones((2, 2)))
        ps.add("b", np.ones(3))
        report = nc.gradient_check(lambda p: nc.add(nc.sum_all(p["a"]), nc.sum_all(p["b"])), ps)
        assert set(report.per_tensor) == {"a", "b"}
        assert report.passed

    def test_params_restored_exactly(self):
        ps = nc.ParamStore()
        t = ps.add("x", np.array([0.1, 0.2, 0.3]))
        before = t.data.copy()
        nc.gradient_check(lambda p: nc.sum_all(p["x"]), ps)
        assert np.array_equal(t.data, before)


class TestOpCounts:
    def test_matmul_and_linear_projection_counts(self):
        nc.reset_op_counts()
        nc.matmul(np.ones((2, 3)), np.ones((3, 4)))
        assert nc.op_counts() == {"attention": 0, "projection": 24}
        nc.linear(np.ones((5, 3)), np.ones((3, 2)), np.zeros(2))
        assert nc.op_counts()["projection"] == 24 + 30

    def test_batched_matmul_count(self):
        nc.reset_op_counts()
        nc.matmul(np.ones((2, 3, 4)), np.ones((4, 5)))
        assert nc.op_counts()["projection"] == 2 * 3 * 4 * 5

    def test_attention_bucket_count(self):
        nc.reset_op_counts()
        nc.scaled_dot_attention(np.ones((2, 4)), np.ones((3, 4)), np.ones((3, 4)))
        assert nc.op_counts() == {"attention": 2 * 2 * 3 * 4, "projection": 0}

    def test_reset(self):
        nc.matmul(np.ones((2, 2)), np.ones((2, 2)))
        nc.reset_op_counts()
        assert nc.op_counts() == {"attention": 0, "projection": 0}


class TestTapeMechanics:
    def test_no_grad_builds_no_tape(self):
        w = nc.Tensor(np.ones((2, 2)), requires_grad=True)
        with nc.no_grad():
            y = nc.matmul(w, w)
        assert not y.requires_grad and y._parents == ()

    def test_grad_accumulates_over_reuse(self):
        ps = nc.ParamStore()
        x = ps.add("x", np.array([[2.0]]))
        y = nc.add(nc.matmul(x, x), nc.scale(x, 3.0))  # x^2 + 3x -> dy/dx = 2x + 3
        nc.sum_all(y).backward()
        np.testing.assert_allclose(x.grad, [[7.0]])

    def test_backward_requires_scalar(self):
        x = nc.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            nc.relu(x).backward()

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(0)
        q, k, v = rng.normal(size=(6, 8)), rng.normal(size=(9, 8)), rng.normal(size=(9, 8))
        a = nc.scaled_dot_attention(q, k, v).data
        b = nc.scaled_dot_attention(q, k, v).data
        assert np.array_equal(a, b)

    def test_all_finite_after_forward_backward(self):
        rng = np.random.default_rng(3)
        ps = nc.ParamStore()
        w = ps.add("w", rng.normal(size=(4, 4)) * 100)
        x = rng.normal(size=(5, 4)) * 100
        h = nc.scaled_dot_attention(nc.matmul(nc.Tensor(x), w), w, w)
        loss = nc.huber_loss(h, np.zeros_like(h.data), 1.0)
        loss.backward()
        assert np.isfinite(loss.data)
        assert np.all(np.isfinite(w.grad))


class TestValidation:
    def test_linear_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError) as exc:
            nc.linear(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_attention_degenerate_rejected(self):
        with pytest.raises(ValueError):
            nc.scaled_dot_attention(np.ones((2, 0)), np.ones((3, 0)), np.ones((3, 0)))
        with pytest.raises(ValueError):
            nc.scaled_dot_attention(np.ones((2, 4)), np.ones((0, 4)), np.ones((0, 4)))

    def test_pinball_levels_validated(self):
        with pytest.raises(ValueError):
            nc.pinball_loss(nc.Tensor(np.ones((1, 2))), np.zeros(2), [1.5])

    def test_embedding_index_range(self):
        with pytest.raises(ValueError, match="out of range"):
            nc.embedding_mean(nc.Tensor(np.ones((3, 2))), np.array([[0, 3]]))

    def test_paramstore_duplicate_name(self):
        ps = nc.ParamStore()
        ps.add("w", np.ones(1))
        with pytest.raises(ValueError, match="duplicate"):
            ps.add("w", np.ones(1))

    def test_paramstore_copy_is_deep(self):
        ps = nc.ParamStore()
        ps.add("w", np.ones(2))
        dup = ps.copy()
        dup["w"].data[0] = 99.0
        assert ps["w"].data[0] == 1.0
        assert ps.n_params == 2
