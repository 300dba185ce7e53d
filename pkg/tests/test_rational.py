import numpy as np
import pytest

import ukast.tensor as T
from ukast.rational import (
    RationalActivation,
    RationalParams,
    fit_init,
    gelu_reference,
    identity_params,
    pau_backward,
    pau_eval,
    pau_forward,
    poly_p,
    poly_p_naive,
    poly_q,
    poly_q_naive,
)
from ukast.tensor import Tape, Tensor


class TestForwardExamples:
    def test_zero_numerator(self):
        p = RationalParams(np.zeros(4), np.array([1.0, -2.0, 0.5, 3.0]), w=5.0)
        x = np.linspace(-10, 10, 41)
        np.testing.assert_array_equal(pau_eval(x, p), np.zeros_like(x))

    def test_identity_numerator_pure_scale(self):
        p = RationalParams(np.array([0.0, 1.0, 0.0, 0.0]), np.zeros(4), w=2.0)
        assert pau_eval(np.array([3.0]), p)[0] == pytest.approx(6.0)

    def test_hand_evaluation(self):
        p = RationalParams(np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0, 0]), w=1.0)
        assert pau_eval(np.array([1.0]), p)[0] == pytest.approx(0.5)

    def test_denominator_root_stays_finite(self):
        # 1 + Q would vanish at x = 1 without the absolute value
        p = RationalParams(np.array([0.0, 1.0, 0, 0]), np.array([-1.0, 0, 0, 0]), w=1.0)
        val = pau_eval(np.array([1.0]), p)[0]
        assert val == pytest.approx(0.5)
        assert np.isfinite(val)

    def test_value_at_zero_is_a0(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            p = RationalParams(rng.normal(size=4), rng.normal(size=4) * 10)
            assert pau_eval(np.array([0.0]), p)[0] == pytest.approx(p.a[0], rel=1e-12)

    def test_non_finite_input_names_index(self):
        p = identity_params()
        x = np.ones(5)
        x[3] = np.nan
        with pytest.raises(FloatingPointError, match="index 3"):
            pau_eval(x, p)

    def test_scale_equivariance_exact(self):
        rng = np.random.default_rng(4)
        p1 = RationalParams(rng.normal(size=4), rng.normal(size=4), w=1.0)
        p3 = RationalParams(p1.a, p1.b, w=3.0)
        x = rng.normal(size=100)
        np.testing.assert_array_equal(pau_eval(x, p3), 3.0 * pau_eval(x, p1))

    def test_horner_matches_naive_power_sum(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=4)
        b = rng.normal(size=4)
        x = rng.uniform(-5, 5, size=200)
        np.testing.assert_allclose(poly_p(x, a), poly_p_naive(x, a), rtol=1e-12)
        np.testing.assert_allclose(poly_q(x, b), poly_q_naive(x, b), rtol=1e-12)


class TestBackwardExamples:
    def test_identity_config_unit_slope(self):
        p = RationalParams(np.array([0.0, 1.0, 0, 0]), np.zeros(4))
        dx, _, _, _ = pau_backward(np.linspace(-4, 4, 17), p)
        np.testing.assert_allclose(dx, np.ones(17), rtol=1e-12)

    def test_dw_equals_base_function(self):
        rng = np.random.default_rng(8)
        p = RationalParams(rng.normal(size=4), rng.normal(size=4), w=2.5)
        x = rng.normal(size=20)
        _, _, _, dw = pau_backward(x, p)
        base = RationalParams(p.a, p.b, w=1.0)
        np.testing.assert_allclose(dw, pau_eval(x, base), rtol=1e-12)

    def test_all_four_grads_match_finite_differences(self):
        rng = np.random.default_rng(12)
        p = RationalParams(rng.normal(size=4), rng.normal(size=4), w=rng.normal())
        x = rng.normal(size=64) * 2
        dx, da, db, dw = pau_backward(x, p)
        step = 1e-5

        def value(xv, a, b, w):
            pp = RationalParams(a, b, w)
            return pau_eval(np.array([xv]), pp)[0]

        for i in range(64):
            num = (value(x[i] + step, p.a, p.b, p.w)
                   - value(x[i] - step, p.a, p.b, p.w)) / (2 * step)
            assert abs(dx[i] - num) / max(1.0, abs(num)) < 1e-4
        for j in range(4):
            for i in range(0, 64, 16):
                ap = p.a.copy(); ap[j] += step
                am = p.a.copy(); am[j] -= step
                num = (value(x[i], ap, p.b, p.w) - value(x[i], am, p.b, p.w)) / (2 * step)
                assert abs(da[i, j] - num) / max(1.0, abs(num)) < 1e-4
                bp = p.b.copy(); bp[j] += step
                bm = p.b.copy(); bm[j] -= step
                num = (value(x[i], p.a, bp, p.w) - value(x[i], p.a, bm, p.w)) / (2 * step)
                assert abs(db[i, j] - num) / max(1.0, abs(num)) < 1e-4
        for i in range(0, 64, 16):
            num = (value(x[i], p.a, p.b, p.w + step)
                   - value(x[i], p.a, p.b, p.w - step)) / (2 * step)
            assert abs(dw[i] - num) / max(1.0, abs(num)) < 1e-4


class TestSafety:
    def test_fuzz_finite_everywhere(self):
        # denser fuzz lives in the acceptance suite; this is the smoke tier
        rng = np.random.default_rng(99)
        n = 20_000
        x = rng.uniform(-1e6, 1e6, size=n)
        x[:100] = 0.0
        for _ in range(10):
            p = RationalParams(rng.normal(size=4) * rng.choice([1, 100]),
                               rng.normal(size=4) * rng.choice([1, 100]),
                               w=rng.normal())
            q = poly_q(x, p.b)
            den = 1.0 + np.abs(q)
            out = pau_eval(x, p)
            assert np.isfinite(out).all()
            assert (den >= 1.0).all()

    def test_exact_roots_of_q(self):
        # Q(x) = x^3 - x vanishes at 0 and +-1; the denominator is 1 there
        p = RationalParams(np.array([1.0, 1, 1, 1]), np.array([-1.0, 0.0, 1.0, 0.0]))
        x = np.array([-1.0, 0.0, 1.0])
        out = pau_eval(x, p)
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, poly_p(x, p.a) / 1.0)


class TestFitInit:
    def test_identity_recovered_exactly(self):
        p = fit_init("identity")
        assert p.fit_residual < 1e-8
        np.testing.assert_allclose(p.a, [0, 1, 0, 0], atol=1e-10)
        np.testing.assert_allclose(p.b, np.zeros(4), atol=1e-12)
        assert p.w == 1.0

    def test_gelu_like_bound(self):
        p = fit_init("gelu-like", domain=(-3, 3), samples=512)
        assert p.fit_residual < 0.02
        x = np.linspace(-3, 3, 512)
        np.testing.assert_allclose(
            np.abs(pau_eval(x, p) - gelu_reference(x)).max(), p.fit_residual, rtol=1e-9
        )

    def test_underdetermined_rejected(self):
        with pytest.raises(ValueError, match="underdetermined"):
            fit_init("identity", samples=4)

    def test_unknown_target(self):
        with pytest.raises(ValueError, match="unknown fit target"):
            fit_init("swish")


class TestTapeIntegration:
    def test_tensor_path_matches_numpy_path(self):
        rng = np.random.default_rng(21)
        p = RationalParams(rng.normal(size=4), rng.normal(size=4), w=1.7)
        x = rng.normal(size=(5, 6)).astype(np.float32)
        out = pau_forward(Tensor(x), p)
        np.testing.assert_allclose(out.data, pau_eval(x, p), rtol=1e-5, atol=1e-6)

    def test_module_checkpoint_names(self):
        act = RationalActivation()
        names = set(act.state_arrays().keys())
        assert names == {"a", "b", "w"}

    def test_module_trains_scale(self):
        act = RationalActivation(target="identity")
        x = Tensor(np.linspace(-1, 1, 8, dtype=np.float32))
        with Tape():
            y = act(x)
            T.backward(T.reduce_sum(y))
        assert act.w.grad is not None and abs(float(act.w.grad)) > 0
        assert act.a.grad is not None and np.abs(act.a.grad).sum() > 0
        assert act.b.grad is not None
