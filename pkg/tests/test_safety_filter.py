import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import qp_by_active_set_enumeration
from respcvae import qp
from respcvae.barrier import BarrierConfig, barrier_values_arrays
from respcvae.dynamics import AgentPhysState, RelativeState
from respcvae.errors import ConvexityError, InvalidInputError
from respcvae.safety_filter import (
    FilterConfig,
    apply_activation,
    build_qp_batch,
    project,
    project_batch,
    project_pair,
    project_vjp,
)

CFG = FilterConfig(barrier=BarrierConfig(d_min=2.0, sigma=1.0, alpha0=1.0))


def head_on(gap=3.0, closing=2.0):
    return [AgentPhysState([0, 0], [0, 0]), AgentPhysState([gap, 0], [-closing, 0])]


def random_scene(rng, n, spread=4.0):
    return [AgentPhysState(rng.normal(size=2) * spread, rng.normal(size=2) * 2) for _ in range(n)]


class TestActivation:
    def test_softmax_symmetric(self):
        np.testing.assert_allclose(apply_activation([0.0, 0.0], "softmax", 0.1).gamma, [0.5, 0.5])

    def test_clip_zero(self):
        np.testing.assert_array_equal(apply_activation([-3.0, 2.0], "clip_zero", 0.1).gamma, [0, 2])

    def test_clip_neg_beta(self):
        g = apply_activation([-3.0, 2.0], "clip_neg_beta", 1.0, conv_floor=1e-3).gamma
        np.testing.assert_allclose(g, [-0.999, 2.0])

    @given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30)))
    def test_softmax_on_simplex(self, raw):
        g = apply_activation(raw, "softmax", 0.1).gamma
        assert g.sum() == pytest.approx(1.0)
        assert np.all(g >= 0) and np.all(g <= 1)

    @given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30)))
    def test_tanh_range_with_large_beta(self, raw):
        g = apply_activation(raw, "tanh", 1.5).gamma
        assert np.all(np.abs(g) <= 1)

    def test_identity_guard_raises_with_agent(self):
        with pytest.raises(ConvexityError) as info:
            apply_activation([0.5, -0.2], "none", 0.1)
        assert info.value.agent == 1

    def test_tanh_guard_clamps(self):
        r = apply_activation([-5.0, 1.0], "tanh", 0.1, guard="clamp")
        assert r.gamma[0] == pytest.approx(-0.1 + 1e-3)
        np.testing.assert_array_equal(r.clamped, [True, False])

    def test_masked_softmax(self):
        g = apply_activation([1.0, 5.0, 1.0], "softmax", 0.1, mask=np.array([True, False, True])).gamma
        np.testing.assert_allclose(g, [0.5, 0.0, 0.5])

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            apply_activation([np.nan], "none", 0.1)

    def test_unknown_mode(self):
        with pytest.raises(InvalidInputError):
            apply_activation([0.0], "relu", 0.1)


class TestProject:
    def test_far_apart_is_ridge_shrinkage(self):
        states = [AgentPhysState([0, 0], [0, 0]), AgentPhysState([50, 0], [0, 0])]
        gamma = np.array([0.8, 0.3])
        ud = np.array([1.0, -0.5, 0.3, 2.0])
        r = project(ud, states, gamma, CFG)
        expect = (np.repeat(gamma, 2) / (np.repeat(gamma, 2) + CFG.beta1)) * ud
        np.testing.assert_allclose(r.u, expect, atol=1e-8)
        assert r.epsilon <= 1e-8
        assert r.active_pairs == []

    def test_small_beta1_recovers_u_des(self):
        states = [AgentPhysState([0, 0], [0, 0]), AgentPhysState([50, 0], [0, 0])]
        ud = np.array([1.0, -0.5, 0.3, 2.0])
        r = project(ud, states, [1.0, 1.0], FilterConfig(beta1=1e-7))
        np.testing.assert_allclose(r.u, ud, atol=1e-6)

    def test_symmetric_head_on_equal_deviation(self):
        r = project([1.5, 0, -1.5, 0], head_on(), [0.6, 0.6], CFG)
        d1 = np.linalg.norm(r.u[:2] - [1.5, 0])
        d2 = np.linalg.norm(r.u[2:] - [-1.5, 0])
        assert d1 == pytest.approx(d2, rel=1e-7)
        assert r.active_pairs == [(0, 1)]

    def test_fixed_instance_matches_enumeration_oracle(self):
        ud = np.array([1.0, 0, -1.0, 0])
        r = project(ud, head_on(3.0, 2.0), [0.8, 0.2], CFG)
        pos = np.array([[[0.0, 0], [3, 0]]])
        vel = np.array([[[0.0, 0], [-2, 0]]])
        Q, q, A, b, _ = build_qp_batch(ud.reshape(1, 2, 2), pos, vel, np.array([[0.8, 0.2]]), CFG)
        x, lam, _ = qp_by_active_set_enumeration(Q[0], q[0], A[0], b[0])
        np.testing.assert_allclose(r.u, x[:4], atol=1e-7)
        assert r.epsilon == pytest.approx(x[4], abs=1e-8)
        # hand check: only the pair row is active, eps = 0
        np.testing.assert_allclose(r.u, [-0.25, 0, 2.75, 0], atol=1e-7)
        assert r.qp_status == qp.OPTIMAL

    def test_higher_gamma_deviates_less(self):
        ud = np.array([1.0, 0, -1.0, 0])
        r = project(ud, head_on(), [5.0, 0.2], CFG)
        d = np.linalg.norm((r.u - ud).reshape(2, 2), axis=1)
        assert d[0] < d[1]

    def test_pair_equals_project(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            dp, dv = rng.normal(size=2) * 3, rng.normal(size=2) * 2
            ud, g = rng.normal(size=4), rng.uniform(0.05, 2, size=2)
            a = project_pair(ud, RelativeState(dp, dv), g, CFG)
            b = project(ud, [AgentPhysState([0, 0], [0, 0]), AgentPhysState(dp, dv)], g, CFG)
            np.testing.assert_allclose(a.u, b.u, atol=1e-8)
            assert a.epsilon == pytest.approx(b.epsilon, abs=1e-8)

    def test_bounds_and_nonnegative_slack(self):
        rng = np.random.default_rng(1)
        for n in (2, 3, 4, 6):
            for _ in range(10):
                r = project(rng.normal(size=2 * n) * 6, random_scene(rng, n, 2.0), rng.uniform(0.05, 2, n), CFG)
                assert np.all(np.abs(r.u) <= CFG.u_bound + 1e-7)
                assert r.epsilon >= -1e-8
                assert r.qp_status == qp.OPTIMAL

    def test_slack_zero_when_unrelaxed_problem_feasible(self):
        rng = np.random.default_rng(2)
        checked = 0
        for _ in range(200):
            n = int(rng.integers(2, 5))
            states = random_scene(rng, n, 3.0)
            ud, g = rng.normal(size=2 * n) * 3, rng.uniform(0.05, 2, n)
            pos = np.array([[s.position for s in states]])
            vel = np.array([[s.velocity for s in states]])
            Q, q, A, b, _ = build_qp_batch(ud.reshape(1, n, 2), pos, vel, g[None], CFG)
            # drop eps: remove its column and its nonnegativity row
            unrelaxed = qp.solve(qp.QPProblem(Q[0, :-1, :-1], q[0, :-1], A[0, :-1, :-1], b[0, :-1]))
            if unrelaxed.status != qp.OPTIMAL:
                continue
            r = project(ud, states, g, CFG)
            assert r.epsilon <= 1e-7
            np.testing.assert_allclose(r.u, unrelaxed.x, atol=1e-6)
            checked += 1
        assert checked > 50

    def test_monotone_in_own_gamma(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            n = 3
            states = random_scene(rng, n, 2.5)
            ud, g = rng.normal(size=2 * n) * 2, rng.uniform(0.1, 1.5, n)
            i = int(rng.integers(n))
            r0 = project(ud, states, g, CFG)
            g2 = g.copy()
            g2[i] *= 1.3
            r1 = project(ud, states, g2, CFG)
            if r0.active_pairs != r1.active_pairs:
                continue
            d0 = np.linalg.norm(r0.u[2 * i : 2 * i + 2] - ud[2 * i : 2 * i + 2])
            d1 = np.linalg.norm(r1.u[2 * i : 2 * i + 2] - ud[2 * i : 2 * i + 2])
            assert d1 <= d0 + 1e-8

    def test_needs_two_agents(self):
        with pytest.raises(InvalidInputError):
            project([0, 0], [AgentPhysState([0, 0], [0, 0])], [1.0], CFG)

    def test_convexity_guard(self):
        with pytest.raises(ConvexityError):
            project([0, 0, 0, 0], head_on(), [-0.5, 1.0], CFG)

    def test_padded_agents_are_inert(self):
        rng = np.random.default_rng(4)
        pos, vel = rng.normal(size=(2, 1, 3, 2)) * 2
        ud = rng.normal(size=(1, 3, 2))
        g = np.array([[0.5, 0.7, 0.9]])
        valid = np.array([[True, True, False]])
        fb = project_batch(ud, pos, vel, g, CFG, valid)
        ref = project_batch(ud[:, :2], pos[:, :2], vel[:, :2], g[:, :2], CFG)
        np.testing.assert_allclose(fb.u[0, :2], ref.u[0], atol=1e-8)
        np.testing.assert_allclose(fb.u[0, 2], 0.0, atol=1e-8)

    @pytest.mark.parametrize("bad", [dict(beta1=0.0), dict(beta2=-1.0), dict(u_bound=0.0), dict(activation="x")])
    def test_config_validation(self, bad):
        with pytest.raises(InvalidInputError):
            FilterConfig(**bad)

    def test_forward_invariance_short_run(self):
        from respcvae.dynamics import step_arrays

        pos = np.array([[[0.0, 0.0], [6.0, 0.3]]])
        vel = np.array([[[1.5, 0.0], [-1.5, 0.0]]])
        cfg = CFG
        for _ in range(100):
            ud = np.array([[[1.0, 0.0], [-1.0, 0.0]]])
            fb = project_batch(ud, pos, vel, np.array([[0.5, 0.5]]), cfg)
            pos, vel = step_arrays(pos, vel, fb.u, 0.05)
            assert barrier_values_arrays(pos, vel, cfg.barrier)[0, 0] >= -1e-6


class TestProjectVjp:
    def test_inactive_without_ridge_has_zero_gamma_gradient(self):
        states = [AgentPhysState([0, 0], [0, 0]), AgentPhysState([50, 0], [0, 0])]
        cfg = FilterConfig(beta1=1e-9)
        dg, _, _ = project_vjp([1, 0, -1, 0], states, [0.5, 0.5], cfg, np.ones(4))
        np.testing.assert_allclose(dg, 0.0, atol=1e-7)

    def test_inactive_matches_ridge_derivative(self):
        states = [AgentPhysState([0, 0], [0, 0]), AgentPhysState([50, 0], [0, 0])]
        ud = np.array([1.0, -2.0, 0.5, 3.0])
        g = np.array([0.4, 0.9])
        up = np.array([0.3, -1.0, 2.0, 0.7])
        dg, dud, _ = project_vjp(ud, states, g, CFG, up)
        b1 = CFG.beta1
        expect = [up[2 * i : 2 * i + 2] @ (b1 * ud[2 * i : 2 * i + 2] / (g[i] + b1) ** 2) for i in range(2)]
        np.testing.assert_allclose(dg, expect, rtol=1e-6)
        np.testing.assert_allclose(dud, up * np.repeat(g / (g + b1), 2), rtol=1e-6)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        checked = active_seen = 0
        tight = FilterConfig(tol=1e-10, max_iter=100)
        while checked < 20:
            n = int(rng.integers(2, 5))
            states = random_scene(rng, n, 2.0)
            ud, g = rng.normal(size=2 * n) * 2, rng.uniform(0.1, 1.5, n)
            up = rng.normal(size=2 * n)
            pos = np.array([[s.position for s in states]])
            vel = np.array([[s.velocity for s in states]])
            fb = project_batch(ud.reshape(1, n, 2), pos, vel, g[None], CFG)
            slack = fb.b - np.einsum("bki,bi->bk", fb.A, fb.sol.x)
            if np.min(np.maximum(fb.sol.lam, slack)) < 1e-3:
                continue
            dg, dud, deg = project_vjp(ud, states, g, CFG, up)
            assert not deg
            d = rng.normal(size=n)
            f = lambda gg: up @ project(ud, states, gg, tight).u
            num = (f(g + 1e-4 * d) - f(g - 1e-4 * d)) / 2e-4
            assert abs(num - dg @ d) <= 1e-3 * max(abs(num), 1e-6)
            active_seen += bool(fb.active_rows.any())
            checked += 1
        assert active_seen > 0
