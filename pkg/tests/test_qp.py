import numpy as np
import pytest

from oracles import dual_projected_gradient, qp_by_active_set_enumeration, random_qp
from respcvae import qp
from respcvae.errors import DegenerateDerivativeError, InvalidInputError
from respcvae.qp import QPProblem, kkt_residuals, solution_vjp, solve


def empty(n):
    return np.zeros((0, n)), np.zeros(0)


class TestSolve:
    def test_unconstrained(self):
        sol = solve(QPProblem(np.eye(2), np.array([-1.0, -1.0]), *empty(2)))
        assert sol.status == qp.OPTIMAL
        np.testing.assert_allclose(sol.x, [1, 1], atol=1e-7)

    def test_one_dimensional_clip(self):
        # (x-2)^2 = x^2 - 4x + 4  ->  Q=2, q=-4
        sol = solve(QPProblem(np.array([[2.0]]), np.array([-4.0]), np.array([[1.0]]), np.array([1.0])))
        assert sol.status == qp.OPTIMAL
        assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.lam[0] == pytest.approx(2.0, abs=1e-7)

    def test_matches_projected_gradient_oracle(self):
        rng = np.random.default_rng(11)
        probs = [random_qp(rng) for _ in range(100)]
        sols = [solve(QPProblem(*p)) for p in probs]
        _, f_ref = dual_projected_gradient(*zip(*probs))
        for p, s, fr in zip(probs, sols, f_ref):
            assert s.status == qp.OPTIMAL
            f = QPProblem(*p).objective(s.x)
            assert abs(f - fr) <= 1e-5 * max(1.0, abs(fr))

    def test_kkt_conditions_hold(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            Q, q, A, b = random_qp(rng)
            s = solve(QPProblem(Q, q, A, b))
            r = kkt_residuals(Q, q, A, b, s.x, s.lam)
            assert s.status == qp.OPTIMAL
            assert max(r.values()) <= 1e-8 * max(1.0, np.abs(q).max())
            assert np.all(s.lam >= -1e-8)

    def test_not_above_feasible_reference(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            Q, q, A, b = random_qp(rng)
            p = QPProblem(Q, q, A, b)
            s = solve(p)
            # the generator's x0 is not returned, so build another feasible point
            x_ref = qp_by_active_set_enumeration(Q, q, A, b) if A.shape[0] <= 6 else None
            if x_ref is not None:
                assert p.objective(s.x) <= x_ref[2] + 1e-8 * max(1, abs(x_ref[2]))

    def test_infeasible_reported(self):
        A = np.array([[1.0], [-1.0]])
        b = np.array([-1.0, -1.0])  # x <= -1 and x >= 1
        s = solve(QPProblem(np.eye(1), np.zeros(1), A, b))
        assert s.status == qp.INFEASIBLE

    def test_max_iter_reported(self):
        rng = np.random.default_rng(3)
        Q, q, A, b = random_qp(rng, 8, 15)
        s = solve(QPProblem(Q, q, A, b), max_iter=1)
        assert s.status == qp.MAX_ITER

    def test_batch_matches_single(self):
        rng = np.random.default_rng(8)
        n, k, B = 4, 6, 7
        Qs, qs, As, bs = [], [], [], []
        for _ in range(B):
            M = rng.normal(size=(n, n))
            Qs.append(M @ M.T + np.eye(n))
            qs.append(rng.normal(size=n))
            As.append(rng.normal(size=(k, n)))
            bs.append(rng.uniform(0.1, 1, size=k))
        bsol = qp.solve_batch(np.array(Qs), np.array(qs), np.array(As), np.array(bs))
        for i in range(B):
            s = solve(QPProblem(Qs[i], qs[i], As[i], bs[i]))
            np.testing.assert_allclose(bsol[i].x, s.x, atol=1e-9)

    @pytest.mark.parametrize(
        "Q, q, A, b",
        [
            (np.eye(2), np.zeros(3), np.zeros((0, 2)), np.zeros(0)),
            (np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2), np.zeros((0, 2)), np.zeros(0)),
            (np.eye(2), np.zeros(2), np.zeros((1, 3)), np.zeros(1)),
            (np.eye(2), np.array([np.nan, 0.0]), np.zeros((0, 2)), np.zeros(0)),
        ],
    )
    def test_invalid_problem(self, Q, q, A, b):
        with pytest.raises(InvalidInputError):
            QPProblem(Q, q, A, b)


def _fd_vjp_check(p, sol, g, rng, h=1e-4):
    G = solution_vjp(p, sol, g)
    M = rng.normal(size=p.Q.shape)
    dQ, dq = M + M.T, rng.normal(size=p.q.shape)
    dA, db = rng.normal(size=p.A.shape), rng.normal(size=p.b.shape)

    def f(e):
        pe = QPProblem(p.Q + e * dQ, p.q + e * dq, p.A + e * dA, p.b + e * db)
        return g @ solve(pe, tol=1e-10, max_iter=100).x

    num = (f(h) - f(-h)) / (2 * h)
    ana = (G.Q * dQ).sum() + G.q @ dq + (G.A * dA).sum() + G.b @ db
    return num, ana


class TestSolutionVjp:
    def test_unconstrained(self):
        Q = np.array([[3.0, 1.0], [1.0, 2.0]])
        p = QPProblem(Q, np.array([1.0, -1.0]), *empty(2))
        g = np.array([0.3, -0.7])
        G = solution_vjp(p, solve(p), g)
        np.testing.assert_allclose(G.q, -np.linalg.solve(Q, g), rtol=1e-9)

    def test_active_constraint_pins_solution(self):
        p = QPProblem(np.array([[2.0]]), np.array([-4.0]), np.array([[1.0]]), np.array([1.0]))
        G = solution_vjp(p, solve(p), np.array([1.0]))
        assert G.q[0] == pytest.approx(0.0, abs=1e-9)
        assert G.b[0] == pytest.approx(1.0, abs=1e-9)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        checked = 0
        while checked < 40:
            Q, q, A, b = random_qp(rng)
            p = QPProblem(Q, q, A, b)
            s = solve(p)
            if A.shape[0] and np.min(np.maximum(s.lam, b - A @ s.x)) < 1e-3:
                continue  # skip near-degenerate complementarity
            num, ana = _fd_vjp_check(p, s, rng.normal(size=q.size), rng)
            assert abs(num - ana) <= 1e-3 * max(abs(num), 1e-6)
            checked += 1

    def test_linear_in_upstream(self):
        rng = np.random.default_rng(2)
        Q, q, A, b = random_qp(rng, 6, 8)
        p = QPProblem(Q, q, A, b)
        s = solve(p)
        g1, g2 = rng.normal(size=(2, q.size))
        a, c = 0.7, -1.9
        lhs = solution_vjp(p, s, a * g1 + c * g2, strict=False)
        r1 = solution_vjp(p, s, g1, strict=False)
        r2 = solution_vjp(p, s, g2, strict=False)
        for name in ("Q", "q", "A", "b"):
            np.testing.assert_allclose(
                getattr(lhs, name), a * getattr(r1, name) + c * getattr(r2, name), atol=1e-10
            )

    def test_degenerate_active_set(self):
        # three active rows in two dimensions: reduced KKT matrix is singular
        A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        b = np.array([0.0, 0.0, 0.0])
        p = QPProblem(np.eye(2), np.array([-1.0, -1.0]), A, b)
        s = solve(p)
        with pytest.raises(DegenerateDerivativeError) as info:
            solution_vjp(p, s, np.array([1.0, 0.0]))
        assert info.value.result is not None and info.value.result.degenerate
        with pytest.warns(RuntimeWarning):
            res = solution_vjp(p, s, np.array([1.0, 0.0]), strict=False)
        assert np.all(np.isfinite(res.q))

    def test_requires_optimal_solution(self):
        rng = np.random.default_rng(3)
        p = QPProblem(*random_qp(rng, 8, 15))
        s = solve(p, max_iter=1)
        with pytest.raises(InvalidInputError):
            solution_vjp(p, s, np.ones(p.q.size))


def test_enumeration_oracle_agrees_on_small_problems():
    rng = np.random.default_rng(9)
    for _ in range(20):
        Q, q, A, b = random_qp(rng, 4, 5)
        x, lam, f = qp_by_active_set_enumeration(Q, q, A, b)
        s = solve(QPProblem(Q, q, A, b))
        np.testing.assert_allclose(s.x, x, atol=1e-6)
