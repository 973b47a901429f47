"""Dense convex QP solver with KKT-based derivatives.

Problems have the form

    minimize    0.5 x'Qx + q'x
    subject to  A x <= b

and are solved by a primal-dual interior-point method with Mehrotra
predictor-corrector steps. Everything is batched over a leading axis so
that a minibatch of small filter problems is solved in one set of numpy
calls.

Derivatives of the solution are obtained by implicit differentiation of
the KKT conditions restricted to the active set (rows with
``lambda > act_tol``).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDerivativeError, InvalidInputError

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

PD_FLOOR = 1e-8
ACT_TOL = 1e-6
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50
_STEP_FRACTION = 0.99
_COND_LIMIT = 1e13
_W_MAX = 1e20
_STALL_ZONE = 1e-5


@dataclass
class QPProblem:
    Q: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = self.q.shape[0]
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if self.A.size == 0:
            self.A = self.A.reshape(0, n)
        if self.A.shape[1] != n:
            raise InvalidInputError(f"A has {self.A.shape[1]} columns, expected {n}")
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.Q.shape != (n, n):
            raise InvalidInputError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        if self.A.shape[0] != self.b.shape[0]:
            raise InvalidInputError("A and b disagree on the number of constraints")
        for name in ("Q", "q", "A", "b"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"{name} has non-finite entries")
        if not np.allclose(self.Q, self.Q.T, atol=1e-10 * (1 + np.abs(self.Q).max())):
            raise InvalidInputError("Q must be symmetric")

    def objective(self, x):
        return float(0.5 * x @ self.Q @ x + self.q @ x)


@dataclass
class QPSolution:
    x: np.ndarray
    lam: np.ndarray
    status: str
    kkt_residual: float
    iterations: int = 0



@dataclass
class BatchSolution:
    """Solutions of a batch of problems sharing dimensions."""

    x: np.ndarray  # (B, n)
    lam: np.ndarray  # (B, k)
    status: np.ndarray  # (B,) of str
    kkt_residual: np.ndarray  # (B,)
    iterations: int

    def __getitem__(self, i) -> QPSolution:
        return QPSolution(
            self.x[i], self.lam[i], str(self.status[i]), float(self.kkt_residual[i]), self.iterations
        )


@dataclass
class QPGrads:
    """Gradient of a scalar loss w.r.t. the problem data."""

    Q: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    degenerate: np.ndarray | bool = False


def kkt_residuals(Q, q, A, b, x, lam):
    """Stationarity, primal infeasibility, dual infeasibility and
    complementarity, each as an infinity norm (per batch element when the
    inputs carry a leading batch axis)."""
    stat = np.einsum("...ij,...j->...i", Q, x) + q + np.einsum("...ki,...k->...i", A, lam)
    viol = np.einsum("...ki,...i->...k", A, x) - b
    out = {"stationarity": np.abs(stat).max(-1, initial=0.0)}
    out["primal"] = np.maximum(viol, 0.0).max(-1, initial=0.0)
    out["dual"] = np.maximum(-lam, 0.0).max(-1, initial=0.0)
    out["complementarity"] = np.abs(lam * viol).max(-1, initial=0.0)
    return out


def _max_step(v, dv):
    """Largest alpha in [0, 1] keeping ``v + alpha * dv >= 0`` rowwise."""
    ratio = np.where(dv < 0, -v / np.where(dv < 0, dv, -1.0), np.inf)
    return np.minimum(1.0, ratio.min(-1, initial=np.inf))


def _robust_solve(H, rhs):
    try:
        out = np.linalg.solve(H, rhs[..., None])[..., 0]
        if np.all(np.isfinite(out)):
            return out
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(rhs)
    for i in range(H.shape[0]):
        if np.all(np.isfinite(H[i])) and np.all(np.isfinite(rhs[i])):
            out[i] = np.linalg.lstsq(H[i], rhs[i], rcond=None)[0]
        else:
            out[i] = 0.0  # diverged element; its best iterate is kept
    return np.nan_to_num(out)


def solve_batch(Q, q, A, b, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> BatchSolution:
    Q = np.asarray(Q, dtype=float)
    q = np.asarray(q, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    B, n = q.shape
    k = b.shape[1]
    eye = np.eye(n)
    Qf = Q + PD_FLOOR * eye

    if k == 0:
        x = -np.linalg.solve(Qf, q[..., None])[..., 0]
        for _ in range(2):
            # refinement removes the bias from the pd_floor shift
            r = np.einsum("bij,bj->bi", Q, x) + q
            x = x - np.linalg.solve(Qf, r[..., None])[..., 0]
        lam = np.zeros((B, 0))
        res = kkt_residuals(Q, q, A, b, x, lam)
        r = np.maximum(res["stationarity"], 0.0)
        status = np.where(r <= tol, OPTIMAL, MAX_ITER).astype(object)
        return BatchSolution(x, lam, status, r, 1)

    At = np.swapaxes(A, 1, 2)
    x = -np.linalg.solve(Qf, q[..., None])[..., 0]
    s = np.maximum(b - np.einsum("bki,bi->bk", A, x), 1.0)
    lam = np.ones((B, k))
    best = np.full(B, np.inf)
    best_x, best_lam = x.copy(), lam.copy()
    stall = np.zeros(B, dtype=int)
    last_lam = lam.copy()
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        x, lam, it = _ipm_loop(Q, Qf, q, A, At, b, x, s, lam, best, best_x, best_lam, stall, last_lam, tol, max_iter, k)
    x, lam, resid = best_x, best_lam, best
    done = resid <= tol
    it = min(it, max_iter)

    status = np.where(done, OPTIMAL, MAX_ITER).astype(object)
    if not done.all():
        # Farkas check on the (diverging) last finite multipliers:
        # lam >= 0, A^T lam = 0, b^T lam < 0 certifies an empty feasible set
        lam_hat = last_lam / np.maximum(last_lam.max(-1, keepdims=True), 1e-300)
        a_scale = 1.0 + np.abs(A).max(axis=(1, 2))
        b_scale = 1.0 + np.abs(b).max(-1)
        ray = np.abs(np.einsum("bki,bk->bi", A, lam_hat)).max(-1) <= 1e-6 * a_scale
        neg = np.einsum("bk,bk->b", b, lam_hat) < -1e-6 * b_scale
        infeasible = (~done) & ray & neg & (last_lam.max(-1) > 1e6)
        status[infeasible] = INFEASIBLE
    return BatchSolution(x, lam, status, resid, it)


def _ipm_loop(Q, Qf, q, A, At, b, x, s, lam, best, best_x, best_lam, stall, last_lam, tol, max_iter, k):
    """Mehrotra predictor-corrector iterations; updates the best-iterate
    buffers in place and returns the final iterate."""
    it = 0
    for it in range(1, max_iter + 2):
        res = kkt_residuals(Q, q, A, b, x, lam)
        resid = np.maximum.reduce([res["stationarity"], res["primal"], res["complementarity"]])
        better = resid < best
        best_x[better], best_lam[better] = x[better], lam[better]
        stall = np.where(resid < 0.5 * best, 0, stall + 1)
        np.fmin(best, resid, out=best)
        # end-game only: iterates that stopped improving near the tolerance
        # are frozen at their best point
        running = (best > tol) & ((stall < 5) | (best > _STALL_ZONE))
        if it > max_iter or not running.any():
            break
        idx = np.flatnonzero(running)
        Qi, qi, Ai, Ati, bi = Qf[idx], q[idx], A[idx], At[idx], b[idx]
        xi, si, li = x[idx], s[idx], lam[idx]

        r_d = np.einsum("bij,bj->bi", Q[idx], xi) + qi + np.einsum("bik,bk->bi", Ati, li)
        r_p = np.einsum("bki,bi->bk", Ai, xi) + si - bi
        mu = (si * li).sum(-1) / k
        W = np.minimum(li / si, _W_MAX)
        H = Qi + np.einsum("bik,bk,bkj->bij", Ati, W, Ai)

        def direction(rc):
            rhs = -r_d - np.einsum("bik,bk->bi", Ati, (-rc + li * r_p) / si)
            dx = _robust_solve(H, rhs)
            ds = -r_p - np.einsum("bki,bi->bk", Ai, dx)
            dl = (-rc - li * ds) / si
            return dx, ds, dl

        dx_a, ds_a, dl_a = direction(si * li)
        a_p = _max_step(si, ds_a)
        a_d = _max_step(li, dl_a)
        mu_aff = ((si + a_p[:, None] * ds_a) * (li + a_d[:, None] * dl_a)).sum(-1) / k
        sigma = (mu_aff / np.maximum(mu, 1e-300)) ** 3
        rc = si * li + ds_a * dl_a - (sigma * mu)[:, None]
        dx, ds, dl = direction(rc)
        alpha = _STEP_FRACTION * np.minimum(_max_step(si, ds), _max_step(li, dl))
        x[idx] = xi + alpha[:, None] * dx
        s[idx] = np.maximum(si + alpha[:, None] * ds, 1e-300)
        lam[idx] = np.maximum(li + alpha[:, None] * dl, 1e-300)
        finite = np.all(np.isfinite(lam), -1)
        last_lam[finite] = lam[finite]
    return x, lam, it


def solve(p: QPProblem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> QPSolution:
    sol = solve_batch(p.Q[None], p.q[None], p.A[None], p.b[None], tol=tol, max_iter=max_iter)
    return sol[0]


def active_set(A, b, x, lam, act_tol=ACT_TOL):
    """Rows treated as active: ``lambda > act_tol`` and the multiplier
    dominates the slack (an interior-point iterate leaves ``lambda * slack``
    near ``tol`` on every row, so a bare threshold misfires on rows with
    small but nonzero slack)."""
    slack = b - np.einsum("...ki,...i->...k", A, x)
    return (lam > act_tol) & (lam > slack)


def _kkt_adjoint(Q, A, active, upstream):
    """Solve the active-set KKT adjoint system for a batch.

    Inactive rows are replaced by identity rows so every problem in the
    batch has the same square system; their multiplier adjoints come out
    exactly zero.
    """
    B, n = upstream.shape
    k = active.shape[1]
    Aa = A * active[:, :, None]
    K = np.zeros((B, n + k, n + k))
    K[:, :n, :n] = Q
    K[:, :n, n:] = np.swapaxes(Aa, 1, 2)
    K[:, n:, :n] = Aa
    K[:, n + np.arange(k), n + np.arange(k)] = (~active).astype(float)
    rhs = np.concatenate([upstream, np.zeros((B, k))], axis=1)

    if n + k <= 64:
        sv = np.linalg.svd(K, compute_uv=False)
        degenerate = sv[:, -1] <= sv[:, 0] / _COND_LIMIT
    else:
        degenerate = np.zeros(B, dtype=bool)
    sol = np.zeros((B, n + k))
    ok = ~degenerate
    if ok.any():
        try:
            sol[ok] = np.linalg.solve(K[ok], rhs[ok][..., None])[..., 0]
        except np.linalg.LinAlgError:
            degenerate = np.ones(B, dtype=bool)
    for i in np.flatnonzero(degenerate):
        sol[i] = np.linalg.lstsq(K[i], rhs[i], rcond=None)[0]
    return sol[:, :n], sol[:, n:], degenerate


def solution_vjp_batch(Q, A, b, x, lam, upstream, act_tol=ACT_TOL) -> QPGrads:
    """Pull ``upstream`` (gradient w.r.t. ``x``) back to ``(Q, q, A, b)``.

    The returned gradient w.r.t. ``Q`` is symmetrised, i.e. it is the
    gradient with respect to a symmetric perturbation of ``Q``.
    """
    Q = np.asarray(Q, dtype=float)
    A = np.asarray(A, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    active = active_set(A, np.asarray(b, dtype=float), x, lam, act_tol)
    v_x, v_l, degenerate = _kkt_adjoint(Q, A, active, upstream)
    lam_act = np.where(active, lam, 0.0)
    dq = -v_x
    dQ = -0.5 * (v_x[:, :, None] * x[:, None, :] + x[:, :, None] * v_x[:, None, :])
    dA = -lam_act[:, :, None] * v_x[:, None, :] - v_l[:, :, None] * x[:, None, :]
    db = v_l
    return QPGrads(dQ, dq, dA, db, degenerate)


def solution_vjp(p: QPProblem, sol: QPSolution, upstream, act_tol=ACT_TOL, strict=True) -> QPGrads:
    """Single-problem vjp.

    With ``strict`` a singular reduced KKT system raises
    :class:`DegenerateDerivativeError` carrying the least-squares result;
    otherwise a warning is issued and the fallback is returned with
    ``degenerate=True``.
    """
    if sol.status != OPTIMAL:
        raise InvalidInputError(f"cannot differentiate a solution with status {sol.status}")
    g = solution_vjp_batch(
        p.Q[None], p.A[None], p.b[None], sol.x[None], sol.lam[None], np.asarray(upstream, float)[None], act_tol
    )
    out = QPGrads(g.Q[0], g.q[0], g.A[0], g.b[0], bool(g.degenerate[0]))
    if out.degenerate:
        if strict:
            raise DegenerateDerivativeError("reduced KKT system is singular", result=out)
        warnings.warn("reduced KKT system is singular; using least-squares derivative", RuntimeWarning)
    return out
