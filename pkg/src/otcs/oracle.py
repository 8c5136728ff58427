"""Exact L2-regularized OT on small empirical measures.

Solves

    min_pi  sum_ij xi_ij pi_ij + eps * sum_ij pi_ij^2 / (p_i q_j)
    s.t.    pi 1 = p,  pi^T 1 = q,  pi >= 0,  pi_ij = 0 where I_ij = 0

through its concave, piecewise-quadratic dual in (u, v).  The dual is
maximized by a damped semismooth Newton iteration (the generalized Hessian
is exact on each active set), the plan is recovered from the optimal
potentials and finally rescaled on its support so both marginals hold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ot_core import check_keypoint_masses, mask_matrix, xi_matrix

MAX_ENTRIES = 10_000


class OracleError(RuntimeError):
    pass


@dataclass
class PlanMatrix:
    entries: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    kkt_residual: float | None = None
    n_iter: int | None = None

    @property
    def shape(self):
        return self.entries.shape

    @property
    def row_violation(self):
        return float(np.abs(self.entries.sum(axis=1) - self.row_marginal).sum())

    @property
    def col_violation(self):
        return float(np.abs(self.entries.sum(axis=0) - self.col_marginal).sum())

    def l1_distance(self, other):
        return float(np.abs(self.entries - np.asarray(getattr(other, "entries", other))).sum())

    def to_csv(self, path):
        n, m = self.entries.shape
        ii, jj = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
        rows = np.column_stack([ii.ravel(), jj.ravel(), self.entries.ravel()])
        np.savetxt(path, rows, fmt=["%d", "%d", "%.17g"], delimiter=",",
                   header="i,j,value", comments="")


def regularized_objective(plan, xi, epsilon, p, q):
    P = np.asarray(getattr(plan, "entries", plan))
    pq = p[:, None] * q[None, :]
    return float(np.sum(xi * P) + epsilon * np.sum(P * P / pq))


def _dual(u, v, xi, W0, p, q, k):
    S = u[:, None] + v[None, :] - xi
    P = np.maximum(S, 0.0) * W0          # W0 = I * p q
    value = p @ u + q @ v - 0.5 * k * np.sum(P * np.maximum(S, 0.0))
    grad_u = p - k * P.sum(axis=1)
    grad_v = q - k * P.sum(axis=0)
    return value, grad_u, grad_v, S


def _proportional_repair(P, p, q, tol, max_iter=1000):
    """Alternate row and column rescaling on the support of P."""
    P = P.copy()
    for _ in range(max_iter):
        r = P.sum(axis=1)
        P *= np.divide(p, r, out=np.ones_like(r), where=r > 0)[:, None]
        c = P.sum(axis=0)
        P *= np.divide(q, c, out=np.ones_like(c), where=c > 0)[None, :]
        if np.abs(P.sum(axis=1) - p).sum() <= tol and np.abs(P.sum(axis=0) - q).sum() <= tol:
            break
    return P


def kkt_residual(P, u, v, xi, epsilon, p, q, I):
    """max |d Lagrangian / d pi_ij| over the active entries (pi_ij > 0, I_ij = 1)."""
    active = (P > 0) & (I > 0)
    if not active.any():
        return 0.0
    g = xi + 2.0 * epsilon * P / (p[:, None] * q[None, :]) - u[:, None] - v[None, :]
    return float(np.abs(g[active]).max())


def solve_exact(problem, p, q, tol=1e-9, max_iter=500):
    """Exact plan for the regularized problem between empirical measures p, q."""
    n, m = len(p), len(q)
    if n * m > MAX_ENTRIES:
        raise OracleError(f"n*m = {n * m} exceeds the oracle cap of {MAX_ENTRIES}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    check_keypoint_masses(problem, p, q)
    eps = problem.epsilon
    a, b = p.weights, q.weights
    xi = xi_matrix(problem, p.points, q.points)
    I = mask_matrix(problem, p.points, q.points)
    W0 = I * a[:, None] * b[None, :]
    k = 1.0 / (2.0 * eps)

    # start from u + v = xi on the cheapest entry of each row, so every row is active
    u = np.where(I.any(axis=1), np.min(np.where(I > 0, xi, np.inf), axis=1), 0.0)
    v = np.zeros(m)
    value, gu, gv, S = _dual(u, v, xi, W0, a, b, k)
    damping = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        if max(np.abs(gu).sum(), np.abs(gv).sum()) <= 0.1 * tol:
            break
        A = W0 * (S > 0)
        hess = np.zeros((n + m, n + m))
        hess[:n, :n] = np.diag(A.sum(axis=1))
        hess[n:, n:] = np.diag(A.sum(axis=0))
        hess[:n, n:] = A
        hess[n:, :n] = A.T
        hess *= k
        g = np.concatenate([gu, gv])
        scale = max(hess.diagonal().max(), k * W0.max())
        improved = False
        while damping < 1e20:
            step = np.linalg.solve(hess + damping * scale * np.eye(n + m), g)
            nu, nv = u + step[:n], v + step[n:]
            nvalue, ngu, ngv, nS = _dual(nu, nv, xi, W0, a, b, k)
            if np.isfinite(nvalue) and nvalue >= value - 1e-15 * abs(value):
                improved = True
                break
            damping *= 10.0
        if not improved:
            break
        u, v, value, gu, gv, S = nu, nv, nvalue, ngu, ngv, nS
        damping = max(damping / 10.0, 1e-12)
    else:
        if max(np.abs(gu).sum(), np.abs(gv).sum()) > tol:
            raise OracleError(f"dual ascent did not converge within {max_iter} iterations")

    P = k * W0 * np.maximum(S, 0.0)
    if np.any((P.sum(axis=1) == 0) & (a > 0)) or np.any((P.sum(axis=0) == 0) & (b > 0)):
        raise OracleError("recovered plan has an empty row or column")
    if np.abs(P.sum(axis=1) - a).sum() > 0.1 * tol or np.abs(P.sum(axis=0) - b).sum() > 0.1 * tol:
        P = _proportional_repair(P, a, b, 0.1 * tol)
    plan = PlanMatrix(P, a, b, u=u, v=v, n_iter=it)
    plan.kkt_residual = kkt_residual(P, u, v, xi, eps, a, b, I)
    if plan.row_violation > tol or plan.col_violation > tol:
        raise OracleError(f"marginal violation {max(plan.row_violation, plan.col_violation):.3g} "
                          f"exceeds tol {tol:g}")
    return plan


def conditional_row(plan, i):
    row = np.asarray(getattr(plan, "entries", plan))[i]
    total = row.sum()
    if not total > 0:
        raise ValueError(f"row {i} has zero mass")
    return row / total


def barycentric_map(plan, q, i):
    return conditional_row(plan, i) @ q.points
