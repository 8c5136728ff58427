"""Neural dual potentials for L2-regularized OT and the compatibility H.

The dual of the regularized problem is

    F(u, v) = E_p u + E_q v - 1/(4 eps) E_{p x q} I (u + v - xi)_+^2

and the primal plan is recovered as pi(x, y) = H(x, y) p(x) q(y) with
H = I (u + v - xi)_+ / (2 eps).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import MLP, AdamState, Layout, adam_step
from .ot_core import (CostKind, EmpiricalMeasure, OtProblem, as_points, check_keypoint_masses,
                      cost_grad_y, mask_matrix, xi_matrix)
from .oracle import PlanMatrix

log = logging.getLogger(__name__)

#: positive parts are clamped here before squaring
CLAMP = 1e6


@dataclass
class PotentialTrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 256
    n_iter: int = 1000
    seed: int = 0
    hidden: tuple = (1024,)
    activation: str = "tanh"
    monitor_every: int = 0
    monitor_size: int = 256
    lr_final: float | None = None   # geometric decay towards this rate; None keeps it constant
    full_batch: bool = False        # exact weighted dual over all points of empirical p, q

    def validate(self):
        errors = []
        if not self.learning_rate > 0:
            errors.append("learning_rate must be positive")
        if self.lr_final is not None and not self.lr_final > 0:
            errors.append("lr_final must be positive")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.n_iter < 0:
            errors.append("n_iter must be >= 0")
        if any(h < 1 for h in self.hidden):
            errors.append("hidden sizes must be >= 1")
        return errors


class PotentialPair:
    """Two scalar MLPs u, v whose parameters share one flat vector ``omega``."""

    def __init__(self, problem: OtProblem, dim, hidden=(1024,), activation="tanh"):
        self.problem = problem
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        layout = Layout()
        sizes = [self.dim, *self.hidden, 1]
        self.u_net = MLP(sizes, activation, layout)
        self.v_net = MLP(sizes, activation, layout)
        self.omega = np.zeros(layout.size)
        self.history: list[tuple[int, float]] = []
        self.h_monitor: list[tuple[int, float]] = []

    @property
    def n_params(self):
        return self.omega.size

    @property
    def epsilon(self):
        return self.problem.epsilon

    def init(self, rng):
        self.u_net.init(self.omega, rng)
        self.v_net.init(self.omega, rng)
        return self

    def u(self, X, omega=None):
        omega = self.omega if omega is None else omega
        return self.u_net.forward(omega, as_points(X, self.dim))[0][:, 0]

    def v(self, Y, omega=None):
        omega = self.omega if omega is None else omega
        return self.v_net.forward(omega, as_points(Y, self.dim))[0][:, 0]

    def slack(self, X, Y):
        """u(x) + v(y) - xi(x, y) for all pairs."""
        X = as_points(X, self.dim)
        Y = as_points(Y, self.dim)
        return self.u(X)[:, None] + self.v(Y)[None, :] - xi_matrix(self.problem, X, Y)

    def copy(self):
        other = PotentialPair(self.problem, self.dim, self.hidden, self.activation)
        other.omega = self.omega.copy()
        other.history = list(self.history)
        other.h_monitor = list(self.h_monitor)
        return other


def _positive_part(S):
    P = np.maximum(S, 0.0)
    if np.any(P > CLAMP):
        log.warning("positive part exceeded %.0e and was clamped; learning rate too "
                    "large for this epsilon?", CLAMP)
        P = np.minimum(P, CLAMP)
    return P


def dual_objective_and_grad(pp: PotentialPair, X, Y, omega=None, wx=None, wy=None):
    """Dual value F on a batch and its gradient with respect to ``omega``.

    Expectations are plain batch means unless weights ``wx``, ``wy``
    (summing to 1) are given, in which case F is the exact dual of the
    weighted discrete measures.
    """
    omega = pp.omega if omega is None else omega
    X = as_points(X, pp.dim)
    Y = as_points(Y, pp.dim)
    wx = np.full(len(X), 1.0 / len(X)) if wx is None else np.asarray(wx, dtype=float)
    wy = np.full(len(Y), 1.0 / len(Y)) if wy is None else np.asarray(wy, dtype=float)
    U, u_cache = pp.u_net.forward(omega, X)
    V, v_cache = pp.v_net.forward(omega, Y)
    I = mask_matrix(pp.problem, X, Y)
    S = U[:, 0][:, None] + V[:, 0][None, :] - xi_matrix(pp.problem, X, Y)
    P = _positive_part(S) * I
    k = 1.0 / (4.0 * pp.epsilon)
    WP = wx[:, None] * P * wy[None, :]
    value = wx @ U[:, 0] + wy @ V[:, 0] - k * np.sum(WP * P)
    # dF/dP_ij = -2k w_i w_j P_ij; P has unit slope in U_i and V_j where active
    dP = -2.0 * k * WP
    dU = (wx + dP.sum(axis=1))[:, None]
    dV = (wy + dP.sum(axis=0))[:, None]
    grad = np.zeros_like(omega)
    pp.u_net.backward(omega, u_cache, dU, grad)
    pp.v_net.backward(omega, v_cache, dV, grad)
    return float(value), grad


def dual_objective(pp: PotentialPair, X, Y, omega=None):
    return dual_objective_and_grad(pp, X, Y, omega)[0]


def compatibility_matrix(pp: PotentialPair, X, Y):
    X = as_points(X, pp.dim)
    Y = as_points(Y, pp.dim)
    I = mask_matrix(pp.problem, X, Y)
    return I * np.maximum(pp.slack(X, Y), 0.0) / (2.0 * pp.epsilon)


def compatibility(pp: PotentialPair, x, y):
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
    y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, -1)
    return float(compatibility_matrix(pp, x, y)[0, 0])


def grad_log_compatibility(pp: PotentialPair, x, Y):
    """Gradient in y of log H(x, y) for each row of Y; 0 where H(x, y) = 0.

    ``x`` is one point shared by all rows, or one point per row of Y.  Only
    defined for the unsupervised problem, where xi is the differentiable
    transport cost.
    """
    if pp.problem.semi_supervised:
        raise NotImplementedError("log-H guidance needs the unsupervised cost")
    Y = as_points(Y, pp.dim)
    X = np.broadcast_to(np.asarray(x, dtype=float).reshape(-1, pp.dim), Y.shape)
    V, cache = pp.v_net.forward(pp.omega, Y)
    scratch = np.zeros_like(pp.omega)
    dV = pp.v_net.backward(pp.omega, cache, np.ones_like(V), scratch)
    c = np.sum((Y - X) ** 2, axis=1)
    if pp.problem.cost_kind is CostKind.MEAN_SQUARED_L2:
        c = c / pp.dim
    u = pp.u(X[:1])[0] if np.all(X == X[0]) else pp.u(X)
    a = u + V[:, 0] - c
    g = dV - cost_grad_y(pp.problem.cost_kind, X, Y)
    out = np.zeros_like(g)
    pos = a > 0
    out[pos] = g[pos] / a[pos, None]
    return out


def plan_estimate(pp: PotentialPair, p: EmpiricalMeasure, q: EmpiricalMeasure):
    H = compatibility_matrix(pp, p.points, q.points)
    return PlanMatrix(H * p.weights[:, None] * q.weights[None, :], p.weights, q.weights)


def relative_h_change(H_old, H_new):
    """||H_old - H_new|| / ||H_old|| in the L2(p x q) norm on a fixed grid."""
    denom = np.sqrt(np.mean(H_old ** 2))
    if denom == 0:
        return float("inf") if np.any(H_new) else 0.0
    return float(np.sqrt(np.mean((H_old - H_new) ** 2)) / denom)


def train_potentials(problem: OtProblem, p, q, cfg: PotentialTrainConfig, pp=None):
    """Adam ascent on the minibatch dual.

    ``p`` and ``q`` are anything with ``.sample(rng, n)`` and ``.dim``
    (an :class:`EmpiricalMeasure` or a :class:`Gaussian`).  With
    ``cfg.monitor_every > 0`` the relative change of H on a fixed probe grid is
    recorded in ``pp.h_monitor``.
    """
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    if isinstance(p, EmpiricalMeasure) and isinstance(q, EmpiricalMeasure):
        check_keypoint_masses(problem, p, q)
    if cfg.full_batch and not (isinstance(p, EmpiricalMeasure) and isinstance(q, EmpiricalMeasure)):
        raise ValueError("full_batch training needs empirical measures")
    init_rng, batch_rng = np.random.default_rng(cfg.seed).spawn(2)
    if pp is None:
        pp = PotentialPair(problem, p.dim, cfg.hidden, cfg.activation).init(init_rng)
    state = AdamState.create(pp.omega, lr=cfg.learning_rate, ema=False)

    if cfg.monitor_every:
        mon_rng = np.random.default_rng([cfg.seed, 1])
        Xm = p.sample(mon_rng, cfg.monitor_size)
        Ym = q.sample(mon_rng, cfg.monitor_size)
        H_prev = compatibility_matrix(pp, Xm, Ym)

    decay = 1.0
    if cfg.lr_final is not None and cfg.n_iter > 1:
        decay = (cfg.lr_final / cfg.learning_rate) ** (1.0 / (cfg.n_iter - 1))
    for it in range(1, cfg.n_iter + 1):
        state.lr = cfg.learning_rate * decay ** (it - 1)
        if cfg.full_batch:
            value, grad = dual_objective_and_grad(pp, p.points, q.points, wx=p.weights, wy=q.weights)
        else:
            X = p.sample(batch_rng, cfg.batch_size)
            Y = q.sample(batch_rng, cfg.batch_size)
            value, grad = dual_objective_and_grad(pp, X, Y)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"dual objective diverged at iteration {it} (value={value})")
        adam_step(state, pp.omega, -grad)
        if it % 100 == 0 or it == cfg.n_iter:
            pp.history.append((it, value))
        if cfg.monitor_every and it % cfg.monitor_every == 0:
            H_new = compatibility_matrix(pp, Xm, Ym)
            pp.h_monitor.append((it, relative_h_change(H_prev, H_new)))
            H_prev = H_new
    return pp
