"""Costs, keypoint relations and masks for L2-regularized OT problems.

Everything here works on point arrays of shape ``(n, D)``.  The scalar
helpers (``cost``, ``guiding_cost``, ``xi`` ...) are thin wrappers over the
pairwise matrix versions, which are what the solvers actually use.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Mode(str, enum.Enum):
    UNSUPERVISED = "unsupervised"
    SEMI_SUPERVISED = "semi_supervised"


class CostKind(str, enum.Enum):
    SQUARED_L2 = "squared_l2"
    MEAN_SQUARED_L2 = "mean_squared_l2"


def as_points(x, dim=None):
    """Coerce ``x`` to a finite float array of shape (n, D)."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        # a flat array is a list of 1-D points unless it is one D-dim point
        single = dim is not None and dim > 1 and a.size == dim
        a = a.reshape(1, -1) if single else a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValueError(f"expected points of shape (n, D), got {a.shape}")
    if dim is not None and a.shape[1] != dim:
        raise ValueError(f"dimension mismatch: expected D={dim}, got D={a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError("points must be finite")
    return a


def _as_point(x):
    a = np.atleast_1d(np.asarray(x, dtype=float))
    if a.ndim != 1:
        raise ValueError(f"expected a single point, got shape {a.shape}")
    return a


@dataclass
class EmpiricalMeasure:
    """Weighted point cloud; uniform weights when none are given."""

    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        self.points = as_points(self.points)
        n = len(self.points)
        if n == 0:
            raise ValueError("empirical measure needs at least one point")
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (n,):
            raise ValueError(f"weights shape {self.weights.shape} != ({n},)")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return len(self.points)

    def sample(self, rng, n):
        idx = rng.choice(len(self.points), size=n, p=self.weights)
        return self.points[idx]


@dataclass(frozen=True)
class Gaussian:
    """Isotropic Gaussian source, used for the continuous toy problems."""

    mean: tuple
    std: float = 1.0

    @property
    def dim(self):
        return len(self.mean)

    def sample(self, rng, n):
        mu = np.asarray(self.mean, dtype=float)
        return mu + self.std * rng.standard_normal((n, len(mu)))


@dataclass
class KeypointSet:
    """Matched (source, target) pairs that a semi-supervised plan must keep."""

    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.source = as_points(self.source)
        self.target = as_points(self.target, dim=None)
        if len(self.source) != len(self.target) or len(self.source) == 0:
            raise ValueError("keypoint set needs K >= 1 source/target pairs")
        for name, pts in (("source", self.source), ("target", self.target)):
            if len(np.unique(pts, axis=0)) != len(pts):
                raise ValueError(f"{name} keypoints must be pairwise distinct")

    def __len__(self):
        return len(self.source)

    @classmethod
    def from_indices(cls, p, q, pairs):
        pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
        return cls(p.points[pairs[:, 0]], q.points[pairs[:, 1]])


@dataclass
class OtProblem:
    mode: Mode = Mode.UNSUPERVISED
    cost_kind: CostKind = CostKind.SQUARED_L2
    epsilon: float = 1e-4
    tau: float = 0.1
    keypoints: KeypointSet | None = field(default=None)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.cost_kind = CostKind(self.cost_kind)
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.mode is Mode.SEMI_SUPERVISED and (self.keypoints is None or len(self.keypoints) == 0):
            raise ValueError("semi-supervised problems need a nonempty keypoint set")

    @property
    def semi_supervised(self):
        return self.mode is Mode.SEMI_SUPERVISED


# costs ----------------------------------------------------------------------

def cost_matrix(cost_kind, X, Y):
    """Pairwise cost between rows of X (n, D) and Y (m, D)."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[-1] != Y.shape[-1]:
        raise ValueError(f"dimension mismatch: {X.shape[-1]} vs {Y.shape[-1]}")
    diff = X[:, None, :] - Y[None, :, :]
    c = np.einsum("ijd,ijd->ij", diff, diff)
    if CostKind(cost_kind) is CostKind.MEAN_SQUARED_L2:
        c = c / X.shape[-1]
    return c


def cost_grad_y(cost_kind, x, Y):
    """Gradient of c(x, y) with respect to y, for each row of Y."""
    g = 2.0 * (np.asarray(Y, dtype=float) - np.asarray(x, dtype=float))
    if CostKind(cost_kind) is CostKind.MEAN_SQUARED_L2:
        g = g / g.shape[-1]
    return g


def cost(problem, x, y):
    x, y = _as_point(x), _as_point(y)
    return float(cost_matrix(problem.cost_kind, x[None], y[None])[0, 0])


# keypoint relations -----------------------------------------------------------

def relation_matrix(Z, keypoints, tau, cost_kind):
    """Softmax of -c(z, z_k)/tau over keypoints, one row per point of Z."""
    logits = -cost_matrix(cost_kind, Z, keypoints) / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def relation_vector(z, keypoints, tau, cost_kind=CostKind.SQUARED_L2):
    z = _as_point(z)
    return relation_matrix(z[None], as_points(keypoints, dim=z.size), tau, cost_kind)[0]


def _xlogy_ratio(a, s):
    # a * log(2a / s) with s = a + b and 0 log 0 = 0; avoids forming (a + b) / 2,
    # which underflows to 0 for subnormal a
    out = np.zeros(np.broadcast(a, s).shape)
    a_b = np.broadcast_to(a, out.shape)
    s_b = np.broadcast_to(s, out.shape)
    pos = a_b > 0
    out[pos] = a_b[pos] * np.log(2.0 * a_b[pos] / s_b[pos])
    return out


def js_divergence(a, b):
    """Jensen-Shannon divergence (natural log) along the last axis; broadcasts."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    s = a + b
    js = 0.5 * _xlogy_ratio(a, s).sum(-1) + 0.5 * _xlogy_ratio(b, s).sum(-1)
    # rounding can leave tiny negatives for identical inputs
    return np.maximum(js, 0.0)


def guiding_cost_matrix(problem, X, Y):
    if not problem.semi_supervised:
        raise ValueError("guiding cost is only defined for semi-supervised problems")
    kp = problem.keypoints
    Rs = relation_matrix(X, kp.source, problem.tau, problem.cost_kind)
    Rt = relation_matrix(Y, kp.target, problem.tau, problem.cost_kind)
    return js_divergence(Rs[:, None, :], Rt[None, :, :])


def guiding_cost(problem, x, y):
    x, y = _as_point(x), _as_point(y)
    return float(guiding_cost_matrix(problem, x[None], y[None])[0, 0])


# masks and the generalized cost ---------------------------------------------

def _match_rows(Z, keys):
    """Index of the keypoint each row of Z coincides with, -1 if none."""
    eq = np.all(Z[:, None, :] == keys[None, :, :], axis=-1)
    return np.where(eq.any(axis=1), eq.argmax(axis=1), -1)


def mask_matrix(problem, X, Y):
    """Binary I(x, y): 1 for keypoint partners and for non-keypoint pairs."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if not problem.semi_supervised:
        return np.ones((len(X), len(Y)))
    kx = _match_rows(X, problem.keypoints.source)
    ky = _match_rows(Y, problem.keypoints.target)
    both_free = (kx[:, None] < 0) & (ky[None, :] < 0)
    partners = (kx[:, None] >= 0) & (kx[:, None] == ky[None, :])
    return (both_free | partners).astype(float)


def mask(problem, p, q, i, j):
    return float(mask_matrix(problem, p.points[i:i + 1], q.points[j:j + 1])[0, 0])


def xi_matrix(problem, X, Y):
    if problem.semi_supervised:
        return guiding_cost_matrix(problem, X, Y)
    return cost_matrix(problem.cost_kind, X, Y)


def xi(problem, x, y):
    x, y = _as_point(x), _as_point(y)
    return float(xi_matrix(problem, x[None], y[None])[0, 0])


def keypoint_indices(problem, p, q):
    """(source index, target index) of every keypoint inside measures p, q."""
    kx = _match_rows(problem.keypoints.source, p.points)
    ky = _match_rows(problem.keypoints.target, q.points)
    if np.any(kx < 0) or np.any(ky < 0):
        raise ValueError("every keypoint must be a support point of both measures")
    return np.stack([kx, ky], axis=1)


def check_keypoint_masses(problem, p, q, atol=1e-12):
    """Raise if a keypoint pair has unequal mass (the problem is infeasible)."""
    if not problem.semi_supervised:
        return
    for i, j in keypoint_indices(problem, p, q):
        if abs(p.weights[i] - q.weights[j]) > atol:
            raise ValueError(
                f"infeasible keypoint pair (source {i}, target {j}): "
                f"mass {p.weights[i]:.6g} != {q.weights[j]:.6g}")
