"""Forward VE / VP SDEs with closed-form Gaussian perturbation kernels."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class SdeKind(str, enum.Enum):
    VE = "ve"
    VP = "vp"


@dataclass(frozen=True)
class SdeSpec:
    """VE: f = 0, g = alpha^t.  VP: f = -beta(t) y / 2, g = sqrt(beta(t)).

    ``t_min`` is the floor for sampled training times and the end point of
    reverse integration.
    """

    kind: SdeKind = SdeKind.VE
    alpha: float = 25.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    t_min: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "kind", SdeKind(self.kind))
        if self.kind is SdeKind.VE and not self.alpha > 1:
            raise ValueError("VE SDE needs alpha > 1")
        if self.kind is SdeKind.VP and not 0 < self.beta_min < self.beta_max:
            raise ValueError("VP SDE needs 0 < beta_min < beta_max")
        if not 0 < self.t_min < self.T:
            raise ValueError("need 0 < t_min < T")

    def to_dict(self):
        return {"kind": self.kind.value, "alpha": self.alpha, "beta_min": self.beta_min,
                "beta_max": self.beta_max, "T": self.T, "t_min": self.t_min}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    # schedule ----------------------------------------------------------------

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * np.asarray(t, dtype=float)

    def log_mean_coeff(self, t):
        """h(t)/2 for VP (log of the mean scale); 0 for VE."""
        t = np.asarray(t, dtype=float)
        if self.kind is SdeKind.VE:
            return np.zeros_like(t)
        return 0.5 * (-0.5 * t * t * (self.beta_max - self.beta_min) - t * self.beta_min)

    def drift(self, y, t):
        y = np.asarray(y, dtype=float)
        if self.kind is SdeKind.VE:
            return np.zeros_like(y)
        b = self.beta(t)
        if np.ndim(b):
            b = b.reshape(-1, *([1] * (y.ndim - 1)))
        return -0.5 * b * y

    def diffusion(self, t):
        if self.kind is SdeKind.VE:
            return np.power(self.alpha, np.asarray(t, dtype=float))
        return np.sqrt(self.beta(t))

    def mean_scale(self, t):
        return np.exp(self.log_mean_coeff(t))

    def variance(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind is SdeKind.VE:
            la = math.log(self.alpha)
            return np.expm1(2.0 * t * la) / (2.0 * la)
        return -np.expm1(2.0 * self.log_mean_coeff(t))

    def sigma(self, t):
        return np.sqrt(np.maximum(self.variance(t), 0.0))

    def perturbation_kernel(self, y0, t):
        """Mean and (isotropic) std of p_{t|0}(. | y0)."""
        y0 = np.asarray(y0, dtype=float)
        scale = self.mean_scale(t)
        if np.ndim(scale):
            scale = scale.reshape(-1, *([1] * (y0.ndim - 1)))
        return scale * y0, self.sigma(t)

    # prior -------------------------------------------------------------------

    @property
    def prior_std(self):
        if self.kind is SdeKind.VE:
            return float(self.sigma(self.T))
        return 1.0

    def prior_sample(self, rng, n, dim):
        return self.prior_std * rng.standard_normal((n, dim))


def sigma_t(spec, t):
    return spec.sigma(t)


def simulate_forward(spec, y0, t_end, n_steps, rng):
    """Euler-Maruyama simulation of the forward SDE from y0 (n, D) to t_end."""
    y = np.array(y0, dtype=float)
    dt = t_end / n_steps
    for k in range(n_steps):
        t = k * dt
        y = y + spec.drift(y, t) * dt + spec.diffusion(t) * math.sqrt(dt) * rng.standard_normal(y.shape)
    return y
