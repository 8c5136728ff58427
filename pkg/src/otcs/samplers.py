"""Reverse-time SDE samplers.

All samplers integrate a batch of independent trajectories, one per row,
from the start time down to ``spec.t_min`` on a uniform grid:

    y <- y - (f(y, t) - g(t)^2 score(y, t)) dt + g(t) sqrt(dt) z
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .potentials import PotentialPair, grad_log_compatibility
from .score_net import ScoreModel


class Method(str, enum.Enum):
    EULER_MARUYAMA = "euler_maruyama"
    PREDICTOR_CORRECTOR = "predictor_corrector"


class Init(str, enum.Enum):
    PRIOR = "prior"
    NOISY_AT_M = "noisy_at_m"


@dataclass
class SamplerConfig:
    method: Method = Method.EULER_MARUYAMA
    n_steps: int = 1000
    corrector_snr: float = 0.16
    init: Init = Init.PRIOR
    M: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.method = Method(self.method)
        self.init = Init(self.init)

    def validate(self, T=1.0):
        errors = []
        if self.n_steps < 1:
            errors.append("n_steps must be >= 1")
        if self.corrector_snr < 0:
            errors.append("corrector_snr must be >= 0")
        if self.init is Init.NOISY_AT_M and not 0 < self.M <= T:
            errors.append("M must lie in (0, T]")
        return errors


def noisy_init(spec, x, M, rng):
    """Draw y_M ~ p_{M|0}(. | x): the condition itself, diffused to time M."""
    x = np.asarray(x, dtype=float)
    if M <= 0:
        return x.copy()
    mean, std = spec.perturbation_kernel(x, M)
    return mean + std * rng.standard_normal(x.shape)


def _resolve_score(score, x):
    if isinstance(score, ScoreModel):
        if score.conditional and x is None:
            raise ValueError("conditional model needs conditions x")
        return score.score_fn(x if score.conditional else None, use_ema=True)
    return score


def _initial_state(spec, cfg, rng, n, dim, x):
    if cfg.init is Init.NOISY_AT_M:
        if x is None:
            raise ValueError("noisy initialization needs conditions x")
        return noisy_init(spec, x, cfg.M, rng), cfg.M
    return spec.prior_sample(rng, n, dim), spec.T


def _check(y, k):
    if not np.all(np.isfinite(y)):
        raise FloatingPointError(f"non-finite state at reverse step {k}")


def _integrate(score_fn, spec, cfg, rng, y, t0, corrector_rng=None, guidance=None):
    n_steps = cfg.n_steps
    dt = (t0 - spec.t_min) / n_steps
    sq = math.sqrt(dt)
    if guidance is not None:
        base = score_fn

        def score_fn(y, t):
            return base(y, t) + guidance(y, t)
    for k in range(n_steps):
        t = t0 - k * dt
        s = score_fn(y, t)
        g = float(spec.diffusion(t))
        y = y - (spec.drift(y, t) - g * g * s) * dt + g * sq * rng.standard_normal(y.shape)
        if corrector_rng is not None and cfg.corrector_snr > 0:
            t_next = t - dt
            s = score_fn(y, t_next)
            z = corrector_rng.standard_normal(y.shape)
            s_norm = np.mean(np.linalg.norm(s, axis=1))
            z_norm = np.mean(np.linalg.norm(z, axis=1))
            eta = 2.0 * (cfg.corrector_snr * z_norm / max(s_norm, 1e-12)) ** 2
            y = y + eta * s + math.sqrt(2.0 * eta) * z
        _check(y, k)
    return y


def reverse_em(score, spec, cfg: SamplerConfig, rng, x=None, n=None, dim=None):
    """Euler-Maruyama reverse integration.

    ``score`` is a :class:`ScoreModel` (sampled with its EMA weights) or a
    callable ``(y, t) -> score``.  For conditional models ``x`` holds one
    condition per trajectory; otherwise give ``n`` and ``dim``.
    """
    errors = cfg.validate(spec.T)
    if errors:
        raise ValueError("; ".join(errors))
    if x is not None:
        x = np.asarray(x, dtype=float)
        n, dim = len(x), (dim or x.shape[1])
    fn = _resolve_score(score, x)
    y, t0 = _initial_state(spec, cfg, rng, n, dim, x)
    return _integrate(fn, spec, cfg, rng, y, t0)


def reverse_pc(score, spec, cfg: SamplerConfig, rng, x=None, n=None, dim=None):
    """Predictor-corrector: an EM predictor step then one Langevin corrector step.

    The corrector step size is eta = 2 (snr |z| / |s|)^2 with batch-mean
    norms.  Corrector noise comes from a child stream of ``rng`` so the
    predictor sees the same stream as :func:`reverse_em`.
    """
    errors = cfg.validate(spec.T)
    if errors:
        raise ValueError("; ".join(errors))
    corrector_rng = rng.spawn(1)[0]
    if x is not None:
        x = np.asarray(x, dtype=float)
        n, dim = len(x), (dim or x.shape[1])
    fn = _resolve_score(score, x)
    y, t0 = _initial_state(spec, cfg, rng, n, dim, x)
    return _integrate(fn, spec, cfg, rng, y, t0, corrector_rng=corrector_rng)


def scones_guidance(pp: PotentialPair, x):
    """Callable (y, t) -> grad_y log H(x_i, y_i) row by row (0 where H = 0)."""
    x = np.asarray(x, dtype=float)
    return lambda y, t: grad_log_compatibility(pp, x, y)


def scones_sample(uncond, pp: PotentialPair, x, spec, cfg: SamplerConfig, rng):
    """SCONES baseline: unconditional score plus grad log H evaluated on the noisy state."""
    if isinstance(uncond, ScoreModel) and uncond.conditional:
        raise ValueError("SCONES needs an unconditional score model")
    errors = cfg.validate(spec.T)
    if errors:
        raise ValueError("; ".join(errors))
    x = np.asarray(x, dtype=float)
    fn = _resolve_score(uncond, None)
    y, t0 = _initial_state(spec, cfg, rng, len(x), x.shape[1], x)
    corrector_rng = rng.spawn(1)[0] if cfg.method is Method.PREDICTOR_CORRECTOR else None
    return _integrate(fn, spec, cfg, rng, y, t0, corrector_rng=corrector_rng,
                      guidance=scones_guidance(pp, x))


def sample(score, spec, cfg: SamplerConfig, rng, x=None, n=None, dim=None):
    """Dispatch on ``cfg.method``."""
    if cfg.method is Method.PREDICTOR_CORRECTOR:
        return reverse_pc(score, spec, cfg, rng, x=x, n=n, dim=dim)
    return reverse_em(score, spec, cfg, rng, x=x, n=n, dim=dim)
