"""OT-guided conditional denoising score matching.

Training pairs (x, y) are drawn by *resampling-by-compatibility*: pick a
source x, then pick a target among candidates with probability
proportional to H(x, y).  The per-pair loss fits the scaled noise,

    w_t / sigma_t^2 * || s_theta(m_t y + sigma_t z; x, t) sigma_t + z ||^2 .
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .ot_core import EmpiricalMeasure
from .potentials import PotentialPair, compatibility_matrix
from .score_net import ScoreModel

log = logging.getLogger(__name__)


class WeightMode(str, enum.Enum):
    SIGMA_SQUARED = "sigma_squared"
    DIFFUSION_SQUARED = "diffusion_squared"


@dataclass
class CdsmTrainConfig:
    batch_size: int = 32
    n_candidates: int | None = None  # L; defaults to 10 * batch_size
    n_iter: int = 1000
    learning_rate: float = 1e-4
    weight_mode: WeightMode = WeightMode.SIGMA_SQUARED
    seed: int = 0
    log_every: int = 100
    max_retries: int = 10

    def __post_init__(self):
        self.weight_mode = WeightMode(self.weight_mode)
        if self.n_candidates is None:
            self.n_candidates = 10 * self.batch_size

    def validate(self):
        errors = []
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.n_candidates < 1:
            errors.append("n_candidates must be >= 1")
        if self.n_iter < 0:
            errors.append("n_iter must be >= 0")
        if not self.learning_rate > 0:
            errors.append("learning_rate must be positive")
        return errors


class EmptyCandidatesError(RuntimeError):
    pass


# H table ------------------------------------------------------------------------

@dataclass
class HTable:
    """Per-source candidate targets and their normalized compatibility weights."""

    candidates: list
    weights: list
    threshold: float = 1e-3
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self._cdf = [np.cumsum(w) for w in self.weights]

    @property
    def n_sources(self):
        return len(self.candidates)

    @property
    def active(self):
        return np.array([i for i, c in enumerate(self.candidates) if len(c)], dtype=int)

    @classmethod
    def from_raw(cls, raw, threshold=0.0):
        """Build from raw H rows (dense array or list of {target: H} dicts)."""
        cands, weights, skipped = [], [], []
        for i, row in enumerate(raw):
            if isinstance(row, dict):
                idx = np.array(sorted(row), dtype=int)
                h = np.array([row[j] for j in idx], dtype=float)
            else:
                h_all = np.asarray(row, dtype=float)
                idx = np.arange(len(h_all))
                h = h_all
            keep = h > threshold
            idx, h = idx[keep], h[keep]
            if len(idx) == 0:
                skipped.append(i)
                cands.append(idx)
                weights.append(h)
                continue
            cands.append(idx)
            weights.append(h / h.sum())
        return cls(cands, weights, threshold, np.array(skipped, dtype=int))

    @classmethod
    def from_pairing(cls, targets):
        """Hard coupling: source i has the single candidate ``targets[i]``."""
        return cls([np.array([j]) for j in targets], [np.ones(1) for _ in targets], 0.0)

    def resample(self, sources, rng):
        """One target per entry of ``sources``, drawn with probability H_x."""
        sources = np.atleast_1d(sources)
        u = rng.random(len(sources))
        out = np.empty(len(sources), dtype=int)
        for k, (i, r) in enumerate(zip(sources, u)):
            cdf = self._cdf[i]
            if len(cdf) == 0:
                raise EmptyCandidatesError(f"source {i} has no candidate targets")
            pos = min(np.searchsorted(cdf, r * cdf[-1], side="right"), len(cdf) - 1)
            out[k] = self.candidates[i][pos]
        return out

    def to_dict(self):
        return {"threshold": self.threshold, "skipped": self.skipped,
                "lengths": np.array([len(c) for c in self.candidates]),
                "candidates": np.concatenate(self.candidates).astype(np.int64) if self.candidates else np.zeros(0),
                "weights": np.concatenate(self.weights) if self.weights else np.zeros(0)}

    @classmethod
    def from_dict(cls, d):
        splits = np.cumsum(d["lengths"])[:-1]
        cands = [c.astype(int) for c in np.split(np.asarray(d["candidates"]), splits)]
        weights = list(np.split(np.asarray(d["weights"], dtype=float), splits))
        return cls(cands, weights, float(d["threshold"]), np.asarray(d["skipped"], dtype=int))


def build_h_table(pp: PotentialPair, p: EmpiricalMeasure, q: EmpiricalMeasure,
                  threshold=1e-3, chunk=1024):
    rows = []
    for start in range(0, len(p), chunk):
        H = compatibility_matrix(pp, p.points[start:start + chunk], q.points)
        rows.extend(H)
    table = HTable.from_raw(rows, threshold)
    if len(table.skipped) == table.n_sources:
        raise EmptyCandidatesError(
            f"no source has a target with H > {threshold:g}; potentials untrained or threshold too high")
    if len(table.skipped):
        log.info("%d of %d sources have no candidate and are skipped",
                 len(table.skipped), table.n_sources)
    return table


def resample_by_compatibility(table: HTable, i, rng):
    return int(table.resample([i], rng)[0])


def resample_continuous(pp: PotentialPair, x, q, L, rng, max_retries=10):
    """Draw L candidates from q and pick one with probability prop. to H(x, .).

    Returns None when every retry produced all-zero compatibilities.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    for _ in range(max_retries):
        Y = q.sample(rng, L)
        h = compatibility_matrix(pp, x, Y)[0]
        total = h.sum()
        if total > 0:
            return Y[rng.choice(L, p=h / total)]
    return None


def resample_continuous_batch(pp: PotentialPair, X, q, L, rng, max_retries=10):
    """Vectorized resample_continuous for a batch of sources.

    Each round draws one pool of L candidates shared by the pending sources,
    so v is evaluated L times per round rather than L per source.  Returns
    (targets, keep) where ``keep`` flags sources that found a candidate
    within ``max_retries`` rounds.
    """
    X = np.asarray(X, dtype=float)
    B, D = X.shape
    out = np.zeros((B, D))
    keep = np.zeros(B, dtype=bool)
    pending = np.arange(B)
    for _ in range(max_retries):
        if len(pending) == 0:
            break
        Y = q.sample(rng, L)
        H = compatibility_matrix(pp, X[pending], Y)
        r = rng.random(len(pending))
        ok = H.sum(axis=1) > 0
        for k in np.flatnonzero(ok):
            cdf = np.cumsum(H[k])
            pos = min(np.searchsorted(cdf, r[k] * cdf[-1], side="right"), L - 1)
            out[pending[k]] = Y[pos]
        keep[pending[ok]] = True
        pending = pending[~ok]
    if len(pending):
        log.debug("%d sources skipped after %d resampling rounds", len(pending), max_retries)
    return out, keep


# losses ---------------------------------------------------------------------------

def _loss_weight(spec, t, weight_mode):
    var = spec.variance(t)
    if WeightMode(weight_mode) is WeightMode.SIGMA_SQUARED:
        return np.ones_like(var)
    return spec.diffusion(t) ** 2 / var


def cdsm_loss_and_grad(model: ScoreModel, spec, x, y, t, noise,
                       weight_mode=WeightMode.SIGMA_SQUARED, theta=None, need_grad=True):
    """Batch-mean fitting-noise loss and its gradient in theta.

    Rows of x, y, noise and entries of t describe one (x, y, t, z) tuple
    each; ``x`` is None for an unconditional model.
    """
    theta = model.theta if theta is None else theta
    y = np.asarray(y, dtype=float)
    noise = np.asarray(noise, dtype=float)
    t = np.asarray(t, dtype=float)
    N = len(y)
    sig = spec.sigma(t)[:, None]
    yt = spec.mean_scale(t)[:, None] * y + sig * noise
    out, cache = model.forward(theta, yt, t, x, keep=True)
    r = out * sig + noise
    coef = _loss_weight(spec, t, weight_mode)
    loss = float(np.mean(coef * np.sum(r * r, axis=1)))
    if not need_grad:
        return loss, None
    dout = (2.0 / N) * coef[:, None] * r * sig
    grad = model.backward(theta, cache, dout, np.zeros_like(theta))
    return loss, grad


def cdsm_loss(model, spec, x, y, t, noise, weight_mode=WeightMode.SIGMA_SQUARED, theta=None):
    return cdsm_loss_and_grad(model, spec, x, y, t, noise, weight_mode, theta, need_grad=False)[0]


def paired_dsm_loss_and_grad(model, spec, x_cond, q_points, y_idx, t, noise,
                             weight_mode=WeightMode.SIGMA_SQUARED, theta=None):
    """Classic paired DSM: each target y_j carries its own condition x_cond[j]."""
    y_idx = np.asarray(y_idx, dtype=int)
    x = np.asarray(x_cond, dtype=float)[y_idx]
    return cdsm_loss_and_grad(model, spec, x, np.asarray(q_points)[y_idx], t, noise, weight_mode, theta)


def paired_dsm_loss(model, spec, x_cond, q_points, y_idx, t, noise,
                    weight_mode=WeightMode.SIGMA_SQUARED, theta=None):
    y_idx = np.asarray(y_idx, dtype=int)
    x = np.asarray(x_cond, dtype=float)[y_idx]
    return cdsm_loss(model, spec, x, np.asarray(q_points)[y_idx], t, noise, weight_mode, theta)


# batch construction --------------------------------------------------------------

def _time_and_noise(spec, B, D, rng):
    t = rng.uniform(spec.t_min, spec.T, size=B)
    noise = rng.standard_normal((B, D))
    return t, noise


def sample_cdsm_batch(table: HTable, p: EmpiricalMeasure, q: EmpiricalMeasure, B, spec,
                      rng, resample_rng):
    """(x, y, t, noise) for one CDSM step on discrete datasets.

    ``rng`` drives source indices, times and noise; ``resample_rng`` drives
    the compatibility resampling only.
    """
    active = table.active
    w = p.weights[active]
    if np.allclose(w, w[0]):
        src = active[rng.integers(len(active), size=B)]
    else:
        src = active[rng.choice(len(active), size=B, p=w / w.sum())]
    tgt = table.resample(src, resample_rng)
    t, noise = _time_and_noise(spec, B, q.dim, rng)
    return p.points[src], q.points[tgt], t, noise


def sample_paired_batch(q: EmpiricalMeasure, B, spec, rng):
    """(target indices, t, noise) for one paired-DSM step."""
    y_idx = rng.integers(len(q), size=B)
    t, noise = _time_and_noise(spec, B, q.dim, rng)
    return y_idx, t, noise


# training loops ----------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)   # (iteration, loss, learning rate)
    skipped_sources: int = 0

    def window_means(self, frac=0.1):
        losses = np.array([r[1] for r in self.rows])
        k = max(1, int(len(losses) * frac))
        return float(losses[:k].mean()), float(losses[-k:].mean())


def _run(model, cfg, next_batch, log_obj):
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    model.opt.lr = cfg.learning_rate
    acc = []
    for it in range(1, cfg.n_iter + 1):
        x, y, t, noise = next_batch(it)
        loss, grad = cdsm_loss_and_grad(model, model.spec, x, y, t, noise, cfg.weight_mode)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        model.step(grad)
        acc.append(loss)
        if it % cfg.log_every == 0 or it == cfg.n_iter:
            log_obj.rows.append((it, float(np.mean(acc)), model.opt.lr))
            acc = []
    return model


def train_conditional(model: ScoreModel, p, q, cfg: CdsmTrainConfig, table: HTable | None = None,
                      pp: PotentialPair | None = None):
    """Train a conditional model with resampling-by-compatibility.

    Discrete mode: pass an H ``table`` built over the empirical measures p, q.
    Continuous mode: pass trained potentials ``pp`` and samplers p, q; L
    candidates are drawn from q for every source.
    Returns ``(model, TrainLog)``.
    """
    if not model.conditional:
        raise ValueError("train_conditional needs a conditional model")
    if (table is None) == (pp is None):
        raise ValueError("pass exactly one of table (discrete) or pp (continuous)")
    spec = model.spec
    batch_rng, resample_rng = np.random.default_rng(cfg.seed).spawn(2)
    tlog = TrainLog()

    if table is not None:
        tlog.skipped_sources = len(table.skipped)

        def next_batch(it):
            return sample_cdsm_batch(table, p, q, cfg.batch_size, spec, batch_rng, resample_rng)
    else:
        def next_batch(it):
            xs = []
            ys = []
            need = cfg.batch_size
            barren = 0        # consecutive rounds without a single compatible source
            while need > 0:
                # draw a full batch each round so a steady fraction of zero-mass
                # sources cannot starve the fill
                X = p.sample(batch_rng, cfg.batch_size)
                Y, keep = resample_continuous_batch(pp, X, q, cfg.n_candidates, resample_rng,
                                                    cfg.max_retries)
                tlog.skipped_sources += int((~keep).sum())
                idx = np.flatnonzero(keep)[:need]
                barren = 0 if len(idx) else barren + 1
                if barren == cfg.max_retries:
                    raise EmptyCandidatesError(f"iteration {it}: could not find compatible targets")
                xs.append(X[idx])
                ys.append(Y[idx])
                need -= len(idx)
            X, Y = np.concatenate(xs), np.concatenate(ys)
            t, noise = _time_and_noise(spec, len(X), Y.shape[1], batch_rng)
            return X, Y, t, noise

    return _run(model, cfg, next_batch, tlog), tlog


def train_unconditional(model: ScoreModel, q, cfg: CdsmTrainConfig):
    """Plain DSM on samples of q (the unconditional SCONES backbone)."""
    if model.conditional:
        raise ValueError("train_unconditional needs an unconditional model")
    rng = np.random.default_rng(cfg.seed)
    tlog = TrainLog()

    def next_batch(it):
        Y = q.sample(rng, cfg.batch_size)
        t, noise = _time_and_noise(model.spec, cfg.batch_size, Y.shape[1], rng)
        return None, Y, t, noise

    return _run(model, cfg, next_batch, tlog), tlog
