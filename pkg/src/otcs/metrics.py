"""Evaluation metrics for the 1-D toy: conditional plans, W2 distances, histograms.

The headline distance approximates both the generated conditional and the
estimated conditional plan by Gaussians and averages the closed-form 1-D W2
between them over probe conditions.  An exact empirical W2 (quantile
coupling) is reported next to it, because the Gaussian summary hides
multimodality.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .ot_core import EmpiricalMeasure
from .potentials import PotentialPair, compatibility_matrix

log = logging.getLogger(__name__)


class ZeroMassError(ValueError):
    pass


def conditional_plan_density(pp: PotentialPair, x, q: EmpiricalMeasure):
    """pi_hat(. | x) over q's support: H(x, y_j) q_j, normalized."""
    w = compatibility_matrix(pp, np.asarray(x, dtype=float).reshape(1, -1), q.points)[0] * q.weights
    total = w.sum()
    if not total > 0:
        raise ZeroMassError(f"conditional plan has zero mass at x={np.ravel(x).tolist()}")
    return w / total


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def of_samples(cls, samples):
        s = np.asarray(samples, dtype=float)
        s = s.reshape(len(s), -1)
        if len(s) < 2:
            raise ValueError("a std estimate needs at least 2 samples")
        return cls(s.mean(axis=0), s.std(axis=0, ddof=1))

    @classmethod
    def of_weights(cls, points, weights):
        """Mean and std of a discrete distribution (population formula)."""
        pts = np.asarray(points, dtype=float).reshape(len(weights), -1)
        w = np.asarray(weights, dtype=float)
        mean = w @ pts
        return cls(mean, np.sqrt(np.maximum(w @ (pts - mean) ** 2, 0.0)))


def gaussian_w2_1d(a: GaussianSummary, b: GaussianSummary):
    """W2 between two 1-D Gaussians: sqrt((mu_a - mu_b)^2 + (s_a - s_b)^2)."""
    dm = float(np.ravel(a.mean)[0] - np.ravel(b.mean)[0])
    ds = float(np.ravel(a.std)[0] - np.ravel(b.std)[0])
    return float(np.hypot(dm, ds))


def empirical_w2_1d(samples, points, weights=None, n_quantiles=2048):
    """W2 between 1-D samples and a weighted discrete distribution.

    Both sides are compared through their quantile functions on a common
    midpoint grid, which is the optimal coupling in 1-D.
    """
    a = np.sort(np.ravel(np.asarray(samples, dtype=float)))
    pts = np.ravel(np.asarray(points, dtype=float))
    w = np.full(len(pts), 1.0 / len(pts)) if weights is None else np.asarray(weights, dtype=float)
    order = np.argsort(pts, kind="stable")
    pts, cdf = pts[order], np.cumsum(w[order])
    cdf /= cdf[-1]
    u = (np.arange(n_quantiles) + 0.5) / n_quantiles
    qa = a[np.minimum((u * len(a)).astype(int), len(a) - 1)]
    qb = pts[np.minimum(np.searchsorted(cdf, u, side="left"), len(pts) - 1)]
    return float(np.sqrt(np.mean((qa - qb) ** 2)))


def default_probes(p: EmpiricalMeasure, n=64):
    """Midpoint quantiles of a 1-D source measure."""
    pts = p.points[:, 0]
    order = np.argsort(pts, kind="stable")
    cdf = np.cumsum(p.weights[order])
    u = (np.arange(n) + 0.5) / n
    return pts[order][np.minimum(np.searchsorted(cdf, u), len(pts) - 1)].reshape(-1, 1)


@dataclass
class W2Report:
    gaussian: float
    empirical: float
    per_probe: list
    skipped: list

    def to_dict(self):
        return {"expected_w2_gaussian": self.gaussian, "expected_w2_empirical": self.empirical,
                "n_probes": len(self.per_probe), "skipped_probes": self.skipped,
                "per_probe": self.per_probe}


def expected_w2(sample_fn, pp: PotentialPair, q: EmpiricalMeasure, probes, n_samples, rng):
    """Average Gaussian-approximated W2 between generated and plan conditionals.

    Parameters
    ----------
    sample_fn : callable
        ``sample_fn(X, rng) -> Y`` generating one sample per row of X.
    pp : PotentialPair
        Defines pi_hat(. | x) = H(x, .) q.
    q : EmpiricalMeasure
        Support on which the conditional plan is summarized.
    probes : array (P, 1)
        Conditions; probes with zero plan mass are skipped and reported.
    n_samples : int
        Samples per probe.  All probes are sampled in one batch.

    Returns
    -------
    W2Report
    """
    probes = np.asarray(probes, dtype=float).reshape(-1, q.dim)
    plans, kept, skipped = [], [], []
    for k, x in enumerate(probes):
        try:
            plans.append(conditional_plan_density(pp, x, q))
            kept.append(k)
        except ZeroMassError:
            skipped.append(float(x[0]))
    if skipped:
        log.info("%d probes have zero plan mass and are skipped", len(skipped))
    if not kept:
        raise ZeroMassError("every probe has zero plan mass")
    X = np.repeat(probes[kept], n_samples, axis=0)
    Y = np.asarray(sample_fn(X, rng)).reshape(len(kept), n_samples, -1)
    rows = []
    for k, dens, ys in zip(kept, plans, Y):
        gen = GaussianSummary.of_samples(ys)
        ref = GaussianSummary.of_weights(q.points, dens)
        rows.append({"x": float(probes[k, 0]), "w2_gaussian": gaussian_w2_1d(gen, ref),
                     "w2_empirical": empirical_w2_1d(ys, q.points, dens),
                     "sample_mean": float(gen.mean[0]), "sample_std": float(gen.std[0]),
                     "plan_mean": float(ref.mean[0]), "plan_std": float(ref.std[0])})
    return W2Report(float(np.mean([r["w2_gaussian"] for r in rows])),
                    float(np.mean([r["w2_empirical"] for r in rows])), rows, skipped)


def histogram(samples, n_bins=50, range=None):
    """Density-normalized histogram; returns (edges, density)."""
    s = np.ravel(np.asarray(samples, dtype=float))
    if len(s) == 0:
        raise ValueError("histogram needs at least one sample")
    if range is None:
        lo, hi = s.min(), s.max()
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        range = (lo, hi)
    if not np.all(np.isfinite(range)):
        raise ValueError("histogram range must be finite")
    density, edges = np.histogram(s, bins=n_bins, range=range, density=True)
    return edges, density


def write_histogram_csv(path, edges, density):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["left", "right", "density"])
        for a, b, d in zip(edges[:-1], edges[1:], density):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(d))])


def write_histogram_svg(path, series, title=""):
    """Overlay step histograms; ``series`` maps label -> (edges, density).

    Needs matplotlib; returns False (and writes nothing) when it is missing.
    """
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path)
        return False
    plt.rcParams["svg.hashsalt"] = "otcs"   # stable element ids
    fig, ax = plt.subplots(figsize=(5, 3))
    for label, (edges, density) in series.items():
        ax.stairs(density, edges, label=label)
    ax.set_xlabel("y")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    ax.legend()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return True


def write_metrics_json(path, metrics, config):
    with open(path, "w") as fh:
        json.dump({"metrics": metrics, "config": config}, fh, indent=2, sort_keys=True)
        fh.write("\n")
