"""Experiment configuration: a flat ``section.key = value`` text format.

Grammar (one setting per line)::

    # comment
    seed = 0
    ot.epsilon = 1e-4
    ot.hidden = 1024            # comma-separated lists for sizes
    eval.epsilons = 0.1, 0.01

Keys are case-sensitive, unknown keys are rejected, and everything not
set takes the default from :data:`SCHEMA`.  ``none`` is accepted for
optional values.  Every command validates the whole config before writing
anything; :func:`validate` returns all problems at once, each naming the
dotted key.
"""

from __future__ import annotations

import json

import numpy as np

from .cdsm import CdsmTrainConfig, WeightMode
from .ot_core import CostKind, Gaussian, Mode, OtProblem
from .potentials import PotentialTrainConfig
from .samplers import Init, Method, SamplerConfig
from .score_net import ScoreArch
from .sde import SdeKind, SdeSpec


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt(parse):
    def f(s):
        return None if s.strip().lower() == "none" else parse(s)
    return f


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "output_dir": (str, "out"),

    "data.source": (str, "gaussian"),        # gaussian | csv
    "data.source_mean": (_floats, (-4.0,)),
    "data.source_std": (float, 1.0),
    "data.source_csv": (str, ""),
    "data.target": (str, "gaussian"),
    "data.target_mean": (_floats, (4.0,)),
    "data.target_std": (float, 1.0),
    "data.target_csv": (str, ""),
    "data.keypoints": (str, ""),              # index pairs into the CSV measures
    "data.oracle_points": (int, 32),          # per side, when drawing from generators

    "ot.mode": (str, "unsupervised"),
    "ot.cost": (str, "squared_l2"),
    "ot.epsilon": (float, 1e-4),
    "ot.tau": (float, 0.1),
    "ot.learning_rate": (float, 1e-5),
    "ot.lr_final": (_opt(float), None),
    "ot.batch_size": (int, 256),
    "ot.n_iter": (int, 1000),
    "ot.hidden": (_ints, (1024,)),
    "ot.activation": (str, "tanh"),
    "ot.full_batch": (_bool, False),
    "ot.monitor_every": (int, 0),

    "sde.kind": (str, "ve"),
    "sde.alpha": (float, 25.0),
    "sde.beta_min": (float, 0.1),
    "sde.beta_max": (float, 20.0),
    "sde.T": (float, 1.0),
    "sde.t_min": (float, 1e-5),

    "score.hidden": (int, 512),
    "score.fourier_dim": (int, 256),
    "score.fourier_scale": (float, 16.0),
    "score.scale_by_sigma": (_bool, True),
    "score.batch_size": (int, 32),
    "score.n_candidates": (_opt(int), None),
    "score.n_iter": (int, 1000),
    "score.learning_rate": (float, 1e-4),
    "score.ema_decay": (float, 0.999),
    "score.weight_mode": (str, "sigma_squared"),
    "score.h_threshold": (float, 1e-3),
    "score.max_retries": (int, 10),

    "sampler.method": (str, "euler_maruyama"),
    "sampler.n_steps": (int, 1000),
    "sampler.corrector_snr": (float, 0.16),
    "sampler.init": (str, "prior"),
    "sampler.M": (float, 0.2),
    "sampler.n_samples": (int, 1),

    "eval.epsilons": (_floats, (1e-1, 1e-2, 1e-3, 1e-4)),
    "eval.n_probes": (int, 64),
    "eval.n_samples": (int, 200),
    "eval.support_size": (int, 2000),
    "eval.hist_condition": (float, -4.0),
    "eval.hist_samples": (int, 2000),
    "eval.hist_bins": (int, 50),
    "eval.hist_range": (_floats, (0.0, 8.0)),
    "eval.scones_method": (str, "euler_maruyama"),
    "eval.svg": (_bool, True),
}

#: named random sub-streams derived from the global seed
STREAMS = {"ot": 1, "score": 2, "sample": 3, "eval": 4}


def sub_seed(seed, name):
    """Integer seed for a named sub-stream of the global seed."""
    return int(np.random.SeedSequence([int(seed), STREAMS[name]]).generate_state(1, np.uint64)[0])


def parse(text):
    """Parse config text into a dict of raw strings (no typing yet)."""
    raw, errors = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            errors.append(f"{key}: set twice (line {lineno})")
        raw[key] = value
    if errors:
        raise ConfigError(errors)
    return raw


def resolve(raw):
    """Type-convert a raw dict against the schema.

    Returns ``(cfg, errors)``; keys that fail conversion keep their default
    so the remaining fields can still be validated.
    """
    cfg, errors = {}, []
    for key in raw:
        if key not in SCHEMA:
            errors.append(f"{key}: unknown key")
    for key, (conv, default) in SCHEMA.items():
        if key not in raw:
            cfg[key] = default
            continue
        try:
            cfg[key] = conv(raw[key])
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
            cfg[key] = default
    return cfg, errors


def _check_enum(cfg, key, enum_cls, errors):
    try:
        enum_cls(cfg[key])
    except ValueError:
        errors.append(f"{key}: must be one of {[e.value for e in enum_cls]}")


def validate(cfg):
    """Every violated field, as 'key: reason' strings."""
    e = []
    for side in ("source", "target"):
        kind = cfg[f"data.{side}"]
        if kind not in ("gaussian", "csv"):
            e.append(f"data.{side}: must be 'gaussian' or 'csv'")
        if kind == "csv" and not cfg[f"data.{side}_csv"]:
            e.append(f"data.{side}_csv: required when data.{side} = csv")
        if kind == "gaussian" and not cfg[f"data.{side}_std"] > 0:
            e.append(f"data.{side}_std: must be > 0")
        if kind == "gaussian" and not cfg[f"data.{side}_mean"]:
            e.append(f"data.{side}_mean: needs at least one coordinate")
    if cfg["data.source"] == cfg["data.target"] == "gaussian" and \
            len(cfg["data.source_mean"]) != len(cfg["data.target_mean"]):
        e.append("data.target_mean: dimension differs from data.source_mean")
    if cfg["data.oracle_points"] < 1:
        e.append("data.oracle_points: must be >= 1")

    _check_enum(cfg, "ot.mode", Mode, e)
    _check_enum(cfg, "ot.cost", CostKind, e)
    if not cfg["ot.epsilon"] > 0:
        e.append("ot.epsilon: must be > 0")
    if not cfg["ot.tau"] > 0:
        e.append("ot.tau: must be > 0")
    if not cfg["ot.learning_rate"] > 0:
        e.append("ot.learning_rate: must be > 0")
    if cfg["ot.lr_final"] is not None and not cfg["ot.lr_final"] > 0:
        e.append("ot.lr_final: must be > 0")
    if cfg["ot.batch_size"] < 1:
        e.append("ot.batch_size: must be >= 1")
    if cfg["ot.n_iter"] < 0:
        e.append("ot.n_iter: must be >= 0")
    if not cfg["ot.hidden"] or min(cfg["ot.hidden"]) < 1:
        e.append("ot.hidden: sizes must be >= 1")
    if cfg["ot.activation"] not in ("tanh", "silu"):
        e.append("ot.activation: must be 'tanh' or 'silu'")
    if cfg["ot.mode"] == Mode.SEMI_SUPERVISED.value and not cfg["data.keypoints"]:
        e.append("data.keypoints: required in semi_supervised mode")
    if cfg["ot.full_batch"] and "gaussian" in (cfg["data.source"], cfg["data.target"]):
        e.append("ot.full_batch: needs csv data on both sides")

    _check_enum(cfg, "sde.kind", SdeKind, e)
    if cfg["sde.kind"] == "ve" and not cfg["sde.alpha"] > 1:
        e.append("sde.alpha: must be > 1")
    if cfg["sde.kind"] == "vp" and not 0 < cfg["sde.beta_min"] < cfg["sde.beta_max"]:
        e.append("sde.beta_min: need 0 < beta_min < beta_max")
    if not 0 < cfg["sde.t_min"] < cfg["sde.T"]:
        e.append("sde.t_min: need 0 < t_min < T")

    for key in ("score.hidden", "score.batch_size", "score.fourier_dim", "score.max_retries"):
        if cfg[key] < 1:
            e.append(f"{key}: must be >= 1")
    if cfg["score.fourier_dim"] % 2:
        e.append("score.fourier_dim: must be even")
    if cfg["score.n_iter"] < 0:
        e.append("score.n_iter: must be >= 0")
    if cfg["score.n_candidates"] is not None and cfg["score.n_candidates"] < 1:
        e.append("score.n_candidates: must be >= 1")
    if not cfg["score.learning_rate"] > 0:
        e.append("score.learning_rate: must be > 0")
    if not 0 <= cfg["score.ema_decay"] < 1:
        e.append("score.ema_decay: must lie in [0, 1)")
    if cfg["score.h_threshold"] < 0:
        e.append("score.h_threshold: must be >= 0")
    _check_enum(cfg, "score.weight_mode", WeightMode, e)

    _check_enum(cfg, "sampler.method", Method, e)
    _check_enum(cfg, "sampler.init", Init, e)
    _check_enum(cfg, "eval.scones_method", Method, e)
    if cfg["sampler.n_steps"] < 1:
        e.append("sampler.n_steps: must be >= 1")
    if cfg["sampler.corrector_snr"] < 0:
        e.append("sampler.corrector_snr: must be >= 0")
    if cfg["sampler.init"] == Init.NOISY_AT_M.value and not 0 < cfg["sampler.M"] <= cfg["sde.T"]:
        e.append("sampler.M: must lie in (0, T]")
    if cfg["sampler.n_samples"] < 1:
        e.append("sampler.n_samples: must be >= 1")

    if not cfg["eval.epsilons"] or min(cfg["eval.epsilons"]) <= 0:
        e.append("eval.epsilons: need positive values")
    for key in ("eval.n_probes", "eval.n_samples", "eval.support_size", "eval.hist_samples",
                "eval.hist_bins"):
        if cfg[key] < 1 or (key == "eval.n_samples" and cfg[key] < 2):
            e.append(f"{key}: too small")
    rng_ = cfg["eval.hist_range"]
    if len(rng_) != 2 or not rng_[0] < rng_[1]:
        e.append("eval.hist_range: need 'lo, hi' with lo < hi")
    return e


def load(path):
    with open(path) as fh:
        return from_text(fh.read())


def from_text(text):
    cfg, errors = resolve(parse(text))
    errors += validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def to_json(cfg):
    """JSON-ready echo of the resolved config (tuples become lists)."""
    return json.loads(json.dumps({k: list(v) if isinstance(v, tuple) else v
                                  for k, v in sorted(cfg.items())}))


# builders ----------------------------------------------------------------------

def generator(cfg, side):
    return Gaussian(tuple(cfg[f"data.{side}_mean"]), cfg[f"data.{side}_std"])


def ot_problem(cfg, keypoints=None, epsilon=None):
    return OtProblem(mode=cfg["ot.mode"], cost_kind=cfg["ot.cost"],
                     epsilon=cfg["ot.epsilon"] if epsilon is None else epsilon,
                     tau=cfg["ot.tau"], keypoints=keypoints)


def potential_config(cfg):
    return PotentialTrainConfig(learning_rate=cfg["ot.learning_rate"], batch_size=cfg["ot.batch_size"],
                                n_iter=cfg["ot.n_iter"], seed=sub_seed(cfg["seed"], "ot"),
                                hidden=tuple(cfg["ot.hidden"]), activation=cfg["ot.activation"],
                                monitor_every=cfg["ot.monitor_every"], lr_final=cfg["ot.lr_final"],
                                full_batch=cfg["ot.full_batch"])


def sde_spec(cfg):
    return SdeSpec(kind=cfg["sde.kind"], alpha=cfg["sde.alpha"], beta_min=cfg["sde.beta_min"],
                   beta_max=cfg["sde.beta_max"], T=cfg["sde.T"], t_min=cfg["sde.t_min"])


def score_arch(cfg, dim, conditional=True):
    return ScoreArch(dim=dim, cond_dim=dim, hidden=cfg["score.hidden"],
                     fourier_dim=cfg["score.fourier_dim"], fourier_scale=cfg["score.fourier_scale"],
                     conditional=conditional, scale_by_sigma=cfg["score.scale_by_sigma"],
                     seed=sub_seed(cfg["seed"], "score"))


def cdsm_config(cfg):
    return CdsmTrainConfig(batch_size=cfg["score.batch_size"], n_candidates=cfg["score.n_candidates"],
                           n_iter=cfg["score.n_iter"], learning_rate=cfg["score.learning_rate"],
                           weight_mode=cfg["score.weight_mode"], seed=sub_seed(cfg["seed"], "score"),
                           max_retries=cfg["score.max_retries"])


def sampler_config(cfg, method=None):
    return SamplerConfig(method=method or cfg["sampler.method"], n_steps=cfg["sampler.n_steps"],
                         corrector_snr=cfg["sampler.corrector_snr"], init=cfg["sampler.init"],
                         M=cfg["sampler.M"], seed=sub_seed(cfg["seed"], "sample"))
