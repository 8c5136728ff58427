"""Command-line front end: ``otcs <command> CONFIG [options]``.

Commands
--------
fit-ot           train dual potentials
oracle           exact discrete plan, optionally diffed against trained potentials
fit-score        train the conditional (or, with --unconditional, the plain) score model
sample           generate samples for a CSV of conditions
reproduce-fig2   the full 1-D experiment over the configured epsilon list

Outputs go under ``output_dir`` (config key, or ``--out``) in checkpoints/,
logs/, metrics/ and figures/.  Failures exit nonzero with a JSON object on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as C
from . import io
from .cdsm import build_h_table, train_conditional, train_unconditional
from .metrics import (GaussianSummary, conditional_plan_density, default_probes, expected_w2,
                      histogram, write_histogram_csv, write_histogram_svg, write_metrics_json)
from .ot_core import EmpiricalMeasure, KeypointSet
from .oracle import MAX_ENTRIES, solve_exact
from .potentials import PotentialPair, plan_estimate, train_potentials
from .samplers import sample, scones_sample
from .score_net import ScoreModel

log = logging.getLogger("otcs")

LAYOUT = ("checkpoints", "logs", "metrics", "figures")


class UsageError(ValueError):
    pass


def _dirs(out):
    paths = {name: os.path.join(out, name) for name in LAYOUT}
    for p in paths.values():
        os.makedirs(p, exist_ok=True)
    return paths


def _measure(cfg, side):
    if cfg[f"data.{side}"] == "csv":
        return io.load_measure_csv(cfg[f"data.{side}_csv"])
    return C.generator(cfg, side)


def _keypoints(cfg, p, q):
    if not cfg["data.keypoints"]:
        return None
    if not (isinstance(p, EmpiricalMeasure) and isinstance(q, EmpiricalMeasure)):
        raise UsageError("data.keypoints index into CSV measures; both sides must be csv")
    return KeypointSet.from_indices(p, q, io.load_keypoint_pairs(cfg["data.keypoints"]))


def _problem(cfg, p, q, epsilon=None):
    return C.ot_problem(cfg, keypoints=_keypoints(cfg, p, q), epsilon=epsilon)


# commands ------------------------------------------------------------------------

def cmd_fit_ot(cfg, out):
    p, q = _measure(cfg, "source"), _measure(cfg, "target")
    problem = _problem(cfg, p, q)
    d = _dirs(out)
    pp = train_potentials(problem, p, q, C.potential_config(cfg))
    io.save_potentials(os.path.join(d["checkpoints"], "potentials.bin"), pp)
    io.save_loss_csv(os.path.join(d["logs"], "ot_dual.csv"), pp.history, ("iteration", "dual_value"))
    io.save_loss_csv(os.path.join(d["logs"], "ot_h_change.csv"), pp.h_monitor,
                     ("iteration", "relative_h_change"))
    return {"potentials": os.path.join(d["checkpoints"], "potentials.bin"),
            "final_dual_value": pp.history[-1][1] if pp.history else None}


def _oracle_measures(cfg):
    rng = np.random.default_rng(C.sub_seed(cfg["seed"], "eval"))
    out = []
    for side in ("source", "target"):
        m = _measure(cfg, side)
        if not isinstance(m, EmpiricalMeasure):
            m = EmpiricalMeasure(m.sample(rng, cfg["data.oracle_points"]))
        out.append(m)
    return out


def cmd_oracle(cfg, out, potentials=None):
    p, q = _oracle_measures(cfg)
    if len(p) * len(q) > MAX_ENTRIES:
        raise UsageError(f"oracle cap exceeded: {len(p)} x {len(q)} > {MAX_ENTRIES} entries")
    problem = _problem(cfg, p, q)
    d = _dirs(out)
    exact = solve_exact(problem, p, q)
    exact.to_csv(os.path.join(d["metrics"], "oracle_plan.csv"))
    report = {"n_source": len(p), "n_target": len(q), "epsilon": problem.epsilon,
              "oracle_kkt_residual": exact.kkt_residual,
              "oracle_row_violation": exact.row_violation, "oracle_col_violation": exact.col_violation}
    if potentials:
        pp = io.load_potentials(potentials, problem)
        pp.problem = problem
        est = plan_estimate(pp, p, q)
        est.to_csv(os.path.join(d["metrics"], "estimated_plan.csv"))
        report.update({"l1_distance": est.l1_distance(exact), "estimate_row_violation": est.row_violation,
                       "estimate_col_violation": est.col_violation})
    write_metrics_json(os.path.join(d["metrics"], "oracle.json"), report, C.to_json(cfg))
    return report


def cmd_fit_score(cfg, out, potentials=None, unconditional=False):
    p, q = _measure(cfg, "source"), _measure(cfg, "target")
    d = _dirs(out)
    spec = C.sde_spec(cfg)
    tcfg = C.cdsm_config(cfg)
    if unconditional:
        model = ScoreModel(C.score_arch(cfg, q.dim, conditional=False), spec,
                           lr=tcfg.learning_rate, ema_decay=cfg["score.ema_decay"])
        model, tlog = train_unconditional(model, q, tcfg)
        name = "score_uncond"
    else:
        if not potentials:
            raise UsageError("fit-score needs --potentials (or --unconditional)")
        pp = io.load_potentials(potentials, _problem(cfg, p, q))
        model = ScoreModel(C.score_arch(cfg, q.dim), spec, lr=tcfg.learning_rate,
                           ema_decay=cfg["score.ema_decay"])
        if isinstance(p, EmpiricalMeasure) and isinstance(q, EmpiricalMeasure):
            table = build_h_table(pp, p, q, cfg["score.h_threshold"])
            io.save_h_table(os.path.join(d["checkpoints"], "h_table.bin"), table)
            model, tlog = train_conditional(model, p, q, tcfg, table=table)
        else:
            model, tlog = train_conditional(model, p, q, tcfg, pp=pp)
        name = "score"
    path = os.path.join(d["checkpoints"], f"{name}.bin")
    io.save_score_model(path, model)
    io.save_loss_csv(os.path.join(d["logs"], f"{name}_loss.csv"), tlog.rows)
    summary = {"model": path, "skipped_sources": tlog.skipped_sources}
    if tlog.rows:
        summary["first_window_loss"], summary["last_window_loss"] = tlog.window_means()
    write_metrics_json(os.path.join(d["logs"], f"{name}_summary.json"), summary, C.to_json(cfg))
    return summary


def cmd_sample(cfg, out, model_path, conditions, potentials=None, output=None):
    model = io.load_score_model(model_path)
    X = io.load_points_csv(conditions)
    cond_dim = model.arch.cond_dim or model.arch.dim
    if X.shape[1] != cond_dim:
        raise UsageError(f"conditions have dimension {X.shape[1]}, model expects {cond_dim}")
    d = _dirs(out)
    X = np.repeat(X, cfg["sampler.n_samples"], axis=0)
    scfg = C.sampler_config(cfg)
    rng = np.random.default_rng(scfg.seed)
    if model.conditional:
        Y = sample(model, model.spec, scfg, rng, x=X)
    else:
        if not potentials:
            raise UsageError("an unconditional model samples with SCONES guidance; pass --potentials")
        pp = io.load_potentials(potentials)
        Y = scones_sample(model, pp, X, model.spec, scfg, rng)
    path = output or os.path.join(d["metrics"], "samples.csv")
    io.save_samples_csv(path, X, Y)
    return {"samples": path, "n": len(Y)}


# 1-D sweep -----------------------------------------------------------------------

def run_fig2(cfg, out, progress=None):
    """Potentials, OTCS and SCONES models and their W2 per epsilon.

    Returns the metrics dict that is also written to metrics/fig2.json.
    """
    say = progress or (lambda msg: log.info(msg))
    p, q = C.generator(cfg, "source"), C.generator(cfg, "target")
    if p.dim != 1:
        raise UsageError("reproduce-fig2 is the 1-D experiment")
    d = _dirs(out)
    spec = C.sde_spec(cfg)
    tcfg = C.cdsm_config(cfg)
    eval_rng = np.random.default_rng(C.sub_seed(cfg["seed"], "eval"))
    support = EmpiricalMeasure(q.sample(eval_rng, cfg["eval.support_size"]))
    probes = default_probes(EmpiricalMeasure(p.sample(eval_rng, cfg["eval.support_size"])),
                            cfg["eval.n_probes"])
    x_hist = np.array([[cfg["eval.hist_condition"]]])
    otcs_cfg = C.sampler_config(cfg)
    scones_cfg = C.sampler_config(cfg, method=cfg["eval.scones_method"])
    sample_seed = C.sub_seed(cfg["seed"], "sample")

    say("training the unconditional score model (SCONES backbone)")
    uncond = ScoreModel(C.score_arch(cfg, 1, conditional=False), spec, lr=tcfg.learning_rate,
                        ema_decay=cfg["score.ema_decay"])
    uncond, ulog = train_unconditional(uncond, q, tcfg)
    io.save_score_model(os.path.join(d["checkpoints"], "score_uncond.bin"), uncond)
    io.save_loss_csv(os.path.join(d["logs"], "score_uncond_loss.csv"), ulog.rows)

    results = {}
    for k, eps in enumerate(cfg["eval.epsilons"]):
        tag = f"eps_{eps:g}"
        problem = C.ot_problem(cfg, epsilon=eps)
        say(f"[{tag}] training potentials")
        pp = train_potentials(problem, p, q, C.potential_config(cfg))
        io.save_potentials(os.path.join(d["checkpoints"], f"potentials_{tag}.bin"), pp)
        io.save_loss_csv(os.path.join(d["logs"], f"ot_dual_{tag}.csv"), pp.history,
                         ("iteration", "dual_value"))

        say(f"[{tag}] training the conditional score model")
        model = ScoreModel(C.score_arch(cfg, 1), spec, lr=tcfg.learning_rate,
                           ema_decay=cfg["score.ema_decay"])
        model, clog = train_conditional(model, p, q, tcfg, pp=pp)
        io.save_score_model(os.path.join(d["checkpoints"], f"score_{tag}.bin"), model)
        io.save_loss_csv(os.path.join(d["logs"], f"score_loss_{tag}.csv"), clog.rows)

        say(f"[{tag}] sampling")

        def otcs_fn(X, rng):
            return sample(model, spec, otcs_cfg, rng, x=X)

        def scones_fn(X, rng):
            return scones_sample(uncond, pp, X, spec, scones_cfg, rng)

        n = cfg["eval.n_samples"]
        otcs = expected_w2(otcs_fn, pp, support, probes, n, np.random.default_rng([sample_seed, k, 0]))
        scones = expected_w2(scones_fn, pp, support, probes, n, np.random.default_rng([sample_seed, k, 1]))

        # histograms at the highlighted condition
        m = cfg["eval.hist_samples"]
        Xh = np.repeat(x_hist, m, axis=0)
        y_otcs = otcs_fn(Xh, np.random.default_rng([sample_seed, k, 2]))
        y_scones = scones_fn(Xh, np.random.default_rng([sample_seed, k, 3]))
        lo, hi = cfg["eval.hist_range"]
        bins = cfg["eval.hist_bins"]
        series = {"OTCS": histogram(y_otcs, bins, (lo, hi)), "SCONES": histogram(y_scones, bins, (lo, hi))}
        hist_entry = {"x": float(x_hist[0, 0]),
                      "otcs_mean": float(np.mean(y_otcs)), "otcs_std": float(np.std(y_otcs, ddof=1)),
                      "scones_mean": float(np.mean(y_scones)), "scones_std": float(np.std(y_scones, ddof=1))}
        try:
            dens = conditional_plan_density(pp, x_hist[0], support)
            ref = GaussianSummary.of_weights(support.points, dens)
            hist_entry.update(plan_mean=float(ref.mean[0]), plan_std=float(ref.std[0]))
            dens_hist = np.histogram(support.points[:, 0], bins=bins, range=(lo, hi), weights=dens,
                                     density=True)
            series["plan"] = (dens_hist[1], dens_hist[0])
        except ValueError:
            hist_entry.update(plan_mean=None, plan_std=None)
        for label, (edges, dens_) in series.items():
            write_histogram_csv(os.path.join(d["figures"], f"hist_{label.lower()}_{tag}.csv"), edges, dens_)
        if cfg["eval.svg"]:
            write_histogram_svg(os.path.join(d["figures"], f"hist_{tag}.svg"), series,
                                title=f"x = {x_hist[0, 0]:g}, eps = {eps:g}")

        results[tag] = {"epsilon": eps, "otcs": otcs.to_dict(), "scones": scones.to_dict(),
                        "histogram": hist_entry, "skipped_sources": clog.skipped_sources,
                        "otcs_better": otcs.gaussian < scones.gaussian}
        say(f"[{tag}] W2 OTCS {otcs.gaussian:.4f}  SCONES {scones.gaussian:.4f}")

    metrics = {"per_epsilon": results,
               "ordering_holds": all(r["otcs_better"] for r in results.values())}
    write_metrics_json(os.path.join(d["metrics"], "fig2.json"), metrics, C.to_json(cfg))
    return metrics


# entry point ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Turns argument errors into UsageError so they are reported as JSON."""

    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    ap = _Parser(prog="otcs", description="OT-guided conditional score models")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.add_argument("config")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        return sp

    add("fit-ot", "train dual potentials")
    sp = add("oracle", "exact discrete plan")
    sp.add_argument("--potentials")
    sp = add("fit-score", "train a score model")
    sp.add_argument("--potentials")
    sp.add_argument("--unconditional", action="store_true")
    sp = add("sample", "sample from a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--conditions", required=True)
    sp.add_argument("--potentials")
    sp.add_argument("--output")
    add("reproduce-fig2", "run the 1-D epsilon sweep")
    return ap


def _fail(kind, message, errors=None, code=1):
    payload = {"error": kind, "message": message}
    if errors:
        payload["errors"] = errors
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), code=2)
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load(args.config)
    except C.ConfigError as exc:
        return _fail("ConfigError", "invalid configuration", exc.errors, code=2)
    except OSError as exc:
        return _fail("ConfigError", str(exc), code=2)
    out = args.out or cfg["output_dir"]
    try:
        if args.command == "fit-ot":
            result = cmd_fit_ot(cfg, out)
        elif args.command == "oracle":
            result = cmd_oracle(cfg, out, args.potentials)
        elif args.command == "fit-score":
            result = cmd_fit_score(cfg, out, args.potentials, args.unconditional)
        elif args.command == "sample":
            result = cmd_sample(cfg, out, args.model, args.conditions, args.potentials, args.output)
        else:
            result = run_fig2(cfg, out, progress=lambda m: print(m, file=sys.stderr) if args.verbose else None)
    except UsageError as exc:
        return _fail("UsageError", str(exc), code=2)
    except Exception as exc:  # reported as JSON, never as a traceback
        return _fail(type(exc).__name__, str(exc))
    print(json.dumps(result, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
