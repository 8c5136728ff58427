"""File formats: checkpoints, H tables and CSV data.

Binary files are self-describing: a magic line, an 8-byte little-endian
header length, a sorted-key JSON header, then the raw little-endian arrays
listed in the header.  Nothing time- or host-dependent is written, so the
same inputs always give the same bytes.
"""

from __future__ import annotations

import csv
import json
import struct

import numpy as np

from .cdsm import HTable
from .ot_core import EmpiricalMeasure, Mode, OtProblem
from .potentials import PotentialPair
from .score_net import ScoreArch, ScoreModel
from .sde import SdeSpec

MAGIC = b"OTCS-BIN 1\n"


class FormatError(ValueError):
    pass


def write_blob(path, kind, meta, arrays):
    """Write named arrays plus a JSON-able ``meta`` dict."""
    specs, chunks = [], []
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        dt = "<i8" if a.dtype.kind in "iub" else "<f8"
        a = np.ascontiguousarray(a, dtype=dt)
        specs.append({"name": name, "dtype": dt, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": specs},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_blob(path, kind=None):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not an otcs binary file")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + n])
    pos += n
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"{path}: expected a {kind} file, found {header['kind']}")
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(spec["shape"]).copy()
        pos += count * dt.itemsize
    return header["meta"], arrays


# potentials ---------------------------------------------------------------------

def _problem_meta(problem: OtProblem):
    return {"mode": problem.mode.value, "cost_kind": problem.cost_kind.value,
            "epsilon": problem.epsilon, "tau": problem.tau}


def save_potentials(path, pp: PotentialPair):
    meta = {"problem": _problem_meta(pp.problem), "dim": pp.dim, "hidden": list(pp.hidden),
            "activation": pp.activation, "history": [list(h) for h in pp.history]}
    arrays = {"omega": pp.omega}
    kp = pp.problem.keypoints
    if kp is not None:
        arrays["keypoints_source"] = kp.source
        arrays["keypoints_target"] = kp.target
    write_blob(path, "potentials", meta, arrays)


def load_potentials(path, problem: OtProblem | None = None):
    """Load potentials; ``problem`` (if given) must have the stored mode.

    Without ``problem`` the stored settings (and keypoints) are used.
    """
    meta, arrays = read_blob(path, "potentials")
    stored = meta["problem"]
    if problem is None:
        from .ot_core import KeypointSet
        kp = None
        if "keypoints_source" in arrays:
            kp = KeypointSet(arrays["keypoints_source"], arrays["keypoints_target"])
        problem = OtProblem(mode=stored["mode"], cost_kind=stored["cost_kind"],
                            epsilon=stored["epsilon"], tau=stored["tau"], keypoints=kp)
    elif problem.mode is not Mode(stored["mode"]):
        raise FormatError(f"{path}: potentials were trained for mode {stored['mode']!r}, "
                          f"problem has mode {problem.mode.value!r}")
    pp = PotentialPair(problem, meta["dim"], tuple(meta["hidden"]), meta["activation"])
    if arrays["omega"].shape != pp.omega.shape:
        raise FormatError(f"{path}: parameter vector does not match the stored architecture")
    pp.omega = arrays["omega"]
    pp.history = [tuple(h) for h in meta["history"]]
    return pp


# score models -------------------------------------------------------------------

def save_score_model(path, model: ScoreModel):
    meta = {"arch": model.arch.to_dict(), "sde": model.spec.to_dict(), "step": model.opt.step,
            "lr": model.opt.lr, "ema_decay": model.opt.ema_decay}
    write_blob(path, "score_model", meta,
               {"theta": model.theta, "ema": model.ema, "adam_m": model.opt.m, "adam_v": model.opt.v})


def load_score_model(path):
    meta, arrays = read_blob(path, "score_model")
    model = ScoreModel(ScoreArch(**meta["arch"]), SdeSpec.from_dict(meta["sde"]),
                       lr=meta["lr"], ema_decay=meta["ema_decay"])
    if arrays["theta"].shape != model.theta.shape:
        raise FormatError(f"{path}: parameter vector does not match the stored architecture")
    model.theta[...] = arrays["theta"]
    model.opt.ema[...] = arrays["ema"]
    model.opt.m[...] = arrays["adam_m"]
    model.opt.v[...] = arrays["adam_v"]
    model.opt.step = meta["step"]
    return model


# H tables ----------------------------------------------------------------------

def save_h_table(path, table: HTable):
    d = table.to_dict()
    write_blob(path, "h_table", {"threshold": d.pop("threshold")}, d)


def load_h_table(path):
    meta, arrays = read_blob(path, "h_table")
    return HTable.from_dict({**arrays, "threshold": meta["threshold"]})


# CSV ---------------------------------------------------------------------------

def _rows(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]   # header line
    return rows


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_measure_csv(path, dim=None):
    """One point per row.  With ``dim`` given, a trailing extra column is the weight.

    Without ``dim`` every column is a coordinate and weights are uniform.
    """
    data = np.array(_rows(path), dtype=float)
    if data.ndim != 2 or len(data) == 0:
        raise FormatError(f"{path}: no data rows")
    if dim is not None and data.shape[1] == dim + 1:
        w = data[:, -1]
        if np.any(w < 0) or not w.sum() > 0:
            raise FormatError(f"{path}: weights must be nonnegative with positive sum")
        return EmpiricalMeasure(data[:, :-1], w / w.sum())
    if dim is not None and data.shape[1] != dim:
        raise FormatError(f"{path}: expected {dim} or {dim + 1} columns, found {data.shape[1]}")
    return EmpiricalMeasure(data)


def save_measure_csv(path, measure: EmpiricalMeasure, with_weights=False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for pt, wt in zip(measure.points, measure.weights):
            row = [repr(float(c)) for c in pt]
            w.writerow(row + [repr(float(wt))] if with_weights else row)


def load_keypoint_pairs(path):
    """(source_index, target_index) per row."""
    rows = _rows(path)
    pairs = np.array(rows, dtype=float)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or np.any(pairs != np.round(pairs)):
        raise FormatError(f"{path}: expected integer pairs 'source_index,target_index'")
    return pairs.astype(int)


def load_points_csv(path):
    """Bare coordinate rows, e.g. a conditions file for sampling."""
    data = np.array(_rows(path), dtype=float)
    if data.ndim != 2 or len(data) == 0:
        raise FormatError(f"{path}: no data rows")
    return data


def save_samples_csv(path, conditions, samples):
    """Rows: sample index, condition coordinates, output coordinates."""
    conditions = np.asarray(conditions, dtype=float).reshape(len(samples), -1)
    samples = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + [f"x{d}" for d in range(conditions.shape[1])]
                   + [f"y{d}" for d in range(samples.shape[1])])
        for k, (x, y) in enumerate(zip(conditions, samples)):
            w.writerow([k] + [repr(float(v)) for v in x] + [repr(float(v)) for v in y])


def save_loss_csv(path, rows, header=("iteration", "loss", "learning_rate")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
