import json

import numpy as np
import pytest

from otcs import config as C
from otcs import io
from otcs.cdsm import HTable
from otcs.cli import main
from otcs.ot_core import EmpiricalMeasure, KeypointSet, OtProblem
from otcs.potentials import PotentialPair
from otcs.score_net import ScoreArch, ScoreModel
from otcs.sde import SdeSpec

# binary formats ---------------------------------------------------------------------


def test_blob_roundtrip_and_bytes_are_stable(tmp_path):
    arrays = {"b": np.arange(6).reshape(2, 3), "a": np.linspace(0, 1, 4)}
    io.write_blob(tmp_path / "x.bin", "thing", {"k": [1, 2]}, arrays)
    io.write_blob(tmp_path / "y.bin", "thing", {"k": [1, 2]}, dict(reversed(list(arrays.items()))))
    assert (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()
    meta, back = io.read_blob(tmp_path / "x.bin", "thing")
    assert meta == {"k": [1, 2]}
    assert np.array_equal(back["b"], arrays["b"]) and back["b"].dtype == np.int64
    assert np.array_equal(back["a"], arrays["a"])
    with pytest.raises(io.FormatError):
        io.read_blob(tmp_path / "x.bin", "other")
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(io.FormatError):
        io.read_blob(tmp_path / "bad.bin")


def test_potentials_roundtrip(tmp_path):
    kp = KeypointSet(np.array([[0.0], [1.0]]), np.array([[2.0], [3.0]]))
    pr = OtProblem(mode="semi_supervised", epsilon=0.3, tau=0.5, keypoints=kp)
    pp = PotentialPair(pr, 1, (5,), "silu").init(np.random.default_rng(0))
    pp.history = [(100, 1.5)]
    io.save_potentials(tmp_path / "p.bin", pp)
    back = io.load_potentials(tmp_path / "p.bin")
    assert np.array_equal(back.omega, pp.omega) and back.history == [(100, 1.5)]
    assert back.problem.epsilon == 0.3 and back.problem.tau == 0.5 and back.activation == "silu"
    assert np.array_equal(back.problem.keypoints.target, kp.target)
    with pytest.raises(io.FormatError, match="mode"):
        io.load_potentials(tmp_path / "p.bin", OtProblem())


def test_score_model_roundtrip(tmp_path):
    m = ScoreModel(ScoreArch(dim=2, hidden=8, fourier_dim=4, seed=3), SdeSpec(kind="vp"), lr=2e-3)
    m.step(np.ones_like(m.theta))
    io.save_score_model(tmp_path / "s.bin", m)
    back = io.load_score_model(tmp_path / "s.bin")
    assert back.arch == m.arch and back.spec == m.spec and back.opt.step == 1
    for a, b in [(back.theta, m.theta), (back.ema, m.ema), (back.opt.m, m.opt.m), (back.opt.v, m.opt.v)]:
        assert np.array_equal(a, b)
    y = np.ones((3, 2))
    assert np.array_equal(back(y, 0.5, y), m(y, 0.5, y))


def test_h_table_roundtrip(tmp_path):
    t = HTable.from_raw([[1.0, 0.0, 3.0], [0.0, 0.0, 0.0], [2.0, 2.0, 0.0]], threshold=1e-3)
    io.save_h_table(tmp_path / "h.bin", t)
    back = io.load_h_table(tmp_path / "h.bin")
    assert [c.tolist() for c in back.candidates] == [[0, 2], [], [0, 1]]
    assert back.skipped.tolist() == [1] and back.threshold == 1e-3


# CSV -----------------------------------------------------------------------------------

def test_measure_csv(tmp_path):
    m = EmpiricalMeasure(np.array([[0.5, 1.0], [2.0, -1.0]]), np.array([0.25, 0.75]))
    io.save_measure_csv(tmp_path / "m.csv", m, with_weights=True)
    back = io.load_measure_csv(tmp_path / "m.csv", dim=2)
    assert np.array_equal(back.points, m.points) and np.array_equal(back.weights, m.weights)
    assert io.load_measure_csv(tmp_path / "m.csv").dim == 3          # no dim: all columns are coordinates
    (tmp_path / "h.csv").write_text("x\n# comment\n1.0\n2.0\n")
    assert io.load_measure_csv(tmp_path / "h.csv").points[:, 0].tolist() == [1.0, 2.0]
    with pytest.raises(io.FormatError):
        io.load_measure_csv(tmp_path / "m.csv", dim=5)


def test_keypoint_and_samples_csv(tmp_path):
    (tmp_path / "k.csv").write_text("source,target\n0,1\n2,3\n")
    assert io.load_keypoint_pairs(tmp_path / "k.csv").tolist() == [[0, 1], [2, 3]]
    (tmp_path / "bad.csv").write_text("0.5,1\n")
    with pytest.raises(io.FormatError):
        io.load_keypoint_pairs(tmp_path / "bad.csv")
    io.save_samples_csv(tmp_path / "s.csv", np.array([[-4.0], [-4.0]]), np.array([[3.5], [4.25]]))
    assert (tmp_path / "s.csv").read_text().splitlines() == ["index,x0,y0", "0,-4.0,3.5", "1,-4.0,4.25"]


# config -------------------------------------------------------------------------------

def test_defaults_and_parsing():
    cfg = C.from_text("seed = 3  # trailing comment\not.hidden = 64, 64\nscore.n_candidates = 12\n")
    assert cfg["seed"] == 3 and cfg["ot.hidden"] == (64, 64) and cfg["score.n_candidates"] == 12
    assert cfg["ot.epsilon"] == 1e-4 and cfg["sde.alpha"] == 25.0 and cfg["score.batch_size"] == 32
    assert C.cdsm_config(cfg).n_candidates == 12
    assert C.cdsm_config(C.from_text("")).n_candidates == 320       # L = 10 B


def test_validation_lists_every_field():
    with pytest.raises(C.ConfigError) as exc:
        C.from_text("bogus = 1\not.epsilon = 0\nsde.alpha = 0.5\nsampler.n_steps = x\n")
    errs = exc.value.errors
    assert "bogus: unknown key" in errs and "ot.epsilon: must be > 0" in errs
    assert "sde.alpha: must be > 1" in errs
    assert any(e.startswith("sampler.n_steps:") for e in errs)
    with pytest.raises(C.ConfigError, match="set twice"):
        C.from_text("seed = 1\nseed = 2\n")
    with pytest.raises(C.ConfigError):
        C.from_text("just words\n")


def test_sub_seeds_are_distinct_and_stable():
    seeds = {name: C.sub_seed(7, name) for name in C.STREAMS}
    assert len(set(seeds.values())) == 4
    assert seeds == {name: C.sub_seed(7, name) for name in C.STREAMS}
    assert C.sub_seed(8, "ot") != seeds["ot"]


def test_to_json_echoes_everything():
    cfg = C.from_text("")
    echo = C.to_json(cfg)
    assert set(echo) == set(C.SCHEMA) and echo["eval.epsilons"] == [0.1, 0.01, 0.001, 0.0001]


# CLI ----------------------------------------------------------------------------------

TINY = """\
seed = 1
ot.learning_rate = 1e-2
ot.n_iter = 600
ot.batch_size = 64
ot.hidden = 32
ot.epsilon = 0.1
score.hidden = 16
score.fourier_dim = 8
score.n_iter = 20
sampler.n_steps = 20
"""


def write_cfg(tmp_path, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(TINY + f"output_dir = {tmp_path / 'out'}\n" + extra)
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_pipeline_is_reproducible(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    code, stdout, _ = run(["fit-ot", cfg], capsys)
    assert code == 0 and json.loads(stdout)["potentials"].endswith("potentials.bin")
    first = (out / "checkpoints" / "potentials.bin").read_bytes()
    assert run(["fit-ot", cfg], capsys)[0] == 0
    assert (out / "checkpoints" / "potentials.bin").read_bytes() == first
    pot = out / "checkpoints" / "potentials.bin"
    for sub in ("checkpoints", "logs", "metrics", "figures"):
        assert (out / sub).is_dir()

    code, stdout, _ = run(["oracle", cfg, "--potentials", pot], capsys)
    report = json.loads(stdout)
    assert code == 0 and "l1_distance" in report and report["n_source"] == 32
    assert (out / "metrics" / "oracle_plan.csv").exists() and (out / "metrics" / "estimated_plan.csv").exists()

    assert run(["fit-score", cfg, "--potentials", pot], capsys)[0] == 0
    assert run(["fit-score", cfg, "--unconditional"], capsys)[0] == 0
    (tmp_path / "cond.csv").write_text("x\n-4.0\n-3.0\n")
    code, stdout, _ = run(["sample", cfg, "--model", out / "checkpoints" / "score.bin",
                           "--conditions", tmp_path / "cond.csv"], capsys)
    assert code == 0 and json.loads(stdout)["n"] == 2
    samples = (out / "metrics" / "samples.csv").read_bytes()
    run(["sample", cfg, "--model", out / "checkpoints" / "score.bin", "--conditions", tmp_path / "cond.csv"], capsys)
    assert (out / "metrics" / "samples.csv").read_bytes() == samples
    code, _, _ = run(["sample", cfg, "--model", out / "checkpoints" / "score_uncond.bin",
                      "--conditions", tmp_path / "cond.csv", "--potentials", pot,
                      "--output", tmp_path / "scones.csv"], capsys)
    assert code == 0 and (tmp_path / "scones.csv").read_text().startswith("index,x0,y0")


def test_cli_config_errors_are_json(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "ot.tau = -1\nsde.kind = ve2\n")
    code, _, err = run(["fit-ot", cfg], capsys)
    payload = json.loads(err)
    assert code == 2 and payload["error"] == "ConfigError"
    assert "ot.tau: must be > 0" in payload["errors"] and any("sde.kind" in e for e in payload["errors"])
    assert not (tmp_path / "out").exists()          # rejected before any file is written


def test_cli_usage_errors(tmp_path, capsys):
    code, _, err = run(["no-such-command"], capsys)
    assert code == 2 and json.loads(err)["error"] == "UsageError"
    cfg = write_cfg(tmp_path)
    code, _, err = run(["fit-score", cfg], capsys)
    assert code == 2 and "--potentials" in json.loads(err)["message"]
    code, _, err = run(["oracle", write_cfg(tmp_path, "data.oracle_points = 101\n")], capsys)
    assert code == 2 and "oracle cap" in json.loads(err)["message"]


def test_cli_sample_dimension_mismatch(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    run(["fit-score", cfg, "--unconditional"], capsys)
    (tmp_path / "cond2.csv").write_text("1.0,2.0\n")
    code, _, err = run(["sample", cfg, "--model", out / "checkpoints" / "score_uncond.bin",
                        "--conditions", tmp_path / "cond2.csv"], capsys)
    assert code == 2 and "dimension" in json.loads(err)["message"]


def test_cli_oracle_fixture_and_keypoints(tmp_path, capsys):
    (tmp_path / "p.csv").write_text("0\n1\n")
    (tmp_path / "q.csv").write_text("0\n1\n")
    cfg = write_cfg(tmp_path, f"data.source = csv\ndata.source_csv = {tmp_path / 'p.csv'}\n"
                              f"data.target = csv\ndata.target_csv = {tmp_path / 'q.csv'}\n")
    cfg.write_text(cfg.read_text().replace("ot.epsilon = 0.1", "ot.epsilon = 100"))
    assert run(["oracle", cfg], capsys)[0] == 0
    rows = (tmp_path / "out" / "metrics" / "oracle_plan.csv").read_text().splitlines()
    assert float(rows[1].split(",")[2]) == pytest.approx(0.2506, abs=1e-3)

    (tmp_path / "ps.csv").write_text("0\n10\n0.5\n9.5\n")
    (tmp_path / "qs.csv").write_text("100\n110\n100.5\n109.5\n")
    (tmp_path / "kp.csv").write_text("0,0\n1,1\n")
    semi = tmp_path / "semi.cfg"
    semi.write_text(TINY + f"output_dir = {tmp_path / 'semi'}\n"
                    + f"data.source = csv\ndata.source_csv = {tmp_path / 'ps.csv'}\n"
                    + f"data.target = csv\ndata.target_csv = {tmp_path / 'qs.csv'}\n"
                    + f"data.keypoints = {tmp_path / 'kp.csv'}\not.mode = semi_supervised\not.tau = 1.0\n")
    assert run(["fit-ot", semi], capsys)[0] == 0
    code, stdout, _ = run(["oracle", semi, "--potentials", tmp_path / "semi" / "checkpoints" / "potentials.bin"],
                          capsys)
    assert code == 0
    for name in ("oracle_plan.csv", "estimated_plan.csv"):
        entries = np.loadtxt(tmp_path / "semi" / "metrics" / name, delimiter=",", skiprows=1)
        P = np.zeros((4, 4))
        P[entries[:, 0].astype(int), entries[:, 1].astype(int)] = entries[:, 2]
        assert P[0, 1] == P[0, 2] == P[0, 3] == P[1, 0] == P[2, 0] == 0.0
