"""Keypoints override geometry.

Two source clusters (upper and lower left) and two target clusters (upper and
lower right).  Plain OT would send upper to upper.  Annotating one keypoint
pair per cluster, crosswise, makes the guided plan (and the score model
trained on it) send upper to lower instead.

Run:  python3 demos/03_semi_supervised.py    (about half a minute)
"""

import numpy as np

from otcs.cdsm import CdsmTrainConfig, build_h_table, train_conditional
from otcs.oracle import solve_exact
from otcs.ot_core import EmpiricalMeasure, KeypointSet, OtProblem
from otcs.potentials import PotentialTrainConfig, train_potentials
from otcs.samplers import SamplerConfig, reverse_em
from otcs.score_net import ScoreArch, ScoreModel
from otcs.sde import SdeSpec

n = 20
rng = np.random.default_rng(0)
S = np.array([[-4.0, 2.0], [-4.0, -2.0]])
T = np.array([[4.0, 2.0], [4.0, -2.0]])
P = np.concatenate([S[c] + 0.5 * rng.standard_normal((n, 2)) for c in range(2)])
Q = np.concatenate([T[c] + 0.5 * rng.standard_normal((n, 2)) for c in range(2)])
P[[0, n]], Q[[0, n]] = S, T
p, q = EmpiricalMeasure(P), EmpiricalMeasure(Q)


def cross_mass(plan):
    E = plan.entries
    return E[:n, n:].sum() + E[n:, :n].sum()


plain = solve_exact(OtProblem(epsilon=1e-2), p, q)
kp = KeypointSet.from_indices(p, q, np.array([[0, n], [n, 0]]))
guided = OtProblem(mode="semi_supervised", epsilon=1e-2, tau=1.0, keypoints=kp)
print(f"mass sent across clusters: plain OT {cross_mass(plain):.3f}, "
      f"keypoint-guided {cross_mass(solve_exact(guided, p, q)):.3f}")

pp = train_potentials(guided, p, q, PotentialTrainConfig(learning_rate=1e-3, n_iter=3000, hidden=(64,),
                                                         full_batch=True, seed=0))
spec = SdeSpec(kind="ve")
model = ScoreModel(ScoreArch(dim=2, hidden=64, fourier_dim=16, fourier_scale=4.0, seed=0), spec)
model, _ = train_conditional(model, p, q, CdsmTrainConfig(n_iter=3000, batch_size=64, learning_rate=1e-3),
                             table=build_h_table(pp, p, q))

for c, name in ((0, "upper"), (1, "lower")):
    X = np.repeat(P[c * n + 1:(c + 1) * n], 20, axis=0)
    Y = reverse_em(model, spec, SamplerConfig(n_steps=500), np.random.default_rng(c), x=X)
    upper = np.mean(Y[:, 1] > 0)
    print(f"{name} sources -> {upper:.0%} upper targets, {1 - upper:.0%} lower targets")
