"""Conditional score network s_theta(y; x, t) for low-dimensional data.

Trunk:      FC(D,H) -> SiLU -> FC(H,H) -> SiLU -> FC(H,D)
Time:       GaussianFourierProjection(F) -> FC(F,H) -> SiLU -> FC(H,H)
Condition:  FC(Dx,H) -> SiLU -> FC(H,H) -> SiLU -> FC(H,H)

The time and condition embeddings are summed and added to the
pre-activations of both trunk SiLUs.  With ``scale_by_sigma`` the trunk
output is divided by sigma_t, so the network only has to model the
O(1) quantity sigma_t * score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import AdamState, Layout, adam_step, dsilu, silu
from .sde import SdeSpec

__all__ = ["ScoreArch", "ScoreModel", "AdamState", "adam_step"]


@dataclass(frozen=True)
class ScoreArch:
    dim: int = 1
    cond_dim: int | None = None
    hidden: int = 512
    fourier_dim: int = 256
    fourier_scale: float = 16.0
    conditional: bool = True
    scale_by_sigma: bool = True
    zero_final: bool = False
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


class ScoreModel:
    def __init__(self, arch: ScoreArch, spec: SdeSpec, lr=1e-4, ema_decay=0.999):
        if arch.fourier_dim % 2:
            raise ValueError("fourier_dim must be even")
        self.arch = arch
        self.spec = spec
        D, H = arch.dim, arch.hidden
        Dx = arch.cond_dim or arch.dim
        lay = Layout()
        self.trunk = [lay.linear(D, H), lay.linear(H, H), lay.linear(H, D)]
        self.temb = [lay.linear(arch.fourier_dim, H), lay.linear(H, H)]
        self.cemb = [lay.linear(Dx, H), lay.linear(H, H), lay.linear(H, H)] if arch.conditional else []
        self.n_params = lay.size

        rng = np.random.default_rng(arch.seed)
        self.freqs = arch.fourier_scale * rng.standard_normal(arch.fourier_dim // 2)
        self.theta = np.zeros(lay.size)
        for layer in self.temb + self.cemb + self.trunk[:2]:
            layer.init(self.theta, rng)
        self.trunk[2].init(self.theta, rng, zero=arch.zero_final)
        self.opt = AdamState.create(self.theta, lr=lr, ema=True, ema_decay=ema_decay)

    @property
    def conditional(self):
        return self.arch.conditional

    @property
    def ema(self):
        return self.opt.ema

    # embeddings ---------------------------------------------------------------

    def _fourier(self, t):
        proj = 2.0 * np.pi * t[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)

    def _time_embed(self, theta, t):
        f = self._fourier(t)
        a = self.temb[0].forward(theta, f)
        return self.temb[1].forward(theta, silu(a)), (f, a)

    def embed_condition(self, theta, x):
        c1 = self.cemb[0].forward(theta, x)
        c2 = self.cemb[1].forward(theta, silu(c1))
        return self.cemb[2].forward(theta, silu(c2)), (x, c1, c2)

    # forward / backward -------------------------------------------------------

    def forward(self, theta, y, t, x=None, cond_emb=None, keep=False):
        """Score estimate for a batch y (N, D) at times t (scalar or (N,))."""
        y = np.asarray(y, dtype=float)
        if self.conditional and x is None and cond_emb is None:
            raise ValueError("conditional score model needs a condition x")
        scalar_t = np.ndim(t) == 0
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        e, t_cache = self._time_embed(theta, t_arr)
        c_cache = None
        if self.conditional:
            if cond_emb is None:
                cond_emb, c_cache = self.embed_condition(theta, np.asarray(x, dtype=float).reshape(len(y), -1))
            e = e + cond_emb
        z1 = self.trunk[0].forward(theta, y) + e
        h1 = silu(z1)
        z2 = self.trunk[1].forward(theta, h1) + e
        h2 = silu(z2)
        out = self.trunk[2].forward(theta, h2)
        sig = None
        if self.arch.scale_by_sigma:
            sig = np.asarray(self.spec.sigma(t_arr))
            out = out / (sig if scalar_t else sig[:, None])
        if not keep:
            return out
        return out, (y, t_arr, t_cache, c_cache, z1, h1, z2, h2, sig)

    def backward(self, theta, cache, dout, grad):
        """Accumulate d(loss)/d(theta) into ``grad`` given d(loss)/d(output)."""
        y, t_arr, (f, ta), c_cache, z1, h1, z2, h2, sig = cache
        if sig is not None:
            dout = dout / np.reshape(sig, (-1, 1))
        dh2 = self.trunk[2].backward(theta, h2, dout, grad)
        dz2 = dh2 * dsilu(z2)
        dh1 = self.trunk[1].backward(theta, h1, dz2, grad)
        dz1 = dh1 * dsilu(z1)
        self.trunk[0].backward(theta, y, dz1, grad)
        de = dz1 + dz2
        if len(t_arr) == 1 and len(de) > 1:
            de_t = de.sum(axis=0, keepdims=True)
        else:
            de_t = de
        dta = self.temb[1].backward(theta, silu(ta), de_t, grad) * dsilu(ta)
        self.temb[0].backward(theta, f, dta, grad)
        if c_cache is not None:
            x, c1, c2 = c_cache
            dc2 = self.cemb[2].backward(theta, silu(c2), de, grad) * dsilu(c2)
            dc1 = self.cemb[1].backward(theta, silu(c1), dc2, grad) * dsilu(c1)
            self.cemb[0].backward(theta, x, dc1, grad)
        return grad

    def __call__(self, y, t, x=None, use_ema=False):
        theta = self.ema if use_ema else self.theta
        return self.forward(theta, y, t, x)

    def score_fn(self, x=None, use_ema=True):
        """Closure (y, t) -> score with the condition embedding computed once."""
        theta = self.ema if use_ema else self.theta
        if not self.conditional:
            return lambda y, t: self.forward(theta, y, t)
        if x is None:
            raise ValueError("conditional score model needs a condition x")
        emb = self.embed_condition(theta, np.asarray(x, dtype=float).reshape(-1, self.arch.cond_dim or self.arch.dim))[0]

        def fn(y, t):
            return self.forward(theta, y, t, cond_emb=emb)
        return fn

    def step(self, grad):
        adam_step(self.opt, self.theta, grad)

    def copy(self):
        other = ScoreModel.__new__(ScoreModel)
        other.__dict__.update(self.__dict__)
        other.theta = self.theta.copy()
        other.opt = AdamState(m=self.opt.m.copy(), v=self.opt.v.copy(),
                              ema=None if self.opt.ema is None else self.opt.ema.copy(),
                              step=self.opt.step, lr=self.opt.lr, ema_decay=self.opt.ema_decay)
        return other
