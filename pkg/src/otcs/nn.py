"""Small fully-connected networks with hand-written reverse-mode gradients.

All parameters of a model live in one flat float64 vector.  Layers hold
offsets into that vector, so a network is evaluated as ``f(theta, x)`` and
finite-difference checks can perturb ``theta`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# activations ---------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z):
    return z * _sigmoid(z)


def dsilu(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def dtanh(z):
    return 1.0 - np.tanh(z) ** 2


# (f, df) where df takes the pre-activation z and the output h = f(z)
ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, h: 1.0 - h * h),
    "silu": (silu, lambda z, h: dsilu(z)),
    "identity": (lambda z: z, lambda z, h: np.ones_like(z)),
}


# layers ---------------------------------------------------------------------

@dataclass(frozen=True)
class Linear:
    offset: int
    n_in: int
    n_out: int

    @property
    def size(self):
        return self.n_in * self.n_out + self.n_out

    def weights(self, theta):
        w_end = self.offset + self.n_in * self.n_out
        W = theta[self.offset:w_end].reshape(self.n_in, self.n_out)
        b = theta[w_end:w_end + self.n_out]
        return W, b

    def init(self, theta, rng, zero=False):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and bias."""
        W, b = self.weights(theta)
        if zero:
            W[...] = 0.0
            b[...] = 0.0
            return
        bound = np.sqrt(1.0 / self.n_in)
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)

    def forward(self, theta, x):
        W, b = self.weights(theta)
        return x @ W + b

    def backward(self, theta, x, dout, grad):
        """Accumulate parameter gradients into ``grad``; return d/dx."""
        W, _ = self.weights(theta)
        gW, gb = self.weights(grad)
        gW += x.T @ dout
        gb += dout.sum(axis=0)
        return dout @ W.T


class Layout:
    """Allocates consecutive parameter blocks in a flat vector."""

    def __init__(self):
        self.size = 0
        self.layers: list[Linear] = []

    def linear(self, n_in, n_out):
        layer = Linear(self.size, n_in, n_out)
        self.size += layer.size
        self.layers.append(layer)
        return layer


@dataclass
class MLP:
    """Chain of Linear layers with an activation between consecutive layers.

    ``sizes=[1, 1024, 1]`` with ``activation="tanh"`` is
    FC(1,1024) -> Tanh -> FC(1024,1).
    """

    sizes: list[int]
    activation: str = "tanh"
    layout: Layout = field(default=None, repr=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.layout is None:
            self.layout = Layout()
        self.layers = [self.layout.linear(a, b)
                       for a, b in zip(self.sizes[:-1], self.sizes[1:])]

    @property
    def n_params(self):
        return sum(layer.size for layer in self.layers)

    def init(self, theta, rng, zero_final=False):
        for k, layer in enumerate(self.layers):
            layer.init(theta, rng, zero=zero_final and k == len(self.layers) - 1)

    def forward(self, theta, x):
        act, _ = ACTIVATIONS[self.activation]
        cache = []
        h = x
        for k, layer in enumerate(self.layers):
            z = layer.forward(theta, h)
            cache.append((h, z))
            h = act(z) if k < len(self.layers) - 1 else z
        cache.append((h, None))
        return h, cache

    def backward(self, theta, cache, dout, grad):
        _, dact = ACTIVATIONS[self.activation]
        d = dout
        for k in range(len(self.layers) - 1, -1, -1):
            h_in, z = cache[k]
            if k < len(self.layers) - 1:
                d = d * dact(z, cache[k + 1][0])
            d = self.layers[k].backward(theta, h_in, d, grad)
        return d


# optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments, step count and an EMA shadow of the parameters."""

    m: np.ndarray
    v: np.ndarray
    ema: np.ndarray | None = None
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999

    @classmethod
    def create(cls, theta, lr=1e-4, ema=True, ema_decay=0.999):
        return cls(m=np.zeros_like(theta), v=np.zeros_like(theta),
                   ema=theta.copy() if ema else None, lr=lr, ema_decay=ema_decay)


def adam_step(state: AdamState, theta, grad):
    """One in-place Adam descent step on ``theta``; also updates the EMA.

    Returns ``(theta, state)`` for convenience.
    """
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient at optimizer step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    theta -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.ema is not None:
        state.ema *= state.ema_decay
        state.ema += (1.0 - state.ema_decay) * theta
    return theta, state
