import numpy as np
import pytest

from otcs.nn import MLP, AdamState, Layout, adam_step
from otcs.score_net import ScoreArch, ScoreModel
from otcs.sde import SdeSpec

SPEC = SdeSpec(kind="ve")


def small_model(conditional=True, dim=2, scale_by_sigma=True, zero_final=False, seed=0):
    arch = ScoreArch(dim=dim, hidden=24, fourier_dim=8, fourier_scale=1.0, conditional=conditional,
                     scale_by_sigma=scale_by_sigma, zero_final=zero_final, seed=seed)
    return ScoreModel(arch, SPEC)


def batch(rng, n=5, dim=2):
    return rng.normal(size=(n, dim)), rng.uniform(0.05, 1.0, n), rng.normal(size=(n, dim))


def test_parameter_count_of_toy_architecture():
    m = ScoreModel(ScoreArch(dim=1, hidden=512, fourier_dim=256), SPEC)
    trunk = (1 * 512 + 512) + (512 * 512 + 512) + (512 * 1 + 1)
    temb = (256 * 512 + 512) + (512 * 512 + 512)
    cemb = (1 * 512 + 512) + 2 * (512 * 512 + 512)
    assert m.n_params == trunk + temb + cemb
    assert ScoreModel(ScoreArch(dim=1, hidden=512, conditional=False), SPEC).n_params == trunk + temb


def test_zero_final_layer_gives_zero_output():
    m = small_model(zero_final=True)
    y, t, x = batch(np.random.default_rng(0))
    assert np.all(m(y, t, x) == 0)


def test_output_shape_determinism_and_condition_required():
    m = small_model()
    y, t, x = batch(np.random.default_rng(1))
    out = m(y, t, x)
    assert out.shape == y.shape and np.all(np.isfinite(out))
    assert np.array_equal(out, m(y, t, x))
    with pytest.raises(ValueError):
        m(y, t)
    # the condition changes the output
    assert not np.allclose(out, m(y, t, x + 1.0))


def test_scalar_time_broadcasts():
    m = small_model()
    y, _, x = batch(np.random.default_rng(2))
    assert np.allclose(m(y, 0.3, x), m(y, np.full(len(y), 0.3), x))


def test_score_fn_matches_direct_call():
    m = small_model()
    y, t, x = batch(np.random.default_rng(3))
    fn = m.score_fn(x, use_ema=False)
    assert np.allclose(fn(y, t), m(y, t, x), rtol=0, atol=1e-14)


@pytest.mark.parametrize("conditional", [True, False])
@pytest.mark.parametrize("scalar_t", [False, True])
def test_output_jvp_matches_finite_differences(conditional, scalar_t):
    rng = np.random.default_rng(4)
    m = small_model(conditional=conditional)
    y, t, x = batch(rng)
    if scalar_t:
        t = 0.4
    x = x if conditional else None
    r = rng.normal(size=y.shape)                 # random output cotangent
    out, cache = m.forward(m.theta, y, t, x, keep=True)
    grad = m.backward(m.theta, cache, r, np.zeros_like(m.theta))
    h = 1e-6
    for _ in range(8):
        d = rng.normal(size=m.n_params)
        fd = (np.sum(r * m.forward(m.theta + h * d, y, t, x))
              - np.sum(r * m.forward(m.theta - h * d, y, t, x))) / (2 * h)
        assert abs(fd - grad @ d) <= 1e-4 * max(abs(fd), 1e-8)


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    for act in ("tanh", "silu"):
        lay = Layout()
        net = MLP([3, 7, 5, 2], act, lay)
        theta = np.zeros(lay.size)
        net.init(theta, rng)
        X = rng.normal(size=(4, 3))
        dout = rng.normal(size=(4, 2))
        _, cache = net.forward(theta, X)
        grad = np.zeros_like(theta)
        dX = net.backward(theta, cache, dout, grad)
        h = 1e-6
        for k in rng.choice(lay.size, 10, replace=False):
            e = np.zeros_like(theta)
            e[k] = h
            fd = (np.sum(dout * net.forward(theta + e, X)[0]) - np.sum(dout * net.forward(theta - e, X)[0])) / (2 * h)
            assert abs(fd - grad[k]) <= 1e-6 * max(1.0, abs(fd))
        e = np.zeros_like(X)
        e[1, 2] = h
        fd = (np.sum(dout * net.forward(theta, X + e)[0]) - np.sum(dout * net.forward(theta, X - e)[0])) / (2 * h)
        assert dX[1, 2] == pytest.approx(fd, rel=1e-6)


def test_unknown_activation():
    with pytest.raises(ValueError):
        MLP([1, 2, 1], "relu6")


# optimizer ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_theta():
    theta = np.array([1.0, -2.0])
    st = AdamState.create(theta, lr=0.1)
    adam_step(st, theta, np.zeros(2))
    assert theta.tolist() == [1.0, -2.0] and st.step == 1


def test_adam_first_step_moves_by_lr_along_sign():
    theta = np.array([1.0, -2.0, 0.5])
    theta0 = theta.copy()
    st = AdamState.create(theta, lr=1e-3)
    g = np.array([3.0, -0.2, 1e-3])
    adam_step(st, theta, g)
    # step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    assert np.allclose(theta0 - theta, 1e-3 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
    assert np.allclose(theta0 - theta, 1e-3 * np.sign(g), rtol=1e-4)


def test_ema_after_one_step():
    theta = np.array([1.0, 2.0])
    theta0 = theta.copy()
    st = AdamState.create(theta, lr=0.01)
    adam_step(st, theta, np.array([1.0, -1.0]))
    assert np.allclose(st.ema, 0.999 * theta0 + 0.001 * theta, rtol=0, atol=1e-15)


def test_ema_converges_under_frozen_parameters():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=50)
    st = AdamState.create(theta, lr=1e-3)
    st.ema[...] = 0.0                 # start far from theta
    for _ in range(10_000):
        adam_step(st, theta, np.zeros_like(theta))
    assert np.max(np.abs(st.ema - theta)) <= 1e-4 * np.max(np.abs(theta))


def test_adam_errors():
    theta = np.zeros(3)
    st = AdamState.create(theta)
    with pytest.raises(FloatingPointError):
        adam_step(st, theta, np.array([0.0, np.inf, 0.0]))
    with pytest.raises(ValueError):
        adam_step(st, theta, np.zeros(2))
    assert st.step == 0


def test_copy_is_independent():
    m = small_model()
    c = m.copy()
    c.step(np.ones_like(c.theta))
    assert not np.array_equal(c.theta, m.theta)
    assert m.opt.step == 0 and c.opt.step == 1
