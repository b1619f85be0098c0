import numpy as np
import pytest

from helpers import fd_check, fd_instance, random_state, small_camera
from splatcodec import autodiff as ad
from splatcodec import entropy, optimizer, renderer


def grad_of(fn, *xs):
    with ad.GradientTape() as tape:
        vs = [tape.variable(x) for x in xs]
        out = fn(*vs)
        return out, tape.gradient(ad.sum_(out), vs)


def numeric(fn, xs, h=1e-6):
    out = []
    for k, x in enumerate(xs):
        g = np.zeros_like(x, dtype=np.float64)
        for i in range(x.size):
            args = [np.array(v, dtype=np.float64) for v in xs]
            args[k].flat[i] += h
            up = np.sum(fn(*args))
            args[k].flat[i] -= 2 * h
            g.flat[i] = (up - np.sum(fn(*args))) / (2 * h)
        out.append(g)
    return out


def test_square_gradient():
    with ad.GradientTape() as tape:
        x = tape.variable(3.0)
        y = x * x
    assert float(tape.gradient(y, [x])[0]) == 6.0


def test_no_tape_returns_plain_arrays():
    out = ad.exp(np.array([0.0, 1.0]))
    assert isinstance(out, np.ndarray)


def test_unreached_source_gets_zero():
    with ad.GradientTape() as tape:
        x, y = tape.variable([1.0, 2.0]), tape.variable(5.0)
        z = ad.sum_(x * x)
    gx, gy = tape.gradient(z, [x, y])
    assert gx.tolist() == [2.0, 4.0] and gy == 0.0


def test_shared_node_accumulates():
    with ad.GradientTape() as tape:
        x = tape.variable(2.0)
        y = x * 3.0
        z = y * y + y
    assert float(tape.gradient(z, [x])[0]) == pytest.approx(2 * 6.0 * 3 + 3)


UNARY = {
    "exp": ad.exp, "log": ad.log, "sqrt": ad.sqrt, "sigmoid": ad.sigmoid, "relu": ad.relu,
    "softplus": ad.softplus, "abs": ad.abs_, "ndtr": ad.ndtr, "power": lambda a: ad.power(a, 2.5),
    "neg": ad.neg, "maximum": lambda a: ad.maximum(a, 0.7), "clip": lambda a: ad.clip(a, 0.4, 1.6),
    "mean": lambda a: ad.mean(a, axis=0), "reshape": lambda a: ad.reshape(a, (6, 2)),
    "T": lambda a: a.T, "getitem": lambda a: a[np.array([0, 0, 2]), 1:],
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    x = np.random.default_rng(0).uniform(0.1, 2.0, size=(3, 4))
    x[np.abs(x - 0.7) < 1e-3] += 0.01  # keep kinks away from the stencil
    fn = UNARY[name]
    _, (g,) = grad_of(fn, x)
    plain = lambda v: ad.value(fn(v))  # noqa: E731
    assert np.allclose(g, numeric(plain, [x])[0], atol=1e-6)


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div, "matmul": ad.matmul,
    "concatenate": lambda a, b: ad.concatenate([a, b], axis=0),
    "stack": lambda a, b: ad.stack([a, b], axis=0) * np.arange(2.0)[:, None, None],
    "where": lambda a, b: ad.where(np.eye(3, 4, dtype=bool), a, b),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name):
    rng = np.random.default_rng(1)
    a = rng.uniform(0.5, 2, size=(3, 4))
    b = rng.uniform(0.5, 2, size=(4, 4) if name == "matmul" else (3, 4))
    if name == "concatenate":
        b = rng.uniform(size=(2, 4))
    fn = BINARY[name]
    _, grads = grad_of(fn, a, b)
    weights = rng.normal(size=np.shape(ad.value(fn(a, b))))
    _, wgrads = grad_of(lambda x, y: fn(x, y) * weights, a, b)
    ref = numeric(lambda x, y: ad.value(fn(x, y)) * weights, [a, b])
    for g, r in zip(wgrads, ref):
        assert np.allclose(g, r, atol=1e-6)


def test_broadcasting_is_undone():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    _, (ga, gb) = grad_of(ad.mul, a, b)
    assert gb.shape == (4,) and np.allclose(gb, a.sum(axis=0))


def test_color_gradient_on_single_splat():
    cam = small_camera()
    target = np.random.default_rng(3).uniform(size=(16, 16, 3))
    mean, cov = np.zeros((1, 3)), np.eye(3)[None] * 0.05
    opacity = np.array([0.8])
    color = np.array([[0.3, 0.6, 0.2]])

    def d(c):
        return float(renderer.distortion(renderer.render_arrays(mean, cov, opacity, c, cam), target))

    with ad.GradientTape() as tape:
        c = tape.variable(color)
        out = renderer.distortion(renderer.render_arrays(mean, cov, opacity, c, cam), target)
        g = tape.gradient(out, [c])[0]
    h = 1e-5
    for i in range(3):
        up, dn = color.copy(), color.copy()
        up[0, i] += h
        dn[0, i] -= h
        assert g[0, i] == pytest.approx((d(up) - d(dn)) / (2 * h), rel=1e-4, abs=1e-8)


def test_rate_gradient_wrt_s_cov_is_nonzero():
    st = random_state(n=2, k=2, seed=1)
    p = optimizer.state_params(st)
    cam, target = small_camera(), np.zeros((16, 16, 3))
    assert np.any(entropy.cov_params(st.scene.cov_scale, st.scene.cov_rotation) / st.q.s_cov != 0)
    # lambda large so that the rate term dominates the s_cov gradient
    _, grads = optimizer.value_and_grad(p, st.q, cam, target, 1.0)
    g = float(grads["q.log_s_cov"][()])

    def rate(v):
        q = dict(p, **{"q.log_s_cov": np.array(v)})
        return float(optimizer.loss_terms(q, st.q, cam, target, 1.0).L)

    v0, h = float(p["q.log_s_cov"]), 1e-5
    assert g != 0.0
    assert g == pytest.approx((rate(v0 + h) - rate(v0 - h)) / (2 * h), rel=1e-3)


def test_non_finite_gradient_names_group():
    with ad.GradientTape() as tape:
        x = tape.variable(np.array([0.0]))
        y = ad.sum_(ad.sqrt(x))
        with pytest.raises(FloatingPointError, match="scene.location"), np.errstate(divide="ignore"):
            optimizer.backward(tape, y, {"scene.location": x})


@pytest.mark.slow
def test_full_loss_gradients_match_finite_differences():
    report = fd_check(*fd_instance(seed=1), per_array=6)
    assert len(report) == 18
    for group, (checked, fails, _) in report.items():
        assert checked > 0 and not fails, (group, fails[:3])
