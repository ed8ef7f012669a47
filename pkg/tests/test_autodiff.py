import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmcvi import autodiff as ad
from hmcvi.models import Mlp, MlpSpec


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b))))


def test_square_value_and_grad():
    (g,) = ad.grad(lambda x: ad.mul(x, x), 3.0)
    assert ad.value(ad.mul(np.array(3.0), 3.0)) == 9.0
    assert g == 6.0


def test_softplus_at_zero():
    assert math.isclose(float(ad.softplus(np.array(0.0))), 0.693147, abs_tol=1e-6)
    (g,) = ad.grad(ad.softplus, 0.0)
    assert g == 0.5


def test_zero_weight_mlp_outputs_bias_path():
    net = Mlp(MlpSpec(3, (4,), 2, ("relu", "linear")), "n")
    params = {k: np.zeros_like(v) for k, v in net.init(np.random.default_rng(0)).items()}
    params["n.b1"] = np.array([0.25, -1.5])
    out = net(params, np.random.default_rng(1).standard_normal((5, 3)))
    assert np.array_equal(out, np.tile([0.25, -1.5], (5, 1)))


def test_log_and_sqrt_domain_errors():
    with pytest.raises(ad.DomainError):
        ad.log(np.array([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.sqrt(np.array(-1.0))


def test_relu_derivative_at_zero_is_zero():
    (g,) = ad.grad(lambda x: ad.sum(ad.relu(x)), np.array([0.0, 1.0, -1.0]))
    assert list(g) == [0.0, 1.0, 0.0]


UNARY = {
    "exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "softplus": ad.softplus,
    "neg": ad.neg, "square": ad.square, "relu": ad.relu,
    "log": lambda x: ad.log(ad.add(ad.mul(x, x), 0.5)),
    "sqrt": lambda x: ad.sqrt(ad.add(ad.mul(x, x), 0.5)),
}
BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul,
          "div": lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 0.5))}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    op = UNARY[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(50):
        x = rng.standard_normal(3)
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep away from the kink
        (g,) = ad.grad(lambda v: ad.sum(op(v)), x)
        fd = central_diff(lambda v: float(np.sum(ad.value(op(v)))), x)
        assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name):
    op = BINARY[name]
    rng = np.random.default_rng(7)
    for _ in range(50):
        a, b = rng.standard_normal(3), rng.standard_normal(3)
        ga, gb = ad.grad(lambda x, y: ad.sum(op(x, y)), a, b)
        assert rel_err(ga, central_diff(lambda x: float(np.sum(op(x, b))), a)) < 1e-4
        assert rel_err(gb, central_diff(lambda y: float(np.sum(op(a, y))), b)) < 1e-4


def test_matmul_dot_and_sum_match_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(50):
        w, x, y = rng.standard_normal((3, 2)), rng.standard_normal(3), rng.standard_normal(3)
        gw, gx = ad.grad(lambda w_, x_: ad.sum(ad.tanh(ad.matmul(x_, w_))), w, x)
        assert rel_err(gw, central_diff(lambda w_: float(np.sum(np.tanh(x @ w_))), w)) < 1e-4
        assert rel_err(gx, central_diff(lambda x_: float(np.sum(np.tanh(x_ @ w))), x)) < 1e-4
        (gd,) = ad.grad(lambda a: ad.dot(a, y), x)
        assert np.allclose(gd, y)


def test_row_broadcasting_sums_gradients():
    x = np.arange(6.0).reshape(3, 2)
    (gb,) = ad.grad(lambda b: ad.sum(ad.mul(ad.add(x, b), 2.0)), np.zeros(2))
    assert np.array_equal(gb, [6.0, 6.0])


def test_mlp_2x200x200_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = Mlp(MlpSpec(2, (200, 200), 3, ("relu", "softplus", "linear")), "m")
    params = net.init(rng, std=0.3)
    x = rng.standard_normal((4, 2))
    names = net.param_names()

    def f(*vals):
        return ad.sum(ad.tanh(net(dict(zip(names, vals)), x)))

    grads = ad.grad(f, *[params[n] for n in names])
    worst = 0.0
    for n, g in zip(names, grads):
        for flat in rng.choice(params[n].size, size=min(5, params[n].size), replace=False):
            idx = np.unravel_index(flat, params[n].shape)
            vals = []
            for s in (1, -1):
                p = dict(params)
                a = p[n].copy()
                a[idx] += s * 1e-5
                p[n] = a
                vals.append(float(ad.value(f(*[p[k] for k in names]))))
            fd = (vals[0] - vals[1]) / 2e-5
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), 1e-6))
    assert worst < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_gradient_of_sum_is_sum_of_gradients(a, b):
    x = np.array(a)
    c = np.array(b)
    f1 = lambda v: ad.sum(ad.mul(ad.tanh(v), c))  # noqa: E731
    f2 = lambda v: ad.sum(ad.softplus(ad.mul(v, v)))  # noqa: E731
    (g12,) = ad.grad(lambda v: ad.add(f1(v), f2(v)), x)
    (g1,) = ad.grad(f1, x)
    (g2,) = ad.grad(f2, x)
    assert np.allclose(g12, g1 + g2, rtol=1e-12, atol=1e-12)


def test_reevaluation_is_bit_identical():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((4, 3))
    x = rng.standard_normal((2, 4))
    f = lambda w_: ad.sum(ad.sigmoid(ad.matmul(x, w_)))  # noqa: E731
    a, b = ad.grad(f, w)[0], ad.grad(f, w)[0]
    assert np.array_equal(a, b)


def test_adam_zero_gradient_decays_moments():
    store = ad.ParamStore({"w": np.array([1.0, 2.0])})
    store.m["w"] = np.array([0.5, 0.5])
    store.v["w"] = np.array([0.2, 0.2])
    store.adam_step({"w": np.zeros(2)}, 0.1)
    assert np.allclose(store.m["w"], [0.45, 0.45])
    assert np.allclose(store.v["w"], [0.2 * 0.999, 0.2 * 0.999])


def test_adam_zero_gradient_from_rest_is_noop():
    store = ad.ParamStore({"w": np.array([1.0, 2.0])})
    store.adam_step({"w": np.zeros(2)}, 0.1)
    assert np.array_equal(store["w"], [1.0, 2.0])
    assert store.step == 1


@pytest.mark.parametrize("g", [1e-6, 3.0, -250.0])
def test_adam_first_step_moves_by_lr(g):
    store = ad.ParamStore({"w": np.array(0.0)})
    store.adam_step({"w": np.array(g)}, 0.01)
    assert math.isclose(abs(float(store["w"])), 0.01, rel_tol=1e-2)
    assert np.sign(store["w"]) == -np.sign(g)


def test_adam_monotone_on_quadratic():
    store = ad.ParamStore({"w": np.array(3.0)})
    losses = []
    for _ in range(100):
        w = store["w"]
        losses.append(float(w * w))
        store.adam_step({"w": 2 * w}, 1e-2)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_rejects_non_finite_gradient():
    store = ad.ParamStore({"w": np.array([1.0])})
    with pytest.raises(ad.NonFiniteGradient):
        store.adam_step({"w": np.array([np.nan])}, 0.1)
    assert store.step == 0 and store["w"][0] == 1.0


def test_adam_rejects_shape_mismatch():
    store = ad.ParamStore({"w": np.array([1.0])})
    with pytest.raises(ValueError):
        store.adam_step({"w": np.array([1.0, 2.0])}, 0.1)


def test_clip_by_global_norm():
    g = {"a": np.array([30.0, 40.0])}
    out = ad.clip_by_global_norm(g, 10.0)
    assert math.isclose(ad.global_norm(out), 10.0)
