import numpy as np
import pytest

from distinct3d import engine
from distinct3d.engine import (
    ModelParameters,
    Var,
    adam_step,
    affine,
    backward,
    concat,
    gather_rows,
    glorot_uniform,
    gradient_check,
    group_max,
    harvest_grads,
    interpolate_rows,
    l2_normalize,
    leaf,
    max_over_channels,
    mean_over_channels,
    mul,
    primitive_forward_backward,
    relu,
    row_max_pool,
    row_mean_pool,
    sigmoid,
    softmax_with_temperature,
)
from distinct3d.seeds import derive_rng


def fd_input_grad(fn, x, seed, eps=1e-6):
    """Central-difference gradient of sum(seed * fn(x)) w.r.t. x."""
    g = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        xp = x.astype(np.float64).copy()
        xp.flat[i] += eps
        up = float(np.sum(seed * fn(xp)))
        xp.flat[i] -= 2 * eps
        dn = float(np.sum(seed * fn(xp)))
        g.flat[i] = (up - dn) / (2 * eps)
    return g


def check_primitive(build, x, rng, atol=1e-5):
    """build(Var) -> Var; compares backward against finite differences."""
    x = x.astype(np.float64)
    v = leaf(x)
    out = build(v)
    seed = rng.normal(size=out.value.shape)
    backward(out, seed)
    num = fd_input_grad(lambda a: build(leaf(a)).value, x, seed)
    np.testing.assert_allclose(v.grad, num, atol=atol, rtol=1e-4)


def test_l2_normalize_value():
    out = l2_normalize(leaf(np.array([3.0, 4.0])))
    np.testing.assert_allclose(out.value, [0.6, 0.8], atol=1e-9)


def test_l2_normalize_zero_raises():
    with pytest.raises(ValueError):
        l2_normalize(leaf(np.zeros(4)))


def test_l2_normalize_gradient_is_tangent():
    rng = derive_rng(1, "l2")
    v = leaf(rng.normal(size=8))
    out = l2_normalize(v)
    backward(out, rng.normal(size=8))
    assert abs(np.dot(v.grad, out.value)) < 1e-9 * (
        1 + np.linalg.norm(v.grad))


def test_softmax_value():
    out = softmax_with_temperature(leaf(np.array([1.0, 0.0])), tau=1.0)
    np.testing.assert_allclose(out.value, [0.731059, 0.268941], atol=1e-4)
    np.testing.assert_allclose(out.value.sum(), 1.0, atol=1e-9)


def test_softmax_temperature_sharpens():
    logits = np.array([1.0, 0.0, -0.5])
    soft = softmax_with_temperature(leaf(logits), tau=1.0).value
    sharp = softmax_with_temperature(leaf(logits), tau=0.07).value
    assert sharp.max() > soft.max()
    with pytest.raises(ValueError):
        softmax_with_temperature(leaf(logits), tau=0.0)


def test_primitive_gradients_against_fd():
    rng = derive_rng(5, "prim")
    x = rng.normal(size=(6, 5)) + 0.05  # nudge off exact relu kinks
    check_primitive(relu, x, rng)
    check_primitive(sigmoid, x, rng)
    check_primitive(row_mean_pool, x, rng)
    check_primitive(row_max_pool, x, rng)
    check_primitive(mean_over_channels, x, rng)
    check_primitive(max_over_channels, x, rng)
    check_primitive(lambda v: l2_normalize(row_mean_pool(v)), x, rng)
    check_primitive(
        lambda v: softmax_with_temperature(row_mean_pool(v), tau=0.5),
        x, rng)
    idx = np.array([0, 2, 2, 5, 1])
    check_primitive(lambda v: gather_rows(v, idx), x, rng)
    check_primitive(lambda v: group_max(v, 3, 2), x, rng)
    w = rng.uniform(0.1, 1.0, size=(4, 3))
    w /= w.sum(axis=1, keepdims=True)
    nbr = np.array([[0, 1, 2], [3, 4, 5], [0, 5, 2], [1, 1, 3]])
    check_primitive(lambda v: interpolate_rows(v, nbr, w), x, rng)


def test_affine_gradients():
    rng = derive_rng(9, "aff")
    xv = rng.normal(size=(7, 4))
    wv = rng.normal(size=(4, 3))
    bv = rng.normal(size=3)
    x, w, b = leaf(xv), leaf(wv), leaf(bv)
    out = affine(x, w, b)
    seed = rng.normal(size=out.value.shape)
    backward(out, seed)
    np.testing.assert_allclose(x.grad, seed @ wv.T, atol=1e-9)
    np.testing.assert_allclose(w.grad, xv.T @ seed, atol=1e-9)
    np.testing.assert_allclose(b.grad, seed.sum(axis=0), atol=1e-9)


def test_affine_shape_mismatch():
    with pytest.raises(ValueError):
        affine(leaf(np.zeros((2, 3))), leaf(np.zeros((4, 5))),
               leaf(np.zeros(5)))


def test_concat_and_mul_backward():
    rng = derive_rng(13, "cat")
    a, b = leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=(3, 4)))
    out = concat([a, b], axis=1)
    seed = rng.normal(size=(3, 6))
    backward(out, seed)
    np.testing.assert_allclose(a.grad, seed[:, :2])
    np.testing.assert_allclose(b.grad, seed[:, 2:])
    c, d = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 1)))
    out2 = mul(c, d)
    seed2 = rng.normal(size=(3, 4))
    backward(out2, seed2)
    np.testing.assert_allclose(c.grad, seed2 * d.value)
    np.testing.assert_allclose(d.grad,
                               (seed2 * c.value).sum(axis=1, keepdims=True))


def test_backward_accumulates_across_shared_leaves():
    x = leaf(np.array([[1.0, 2.0]]))
    y1 = row_mean_pool(x)
    y2 = row_mean_pool(x)
    backward(y1, np.ones(2))
    backward(y2, np.ones(2))
    np.testing.assert_allclose(x.grad, [[2.0, 2.0]])


def test_backward_seed_shape_checked():
    x = leaf(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        backward(row_mean_pool(x), np.ones(3))


def test_dispatcher_known_and_unknown():
    out = primitive_forward_backward("relu", leaf(np.array([[-1.0, 2.0]])))
    np.testing.assert_allclose(out.value, [[0.0, 2.0]])
    out = primitive_forward_backward(
        "softmax-with-temperature", leaf(np.array([0.0, 0.0])), tau=0.07)
    np.testing.assert_allclose(out.value, [0.5, 0.5])
    with pytest.raises(ValueError):
        primitive_forward_backward("conv", leaf(np.zeros(2)))


def test_adam_first_step():
    p = ModelParameters()
    p.add("w", np.array([1.0], dtype=np.float32))
    adam_step(p, {"w": np.array([1.0])}, lr=0.1)
    assert p.step_count == 1
    # bias correction makes the first step lr * g/(|g| + eps) ~ lr
    np.testing.assert_allclose(p.values["w"], [0.9], atol=1e-6)


def test_adam_rejects_nonfinite_and_unknown():
    p = ModelParameters()
    p.add("w", np.zeros(2, dtype=np.float32))
    with pytest.raises(FloatingPointError):
        adam_step(p, {"w": np.array([np.nan, 0.0])})
    with pytest.raises(ValueError):
        adam_step(p, {"zz": np.zeros(2)})
    assert p.step_count == 0


def test_adam_converges_on_quadratic():
    p = ModelParameters()
    p.add("w", np.array([4.0, -3.0], dtype=np.float32))
    for _ in range(400):
        adam_step(p, {"w": 2.0 * p.values["w"]}, lr=0.05)
    assert np.abs(p.values["w"]).max() < 1e-2


def test_parameters_copy_independent():
    p = ModelParameters()
    p.add("w", np.ones(3, dtype=np.float32))
    q = p.copy()
    adam_step(p, {"w": np.ones(3)}, lr=0.1)
    np.testing.assert_allclose(q.values["w"], 1.0)
    assert q.step_count == 0
    with pytest.raises(ValueError):
        p.add("w", np.ones(3))


def test_glorot_bounds():
    rng = derive_rng(17, "init")
    w = glorot_uniform(rng, 30, 10)
    limit = np.sqrt(6.0 / 40)
    assert w.shape == (30, 10)
    assert np.abs(w).max() <= limit


def small_net_loss(params):
    """Tiny affine-relu-affine-pool pipeline ending in a scalar loss."""
    x = np.linspace(-1.0, 1.0, 12).reshape(4, 3)
    leaves = {k: leaf(v, name=k) for k, v in params.items()}
    h = relu(affine(leaf(x), leaves["w1"], leaves["b1"]))
    h = affine(h, leaves["w2"], leaves["b2"])
    g = row_mean_pool(h)
    out = l2_normalize(g)
    target = np.array([1.0, 0.0, 0.0, 0.0, 0.0])[: out.value.size]
    diff = out.value.astype(np.float64) - target
    loss = float(np.dot(diff, diff))
    backward(out, (2.0 * diff).astype(out.value.dtype))
    return loss, harvest_grads(leaves)


def test_gradient_check_on_small_net():
    rng = derive_rng(19, "gc")
    params = {
        "w1": rng.normal(size=(3, 6), scale=0.5),
        "b1": rng.normal(size=6, scale=0.1),
        "w2": rng.normal(size=(6, 5), scale=0.5),
        "b2": rng.normal(size=5, scale=0.1),
    }
    err = gradient_check(small_net_loss, params, n_samples=60,
                         rng=derive_rng(19, "gc", "pick"))
    assert err < 1e-6
