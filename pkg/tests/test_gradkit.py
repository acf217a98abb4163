import numpy as np
import pytest

import padm.gradkit as gk
from padm import NonFiniteError


def check_grad(fn, x, tol=1e-5, h=1e-5):
    """Compare reverse-mode against central differences on a scalar map."""
    t = gk.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = fn(t)
    out.backward()
    num = gk.fd_grad(lambda a: fn(gk.Tensor(a)).data, np.asarray(x, np.float64), h=h)
    err = np.max(np.abs(t.grad - num)) / max(1.0, np.max(np.abs(num)))
    assert err < tol, f"grad mismatch {err:.3e}"
    return t.grad


def test_elementwise_primitive_gradients():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.5, 2.0, (3, 4))  # positive, away from kinks
    w = rng.standard_normal((3, 4))
    cases = [
        lambda t: gk.reduce_sum(gk.mul(gk.exp(t), w)),
        lambda t: gk.reduce_sum(gk.mul(gk.reciprocal(t), w)),
        lambda t: gk.reduce_sum(gk.mul(gk.sqrt(t), w)),
        lambda t: gk.reduce_sum(gk.mul(gk.relu(t), w)),
        lambda t: gk.reduce_sum(gk.mul(gk.gelu(t), w)),
        lambda t: gk.reduce_sum(gk.mul(gk.softplus(t), w)),
        lambda t: gk.reduce_sum(gk.mul(gk.neg(t), w)),
        lambda t: gk.reduce_mean(gk.mul(t, t)),
    ]
    for fn in cases:
        check_grad(fn, x)


def test_absolute_gradient_off_kink():
    x = np.array([[-2.0, -0.5], [0.5, 2.0]])
    g = check_grad(lambda t: gk.reduce_sum(gk.absolute(t)), x)
    assert np.array_equal(np.sign(g), np.sign(x))


def test_add_sub_mul_broadcasting_gradients():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 4))
    bias = gk.Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)
    t = gk.Tensor(x, requires_grad=True)
    out = gk.reduce_sum(gk.mul(gk.add(t, bias), gk.sub(t, bias)))
    out.backward()
    # d/dbias sum((t+b)(t-b)) = -2b per broadcast element
    expected = -2.0 * bias.data * (2 * 4 * 4)
    assert bias.grad.shape == bias.data.shape
    assert np.allclose(bias.grad, expected, atol=1e-10)
    assert np.allclose(t.grad, 2.0 * x, atol=1e-10)


def test_matmul_gradient():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 5))
    b = gk.Tensor(rng.standard_normal((5, 2)), requires_grad=True)
    w = rng.standard_normal((3, 2))
    ta = gk.Tensor(a, requires_grad=True)
    out = gk.reduce_sum(gk.mul(gk.matmul(ta, b), w))
    out.backward()
    assert np.allclose(ta.grad, w @ b.data.T, atol=1e-12)
    assert np.allclose(b.grad, a.T @ w, atol=1e-12)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((2, 3, 5))
    b = rng.standard_normal((2, 5, 4))
    w = rng.standard_normal((2, 3, 4))
    check_grad(lambda t: gk.reduce_sum(gk.mul(gk.matmul(t, b), w)), a)
    tb = gk.Tensor(b, requires_grad=True)
    out = gk.reduce_sum(gk.mul(gk.matmul(gk.Tensor(a), tb), w))
    out.backward()
    num = gk.fd_grad(
        lambda bb: float(np.sum((a @ bb) * w)), b.astype(np.float64))
    assert np.max(np.abs(tb.grad - num)) < 1e-5


def test_softmax_rows_and_gradient():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 6))
    s = gk.softmax(gk.Tensor(x), axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s.data > 0)
    # shift invariance
    s2 = gk.softmax(gk.Tensor(x + 100.0), axis=-1)
    assert np.allclose(s.data, s2.data, atol=1e-12)
    w = rng.standard_normal((4, 6))
    check_grad(lambda t: gk.reduce_sum(gk.mul(gk.softmax(t, axis=-1), w)), x)


def test_reductions_and_shape_ops_gradients():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4))
    w0 = rng.standard_normal((3, 4))
    check_grad(lambda t: gk.reduce_sum(gk.mul(gk.reduce_sum(t, axis=0), w0)), x)
    wk = rng.standard_normal((2, 3, 1))
    check_grad(lambda t: gk.reduce_sum(gk.mul(gk.reduce_mean(t, axis=2, keepdims=True),
                                              wk)), x)
    w1 = rng.standard_normal((2, 12))
    check_grad(lambda t: gk.reduce_sum(gk.mul(gk.reshape(t, (2, 12)), w1)), x)
    w2 = rng.standard_normal((4, 2, 3))
    check_grad(lambda t: gk.reduce_sum(gk.mul(gk.transpose(t, (2, 0, 1)), w2)), x)


def test_concat_gradient_splits_cleanly():
    rng = np.random.default_rng(6)
    a = gk.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = gk.Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    w = rng.standard_normal((2, 8))
    gk.reduce_sum(gk.mul(gk.concat([a, b], axis=1), w)).backward()
    assert np.allclose(a.grad, w[:, :3])
    assert np.allclose(b.grad, w[:, 3:])


def test_layer_norm_output_and_gradient():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 8))
    out = gk.layer_norm(gk.Tensor(x), gk.Tensor(np.ones(8)), gk.Tensor(np.zeros(8)))
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(out.data.std(axis=-1), 1.0, atol=1e-3)
    w = rng.standard_normal((3, 8))
    gain = rng.standard_normal(8)
    bias = rng.standard_normal(8)
    check_grad(lambda t: gk.reduce_sum(
        gk.mul(gk.layer_norm(t, gk.Tensor(gain), gk.Tensor(bias)), w)), x, tol=1e-4)


def test_conv2d_matches_reference_and_gradients():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = gk.conv2d(gk.Tensor(x), gk.Tensor(w), gk.Tensor(b), stride=1)
    assert out.shape == (2, 4, 6, 6)
    # reference: explicit loops over a zero-padded input
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 6))
    for i in range(6):
        for j in range(6):
            patch = xp[:, :, i : i + 3, j : j + 3]
            ref[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    assert np.allclose(out.data, ref, atol=1e-5)

    wt = rng.standard_normal((2, 4, 6, 6))
    check_grad(lambda t: gk.reduce_sum(gk.mul(
        gk.conv2d(t, gk.Tensor(w), gk.Tensor(b)), wt)), x, tol=1e-4)
    tw = gk.Tensor(w, requires_grad=True)
    tb = gk.Tensor(b, requires_grad=True)
    gk.reduce_sum(gk.mul(gk.conv2d(gk.Tensor(x), tw, tb), wt)).backward()
    num_w = gk.fd_grad(lambda ww: float(np.sum(np.array([[
        np.tensordot(xp[:, :, i:i+3, j:j+3], ww, axes=([1, 2, 3], [1, 2, 3]))
        for j in range(6)] for i in range(6)]).transpose(2, 3, 0, 1) * wt)), w)
    assert np.max(np.abs(tw.grad - num_w)) < 1e-4
    assert np.allclose(tb.grad, wt.sum(axis=(0, 2, 3)), atol=1e-10)


def test_conv2d_stride_two_shape_and_gradient():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    out = gk.conv2d(gk.Tensor(x), gk.Tensor(w), stride=2)
    assert out.shape == (1, 3, 4, 4)
    wt = rng.standard_normal((1, 3, 4, 4))
    check_grad(lambda t: gk.reduce_sum(gk.mul(
        gk.conv2d(t, gk.Tensor(w), stride=2), wt)), x, tol=1e-4)


def test_upsample_nearest_and_gradient():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    out = gk.upsample_nearest(gk.Tensor(x), 2)
    assert out.shape == (1, 1, 4, 4)
    assert np.array_equal(out.data[0, 0], np.kron(x[0, 0], np.ones((2, 2))))
    t = gk.Tensor(x, requires_grad=True)
    gk.reduce_sum(gk.mul(gk.upsample_nearest(t, 2), np.ones((1, 1, 4, 4)))).backward()
    assert np.allclose(t.grad, 4.0)  # each source cell feeds 4 outputs


def test_graph_reuse_accumulates_fanout():
    # x feeds two branches; gradients from both must add
    x = gk.Tensor(np.array([3.0]), requires_grad=True)
    y = gk.add(gk.mul(x, x), gk.mul(x, np.array([2.0])))
    gk.reduce_sum(y).backward()
    assert x.grad[0] == pytest.approx(2 * 3.0 + 2.0, abs=1e-12)


def test_repeated_backward_accumulates_until_zeroed():
    x = gk.Tensor(np.array([1.5]), requires_grad=True)
    gk.reduce_sum(gk.mul(x, x)).backward()
    first = x.grad.copy()
    gk.reduce_sum(gk.mul(x, x)).backward()
    assert np.allclose(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_no_grad_and_detach_block_flow():
    x = gk.Tensor(np.array([2.0]), requires_grad=True)
    with gk.no_grad():
        y = gk.mul(x, x)
    assert not y.requires_grad
    z = gk.mul(x.detach(), x)
    gk.reduce_sum(z).backward()
    assert x.grad[0] == pytest.approx(2.0)  # only the live branch contributes


def test_backward_requires_scalar():
    x = gk.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        gk.mul(x, x).backward()


def test_finite_guard():
    x = gk.Tensor(np.array([1000.0]))
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError):
            gk.exp(x)
        gk.set_finite_check(False)
        try:
            out = gk.exp(x)
            assert np.isinf(out.data[0])
        finally:
            gk.set_finite_check(True)


def test_float32_stays_float32():
    x = gk.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = gk.gelu(gk.add(gk.mul(x, 0.5), 1.0))
    assert out.dtype == np.float32
    gk.reduce_mean(out).backward()
    assert x.grad.dtype == np.float32


def test_param_store_round_trip_and_guards():
    store = gk.ParamStore()
    a = store.add("w", np.ones((2, 2)))
    store.add("b", np.zeros(2))
    with pytest.raises(ValueError):
        store.add("w", np.ones(1))
    a.grad = np.full((2, 2), 0.5)
    gk.adam_step(store, lr=1e-2)
    state = {k: v.copy() for k, v in store.state_tensors().items()}
    store2 = gk.ParamStore()
    store2.add("w", np.zeros((2, 2)))
    store2.add("b", np.zeros(2))
    store2.load_state_tensors(state, step_count=store.step_count)
    for k, v in store2.state_tensors().items():
        assert np.array_equal(v, state[k]), k
    assert store2.step_count == 1
    with pytest.raises(ValueError):
        store2.load_state_tensors({"param/w": np.zeros((2, 2))}, 0)


def test_adam_single_step_closed_form():
    store = gk.ParamStore()
    p = store.add("p", np.array([1.0]))
    p.grad = np.array([0.4], dtype=np.float32)
    gk.adam_step(store, lr=0.1)
    # bias-corrected first step: mhat = g, vhat = g^2
    expected = 1.0 - 0.1 * 0.4 / (np.sqrt(0.4 * 0.4) + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-7)


def test_adam_minimizes_quadratic():
    store = gk.ParamStore()
    p = store.add("p", np.array([-2.0]))
    for _ in range(600):
        store.zero_grad()
        loss = gk.reduce_sum(gk.mul(gk.sub(p, 3.0), gk.sub(p, 3.0)))
        loss.backward()
        gk.adam_step(store, lr=5e-2)
    assert abs(p.data[0] - 3.0) < 1e-3
