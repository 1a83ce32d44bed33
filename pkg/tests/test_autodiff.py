import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omoq.autodiff import AdamW, GraphError, Tensor, gru_layer, gru_layer_composed, kernels, lstm_layer, no_grad, ops

from .gradcheck import max_rel_error

TOL = 1e-4


def _t(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _check(fn, params):
    assert max_rel_error(fn, params) < TOL


UNARY = {
    "neg": lambda a: ops.neg(a),
    "exp": lambda a: ops.exp(a),
    "log": lambda a: ops.log(a),
    "sqrt": lambda a: ops.sqrt(a),
    "pow": lambda a: ops.power(a, 3),
    "relu": lambda a: ops.relu(a),
    "sigmoid": lambda a: ops.sigmoid(a),
    "tanh": lambda a: ops.tanh(a),
    "sum_axis": lambda a: ops.sum(a, axis=1),
    "mean_axis": lambda a: ops.mean(a, axis=0, keepdims=True),
    "reshape": lambda a: ops.reshape(a, (-1,)),
    "transpose": lambda a: ops.transpose(a, (1, 0)),
    "slice": lambda a: a[1:, ::2],
    "fancy_index": lambda a: ops.getitem(a, (np.array([0, 0, 2]), np.array([1, 1, 3]))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    a = _t(rng, 3, 4, positive=name in ("log", "sqrt"))
    w = rng.standard_normal(UNARY[name](Tensor(a.data)).shape)
    _check(lambda: ops.sum(UNARY[name](a) * w), [a])


BINARY = {
    "add": ops.add, "sub": ops.sub, "mul": ops.mul, "div": ops.div,
    "matmul": lambda a, b: ops.matmul(a, ops.transpose(b)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_with_broadcast(name, rng):
    a = _t(rng, 3, 4)
    b = _t(rng, 1, 4, positive=True) if name != "matmul" else _t(rng, 5, 4)
    _check(lambda: ops.sum(BINARY[name](a, b) ** 2), [a, b])


def test_concat_stack_linear(rng):
    a, b, w, bias = _t(rng, 2, 3), _t(rng, 2, 2), _t(rng, 4, 5), _t(rng, 4)
    _check(lambda: ops.sum(ops.tanh(ops.linear(ops.concat([a, b], axis=1), w, bias))), [a, b, w, bias])
    _check(lambda: ops.sum(ops.stack([a, a * 2], axis=1) ** 2), [a])


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2)])
def test_conv2d_gradients(stride, padding, rng):
    x, w, b = _t(rng, 2, 3, 7, 6), _t(rng, 4, 3, 3, 2), _t(rng, 4)
    _check(lambda: ops.sum(ops.conv2d(x, w, b, stride, padding) ** 2), [x, w, b])


def test_conv2d_direct_oracle(rng):
    x, w, b = rng.standard_normal((2, 3, 6, 5)), rng.standard_normal((4, 3, 3, 2)), rng.standard_normal(4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for f in range(4):
            for i in range(4):
                for j in range(4):
                    ref[n, f, i, j] = np.sum(x[n, :, i : i + 3, j : j + 2] * w[f]) + b[f]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_conv2d_1x1_is_scaling(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    out = ops.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.5))).data
    np.testing.assert_allclose(out, 2.5 * x)


def test_maxpool_floor_and_gradient(rng):
    x = _t(rng, 2, 3, 5, 7)
    out = ops.maxpool2d(x)
    assert out.shape == (2, 3, 2, 3)
    np.testing.assert_array_equal(out.data[0, 0, 1, 2], x.data[0, 0, 2:4, 4:6].max())
    _check(lambda: ops.sum(ops.maxpool2d(x) ** 2), [x])
    with pytest.raises(ValueError):
        ops.maxpool2d(Tensor(np.zeros((1, 1, 1, 4))))


def test_maxpool_ties_route_to_first(rng):
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ops.sum(ops.maxpool2d(x)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_norm_gradients(rng):
    x, g, b = _t(rng, 4, 3, 2, 2), _t(rng, 3), _t(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    w = rng.standard_normal((4, 3, 2, 2))
    _check(lambda: ops.sum(ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training=True) * w), [x, g, b])
    _check(lambda: ops.sum(ops.batch_norm(x, g, b, rm, rv, training=False) * w), [x, g, b])
    y, g2, b2 = _t(rng, 3, 5), _t(rng, 5), _t(rng, 5)
    w2 = rng.standard_normal((3, 5))
    _check(lambda: ops.sum(ops.layer_norm(y, g2, b2) * w2), [y, g2, b2])


def test_batch_norm_running_stats(rng):
    x = rng.normal(2.0, 3.0, size=(50, 2, 3))
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))


def test_loss_gradients(rng):
    p, y = _t(rng, 6), rng.standard_normal(6)
    _check(lambda: ops.rmse_loss(p, y), [p])
    frames = _t(rng, 3, 5)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0], [1, 1, 1, 0, 0]], dtype=float)
    tgt = rng.standard_normal(3)
    _check(lambda: ops.masked_frame_mse(frames, tgt, mask)[0], [frames])


def test_masked_frame_mse_value():
    frames = np.array([[1.0, 2.0, 9.0], [0.0, 0.0, 0.0]])
    mask = np.array([[1, 1, 0], [1, 1, 1]])
    loss, per = ops.masked_frame_mse(Tensor(frames), np.array([1.0, 1.0]), mask)
    np.testing.assert_allclose(per.data, [0.5, 1.0])
    assert loss.item() == pytest.approx(0.75)


@pytest.mark.parametrize("backend", kernels.available())
@pytest.mark.parametrize("reverse", [False, True])
def test_gru_layer_gradients(backend, reverse, rng):
    kernels.use_backend(backend)
    try:
        x, wi, wh, bi, bh = _t(rng, 2, 4, 3), _t(rng, 6, 3), _t(rng, 6, 2), _t(rng, 6), _t(rng, 6)
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=float)
        w = rng.standard_normal((2, 4, 2))
        _check(lambda: ops.sum(gru_layer(x, wi, wh, bi, bh, mask, reverse) * w), [x, wi, wh, bi, bh])
    finally:
        kernels.use_backend("cython" if "cython" in kernels.available() else "python")


@pytest.mark.parametrize("backend", kernels.available())
def test_gru_fused_matches_composed(backend, rng):
    kernels.use_backend(backend)
    try:
        args = [rng.standard_normal(s) for s in ((3, 5, 4), (9, 4), (9, 3), (9,), (9,))]
        mask = np.array([[1] * 5, [1, 1, 1, 0, 0], [1, 0, 0, 0, 0]], dtype=float)
        for reverse in (False, True):
            ta = [Tensor(a.copy(), requires_grad=True) for a in args]
            tb = [Tensor(a.copy(), requires_grad=True) for a in args]
            ops.sum(ops.tanh(gru_layer(*ta, mask=mask, reverse=reverse))).backward()
            ops.sum(ops.tanh(gru_layer_composed(*tb, mask=mask, reverse=reverse))).backward()
            for a, b in zip(ta, tb):
                np.testing.assert_allclose(a.grad, b.grad, rtol=1e-10, atol=1e-12)
    finally:
        kernels.use_backend("cython" if "cython" in kernels.available() else "python")


@pytest.mark.skipif("cython" not in kernels.available(), reason="compiled kernels not built")
@pytest.mark.parametrize("dtype,tol", [(np.float32, 2e-5), (np.float64, 1e-12)])
@pytest.mark.parametrize("scale", [1e-3, 0.3, 1.0, 10.0])
def test_gru_backends_agree(dtype, tol, scale, rng):
    # inputs from tiny (series branch of tanh) to saturating; recurrent weights stay
    # moderate so summation-order rounding is not amplified by huge preactivations
    t_len, b, h = 12, 5, 8
    gx = (rng.standard_normal((t_len, b, 3 * h)) * scale).astype(dtype)
    w_hh = (rng.standard_normal((3 * h, h)) * min(scale, 0.5)).astype(dtype)
    b_hh = (rng.standard_normal(3 * h) * scale).astype(dtype)
    h0 = (rng.standard_normal((b, h)) * scale).astype(dtype)
    mask = np.ones((t_len, b), dtype=dtype)
    mask[7:, 1] = 0
    dhs = rng.standard_normal((t_len, b, h)).astype(dtype)
    py, cy = kernels.BACKENDS["python"], kernels.BACKENDS["cython"]
    for reverse in (False, True):
        fp = py.gru_forward(gx, w_hh, b_hh, mask, h0, reverse)
        fc = cy.gru_forward(gx, w_hh, b_hh, mask, h0, reverse)
        bp = py.gru_backward(dhs, w_hh, mask, h0, *fp, reverse)
        bc = cy.gru_backward(dhs, w_hh, mask, h0, *fc, reverse)
        for want, got in zip(fp + bp, fc + bc):
            assert got.dtype == dtype
            assert np.max(np.abs(got - want)) <= tol * max(np.max(np.abs(want)), 1.0)


def test_lstm_gradients(rng):
    x, wi, wh, bi, bh = _t(rng, 2, 3, 2), _t(rng, 8, 2), _t(rng, 8, 2), _t(rng, 8), _t(rng, 8)
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    _check(lambda: ops.sum(lstm_layer(x, wi, wh, bi, bh, mask, reverse=True) ** 2), [x, wi, wh, bi, bh])


def test_square_derivative():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError, match="non-scalar"):
        (x * 2).backward()
    y = ops.sum(x * x)
    y.backward()
    with pytest.raises(GraphError, match="re-run"):
        y.backward()


def test_grad_accumulates_on_shared_leaf():
    x = Tensor(np.array(2.0), requires_grad=True)
    (x * x + x * 3).backward()
    assert x.grad == pytest.approx(7.0)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ops.sum(x * 2)
    assert not y.requires_grad


def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.standard_normal(10), requires_grad=True)
    y = ops.dropout(x, 0.5, training=False)
    ops.sum(y * 3).backward()
    np.testing.assert_array_equal(x.grad, 3)
    with pytest.raises(ValueError):
        ops.dropout(x, 0.5, training=True)


def test_dropout_keep_rate_chi_square():
    from scipy.stats import chi2

    rng = np.random.default_rng(5)
    n, p = 200_000, 0.1
    y = ops.dropout(Tensor(np.ones(n)), p, training=True, rng=rng).data
    kept = int(np.count_nonzero(y))
    np.testing.assert_allclose(y[y != 0], 1 / (1 - p), rtol=1e-6)
    stat = (kept - n * (1 - p)) ** 2 / (n * (1 - p)) + ((n - kept) - n * p) ** 2 / (n * p)
    assert chi2.sf(stat, df=1) > 1e-3


def test_dropout_deterministic_given_seed():
    a = ops.dropout(Tensor(np.ones(100)), 0.3, True, np.random.default_rng(7)).data
    b = ops.dropout(Tensor(np.ones(100)), 0.3, True, np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)


def test_adamw_first_step_by_hand():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.5])
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    m_hat = (0.1 * 0.5) / (1 - 0.9)
    v_hat = (0.001 * 0.25) / (1 - 0.999)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-12)


def test_adamw_zero_grad_and_decay():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    AdamW([p], lr=0.01, weight_decay=0.0).step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    AdamW([p], lr=0.01, weight_decay=0.5).step()
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 0.005), rtol=1e-12)
    with pytest.raises(ValueError):
        AdamW([p], lr=-1.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 3))
def test_scalar_chain_rule(a, b):
    x = Tensor(np.array(a), requires_grad=True)
    y = Tensor(np.array(b), requires_grad=True)
    ops.tanh(x * y + ops.exp(-y)).backward()
    s = 1 - np.tanh(a * b + np.exp(-b)) ** 2
    assert x.grad == pytest.approx(s * b, rel=1e-9, abs=1e-12)
    assert y.grad == pytest.approx(s * (a - np.exp(-b)), rel=1e-9, abs=1e-12)
