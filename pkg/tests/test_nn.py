import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldtransform import nn


# -------------------------------------------------------------- naive oracles


def naive_conv(x, w, b, pad):
    bsz, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((bsz, ci, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((bsz, co, ho, wo))
    for n in range(bsz):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    s = b[o]
                    for c in range(ci):
                        for di in range(k):
                            for dj in range(k):
                                s += xp[n, c, i + di, j + dj] * w[o, c, di, dj]
                    out[n, o, i, j] = s
    return out


def naive_tconv(x, w, b):
    bsz, ci, h, wd = x.shape
    co = w.shape[0]
    out = np.zeros((bsz, co, 2 * h, 2 * wd))
    for n in range(bsz):
        for o in range(co):
            for i in range(2 * h):
                for j in range(2 * wd):
                    s = b[o]
                    for c in range(ci):
                        s += x[n, c, i // 2, j // 2] * w[o, c, i % 2, j % 2]
                    out[n, o, i, j] = s
    return out


def naive_pool(x):
    bsz, c, h, w = x.shape
    out = np.zeros((bsz, c, h // 2, w // 2))
    idx = np.zeros(out.shape, int)
    for n in range(bsz):
        for k in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    best, arg = -np.inf, 0
                    for p, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                        v = x[n, k, 2 * i + di, 2 * j + dj]
                        if v > best:
                            best, arg = v, p
                    out[n, k, i, j], idx[n, k, i, j] = best, arg
    return out, idx


def naive_mse(p, t, m):
    num, cnt = 0.0, 0
    for val_p, val_t, ok in zip(p.ravel(), t.ravel(), np.broadcast_to(m, p.shape).ravel()):
        if ok:
            num += (val_p - val_t) ** 2
            cnt += 1
    return num / cnt


def rand_layer(rng, ci, co, k, kind=nn.CONV2D):
    p = nn.conv_layer(ci, co, k, rng=rng, kind=kind)
    p.bias[:] = rng.standard_normal(co)
    return p


def numgrad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


# ----------------------------------------------------------- oracle checks


@pytest.mark.parametrize("case", range(20))
def test_conv_matches_naive(case):
    rng = np.random.default_rng(case)
    k = (1, 3)[case % 2]
    h = int(rng.integers(2, 7)) if case < 16 else 17   # last cases use the row-shift path
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), h, h + case % 3))
    p = rand_layer(rng, x.shape[1], int(rng.integers(1, 4)), k)
    want = naive_conv(x, p.weights, p.bias, p.padding)
    np.testing.assert_allclose(nn.conv2d_forward(x, p), want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("case", range(20))
def test_tconv_and_pool_match_naive(case):
    rng = np.random.default_rng(100 + case)
    x = rng.standard_normal((2, int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)), 4))
    p = rand_layer(rng, x.shape[1], 3, 2, kind=nn.TRANSPOSED_CONV2D)
    np.testing.assert_allclose(nn.transposed_conv2x2_forward(x, p),
                               naive_tconv(x, p.weights, p.bias), rtol=0, atol=1e-12)
    out, idx = nn.maxpool2x2_forward(x)
    want, widx = naive_pool(x)
    np.testing.assert_array_equal(out, want)
    np.testing.assert_array_equal(idx, widx)


def test_pool_tie_goes_to_first():
    x = np.ones((1, 1, 2, 2))
    out, idx = nn.maxpool2x2_forward(x)
    assert idx[0, 0, 0, 0] == 0 and out[0, 0, 0, 0] == 1


@pytest.mark.parametrize("case", range(20))
def test_mse_matches_naive(case):
    rng = np.random.default_rng(200 + case)
    p = rng.standard_normal((2, 2, 4, 5))
    t = rng.standard_normal(p.shape)
    m = rng.random((4, 5)) > 0.3
    m[0, 0] = True
    loss, _ = nn.mse_loss(p, t, m)
    assert abs(loss - naive_mse(p, t, m)) <= 1e-12


def test_mse_empty_mask():
    with pytest.raises(nn.EmptyMaskError):
        nn.mse_loss(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), np.zeros((2, 2), bool))


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("k,h", [(3, 5), (1, 4), (3, 16)])
def test_conv_gradients(k, h):
    rng = np.random.default_rng(k * 10 + h)
    x = rng.standard_normal((2, 2, h, h if h < 16 else 17))
    p = rand_layer(rng, 2, 3, k)
    r = rng.standard_normal(nn.conv2d_forward(x, p).shape)
    f = lambda: float(np.sum(nn.conv2d_forward(x, p) * r))
    gx, gw, gb = nn.conv2d_backward(x, p, r)
    assert rel_err(gw, numgrad(f, p.weights)) <= 1e-4
    assert rel_err(gb, numgrad(f, p.bias)) <= 1e-4
    assert rel_err(gx, numgrad(f, x)) <= 1e-4


def test_tconv_gradients():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 3, 4))
    p = rand_layer(rng, 3, 2, 2, kind=nn.TRANSPOSED_CONV2D)
    r = rng.standard_normal((2, 2, 6, 8))
    f = lambda: float(np.sum(nn.transposed_conv2x2_forward(x, p) * r))
    gx, gw, gb = nn.transposed_conv2x2_backward(x, p, r)
    assert rel_err(gx, numgrad(f, x)) <= 1e-4
    assert rel_err(gw, numgrad(f, p.weights)) <= 1e-4
    assert rel_err(gb, numgrad(f, p.bias)) <= 1e-4


def test_pool_relu_mse_gradients():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 2, 4, 6))
    r = rng.standard_normal((2, 2, 2, 3))
    out, idx = nn.maxpool2x2_forward(x)
    f = lambda: float(np.sum(nn.maxpool2x2_forward(x)[0] * r))
    assert rel_err(nn.maxpool2x2_backward(idx, r), numgrad(f, x)) <= 1e-4

    r2 = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(nn.relu_forward(x) * r2))
    assert rel_err(nn.relu_backward(x, r2), numgrad(f, x)) <= 1e-4

    t = rng.standard_normal(x.shape)
    m = rng.random((4, 6)) > 0.3
    _, g = nn.mse_loss(x, t, m)
    f = lambda: nn.mse_loss(x, t, m)[0]
    assert rel_err(g, numgrad(f, x)) <= 1e-4


def test_concat_roundtrip():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 4, 4))
    ga, gb = nn.concat_channels_backward(nn.concat_channels(a, b), 3)
    np.testing.assert_array_equal(ga, a)
    np.testing.assert_array_equal(gb, b)
    with pytest.raises(nn.ShapeError):
        nn.concat_channels(a, np.zeros((2, 1, 3, 4)))


def test_shape_errors():
    p = nn.conv_layer(2, 3)
    with pytest.raises(nn.ShapeError):
        nn.conv2d_forward(np.zeros((1, 3, 4, 4)), p)
    with pytest.raises(nn.ShapeError):
        nn.maxpool2x2_forward(np.zeros((1, 1, 3, 4)))


# ---------------------------------------------------------------- optimizer


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(3)
    p = [rng.standard_normal(5)]
    grads = [rng.standard_normal(5) for _ in range(4)]
    st_ = nn.AdamState.zeros_like(p)
    ref = p[0].copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t, g in enumerate(grads, 1):
        nn.adam_step(p, [g], st_, 1e-3)
        for i in range(5):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            mh, vh = m[i] / (1 - 0.9 ** t), v[i] / (1 - 0.999 ** t)
            ref[i] -= 1e-3 * mh / (np.sqrt(vh) + 1e-8)
    np.testing.assert_allclose(p[0], ref, rtol=0, atol=1e-14)
    assert st_.step_count == 4


def test_adam_first_step_is_lr_sign():
    p = [np.array([1.0, -2.0, 3.0])]
    nn.adam_step(p, [np.array([0.5, -4.0, 1e-3])], nn.AdamState.zeros_like(p), 0.1)
    np.testing.assert_allclose(p[0], [0.9, -1.9, 2.9], atol=1e-5)


def test_lr_schedule():
    s = nn.LrSchedule()
    assert nn.lr_at_epoch(s, 0) == 5e-4
    assert nn.lr_at_epoch(s, 99) == 5e-4
    assert nn.lr_at_epoch(s, 100) == pytest.approx(5e-5)
    assert nn.lr_at_epoch(s, 250) == pytest.approx(5e-6)
    with pytest.raises(ValueError):
        nn.LrSchedule(drop_factor=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.floats(1e-6, 1.0), st.floats(0.01, 1.0), st.integers(1, 50))
def test_lr_schedule_monotone(epoch, lr0, drop, period):
    s = nn.LrSchedule(lr0, drop, period)
    assert 0 <= nn.lr_at_epoch(s, epoch + 1) <= nn.lr_at_epoch(s, epoch) <= lr0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31))
def test_conv_linear_in_input(ci, co, h, seed):
    rng = np.random.default_rng(seed)
    p = rand_layer(rng, ci, co, 3)
    a = rng.standard_normal((1, ci, h, h))
    b = rng.standard_normal((1, ci, h, h))
    zero = nn.conv2d_forward(np.zeros_like(a), p)
    lhs = nn.conv2d_forward(a + b, p) - zero
    rhs = (nn.conv2d_forward(a, p) - zero) + (nn.conv2d_forward(b, p) - zero)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
