"""Dense layers with hand-written backward passes.

Tensors are plain float64 numpy arrays in ``[batch, channel, height, width]``
order. Every forward function is pure; the backward functions take the
forward inputs and return exact gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with a layer."""


class EmptyMaskError(ValueError):
    """Raised when a loss mask selects no cells."""


CONV2D = "conv2d"
TRANSPOSED_CONV2D = "transposed_conv2d"
DENSE_HEAD = "dense_head"
LAYER_KINDS = (CONV2D, TRANSPOSED_CONV2D, DENSE_HEAD)


@dataclass
class LayerParams:
    """Weights of one convolutional layer.

    ``weights`` is ``[out_ch, in_ch, kh, kw]`` for every kind, including the
    2x2 transposed convolution. ``dense_head`` is a 1x1 convolution with a
    linear output.
    """

    kind: str
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.weights.ndim != 4 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"weights {self.weights.shape} / bias {self.bias.shape} mismatch"
            )
        if self.kind == TRANSPOSED_CONV2D and (
            self.stride != 2 or self.weights.shape[2:] != (2, 2)
        ):
            raise ShapeError("transposed conv must have a 2x2 kernel and stride 2")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size


def conv_layer(in_ch, out_ch, kernel=3, rng=None, kind=CONV2D) -> LayerParams:
    """Kaiming-uniform (fan-in) weights, zero bias.

    ``rng=None`` gives all-zero weights.
    """
    shape = (out_ch, in_ch, kernel, kernel)
    if rng is None:
        w = np.zeros(shape)
    else:
        bound = math.sqrt(6.0 / (in_ch * kernel * kernel))
        w = rng.uniform(-bound, bound, size=shape)
    if kind == TRANSPOSED_CONV2D:
        return LayerParams(kind, w, np.zeros(out_ch), stride=2, padding=0)
    return LayerParams(kind, w, np.zeros(out_ch), stride=1, padding=kernel // 2)


# ---------------------------------------------------------------- convolution
#
# The kernels below work on channel-major tensors ``[c, b, h, w]``: im2col is
# then nine row-contiguous slice copies and every matmul lands directly in the
# output layout. The public ``[b, c, h, w]`` functions wrap them.


def _nchw(x):
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _im2col_cm(x, kh, kw, pad):
    c, b, h, w = x.shape
    if pad:
        xp = np.zeros((c, b, h + 2 * pad, w + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if kh == kw == 1:
        return xp.reshape(c, -1), ho, wo
    cols = np.empty((c, kh, kw, b, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, b * ho * wo), ho, wo


def _conv3_rows(x):
    """Three row-shifted copies of the zero-padded input, width kept padded.

    Column shifts are then plain offsets into the flattened rows; outputs that
    land in the two padding columns of each row are discarded.
    """
    c, b, h, w = x.shape
    xp = np.zeros((c, b, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    rows = np.empty((c, 3, b, h, w + 2))
    for i in range(3):
        rows[:, i] = xp[:, :, i:i + h]
    return rows.reshape(3 * c, -1)


def _tap(w, j):
    # weights for kernel column j as a contiguous [oc, ic*3] block (BLAS needs
    # unit inner stride)
    return np.ascontiguousarray(w[:, :, :, j]).reshape(w.shape[0], -1)


# below this width the two wasted padding columns cost more than im2col saves
ROW_SHIFT_MIN_WIDTH = 16


def _use_rows(w, x_shape, pad):
    return w.shape[2:] == (3, 3) and pad == 1 and x_shape[3] >= ROW_SHIFT_MIN_WIDTH


def conv_cm_forward(x, w, bias, pad):
    """Channel-major conv. Returns ``(out, cache)``; ``cache`` feeds
    :func:`conv_cm_backward`."""
    oc, ic, kh, kw = w.shape
    if x.shape[0] != ic:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {ic}")
    c, b, h, wd = x.shape
    if _use_rows(w, x.shape, pad):
        rows = _conv3_rows(x)
        m = rows.shape[1]
        out = _tap(w, 0) @ rows
        out[:, :m - 1] += _tap(w, 1) @ rows[:, 1:]
        out[:, :m - 2] += _tap(w, 2) @ rows[:, 2:]
        out = out.reshape(oc, b, h, wd + 2)[..., :wd] + bias[:, None, None, None]
        return out, rows
    cols, ho, wo = _im2col_cm(x, kh, kw, pad)
    out = w.reshape(oc, -1) @ cols
    out += bias[:, None]
    return out.reshape(oc, b, ho, wo), cols


def conv_cm_backward(x_shape, w, pad, grad_out, cache=None, x=None, need_dx=True):
    """Gradients of :func:`conv_cm_forward`.

    Pass either the forward ``cache`` or the input ``x`` itself.
    """
    oc, ic, kh, kw = w.shape
    c, b, h, wd = x_shape
    if grad_out.shape[:2] != (oc, b):
        raise ShapeError(f"grad_out {grad_out.shape} does not match the forward output")
    rows_mode = _use_rows(w, x_shape, pad)
    if cache is None:
        cache = _conv3_rows(x) if rows_mode else _im2col_cm(x, kh, kw, pad)[0]
    if rows_mode:
        gp = np.zeros((oc, b, h, wd + 2))
        gp[..., :wd] = grad_out
        gf = gp.reshape(oc, -1)
        m = gf.shape[1]
        grad_w = np.empty(w.shape)
        for j in range(3):
            grad_w[:, :, :, j] = (gf[:, :m - j] @ cache[:, j:].T).reshape(oc, ic, 3)
    else:
        g = grad_out.reshape(oc, -1)
        if g.shape[1] != cache.shape[1]:
            raise ShapeError(f"grad_out {grad_out.shape} does not match the forward output")
        grad_w = (g @ cache.T).reshape(w.shape)
    grad_b = grad_out.sum(axis=(1, 2, 3))
    if not need_dx:
        return None, grad_w, grad_b
    if kh == kw == 1 and pad == 0:
        grad_x = (w.reshape(oc, ic).T @ grad_out.reshape(oc, -1)).reshape(x_shape)
    else:
        # same-size correlation: the input gradient is a correlation of
        # grad_out with the spatially flipped, channel-transposed kernel
        if kh - 1 - pad != pad or kw - 1 - pad != pad:
            raise ShapeError("only 'same' padding is supported")
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x, _ = conv_cm_forward(np.ascontiguousarray(grad_out), wf, np.zeros(ic), pad)
    return grad_x, grad_w, grad_b


def _check_conv(x, p):
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-axis tensor, got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, layer expects {p.in_channels}"
        )
    if p.stride != 1 or p.kind == TRANSPOSED_CONV2D:
        raise ShapeError("conv2d supports stride 1 only")


def conv2d_forward(x, p: LayerParams):
    """Cross-correlation plus bias, ``[b, ic, h, w] -> [b, oc, h', w']``."""
    _check_conv(x, p)
    out, _ = conv_cm_forward(_nchw(x), p.weights, p.bias, p.padding)
    return _nchw(out)


def conv2d_backward(x, p: LayerParams, grad_out):
    """Gradients ``(grad_x, grad_w, grad_b)`` of :func:`conv2d_forward`."""
    _check_conv(x, p)
    oc = p.out_channels
    if grad_out.ndim != 4 or grad_out.shape[:2] != (x.shape[0], oc):
        raise ShapeError(f"grad_out {grad_out.shape} does not match the forward output")
    xc = _nchw(x)
    gx, gw, gb = conv_cm_backward(xc.shape, p.weights, p.padding, _nchw(grad_out), x=xc)
    return _nchw(gx), gw, gb


# ------------------------------------------------------- transposed conv 2x2


def tconv_cm_forward(x, w, bias):
    """Channel-major 2x2/stride-2 transposed conv.

    ``out[o, b, 2i+r, 2j+s] = sum_c x[c, b, i, j] * w[o, c, r, s] + bias[o]``.
    """
    oc, ic = w.shape[:2]
    c, b, h, wd = x.shape
    if c != ic:
        raise ShapeError(f"input has {c} channels, layer expects {ic}")
    wt = w.transpose(0, 2, 3, 1).reshape(oc * 4, ic)
    y = (wt @ x.reshape(c, -1)).reshape(oc, 2, 2, b, h, wd)
    y = y.transpose(0, 3, 4, 1, 5, 2).reshape(oc, b, 2 * h, 2 * wd)
    y += bias[:, None, None, None]
    return y


def tconv_cm_backward(x, w, grad_out):
    oc, ic = w.shape[:2]
    c, b, h, wd = x.shape
    if grad_out.shape != (oc, b, 2 * h, 2 * wd):
        raise ShapeError(f"grad_out {grad_out.shape} != {(oc, b, 2 * h, 2 * wd)}")
    wt = w.transpose(0, 2, 3, 1).reshape(oc * 4, ic)
    gy = grad_out.reshape(oc, b, h, 2, wd, 2).transpose(0, 3, 5, 1, 2, 4)
    gy = gy.reshape(oc * 4, -1)
    xm = x.reshape(c, -1)
    grad_x = (wt.T @ gy).reshape(x.shape)
    grad_w = (gy @ xm.T).reshape(oc, 2, 2, ic).transpose(0, 3, 1, 2)
    grad_b = grad_out.sum(axis=(1, 2, 3))
    return grad_x, np.ascontiguousarray(grad_w), grad_b


def _check_tconv(x, p):
    if p.kind != TRANSPOSED_CONV2D:
        raise ShapeError(f"expected a transposed_conv2d layer, got {p.kind}")
    if x.ndim != 4 or x.shape[1] != p.in_channels:
        raise ShapeError(
            f"input shape {x.shape} incompatible with {p.in_channels} in-channels"
        )


def transposed_conv2x2_forward(x, p: LayerParams):
    """Stride-2, 2x2 fractionally strided convolution; doubles h and w."""
    _check_tconv(x, p)
    return _nchw(tconv_cm_forward(_nchw(x), p.weights, p.bias))


def transposed_conv2x2_backward(x, p: LayerParams, grad_out):
    _check_tconv(x, p)
    gx, gw, gb = tconv_cm_backward(_nchw(x), p.weights, _nchw(grad_out))
    return _nchw(gx), gw, gb


# ------------------------------------------------------------ pointwise/pool


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0.0)


def maxpool2x2_forward(x):
    """2x2 non-overlapping max pooling.

    Returns ``(out, idx)`` where ``idx`` holds the winner position inside each
    window in row-major order (0 = top-left ... 3 = bottom-right). Ties go to
    the first position scanned.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(idx, grad_out):
    b, c, h2, w2 = grad_out.shape
    win = np.zeros((b, c, h2, w2, 4))
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(b, c, 2 * h2, 2 * w2)


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out, n_first):
    """Split the gradient of :func:`concat_channels` back into its two parts."""
    return grad_out[:, :n_first], grad_out[:, n_first:]


# ---------------------------------------------------------------------- loss


def mse_loss(pred, target, mask=None):
    """Mean squared error over valid cells.

    ``mask`` (boolean, broadcastable to ``pred``) selects valid cells; None
    means all cells. Returns ``(loss, grad_pred)``.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} != target {target.shape}")
    diff = pred - target
    if mask is None:
        m = np.ones(pred.shape)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=float), pred.shape)
    n_valid = m.sum()
    if n_valid == 0:
        raise EmptyMaskError("mask selects no cells")
    diff = diff * m
    loss = float(np.sum(diff * diff) / n_valid)
    return loss, (2.0 / n_valid) * diff


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list
    v: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def sgd_step(params, grads, lr):
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        p -= lr * g
    return params


@dataclass(frozen=True)
class LrSchedule:
    initial_rate: float = 5e-4
    drop_factor: float = 0.1
    drop_period_epochs: int = 100

    def __post_init__(self):
        if not self.initial_rate > 0:
            raise ValueError("initial_rate must be > 0")
        if not 0 < self.drop_factor <= 1:
            raise ValueError("drop_factor must be in (0, 1]")
        if self.drop_period_epochs < 1:
            raise ValueError("drop_period_epochs must be >= 1")


def lr_at_epoch(sched: LrSchedule, epoch: int) -> float:
    """Piecewise-constant step decay; ``epoch`` counts from 0."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return sched.initial_rate * sched.drop_factor ** (epoch // sched.drop_period_epochs)
