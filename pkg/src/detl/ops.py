"""Differentiable primitives (NCHW layout, 3x3 convolutions only)."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result

KERNEL = 3


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class ConfigurationError(ValueError):
    """Stride/padding/window settings cannot produce a valid output."""


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def conv_output_extent(size: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - KERNEL
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"extent {size} with padding {padding} and stride {stride} does not tile a 3x3 kernel"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp is channels-last [B,Hp,Wp,C]; columns ordered (ky, kx, c)
    b, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    win = win[:, : stride * ho : stride, : stride * wo : stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, KERNEL * KERNEL * c)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation of ``x[B,Cin,H,W]`` with ``kernels[Cout,Cin,3,3]`` plus bias."""
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input [B,C,H,W], got shape {x.shape}")
    if kernels.data.ndim != 4 or kernels.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"conv2d kernels must be [Cout,Cin,3,3], got {kernels.shape}")
    b, cin, h, w = x.shape
    cout = kernels.shape[0]
    if kernels.shape[1] != cin:
        raise ShapeError(f"input has {cin} channels but kernels expect {kernels.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be positive and padding non-negative")
    ho = conv_output_extent(h, stride, padding)
    wo = conv_output_extent(w, stride, padding)

    # the public layout is NCHW; the patch matrix is cheaper to gather channels-last
    dtype = np.result_type(x.dtype, kernels.dtype)
    xp = np.zeros((b, h + 2 * padding, w + 2 * padding, cin), dtype=dtype)
    xp[:, padding : padding + h, padding : padding + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(xp, stride, ho, wo)
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))

    ctx = (x, kernels, bias, xp, cols, wmat, stride, padding)

    def backward_fn(g):
        return _conv2d_backward(g, ctx)

    return make_result("conv2d", out, (x, kernels, bias), backward_fn)


def _conv2d_backward(g: np.ndarray, ctx) -> tuple:
    x, kernels, bias, xp, cols, wmat, stride, padding = ctx
    b, cin, h, w = x.shape
    cout = kernels.shape[0]
    ho, wo = g.shape[2:]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    gk = gb = gx = None
    if kernels.requires_grad:
        gk = (g2.T @ cols).reshape(cout, KERNEL, KERNEL, cin).transpose(0, 3, 1, 2)
    if bias.requires_grad:
        gb = g2.sum(axis=0, dtype=np.float64)
    if x.requires_grad and stride == 1 and padding < KERNEL:
        # input gradient of a unit-stride correlation is a correlation of the
        # re-padded output gradient with the flipped, channel-swapped kernels
        q = KERNEL - 1 - padding
        gp = np.zeros((b, ho + 2 * q, wo + 2 * q, cout), dtype=g.dtype)
        gp[:, q : q + ho, q : q + wo, :] = g.transpose(0, 2, 3, 1)
        flipped = kernels.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, -1)
        gx = (_im2col(gp, 1, h, w) @ flipped.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
    elif x.requires_grad:
        gcols = (g2 @ wmat).reshape(b, ho, wo, KERNEL, KERNEL, cin)
        gxp = np.zeros(xp.shape, dtype=gcols.dtype)
        for ky in range(KERNEL):
            for kx in range(KERNEL):
                gxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :] += gcols[:, :, :, ky, kx, :]
        gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
    return gx, gk, gb


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/2 max pooling; ties route the gradient to the first element in scan order."""
    x = _as_tensor(x)
    if window != 2 or stride != 2:
        raise ConfigurationError("only 2x2 windows with stride 2 are supported")
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return make_result("maxpool2d", np.ascontiguousarray(out), (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward_fn(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return make_result("global_avg_pool", out, (x,), backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight[M,N]``."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense inner dimensions differ: input {x.shape[1]} vs weight {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0, dtype=np.float64) if bias.requires_grad else None
        return gx, gw, gb

    return make_result("dense", out, (x, weight, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward_fn(g):
        return (g * mask,)

    return make_result("relu", out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def backward_fn(g):
        return g, g

    return make_result("add", a.data + b.data, (a, b), backward_fn)


def flatten(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def backward_fn(g):
        return (g.reshape(shape),)

    return make_result("flatten", x.data.reshape(shape[0], -1), (x,), backward_fn)


def weighted_sum(x: Tensor, weights) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights; reduces any tensor to a probe loss."""
    x = _as_tensor(x)
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weights shape {weights.shape} differs from {x.shape}")
    out = np.asarray(np.sum(x.data.astype(np.float64) * weights), dtype=x.dtype)

    def backward_fn(g):
        return (weights * g,)

    return make_result("weighted_sum", out, (x,), backward_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy over the batch; returns ``(loss, probabilities)``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [B,C], got {logits.shape}")
    bsz, ncls = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"expected {bsz} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise ValueError(f"labels must lie in [0, {ncls})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    probs = np.exp(logp)
    rows = np.arange(bsz)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward_fn(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (float(g) / bsz),)

    return make_result("softmax_cross_entropy", loss, (logits,), backward_fn), Tensor(probs.astype(logits.dtype))
