"""Differentiable numeric kernels on top of the tape.

Conventions used throughout the model code:
  video/feature tensors  [N, C, T, H, W]
  kernels                [C_out, C_in, kT, kH, kW]
  padding                zero-fill only
  resampling             half-pixel sample positions (align_corners false),
                         linear per axis, edges clamped
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .tensor import (
    NumericsError,
    ShapeError,
    Tensor,
    as_tensor,
    record_op,
    register_op_sugar,
)

# im2col buffers above this many elements are processed in row blocks to
# bound peak memory; small (tested) shapes always take the single-block path.
_COLS_BLOCK_ELEMS = 1 << 25


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    with np.errstate(all="ignore"):
        out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record_op("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    with np.errstate(all="ignore"):
        out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record_op("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    with np.errstate(all="ignore"):
        out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return record_op("mul", out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    with np.errstate(all="ignore"):
        out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return record_op("div", out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return record_op("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return record_op("log", out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out),)

    return record_op("sqrt", out, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        return (g * mask,)

    return record_op("clip", out, (a,), backward)


# ---------------------------------------------------------------------------
# activations


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return record_op("sigmoid", out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0),)

    return record_op("relu", out, (a,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    # Exact Gaussian-CDF form, not the tanh approximation.
    cdf = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return record_op("gelu", out, (a,), backward)


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        return {"sigmoid": sigmoid, "relu": relu, "gelu": gelu}[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation '{kind}'") from None


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, a.data.shape).copy(),)

    return record_op("sum", np.asarray(out), (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.data.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk / count, a.data.shape).copy(),)

    return record_op("mean", np.asarray(out), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return record_op("reshape", np.ascontiguousarray(out), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record_op("transpose", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return record_op("concat", out, tensors, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl].copy()

    def backward(g):
        dx = np.zeros_like(a.data)
        dx[sl] = g
        return (dx,)

    return record_op("narrow", out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return record_op("matmul", out, (a, b), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record_op("softmax", out, (a,), backward)


def normalize(a: Tensor, axes, eps: float) -> Tensor:
    """Zero-mean unit-variance normalization over ``axes`` (pre-affine).

    Shared core of layer norm (feature axes) and train-mode batch norm
    (batch plus spatial axes).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.data.shape[i] for i in axes]))
    if count == 0:
        raise ShapeError("empty normalization group")
    mu = a.data.mean(axis=axes, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (a.data - mu) * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * out).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - out * gym),)

    return record_op("normalize", out, (a,), backward)


def layer_norm(a: Tensor, axes, eps: float = 1e-5) -> Tensor:
    return normalize(a, axes, eps)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the trailing axis: [.., D_in] -> [.., D_out]."""
    d_in = x.shape[-1]
    if weight.shape[1] != d_in:
        raise ShapeError(f"linear: input dim {d_in} vs weight {tuple(weight.shape)}")
    lead = x.shape[:-1]
    x2 = reshape(x, (-1, d_in))
    y2 = matmul(x2, transpose(weight, (1, 0)))
    if bias is not None:
        y2 = add(y2, bias)
    return reshape(y2, (*lead, weight.shape[0]))


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, T, H, W] -> [N, C], mean over T, H, W."""
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool expects 5-D input, got {x.shape}")
    return tensor_mean(x, axis=(2, 3, 4))


# ---------------------------------------------------------------------------
# 3-D convolution (im2col forward, transposed-conv input gradient)


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return t


def _conv_out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, kshape, stride, t_lo, t_hi):
    """Patch matrix for output temporal rows [t_lo, t_hi); column order (C, kT, kH, kW)."""
    kT, kH, kW = kshape
    sT, sH, sW = stride
    view = np.lib.stride_tricks.sliding_window_view(xp, (kT, kH, kW), axis=(2, 3, 4))
    view = view[:, :, t_lo * sT : (t_hi - 1) * sT + 1 : sT, ::sH, ::sW]
    n, c = view.shape[0], view.shape[1]
    to, ho, wo = view.shape[2], view.shape[3], view.shape[4]
    cols = view.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * to * ho * wo, c * kT * kH * kW)
    return np.ascontiguousarray(cols), (to, ho, wo)


def _conv3d_raw(xp: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    """Convolution of a pre-padded input, blocked over the output T axis."""
    n = xp.shape[0]
    c_out = w.shape[0]
    kshape = w.shape[2:]
    to = _conv_out_size(xp.shape[2], kshape[0], stride[0], 0)
    ho = _conv_out_size(xp.shape[3], kshape[1], stride[1], 0)
    wo = _conv_out_size(xp.shape[4], kshape[2], stride[2], 0)
    w2 = w.reshape(c_out, -1)
    out = np.empty((n, c_out, to, ho, wo), dtype=xp.dtype)
    rows_per_t = n * ho * wo
    block = max(1, _COLS_BLOCK_ELEMS // max(1, rows_per_t * w2.shape[1]))
    for t_lo in range(0, to, block):
        t_hi = min(to, t_lo + block)
        cols, (tb, _, _) = _im2col(xp, kshape, stride, t_lo, t_hi)
        res = cols @ w2.T
        out[:, :, t_lo:t_hi] = res.reshape(n, tb, ho, wo, c_out).transpose(0, 4, 1, 2, 3)
    return out


def _pointwise_conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """1x1x1 stride-1 convolution as a plain channel matmul."""
    n, c, t, h, w = x.shape
    c_out = weight.shape[0]
    w2 = weight.data.reshape(c_out, c)
    xm = x.data.reshape(n, c, -1)
    out = np.einsum("oc,ncp->nop", w2, xm, optimize=True).reshape(n, c_out, t, h, w)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    has_bias = bias is not None

    def backward(g):
        gm = g.reshape(n, c_out, -1)
        dW = np.einsum("nop,ncp->oc", gm, xm, optimize=True).reshape(weight.data.shape)
        dx = np.einsum("oc,nop->ncp", w2, gm, optimize=True).reshape(x.data.shape)
        if has_bias:
            return np.ascontiguousarray(dx), dW, gm.sum(axis=(0, 2))
        return np.ascontiguousarray(dx), dW

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("conv3d", np.ascontiguousarray(out), inputs, backward)


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=(1, 1, 1),
    padding=(0, 0, 0),
) -> Tensor:
    """3-D convolution of [N, C, T, H, W] with [C_out, C, kT, kH, kW]."""
    stride = _triple(stride)
    padding = _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input/kernel, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape[1]} vs kernel {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3d bias shape {tuple(bias.shape)} vs C_out {weight.shape[0]}")
    kshape = weight.shape[2:]
    in_sizes = x.shape[2:]
    for n_in, k, s, p in zip(in_sizes, kshape, stride, padding):
        if n_in + 2 * p < k:
            raise ShapeError(f"kernel {kshape} larger than padded input {in_sizes} (pad {padding})")
        if s < 1:
            raise ValueError("stride must be >= 1")

    if kshape == (1, 1, 1) and stride == (1, 1, 1) and padding == (0, 0, 0):
        return _pointwise_conv3d(x, weight, bias)

    pT, pH, pW = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pT, pT), (pH, pH), (pW, pW)))
    n = x.shape[0]
    c_out = weight.shape[0]
    to = _conv_out_size(in_sizes[0], kshape[0], stride[0], pT)
    ho = _conv_out_size(in_sizes[1], kshape[1], stride[1], pH)
    wo = _conv_out_size(in_sizes[2], kshape[2], stride[2], pW)
    w2 = weight.data.reshape(c_out, -1)
    if n * to * ho * wo * w2.shape[1] <= _COLS_BLOCK_ELEMS:
        # Single block: keep the patch matrix for the weight gradient.
        cols_cache, _ = _im2col(xp, kshape, stride, 0, to)
        out = np.ascontiguousarray(
            (cols_cache @ w2.T).reshape(n, to, ho, wo, c_out).transpose(0, 4, 1, 2, 3)
        )
    else:
        cols_cache = None
        out = _conv3d_raw(xp, weight.data, stride)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)

    x_shape = x.shape
    w_data = weight.data
    has_bias = bias is not None

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, c_out)

        # d/d(weight): gmatᵀ @ cols, blocked over T when cols was not kept.
        if cols_cache is not None:
            dW = gmat.T @ cols_cache
        else:
            dW = np.zeros((c_out, w_data[0].size), dtype=g.dtype)
            rows_per_t = n * ho * wo
            block = max(1, _COLS_BLOCK_ELEMS // max(1, rows_per_t * dW.shape[1]))
            for t_lo in range(0, to, block):
                t_hi = min(to, t_lo + block)
                cols, _ = _im2col(xp, kshape, stride, t_lo, t_hi)
                gblk = np.ascontiguousarray(
                    g[:, :, t_lo:t_hi].transpose(0, 2, 3, 4, 1)
                ).reshape(-1, c_out)
                dW += gblk.T @ cols
        dW = dW.reshape(w_data.shape)

        # d/d(input): transposed convolution. Dilate the gradient by the
        # stride, pad by (k-1) plus the stride remainder, correlate with the
        # flipped kernel, then crop the original padding.
        dil_sizes = [(o - 1) * s + 1 for o, s in zip((to, ho, wo), stride)]
        g_dil = np.zeros((n, c_out, *dil_sizes), dtype=g.dtype)
        g_dil[:, :, :: stride[0], :: stride[1], :: stride[2]] = g
        rem = [
            (i + 2 * p - k) % s
            for i, k, s, p in zip(in_sizes, kshape, stride, padding)
        ]
        g_pad = np.pad(
            g_dil,
            (
                (0, 0),
                (0, 0),
                (kshape[0] - 1, kshape[0] - 1 + rem[0]),
                (kshape[1] - 1, kshape[1] - 1 + rem[1]),
                (kshape[2] - 1, kshape[2] - 1 + rem[2]),
            ),
        )
        w_flip = np.ascontiguousarray(
            w_data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
        )
        dxp = _conv3d_raw(g_pad, w_flip, (1, 1, 1))
        dx = dxp[
            :,
            :,
            pT : pT + in_sizes[0],
            pH : pH + in_sizes[1],
            pW : pW + in_sizes[2],
        ]
        db = gmat.sum(axis=0) if has_bias else None
        if has_bias:
            return np.ascontiguousarray(dx), dW, db
        return np.ascontiguousarray(dx), dW

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("conv3d", out, inputs, backward)


# ---------------------------------------------------------------------------
# trilinear resampling (separable linear interpolation, half-pixel centers)


def _axis_coords(n_in: int, n_out: int, dtype):
    # Source position of output sample j: (j + 0.5) * n_in/n_out - 0.5
    src = (np.arange(n_out, dtype=dtype) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    return lo, hi, frac


def _lerp_axis(arr: np.ndarray, axis: int, n_out: int):
    lo, hi, frac = _axis_coords(arr.shape[axis], n_out, arr.dtype)
    a0 = np.take(arr, lo, axis=axis)
    a1 = np.take(arr, hi, axis=axis)
    fshape = [1] * arr.ndim
    fshape[axis] = n_out
    f = frac.reshape(fshape)
    # a0 + f*(a1-a0) keeps constants exact and never leaves [min, max].
    return a0 + f * (a1 - a0), (lo, hi, frac)


def _lerp_axis_T(g: np.ndarray, axis: int, n_in: int, coords):
    lo, hi, frac = coords
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    dx = np.zeros(out_shape, dtype=g.dtype)
    fshape = [1] * g.ndim
    fshape[axis] = g.shape[axis]
    f = frac.reshape(fshape)
    idx_lo = [slice(None)] * g.ndim
    idx_hi = [slice(None)] * g.ndim
    idx_lo[axis] = lo
    idx_hi[axis] = hi
    np.add.at(dx, tuple(idx_lo), g * (1.0 - f))
    np.add.at(dx, tuple(idx_hi), g * f)
    return dx


def resize_trilinear(x: Tensor, out_sizes) -> Tensor:
    """Resample the (T, H, W) axes of [N, C, T, H, W] to ``out_sizes``."""
    if x.ndim != 5:
        raise ShapeError(f"resize_trilinear expects 5-D input, got {x.shape}")
    out_sizes = tuple(int(s) for s in out_sizes)
    if any(s < 1 for s in out_sizes) or any(s < 1 for s in x.shape[2:]):
        raise ShapeError("resize with empty axis")
    in_sizes = x.shape[2:]

    data = x.data
    coords = []
    for axis, n_out in zip((4, 3, 2), (out_sizes[2], out_sizes[1], out_sizes[0])):
        if data.shape[axis] == n_out:
            coords.append(None)
            continue
        data, c = _lerp_axis(data, axis, n_out)
        coords.append(c)

    def backward(g):
        dx = g
        for axis, n_in, c in zip((2, 3, 4), in_sizes, reversed(coords)):
            if c is None:
                continue
            dx = _lerp_axis_T(dx, axis, n_in, c)
        return (np.ascontiguousarray(dx),)

    return record_op("resize_trilinear", np.ascontiguousarray(data), (x,), backward)


def trilinear_upsample(x: Tensor, scale) -> Tensor:
    """Upsample (T, H, W) by per-axis factors >= 1."""
    scale = _triple(scale) if not isinstance(scale, (int, float)) else (scale, scale, scale)
    if any(s < 1 for s in scale):
        raise ValueError(f"upsample factors must be >= 1, got {scale}")
    out_sizes = []
    for n_in, s in zip(x.shape[2:], scale):
        n_out = n_in * s
        if abs(n_out - round(n_out)) > 1e-9:
            raise ValueError(f"scale {s} of size {n_in} gives non-integer output")
        out_sizes.append(int(round(n_out)))
    return resize_trilinear(x, out_sizes)


# ---------------------------------------------------------------------------
# deformable convolution (2-D offsets per spatial tap, unit temporal extent)


def deformable_conv3d(
    x: Tensor,
    offsets: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Shape-preserving deformable convolution.

    ``weight`` is [C_out, C, 1, kH, kW] with odd kH, kW; ``offsets`` is
    [N, 2*kH*kW, T, H, W], channel pairs (dy, dx) per tap in row-major tap
    order. Each tap samples bilinearly at its displaced position inside the
    same frame; samples outside the frame read as zero.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError("deformable_conv3d expects 5-D input and kernel")
    c_out, c_in, kT, kH, kW = weight.shape
    if kT != 1:
        raise ShapeError("deformable kernel must have temporal extent 1")
    if kH % 2 != 1 or kW % 2 != 1:
        raise ShapeError("deformable kernel spatial dims must be odd")
    if x.shape[1] != c_in:
        raise ShapeError(f"channel mismatch: input {x.shape[1]} vs kernel {c_in}")
    n, _, t, h, w = x.shape
    k = kH * kW
    if offsets.shape != (n, 2 * k, t, h, w):
        raise ShapeError(
            f"offsets shape {tuple(offsets.shape)} != {(n, 2 * k, t, h, w)}"
        )

    dtype = x.data.dtype
    xv = np.ascontiguousarray(x.data.transpose(0, 2, 3, 4, 1))  # [N,T,H,W,C]
    base_y = np.arange(h, dtype=dtype).reshape(1, 1, h, 1)
    base_x = np.arange(w, dtype=dtype).reshape(1, 1, 1, w)
    n_idx = np.arange(n).reshape(n, 1, 1, 1)
    t_idx = np.arange(t).reshape(1, t, 1, 1)

    tap_state = []
    sampled = np.empty((n, t, h, w, c_in, k), dtype=dtype)
    for tap in range(k):
        ky, kx = divmod(tap, kW)
        py = base_y + (ky - kH // 2) + offsets.data[:, 2 * tap]
        px = base_x + (kx - kW // 2) + offsets.data[:, 2 * tap + 1]
        y0 = np.floor(py)
        x0 = np.floor(px)
        fy = py - y0
        fx = px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        corners = []
        acc = np.zeros((n, t, h, w, c_in), dtype=dtype)
        for ay, ax, wgt in (
            (0, 0, (1.0 - fy) * (1.0 - fx)),
            (0, 1, (1.0 - fy) * fx),
            (1, 0, fy * (1.0 - fx)),
            (1, 1, fy * fx),
        ):
            yy = y0 + ay
            xx = x0 + ax
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            val = xv[n_idx, t_idx, yc, xc, :] * valid[..., None]
            acc += wgt[..., None] * val
            corners.append((yc, xc, valid, wgt))
        sampled[..., tap] = acc
        tap_state.append((y0, x0, fy, fx, corners))

    cols = np.ascontiguousarray(sampled.reshape(n * t * h * w, c_in * k))
    w2 = weight.data.reshape(c_out, c_in * k)
    res = cols @ w2.T
    out = np.ascontiguousarray(res.reshape(n, t, h, w, c_out).transpose(0, 4, 1, 2, 3))
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError("deformable bias shape mismatch")
        out = out + bias.data.reshape(1, -1, 1, 1, 1)

    has_bias = bias is not None

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, c_out)
        dW = (gmat.T @ cols).reshape(weight.data.shape)
        dcols = (gmat @ w2).reshape(n, t, h, w, c_in, k)
        dxv = np.zeros_like(xv)
        doff = np.zeros((n, 2 * k, t, h, w), dtype=dtype)
        for tap in range(k):
            y0, x0, fy, fx, corners = tap_state[tap]
            dtap = dcols[..., tap]  # [N,T,H,W,C]
            dpy = np.zeros((n, t, h, w), dtype=dtype)
            dpx = np.zeros((n, t, h, w), dtype=dtype)
            signs = ((-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0))
            fweights_y = (1.0 - fx, fx, 1.0 - fx, fx)
            fweights_x = (1.0 - fy, 1.0 - fy, fy, fy)
            for (yc, xc, valid, wgt), (sy, sx), wy, wx in zip(
                corners, signs, fweights_y, fweights_x
            ):
                val = xv[n_idx, t_idx, yc, xc, :] * valid[..., None]
                contrib = (dtap * val).sum(axis=-1)
                dpy += sy * wy * contrib
                dpx += sx * wx * contrib
                gval = dtap * (wgt * valid)[..., None]
                np.add.at(dxv, (n_idx, t_idx, yc, xc), gval)
            doff[:, 2 * tap] = dpy
            doff[:, 2 * tap + 1] = dpx
        dx = np.ascontiguousarray(dxv.transpose(0, 4, 1, 2, 3))
        if has_bias:
            return dx, doff, dW, gmat.sum(axis=0)
        return dx, doff, dW

    inputs = (x, offsets, weight) if bias is None else (x, offsets, weight, bias)
    return record_op("deformable_conv3d", out, inputs, backward)


# ---------------------------------------------------------------------------
# channel-group cyclic shift


def channel_shift(x: Tensor, axis: str, displacements: Sequence[int], boundary: str = "cyclic") -> Tensor:
    """Shift channel groups along a spatial axis.

    Channels split into ``len(displacements)`` nearly equal groups; group i is
    displaced by ``displacements[i]`` pixels along the named axis. Cyclic mode
    permutes entries (exactly invertible); zero mode discards rolled-over
    entries and fills with zero.
    """
    if x.ndim != 5:
        raise ShapeError("channel_shift expects [N, C, T, H, W]")
    try:
        ax = {"height": 3, "width": 4}[axis]
    except KeyError:
        raise ValueError(f"axis must be 'height' or 'width', got '{axis}'") from None
    if boundary not in ("cyclic", "zero"):
        raise ValueError(f"unknown boundary mode '{boundary}'")
    disp = [int(d) for d in displacements]
    groups = np.array_split(np.arange(x.shape[1]), len(disp))

    def apply_shift(arr, signs):
        out = np.empty_like(arr)
        for grp, d in zip(groups, signs):
            if len(grp) == 0:
                continue
            block = arr[:, grp]
            if d == 0:
                out[:, grp] = block
            elif boundary == "cyclic":
                out[:, grp] = np.roll(block, d, axis=ax)
            else:
                shifted = np.zeros_like(block)
                if d > 0:
                    src = [slice(None)] * 5
                    dst = [slice(None)] * 5
                    src[ax] = slice(0, block.shape[ax] - d)
                    dst[ax] = slice(d, None)
                else:
                    src = [slice(None)] * 5
                    dst = [slice(None)] * 5
                    src[ax] = slice(-d, None)
                    dst[ax] = slice(0, block.shape[ax] + d)
                shifted[tuple(dst)] = block[tuple(src)]
                out[:, grp] = shifted
        return out

    out = apply_shift(x.data, disp)

    def backward(g):
        return (apply_shift(g, [-d for d in disp]),)

    return record_op("channel_shift", out, (x,), backward)


# ---------------------------------------------------------------------------

register_op_sugar("add", add)
register_op_sugar("sub", sub)
register_op_sugar("mul", mul)
register_op_sugar("div", div)
register_op_sugar("matmul", matmul)
register_op_sugar("reshape", reshape)
register_op_sugar("transpose", transpose)
register_op_sugar("sum", tensor_sum)
register_op_sugar("mean", tensor_mean)


def conv3d_reference(x: np.ndarray, w: np.ndarray, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)) -> np.ndarray:
    """Direct six-nested-loop convolution; the independent oracle for conv3d."""
    stride = _triple(stride)
    padding = _triple(padding)
    n, c, t, h, wd = x.shape
    c_out, _, kt, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding[0],) * 2, (padding[1],) * 2, (padding[2],) * 2))
    to = _conv_out_size(t, kt, stride[0], padding[0])
    ho = _conv_out_size(h, kh, stride[1], padding[1])
    wo = _conv_out_size(wd, kw, stride[2], padding[2])
    out = np.zeros((n, c_out, to, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for co in range(c_out):
            for ti in range(to):
                for hi in range(ho):
                    for wi in range(wo):
                        patch = xp[
                            ni,
                            :,
                            ti * stride[0] : ti * stride[0] + kt,
                            hi * stride[1] : hi * stride[1] + kh,
                            wi * stride[2] : wi * stride[2] + kw,
                        ]
                        acc = 0.0
                        for ci in range(c):
                            acc += float(np.dot(patch[ci].ravel(), w[co, ci].ravel()))
                        out[ni, co, ti, hi, wi] = acc + (bias[co] if bias is not None else 0.0)
    return out
