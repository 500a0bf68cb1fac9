"""Differentiable operators over :class:`Tensor`.

Layout for feature maps is N x C x H x W. Convolutions are cross-correlations.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erfc, expit

from .tensor import Tensor, as_tensor, make_result, unbroadcast

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", a.data * b.data, (a, b), bw)


hadamard = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):  # non-finite results are rejected below
        out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def abs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return make_result("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# reductions and shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result("mean", np.asarray(out), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


view = reshape


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat shape mismatch: {ref} vs {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    widths = tuple(tuple(w) for w in widths)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_result("pad", np.pad(a.data, widths), (a,), lambda g: (g[index],))


def crop(a: Tensor, index: tuple) -> Tensor:
    """Basic (slice-only) indexing."""
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = np.reshape(g, out.shape)
        return (full,)

    return make_result("crop", np.ascontiguousarray(out), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    y = matmul(x, transpose(weight, (1, 0)))
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# convolution and pooling


def _zero_pad(a: np.ndarray, top: int, bottom: int, left: int, right: int, fill: float = 0.0) -> np.ndarray:
    if not (top or bottom or left or right):
        return a
    n, c, h, w = a.shape
    out = np.full((n, c, h + top + bottom, w + left + right), fill, dtype=a.dtype)
    out[:, :, top : top + h, left : left + w] = a
    return out


def resolve_padding(padding, kh: int, kw: int, stride: int, h: int, w: int) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right).

    ``"same"`` pads with zeros and puts any odd remainder on the bottom/right.
    """
    if isinstance(padding, str):
        if padding != "same":
            raise ValueError(f"unknown padding mode {padding!r}")
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    elif isinstance(padding, int):
        pads = (padding,) * 4
    elif len(padding) == 2:
        ph, pw = padding
        pads = (ph, ph, pw, pw)
    elif len(padding) == 4:
        pads = tuple(int(p) for p in padding)
    else:
        raise ValueError(f"bad padding spec {padding!r}")
    if min(pads) < 0:
        raise ValueError(f"padding must be non-negative, got {pads}")
    return pads


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding="same") -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape} vs kernel {kernel.shape} "
            "(expected N x C x H x W and C_out x C x kh x kw)"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    n, c, h, w = x.shape
    co, _, kh, kw = kernel.shape
    top, bottom, left, right = resolve_padding(padding, kh, kw, stride, h, w)
    xp = _zero_pad(x.data, top, bottom, left, right)
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ValueError(f"kernel {kernel.shape} larger than padded input {xp.shape}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(kernel.data[:, :, 0, 0], cols, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gx = gk = gb = None
        if kernel.requires_grad:
            if kh == 1 and kw == 1:
                gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            else:
                gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            if kh == 1 and kw == 1:
                gxp[:, :, : stride * ho : stride, : stride * wo : stride] = np.tensordot(
                    kernel.data[:, :, 0, 0], g, axes=([0], [1])
                ).transpose(1, 0, 2, 3)
            else:
                gcols = np.tensordot(g, kernel.data, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, top : top + h, left : left + w]
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding="same") -> Tensor:
    """Per-channel spatial convolution, stride 1.

    ``kernel`` is C x kh x kw; channel c of the output depends only on channel c
    of the input.
    """
    if x.ndim != 4 or kernel.ndim != 3 or kernel.shape[0] != x.shape[1]:
        raise ValueError(f"depthwise_conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    n, c, h, w = x.shape
    _, kh, kw = kernel.shape
    top, bottom, left, right = resolve_padding(padding, kh, kw, 1, h, w)
    xp = _zero_pad(x.data, top, bottom, left, right)
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kernel.shape} larger than padded input {xp.shape}")
    k = kernel.data
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.data, k))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + ho, j : j + wo] * k[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.empty_like(k)
            for i in range(kh):
                for j in range(kw):
                    gk[:, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i : i + ho, j : j + wo])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho, j : j + wo] += g * k[None, :, i, j, None, None]
            gx = gxp[:, :, top : top + h, left : left + w]
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("depthwise_conv2d", out, inputs, bw)


def pool_output_size(size: int, window: int, stride: int) -> int:
    """Windows start at multiples of ``stride``; the last may be truncated."""
    return max(-(-(size - window) // stride), 0) + 1


def pool2d(x: Tensor, mode: str = "avg", window="global", stride: int | None = None) -> Tensor:
    """Average or max pooling over N x C x H x W.

    Windows never extend past the input border: a truncated edge window
    averages over the elements it actually covers. ``window="global"``
    reduces H x W to 1 x 1. Max ties send the gradient to the first maximum.
    """
    if mode not in ("avg", "max"):
        raise ValueError(f"pool mode must be 'avg' or 'max', got {mode!r}")
    n, c, h, w = x.shape
    if isinstance(window, str):
        if window != "global":
            raise ValueError(f"unknown window {window!r}")
        kh, kw = h, w
        sh, sw = h, w
    else:
        kh, kw = _pair(window)
        sh, sw = _pair(stride if stride is not None else (kh, kw))
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ValueError(f"empty pooling window {(kh, kw)} / stride {(sh, sw)}")
    kh, kw = min(kh, h), min(kw, w)
    ho, wo = pool_output_size(h, kh, sh), pool_output_size(w, kw, sw)
    hp, wp = (ho - 1) * sh + kh, (wo - 1) * sw + kw

    if kh == h and kw == w:
        flat = x.data.reshape(n, c, h * w)
        if mode == "avg":
            out = flat.mean(axis=2).reshape(n, c, 1, 1)

            def bw(g):
                return (np.broadcast_to(g / (h * w), x.shape).copy(),)
        else:
            idx = flat.argmax(axis=2)
            out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

            def bw(g):
                gx = np.zeros_like(flat)
                np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
                return (gx.reshape(x.shape),)

        return make_result(f"{mode}_pool", out, (x,), bw)

    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    if mode == "avg":
        xp = _zero_pad(x.data, 0, hp - h, 0, wp - w)
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        count = np.zeros((ho, wo))
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw][:, :, :ho, :wo]
                count += valid[i : i + sh * ho : sh, j : j + sw * wo : sw][:ho, :wo]
        out /= count

        def bw(g):
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            gs = g / count
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw][:, :, :ho, :wo] += gs
            gxp[:, :, ~valid] = 0.0
            return (gxp[:, :, :h, :w],)

        return make_result("avg_pool", out, (x,), bw)

    xp = _zero_pad(x.data, 0, hp - h, 0, wp - w, fill=-np.inf)
    out = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            cand = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw][:, :, :ho, :wo]
            better = cand > out
            out = np.where(better, cand, out)
            arg = np.where(better, i * kw + j, arg)

    def bw(g):
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                sel = arg == i * kw + j
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw][:, :, :ho, :wo] += np.where(sel, g, 0.0)
        return (gxp[:, :, :h, :w],)

    return make_result("max_pool", out, (x,), bw)


# ---------------------------------------------------------------------------
# normalisation and activations


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. Entries where ``mask`` is False get probability 0."""
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result("layer_norm", out, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x); erfc keeps Phi accurate deep in the left tail."""
    cdf = 0.5 * erfc(-x.data / _SQRT2)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return make_result("gelu", x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``.

    Slices with norm below ``eps`` are divided by ``eps`` instead, so the zero
    vector maps to itself.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    small = norm < eps

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(small, g / eps, (g - y * proj) / denom),)

    return make_result("l2_normalize", y, (x,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.dtype)
    return make_result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable form)."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return make_result("bce_with_logits", out, (logits,), lambda g: (g * (expit(z) - t),))
