"""Differentiable operations on (B, C, D, H, W) tensors.

Only what the segmentation network needs: strided/padded 3-D convolution and
its transpose, instance normalisation, leaky ReLU, channel softmax, channel
concatenation, element-wise product, factor-2 resampling and the Dice /
cross-entropy losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import ShapeError, Tensor

Triple = Tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t  # type: ignore[return-value]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class ConvParams:
    """Weights of a 3-D convolution.

    ``kernel`` has shape (C_out, C_in, kD, kH, kW). The transpose op uses the
    same layout and maps C_out channels back to C_in.
    """

    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.kernel.ndim != 5 or min(self.kernel.shape) < 1:
            raise ShapeError(f"kernel must be 5-D with positive dims, got {self.kernel.shape}")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")


# ---------------------------------------------------------------------------
# im2col machinery


def _conv_out_size(size: Sequence[int], k: Sequence[int], stride: Triple, pad: Triple) -> Triple:
    out = tuple((s + 2 * p - kk) // st + 1 for s, kk, st, p in zip(size, k, stride, pad))
    if min(out) < 1:
        raise ShapeError(f"spatial size {tuple(size)} too small for kernel {tuple(k)} with padding {pad}")
    return out  # type: ignore[return-value]


def _im2col(xp: np.ndarray, k: Sequence[int], stride: Triple, out: Triple) -> np.ndarray:
    """Columns of shape (B, C, kD, kH, kW, oD, oH, oW) from a padded input."""
    B, C = xp.shape[:2]
    kd, kh, kw = k
    sd, sh, sw = stride
    od, oh, ow = out
    cols = np.empty((B, C, kd, kh, kw, od, oh, ow), dtype=xp.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                cols[:, :, a, b, c] = xp[
                    :, :, a : a + sd * od : sd, b : b + sh * oh : sh, c : c + sw * ow : sw
                ]
    return cols


def _col2im(cols: np.ndarray, padded_shape: Sequence[int], stride: Triple) -> np.ndarray:
    B, C, kd, kh, kw, od, oh, ow = cols.shape
    sd, sh, sw = stride
    xp = np.zeros((B, C) + tuple(padded_shape), dtype=cols.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                xp[:, :, a : a + sd * od : sd, b : b + sh * oh : sh, c : c + sw * ow : sw] += cols[
                    :, :, a, b, c
                ]
    return xp


def _pad(x: np.ndarray, pad: Triple) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))


def _crop(x: np.ndarray, pad: Triple) -> np.ndarray:
    if not any(pad):
        return x
    sl = tuple(slice(p, s - p) for p, s in zip(pad, x.shape[2:]))
    return x[(slice(None), slice(None)) + sl]


def _slab_im2col(xp: np.ndarray, k: Sequence[int], stride: Triple, out: Triple) -> np.ndarray:
    """In-plane columns (B, C, kH, kW, Dp, oH, oW) keeping the full padded depth.

    With unit depth stride, the depth taps become row offsets into the same
    buffer, so only kH*kW copies of the input are made instead of kD*kH*kW.
    """
    B, C, Dp = xp.shape[:3]
    _, kh, kw = k
    _, sh, sw = stride
    _, oh, ow = out
    cols = np.empty((B, C, kh, kw, Dp, oh, ow), dtype=xp.dtype)
    for b in range(kh):
        for c in range(kw):
            cols[:, :, b, c] = xp[:, :, :, b : b + sh * oh : sh, c : c + sw * ow : sw]
    return cols


def _depth_weights(w: np.ndarray) -> list:
    return [np.ascontiguousarray(w[:, :, a].reshape(w.shape[0], -1)) for a in range(w.shape[2])]


def _forward_conv(x: np.ndarray, w: np.ndarray, stride: Triple, pad: Triple):
    B = x.shape[0]
    Co = w.shape[0]
    k = w.shape[2:]
    out = _conv_out_size(x.shape[2:], k, stride, pad)
    xp = _pad(x, pad)
    if stride[0] == 1:
        cols = _slab_im2col(xp, k, stride, out)
        plane = out[1] * out[2]
        n = out[0] * plane
        cm = cols.reshape(B, -1, xp.shape[2] * plane)
        y = np.zeros((B, Co, n), dtype=x.dtype)
        for a, wk in enumerate(_depth_weights(w)):
            for b in range(B):
                y[b] += wk @ cm[b, :, a * plane : a * plane + n]
        return y.reshape((B, Co) + out), ("slab", cols)
    cols = _im2col(xp, k, stride, out)
    wm = w.reshape(Co, -1)
    y = np.matmul(wm, cols.reshape(B, wm.shape[1], -1))
    return y.reshape((B, Co) + out), ("full", cols)


def _transpose_conv(y: np.ndarray, w: np.ndarray, stride: Triple, pad: Triple, in_size: Sequence[int]):
    """Adjoint of the strided convolution: maps (B, C_out, o...) to (B, C_in, in_size...)."""
    B, Co = y.shape[:2]
    Ci = w.shape[1]
    k = w.shape[2:]
    out = tuple(y.shape[2:])
    padded = tuple(s + 2 * p for s, p in zip(in_size, pad))
    if stride[0] == 1:
        plane = out[1] * out[2]
        n = out[0] * plane
        Dp = padded[0]
        gcols = np.zeros((B, Ci * k[1] * k[2], Dp * plane), dtype=y.dtype)
        ym = y.reshape(B, Co, n)
        for a, wk in enumerate(_depth_weights(w)):
            wt = wk.T
            for b in range(B):
                gcols[b, :, a * plane : a * plane + n] += wt @ ym[b]
        gcols = gcols.reshape((B, Ci, k[1], k[2], Dp) + out[1:])
        _, sh, sw = stride
        _, oh, ow = out
        xp = np.zeros((B, Ci) + padded, dtype=y.dtype)
        for b in range(k[1]):
            for c in range(k[2]):
                xp[:, :, :, b : b + sh * oh : sh, c : c + sw * ow : sw] += gcols[:, :, b, c]
        return _crop(xp, pad)
    wm = w.reshape(Co, -1)
    gcols = np.matmul(wm.T, y.reshape(B, Co, -1))
    gcols = gcols.reshape((B, Ci) + tuple(k) + out)
    return _crop(_col2im(gcols, padded, stride), pad)


def _weight_grad(g: np.ndarray, ctx, w_shape) -> np.ndarray:
    mode, cols = ctx
    B, Co = g.shape[:2]
    gm = g.reshape(B, Co, -1)
    if mode == "slab":
        kd = w_shape[2]
        n = gm.shape[2]
        plane = cols.shape[-1] * cols.shape[-2]
        cm = cols.reshape(B, -1, cols.shape[4] * plane)
        parts = []
        for a in range(kd):
            acc = np.zeros((Co, cm.shape[1]), dtype=g.dtype)
            for b in range(B):
                acc += gm[b] @ cm[b, :, a * plane : a * plane + n].T
            parts.append(acc.reshape((Co, w_shape[1], 1) + tuple(w_shape[3:])))
        return np.concatenate(parts, axis=2)
    cm = cols.reshape(B, -1, gm.shape[2])
    gw = np.zeros((Co, cm.shape[1]), dtype=g.dtype)
    for b in range(B):
        gw += gm[b] @ cm[b].T
    return gw.reshape(w_shape)


# ---------------------------------------------------------------------------
# convolutions


def conv3d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with stride and zero padding."""
    w = p.kernel
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects (B, C, D, H, W), got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    y, ctx = _forward_conv(x.data, w.data, p.stride, p.padding)
    b = p.bias
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1, 1)
    in_size = x.shape[2:]

    def backward(g):
        if w.requires_grad:
            w._accumulate(_weight_grad(g, ctx, w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            x._accumulate(_transpose_conv(g, w.data, p.stride, p.padding, in_size))

    parents = [x, w] + ([b] if b is not None else [])
    return Tensor._from_op(y, parents, backward, "conv3d")


def transpose_output_size(size: Sequence[int], p: ConvParams) -> Triple:
    k = p.kernel.shape[2:]
    return tuple((s - 1) * st - 2 * pd + kk for s, st, pd, kk in zip(size, p.stride, p.padding, k))  # type: ignore[return-value]


def conv_transpose3d(x: Tensor, p: ConvParams, output_size: Optional[Sequence[int]] = None) -> Tensor:
    """Transposed convolution: the adjoint of :func:`conv3d` with the same params.

    Output spatial size is ``(S - 1) * stride - 2 * pad + k`` unless
    ``output_size`` picks one of the up to ``stride - 1`` larger sizes that a
    strided convolution maps onto the same ``S``. The bias, when present, has
    one entry per *input* channel of the kernel layout.
    """
    w = p.kernel
    if x.ndim != 5:
        raise ShapeError(f"conv_transpose3d expects (B, C, D, H, W), got {x.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d: input has {x.shape[1]} channels, kernel expects {w.shape[0]}")
    out_size = transpose_output_size(x.shape[2:], p)
    if output_size is not None:
        req = tuple(int(v) for v in output_size)
        if len(req) != 3 or any(not 0 <= r - o < st for r, o, st in zip(req, out_size, p.stride)):
            raise ShapeError(f"conv_transpose3d: output_size {req} incompatible with minimum {out_size} and stride {p.stride}")
        out_size = req
    if min(out_size) < 1:
        raise ShapeError(f"conv_transpose3d: non-positive output size {out_size}")
    y = _transpose_conv(x.data, w.data, p.stride, p.padding, out_size)
    b = p.bias
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        need_w = w.requires_grad
        if need_w or x.requires_grad:
            gx, ctx = _forward_conv(g, w.data, p.stride, p.padding)
            if x.requires_grad:
                x._accumulate(gx)
            if need_w:
                # <convT(x), g> = <x, conv(g)>  =>  dW = sum_b x_b cols(g)_b^T
                w._accumulate(_weight_grad(x.data, ctx, w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3, 4)))

    parents = [x, w] + ([b] if b is not None else [])
    return Tensor._from_op(y, parents, backward, "conv_transpose3d")


# ---------------------------------------------------------------------------
# normalisation and activations


def instance_norm(
    x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5
) -> Tensor:
    axes = tuple(range(2, x.ndim))
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    shape = (1, -1) + (1,) * len(axes)
    y = xhat
    if weight is not None:
        y = y * weight.data.reshape(shape)
    if bias is not None:
        y = y + bias.data.reshape(shape)

    def backward(g):
        if weight is not None and weight.requires_grad:
            weight._accumulate((g * xhat).sum(axis=(0,) + axes))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0,) + axes))
        if x.requires_grad:
            gh = g * weight.data.reshape(shape) if weight is not None else g
            m1 = gh.mean(axis=axes, keepdims=True)
            m2 = (gh * xhat).mean(axis=axes, keepdims=True)
            x._accumulate(inv * (gh - m1 - xhat * m2))

    parents = [x] + [t for t in (weight, bias) if t is not None]
    return Tensor._from_op(y, parents, backward, "instance_norm")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, slope * x.data)

    def backward(g):
        x._accumulate(np.where(pos, g, slope * g))

    return Tensor._from_op(y, [x], backward, "leaky_relu")


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return Tensor._from_op(s, [x], backward, "softmax_channels")


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    return Tensor._from_op(y, [a, b], backward, "concat_channels")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: {a.shape} vs {b.shape}")
    y = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor._from_op(y, [a, b], backward, "elementwise_mul")


mul = elementwise_mul


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor._from_op(y, [a, b], backward, "add")


def scale(a: Tensor, k: float) -> Tensor:
    def backward(g):
        a._accumulate(g * k)

    return Tensor._from_op(a.data * k, [a], backward, "scale")


def channel_sum(x: Tensor, start: int, stop: Optional[int] = None) -> Tensor:
    """Sum of channels ``start:stop``, kept as a single channel."""
    y = x.data[:, start:stop].sum(axis=1, keepdims=True)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    return Tensor._from_op(y, [x], backward, "channel_sum")


def _check_even(x: Tensor, op: str) -> None:
    if any(s % 2 for s in x.shape[2:]):
        raise ShapeError(f"{op}: spatial dims {x.shape[2:]} not divisible by 2")


def downsample(x: Tensor, mode: str = "mean") -> Tensor:
    """Halve every spatial dim. ``mean`` averages 2x2x2 blocks, ``nearest`` keeps the first voxel."""
    _check_even(x, "downsample")
    B, C, D, H, W = x.shape
    if mode == "mean":
        y = x.data.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2).mean(axis=(3, 5, 7))

        def backward(g):
            gg = np.broadcast_to(g[:, :, :, None, :, None, :, None] / 8.0, (B, C, D // 2, 2, H // 2, 2, W // 2, 2))
            x._accumulate(gg.reshape(x.shape))

    elif mode == "nearest":
        y = np.ascontiguousarray(x.data[:, :, ::2, ::2, ::2])

        def backward(g):
            full = np.zeros_like(x.data)
            full[:, :, ::2, ::2, ::2] = g
            x._accumulate(full)

    else:
        raise ValueError(f"unknown downsample mode {mode!r}")
    return Tensor._from_op(y, [x], backward, "downsample")


def _linear_up_matrix(n: int, dtype) -> np.ndarray:
    """(2n, n) matrix of half-pixel-centred linear interpolation with edge clamping."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        t = src - lo
        lo_c = min(max(lo, 0), n - 1)
        hi_c = min(max(lo + 1, 0), n - 1)
        m[i, lo_c] += 1.0 - t
        m[i, hi_c] += t
    return m


def _apply_along(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    y = np.tensordot(x, m, axes=([axis], [1]))
    return np.moveaxis(y, -1, axis)


def upsample(x: Tensor, mode: str = "trilinear") -> Tensor:
    """Double every spatial dim."""
    if mode == "nearest":
        y = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

        def backward(g):
            B, C, D, H, W = g.shape
            x._accumulate(g.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2).sum(axis=(3, 5, 7)))

    elif mode == "trilinear":
        mats = [_linear_up_matrix(n, x.dtype) for n in x.shape[2:]]
        y = x.data
        for ax, m in zip((2, 3, 4), mats):
            y = _apply_along(y, m, ax)
        y = np.ascontiguousarray(y)

        def backward(g):
            gx = g
            for ax, m in zip((2, 3, 4), mats):
                gx = _apply_along(gx, m.T, ax)
            x._accumulate(np.ascontiguousarray(gx))

    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return Tensor._from_op(y, [x], backward, "upsample")


# ---------------------------------------------------------------------------
# losses


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(B, D, H, W) integer labels -> (B, C, D, H, W) one-hot."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside 0..{num_classes - 1}")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def dice_loss(prob: Tensor, target: np.ndarray, eps: float = 1e-5) -> Tensor:
    """1 - mean over foreground channels of the soft Dice, pooled over batch and space."""
    target = np.asarray(target, dtype=prob.dtype)
    if prob.shape != target.shape:
        raise ShapeError(f"dice_loss: {prob.shape} vs {target.shape}")
    axes = (0,) + tuple(range(2, prob.ndim))
    p = prob.data[:, 1:]
    t = target[:, 1:]
    nf = p.shape[1]
    inter = (p * t).sum(axis=axes)
    denom = p.sum(axis=axes) + t.sum(axis=axes) + eps
    ratio = (2 * inter + eps) / denom
    loss = np.asarray(1.0 - ratio.mean(), dtype=prob.dtype)

    def backward(g):
        shape = (1, nf) + (1,) * (prob.ndim - 2)
        d = (2 * t * denom.reshape(shape) - (2 * inter + eps).reshape(shape)) / (denom**2).reshape(shape)
        full = np.zeros_like(prob.data)
        full[:, 1:] = -(float(g) / nf) * d
        prob._accumulate(full)

    return Tensor._from_op(loss, [prob], backward, "dice_loss")


def ce_loss(prob: Tensor, target: np.ndarray) -> Tensor:
    """-mean over voxels of log prob at the target class."""
    target = np.asarray(target, dtype=prob.dtype)
    if prob.shape != target.shape:
        raise ShapeError(f"ce_loss: {prob.shape} vs {target.shape}")
    floor = np.finfo(prob.dtype).tiny ** 0.5
    p_t = (prob.data * target).sum(axis=1, keepdims=True)
    clipped = p_t < floor
    p_safe = np.maximum(p_t, floor)
    n_vox = p_t.size
    loss = np.asarray(-np.log(p_safe).sum() / n_vox, dtype=prob.dtype)

    def backward(g):
        # no gradient through the clamp
        coef = np.where(clipped, 0.0, -float(g) / (n_vox * p_safe)).astype(prob.dtype)
        prob._accumulate(coef * target)

    return Tensor._from_op(loss, [prob], backward, "ce_loss")
