"""Differentiable operations.

Every function takes :class:`Tensor` (or array-like constants), computes the
forward value with numpy and, when a tape is active and an input requires a
gradient, records the vector-Jacobian product on the tape.

Contractions go through ``np.einsum`` rather than BLAS: a BLAS product's
per-row result depends on how many rows are in the call, which would break
bit-exact equality between evaluating one location and evaluating it inside
a larger map.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import Node, OpKind, ShapeError, Tensor, current_tape

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    arr = np.asarray(x)
    if dtype is None and arr.dtype.kind != "f":
        dtype = np.float32
    return Tensor(arr, dtype=dtype)


def _record(kind: OpKind, inputs: Sequence[Tensor], out: np.ndarray, vjp, **attrs) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires, dtype=out.dtype)
    tape = current_tape()
    if requires and tape is not None:
        tape.record(Node(kind, tuple(inputs), result, vjp, attrs))
    return result


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = as_tensor(a, like=b)
    elif not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data
    return _record(OpKind.ADD, (a, b), out,
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("sub", a, b)
    out = a.data - b.data
    return _record(OpKind.SUB, (a, b), out,
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("mul_elementwise", a, b)
    out = a.data * b.data

    def vjp(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(OpKind.MUL, (a, b), out, vjp)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("div_elementwise", a, b)
    out = a.data / b.data

    def vjp(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(OpKind.DIV, (a, b), out, vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(OpKind.EXP, (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    return _record(OpKind.LOG, (x,), out, lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # stable for large |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _record(OpKind.SIGMOID, (x,), out, lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0).astype(x.dtype, copy=False)
    return _record(OpKind.RELU, (x,), out, lambda g: (g * (x.data > 0),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3))), c = sqrt(2/pi), a = 0.044715."""
    d = x.data
    inner = GELU_C * (d + GELU_A * d ** 3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def vjp(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * d ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _record(OpKind.GELU, (x,), out, vjp)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(OpKind.CLIP, (x,), out, lambda g: (g * inside,), lo=lo, hi=hi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(OpKind.SOFTMAX, (x,), out, vjp, axis=axis)


# ----------------------------------------------------------------- reductions

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _norm_axes(axes, x.ndim)
    out = np.asarray(x.data.sum(axis=ax, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(OpKind.SUM, (x,), out, vjp, axes=ax)


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    n = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    out = np.asarray(x.data.mean(axis=ax, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record(OpKind.MEAN, (x,), out, vjp, axes=ax)


# -------------------------------------------------------------- shape algebra

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _record(OpKind.RESHAPE, (x,), out, lambda g: (g.reshape(x.shape),), shape=shape)


def transpose(x: Tensor, perm) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, perm, detail="bad permutation")
    out = np.ascontiguousarray(x.data.transpose(perm))
    inv = tuple(np.argsort(perm))
    return _record(OpKind.TRANSPOSE, (x,), out, lambda g: (g.transpose(inv),), perm=perm)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(OpKind.CONCAT, tuple(xs), out, vjp, axis=axis)


def _batched_index(indices: np.ndarray, x_shape, axis: int):
    """Advanced-index tuple selecting ``indices[b, n]`` along ``axis`` per batch row b."""
    lead = [np.arange(x_shape[i]).reshape((-1,) + (1,) * (indices.ndim - 1)) if i == 0
            else slice(None) for i in range(axis)]
    return tuple(lead) + (indices,)


def gather(x: Tensor, indices, axis: int = 0, batched: bool = False) -> Tensor:
    """Select entries along ``axis``.

    ``batched=False``: ``np.take`` semantics (indices of any shape).
    ``batched=True``: ``indices`` is ``[B, n]`` and row b picks from ``x[b]``;
    ``axis`` must be 1.
    """
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError("gather", x.shape, idx.shape, detail=f"index out of range for axis {axis}")
    if batched:
        if axis != 1 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
            raise ShapeError("gather", x.shape, idx.shape, detail="batched gather wants [B, n] on axis 1")
        sel = _batched_index(idx, x.shape, axis)
        out = x.data[sel]

        def vjp(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, sel, g)
            return (gx,)
    else:
        out = np.take(x.data, idx, axis=axis)

        def vjp(g):
            gx = np.zeros_like(x.data)
            moved = np.moveaxis(gx, axis, 0)
            gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
            np.add.at(moved, idx, gm)
            return (gx,)

    return _record(OpKind.GATHER, (x,), np.ascontiguousarray(out), vjp, axis=axis, batched=batched)


def scatter(x: Tensor, indices, axis: int, size: int, batched: bool = False) -> Tensor:
    """Place ``x`` into a zero tensor of length ``size`` along ``axis`` (inverse of gather)."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError("scatter", x.shape, idx.shape, detail=f"index out of range for size {size}")
    shape = list(x.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=x.dtype)
    if batched:
        if axis != 1 or idx.shape != x.shape[:2]:
            raise ShapeError("scatter", x.shape, idx.shape, detail="batched scatter wants [B, n] on axis 1")
        sel = _batched_index(idx, out.shape, axis)
        out[sel] = x.data
        return _record(OpKind.SCATTER, (x,), out, lambda g: (g[sel],), axis=axis, batched=True)
    if idx.ndim != 1 or idx.shape[0] != x.shape[axis]:
        raise ShapeError("scatter", x.shape, idx.shape)
    moved = np.moveaxis(out, axis, 0)
    moved[idx] = np.moveaxis(x.data, axis, 0)
    return _record(OpKind.SCATTER, (x,), out,
                   lambda g: (np.ascontiguousarray(np.take(g, idx, axis=axis)),), axis=axis)


# --------------------------------------------------------------- contraction

_BATCH_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


def _batch_operand(x: np.ndarray, full: tuple[int, ...]):
    """Squeeze broadcast dims out of ``x``'s batch part; return (array, letters, kept)."""
    nb = len(full)
    xb = x.shape[:-2]
    offset = nb - len(xb)
    letters, squeeze, kept = [], [], []
    for i, n in enumerate(xb):
        if n == full[offset + i]:
            letters.append(_BATCH_LETTERS[offset + i])
            kept.append(offset + i)
        else:
            squeeze.append(i)
    if squeeze:
        x = x.reshape(tuple(n for i, n in enumerate(x.shape) if i not in squeeze))
    return x, "".join(letters), kept


def _grad_into(op_a, sub_a, op_b, sub_b, out_sub, target_shape):
    r = np.einsum(f"{sub_a},{sub_b}->{out_sub}", op_a, op_b)
    return r.reshape(target_shape)


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting over leading dims."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        full = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    out = np.einsum("...ij,...jk->...ik", a.data, b.data)

    def vjp(g):
        fl = _BATCH_LETTERS[:len(full)]
        ga = gb = None
        if a.requires_grad:
            bs, bl, _ = _batch_operand(b.data, full)
            _, al, _ = _batch_operand(a.data, full)
            ga = _grad_into(g, fl + "ik", bs, bl + "jk", al + "ij", a.shape)
        if b.requires_grad:
            as_, al, _ = _batch_operand(a.data, full)
            _, bl, _ = _batch_operand(b.data, full)
            gb = _grad_into(as_, al + "ij", g, fl + "ik", bl + "jk", b.shape)
        return ga, gb

    return _record(OpKind.MATMUL, (a, b), out, vjp)


# -------------------------------------------------------------- convolutions

def _image_to_patches(img: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = img.shape
    x = img.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x).reshape(b, (h // p) * (w // p), c * p * p)


def _patches_to_image(patches: np.ndarray, c: int, h: int, w: int, p: int) -> np.ndarray:
    b = patches.shape[0]
    x = patches.reshape(b, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(x).reshape(b, c, h, w)


def conv_patch_embed(image: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Convolution with kernel size == stride. ``image`` [B,C,H,W] -> tokens [B, L, E].

    Tokens are ordered row-major over the patch grid; each token sees only its
    own patch.
    """
    image = as_tensor(image)
    if image.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv_patch_embed", image.shape, weight.shape)
    b, c, h, w = image.shape
    e, wc, p, p2 = weight.shape
    if wc != c or p != p2 or h % p or w % p or bias.shape != (e,):
        raise ShapeError("conv_patch_embed", image.shape, weight.shape, bias.shape)
    patches = _image_to_patches(image.data, p)
    w2 = weight.data.reshape(e, c * p * p)
    out = np.einsum("blq,eq->ble", patches, w2) + bias.data

    def vjp(g):
        gi = gw = gb = None
        if image.requires_grad:
            gi = _patches_to_image(np.einsum("ble,eq->blq", g, w2), c, h, w, p)
        if weight.requires_grad:
            gw = np.einsum("blq,ble->eq", patches, g).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gi, gw, gb

    return _record(OpKind.CONV_PATCH_EMBED, (image, weight, bias), out, vjp, patch=p)


def conv_depthwise(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel k x k convolution with same padding on a channels-last grid.

    ``x`` [B, H, W, E], ``weight`` [E, k, k] (k odd), ``bias`` [E].
    Taps accumulate in a fixed order so results do not depend on batch size.
    """
    if x.ndim != 4 or weight.ndim != 3 or weight.shape[0] != x.shape[-1] \
            or weight.shape[1] != weight.shape[2] or weight.shape[1] % 2 == 0 \
            or bias.shape != (x.shape[-1],):
        raise ShapeError("conv_depthwise", x.shape, weight.shape, bias.shape)
    k = weight.shape[1]
    pad = k // 2
    _, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.broadcast_to(bias.data, x.shape).copy()
    for dy in range(k):
        for dx in range(k):
            out = out + xp[:, dy:dy + h, dx:dx + w, :] * weight.data[:, dy, dx]

    def vjp(g):
        gx = gw = gb = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for dy in range(k):
                for dx in range(k):
                    gp[:, dy:dy + h, dx:dx + w, :] += g * weight.data[:, dy, dx]
            gx = gp[:, pad:pad + h, pad:pad + w, :].copy()
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for dy in range(k):
                for dx in range(k):
                    gw[:, dy, dx] = (xp[:, dy:dy + h, dx:dx + w, :] * g).sum(axis=(0, 1, 2))
        if bias.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        return gx, gw, gb

    return _record(OpKind.CONV_DEPTHWISE, (x, weight, bias), out, vjp, kernel=k)


# ------------------------------------------------------------- normalisation

def weighted_moments(x: np.ndarray, axes: tuple[int, ...], weights: Optional[np.ndarray] = None):
    """Mean and biased variance over ``axes``; ``weights`` (broadcastable to x) select samples."""
    if weights is None:
        mu = x.mean(axis=axes, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
        return mu, var
    w = np.broadcast_to(weights, x.shape)
    n = w.sum(axis=axes, keepdims=True)
    if np.any(n <= 0):
        raise ValueError("affine_norm: no samples with nonzero weight")
    mu = (w * x).sum(axis=axes, keepdims=True) / n
    var = (w * (x - mu) ** 2).sum(axis=axes, keepdims=True) / n
    return mu, var


def affine_norm(x: Tensor, scale: Tensor, shift: Tensor, axes, *, weights=None,
                stats: Optional[tuple[np.ndarray, np.ndarray]] = None, eps: float = 1e-5) -> Tensor:
    """``(x - mean) / sqrt(var + eps) * scale + shift``.

    Statistics are taken over ``axes`` (optionally weighted, e.g. by a 0/1
    visibility mask) unless fixed ``stats = (mean, var)`` are supplied, in
    which case they are treated as constants.
    """
    axes = _norm_axes(axes, x.ndim)
    try:
        np.broadcast_shapes(x.shape, scale.shape, shift.shape)
    except ValueError:
        raise ShapeError("affine_norm", x.shape, scale.shape, shift.shape) from None
    d = x.data
    fixed = stats is not None
    if fixed:
        mu, var = (np.asarray(s, dtype=d.dtype) for s in stats)
    else:
        mu, var = weighted_moments(d, axes, weights)
    inv = 1.0 / np.sqrt(var + eps)
    xc = d - mu
    xhat = xc * inv
    out = xhat * scale.data + shift.data
    w = None if weights is None else np.broadcast_to(np.asarray(weights, dtype=d.dtype), d.shape)

    def vjp(g):
        gx = gs = gt = None
        if x.requires_grad:
            gh = g * scale.data
            if fixed:
                gx = gh * inv
            else:
                if w is None:
                    n = float(np.prod([d.shape[a] for a in axes]))
                    wn = 1.0 / n
                else:
                    wn = w / w.sum(axis=axes, keepdims=True)
                dmu = -(gh * inv).sum(axis=axes, keepdims=True)
                dvar = -0.5 * (gh * xc).sum(axis=axes, keepdims=True) * inv ** 3
                gx = gh * inv + wn * dmu + 2.0 * wn * xc * dvar
        if scale.requires_grad:
            gs = unbroadcast(g * xhat, scale.shape)
        if shift.requires_grad:
            gt = unbroadcast(g, shift.shape)
        return gx, gs, gt

    return _record(OpKind.AFFINE_NORM, (x, scale, shift), out, vjp, axes=axes)
