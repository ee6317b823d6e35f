"""Image stems that turn pixels into primary capsules.

Both stems start with a patch embedding (kernel == stride) so that a token
only ever sees its own patch. The ConvMixer stem keeps the full grid and
zero-fills masked slots before and after every spatial mix; the ViT stem
drops masked tokens outright.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .capsules import CapsuleMap
from .masking import BatchMask
from .numerics import ShapeError, Tensor, ops

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1


def _param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr), requires_grad=True, dtype=dtype)


@dataclass
class Norm:
    """Learned scale/shift plus running statistics.

    ``mode="batch"`` normalises each channel over batch and locations (running
    stats used at eval); ``mode="layer"`` normalises each token over channels.
    """

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    mode: str = "batch"

    @classmethod
    def init(cls, E: int, mode: str = "batch", dtype=np.float32) -> "Norm":
        if mode not in ("batch", "layer"):
            raise ValueError(f"unknown norm mode {mode!r}")
        return cls(_param(np.ones(E), dtype), _param(np.zeros(E), dtype),
                   np.zeros(E, dtype=dtype), np.ones(E, dtype=dtype), mode)

    def tensors(self) -> dict[str, Tensor]:
        return {"scale": self.scale, "shift": self.shift}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var} if self.mode == "batch" else {}

    def __call__(self, x: Tensor, training: bool, weights: Optional[np.ndarray] = None) -> Tensor:
        if self.mode == "layer":
            return ops.affine_norm(x, self.scale, self.shift, axes=(-1,), eps=NORM_EPS)
        axes = tuple(range(x.ndim - 1))
        if not training:
            stats = (self.running_mean.reshape((1,) * len(axes) + (-1,)),
                     self.running_var.reshape((1,) * len(axes) + (-1,)))
            return ops.affine_norm(x, self.scale, self.shift, axes=axes, stats=stats, eps=NORM_EPS)
        mu, var = ops.weighted_moments(x.data, axes, weights)
        n = x.data.size // x.shape[-1] if weights is None else float(np.broadcast_to(weights, x.shape[:-1] + (1,)).sum())
        unbiased = var.reshape(-1) * (n / max(n - 1.0, 1.0))
        self.running_mean *= 1 - NORM_MOMENTUM
        self.running_mean += NORM_MOMENTUM * mu.reshape(-1).astype(self.running_mean.dtype)
        self.running_var *= 1 - NORM_MOMENTUM
        self.running_var += NORM_MOMENTUM * unbiased.astype(self.running_var.dtype)
        return ops.affine_norm(x, self.scale, self.shift, axes=axes, weights=weights, eps=NORM_EPS)


@dataclass
class PatchEmbedParams:
    weight: Tensor  # [E, C, P, P]
    bias: Tensor    # [E]

    @classmethod
    def init(cls, C: int, P: int, E: int, rng: np.random.Generator, dtype=np.float32) -> "PatchEmbedParams":
        bound = 1.0 / math.sqrt(C * P * P)
        return cls(_param(rng.uniform(-bound, bound, (E, C, P, P)), dtype),
                   _param(rng.uniform(-bound, bound, E), dtype))

    @property
    def patch_size(self) -> int:
        return self.weight.shape[-1]

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def patch_embed(image, params: PatchEmbedParams) -> Tensor:
    """[B, C, H, W] -> tokens [B, L, E], L = (H/P)(W/P), row-major over the patch grid."""
    image = image if isinstance(image, Tensor) else Tensor(np.asarray(image), dtype=params.weight.dtype)
    P = params.patch_size
    if image.ndim != 4 or image.shape[2] % P or image.shape[3] % P:
        raise ShapeError("patch_embed", image.shape, params.weight.shape,
                         detail=f"image sides must be divisible by P={P}")
    return ops.conv_patch_embed(image, params.weight, params.bias)


def zero_masked(x: Tensor, bm: Optional[BatchMask]) -> Tensor:
    """Exact +0.0 at masked slots of ``x`` [B, L, ...]; visible slots copied bit for bit."""
    if bm is None or bm.n_masked == 0:
        return x
    return ops.scatter(ops.gather(x, bm.visible, axis=1, batched=True), bm.visible, axis=1,
                       size=x.shape[1], batched=True)


@dataclass
class ConvMixerBlockParams:
    dw_weight: Tensor  # [E, k, k]
    dw_bias: Tensor
    norm1: Norm
    pw_weight: Tensor  # [E, E]
    pw_bias: Tensor
    norm2: Norm

    @classmethod
    def init(cls, E: int, k: int, rng: np.random.Generator, dtype=np.float32) -> "ConvMixerBlockParams":
        bd = 1.0 / k
        bp = 1.0 / math.sqrt(E)
        return cls(_param(rng.uniform(-bd, bd, (E, k, k)), dtype), _param(np.zeros(E), dtype),
                   Norm.init(E, dtype=dtype),
                   _param(rng.uniform(-bp, bp, (E, E)), dtype), _param(np.zeros(E), dtype),
                   Norm.init(E, dtype=dtype))

    def tensors(self) -> dict[str, Tensor]:
        out = {"dw_weight": self.dw_weight, "dw_bias": self.dw_bias,
               "pw_weight": self.pw_weight, "pw_bias": self.pw_bias}
        out.update({f"norm1.{k}": v for k, v in self.norm1.tensors().items()})
        out.update({f"norm2.{k}": v for k, v in self.norm2.tensors().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {f"norm1.{k}": v for k, v in self.norm1.buffers().items()}
        out.update({f"norm2.{k}": v for k, v in self.norm2.buffers().items()})
        return out


def convmixer_block(x: Tensor, grid: tuple[int, int], blk: ConvMixerBlockParams, bm: Optional[BatchMask],
                    weights: Optional[np.ndarray], training: bool) -> Tensor:
    B, L, E = x.shape
    H, W = grid
    h = ops.reshape(x, (B, H, W, E))
    h = ops.reshape(ops.conv_depthwise(h, blk.dw_weight, blk.dw_bias), (B, L, E))
    h = zero_masked(blk.norm1(ops.gelu(h), training, weights), bm)
    x = ops.add(x, h)
    y = ops.add(ops.matmul(x, blk.pw_weight), blk.pw_bias)
    return zero_masked(blk.norm2(ops.gelu(y), training, weights), bm)


def convmixer_forward(tokens: Tensor, grid: tuple[int, int], visibility, blocks: Sequence[ConvMixerBlockParams],
                      training: bool = False) -> Tensor:
    """Mix tokens on the patch grid; masked slots never carry content.

    ``visibility`` is a :class:`BatchMask`, a [B, L] 0/1 array, or None (all visible).
    """
    B, L, E = tokens.shape
    if L != grid[0] * grid[1]:
        raise ShapeError("convmixer_forward", tokens.shape, grid, detail="L != H*W")
    bm = _as_batch_mask(visibility, B, L)
    weights = None if bm is None or bm.n_masked == 0 else bm.visibility()[..., None].astype(tokens.dtype)
    x = zero_masked(tokens, bm)
    for blk in blocks:
        x = convmixer_block(x, grid, blk, bm, weights, training)
    return x


def _as_batch_mask(visibility, B: int, L: int) -> Optional[BatchMask]:
    if visibility is None or isinstance(visibility, BatchMask):
        return visibility
    v = np.asarray(visibility)
    if v.shape != (B, L):
        raise ShapeError("convmixer_forward", v.shape, (B, L), detail="visibility shape")
    if v.all():
        return None
    from .masking import MaskPlan
    return BatchMask([MaskPlan.from_indices(L, np.flatnonzero(row == 0)) for row in v])


@dataclass
class ViTBlockParams:
    ln1: Norm
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    Wo: Tensor
    bo: Tensor
    ln2: Norm
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    heads: int = 4

    @classmethod
    def init(cls, E: int, heads: int, mlp_ratio: int, rng: np.random.Generator, norm: str = "layer",
             dtype=np.float32) -> "ViTBlockParams":
        if E % heads:
            raise ValueError(f"token dim {E} not divisible by {heads} heads")
        std = 0.02
        H = E * mlp_ratio
        w = lambda *s: _param(rng.normal(0, std, s), dtype)  # noqa: E731
        z = lambda *s: _param(np.zeros(s), dtype)  # noqa: E731
        return cls(Norm.init(E, norm, dtype), w(E, E), w(E, E), w(E, E), z(E), z(E), z(E), w(E, E), z(E),
                   Norm.init(E, norm, dtype), w(E, H), z(H), w(H, E), z(E), heads)

    def tensors(self) -> dict[str, Tensor]:
        out = {k: getattr(self, k) for k in ("Wq", "Wk", "Wv", "bq", "bk", "bv", "Wo", "bo", "W1", "b1", "W2", "b2")}
        out.update({f"ln1.{k}": v for k, v in self.ln1.tensors().items()})
        out.update({f"ln2.{k}": v for k, v in self.ln2.tensors().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {f"ln1.{k}": v for k, v in self.ln1.buffers().items()}
        out.update({f"ln2.{k}": v for k, v in self.ln2.buffers().items()})
        return out


def attention(x: Tensor, blk: ViTBlockParams) -> Tensor:
    B, N, E = x.shape
    h = blk.heads
    dh = E // h

    def heads(W, b):
        t = ops.add(ops.matmul(x, W), b)
        return ops.transpose(ops.reshape(t, (B, N, h, dh)), (0, 2, 1, 3))  # [B, h, N, dh]

    q, k, v = heads(blk.Wq, blk.bq), heads(blk.Wk, blk.bk), heads(blk.Wv, blk.bv)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = ops.softmax(scores, axis=-1)
    o = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (B, N, E))
    return ops.add(ops.matmul(o, blk.Wo), blk.bo)


def vit_block(x: Tensor, blk: ViTBlockParams, training: bool) -> Tensor:
    x = ops.add(x, attention(blk.ln1(x, training), blk))
    hdn = ops.gelu(ops.add(ops.matmul(blk.ln2(x, training), blk.W1), blk.b1))
    return ops.add(x, ops.add(ops.matmul(hdn, blk.W2), blk.b2))


def vit_forward(visible_tokens: Tensor, positions, pos_embed: Tensor, blocks: Sequence[ViTBlockParams],
                final_norm: Optional[Norm] = None, training: bool = False) -> Tensor:
    """Pre-norm transformer over the visible sequence.

    ``positions`` [B, L_v] are the original locations of the tokens; the
    matching rows of ``pos_embed`` [L, E] are added before the first block.
    """
    if visible_tokens.ndim != 3 or visible_tokens.shape[1] == 0:
        raise ShapeError("vit_forward", visible_tokens.shape, detail="empty token sequence")
    x = ops.add(visible_tokens, ops.gather(pos_embed, np.asarray(positions), axis=0))
    for blk in blocks:
        x = vit_block(x, blk, training)
    if final_norm is not None:
        x = final_norm(x, training)
    return x


@dataclass
class PrimaryProjectionParams:
    W_act: Tensor  # [E, K]
    b_act: Tensor  # [K]
    K: int = field(default=0)
    D: int = field(default=0)

    @classmethod
    def init(cls, K: int, D: int, rng: np.random.Generator, dtype=np.float32) -> "PrimaryProjectionParams":
        E = K * D
        bound = 1.0 / math.sqrt(E)
        return cls(_param(rng.uniform(-bound, bound, (E, K)), dtype), _param(np.zeros(K), dtype), K, D)

    def tensors(self) -> dict[str, Tensor]:
        return {"W_act": self.W_act, "b_act": self.b_act}


def to_primary_capsules(tokens: Tensor, params: PrimaryProjectionParams, grid: tuple[int, int],
                        index: Optional[np.ndarray] = None) -> CapsuleMap:
    """Poses are the token reshaped to [K, D]; activations are sigmoid(affine(token))."""
    B, L, E = tokens.shape
    K, D = params.K, params.D
    if E != K * D or params.W_act.shape != (E, K):
        raise ShapeError("to_primary_capsules", tokens.shape, params.W_act.shape, detail=f"E must equal K*D={K * D}")
    poses = ops.reshape(tokens, (B, L, K, D))
    acts = ops.sigmoid(ops.add(ops.matmul(tokens, params.W_act), params.b_act))
    return CapsuleMap(poses, acts, grid, index)
