"""Capsule feature maps and self-routing layers.

Capsule maps are flattened: a batch of ``L`` locations, each carrying ``K``
capsule types with a pose vector of size ``D`` and an activation in [0, 1].

All routing layers share one rule. For input capsules i (pose u_i, activation
a_i) and output capsules j:

    logits_ij = u_i . W_route[i][:, j] + b_route
    gamma_ij  = softmax_j(logits_ij)
    vote_j|i  = W_pose[i, j] u_i + b_pose
    a_j = sum_i gamma_ij a_i / (sum_i a_i + eps)
    u_j = sum_i gamma_ij a_i vote_j|i / (sum_i gamma_ij a_i + eps)

The encoder applies it independently at every location (1x1 routing); the
decoder applies it once over every capsule at every location.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .masking import BatchMask
from .numerics import NonFiniteError, ShapeError, Tensor, ops

EPS = 1e-8
INIT_STD = 0.02


@dataclass
class CapsuleMap:
    """poses [B, L, K, D], activations [B, L, K].

    ``index`` holds the original location of each entry when the map has been
    reduced to visible locations ([B, L']); it is None for full maps.
    """

    poses: Tensor
    activations: Tensor
    grid: tuple[int, int]
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        p, a = self.poses, self.activations
        if p.ndim != 4 or a.shape != p.shape[:3]:
            raise ShapeError("CapsuleMap", p.shape, a.shape)
        if self.index is None and p.shape[1] != self.grid[0] * self.grid[1]:
            raise ShapeError("CapsuleMap", p.shape, self.grid, detail="L != H*W")

    @property
    def batch(self) -> int:
        return self.poses.shape[0]

    @property
    def L(self) -> int:
        return self.poses.shape[1]

    @property
    def K(self) -> int:
        return self.poses.shape[2]

    @property
    def D(self) -> int:
        return self.poses.shape[3]

    def check(self) -> "CapsuleMap":
        if not np.isfinite(self.poses.data).all():
            raise NonFiniteError("non-finite capsule pose")
        a = self.activations.data
        if not ((a >= 0) & (a <= 1)).all():
            raise ValueError("capsule activation outside [0, 1]")
        return self

    def at(self, locations) -> "CapsuleMap":
        """Sub-map at the given locations (constant copy, no gradient)."""
        loc = np.atleast_1d(locations)
        return CapsuleMap(Tensor(self.poses.data[:, loc]), Tensor(self.activations.data[:, loc]),
                          self.grid, index=np.broadcast_to(loc, (self.batch, loc.size)).copy())


@dataclass
class SelfRoutingParams:
    W_route: Tensor  # [K, D, M]
    b_route: Tensor  # [K, M]
    W_pose: Tensor   # [K, M, D, D_out]
    b_pose: Tensor   # [K, M, D_out]

    @classmethod
    def init(cls, K: int, D: int, M: int, D_out: int, rng: np.random.Generator,
             std: float = INIT_STD, dtype=np.float32) -> "SelfRoutingParams":
        return cls(
            W_route=Tensor(rng.normal(0, std, (K, D, M)), requires_grad=True, dtype=dtype),
            b_route=Tensor(np.zeros((K, M)), requires_grad=True, dtype=dtype),
            W_pose=Tensor(rng.normal(0, std, (K, M, D, D_out)), requires_grad=True, dtype=dtype),
            b_pose=Tensor(np.zeros((K, M, D_out)), requires_grad=True, dtype=dtype),
        )

    @property
    def dims(self) -> tuple[int, int, int, int]:
        K, D, M = self.W_route.shape
        return K, D, M, self.W_pose.shape[-1]

    def tensors(self) -> dict[str, Tensor]:
        return {"W_route": self.W_route, "b_route": self.b_route,
                "W_pose": self.W_pose, "b_pose": self.b_pose}


@dataclass
class DecoderParams:
    """Routing parameters over all L*K input and L*M output capsules.

    Per-location weights carry position; there is no positional embedding.
    Parameter count: L*K*D*L*M + L*M + L*K*L*M*D*D_out + L*M*D_out.
    """

    W_route: Tensor  # [L*K, D, L*M]
    b_route: Tensor  # [L*M]
    W_pose: Tensor   # [L*K, L*M, D, D_out]
    b_pose: Tensor   # [L*M, D_out]
    L: int = field(default=1)

    @classmethod
    def init(cls, L: int, K: int, D: int, M: int, D_out: int, rng: np.random.Generator,
             std: float = INIT_STD, dtype=np.float32) -> "DecoderParams":
        N, O = L * K, L * M
        return cls(
            W_route=Tensor(rng.normal(0, std, (N, D, O)), requires_grad=True, dtype=dtype),
            b_route=Tensor(np.zeros(O), requires_grad=True, dtype=dtype),
            W_pose=Tensor(rng.normal(0, std, (N, O, D, D_out)), requires_grad=True, dtype=dtype),
            b_pose=Tensor(np.zeros((O, D_out)), requires_grad=True, dtype=dtype),
            L=L,
        )

    @staticmethod
    def param_count(L: int, K: int, D: int, M: int, D_out: int) -> int:
        return L * K * D * L * M + L * M + L * K * L * M * D * D_out + L * M * D_out

    def tensors(self) -> dict[str, Tensor]:
        return {"W_route": self.W_route, "b_route": self.b_route,
                "W_pose": self.W_pose, "b_pose": self.b_pose}


@dataclass(frozen=True)
class MaskTokenSpec:
    """Placeholder capsules for masked locations: Gaussian poses, constant activation."""

    sigma: float = 0.02
    activation_fill: float = 0.0
    resample_each_forward: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.activation_fill <= 1.0:
            raise ValueError("activation_fill must lie in [0, 1]")
        if self.resample_each_forward and self.sigma <= 0:
            raise ValueError("sigma must be positive when resampling")


def route(u: Tensor, a: Tensor, W_route: Tensor, b_route: Tensor, W_pose: Tensor, b_pose: Tensor,
          eps: float = EPS):
    """Self-routing over the input axis of ``u`` [B, G, N, D], ``a`` [B, G, N].

    G groups are routed independently. Returns (poses [B,G,M,D_out],
    activations [B,G,M], gamma [B,G,N,M]).
    """
    B, G, N, D = u.shape
    if W_route.ndim != 3 or W_route.shape[:2] != (N, D):
        raise ShapeError("self_route", u.shape, W_route.shape)
    M = W_route.shape[2]
    if W_pose.ndim != 4 or W_pose.shape[:3] != (N, M, D):
        raise ShapeError("self_route", u.shape, W_pose.shape)
    Do = W_pose.shape[3]
    if a.shape != (B, G, N):
        raise ShapeError("self_route", u.shape, a.shape)

    u5 = ops.reshape(u, (B, G, N, 1, D))
    logits = ops.reshape(ops.matmul(u5, W_route), (B, G, N, M))
    logits = ops.add(logits, b_route)
    gamma = ops.softmax(logits, axis=-1)

    w_pose = ops.reshape(ops.transpose(W_pose, (0, 2, 1, 3)), (N, D, M * Do))
    votes = ops.reshape(ops.matmul(u5, w_pose), (B, G, N, M, Do))
    votes = ops.add(votes, b_pose)

    weight = ops.mul(gamma, ops.reshape(a, (B, G, N, 1)))               # gamma_ij a_i
    act = ops.div(ops.sum(weight, axes=2),
                  ops.add(ops.sum(a, axes=2, keepdims=True), eps))      # [B,G,M]
    num = ops.sum(ops.mul(ops.reshape(weight, (B, G, N, M, 1)), votes), axes=2)
    den = ops.add(ops.reshape(ops.sum(weight, axes=2), (B, G, M, 1)), eps)
    pose = ops.div(num, den)
    return pose, act, gamma


def self_route_local(caps: CapsuleMap, params: SelfRoutingParams, return_coupling: bool = False):
    """1x1 self-routing: capsules route only to capsules at the same location."""
    if not np.isfinite(caps.poses.data).all():
        raise NonFiniteError("non-finite pose input to self_route_local")
    K, D, M, Do = params.dims
    if (caps.K, caps.D) != (K, D):
        raise ShapeError("self_route_local", caps.poses.shape, params.W_route.shape)
    pose, act, gamma = route(caps.poses, caps.activations, params.W_route, params.b_route,
                             params.W_pose, params.b_pose)
    out = CapsuleMap(pose, act, caps.grid, caps.index)
    return (out, gamma) if return_coupling else out


def encoder_forward(primary: CapsuleMap, layers: Sequence[SelfRoutingParams]) -> CapsuleMap:
    caps = primary
    for i, layer in enumerate(layers):
        if layer.dims[0] != caps.K:
            raise ShapeError("encoder_forward", caps.poses.shape, layer.W_route.shape,
                             detail=f"layer {i} expects {layer.dims[0]} input types")
        caps = self_route_local(caps, layer)
    return caps


def mask_select(caps: CapsuleMap, plan) -> tuple[CapsuleMap, BatchMask]:
    """Drop masked locations; visible ones keep ascending original order."""
    bm = BatchMask.coerce(plan, caps.batch)
    if bm.L != caps.L:
        raise ShapeError("mask_select", caps.poses.shape, (bm.L,), detail="plan L differs from map")
    poses = ops.gather(caps.poses, bm.visible, axis=1, batched=True)
    acts = ops.gather(caps.activations, bm.visible, axis=1, batched=True)
    return CapsuleMap(poses, acts, caps.grid, index=bm.visible.copy()), bm


def mask_tokens(spec: MaskTokenSpec, shape: tuple[int, ...], rng: Optional[np.random.Generator],
                dtype) -> tuple[np.ndarray, np.ndarray]:
    if spec.resample_each_forward:
        if rng is None:
            raise ValueError("resampling mask tokens needs an rng")
        gen = rng
    else:
        gen = np.random.default_rng(spec.seed)
    poses = gen.normal(0.0, spec.sigma, shape).astype(dtype) if spec.sigma > 0 \
        else np.zeros(shape, dtype=dtype)
    acts = np.full(shape[:-1], spec.activation_fill, dtype=dtype)
    return poses, acts


def reinsert_masked(visible: CapsuleMap, plan, spec: MaskTokenSpec,
                    rng: Optional[np.random.Generator]) -> CapsuleMap:
    """Put placeholder capsules back at masked locations, restoring the full map."""
    bm = BatchMask.coerce(plan, visible.batch)
    if visible.L + bm.n_masked != bm.L:
        raise ShapeError("reinsert_masked", visible.poses.shape, (bm.L,),
                         detail=f"{visible.L} visible + {bm.n_masked} masked != {bm.L}")
    B, _, K, D = visible.poses.shape
    poses, acts = visible.poses, visible.activations
    if bm.n_masked:
        tp, ta = mask_tokens(spec, (B, bm.n_masked, K, D), rng, visible.poses.dtype)
        order = bm.restore_order()
        poses = ops.gather(ops.concat([poses, Tensor(tp)], axis=1), order, axis=1, batched=True)
        acts = ops.gather(ops.concat([acts, Tensor(ta)], axis=1), order, axis=1, batched=True)
    return CapsuleMap(poses, acts, visible.grid)


def decoder_forward(full: CapsuleMap, params: DecoderParams, return_coupling: bool = False):
    """Route every capsule at every location to every output capsule at every location."""
    if full.index is not None or full.L != params.L:
        raise ShapeError("decoder_forward", full.poses.shape, (params.L,),
                         detail="decoder needs the full map with reinserted placeholders")
    B, L, K, D = full.poses.shape
    N = L * K
    if params.W_route.shape[:2] != (N, D):
        raise ShapeError("decoder_forward", full.poses.shape, params.W_route.shape)
    M = params.W_route.shape[2] // L
    Do = params.W_pose.shape[-1]
    u = ops.reshape(full.poses, (B, 1, N, D))
    a = ops.reshape(full.activations, (B, 1, N))
    pose, act, gamma = route(u, a, params.W_route, params.b_route, params.W_pose, params.b_pose)
    out = CapsuleMap(ops.reshape(pose, (B, L, M, Do)), ops.reshape(act, (B, L, M)), full.grid)
    return (out, gamma) if return_coupling else out


def pixel_projection(decoded: CapsuleMap, W_px: Tensor, b_px: Tensor) -> Tensor:
    """Shared affine map from activation-scaled poses to patch pixels: [B, L, Q]."""
    B, L, M, Do = decoded.poses.shape
    if W_px.ndim != 2 or W_px.shape[0] != M * Do or b_px.shape != (W_px.shape[1],):
        raise ShapeError("pixel_projection", decoded.poses.shape, W_px.shape, b_px.shape)
    scaled = ops.mul(decoded.poses, ops.reshape(decoded.activations, (B, L, M, 1)))
    return ops.add(ops.matmul(ops.reshape(scaled, (B, L, M * Do)), W_px), b_px)


def class_head(encoded: CapsuleMap, params: SelfRoutingParams) -> Tensor:
    """Route to one capsule type per class, then average activations over locations: [B, C]."""
    caps = self_route_local(encoded, params)
    return ops.mean(caps.activations, axes=1)
