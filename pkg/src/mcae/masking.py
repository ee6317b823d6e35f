"""Patch arithmetic and random patch masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class MaskPlan:
    """Masked location indices for one image.

    ``masked_indices`` is sorted and unique; ``seed`` records the draw.
    """

    L: int
    ratio: float
    masked_indices: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        idx = np.asarray(self.masked_indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.L):
            raise ValueError(f"mask indices out of range [0, {self.L})")
        if len(set(self.masked_indices)) != len(self.masked_indices):
            raise ValueError("duplicate mask indices")
        if list(self.masked_indices) != sorted(self.masked_indices):
            raise ValueError("mask indices must be sorted")

    @property
    def visible_indices(self) -> tuple[int, ...]:
        masked = set(self.masked_indices)
        return tuple(i for i in range(self.L) if i not in masked)

    @property
    def n_masked(self) -> int:
        return len(self.masked_indices)

    def visibility(self) -> np.ndarray:
        v = np.ones(self.L, dtype=bool)
        v[list(self.masked_indices)] = False
        return v

    @classmethod
    def from_indices(cls, L: int, masked: Sequence[int], seed: int | None = None) -> "MaskPlan":
        masked = [int(i) for i in masked]
        if len(set(masked)) != len(masked):
            raise ValueError("duplicate mask indices")
        return cls(L=L, ratio=len(masked) / L, masked_indices=tuple(sorted(masked)), seed=seed)

    @classmethod
    def none(cls, L: int) -> "MaskPlan":
        return cls(L=L, ratio=0.0, masked_indices=())


def mask_count(L: int, ratio: float) -> int:
    return int(np.floor(ratio * L))


def sample_mask(L: int, ratio: float, rng: np.random.Generator | int) -> MaskPlan:
    """Uniformly choose ``floor(ratio * L)`` locations to mask, without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    n = mask_count(L, ratio)
    if n >= L:
        raise ValueError(f"mask ratio {ratio} leaves no visible location out of {L}")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    chosen = np.sort(rng.permutation(L)[:n])
    return MaskPlan(L=L, ratio=ratio, masked_indices=tuple(int(i) for i in chosen), seed=seed)


class BatchMask:
    """Per-image plans stacked into index arrays; every plan must mask the same count."""

    def __init__(self, plans: Sequence[MaskPlan]):
        if not plans:
            raise ValueError("empty plan list")
        L = plans[0].L
        n = plans[0].n_masked
        for p in plans:
            if p.L != L or p.n_masked != n:
                raise ValueError("all plans in a batch need the same L and mask count")
        if n >= L:
            raise ValueError("every location is masked; nothing to encode")
        self.plans = list(plans)
        self.L = L
        self.masked = np.array([p.masked_indices for p in plans], dtype=np.intp).reshape(len(plans), n)
        self.visible = np.array([p.visible_indices for p in plans], dtype=np.intp)

    def __len__(self) -> int:
        return len(self.plans)

    @property
    def n_masked(self) -> int:
        return self.masked.shape[1]

    def visibility(self) -> np.ndarray:
        """[B, L] float 0/1."""
        return np.stack([p.visibility() for p in self.plans]).astype(np.float32)

    def restore_order(self) -> np.ndarray:
        """Permutation taking ``concat(visible, masked)`` back to original order, per image."""
        return np.argsort(np.concatenate([self.visible, self.masked], axis=1), axis=1, kind="stable")

    @classmethod
    def coerce(cls, plans, batch: int) -> "BatchMask":
        if isinstance(plans, BatchMask):
            return plans
        if isinstance(plans, MaskPlan):
            plans = [plans] * batch
        bm = cls(plans)
        if len(bm) != batch:
            raise ValueError(f"{len(bm)} mask plans for a batch of {batch}")
        return bm


@dataclass
class PatchGrid:
    """Pixel patches in row-major patch order; each patch is channel-major then row-major."""

    patches: np.ndarray  # [L, P*P*C] or [B, L, P*P*C]
    grid: tuple[int, int]
    patch_size: int
    channels: int

    def __post_init__(self):
        H, W = self.grid
        q = self.patch_size * self.patch_size * self.channels
        if self.patches.shape[-2:] != (H * W, q):
            raise ValueError(f"patches shape {self.patches.shape} inconsistent with grid {self.grid}, "
                             f"P={self.patch_size}, C={self.channels}")

    @property
    def L(self) -> int:
        return self.grid[0] * self.grid[1]


def patchify(image: np.ndarray, P: int) -> PatchGrid:
    """Split ``[C, H, W]`` (or ``[B, C, H, W]``) into non-overlapping P x P patches."""
    image = np.asarray(image)
    batched = image.ndim == 4
    x = image if batched else image[None]
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {image.shape}")
    b, c, h, w = x.shape
    if h % P or w % P:
        raise ValueError(f"image {h}x{w} not divisible by patch size {P}")
    gh, gw = h // P, w // P
    p = x.reshape(b, c, gh, P, gw, P).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * P * P)
    p = np.ascontiguousarray(p)
    return PatchGrid(p if batched else p[0], (gh, gw), P, c)


def unpatchify(pg: PatchGrid) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    gh, gw = pg.grid
    P, c = pg.patch_size, pg.channels
    batched = pg.patches.ndim == 3
    x = pg.patches if batched else pg.patches[None]
    b = x.shape[0]
    img = x.reshape(b, gh, gw, c, P, P).transpose(0, 3, 1, 4, 2, 5).reshape(b, c, gh * P, gw * P)
    img = np.ascontiguousarray(img)
    return img if batched else img[0]
