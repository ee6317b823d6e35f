"""End-to-end graphs: masked pretraining and classification finetuning.

    model = MCAEModel.build(ModelConfig(), phase="pretrain", seed=0)
    pred, target = pretrain_forward(model, images, plans, rng=rng)
    scores = finetune_forward(model.for_finetune(seed=1), images)

Parameter names are dotted paths (``backbone.block0.dw_weight``,
``encoder.1.W_pose`` ...); the checkpoint format stores exactly these names.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from . import backbone as bb
from .capsules import (CapsuleMap, DecoderParams, MaskTokenSpec, SelfRoutingParams, class_head,
                       decoder_forward, encoder_forward, mask_select, pixel_projection, reinsert_masked)
from .masking import BatchMask, PatchGrid, patchify
from .numerics import ShapeError, Tensor, ops

PHASES = ("pretrain", "finetune")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "convmixer"
    image_size: int = 28
    channels: int = 1
    patch_size: int = 7
    num_caps: int = 16
    caps_dim: int = 16
    encoder_layers: int = 3
    backbone_depth: int = 4
    kernel_dw: int = 3
    vit_heads: int = 4
    vit_mlp_ratio: int = 2
    vit_norm: str = "layer"
    decoder_caps: int = 0   # 0 -> num_caps
    decoder_dim: int = 0    # 0 -> caps_dim
    num_classes: int = 10
    init_std: float = 0.0          # routing weights; 0 -> 1/sqrt(caps_dim)
    projection_gain: float = 4.0   # pixel projection scale, in units of L*M

    def __post_init__(self):
        if self.backbone not in ("convmixer", "vit"):
            raise ValueError(f"backbone must be convmixer or vit, got {self.backbone!r}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for name in ("num_caps", "caps_dim", "encoder_layers", "num_classes", "patch_size", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def L(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def embed_dim(self) -> int:
        return self.num_caps * self.caps_dim

    @property
    def patch_pixels(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def M(self) -> int:
        return self.decoder_caps or self.num_caps

    @property
    def D_out(self) -> int:
        return self.decoder_dim or self.caps_dim

    @property
    def routing_std(self) -> float:
        return self.init_std or 1.0 / math.sqrt(self.caps_dim)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        vals = {}
        for line in text.splitlines():
            if "=" not in line:
                continue
            k, v = line.split("=", 1)
            if k in kinds:
                vals[k] = _coerce(kinds[k], v)
        return cls(**vals)


def _coerce(kind, v: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    return {"int": int, "float": float, "str": str}[kind](v)


class MCAEModel:
    """All parameters and running statistics for one phase of the model."""

    def __init__(self, config: ModelConfig, phase: str, dtype=np.float32):
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        self.config = config
        self.phase = phase
        self.dtype = np.dtype(dtype)
        self.training = True
        self.patch_embed: bb.PatchEmbedParams
        self.stem_norm: Optional[bb.Norm] = None
        self.mixer: list = []
        self.pos_embed: Optional[Tensor] = None
        self.final_norm: Optional[bb.Norm] = None
        self.primary: bb.PrimaryProjectionParams
        self.encoder: list[SelfRoutingParams] = []
        self.decoder: Optional[DecoderParams] = None
        self.W_px: Optional[Tensor] = None
        self.b_px: Optional[Tensor] = None
        self.head: Optional[SelfRoutingParams] = None

    @classmethod
    def build(cls, config: ModelConfig, phase: str = "pretrain", seed: int = 0, dtype=np.float32) -> "MCAEModel":
        m = cls(config, phase, dtype)
        c = config
        rng = np.random.default_rng([seed, 0])
        E, K, D = c.embed_dim, c.num_caps, c.caps_dim
        m.patch_embed = bb.PatchEmbedParams.init(c.channels, c.patch_size, E, rng, dtype)
        if c.backbone == "convmixer":
            m.stem_norm = bb.Norm.init(E, dtype=dtype)
            m.mixer = [bb.ConvMixerBlockParams.init(E, c.kernel_dw, rng, dtype) for _ in range(c.backbone_depth)]
        else:
            m.pos_embed = Tensor(rng.normal(0, 0.02, (c.L, E)), requires_grad=True, dtype=dtype)
            m.mixer = [bb.ViTBlockParams.init(E, c.vit_heads, c.vit_mlp_ratio, rng, c.vit_norm, dtype)
                       for _ in range(c.backbone_depth)]
            m.final_norm = bb.Norm.init(E, c.vit_norm, dtype)
        m.primary = bb.PrimaryProjectionParams.init(K, D, rng, dtype)
        m.encoder = [SelfRoutingParams.init(K, D, K, D, rng, c.routing_std, dtype) for _ in range(c.encoder_layers)]
        if phase == "pretrain":
            m._init_decoder(np.random.default_rng([seed, 1]))
        else:
            m._init_head(np.random.default_rng([seed, 2]))
        return m

    def _init_decoder(self, rng):
        c = self.config
        self.decoder = DecoderParams.init(c.L, c.num_caps, c.caps_dim, c.M, c.D_out, rng, c.routing_std, self.dtype)
        fan_in = c.M * c.D_out
        # decoder activations sum to 1 over all L*M outputs, so each is ~1/(L*M);
        # scale the projection up to match or the pixel path starts out silent
        bound = c.projection_gain * c.L * c.M / math.sqrt(fan_in)
        self.W_px = Tensor(rng.uniform(-bound, bound, (fan_in, c.patch_pixels)), requires_grad=True, dtype=self.dtype)
        self.b_px = Tensor(np.zeros(c.patch_pixels), requires_grad=True, dtype=self.dtype)

    def _init_head(self, rng):
        c = self.config
        self.head = SelfRoutingParams.init(c.num_caps, c.caps_dim, c.num_classes, c.caps_dim, rng,
                                           c.routing_std, self.dtype)

    def for_finetune(self, seed: int = 0) -> "MCAEModel":
        """Copy of backbone + encoder with a fresh class head; decoder and projection dropped."""
        ft = MCAEModel.build(self.config, "finetune", seed, self.dtype)
        state = {k: v for k, v in self.state().items() if not k.startswith(("decoder.", "projection."))}
        ft.load_state(state, strict=False)
        return ft

    # naming
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(prefix, d):
            out.update({f"{prefix}.{k}": v for k, v in d.items()})

        put("backbone.patch_embed", self.patch_embed.tensors())
        if self.stem_norm is not None:
            put("backbone.stem_norm", self.stem_norm.tensors())
        if self.pos_embed is not None:
            out["backbone.pos_embed"] = self.pos_embed
        for i, blk in enumerate(self.mixer):
            put(f"backbone.block{i}", blk.tensors())
        if self.final_norm is not None:
            put("backbone.final_norm", self.final_norm.tensors())
        put("primary", self.primary.tensors())
        for i, layer in enumerate(self.encoder):
            put(f"encoder.{i}", layer.tensors())
        if self.decoder is not None:
            put("decoder", self.decoder.tensors())
            out["projection.W_px"] = self.W_px
            out["projection.b_px"] = self.b_px
        if self.head is not None:
            put("class_head", self.head.tensors())
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.stem_norm is not None:
            out.update({f"backbone.stem_norm.{k}": v for k, v in self.stem_norm.buffers().items()})
        for i, blk in enumerate(self.mixer):
            out.update({f"backbone.block{i}.{k}": v for k, v in blk.buffers().items()})
        if self.final_norm is not None:
            out.update({f"backbone.final_norm.{k}": v for k, v in self.final_norm.buffers().items()})
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, as plain arrays (shared, not copied)."""
        out = {k: v.data for k, v in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays in by name; returns the names that were loaded.

        Shape mismatches always raise. With ``strict`` every model tensor must
        be present and every entry of ``state`` must be used.
        """
        params = self.named_parameters()
        buffers = self.named_buffers()
        loaded = []
        for name, arr in state.items():
            if name in params:
                dst = params[name].data
            elif name in buffers:
                dst = buffers[name]
            elif strict:
                raise KeyError(f"unexpected tensor {name!r}")
            else:
                continue
            arr = np.asarray(arr)
            if arr.shape != dst.shape:
                raise ShapeError("load_state", arr.shape, dst.shape, detail=f"tensor {name}")
            dst[...] = arr
            loaded.append(name)
        if strict:
            missing = set(params) | set(buffers)
            missing -= set(loaded)
            if missing:
                raise KeyError(f"missing tensors: {sorted(missing)}")
        return loaded

    def astype(self, dtype) -> "MCAEModel":
        m = MCAEModel.build(self.config, self.phase, 0, dtype)
        m.load_state({k: v.astype(dtype) for k, v in self.state().items()})
        m.training = self.training
        return m

    def train(self, mode: bool = True) -> "MCAEModel":
        self.training = mode
        return self

    def eval(self) -> "MCAEModel":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()


def _to_input(images, dtype) -> Tensor:
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    return Tensor(x, dtype=dtype)


def encode(model: MCAEModel, images, plan=None) -> tuple[CapsuleMap, Optional[BatchMask]]:
    """Backbone, primary capsules and encoder; masked locations are dropped if ``plan`` masks any.

    Returns the encoded (possibly visible-only) map and the batch mask used.
    """
    c = model.config
    x = _to_input(images, model.dtype)
    if x.shape[1:] != (c.channels, c.image_size, c.image_size):
        raise ShapeError("encode", x.shape, (c.channels, c.image_size, c.image_size), detail="image shape")
    B = x.shape[0]
    bm = None if plan is None else BatchMask.coerce(plan, B)
    if bm is not None and bm.L != c.L:
        raise ShapeError("encode", (bm.L,), (c.L,), detail="mask plan L differs from patch grid")
    masked = bm is not None and bm.n_masked > 0
    tokens = bb.patch_embed(x, model.patch_embed)
    training = model.training

    if c.backbone == "convmixer":
        weights = bm.visibility()[..., None].astype(model.dtype) if masked else None
        t = bb.zero_masked(ops.gelu(tokens), bm)
        t = bb.zero_masked(model.stem_norm(t, training, weights), bm)
        t = bb.convmixer_forward(t, c.grid, bm if masked else None, model.mixer, training)
        primary = bb.to_primary_capsules(t, model.primary, c.grid)
        if masked:
            primary, _ = mask_select(primary, bm)
    else:
        if masked:
            positions = bm.visible
            tokens = ops.gather(tokens, positions, axis=1, batched=True)
        else:
            positions = np.broadcast_to(np.arange(c.L), (B, c.L))
        t = bb.vit_forward(tokens, positions, model.pos_embed, model.mixer, model.final_norm, training)
        primary = bb.to_primary_capsules(t, model.primary, c.grid, index=positions.copy() if masked else None)
    return encoder_forward(primary, model.encoder), bm


def pretrain_forward(model: MCAEModel, images, plan, spec: MaskTokenSpec = MaskTokenSpec(),
                     rng: Optional[np.random.Generator] = None) -> tuple[Tensor, PatchGrid]:
    """Predicted patches [B, L, Q] and the pixel targets."""
    if model.decoder is None:
        raise ValueError("pretrain_forward needs a pretrain-phase model (decoder present)")
    c = model.config
    x = _to_input(images, model.dtype)
    if plan is None:
        from .masking import MaskPlan
        plan = MaskPlan.none(c.L)
    encoded, bm = encode(model, x, plan)
    if rng is None:
        rng = np.random.default_rng(0)
    full = reinsert_masked(encoded, bm, spec, rng) if bm.n_masked else CapsuleMap(
        encoded.poses, encoded.activations, c.grid)
    decoded = decoder_forward(full, model.decoder)
    pred = pixel_projection(decoded, model.W_px, model.b_px)
    return pred, patchify(x.data, c.patch_size)


def finetune_forward(model: MCAEModel, images) -> Tensor:
    """Class scores [B, C]: location-averaged class-capsule activations, no masking."""
    if model.head is None:
        raise ValueError("finetune_forward needs a finetune-phase model (class head present)")
    encoded, _ = encode(model, images, None)
    return class_head(encoded, model.head)


def image_rng(seed: int, epoch: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent stream per (seed, epoch, image index)."""
    return np.random.default_rng([seed, epoch, index, stream])


def config_replace(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)
