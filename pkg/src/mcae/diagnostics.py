"""Layer-by-layer gradient audit on a deliberately tiny float64 model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .masking import BatchMask, sample_mask
from .numerics import Tensor, finite_difference_check, ops
from .pipeline import MCAEModel, ModelConfig, finetune_forward, pretrain_forward
from .training import ce_loss, mse_loss

GRADCHECK_TOLERANCE = 1e-4

# parameter-name prefix -> layer label, per model variant
_GROUPS = {
    "convmixer": (("backbone.patch_embed.", "patch_embed"), ("backbone.", "convmixer_block"),
                  ("primary.", "primary_projection"), ("encoder.", "self_route_local"),
                  ("decoder.", "decoder_forward"), ("projection.", "pixel_projection")),
    "vit": (("backbone.patch_embed.", "patch_embed[vit]"), ("backbone.", "vit_block")),
    "head": (("class_head.", "class_head"),),
}


@dataclass
class LayerResult:
    layer: str
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)


@dataclass
class GradcheckSuite:
    layers: list[LayerResult]
    tolerance: float
    seconds: float

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.layers)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def report(self) -> str:
        lines = []
        for r in self.layers:
            flag = "ok" if r.max_rel_error < self.tolerance else "FAIL"
            lines.append(f"{r.layer:20s} max_rel_error={r.max_rel_error:.3e} {flag}")
            for name, err in r.per_tensor.items():
                lines.append(f"  {name:38s} {err:.3e}")
        lines.append(f"overall max_rel_error={self.max_rel_error:.3e} tolerance={self.tolerance:g} "
                     f"({self.seconds:.1f}s)")
        return "\n".join(lines)


def tiny_config(backbone: str = "convmixer", **kw) -> ModelConfig:
    """L = 4 locations, K = 2 capsule types of dimension 2."""
    base = dict(backbone=backbone, image_size=4, patch_size=2, num_caps=2, caps_dim=2, encoder_layers=2,
                backbone_depth=1, vit_heads=2, num_classes=3, init_std=0.5, projection_gain=1.0)
    base.update(kw)
    return ModelConfig(**base)


def _jitter(model: MCAEModel, rng) -> None:
    # move every parameter off its symmetric initial value (zero biases, unit scales)
    for p in model.named_parameters().values():
        p.data += rng.normal(0, 0.2, p.shape)


def _group(params: dict, groups) -> dict[str, dict[str, Tensor]]:
    out: dict[str, dict[str, Tensor]] = {}
    for name, t in params.items():
        for prefix, label in groups:
            if name.startswith(prefix):
                out.setdefault(label, {})[name] = t
                break
    return out


def run_gradcheck(seed: int = 0, tolerance: float = GRADCHECK_TOLERANCE, h: float = 1e-5) -> GradcheckSuite:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    images = rng.random((2, 1, 4, 4))
    results: list[LayerResult] = []

    def check(label, f, params):
        rep = finite_difference_check(lambda _: f(), params, h=h, tolerance=tolerance)
        results.append(LayerResult(label, rep.max_rel_error, dict(rep.per_tensor)))

    plans = BatchMask([sample_mask(4, 0.5, np.random.default_rng([seed, i])) for i in range(2)])
    for backbone in ("convmixer", "vit"):
        cfg = tiny_config(backbone)
        m = MCAEModel.build(cfg, "pretrain", seed, np.float64)
        _jitter(m, rng)
        proj = rng.normal(size=(2, cfg.L, cfg.patch_pixels))

        def pretrain_objective(m=m, proj=proj):
            pred, _ = pretrain_forward(m, images, plans, rng=np.random.default_rng(seed))
            return ops.sum(ops.mul(pred, proj))

        for label, params in _group(m.named_parameters(), _GROUPS[backbone]).items():
            check(label, pretrain_objective, params)

    cfg = tiny_config()
    ft = MCAEModel.build(cfg, "finetune", seed, np.float64)
    _jitter(ft, rng)
    labels = np.array([0, 2])
    for label, params in _group(ft.named_parameters(), _GROUPS["head"]).items():
        check(label, lambda: ce_loss(finetune_forward(ft, images), labels), params)

    pred = Tensor(rng.normal(size=(2, 4, 3)))
    target = rng.normal(size=(2, 4, 3))
    check("mse_loss", lambda: mse_loss(pred, target, plans), {"mse_loss.pred": pred})
    scores = Tensor(rng.uniform(0.05, 0.95, size=(2, 3)))
    check("ce_loss", lambda: ce_loss(scores, labels), {"ce_loss.scores": scores})
    return GradcheckSuite(results, tolerance, time.perf_counter() - t0)
