"""Central finite-difference oracle for tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, backward, no_grad


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(g_ad, g_fd) -> np.ndarray:
    g_ad, g_fd = np.asarray(g_ad), np.asarray(g_fd)
    return np.abs(g_ad - g_fd) / (np.abs(g_ad) + np.abs(g_fd) + 1e-12)


def _scalar(f, params) -> float:
    with no_grad():
        v = f(params)
    v = float(v.data if isinstance(v, Tensor) else v)
    if not np.isfinite(v):
        raise NonFiniteError(f"objective is not finite ({v})")
    return v


def finite_difference_check(f: Callable[[Mapping[str, Tensor]], Tensor],
                            params: Mapping[str, Tensor],
                            h: float = 1e-3,
                            tolerance: float = 1e-4,
                            max_coords: Optional[int] = None,
                            seed: int = 0) -> GradcheckReport:
    """Compare autodiff gradients of ``f(params)`` with central differences.

    ``f`` must be deterministic and every parameter must be float64. At most
    ``max_coords`` coordinates per tensor are probed (all when None).
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"gradient check needs float64 tensors; {name} is {p.dtype}")

    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("objective is not finite")
    backward(tape, loss)

    rng = np.random.default_rng(seed)
    report = GradcheckReport(max_rel_error=0.0, tolerance=tolerance)
    for name, p in params.items():
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f, params)
            flat[i] = orig - h
            fm = _scalar(f, params)
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * h)
            worst = max(worst, float(rel_error(g_ad.reshape(-1)[i], g_fd)))
        report.per_tensor[name] = worst
        report.n_checked += len(coords)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
