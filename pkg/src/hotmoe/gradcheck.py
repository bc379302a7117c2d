"""Finite-difference gradient verification against the autodiff tape."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .registry import ParamRegistry
from .tensor import Tensor


@dataclass
class GradCheckReport:
    eps: float
    per_param: dict[str, float] = field(default_factory=dict)   # max rel err
    coords_checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        if not self.per_param:
            return 0.0
        return max(self.per_param.values())

    def passes(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def format(self) -> str:
        lines = [f"gradcheck eps={self.eps:g} max_rel_err={self.max_rel_err:.3e}"]
        for name, err in self.per_param.items():
            lines.append(f"  {name}: rel_err={err:.3e} coords={self.coords_checked[name]}")
        return "\n".join(lines)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    registry: ParamRegistry,
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients with central differences on trainable coords.

    loss_fn must rebuild the loss from the registry's current tensors on
    every call (the perturbation loop mutates them in place). Masked-out
    coordinates are skipped: their analytic gradient is zeroed by the
    optimizer contract, not by the tape.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps out of range: {eps}")
    registry.zero_grads()
    loss = loss_fn()
    loss.backward()
    report = GradCheckReport(eps=eps)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFD]))
    for name, entry in registry.trainable_items():
        data = entry.tensor.data
        grad = entry.tensor.grad
        if grad is None:
            grad = np.zeros_like(data)
        flat = data.reshape(-1)
        coords = np.arange(flat.size)
        if entry.mask is not None:
            coords = coords[entry.mask.reshape(-1)]
        if max_coords_per_param is not None and coords.size > max_coords_per_param:
            coords = rng.choice(coords, size=max_coords_per_param, replace=False)
            coords.sort()
        worst = 0.0
        gflat = grad.reshape(-1)
        with T.no_grad():
            for idx in coords:
                keep = flat[idx]
                flat[idx] = keep + eps
                f_plus = loss_fn().item()
                flat[idx] = keep - eps
                f_minus = loss_fn().item()
                flat[idx] = keep
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(gflat[idx]), 1e-8)
                worst = max(worst, abs(gflat[idx] - numeric) / denom)
        report.per_param[name] = worst
        report.coords_checked[name] = int(coords.size)
    return report
