"""Low-rank adapter schemes and their attachment to model weight targets.

Three schemes over the same (A, B) pair shape:

  lora    h = xW + s*xAB, A and B trainable, s = alpha/r
  lori_d  A frozen at its random init, B dense-trainable
  lori_s  A frozen, B trainable only on a fixed binary mask M built from
          the magnitudes of a prior lori_d run's B (h = xW + s*xA(B.M))

B always starts at zero, so a freshly adapted model computes bit-identical
outputs to the base model. Cold experts get no adapter objects at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvariantViolation
from .tensor import Tensor

SCHEME_NAMES = ("lora", "lori_d", "lori_s")
EXPERT_MODES = ("all", "plan", "none")


@dataclass
class Scheme:
    name: str
    rho: float = 0.10  # lori_s trainable density on B

    def __post_init__(self):
        if self.name not in SCHEME_NAMES:
            raise ConfigError(f"unknown adapter scheme: {self.name}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"sparsity density out of (0,1]: {self.rho}")


@dataclass
class TargetSet:
    attention: bool = True
    gate: bool = True
    experts: str = "plan"  # all | plan | none

    def __post_init__(self):
        if self.experts not in EXPERT_MODES:
            raise ConfigError(f"unknown expert target mode: {self.experts}")
        if not (self.attention or self.gate or self.experts != "none"):
            raise ConfigError("target set enables nothing")


@dataclass
class AdapterPair:
    A: Tensor                      # d_in x r
    B: Tensor                      # r x d_out
    r: int
    alpha: float
    mask: np.ndarray | None = None  # bool r x d_out, fixed for the pair's lifetime
    a_frozen: bool = False
    _mask_f: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        d_in, d_out = self.A.shape[0], self.B.shape[1]
        if self.r > min(d_in, d_out):
            raise ConfigError(f"rank {self.r} exceeds min(d_in={d_in}, d_out={d_out})")
        if self.A.shape != (d_in, self.r) or self.B.shape != (self.r, d_out):
            raise InvariantViolation("adapter pair shape mismatch")
        if self.mask is not None:
            self.set_mask(self.mask)

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def set_mask(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask)
        if mask.dtype != np.bool_ or mask.shape != self.B.shape:
            raise InvariantViolation("adapter mask must be bool with B's shape")
        self.mask = mask
        self._mask_f = Tensor(mask.astype(np.float64))


def adapted_forward(x: Tensor, W: Tensor, pair: AdapterPair) -> Tensor:
    base = x @ W
    b_eff = pair.B if pair._mask_f is None else pair.B * pair._mask_f
    return base + ((x @ pair.A) @ b_eff) * pair.scale


def build_mask(b_ref: np.ndarray, rho: float) -> np.ndarray:
    """Top-ceil(rho*numel) |entries| of b_ref; ties go to the lower flat index."""
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"sparsity density out of (0,1]: {rho}")
    flat = np.abs(np.asarray(b_ref, dtype=np.float64).reshape(-1))
    count = math.ceil(rho * flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:count]] = True
    return mask.reshape(np.asarray(b_ref).shape)


def _iter_target_names(model, targets: TargetSet, plan) -> list[str]:
    """Weight names receiving adapters, in a fixed deterministic order."""
    cfg = model.config
    names: list[str] = []
    for layer in range(cfg.n_layers):
        if targets.attention:
            for proj in ("wq", "wk", "wv", "wo"):
                names.append(f"layer{layer}.attn.{proj}")
        if targets.gate:
            names.append(f"layer{layer}.router.w")
        if targets.experts != "none":
            if targets.experts == "all":
                hot = range(cfg.n_experts)
            else:
                hot = sorted(plan.hot[layer])
            for e in hot:
                if e >= cfg.n_experts:
                    raise ConfigError(f"plan expert index {e} >= n_experts {cfg.n_experts}")
                names.append(f"layer{layer}.expert{e}.w_up")
                names.append(f"layer{layer}.expert{e}.w_down")
            # shared experts are always active, so they are always adapted
            for j in range(cfg.n_shared):
                names.append(f"layer{layer}.shared{j}.w_up")
                names.append(f"layer{layer}.shared{j}.w_down")
    return names


def attach(model, targets: TargetSet, plan, scheme: Scheme, r: int, alpha: float,
           seed: int, masks: dict[str, np.ndarray] | None = None):
    """Create zero-update adapters on the designated targets.

    masks: required for lori_s — target name -> bool mask over B, normally
    produced by build_mask on a lori_d run's B tensors.
    """
    if model.adapters:
        raise InvariantViolation("model already has adapters attached")
    if targets.experts == "plan":
        if plan is None:
            raise ConfigError("experts=plan requires a placement plan")
        if len(plan.hot) != model.config.n_layers:
            raise ConfigError(
                f"plan covers {len(plan.hot)} layers, model has {model.config.n_layers}")
    if scheme.name == "lori_s" and masks is None:
        raise ConfigError("lori_s needs masks built from a prior lori_d run")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xADA]))
    for name in _iter_target_names(model, targets, plan):
        W = model.registry[name].tensor
        d_in, d_out = W.shape
        A = Tensor(rng.normal(0.0, 0.02, size=(d_in, r)))
        B = Tensor(np.zeros((r, d_out)))
        pair = AdapterPair(A=A, B=B, r=r, alpha=alpha)
        if scheme.name == "lori_s":
            if name not in masks:
                raise ConfigError(f"lori_s mask missing for target {name}")
            pair.set_mask(masks[name])
        model.registry.add(f"{name}.adapter.A", A, trainable=False)
        model.registry.add(f"{name}.adapter.B", B, trainable=False)
        if pair.mask is not None:
            model.registry.add(f"{name}.adapter.M",
                               Tensor(pair.mask.astype(np.float64)), trainable=False)
        model.adapters[name] = pair
    return model


def set_trainability(model, scheme: Scheme):
    """Freeze the base model; open adapter params according to the scheme."""
    reg = model.registry
    for name, _ in reg.items():
        reg.set_trainable(name, False)
    for target, pair in model.adapters.items():
        if scheme.name == "lora":
            reg.set_trainable(f"{target}.adapter.A", True)
            pair.a_frozen = False
        else:
            pair.a_frozen = True
        b_name = f"{target}.adapter.B"
        reg.set_trainable(b_name, True)
        if scheme.name == "lori_s":
            if pair.mask is None:
                raise ConfigError(f"lori_s adapter on {target} has no mask")
            reg.set_mask(b_name, pair.mask)
    return reg


def detach_adapters(model) -> None:
    """Drop all adapter objects and their registry entries."""
    for target in list(model.adapters):
        for suffix in ("A", "B", "M"):
            name = f"{target}.adapter.{suffix}"
            if name in model.registry:
                model.registry.remove(name)
    model.adapters.clear()
