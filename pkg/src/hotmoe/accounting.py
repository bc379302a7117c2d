"""Trainable-parameter and adapter-FLOPs accounting.

Parameter counts have scheme-specific closed forms (lora r(d_in+d_out),
lori_d r*d_out, lori_s mask popcount) that must agree exactly with the
registry enumeration. FLOPs use 1 MAC = 2 FLOPs, so one adapter execution
on one token costs 2*r*(d_in+d_out); training costs exactly 3x forward.
Backbone FLOPs are excluded throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvariantViolation


def _pair_scheme(pair) -> str:
    if pair.mask is not None:
        return "lori_s"
    return "lori_d" if pair.a_frozen else "lora"


def _target_kind(name: str) -> str:
    if ".attn." in name:
        return "attention"
    if ".router." in name:
        return "gate"
    if ".shared" in name:
        return "shared"
    return "experts"


def closed_form_pair_params(pair) -> int:
    d_in, d_out = pair.A.shape[0], pair.B.shape[1]
    scheme = _pair_scheme(pair)
    if scheme == "lora":
        return pair.r * (d_in + d_out)
    if scheme == "lori_d":
        return pair.r * d_out
    return int(pair.mask.sum())  # ceil(rho*numel) by build_mask's contract


@dataclass
class ParamReport:
    base_total: int
    trainable: int
    fraction: float
    per_target: dict[str, int] = field(default_factory=dict)
    closed_form: int = 0

    def format(self) -> str:
        parts = [f"base={self.base_total}", f"trainable={self.trainable}",
                 f"fraction={self.fraction:.6f}"]
        parts += [f"{k}={v}" for k, v in sorted(self.per_target.items())]
        return " ".join(parts)


def count_params(model) -> ParamReport:
    """Adapter-trainable counts, cross-checked closed form vs registry."""
    base_total = 0
    registry_trainable = 0
    for name, entry in model.registry.items():
        if ".adapter." in name:
            if entry.trainable:
                if entry.mask is not None:
                    registry_trainable += int(entry.mask.sum())
                else:
                    registry_trainable += entry.tensor.size
        else:
            base_total += entry.tensor.size
    per_target: dict[str, int] = {}
    closed = 0
    for name, pair in model.adapters.items():
        n = closed_form_pair_params(pair)
        closed += n
        kind = _target_kind(name)
        per_target[kind] = per_target.get(kind, 0) + n
    if model.adapters and registry_trainable and closed != registry_trainable:
        raise InvariantViolation(
            f"closed-form count {closed} != registry enumeration {registry_trainable}")
    return ParamReport(base_total=base_total, trainable=registry_trainable,
                       fraction=registry_trainable / base_total,
                       per_target=per_target, closed_form=closed)


@dataclass
class FlopsReport:
    forward_flops: int
    train_flops: int
    attention_gate_flops: int
    expert_flops: int          # routed experts under the attached placement
    shared_flops: int
    baseline_forward_flops: int    # same trace, experts=all
    baseline_expert_flops: int
    exec_per_layer: list[int]      # routed-expert adapter executions per layer
    reduction_pct: float           # vs the full-LoRA baseline, total
    expert_reduction_pct: float    # expert targets only
    tokens: int

    def format(self) -> str:
        return (f"forward={self.forward_flops} train={self.train_flops} "
                f"reduction={self.reduction_pct:.2f}% "
                f"expert_reduction={self.expert_reduction_pct:.2f}% "
                f"tokens={self.tokens}")


def _exec_cost(pair) -> int:
    return 2 * pair.r * (pair.A.shape[0] + pair.B.shape[1])


def adapter_flops(trace, model, tokens: int | None = None) -> FlopsReport:
    """Cost the trace's adapter executions; re-cost under experts=all as baseline."""
    cfg = model.config
    if len(trace.layers) != cfg.n_layers:
        raise ConfigError(
            f"trace has {len(trace.layers)} layers, model {cfg.n_layers}")
    if trace.n_experts != cfg.n_experts:
        raise ConfigError(
            f"trace n_experts {trace.n_experts} != model {cfg.n_experts}")
    if tokens is None:
        tokens = trace.n_tokens
    counts = np.zeros((cfg.n_layers, cfg.n_experts), dtype=np.int64)
    for l, lt in enumerate(trace.layers):
        counts[l] = np.bincount(lt.indices.reshape(-1), minlength=cfg.n_experts)

    attn_gate = 0
    expert = 0
    shared = 0
    baseline_expert = 0
    exec_per_layer = [0] * cfg.n_layers

    for name, pair in model.adapters.items():
        kind = _target_kind(name)
        if kind in ("attention", "gate"):
            attn_gate += tokens * _exec_cost(pair)
        elif kind == "shared":
            shared += tokens * _exec_cost(pair)
        else:
            layer = int(name.split(".")[0].removeprefix("layer"))
            e = int(name.split(".")[1].removeprefix("expert"))
            execs = int(counts[layer, e])
            expert += execs * _exec_cost(pair)
            if name.endswith(".w_up"):
                exec_per_layer[layer] += execs
    # baseline re-costs every routed selection as if adapted; unit cost is
    # both projections of one expert, taken from any attached pair (all
    # experts share dims). No expert adapters at all -> baseline == actual.
    up_pairs = [p for n, p in model.adapters.items()
                if _target_kind(n) == "experts" and n.endswith(".w_up")]
    down_pairs = [p for n, p in model.adapters.items()
                  if _target_kind(n) == "experts" and n.endswith(".w_down")]
    if up_pairs:
        unit = _exec_cost(up_pairs[0]) + _exec_cost(down_pairs[0])
        baseline_expert = int(counts.sum()) * unit
    forward = attn_gate + expert + shared
    baseline_forward = attn_gate + baseline_expert + shared
    reduction = 0.0
    if baseline_forward > 0:
        reduction = 100.0 * (1.0 - forward / baseline_forward)
    expert_reduction = 0.0
    if baseline_expert > 0:
        expert_reduction = 100.0 * (1.0 - expert / baseline_expert)
    if not 0.0 <= reduction < 100.0:
        raise InvariantViolation(f"reduction out of [0,100): {reduction}")
    return FlopsReport(
        forward_flops=forward, train_flops=3 * forward,
        attention_gate_flops=attn_gate, expert_flops=expert, shared_flops=shared,
        baseline_forward_flops=baseline_forward,
        baseline_expert_flops=baseline_expert,
        exec_per_layer=exec_per_layer,
        reduction_pct=reduction, expert_reduction_pct=expert_reduction,
        tokens=tokens)


@dataclass
class ExecCounters:
    per_layer: list[tuple[int, int]]   # (activated-and-hot, activated)

    @property
    def hit_rate(self) -> float:
        total = sum(a for _, a in self.per_layer)
        hits = sum(h for h, _ in self.per_layer)
        return hits / total if total else 0.0

    @property
    def expert_flops_reduction(self) -> float:
        return 1.0 - self.hit_rate


def exec_counters(trace, plan) -> ExecCounters:
    """Per-layer routed-selection hit counts against the plan's hot sets."""
    per_layer = []
    for l, lt in enumerate(trace.layers):
        flat = lt.indices.reshape(-1)
        hot = np.zeros(trace.n_experts, dtype=bool)
        hot[list(plan.hot[l])] = True
        per_layer.append((int(hot[flat].sum()), int(flat.size)))
    return ExecCounters(per_layer=per_layer)
