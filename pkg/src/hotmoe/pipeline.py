"""End-to-end adaptation runs: warm-up profiling, plan selection, fine-tuning.

The warm-up phase trains a throwaway fully-adapted copy of the base model
on a small seeded subset of the task, recording which routed experts fire
over the whole trajectory. The resulting activation profile drives hot
expert selection; the warm model itself is discarded. Fine-tuning then
re-attaches fresh zero-update adapters per the chosen scheme and plan on
an unmodified base copy. Frozen base weights are hashed before and after
training so any drift in cold experts (or anything else frozen) is a hard
error, not a silent accuracy bug.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .accounting import (FlopsReport, ParamReport, adapter_flops, count_params,
                         exec_counters)
from .adapters import Scheme, TargetSet, attach, build_mask, set_trainability
from .errors import ConfigError, InvariantViolation, IoError, NumericalError
from .model import (ModelConfig, MoEModel, RoutingTrace, forward_backward,
                    pretrain_base)
from .optim import Adam, AdamConfig
from .profiler import (ActivationProfile, PlacementPlan, coverage, jaccard,
                       record, save_plan, select)
from .tasks import (Dataset, TaskSpec, evaluate, iter_batches, make_task,
                    n_steps, subset)


@dataclass
class RunConfig:
    scheme: str = "lora"
    attention: bool = True
    gate: bool = True
    experts: str = "plan"          # all | plan | none
    rank: int = 4
    alpha: float = 8.0
    rho: float = 0.10
    strategy: str = "layer_hot"
    plan_k: int = 4
    warmup_pct: float = 25.0       # share of the train split used for warm-up
    warmup_epochs: int = 1
    warmup_forward_only: bool = False
    epochs: int = 3
    batch_size: int = 16
    lr: float = 4e-3
    seed: int = 0
    lb_during_finetune: bool = False

    def validate(self, model_cfg: ModelConfig) -> None:
        if not 0.0 < self.warmup_pct <= 100.0:
            raise ConfigError(f"warmup_pct out of (0,100]: {self.warmup_pct}")
        if self.plan_k > model_cfg.n_experts:
            raise ConfigError(
                f"plan_k {self.plan_k} > n_experts {model_cfg.n_experts}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.epochs < 0 or self.warmup_epochs < 1:
            raise ConfigError("epochs must be >= 0 and warmup_epochs >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        Scheme(self.scheme, self.rho)              # name/rho checks
        TargetSet(self.attention, self.gate, self.experts)

    def target_set(self) -> TargetSet:
        return TargetSet(self.attention, self.gate, self.experts)


def clone_model(cfg: ModelConfig, base_state: dict[str, np.ndarray]) -> MoEModel:
    model = MoEModel(cfg, seed=0)
    model.registry.load_state(base_state)
    return model


def frozen_param_hashes(model: MoEModel) -> dict[str, str]:
    """SHA-256 of every frozen non-adapter tensor, keyed by name."""
    out = {}
    for name, entry in model.registry.items():
        if ".adapter." in name or entry.trainable:
            continue
        out[name] = hashlib.sha256(entry.tensor.data.tobytes()).hexdigest()
    return out


def check_frozen_integrity(model: MoEModel, before: dict[str, str]) -> None:
    after = frozen_param_hashes(model)
    for name, digest in before.items():
        if after.get(name) != digest:
            raise InvariantViolation(f"frozen parameter {name} changed during training")


def masks_from_donor(model: MoEModel, rho: float) -> dict[str, np.ndarray]:
    """Sparsity masks for a second-phase run, from a dense-phase model's B tensors."""
    if not model.adapters:
        raise ConfigError("donor model has no adapters to derive masks from")
    return {name: build_mask(pair.B.data, rho)
            for name, pair in model.adapters.items()}


# -- warm-up -----------------------------------------------------------------


@dataclass
class WarmupResult:
    profile: ActivationProfile
    subset_size: int
    steps: int
    losses: list[float] = field(default_factory=list)


def run_warmup(cfg: ModelConfig, base_state: dict[str, np.ndarray],
               train: Dataset, run: RunConfig) -> WarmupResult:
    """Profile expert activations on a task subset with a throwaway adapted copy.

    The copy gets full-coverage adapters (all experts, attention, gate) so
    the profile reflects adaptation dynamics, not just the frozen router.
    Counts accumulate over every step of the trajectory.
    """
    run.validate(cfg)
    sub = subset(train, run.warmup_pct, run.seed)
    model = clone_model(cfg, base_state)
    attach(model, TargetSet(True, True, "all"), None, Scheme("lora"),
           r=run.rank, alpha=run.alpha, seed=run.seed)
    set_trainability(model, Scheme("lora"))
    profile = ActivationProfile.empty(cfg.n_layers, cfg.n_experts,
                                      source=f"warmup pct={run.warmup_pct!r}")
    losses: list[float] = []
    steps = 0
    if run.warmup_forward_only:
        with T.no_grad():
            for lo in range(0, len(sub), run.batch_size):
                out = model.forward(sub.tokens[lo:lo + run.batch_size],
                                    want_trace=True)
                record(profile, out.trace)
                steps += 1
    else:
        opt = Adam(model.registry, AdamConfig(lr=run.lr))
        for batch in iter_batches(sub, run.batch_size, run.warmup_epochs, run.seed):
            result = forward_backward(model, batch, lb_mode="off", want_trace=True)
            opt.step()
            record(profile, result.trace)
            losses.append(result.loss.item())
            steps += 1
        if losses and not np.isfinite(losses[-1]):
            raise NumericalError(f"warm-up diverged at step {steps}")
    profile.check_conservation(cfg.k_route)
    return WarmupResult(profile=profile, subset_size=len(sub), steps=steps,
                        losses=losses)


def build_plan(profile: ActivationProfile, k: int, strategy: str,
               seed: int | None = None) -> PlacementPlan:
    return select(profile, k, strategy, seed)


# -- fine-tuning ---------------------------------------------------------------


@dataclass
class TrainReport:
    scheme: str
    strategy: str
    plan: PlacementPlan | None
    acc_before: dict[str, float]
    acc_after: dict[str, float]
    losses: list[float]
    params: ParamReport
    flops: FlopsReport | None
    hit_rate: float | None
    steps: int

    def delta(self, task: str) -> float:
        return self.acc_after[task] - self.acc_before[task]

    def format(self) -> str:
        lines = [f"scheme={self.scheme} strategy={self.strategy} steps={self.steps}"]
        for task in sorted(self.acc_before):
            lines.append(
                f"task={task} before={self.acc_before[task]!r} "
                f"after={self.acc_after[task]!r}")
        lines.append(self.params.format())
        if self.flops is not None:
            lines.append(self.flops.format())
        if self.hit_rate is not None:
            lines.append(f"hit_rate={self.hit_rate!r}")
        return "\n".join(lines)


def finetune(cfg: ModelConfig, base_state: dict[str, np.ndarray], train: Dataset,
             evals: dict[str, Dataset], plan: PlacementPlan | None,
             run: RunConfig, masks: dict[str, np.ndarray] | None = None,
             out_dir: str | Path | None = None) -> tuple[MoEModel, TrainReport]:
    """Adapt a fresh copy of the base model on one task, with full accounting."""
    run.validate(cfg)
    model = clone_model(cfg, base_state)
    scheme = Scheme(run.scheme, run.rho)
    attach(model, run.target_set(), plan, scheme, r=run.rank, alpha=run.alpha,
           seed=run.seed, masks=masks)
    set_trainability(model, scheme)
    frozen_before = frozen_param_hashes(model)

    acc_before = {k: evaluate(model.logits_fn(), ds) for k, ds in evals.items()}

    opt = Adam(model.registry, AdamConfig(lr=run.lr))
    lb_mode = None if run.lb_during_finetune else "off"
    losses: list[float] = []
    traces: list[RoutingTrace] = []
    for batch in iter_batches(train, run.batch_size, run.epochs, run.seed):
        result = forward_backward(model, batch, lb_mode=lb_mode, want_trace=True)
        opt.step()
        losses.append(result.loss.item())
        traces.append(result.trace)
        if not np.isfinite(losses[-1]):
            raise NumericalError(f"fine-tuning diverged at step {len(losses)}")
    steps = len(losses)
    assert steps == n_steps(len(train), run.batch_size, run.epochs)

    check_frozen_integrity(model, frozen_before)
    acc_after = {k: evaluate(model.logits_fn(), ds) for k, ds in evals.items()}

    flops = None
    hit_rate = None
    if traces:
        merged = RoutingTrace.merge(traces)
        flops = adapter_flops(merged, model)
        if plan is not None:
            hit_rate = exec_counters(merged, plan).hit_rate
    report = TrainReport(scheme=run.scheme, strategy=run.strategy, plan=plan,
                         acc_before=acc_before, acc_after=acc_after,
                         losses=losses, params=count_params(model),
                         flops=flops, hit_rate=hit_rate, steps=steps)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        model.save(out_dir / "adapted.ckpt")
        _write_text(out_dir / "report.txt", report.format() + "\n")
    return model, report


# -- orchestration ---------------------------------------------------------------


@dataclass
class EndToEndResult:
    plan: PlacementPlan | None
    warmup: WarmupResult | None
    report: TrainReport
    model: MoEModel


def run_end_to_end(cfg: ModelConfig, specs: list[TaskSpec], target_kind: str,
                   base_state: dict[str, np.ndarray], run: RunConfig,
                   out_dir: str | Path | None = None) -> EndToEndResult:
    """Warm-up, plan, adapt on one task; evaluate on every task's test split."""
    run.validate(cfg)
    by_kind = {s.kind: s for s in specs}
    if target_kind not in by_kind:
        raise ConfigError(f"target task {target_kind} not in mixture "
                          f"{sorted(by_kind)}")
    splits = {s.kind: make_task(s, cfg.max_seq) for s in specs}
    train = splits[target_kind][0]
    evals = {kind: test for kind, (_, test) in splits.items()}

    warmup = None
    plan = None
    if run.experts == "plan":
        warmup = run_warmup(cfg, base_state, train, run)
        plan = build_plan(warmup.profile, run.plan_k, run.strategy,
                          seed=run.seed if run.strategy == "random" else None)
    masks = None
    if run.scheme == "lori_s":
        donor_run = replace(run, scheme="lori_d")
        donor, _ = finetune(cfg, base_state, train, {}, plan, donor_run)
        masks = masks_from_donor(donor, run.rho)
    model, report = finetune(cfg, base_state, train, evals, plan, run,
                             masks=masks, out_dir=out_dir)
    if out_dir is not None and plan is not None:
        save_plan(plan, Path(out_dir) / "plan.csv")
    return EndToEndResult(plan=plan, warmup=warmup, report=report, model=model)


# -- ablations ---------------------------------------------------------------


ABLATION_AXES = ("strategy", "plan_k", "warmup_pct", "targets")

TARGET_CHOICES = {
    "attention_only": dict(attention=True, gate=False, experts="none"),
    "experts_only": dict(attention=False, gate=False, experts="plan"),
    "gate_only": dict(attention=False, gate=True, experts="none"),
    "all": dict(attention=True, gate=True, experts="plan"),
}


def _row_base(axis: str, value, seed: int, kind: str) -> dict:
    return {"axis": axis, "value": str(value), "seed": seed, "task": kind}


def ablate(cfg: ModelConfig, specs: list[TaskSpec], target_kind: str,
           base_state: dict[str, np.ndarray], run: RunConfig,
           axes: dict[str, list], seeds: list[int] | None = None,
           out_dir: str | Path | None = None) -> list[dict]:
    """One-knob-at-a-time sweeps around the baseline run configuration.

    Warm-up profiles are computed once per seed and shared across the
    strategy / plan_k / targets axes (the profile does not depend on those
    knobs). The warmup_pct axis is the exception: it re-profiles at each
    fraction and reports plan agreement against the p=100 reference.
    """
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis: {axis}")
    seeds = seeds if seeds is not None else [run.seed]
    splits = {s.kind: make_task(s, cfg.max_seq) for s in specs}
    if target_kind not in splits:
        raise ConfigError(f"target task {target_kind} not in mixture")
    train = splits[target_kind][0]
    evals = {kind: test for kind, (_, test) in splits.items()}

    rows: list[dict] = []
    base_profiles: dict[int, ActivationProfile] = {}
    full_plans: dict[int, PlacementPlan] = {}

    def profile_for(seed: int) -> ActivationProfile:
        if seed not in base_profiles:
            r = replace(run, seed=seed)
            base_profiles[seed] = run_warmup(cfg, base_state, train, r).profile
        return base_profiles[seed]

    def finetune_row(r: RunConfig, plan) -> dict:
        _, rep = finetune(cfg, base_state, train, evals, plan, r)
        row = {
            "acc_before": rep.acc_before[target_kind],
            "acc_after": rep.acc_after[target_kind],
            "delta": rep.delta(target_kind),
            "trainable": rep.params.trainable,
            "fraction": rep.params.fraction,
        }
        if rep.flops is not None:
            row["reduction_pct"] = rep.flops.reduction_pct
        if rep.hit_rate is not None:
            row["hit_rate"] = rep.hit_rate
        return row

    for axis, values in axes.items():
        for value in values:
            for seed in seeds:
                r = replace(run, seed=seed)
                row = _row_base(axis, value, seed, target_kind)
                if axis == "strategy":
                    plan = select(profile_for(seed), r.plan_k, value,
                                  seed=seed if value == "random" else None)
                    row.update(finetune_row(replace(r, strategy=value), plan))
                elif axis == "plan_k":
                    plan = select(profile_for(seed), int(value), r.strategy)
                    row.update(finetune_row(replace(r, plan_k=int(value)), plan))
                elif axis == "targets":
                    if value not in TARGET_CHOICES:
                        raise ConfigError(f"unknown target choice: {value}")
                    tr = replace(r, **TARGET_CHOICES[value])
                    plan = None
                    if tr.experts == "plan":
                        plan = select(profile_for(seed), tr.plan_k, tr.strategy)
                    row.update(finetune_row(tr, plan))
                else:  # warmup_pct
                    rw = replace(r, warmup_pct=float(value))
                    prof = run_warmup(cfg, base_state, train, rw).profile
                    plan = select(prof, r.plan_k, r.strategy)
                    if seed not in full_plans:
                        ref_prof = run_warmup(
                            cfg, base_state, train,
                            replace(r, warmup_pct=100.0)).profile
                        full_plans[seed] = select(ref_prof, r.plan_k, r.strategy)
                    _, mean_j = jaccard(plan, full_plans[seed])
                    row["jaccard_vs_full"] = mean_j
                    row["coverage_pct"] = coverage(plan, full_plans[seed])
                    row.update(finetune_row(rw, plan))
                rows.append(row)

    summary = _summarize(rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rows_csv(out_dir / "ablation.csv", rows + summary)
        write_rows_markdown(out_dir / "ablation.md", rows + summary)
    return rows + summary


def _summarize(rows: list[dict]) -> list[dict]:
    """Mean/std of acc_after per (axis, value), emitted as summary rows."""
    groups: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        groups.setdefault((row["axis"], row["value"]), []).append(row["acc_after"])
    out = []
    for (axis, value), accs in groups.items():
        out.append({"axis": axis, "value": value, "seed": "summary",
                    "task": rows[0]["task"],
                    "acc_after": float(np.mean(accs)),
                    "acc_std": float(np.std(accs)),
                    "n": len(accs)})
    return out


def write_rows_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ConfigError("no rows to write")
    cols: list[str] = []
    for row in rows:
        for key in row:
            if key not in cols:
                cols.append(key)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, restval="")
            w.writeheader()
            for row in rows:
                w.writerow({k: _fmt_cell(v) for k, v in row.items()})
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def write_rows_markdown(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ConfigError("no rows to write")
    cols: list[str] = []
    for row in rows:
        for key in row:
            if key not in cols:
                cols.append(key)
    lines = ["| " + " | ".join(cols) + " |",
             "| " + " | ".join("---" for _ in cols) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(_fmt_cell(row.get(k, "")) for k in cols) + " |")
    _write_text(path, "\n".join(lines) + "\n")


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_text(path: str | Path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


# -- cross-task transfer ---------------------------------------------------------


def cross_task_matrix(cfg: ModelConfig, specs: list[TaskSpec],
                      base_state: dict[str, np.ndarray], run: RunConfig,
                      out_dir: str | Path | None = None) -> dict:
    """Adapt per task, evaluate on all tasks; compare plans across tasks.

    Returns {"acc": {adapt_task: {eval_task: acc}}, "plans": {task: plan},
    "plan_jaccard": {(a, b): mean}} with adapt tasks as columns.
    """
    run.validate(cfg)
    acc: dict[str, dict[str, float]] = {}
    plans: dict[str, PlacementPlan] = {}
    for spec in specs:
        res = run_end_to_end(cfg, specs, spec.kind, base_state, run)
        acc[spec.kind] = res.report.acc_after
        if res.plan is not None:
            plans[spec.kind] = res.plan
    plan_j: dict[tuple[str, str], float] = {}
    kinds = [s.kind for s in specs]
    for i, a in enumerate(kinds):
        for b in kinds[i + 1:]:
            if a in plans and b in plans:
                _, mean_j = jaccard(plans[a], plans[b])
                plan_j[(a, b)] = mean_j
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for ev in kinds:
            row = {"eval_task": ev}
            for ad in kinds:
                row[f"adapted_on_{ad}"] = acc[ad].get(ev, float("nan"))
            rows.append(row)
        write_rows_csv(out_dir / "cross_task.csv", rows)
    return {"acc": acc, "plans": plans, "plan_jaccard": plan_j}


# -- convenience -----------------------------------------------------------------


def pretrain_and_state(cfg: ModelConfig, specs: list[TaskSpec], steps: int,
                       seed: int, out_dir: str | Path | None = None,
                       lr: float = 1e-3) -> tuple[dict[str, np.ndarray], dict]:
    """Pretrain a base model on the mixture; return its state and profiles."""
    result = pretrain_base(cfg, specs, steps, seed, out_dir=out_dir, lr=lr)
    return result.model.registry.state_arrays(), result.profiles
