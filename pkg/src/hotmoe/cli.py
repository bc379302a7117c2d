"""Command-line surface for the adaptation lab.

Every subcommand takes --config / --seed / --out-dir plus repeatable
--set section.key=value overrides. Artifacts written under --out-dir are
byte-deterministic for identical inputs; wall-clock metadata goes to a
separate meta.txt so report files stay comparable across runs. Failures
print one machine-parsable line to stderr:

    error category=<ErrorClass> message=<text>

with exit codes: IoError 1, ConfigError 2, InvariantViolation 3,
NumericalError 4.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .accounting import adapter_flops, count_params, exec_counters
from .adapters import Scheme, TargetSet, attach, set_trainability
from .checkpoint import load_checkpoint
from .config import FullConfig, apply_overrides, load_config, write_resolved
from .errors import ConfigError, HotmoeError, IoError, NumericalError
from .gradcheck import finite_diff_check
from .model import MoEModel, RoutingTrace, pretrain_base
from . import tensor as T
from .pipeline import (RunConfig, ablate, build_plan, clone_model,
                       cross_task_matrix, finetune, masks_from_donor,
                       run_end_to_end, run_warmup, write_rows_csv)
from .profiler import (ActivationProfile, PlacementPlan, export_heatmap,
                       load_heatmap, load_plan, save_plan)
from .tasks import make_task

EXIT_CODES = {
    "IoError": 1,
    "ConfigError": 2,
    "InvariantViolation": 3,
    "NumericalError": 4,
}

GRADCHECK_TOL = 1e-4


def _load_full(args) -> tuple[FullConfig, list[str]]:
    full = load_config(args.config)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        overrides[dotted.strip()] = raw
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
        overrides["pretrain.seed"] = str(args.seed)
    full, applied = apply_overrides(full, overrides)
    return full, applied


def _prep_out(args, full, applied) -> Path | None:
    if args.out_dir is None:
        return None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out / "resolved.cfg", full, applied)
    stamp = datetime.now(timezone.utc).isoformat()
    try:
        (out / "meta.txt").write_text(
            f"timestamp={stamp}\nargv={' '.join(sys.argv[1:])}\n",
            encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {out / 'meta.txt'}: {e}") from e
    return out


def _load_base(args, full) -> dict[str, np.ndarray]:
    if args.base is None:
        raise ConfigError("this command needs --base <checkpoint>")
    return load_checkpoint(args.base)


def _target_split(full):
    by_kind = {s.kind: s for s in full.task.specs()}
    spec = by_kind[full.task.target]
    return make_task(spec, full.model.max_seq)


# -- subcommands -------------------------------------------------------------


def cmd_pretrain(args) -> int:
    full, applied = _load_full(args)
    if args.out_dir is None:
        raise ConfigError("pretrain needs --out-dir for the checkpoint")
    out = _prep_out(args, full, applied)
    p = full.pretrain
    result = pretrain_base(full.model, full.task.specs(), p.steps, p.seed,
                           out_dir=out, batch_size=p.batch_size, lr=p.lr,
                           competence_acc=p.until_acc or None,
                           check_every=p.check_every)
    rows = [{"step": i, "loss": loss} for i, loss in enumerate(result.losses)]
    if rows:
        write_rows_csv(out / "losses.csv", rows)
    for kind, counts in result.profiles.items():
        tokens = int(counts.sum(axis=1)[0]) // full.model.k_route
        prof = ActivationProfile(counts, tokens_seen=tokens,
                                 source=f"pretrain {kind}")
        export_heatmap(prof, out / f"profile_{kind}.csv")
    final = result.losses[-1] if result.losses else float("nan")
    print(f"pretrain steps={len(result.losses)} final_loss={final!r} "
          f"ckpt={result.checkpoint_path}")
    return 0


def cmd_profile(args) -> int:
    full, applied = _load_full(args)
    out = _prep_out(args, full, applied)
    state = _load_base(args, full)
    train, _ = _target_split(full)
    run = full.run
    if args.forward_only:
        run = replace(run, warmup_forward_only=True)
    res = run_warmup(full.model, state, train, run)
    res.profile.check_conservation(full.model.k_route)
    if out is not None:
        export_heatmap(res.profile, out / "heatmap.csv")
    print(f"profile task={full.task.target} subset={res.subset_size} "
          f"steps={res.steps} tokens={res.profile.tokens_seen}")
    return 0


def cmd_plan(args) -> int:
    full, applied = _load_full(args)
    out = _prep_out(args, full, applied)
    if args.profile is None:
        raise ConfigError("plan needs --profile <heatmap.csv>")
    profile = load_heatmap(args.profile)
    seed = full.run.seed if full.run.strategy == "random" else None
    plan = build_plan(profile, full.run.plan_k, full.run.strategy, seed=seed)
    if out is not None:
        save_plan(plan, out / "plan.csv")
    hot = ";".join(",".join(str(e) for e in layer) for layer in plan.hot)
    print(f"plan strategy={plan.strategy} k={plan.k} hot={hot}")
    return 0


def _plan_from_args(args, full) -> PlacementPlan | None:
    if full.run.experts != "plan":
        return None
    if args.plan is None:
        raise ConfigError("experts=plan needs --plan <plan.csv>")
    return load_plan(args.plan)


def cmd_finetune(args) -> int:
    full, applied = _load_full(args)
    out = _prep_out(args, full, applied)
    state = _load_base(args, full)
    train, _ = _target_split(full)
    evals = {s.kind: make_task(s, full.model.max_seq)[1]
             for s in full.task.specs()}
    plan = _plan_from_args(args, full)
    masks = None
    if full.run.scheme == "lori_s":
        donor, _ = finetune(full.model, state, train, {}, plan,
                            replace(full.run, scheme="lori_d"))
        masks = masks_from_donor(donor, full.run.rho)
    _, report = finetune(full.model, state, train, evals, plan, full.run,
                         masks=masks, out_dir=out)
    print(report.format())
    return 0


def cmd_run(args) -> int:
    full, applied = _load_full(args)
    out = _prep_out(args, full, applied)
    if args.base is not None:
        state = load_checkpoint(args.base)
    else:
        p = full.pretrain
        result = pretrain_base(full.model, full.task.specs(), p.steps, p.seed,
                               out_dir=out, batch_size=p.batch_size, lr=p.lr)
        state = result.model.registry.state_arrays()
    res = run_end_to_end(full.model, full.task.specs(), full.task.target,
                         state, full.run, out_dir=out)
    if out is not None and res.warmup is not None:
        export_heatmap(res.warmup.profile, out / "heatmap.csv")
    print(res.report.format())
    return 0


AXIS_DEFAULTS = {
    "strategy": ["layer_hot", "model_hot", "cold", "random"],
    "plan_k": None,      # filled from n_experts
    "warmup_pct": [5.0, 10.0, 25.0, 50.0, 100.0],
    "targets": ["attention_only", "gate_only", "experts_only", "all"],
}


def cmd_ablate(args) -> int:
    full, applied = _load_full(args)
    out = _prep_out(args, full, applied)
    state = _load_base(args, full)
    names = [a.strip() for a in args.axes.split(",") if a.strip()]
    if not names:
        raise ConfigError("ablate needs --axes with at least one axis")
    axes = {}
    for name in names:
        if name not in AXIS_DEFAULTS:
            raise ConfigError(f"unknown ablation axis: {name}")
        if name == "plan_k":
            ks, k = [], 1
            while k <= full.model.n_experts:
                ks.append(k)
                k *= 2
            axes[name] = ks
        else:
            axes[name] = AXIS_DEFAULTS[name]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = ablate(full.model, full.task.specs(), full.task.target, state,
                  full.run, axes=axes, seeds=seeds, out_dir=out)
    n_summary = sum(1 for r in rows if r["seed"] == "summary")
    print(f"ablate axes={','.join(names)} rows={len(rows) - n_summary} "
          f"summaries={n_summary}")
    return 0


def cmd_crosstask(args) -> int:
    full, applied = _load_full(args)
    out = _prep_out(args, full, applied)
    state = _load_base(args, full)
    res = cross_task_matrix(full.model, full.task.specs(), state, full.run,
                            out_dir=out)
    kinds = sorted(res["acc"])
    for ev in kinds:
        cells = " ".join(f"{ad}={res['acc'][ad].get(ev, float('nan'))!r}"
                         for ad in kinds)
        print(f"crosstask eval={ev} {cells}")
    for (a, b), j in sorted(res["plan_jaccard"].items()):
        print(f"crosstask plan_jaccard {a}/{b}={j!r}")
    return 0


def cmd_flops(args) -> int:
    full, applied = _load_full(args)
    out = _prep_out(args, full, applied)
    state = _load_base(args, full)
    plan = _plan_from_args(args, full)
    model = clone_model(full.model, state)
    scheme = Scheme(full.run.scheme, full.run.rho)
    masks = None
    if scheme.name == "lori_s":
        donor = clone_model(full.model, state)
        attach(donor, full.run.target_set(), plan, Scheme("lori_d"),
               r=full.run.rank, alpha=full.run.alpha, seed=full.run.seed)
        masks = masks_from_donor(donor, full.run.rho)
    attach(model, full.run.target_set(), plan, scheme, r=full.run.rank,
           alpha=full.run.alpha, seed=full.run.seed, masks=masks)
    set_trainability(model, scheme)
    _, test = _target_split(full)
    traces = []
    with T.no_grad():
        for lo in range(0, len(test), full.run.batch_size):
            res = model.forward(test.tokens[lo:lo + full.run.batch_size],
                                want_trace=True)
            traces.append(res.trace)
    rep = adapter_flops(RoutingTrace.merge(traces), model)
    print(rep.format())
    if plan is not None:
        ctr = exec_counters(RoutingTrace.merge(traces), plan)
        print(f"flops hit_rate={ctr.hit_rate!r}")
    if out is not None:
        rows = [{"forward": rep.forward_flops, "train": rep.train_flops,
                 "reduction_pct": rep.reduction_pct,
                 "expert_reduction_pct": rep.expert_reduction_pct,
                 "tokens": rep.tokens}]
        write_rows_csv(out / "flops.csv", rows)
    return 0


def cmd_gradcheck(args) -> int:
    full, applied = _load_full(args)
    _prep_out(args, full, applied)
    model = MoEModel(full.model, seed=full.run.seed)
    train, _ = _target_split(full)
    take = min(len(train), 8)
    from .tasks import Batch
    batch = Batch(tokens=train.tokens[:take], targets=train.targets[:take],
                  loss_mask=train.loss_mask[:take])

    def loss_fn():
        return model.loss(batch).loss

    report = finite_diff_check(loss_fn, model.registry,
                               max_coords_per_param=args.coords,
                               seed=full.run.seed)
    print(report.format())
    if not report.passes(GRADCHECK_TOL):
        raise NumericalError(
            f"max_rel_err {report.max_rel_err:.3e} >= {GRADCHECK_TOL:g}")
    return 0


def cmd_report(args) -> int:
    """Closed-form parameter table for every scheme x placement combination."""
    full, applied = _load_full(args)
    out = _prep_out(args, full, applied)
    cfg = full.model
    k = full.run.plan_k
    plan = PlacementPlan(hot=[list(range(k))] * cfg.n_layers, k=k,
                         strategy="layer_hot")
    rows = []
    for scheme_name in ("lora", "lori_d", "lori_s"):
        for placement, experts, p in (("all", "all", None), (f"plan_k{k}", "plan", plan)):
            model = MoEModel(cfg, seed=0)
            targets = TargetSet(full.run.attention, full.run.gate, experts)
            masks = None
            if scheme_name == "lori_s":
                donor = MoEModel(cfg, seed=0)
                attach(donor, targets, p, Scheme("lori_d"), r=full.run.rank,
                       alpha=full.run.alpha, seed=full.run.seed)
                masks = masks_from_donor(donor, full.run.rho)
            scheme = Scheme(scheme_name, full.run.rho)
            attach(model, targets, p, scheme, r=full.run.rank,
                   alpha=full.run.alpha, seed=full.run.seed, masks=masks)
            set_trainability(model, scheme)
            rep = count_params(model)
            rows.append({"scheme": scheme_name, "placement": placement,
                         "trainable": rep.trainable, "fraction": rep.fraction,
                         **{f"target_{t}": n for t, n in sorted(rep.per_target.items())}})
            print(f"report scheme={scheme_name} placement={placement} "
                  f"trainable={rep.trainable} fraction={rep.fraction!r}")
    if out is not None:
        write_rows_csv(out / "params.csv", rows)
    return 0


# -- parser ----------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="hotmoe",
        description="activation-profiled adapter placement for a toy MoE")
    sub = top.add_subparsers(dest="command", required=True)

    def common(p, base=False, plan=False):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override run and pretrain seeds")
        p.add_argument("--out-dir", default=None, help="artifact directory")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        if base:
            p.add_argument("--base", default=None, help="base model checkpoint")
        if plan:
            p.add_argument("--plan", default=None, help="plan csv file")

    p = sub.add_parser("pretrain", help="train a base model on the task mixture")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("profile", help="warm-up activation profile for the target task")
    common(p, base=True)
    p.add_argument("--forward-only", action="store_true",
                   help="profile without any training steps")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plan", help="select hot experts from a saved profile")
    common(p)
    p.add_argument("--profile", default=None, help="heatmap csv from profiling")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("finetune", help="adapt a base checkpoint on the target task")
    common(p, base=True, plan=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("run", help="pretrain (or load), profile, plan, adapt")
    common(p, base=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="one-knob sweeps around the configured run")
    common(p, base=True)
    p.add_argument("--axes", default="strategy",
                   help="comma list: strategy,plan_k,warmup_pct,targets")
    p.add_argument("--seeds", default=None, help="comma list of seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("crosstask", help="adapt per task, evaluate on all tasks")
    common(p, base=True)
    p.set_defaults(func=cmd_crosstask)

    p = sub.add_parser("flops", help="adapter FLOPs accounting on the test split")
    common(p, base=True, plan=True)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p)
    p.add_argument("--coords", type=int, default=3,
                   help="coordinates sampled per parameter")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="parameter accounting for all schemes")
    common(p)
    p.set_defaults(func=cmd_report)
    return top


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HotmoeError as e:
        print(f"error category={type(e).__name__} message={e}", file=sys.stderr)
        return EXIT_CODES.get(type(e).__name__, 1)


def entry() -> None:
    sys.exit(main())
