"""Toy MoE transformer with top-k routing and a load-balancing loss.

Architecture: learned token + position embeddings, then n_layers blocks of
(causal multi-head attention, MoE feed-forward), each behind a residual
with parameter-free RMS normalization, then an output projection. Every
feed-forward is a routed bank of GELU experts plus optional always-active
shared experts.

Routing gradient semantics: mixing weights are a softmax over the
selected top-k logits only, so unselected logits get no gradient from the
mixing path. The load-balancing term sees the full softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapters import adapted_forward
from .checkpoint import save_checkpoint
from .errors import ConfigError, InvariantViolation, NumericalError
from .optim import Adam, AdamConfig
from .registry import ParamRegistry
from .tasks import (PAD, Batch, Dataset, TaskSpec, evaluate, iter_batches,
                    make_task)
from .tensor import Tensor

LB_MODES = ("global", "per_layer", "off")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_experts: int = 16
    k_route: int = 4
    n_shared: int = 0
    vocab: int = 32
    max_seq: int = 16
    lb_mode: str = "global"
    lb_weight: float = 0.01

    def __post_init__(self):
        if not 1 <= self.k_route <= self.n_experts:
            raise ConfigError(
                f"k_route {self.k_route} out of [1, n_experts={self.n_experts}]")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.lb_mode not in LB_MODES:
            raise ConfigError(f"unknown lb_mode: {self.lb_mode}")


def route_topk(logits: np.ndarray, k_route: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k expert selection with ties toward the lower expert index.

    Returns (indices, weights) where weights are the softmax over the
    selected logits, in selection (descending-logit) order. Pure numpy:
    the differentiable mixing path re-derives weights on the tape from
    the returned indices.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    if k_route > n:
        raise ConfigError(f"k_route {k_route} > n_experts {n}")
    order = np.argsort(-logits, axis=-1, kind="stable")
    idx = order[..., :k_route]
    sel = np.take_along_axis(logits, idx, axis=-1)
    shifted = sel - sel.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=-1, keepdims=True)
    return idx, weights


@dataclass
class LayerTrace:
    indices: np.ndarray            # (tokens, k_route) int64
    weights: np.ndarray            # (tokens, k_route) float64
    x_in: np.ndarray | None = None   # (tokens, d_model), payload mode only
    y_out: np.ndarray | None = None


@dataclass
class RoutingTrace:
    n_experts: int
    k_route: int
    layers: list[LayerTrace] = field(default_factory=list)
    counters: dict | None = None   # filled by accounting
    tokens: np.ndarray | None = None  # flat (tokens,) input ids, set by forward

    @property
    def n_tokens(self) -> int:
        return self.layers[0].indices.shape[0] if self.layers else 0

    @staticmethod
    def merge(traces: list["RoutingTrace"]) -> "RoutingTrace":
        """Concatenate token streams; payloads and input ids are dropped."""
        if not traces:
            raise ConfigError("cannot merge zero traces")
        first = traces[0]
        out = RoutingTrace(first.n_experts, first.k_route)
        for l in range(len(first.layers)):
            out.layers.append(LayerTrace(
                indices=np.concatenate([t.layers[l].indices for t in traces]),
                weights=np.concatenate([t.layers[l].weights for t in traces]),
            ))
        return out


@dataclass
class RoutingStats:
    f: np.ndarray          # (n_layers, n_experts) assignment fractions, sum 1 per layer
    P: list                # per layer: mean full-softmax probability, Tensor or ndarray
    n_experts: int


def load_balancing_loss(stats: RoutingStats, mode: str) -> Tensor:
    """N_E * sum_i f_i * P_i; global mode pools f and P across layers first."""
    n_layers = len(stats.P)
    if n_layers == 0:
        raise ConfigError("load_balancing_loss on empty stats")
    if mode not in ("global", "per_layer"):
        raise ConfigError(f"unknown lb mode for loss: {mode}")
    ps = [p if isinstance(p, Tensor) else Tensor(p) for p in stats.P]
    n_e = float(stats.n_experts)
    if mode == "global":
        p_bar = ps[0]
        for p in ps[1:]:
            p_bar = p_bar + p
        p_bar = p_bar * (1.0 / n_layers)
        f_bar = stats.f.mean(axis=0)
        return T.tsum(p_bar * Tensor(f_bar)) * n_e
    total = None
    for layer in range(n_layers):
        term = T.tsum(ps[layer] * Tensor(stats.f[layer])) * n_e
        total = term if total is None else total + term
    return total * (1.0 / n_layers)


@dataclass
class ForwardResult:
    logits: Tensor
    stats: RoutingStats
    trace: RoutingTrace | None


@dataclass
class LossResult:
    loss: Tensor
    ce: float
    lb: float
    trace: RoutingTrace | None


_NORM_EPS = 1e-6


def rmsnorm(x: Tensor) -> Tensor:
    scale = T.power(T.tmean(x * x, axis=-1, keepdims=True) + _NORM_EPS, -0.5)
    return x * scale


class MoEModel:
    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        self.registry = ParamRegistry()
        self.adapters: dict = {}
        self._causal: dict[int, Tensor] = {}
        rng = np.random.default_rng(np.random.SeedSequence([seed]))

        def param(name: str, *shape: int) -> None:
            self.registry.add(name, Tensor(rng.normal(0.0, 0.02, size=shape)))

        c = config
        param("embed.tok", c.vocab, c.d_model)
        param("embed.pos", c.max_seq, c.d_model)
        for l in range(c.n_layers):
            for proj in ("wq", "wk", "wv", "wo"):
                param(f"layer{l}.attn.{proj}", c.d_model, c.d_model)
            param(f"layer{l}.router.w", c.d_model, c.n_experts)
            for e in range(c.n_experts):
                param(f"layer{l}.expert{e}.w_up", c.d_model, c.d_ff)
                param(f"layer{l}.expert{e}.w_down", c.d_ff, c.d_model)
            for j in range(c.n_shared):
                param(f"layer{l}.shared{j}.w_up", c.d_model, c.d_ff)
                param(f"layer{l}.shared{j}.w_down", c.d_ff, c.d_model)
        param("head.w", c.d_model, c.vocab)

    # -- plumbing -----------------------------------------------------------

    def _proj(self, name: str, x: Tensor) -> Tensor:
        W = self.registry[name].tensor
        pair = self.adapters.get(name)
        if pair is None:
            return x @ W
        return adapted_forward(x, W, pair)

    def _causal_bias(self, s: int) -> Tensor:
        if s not in self._causal:
            bias = np.triu(np.full((s, s), -1e9), k=1)
            self._causal[s] = Tensor(bias)
        return self._causal[s]

    def _expert(self, layer: int, tag: str, x: Tensor) -> Tensor:
        h = T.gelu(self._proj(f"layer{layer}.{tag}.w_up", x))
        return self._proj(f"layer{layer}.{tag}.w_down", h)

    def _attention(self, layer: int, x: Tensor) -> Tensor:
        c = self.config
        bsz, s, _ = x.shape
        hd = c.d_model // c.n_heads
        def split(t):  # (B,S,D) -> (B,H,S,hd)
            return T.swapaxes(T.reshape(t, (bsz, s, c.n_heads, hd)), 1, 2)
        q = split(self._proj(f"layer{layer}.attn.wq", x))
        k = split(self._proj(f"layer{layer}.attn.wk", x))
        v = split(self._proj(f"layer{layer}.attn.wv", x))
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(hd))
        scores = scores + self._causal_bias(s)
        att = T.softmax(scores, axis=-1)
        out = T.reshape(T.swapaxes(att @ v, 1, 2), (bsz, s, c.d_model))
        return self._proj(f"layer{layer}.attn.wo", out)

    def _moe(self, layer: int, x: Tensor, payload: bool):
        c = self.config
        bsz, s, d = x.shape
        n_tok = bsz * s
        xf = T.reshape(x, (n_tok, d))
        logits = self._proj(f"layer{layer}.router.w", xf)
        idx, _ = route_topk(logits.data, c.k_route)
        sel_logits = T.take_along_last(logits, idx)
        mix_w = T.softmax(sel_logits, axis=-1)
        yf = T.zeros((n_tok, d))
        for e in range(c.n_experts):
            rows, slots = np.where(idx == e)
            if rows.size == 0:
                continue
            xe = T.gather_rows(xf, rows)
            he = self._expert(layer, f"expert{e}", xe)
            we = T.reshape(T.gather_pairs(mix_w, rows, slots), (rows.size, 1))
            yf = T.index_add_rows(yf, rows, he * we)
        for j in range(c.n_shared):
            yf = yf + self._expert(layer, f"shared{j}", xf)
        counts = np.bincount(idx.reshape(-1), minlength=c.n_experts)
        f_l = counts.astype(np.float64) / (n_tok * c.k_route)
        p_l = T.tmean(T.softmax(logits, axis=-1), axis=0)
        trace = LayerTrace(indices=idx.copy(), weights=mix_w.data.copy())
        if payload:
            trace.x_in = xf.data.copy()
            trace.y_out = yf.data.copy()
        return T.reshape(yf, (bsz, s, d)), f_l, p_l, trace

    # -- public surface -----------------------------------------------------

    def forward(self, tokens: np.ndarray, want_trace: bool = False,
                payload: bool = False) -> ForwardResult:
        c = self.config
        tokens = np.asarray(tokens)
        bsz, s = tokens.shape
        if s > c.max_seq:
            raise ConfigError(f"sequence length {s} > max_seq {c.max_seq}")
        tok = T.gather_rows(self.registry["embed.tok"].tensor, tokens.reshape(-1))
        pos = T.gather_rows(self.registry["embed.pos"].tensor, np.arange(s))
        x = T.reshape(tok, (bsz, s, c.d_model)) + pos
        fs, ps = [], []
        trace = RoutingTrace(c.n_experts, c.k_route) if want_trace else None
        if trace is not None:
            trace.tokens = tokens.reshape(-1).copy()
        for layer in range(c.n_layers):
            x = x + self._attention(layer, rmsnorm(x))
            y, f_l, p_l, lt = self._moe(layer, rmsnorm(x), payload)
            x = x + y
            fs.append(f_l)
            ps.append(p_l)
            if trace is not None:
                trace.layers.append(lt)
        logits = rmsnorm(x) @ self.registry["head.w"].tensor
        stats = RoutingStats(f=np.stack(fs), P=ps, n_experts=c.n_experts)
        return ForwardResult(logits=logits, stats=stats, trace=trace)

    def loss(self, batch: Batch, lb_mode: str | None = None,
             lb_weight: float | None = None, want_trace: bool = False) -> LossResult:
        c = self.config
        out = self.forward(batch.tokens, want_trace=want_trace)
        bsz, s = batch.tokens.shape
        flat_logits = T.reshape(out.logits, (bsz * s, c.vocab))
        mask = batch.loss_mask.reshape(-1)
        rows = np.where(mask)[0]
        if rows.size == 0:
            raise InvariantViolation("batch has no masked positions to score")
        logp = T.log_softmax(T.gather_rows(flat_logits, rows), axis=-1)
        picked = T.gather_pairs(logp, np.arange(rows.size),
                                batch.targets.reshape(-1)[rows])
        ce = -T.tmean(picked)
        mode = c.lb_mode if lb_mode is None else lb_mode
        weight = c.lb_weight if lb_weight is None else lb_weight
        lb_value = 0.0
        loss = ce
        if mode != "off" and weight > 0.0:
            lb = load_balancing_loss(out.stats, mode)
            loss = ce + lb * weight
            lb_value = lb.item()
        T.check_finite(loss, "loss")
        return LossResult(loss=loss, ce=ce.item(), lb=lb_value, trace=out.trace)

    def logits_fn(self):
        """Gradient-free (B,S)->(B,S,V) callable for task evaluation."""
        def fn(tokens: np.ndarray) -> np.ndarray:
            with T.no_grad():
                return self.forward(tokens).logits.data
        return fn

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        save_checkpoint(path, self.registry.state_arrays())
        return path


def forward_backward(model: MoEModel, batch: Batch, **loss_kw) -> LossResult:
    model.registry.zero_grads()
    result = model.loss(batch, **loss_kw)
    result.loss.backward()
    return result


def param_group(name: str) -> str:
    """Coarse parameter grouping used by gradcheck reporting."""
    if name.endswith(".adapter.A"):
        return "adapter_A"
    if name.endswith(".adapter.B"):
        return "adapter_B"
    if ".attn." in name:
        return "attention"
    if ".router." in name:
        return "router"
    if ".expert" in name or ".shared" in name:
        return "expert"
    return "embed_head"


# -- pretraining ----------------------------------------------------------------


@dataclass
class PretrainResult:
    model: MoEModel
    losses: list[float]
    profiles: dict[str, "np.ndarray"]
    checkpoint_path: Path | None


def concat_datasets(datasets: list[Dataset]) -> Dataset:
    """Stack datasets, right-padding narrower ones to the widest row."""
    width = max(d.tokens.shape[1] for d in datasets)

    def widen(arr, fill):
        n, w = arr.shape
        if w == width:
            return arr
        pad = np.full((n, width - w), fill, dtype=arr.dtype)
        return np.concatenate([arr, pad], axis=1)

    return Dataset(
        tokens=np.concatenate([widen(d.tokens, PAD) for d in datasets]),
        targets=np.concatenate([widen(d.targets, PAD) for d in datasets]),
        loss_mask=np.concatenate([widen(d.loss_mask, False) for d in datasets]),
    )


def profile_counts(model: MoEModel, dataset: Dataset,
                   batch_size: int = 64) -> tuple[np.ndarray, int]:
    """Forward-only activation counts (n_layers, n_experts) plus tokens seen.

    PAD positions are excluded: padding routes to whatever the balancer
    left room in, so counting it dilutes the task signal in proportion to
    how ragged the task's rows are.
    """
    c = model.config
    counts = np.zeros((c.n_layers, c.n_experts), dtype=np.int64)
    tokens_seen = 0
    with T.no_grad():
        for lo in range(0, len(dataset), batch_size):
            out = model.forward(dataset.tokens[lo:lo + batch_size], want_trace=True)
            keep = out.trace.tokens != PAD
            for l, lt in enumerate(out.trace.layers):
                counts[l] += np.bincount(lt.indices[keep].reshape(-1),
                                         minlength=c.n_experts)
            tokens_seen += int(keep.sum())
    return counts, tokens_seen


def pretrain_base(config: ModelConfig, mixture: list[TaskSpec], steps: int,
                  seed: int, out_dir: str | Path | None = None,
                  batch_size: int = 16, lr: float = 1e-3,
                  competence_acc: float | None = None,
                  check_every: int = 500) -> PretrainResult:
    """Train a fresh model on the task mixture; emit checkpoint + per-task counts.

    With competence_acc set, steps is a cap: training stops at the first
    check_every multiple where every task's held-out accuracy beats the
    bar. Balanced training keeps redistributing tokens after the mixture
    is learned, eroding the per-task routing footprints, so the sharpest
    profiles come from stopping at competence rather than at a fixed
    step count.
    """
    if not mixture:
        raise ConfigError("pretraining mixture is empty")
    if check_every < 1:
        raise ConfigError(f"check_every must be >= 1, got {check_every}")
    trains, tests = {}, {}
    for spec in mixture:
        train, test = make_task(spec, config.max_seq)
        trains[spec.kind] = train
        tests[spec.kind] = test
    # narrow tasks are tiled by the width ratio so a short-sequence task is
    # not starved of gradient share in the mixture loss
    widths = {k: ds.tokens.shape[1] for k, ds in trains.items()}
    wmax = max(widths.values())
    parts = []
    for kind, ds in trains.items():
        parts.extend([ds] * max(1, round(wmax / widths[kind])))
    combined = concat_datasets(parts)
    model = MoEModel(config, seed)
    opt = Adam(model.registry, AdamConfig(lr=lr))
    epochs_needed = steps * batch_size // max(len(combined), 1) + 2
    stream = iter_batches(combined, batch_size, epochs_needed, seed)
    losses: list[float] = []
    for step in range(1, steps + 1):
        batch = next(stream)
        result = forward_backward(model, batch)
        opt.step()
        losses.append(result.loss.item())
        if not np.isfinite(losses[-1]):
            raise NumericalError(f"pretraining diverged at step {len(losses)}")
        if (competence_acc is not None and step < steps
                and step % check_every == 0):
            fn = model.logits_fn()
            if all(evaluate(fn, te) > competence_acc for te in tests.values()):
                break
    profiles = {kind: profile_counts(model, ds)[0] for kind, ds in trains.items()}
    ckpt = None
    if out_dir is not None:
        ckpt = model.save(Path(out_dir) / "base.ckpt")
    return PretrainResult(model=model, losses=losses, profiles=profiles,
                          checkpoint_path=ckpt)
