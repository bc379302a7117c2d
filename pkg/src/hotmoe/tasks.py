"""Deterministic synthetic sequence tasks over a 32-token vocabulary.

Three structurally different task families so that a routed model
develops distinct per-layer expert preferences for each:

  mod_add    "a b SEP c" with c = (a+b) mod m; answer is one token.
  transduce  "t1..tn SEP tn..t1"; answer is the reversed prompt.
  refusal    "t1..tn SEP <echo>" normally, but any trigger token in the
             prompt switches the answer to the single REFUSE token.

Token map: 0..25 data symbols, 26 SEP, 27 REFUSE, 31 PAD (28..30 spare).
mod_add occupies 0..m-1, and by default transduce draws its symbols from
(11..17) and refusal from (18..23) with triggers at 24/25, so at the
default desk modulus of 11 the three tasks touch disjoint symbol sets.
Routing in the base model is largely token-driven; the disjoint bands are
what give each task its own hot-expert footprint.
Generation is a pure function of the TaskSpec. Train and test splits are
disjoint by construction and verified by hashing.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, InvariantViolation

VOCAB = 32
N_DATA = 26
SEP = 26
REFUSE = 27
PAD = 31

TASK_KINDS = ("mod_add", "transduce", "refusal")

# disjoint default bands; see the module docstring
_DEFAULT_BANDS = {"transduce": (11, 17), "refusal": (18, 23)}


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    seed: int = 0
    train_size: int = 480
    test_size: int = 120
    modulus: int = 26              # mod_add only
    min_len: int = 3               # transduce / refusal prompt length range
    max_len: int = 6
    triggers: tuple[int, ...] = (24, 25)  # refusal only
    alphabet: tuple[int, int] | None = None  # inclusive symbol band; None = kind default

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind: {self.kind}")
        if not 2 <= self.modulus <= N_DATA:
            raise ConfigError(f"modulus out of range: {self.modulus}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("bad prompt length range")
        if self.alphabet is not None:
            lo, hi = self.alphabet
            if not 0 <= lo <= hi < N_DATA:
                raise ConfigError(f"alphabet band out of range: {self.alphabet}")

    def data_band(self) -> tuple[int, int]:
        if self.alphabet is not None:
            return self.alphabet
        return _DEFAULT_BANDS.get(self.kind, (0, N_DATA - 1))


@dataclass
class Dataset:
    tokens: np.ndarray     # (N, S) int64, PAD-filled
    targets: np.ndarray    # (N, S) int64, PAD where loss_mask is False
    loss_mask: np.ndarray  # (N, S) bool; True at t means score logits[t] vs targets[t]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def example_hashes(self) -> list[str]:
        return [hashlib.sha256(row.tobytes()).hexdigest() for row in self.tokens]


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray


def _pack(rows: list[list[int]], answer_starts: list[int], seq_len: int) -> Dataset:
    """Lay out ragged token rows into padded arrays with next-token targets.

    Width is the longest row, not seq_len: trailing PAD positions carry no
    loss but still route, and a wall of task-independent PAD would wash out
    the per-task activation profile. seq_len only caps the width.
    """
    width = max(len(row) for row in rows)
    if width > seq_len:
        raise ConfigError(f"example length {width} exceeds max_seq {seq_len}")
    n = len(rows)
    tokens = np.full((n, width), PAD, dtype=np.int64)
    targets = np.full((n, width), PAD, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    for i, (row, astart) in enumerate(zip(rows, answer_starts)):
        tokens[i, :len(row)] = row
        # answers live at positions astart..len-1; they are scored at the
        # preceding position in next-token convention
        for pos in range(astart, len(row)):
            targets[i, pos - 1] = row[pos]
            mask[i, pos - 1] = True
    return Dataset(tokens, targets, mask)


def _gen_mod_add(spec: TaskSpec, rng: np.random.Generator, seq_len: int):
    m = spec.modulus
    space = m * m
    need = spec.train_size + spec.test_size
    if need > space:
        raise ConfigError(
            f"mod_add needs {need} unique examples but the space holds {space}")
    order = rng.permutation(space)[:need]
    rows, starts = [], []
    for code in order:
        a, b = int(code) // m, int(code) % m
        rows.append([a, b, SEP, (a + b) % m])
        starts.append(3)
    return rows, starts


def _space_size(spec: TaskSpec, alphabet: int) -> int:
    return sum(alphabet ** n for n in range(spec.min_len, spec.max_len + 1))


def _gen_transduce(spec: TaskSpec, rng: np.random.Generator, seq_len: int):
    lo, hi = spec.data_band()
    need = spec.train_size + spec.test_size
    if need > _space_size(spec, hi - lo + 1):
        raise ConfigError("transduce sample count exceeds the prompt space")
    if 2 * spec.max_len + 1 > seq_len:
        raise ConfigError("transduce sequences would exceed max_seq")
    rows, starts, seen = [], [], set()
    while len(rows) < need:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        prompt = rng.integers(lo, hi + 1, size=n).tolist()
        key = tuple(prompt)
        if key in seen:
            continue
        seen.add(key)
        rows.append(prompt + [SEP] + prompt[::-1])
        starts.append(n + 1)
    return rows, starts


def _gen_refusal(spec: TaskSpec, rng: np.random.Generator, seq_len: int):
    lo, hi = spec.data_band()
    plain_alphabet = [t for t in range(lo, hi + 1) if t not in spec.triggers]
    if not plain_alphabet:
        raise ConfigError("refusal band holds no non-trigger symbols")
    need = spec.train_size + spec.test_size
    if need > _space_size(spec, len(plain_alphabet)):
        raise ConfigError("refusal sample count exceeds the prompt space")
    if 2 * spec.max_len + 1 > seq_len:
        raise ConfigError("refusal sequences would exceed max_seq")
    rows, starts, seen = [], [], set()
    while len(rows) < need:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        prompt = [plain_alphabet[i] for i in rng.integers(0, len(plain_alphabet), size=n)]
        if rng.random() < 0.5:  # triggered half
            pos = int(rng.integers(0, n))
            trig = spec.triggers[int(rng.integers(0, len(spec.triggers)))]
            prompt[pos] = trig
        key = tuple(prompt)
        if key in seen:
            continue
        seen.add(key)
        triggered = any(t in spec.triggers for t in prompt)
        answer = [REFUSE] if triggered else list(prompt)
        rows.append(prompt + [SEP] + answer)
        starts.append(n + 1)
    return rows, starts


_GENERATORS: dict[str, Callable] = {
    "mod_add": _gen_mod_add,
    "transduce": _gen_transduce,
    "refusal": _gen_refusal,
}


def make_task(spec: TaskSpec, seq_len: int = 16) -> tuple[Dataset, Dataset]:
    """Build (train, test) datasets; pure function of (spec, seq_len)."""
    kind_id = TASK_KINDS.index(spec.kind)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, kind_id]))
    rows, starts = _GENERATORS[spec.kind](spec, rng, seq_len)
    train = _pack(rows[:spec.train_size], starts[:spec.train_size], seq_len)
    test = _pack(rows[spec.train_size:], starts[spec.train_size:], seq_len)
    overlap = set(train.example_hashes()) & set(test.example_hashes())
    if overlap:
        raise InvariantViolation(f"train/test overlap: {len(overlap)} examples")
    return train, test


# -- batching -----------------------------------------------------------------


def iter_batches(dataset: Dataset, batch_size: int, epochs: int,
                 seed: int) -> Iterator[Batch]:
    """Seeded per-epoch shuffling; deterministic batch stream."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4]))
    n = len(dataset)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = perm[lo:lo + batch_size]
            yield Batch(dataset.tokens[idx], dataset.targets[idx],
                        dataset.loss_mask[idx])


def n_steps(dataset_size: int, batch_size: int, epochs: int) -> int:
    per_epoch = -(-dataset_size // batch_size)
    return per_epoch * epochs


def subset(dataset: Dataset, fraction_pct: float, seed: int) -> Dataset:
    """Seeded example subset holding round(N * pct/100) rows."""
    n = len(dataset)
    take = int(round(n * fraction_pct / 100.0))
    if not 1 <= take <= n:
        raise ConfigError(f"subset fraction {fraction_pct}% selects {take} of {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B5E7]))
    idx = np.sort(rng.choice(n, size=take, replace=False))
    return Dataset(dataset.tokens[idx], dataset.targets[idx], dataset.loss_mask[idx])


# -- evaluation ---------------------------------------------------------------


def evaluate(logits_fn: Callable[[np.ndarray], np.ndarray], dataset: Dataset,
             batch_size: int = 64) -> float:
    """Token-level exact match on masked positions under greedy decoding.

    logits_fn maps a token matrix (B, S) to logits (B, S, V). Answer
    positions are blanked to PAD before decoding so the model cannot see
    ground truth; each decoded token is written back so later answer
    positions condition on earlier predictions.
    """
    total, hits = 0, 0
    for lo in range(0, len(dataset), batch_size):
        tokens = dataset.tokens[lo:lo + batch_size]
        targets = dataset.targets[lo:lo + batch_size]
        mask = dataset.loss_mask[lo:lo + batch_size]
        work = tokens.copy()
        answer_cols = np.where(mask.any(axis=0))[0]
        for t in answer_cols:
            work[mask[:, t], t + 1] = PAD
        for t in answer_cols:
            rows = mask[:, t]
            logits = logits_fn(work)
            pred = logits[rows, t, :].argmax(axis=-1)
            work[rows, t + 1] = pred
            hits += int((pred == targets[rows, t]).sum())
            total += int(rows.sum())
    return hits / total if total else 0.0


# -- CSV cache ----------------------------------------------------------------

_CSV_HEADER = ["index", "tokens", "targets", "loss_mask"]


def save_dataset_csv(path: str | Path, dataset: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for i in range(len(dataset)):
            writer.writerow([
                i,
                " ".join(map(str, dataset.tokens[i])),
                " ".join(map(str, dataset.targets[i])),
                " ".join(str(int(b)) for b in dataset.loss_mask[i]),
            ])


def load_dataset_csv(path: str | Path) -> Dataset:
    path = Path(path)
    tokens, targets, masks = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _CSV_HEADER:
            raise ConfigError(f"unexpected dataset CSV header in {path}")
        for row in reader:
            tokens.append([int(x) for x in row[1].split()])
            targets.append([int(x) for x in row[2].split()])
            masks.append([bool(int(x)) for x in row[3].split()])
    return Dataset(np.array(tokens, dtype=np.int64),
                   np.array(targets, dtype=np.int64),
                   np.array(masks, dtype=bool))


def ensure_cached(path: str | Path, dataset: Dataset) -> Dataset:
    """Write-once cache; on hit, verify the regeneration is bit-identical."""
    path = Path(path)
    if path.exists():
        cached = load_dataset_csv(path)
        same = (cached.tokens.tobytes() == dataset.tokens.tobytes()
                and cached.targets.tobytes() == dataset.targets.tobytes()
                and cached.loss_mask.tobytes() == dataset.loss_mask.tobytes())
        if not same:
            raise InvariantViolation(f"dataset cache at {path} diverges from regeneration")
        return cached
    save_dataset_csv(path, dataset)
    return dataset
