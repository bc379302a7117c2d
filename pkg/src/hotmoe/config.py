"""INI-file configuration with strict key checking.

Four sections: model, task, run, pretrain. Every key must be known and
parse to its declared type; unknown sections or keys are hard errors so a
typo cannot silently fall back to a default. The resolved configuration
(file values merged with command-line overrides) can be written back out
in a fixed key order, so two runs with the same inputs produce the same
bytes.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, IoError
from .model import ModelConfig
from .pipeline import RunConfig
from .tasks import TaskSpec

TASK_KINDS = ("mod_add", "transduce", "refusal")


@dataclass
class TaskConfig:
    mixture: tuple[str, ...] = TASK_KINDS
    target: str = "mod_add"
    seed: int = 0
    train_size: int = 480
    test_size: int = 120
    modulus: int = 11
    min_len: int = 3
    max_len: int = 6

    def __post_init__(self):
        for kind in self.mixture:
            if kind not in TASK_KINDS:
                raise ConfigError(f"unknown task kind in mixture: {kind}")
        if not self.mixture:
            raise ConfigError("task mixture is empty")
        if self.target not in self.mixture:
            raise ConfigError(f"target task {self.target} not in mixture")

    def _sizes(self, kind: str) -> tuple[int, int]:
        if kind != "mod_add":
            return self.train_size, self.test_size
        # mod_add holds only modulus^2 distinct examples; cap its split at
        # an 80/20 carve-up of that space instead of failing
        space = self.modulus * self.modulus
        train = min(self.train_size, int(0.8 * space))
        test = min(self.test_size, space - train)
        return train, test

    def specs(self) -> list[TaskSpec]:
        out = []
        for k in self.mixture:
            train, test = self._sizes(k)
            out.append(TaskSpec(kind=k, seed=self.seed, train_size=train,
                                test_size=test, modulus=self.modulus,
                                min_len=self.min_len, max_len=self.max_len))
        return out


@dataclass
class PretrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    until_acc: float = 0.0         # > 0: steps becomes a cap, training stops
    check_every: int = 500         # once every task's held-out acc beats the bar

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"pretrain steps must be >= 0: {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"pretrain lr must be positive: {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"pretrain batch_size must be >= 1: {self.batch_size}")
        if not 0.0 <= self.until_acc < 1.0:
            raise ConfigError(f"until_acc out of [0, 1): {self.until_acc}")
        if self.check_every < 1:
            raise ConfigError(f"check_every must be >= 1: {self.check_every}")


@dataclass
class FullConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    run: RunConfig = field(default_factory=RunConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)


_SECTIONS = {
    "model": ModelConfig,
    "task": TaskConfig,
    "run": RunConfig,
    "pretrain": PretrainConfig,
}

_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _parse_value(section: str, key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == tuple[str, ...]:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from e
    raise ConfigError(f"[{section}] {key}: unsupported option type {typ}")


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in fields(cls):
        t = f.type
        if isinstance(t, str):
            # from __future__ annotations stringizes these
            t = {"int": int, "float": float, "bool": bool, "str": str,
                 "tuple[str, ...]": tuple[str, ...]}.get(t, t)
        out[f.name] = t
    return out


def load_config(path: str | Path | None) -> FullConfig:
    """Parse an INI file into a FullConfig; None means all defaults."""
    if path is None:
        return FullConfig()
    path = Path(path)
    if not path.exists():
        raise IoError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    sections: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section: [{section}]")
        cls = _SECTIONS[section]
        types = _field_types(cls)
        kwargs = {}
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"unknown key in [{section}]: {key}")
            kwargs[key] = _parse_value(section, key, raw, types[key])
        sections[section] = kwargs
    return FullConfig(
        model=ModelConfig(**sections.get("model", {})),
        task=TaskConfig(**sections.get("task", {})),
        run=RunConfig(**sections.get("run", {})),
        pretrain=PretrainConfig(**sections.get("pretrain", {})),
    )


def apply_overrides(full: FullConfig,
                    overrides: dict[str, str]) -> tuple[FullConfig, list[str]]:
    """Apply "section.key=value" style overrides; returns the applied list."""
    applied = []
    by_section: dict[str, dict] = {}
    for dotted, raw in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override key must be section.key: {dotted}")
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section: [{section}]")
        types = _field_types(_SECTIONS[section])
        if key not in types:
            raise ConfigError(f"unknown key in [{section}]: {key}")
        by_section.setdefault(section, {})[key] = _parse_value(
            section, key, raw, types[key])
        applied.append(f"{section}.{key}={raw}")
    new = FullConfig(
        model=replace(full.model, **by_section.get("model", {})),
        task=replace(full.task, **by_section.get("task", {})),
        run=replace(full.run, **by_section.get("run", {})),
        pretrain=replace(full.pretrain, **by_section.get("pretrain", {})),
    )
    return new, applied


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_resolved(full: FullConfig, applied: list[str] | None = None) -> str:
    """Deterministic INI text of the fully resolved configuration."""
    lines = []
    for section, obj in (("model", full.model), ("task", full.task),
                         ("run", full.run), ("pretrain", full.pretrain)):
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_render_value(getattr(obj, f.name))}")
        lines.append("")
    for entry in applied or []:
        lines.append(f"# override: {entry}")
    return "\n".join(lines).rstrip("\n") + "\n"


def write_resolved(path: str | Path, full: FullConfig,
                   applied: list[str] | None = None) -> None:
    try:
        Path(path).write_text(render_resolved(full, applied), encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
