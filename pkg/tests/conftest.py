"""Shared fixtures for the acceptance suite.

Pretraining the desk model is the dominating cost, so the three seeded
base models are built once per session and shared read-only. Tests that
mutate a model must clone it first (clone_model); fixtures hand out the
state arrays, never a live model.
"""

from __future__ import annotations

import numpy as np
import pytest

from hotmoe.config import TaskConfig
from hotmoe.model import ModelConfig, pretrain_base
from hotmoe.tasks import make_task

# pinned for the whole acceptance suite; see tests/test_acceptance.py.
# Bases train until every task beats 3x chance on its held-out split
# (checked every 500 steps, capped): balanced training keeps eroding the
# per-task routing footprints once the mixture is learned, so each seed
# stops at its own competence point instead of a fixed step count.
PRETRAIN_CAP = 3000
COMPETENCE_ACC = 3.0 / 32
BASE_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def desk_cfg() -> ModelConfig:
    return ModelConfig()


@pytest.fixture(scope="session")
def task_splits(desk_cfg):
    """kind -> (train, test) at the desk sequence length."""
    splits = {}
    for spec in TaskConfig().specs():
        splits[spec.kind] = make_task(spec, desk_cfg.max_seq)
    return splits


@pytest.fixture(scope="session")
def pretrained(desk_cfg):
    """seed -> PretrainResult for the three acceptance seeds."""
    specs = TaskConfig().specs()
    out = {}
    for seed in BASE_SEEDS:
        out[seed] = pretrain_base(desk_cfg, specs, PRETRAIN_CAP, seed,
                                  competence_acc=COMPETENCE_ACC)
    return out


@pytest.fixture(scope="session")
def base_state(pretrained):
    """Seed-0 pretrained state arrays; the workhorse base for most criteria."""
    return pretrained[BASE_SEEDS[0]].model.registry.state_arrays()
