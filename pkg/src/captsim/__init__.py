"""Simulator for clustered dual-prompt tuning in long-tailed federated learning."""

from __future__ import annotations

from .config import ConfigError, RunConfig, benchmark_config, load_config
from .dataspace import (
    EmptyClientError,
    HeadMidTailSplit,
    InvalidSpecError,
    LongTailSpec,
    Partition,
    Priors,
    dirichlet_partition,
    head_mid_tail,
    longtail_counts,
    priors,
)
from .federation import Simulation, run_baseline, run_experiment, setup
from .scheduler import Arm, BanditState, mab_select, mab_update
from .toyclip import EncoderSpec, FrozenEncoders, PromptState, init_encoders, init_prompts

__version__ = "0.1.0"

__all__ = [
    "Arm",
    "BanditState",
    "ConfigError",
    "EmptyClientError",
    "EncoderSpec",
    "FrozenEncoders",
    "HeadMidTailSplit",
    "InvalidSpecError",
    "LongTailSpec",
    "Partition",
    "Priors",
    "PromptState",
    "RunConfig",
    "Simulation",
    "benchmark_config",
    "dirichlet_partition",
    "head_mid_tail",
    "init_encoders",
    "init_prompts",
    "load_config",
    "longtail_counts",
    "mab_select",
    "mab_update",
    "priors",
    "run_baseline",
    "run_experiment",
    "setup",
]
