"""Synthetic environment generators and the standard dynamics fixture."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from prefcal.envcore import Environment
from prefcal.errors import ConfigurationError
from prefcal.losses import LossSpec, Method
from prefcal.prefdata import PreferenceDataset, sample_dataset
from prefcal.trainer import TrainConfig

REWARD_LAWS = ("gaussian", "bimodal", "table")
REF_LAWS = ("uniform", "gaussian_logits")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def gaussian_rewards(prompts: int, responses: int, scale: float = 1.0, seed: int = 0) -> np.ndarray:
    return scale * _rng(seed).standard_normal((prompts, responses))


def bimodal_rewards(prompts: int, responses: int, gap: float = 2.0, seed: int = 0) -> np.ndarray:
    """Two randomly placed responses per prompt share the top reward ``gap / 2``;
    every other response sits at least ``gap`` below it."""
    if responses < 2:
        raise ConfigurationError("bimodal rewards need at least two responses")
    if not gap > 0:
        raise ConfigurationError("bimodal gap must be positive")
    rng = _rng(seed)
    top = gap / 2.0
    table = np.empty((prompts, responses))
    for x in range(prompts):
        table[x] = top - gap * (1.0 + rng.random(responses))
        table[x, rng.choice(responses, size=2, replace=False)] = top
    return table


def build_environment(
    prompts: int,
    responses: int,
    reward_law: str = "gaussian",
    ref_law: str = "uniform",
    *,
    reward_scale: float = 1.0,
    gap: float = 2.0,
    reward_seed: int = 0,
    reward_table: Optional[Sequence[Sequence[float]]] = None,
    ref_scale: float = 1.0,
    ref_seed: int = 0,
) -> Environment:
    """Environment from a reward law and a reference law (table rewards may be ragged)."""
    if reward_law == "table":
        if reward_table is None:
            raise ConfigurationError("reward_law 'table' needs a reward table")
        rows = [list(map(float, row)) for row in reward_table]
        prompts = len(rows)
        if prompts < 1 or any(len(r) < 2 for r in rows):
            raise ConfigurationError("need at least one prompt and two responses per prompt")
    else:
        if int(prompts) < 1 or int(responses) < 2:
            raise ConfigurationError("need at least one prompt and two responses per prompt")
        prompts, responses = int(prompts), int(responses)
        if reward_law == "gaussian":
            rows = gaussian_rewards(prompts, responses, reward_scale, reward_seed).tolist()
        elif reward_law == "bimodal":
            rows = bimodal_rewards(prompts, responses, gap, reward_seed).tolist()
        else:
            raise ConfigurationError(f"reward_law must be one of {REWARD_LAWS}")
    if ref_law == "uniform":
        ref = None
    elif ref_law == "gaussian_logits":
        ref = _ragged_ref(rows, ref_scale, ref_seed)
    else:
        raise ConfigurationError(f"ref_law must be one of {REF_LAWS}")
    return Environment.from_rows(rows, ref)


def _ragged_ref(rows, scale: float, seed: int) -> list[list[float]]:
    # row-major draws, so a rectangular table matches a single (prompts, responses) draw
    rng = _rng(seed)
    return [(scale * rng.standard_normal(len(r))).tolist() for r in rows]


# -- standard dynamics fixture ----------------------------------------------

FIXTURE_PROMPTS = 50
FIXTURE_RESPONSES = 8
FIXTURE_PAIRS = 2000
FIXTURE_BETA = 0.01
FIXTURE_LR = 0.5
FIXTURE_STEPS = 2000


@dataclass(frozen=True)
class DynamicsFixture:
    env: Environment
    dataset: PreferenceDataset
    beta: float
    learning_rate: float
    steps: int

    def config(self, method: Method, log_every: int = 1) -> TrainConfig:
        return TrainConfig(
            loss=LossSpec(method, self.beta),
            steps=self.steps,
            learning_rate=self.learning_rate,
            log_every=log_every,
            init="zeros",
        )


def standard_fixture(
    seed: int = 0,
    *,
    beta: float = FIXTURE_BETA,
    learning_rate: float = FIXTURE_LR,
    steps: int = FIXTURE_STEPS,
    prompts: int = FIXTURE_PROMPTS,
    responses: int = FIXTURE_RESPONSES,
    n_pairs: int = FIXTURE_PAIRS,
    labeling: str = "bt",
    reward_scale: float = 1.0,
) -> DynamicsFixture:
    """50 prompts x 8 responses, N(0, 1) rewards, uniform reference, 2000 BT-labeled pairs."""
    env = build_environment(prompts, responses, "gaussian", "uniform", reward_scale=reward_scale, reward_seed=seed)
    data = sample_dataset(env, n_pairs, seed, labeling)
    return DynamicsFixture(env, data, float(beta), float(learning_rate), int(steps))
