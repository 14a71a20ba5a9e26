import numpy as np
import pytest

from prefcal.envcore import Environment, PolicyParams


def make_env(rng, prompts=(1, 4), responses=(2, 8), reward_scale=1.0):
    k = int(rng.integers(prompts[0], prompts[1] + 1))
    sizes = rng.integers(responses[0], responses[1] + 1, size=k)
    rewards = [rng.uniform(-reward_scale, reward_scale, size=m) for m in sizes]
    logits = [rng.standard_normal(m) for m in sizes]
    return Environment.from_rows(rewards, logits)


def make_policy(env, rng, scale=1.0):
    return PolicyParams.gaussian(env, scale, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_arm():
    """Uniform reference over two responses with rewards [1, 0]."""
    return Environment.from_rows([[1.0, 0.0]])
