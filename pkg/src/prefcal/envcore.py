"""Finite prompt/response environments, tabular softmax policies and the KL-optimal policy.

Every per-response table (rewards, reference logits, policy logits, gradients)
is stored as one flat float64 vector. Prompt ``x`` owns the slice
``offsets[x]:offsets[x + 1]``; response counts may differ between prompts.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from prefcal.errors import InvalidEnvironmentError, InvalidInputError, InvalidParameterError

MIN_REF_PROB = 1e-9


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a single logit vector.

    >>> softmax([0.0, 0.0]).tolist()
    [0.5, 0.5]
    """
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInputError("softmax expects a non-empty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("softmax input contains non-finite entries")
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax(logits) -> np.ndarray:
    v = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("log_softmax input contains non-finite entries")
    return v - logsumexp(v)


def logsumexp(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    m = v.max()
    return float(m + math.log(np.exp(v - m).sum()))


def segment_logsumexp(values: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """Stable log-sum-exp of each contiguous segment of ``values``."""
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    m = np.maximum.reduceat(values, starts)
    shifted = np.exp(values - np.repeat(m, sizes))
    return m + np.log(np.add.reduceat(shifted, starts))


def segment_log_softmax(values: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    return values - np.repeat(segment_logsumexp(values, sizes), sizes)


def _check_beta(beta) -> float:
    beta = float(beta)
    if not (beta > 0.0) or not math.isfinite(beta):
        raise InvalidParameterError(f"beta must be a positive finite number, got {beta!r}")
    return beta


@dataclass(frozen=True, eq=False)
class Environment:
    """Prompts, per-prompt response sets, ground-truth rewards and a reference policy.

    ``reward`` and ``ref_logits`` are flat vectors laid out by ``sizes``; the
    reference policy is the per-prompt softmax of ``ref_logits``.
    """

    sizes: tuple[int, ...]
    reward: np.ndarray
    ref_logits: np.ndarray
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(m) for m in self.sizes)
        if len(sizes) == 0:
            raise InvalidEnvironmentError("environment needs at least one prompt")
        if any(m < 1 for m in sizes):
            raise InvalidEnvironmentError("every prompt needs at least one response")
        total = sum(sizes)
        reward = np.array(self.reward, dtype=np.float64).reshape(-1)
        ref_logits = np.array(self.ref_logits, dtype=np.float64).reshape(-1)
        if reward.size != total or ref_logits.size != total:
            raise InvalidEnvironmentError(
                f"tables have {reward.size}/{ref_logits.size} entries, sizes imply {total}"
            )
        if not np.all(np.isfinite(reward)):
            raise InvalidEnvironmentError("reward table contains non-finite entries")
        if not np.all(np.isfinite(ref_logits)):
            raise InvalidEnvironmentError("reference logits contain non-finite entries")
        reward.flags.writeable = False
        ref_logits.flags.writeable = False
        offsets = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
        offsets.flags.writeable = False
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "ref_logits", ref_logits)
        object.__setattr__(self, "offsets", offsets)
        if self.log_ref.min() < math.log(MIN_REF_PROB):
            raise InvalidEnvironmentError(
                f"reference policy assigns probability below {MIN_REF_PROB:g}; full support is required"
            )

    @classmethod
    def from_rows(cls, reward_rows, ref_logit_rows=None) -> "Environment":
        """Build from nested per-prompt lists. ``ref_logit_rows=None`` means uniform."""
        reward_rows = [np.asarray(r, dtype=np.float64).reshape(-1) for r in reward_rows]
        sizes = tuple(len(r) for r in reward_rows)
        if ref_logit_rows is None:
            ref_logit_rows = [np.zeros(m) for m in sizes]
        ref_logit_rows = [np.asarray(r, dtype=np.float64).reshape(-1) for r in ref_logit_rows]
        if tuple(len(r) for r in ref_logit_rows) != sizes:
            raise InvalidEnvironmentError("reward and ref_logits rows have different lengths")
        flat = lambda rows: np.concatenate(rows) if rows else np.zeros(0)
        return cls(sizes, flat(reward_rows), flat(ref_logit_rows))

    @property
    def n_prompts(self) -> int:
        return len(self.sizes)

    @property
    def n_entries(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def log_ref(self) -> np.ndarray:
        out = segment_log_softmax(self.ref_logits, self.sizes)
        out.flags.writeable = False
        return out

    @cached_property
    def prompt_of(self) -> np.ndarray:
        """Prompt index of every flat entry."""
        return np.repeat(np.arange(self.n_prompts), self.sizes)

    def check_prompt(self, x) -> int:
        if isinstance(x, bool) or not isinstance(x, (int, np.integer)) or not 0 <= x < self.n_prompts:
            raise InvalidInputError(f"prompt index {x!r} out of range [0, {self.n_prompts})")
        return int(x)

    def check_response(self, x, y) -> int:
        x = self.check_prompt(x)
        if isinstance(y, bool) or not isinstance(y, (int, np.integer)) or not 0 <= y < self.sizes[x]:
            raise InvalidInputError(f"response index {y!r} out of range for prompt {x}")
        return int(y)

    def index(self, x, y) -> int:
        """Flat position of response ``y`` of prompt ``x``."""
        y = self.check_response(x, y)
        return int(self.offsets[x]) + y

    def row(self, table: np.ndarray, x) -> np.ndarray:
        x = self.check_prompt(x)
        return table[self.offsets[x] : self.offsets[x + 1]]

    def split(self, table: np.ndarray) -> list[np.ndarray]:
        return [table[self.offsets[x] : self.offsets[x + 1]] for x in range(self.n_prompts)]

    def ref_probs(self, x) -> np.ndarray:
        return np.exp(self.row(self.log_ref, x))

    def rewards(self, x) -> np.ndarray:
        return self.row(self.reward, x)

    def with_rewards(self, reward: np.ndarray) -> "Environment":
        return Environment(self.sizes, reward, self.ref_logits)

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "prompts": self.n_prompts,
            "responses": list(self.sizes),
            "reward": [r.tolist() for r in self.split(self.reward)],
            "ref_logits": [r.tolist() for r in self.split(self.ref_logits)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Environment":
        try:
            k = int(doc["prompts"])
            sizes = [int(m) for m in doc["responses"]]
            reward, ref_logits = doc["reward"], doc["ref_logits"]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidEnvironmentError(f"malformed environment document: {exc}") from exc
        if k != len(sizes) or len(reward) != k or len(ref_logits) != k:
            raise InvalidEnvironmentError("prompt count disagrees with table lengths")
        if any(len(r) != m for r, m in zip(reward, sizes)):
            raise InvalidEnvironmentError("reward rows disagree with response counts")
        return cls.from_rows(reward, ref_logits)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def load(cls, path) -> "Environment":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @cached_property
    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON document."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Logits of a tabular softmax policy, one flat vector laid out like the environment."""

    logits: np.ndarray
    sizes: tuple[int, ...]

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64).reshape(-1)
        sizes = tuple(int(m) for m in self.sizes)
        if logits.size != sum(sizes):
            raise InvalidInputError(f"{logits.size} logits for layout of {sum(sizes)} entries")
        if not np.all(np.isfinite(logits)):
            raise InvalidInputError("policy logits contain non-finite entries")
        logits.flags.writeable = False
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def zeros(cls, env: Environment) -> "PolicyParams":
        return cls(np.zeros(env.n_entries), env.sizes)

    @classmethod
    def from_ref(cls, env: Environment) -> "PolicyParams":
        return cls(env.ref_logits.copy(), env.sizes)

    @classmethod
    def gaussian(cls, env: Environment, scale: float, rng: np.random.Generator) -> "PolicyParams":
        return cls(scale * rng.standard_normal(env.n_entries), env.sizes)

    @classmethod
    def from_rows(cls, rows) -> "PolicyParams":
        rows = [np.asarray(r, dtype=np.float64).reshape(-1) for r in rows]
        return cls(np.concatenate(rows), tuple(len(r) for r in rows))

    @classmethod
    def from_log_probs(cls, env: Environment, log_probs) -> "PolicyParams":
        return cls(np.asarray(log_probs, dtype=np.float64), env.sizes)

    def check(self, env: Environment) -> "PolicyParams":
        if self.sizes != env.sizes:
            raise InvalidInputError("policy layout does not match the environment")
        return self

    @cached_property
    def log_probs(self) -> np.ndarray:
        return segment_log_softmax(self.logits, self.sizes)

    def probs(self, x: int) -> np.ndarray:
        lo = sum(self.sizes[:x])
        return np.exp(self.log_probs[lo : lo + self.sizes[x]])

    def rows(self) -> list[list[float]]:
        offsets = np.concatenate(([0], np.cumsum(self.sizes)))
        return [self.logits[a:b].tolist() for a, b in zip(offsets[:-1], offsets[1:])]


def implicit_rewards(policy: PolicyParams, env: Environment) -> np.ndarray:
    """log pi_theta(y|x) - log pi_ref(y|x) for every (x, y), as a flat vector."""
    policy.check(env)
    return policy.log_probs - env.log_ref


def implicit_reward(policy: PolicyParams, env: Environment, x, y) -> float:
    """Log-ratio of the policy to the reference for one response (no beta, no log Z)."""
    i = env.index(x, y)
    policy.check(env)
    return float(policy.log_probs[i] - env.log_ref[i])


def preference_score(policy: PolicyParams, env: Environment, x, y_w, y_l) -> float:
    """Implicit-reward difference between the preferred and dispreferred response."""
    env.check_response(x, y_w)
    env.check_response(x, y_l)
    if y_w == y_l:
        raise InvalidInputError("preference score needs two distinct responses")
    return implicit_reward(policy, env, x, y_w) - implicit_reward(policy, env, x, y_l)


def log_optimal_policy(env: Environment, beta, x) -> np.ndarray:
    beta = _check_beta(beta)
    return log_softmax(env.row(env.log_ref, x) + env.rewards(x) / beta)


def optimal_policy(env: Environment, beta, x) -> np.ndarray:
    """pi*(y|x) proportional to pi_ref(y|x) exp(r(x,y)/beta), computed in log space."""
    beta = _check_beta(beta)
    return softmax(env.row(env.log_ref, x) + env.rewards(x) / beta)


def log_partition(env: Environment, beta, x) -> float:
    """log sum_y pi_ref(y|x) exp(r(x,y)/beta)."""
    beta = _check_beta(beta)
    return logsumexp(env.row(env.log_ref, x) + env.rewards(x) / beta)


def normalize_rewards(env: Environment, beta) -> Environment:
    """Shift each prompt's rewards by -beta*log Z(x) so that log Z(x) = 0 afterwards.

    The optimal policy is unchanged; the log-ratio ``log(pi*/pi_ref)`` then equals
    ``r/beta`` exactly, i.e. pi* is calibrated.
    """
    beta = _check_beta(beta)
    shifts = np.array([beta * log_partition(env, beta, x) for x in range(env.n_prompts)])
    return env.with_rewards(env.reward - np.repeat(shifts, env.sizes))


def policy_from_distributions(env: Environment, log_dists: Sequence[np.ndarray]) -> PolicyParams:
    """Policy whose logits are the given per-prompt log-probabilities."""
    return PolicyParams(np.concatenate([np.asarray(d, dtype=np.float64) for d in log_dists]), env.sizes)


def optimal_policy_params(env: Environment, beta) -> PolicyParams:
    return policy_from_distributions(env, [log_optimal_policy(env, beta, x) for x in range(env.n_prompts)])
