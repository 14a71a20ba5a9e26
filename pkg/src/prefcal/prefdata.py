"""Synthetic preference pairs drawn from the reference policy and labeled by Bradley-Terry.

Sampling algorithm (stable across implementations given the same PCG64 stream,
``numpy.random.Generator(numpy.random.PCG64(seed))``); every draw is a single
``random()`` double ``u`` in [0, 1):

1. prompt ``x = min(floor(u * K), K - 1)``;
2. first response by inverting the CDF of ``pi_ref(.|x)``:
   the first index whose cumulative probability exceeds ``u``;
3. second response the same way, redrawn until it differs from the first;
4. ``bt`` labeling: the first response is chosen iff ``u < sigmoid(r_a - r_b)``;
   ``hard`` labeling consumes no draw and chooses the higher reward
   (ties go to the lower index).

Duplicate pairs are allowed; pairs are i.i.d.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Optional

import numpy as np

from prefcal.envcore import Environment
from prefcal.errors import InvalidEnvironmentError, InvalidInputError, MismatchError

LABELINGS = ("bt", "hard")


def bt_probability(reward_delta) -> float:
    """Bradley-Terry win probability sigmoid(delta), evaluated without overflow."""
    z = float(reward_delta)
    if not math.isfinite(z):
        raise InvalidInputError(f"reward difference must be finite, got {z!r}")
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass(frozen=True)
class PreferencePair:
    prompt: int
    chosen: int
    rejected: int
    oracle_reward_chosen: Optional[float] = None
    oracle_reward_rejected: Optional[float] = None

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise InvalidInputError("a preference pair needs two distinct responses")

    @property
    def has_oracle_rewards(self) -> bool:
        return self.oracle_reward_chosen is not None and self.oracle_reward_rejected is not None

    def check(self, env: Environment) -> "PreferencePair":
        env.check_response(self.prompt, self.chosen)
        env.check_response(self.prompt, self.rejected)
        return self


@dataclass(frozen=True)
class PreferenceDataset:
    """Ordered preference pairs plus the provenance needed to regenerate them."""

    pairs: tuple[PreferencePair, ...]
    env_fingerprint: str
    seed: int
    labeling: str = "bt"
    beta_label: Optional[float] = 1.0  # None marks hard labels

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.pairs:
            raise InvalidInputError("a preference dataset must contain at least one pair")
        if self.labeling not in LABELINGS:
            raise InvalidInputError(f"unknown labeling {self.labeling!r}")

    def __len__(self) -> int:
        return len(self.pairs)

    def validate(self, env: Environment) -> "PreferenceDataset":
        if self.env_fingerprint != env.fingerprint:
            raise MismatchError("dataset was generated from a different environment")
        for pair in self.pairs:
            pair.check(env)
        return self

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        """Column view: prompt, chosen, rejected (int) and oracle rewards (NaN when absent)."""
        nan = float("nan")
        cols = {
            "x": np.array([p.prompt for p in self.pairs], dtype=np.int64),
            "yw": np.array([p.chosen for p in self.pairs], dtype=np.int64),
            "yl": np.array([p.rejected for p in self.pairs], dtype=np.int64),
            "rw": np.array(
                [nan if p.oracle_reward_chosen is None else p.oracle_reward_chosen for p in self.pairs]
            ),
            "rl": np.array(
                [nan if p.oracle_reward_rejected is None else p.oracle_reward_rejected for p in self.pairs]
            ),
        }
        for v in cols.values():
            v.flags.writeable = False
        return cols

    # -- serialization -------------------------------------------------

    def header(self) -> dict:
        return {
            "env_fingerprint": self.env_fingerprint,
            "seed": self.seed,
            "labeling": self.labeling,
            "beta_label": self.beta_label,
        }

    def to_jsonl(self) -> str:
        dump = lambda d: json.dumps(d, sort_keys=True, separators=(",", ":"))
        lines = [dump(self.header())]
        for p in self.pairs:
            lines.append(
                dump(
                    {
                        "x": p.prompt,
                        "yw": p.chosen,
                        "yl": p.rejected,
                        "rw": p.oracle_reward_chosen,
                        "rl": p.oracle_reward_rejected,
                    }
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "PreferenceDataset":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise InvalidInputError("empty dataset file")
        try:
            head = json.loads(lines[0])
            pairs = []
            for ln in lines[1:]:
                rec = json.loads(ln)
                pairs.append(
                    PreferencePair(int(rec["x"]), int(rec["yw"]), int(rec["yl"]), rec.get("rw"), rec.get("rl"))
                )
            return cls(
                tuple(pairs),
                head["env_fingerprint"],
                int(head["seed"]),
                head.get("labeling", "bt"),
                head.get("beta_label"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidInputError):
                raise
            raise InvalidInputError(f"malformed dataset file: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PreferenceDataset":
        with open(path, encoding="utf-8") as fh:
            return cls.from_jsonl(fh.read())


def _draw_response(cdf: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf, u, side="right")), cdf.size - 1)


def _draw_candidate(rng: np.random.Generator, cdfs: list[np.ndarray]) -> tuple[int, int, int]:
    k = len(cdfs)
    x = min(int(rng.random() * k), k - 1)
    a = _draw_response(cdfs[x], rng.random())
    b = a
    while b == a:
        b = _draw_response(cdfs[x], rng.random())
    return x, a, b


def candidate_draws(env: Environment, n: int, seed: int) -> Iterable[tuple[int, int, int]]:
    """Yield ``n`` unlabeled (x, a, b) candidates; the same stream :func:`sample_dataset`
    consumes under hard labeling."""
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    cdfs = [np.cumsum(env.ref_probs(x)) for x in range(env.n_prompts)]
    for _ in range(n):
        yield _draw_candidate(rng, cdfs)


def sample_dataset(env: Environment, n_pairs: int, seed: int, labeling: str = "bt") -> PreferenceDataset:
    """Draw ``n_pairs`` i.i.d. labeled pairs; deterministic in (env, n_pairs, seed, labeling)."""
    if int(n_pairs) < 1:
        raise InvalidInputError("n_pairs must be at least 1")
    if labeling not in LABELINGS:
        raise InvalidInputError(f"labeling must be one of {LABELINGS}, got {labeling!r}")
    small = [x for x, m in enumerate(env.sizes) if m < 2]
    if small:
        raise InvalidEnvironmentError(f"prompts {small} have fewer than two responses")

    rng = np.random.Generator(np.random.PCG64(int(seed)))
    cdfs = [np.cumsum(env.ref_probs(x)) for x in range(env.n_prompts)]
    rewards = env.split(env.reward)
    pairs = []
    for _ in range(int(n_pairs)):
        x, a, b = _draw_candidate(rng, cdfs)
        ra, rb = rewards[x][a], rewards[x][b]
        if labeling == "bt":
            a_wins = rng.random() < bt_probability(ra - rb)
        else:
            a_wins = ra > rb or (ra == rb and a < b)
        pairs.append(PreferencePair(x, a, b) if a_wins else PreferencePair(x, b, a))
    return PreferenceDataset(
        tuple(pairs), env.fingerprint, int(seed), labeling, 1.0 if labeling == "bt" else None
    )


def attach_oracle_rewards(
    dataset: PreferenceDataset, env: Optional[Environment] = None, mode: str = "env"
) -> PreferenceDataset:
    """Fill both oracle-reward fields of every pair.

    ``mode="env"`` copies r(x, y) from the environment's reward table;
    ``mode="convention"`` writes +1/2 for the chosen and -1/2 for the rejected
    response, for when only the preference itself is known.
    """
    if env is not None and dataset.env_fingerprint != env.fingerprint:
        raise MismatchError("dataset was generated from a different environment")
    if mode == "convention":
        pairs = [replace(p, oracle_reward_chosen=0.5, oracle_reward_rejected=-0.5) for p in dataset.pairs]
    elif mode == "env":
        if env is None:
            raise InvalidInputError("env mode needs the generating environment")
        pairs = [
            replace(
                p.check(env),
                oracle_reward_chosen=float(env.reward[env.index(p.prompt, p.chosen)]),
                oracle_reward_rejected=float(env.reward[env.index(p.prompt, p.rejected)]),
            )
            for p in dataset.pairs
        ]
    else:
        raise InvalidInputError(f"unknown oracle mode {mode!r}")
    return replace(dataset, pairs=tuple(pairs))
