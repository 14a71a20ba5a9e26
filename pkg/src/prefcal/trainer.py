"""Deterministic gradient descent over tabular policy logits."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from prefcal.envcore import Environment, PolicyParams
from prefcal.errors import ConfigurationError, DivergenceError, InvalidInputError, PrefCalError
from prefcal.losses import BETA_GRID, LossSpec, LossValue, Method, batch_from_columns, dataset_columns
from prefcal.population import POPULATION_TERMS, kl_means, population_objective
from prefcal.prefdata import PreferenceDataset

OBJECTIVES = ("empirical", "population")
INITS = ("zeros", "ref", "gaussian")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``batch_size=None`` means full batch. ``objective="population"`` trains on the
    exact population Cal-DPO loss (``population_terms`` selects both terms or
    one of them) and uses ``loss.beta``. Random choices (gaussian init,
    minibatch order) are driven by the ``seed`` passed to :func:`train`.
    """

    loss: LossSpec
    steps: int = 1000
    learning_rate: float = 0.1
    batch_size: Optional[int] = None
    objective: str = "empirical"
    population_terms: str = "full"
    log_every: int = 1
    grad_clip: Optional[float] = None
    init: str = "zeros"
    init_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossSpec.from_dict(self.loss))
        if int(self.steps) < 1:
            raise ConfigurationError("steps must be at least 1")
        if not float(self.learning_rate) >= 0.0:
            raise ConfigurationError("learning_rate must be non-negative")
        if int(self.log_every) < 1:
            raise ConfigurationError("log_every must be at least 1")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.grad_clip is not None and not float(self.grad_clip) > 0.0:
            raise ConfigurationError("grad_clip must be positive")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}")
        if self.population_terms not in POPULATION_TERMS:
            raise ConfigurationError(f"population_terms must be one of {POPULATION_TERMS}")
        if self.init not in INITS:
            raise ConfigurationError(f"init must be one of {INITS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config fields: {sorted(unknown)}")
        if "loss" not in d:
            raise ConfigurationError("train config needs a loss")
        try:
            return cls(**{**d, "loss": LossSpec.from_dict(d["loss"])})
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, PrefCalError):
                raise ConfigurationError(str(exc)) from exc
            raise ConfigurationError(f"invalid train config: {exc}") from exc


LOG_FIELDS = (
    "step",
    "loss",
    "chosen_reward_mean",
    "rejected_reward_mean",
    "margin_mean",
    "forward_kl_mean",
    "reverse_kl_mean",
)


@dataclass(frozen=True)
class LogRow:
    step: int
    loss: float
    chosen_reward_mean: float
    rejected_reward_mean: float
    margin_mean: float
    forward_kl_mean: float
    reverse_kl_mean: float


def format_float(v: float) -> str:
    return format(float(v), ".17g")


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def first(self) -> LogRow:
        return self.rows[0]

    @property
    def final(self) -> LogRow:
        return self.rows[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for r in self.rows:
            writer.writerow([r.step] + [format_float(getattr(r, f)) for f in LOG_FIELDS[1:]])
        return buf.getvalue()


def gd_step(policy: PolicyParams, grad, learning_rate: float, grad_clip: Optional[float] = None) -> PolicyParams:
    """One descent step; the gradient is rescaled to L2 norm ``grad_clip`` if it exceeds it."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != policy.logits.shape:
        raise InvalidInputError(f"gradient shape {g.shape} does not match logits {policy.logits.shape}")
    if not learning_rate >= 0.0:
        raise InvalidInputError("learning rate must be non-negative")
    if grad_clip is not None:
        norm = float(np.linalg.norm(g))
        if norm > grad_clip:
            g = g * (grad_clip / norm)
    return PolicyParams(policy.logits - learning_rate * g, policy.sizes)


def initial_policy(config: TrainConfig, env: Environment, rng: np.random.Generator) -> PolicyParams:
    if config.init == "zeros":
        return PolicyParams.zeros(env)
    if config.init == "ref":
        return PolicyParams.from_ref(env)
    return PolicyParams.gaussian(env, config.init_scale, rng)


class _Batches:
    """Epoch-wise shuffled minibatches drawn from a single generator."""

    def __init__(self, n: int, size: int, rng: np.random.Generator):
        self.n, self.size, self.rng = n, min(size, n), rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.size]
        self.pos += self.size
        return np.sort(idx)


def train(
    config: TrainConfig,
    env: Environment,
    dataset: Optional[PreferenceDataset] = None,
    seed: int = 0,
    init: Optional[PolicyParams] = None,
) -> tuple[PolicyParams, TrainLog]:
    """Run ``config.steps`` descent steps and return the final policy and its log.

    Rows are logged at step 0 (before any update), every ``log_every`` steps,
    and at the final step. Reward means are over the dataset's chosen and
    rejected responses (NaN when training on the population without a
    dataset); KL means are over prompts, against pi* at ``config.loss.beta``.
    """
    if config.objective == "empirical" and dataset is None:
        raise ConfigurationError("the empirical objective needs a preference dataset")
    if config.objective == "population" and config.loss.method is not Method.CAL_DPO:
        raise ConfigurationError("the population objective is defined for CAL_DPO only")

    rng = np.random.Generator(np.random.PCG64(int(seed)))
    policy = (init if init is not None else initial_policy(config, env, rng)).check(env)
    beta = config.loss.beta

    cols = None
    if dataset is not None:
        cols = dataset_columns(env, dataset)
    batches = None
    if config.objective == "empirical" and config.batch_size is not None:
        batches = _Batches(len(dataset), int(config.batch_size), rng)

    def objective(p: PolicyParams, idx=None) -> LossValue:
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            return _objective(p, idx)

    def _objective(p: PolicyParams, idx=None) -> LossValue:
        if config.objective == "population":
            return population_objective(env, beta, p, config.population_terms)
        x, iw, il, rw, rl = cols if idx is None else (c[idx] for c in cols)
        return batch_from_columns(config.loss, p.log_probs, env, x, iw, il, rw, rl)

    log = TrainLog()

    def record(step: int, p: PolicyParams, loss_value: float):
        if cols is not None:
            r = p.log_probs - env.log_ref
            chosen = float(np.mean(r[cols[1]]))
            rejected = float(np.mean(r[cols[2]]))
        else:
            chosen = rejected = math.nan
        fwd, rev = kl_means(env, beta, p)
        log.rows.append(LogRow(step, loss_value, chosen, rejected, chosen - rejected, fwd, rev))

    for step in range(int(config.steps) + 1):
        is_log = step % config.log_every == 0 or step == config.steps
        if batches is None:
            full = objective(policy)
            update_grad = full.grad
        else:
            full = objective(policy) if is_log else None
            update_grad = objective(policy, batches.next()).grad if step < config.steps else None
        if full is not None and not math.isfinite(full.value):
            raise DivergenceError(step)
        if is_log:
            record(step, policy, full.value)
        if step == config.steps:
            break
        if not np.all(np.isfinite(update_grad)):
            raise DivergenceError(step, f"non-finite gradient at step {step}")
        try:
            policy = gd_step(policy, update_grad, float(config.learning_rate), config.grad_clip)
        except InvalidInputError as exc:
            raise DivergenceError(step + 1, f"non-finite logits after step {step}") from exc
    return policy, log


@dataclass(frozen=True)
class SweepRow:
    beta: float
    step: int
    loss: float
    chosen_reward_mean: float
    rejected_reward_mean: float
    margin_mean: float
    forward_kl_mean: float
    reverse_kl_mean: float


SWEEP_FIELDS = tuple(f.name for f in fields(SweepRow))


def beta_sweep(
    base_config: TrainConfig,
    betas: Sequence[float] = BETA_GRID,
    env: Environment = None,
    dataset: Optional[PreferenceDataset] = None,
    seed: int = 0,
) -> list[SweepRow]:
    """Train once per beta and tabulate each run's final log row."""
    betas = list(betas)
    if not betas:
        raise ConfigurationError("beta sweep needs at least one beta")
    rows = []
    for b in betas:
        if not (isinstance(b, (int, float)) and b > 0 and math.isfinite(b)):
            raise ConfigurationError(f"sweep betas must be positive, got {b!r}")
        cfg = replace(base_config, loss=replace(base_config.loss, beta=float(b)))
        try:
            _, log = train(cfg, env, dataset, seed)
        except DivergenceError as exc:
            raise DivergenceError(exc.step, str(exc), beta=b) from exc
        except PrefCalError as exc:
            raise type(exc)(f"beta={b!r}: {exc}") from exc
        f = log.final
        rows.append(SweepRow(float(b), *(getattr(f, name) for name in LOG_FIELDS)))
    return rows


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_FIELDS)
    for r in rows:
        writer.writerow([format_float(r.beta), r.step] + [format_float(getattr(r, f)) for f in SWEEP_FIELDS[2:]])
    return buf.getvalue()
