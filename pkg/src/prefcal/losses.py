"""Pairwise preference losses and their analytic gradients with respect to policy logits.

Every loss here depends on the policy only through the implicit rewards of the
chosen and rejected response, ``u = log pi(y_w|x)/pi_ref(y_w|x)`` and
``v = log pi(y_l|x)/pi_ref(y_l|x)``. With ``g_w = dL/du`` and ``g_l = dL/dv``
the chain rule through the softmax gives, on the pair's prompt row,

    dL/dtheta = g_w * e_w + g_l * e_l - (g_w + g_l) * pi(.|x).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from prefcal.envcore import Environment, PolicyParams
from prefcal.errors import InvalidInputError, InvalidParameterError, MismatchError, WrongOperationError
from prefcal.prefdata import PreferenceDataset, PreferencePair

DEFAULT_BETA = 1e-3
BETA_GRID = (1e-3, 2e-3, 3e-3, 1e-2, 1e-1)


class Method(str, enum.Enum):
    DPO = "DPO"
    BT = "BT"
    IPO = "IPO"
    SLIC = "SLIC"
    CAL_DPO = "CAL_DPO"
    CAL_IPO = "CAL_IPO"
    CAL_SLIC = "CAL_SLIC"

    @property
    def calibrated(self) -> bool:
        return self.name.startswith("CAL_")

    @property
    def base(self) -> "Method":
        """Uncalibrated loss underlying a calibrated one (Cal-DPO uses the beta-free BT term)."""
        return {Method.CAL_DPO: Method.BT, Method.CAL_IPO: Method.IPO, Method.CAL_SLIC: Method.SLIC}.get(
            self, self
        )


@dataclass(frozen=True)
class LossSpec:
    """Loss method, beta, and optional explicit calibration targets.

    Leaving a target as ``None`` selects the default: ``r/beta`` when the pair
    carries oracle rewards, otherwise ``+1/(2 beta)`` (chosen) and ``-1/(2 beta)``
    (rejected).
    """

    method: Method
    beta: float = DEFAULT_BETA
    target_chosen: Optional[float] = None
    target_rejected: Optional[float] = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "method", Method(self.method))
        except ValueError as exc:
            raise InvalidParameterError(f"unknown loss method {self.method!r}") from exc
        beta = float(self.beta)
        if not (beta > 0.0 and math.isfinite(beta)):
            raise InvalidParameterError(f"beta must be positive and finite, got {self.beta!r}")
        object.__setattr__(self, "beta", beta)
        for name in ("target_chosen", "target_rejected"):
            t = getattr(self, name)
            if t is not None and not math.isfinite(t):
                raise InvalidParameterError(f"{name} must be finite")

    @property
    def default_targets(self) -> bool:
        return self.target_chosen is None and self.target_rejected is None

    @property
    def resolved_targets(self) -> tuple[float, float]:
        half = 0.5 / self.beta
        tc = half if self.target_chosen is None else float(self.target_chosen)
        tr = -half if self.target_rejected is None else float(self.target_rejected)
        return tc, tr

    def to_dict(self) -> dict:
        d = {"method": self.method.value, "beta": self.beta}
        if self.target_chosen is not None:
            d["target_chosen"] = self.target_chosen
        if self.target_rejected is not None:
            d["target_rejected"] = self.target_rejected
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        return cls(d["method"], d.get("beta", DEFAULT_BETA), d.get("target_chosen"), d.get("target_rejected"))


@dataclass(frozen=True)
class LossValue:
    value: float
    grad: np.ndarray  # flat, laid out like the environment


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    return np.exp(_log_sigmoid(z))


def _base_terms(method: Method, beta: float, h: np.ndarray):
    """Per-pair base loss and its derivative with respect to the preference score."""
    if method is Method.DPO:
        z = beta * h
        return -_log_sigmoid(z), -beta * _sigmoid(-z)
    if method is Method.BT:
        return -_log_sigmoid(h), -_sigmoid(-h)
    if method is Method.IPO:
        resid = h - 0.5 / beta
        return resid**2, 2.0 * resid
    if method is Method.SLIC:
        margin = 1.0 - beta * h
        active = margin > 0.0  # subgradient 0 at the kink
        return np.where(active, margin, 0.0), np.where(active, -beta, 0.0)
    raise WrongOperationError(f"{method.value} is not a base loss")


def pair_terms(spec: LossSpec, u, v, rw=None, rl=None):
    """Vectorized per-pair losses.

    Args:
        spec: loss selection.
        u, v: implicit rewards of chosen / rejected responses.
        rw, rl: oracle rewards (NaN where absent); only consulted for
            calibrated methods with default targets.

    Returns:
        ``(values, g_w, g_l)`` with ``g_w = dL/du`` and ``g_l = dL/dv``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    method = spec.method
    base, dh = _base_terms(method.base, spec.beta, u - v)
    values, g_w, g_l = base, dh, -dh
    if method.calibrated:
        tw, tl = spec.resolved_targets
        tw = np.full_like(u, tw)
        tl = np.full_like(v, tl)
        if spec.default_targets and rw is not None:
            rw = np.asarray(rw, dtype=np.float64)
            rl = np.asarray(rl, dtype=np.float64)
            has = np.isfinite(rw) & np.isfinite(rl)
            tw = np.where(has, rw / spec.beta, tw)
            tl = np.where(has, rl / spec.beta, tl)
        res_w, res_l = u - tw, v - tl
        values = values + res_w**2 + res_l**2
        g_w = g_w + 2.0 * res_w
        g_l = g_l + 2.0 * res_l
    return values, g_w, g_l


def assemble_gradient(env: Environment, probs: np.ndarray, x, iw, il, g_w, g_l) -> np.ndarray:
    """Sum per-pair gradients into one flat table, in pair order."""
    n = env.n_entries
    grad = np.bincount(iw, weights=g_w, minlength=n) + np.bincount(il, weights=g_l, minlength=n)
    row_weight = np.bincount(x, weights=g_w + g_l, minlength=env.n_prompts)
    return grad - probs * np.repeat(row_weight, env.sizes)


def _single_pair(spec: LossSpec, policy: PolicyParams, env: Environment, pair: PreferencePair) -> LossValue:
    pair.check(env)
    policy.check(env)
    iw = env.index(pair.prompt, pair.chosen)
    il = env.index(pair.prompt, pair.rejected)
    r = policy.log_probs - env.log_ref
    rw = np.nan if pair.oracle_reward_chosen is None else pair.oracle_reward_chosen
    rl = np.nan if pair.oracle_reward_rejected is None else pair.oracle_reward_rejected
    vals, g_w, g_l = pair_terms(spec, r[[iw]], r[[il]], np.array([rw]), np.array([rl]))
    grad = assemble_gradient(
        env, np.exp(policy.log_probs), np.array([pair.prompt]), np.array([iw]), np.array([il]), g_w, g_l
    )
    return LossValue(float(vals[0]), grad)


def pair_loss(spec: LossSpec, policy: PolicyParams, env: Environment, pair: PreferencePair) -> LossValue:
    """Uncalibrated pairwise loss (DPO, BT, IPO or SLIC) and its gradient."""
    if spec.method.calibrated:
        raise WrongOperationError(f"{spec.method.value} is calibrated; use cal_pair_loss")
    return _single_pair(spec, policy, env, pair)


def cal_pair_loss(spec: LossSpec, policy: PolicyParams, env: Environment, pair: PreferencePair) -> LossValue:
    """Calibrated pairwise loss: base term plus squared calibration residuals on both responses."""
    if not spec.method.calibrated:
        raise WrongOperationError(f"{spec.method.value} is not calibrated; use pair_loss")
    return _single_pair(spec, policy, env, pair)


def any_pair_loss(spec: LossSpec, policy: PolicyParams, env: Environment, pair: PreferencePair) -> LossValue:
    return _single_pair(spec, policy, env, pair)


def calibration_loss(policy: PolicyParams, env: Environment, x, y, target) -> LossValue:
    """Squared gap between the implicit reward of (x, y) and ``target``."""
    target = float(target)
    if not math.isfinite(target):
        raise InvalidInputError("calibration target must be finite")
    i = env.index(x, y)
    policy.check(env)
    resid = float(policy.log_probs[i] - env.log_ref[i]) - target
    probs = env.row(np.exp(policy.log_probs), x)
    grad = np.zeros(env.n_entries)
    lo = int(env.offsets[x])
    grad[lo : lo + env.sizes[x]] = -2.0 * resid * probs
    grad[i] += 2.0 * resid
    return LossValue(resid**2, grad)


def dataset_columns(env: Environment, dataset: PreferenceDataset):
    if dataset.env_fingerprint != env.fingerprint:
        raise MismatchError("dataset was generated from a different environment")
    cols = dataset.arrays
    x, yw, yl = cols["x"], cols["yw"], cols["yl"]
    sizes = np.asarray(env.sizes)
    if x.min() < 0 or x.max() >= env.n_prompts:
        raise InvalidInputError("dataset references an unknown prompt")
    if yw.min() < 0 or yl.min() < 0 or np.any(yw >= sizes[x]) or np.any(yl >= sizes[x]):
        raise InvalidInputError("dataset references an unknown response")
    off = env.offsets[x]
    return x, off + yw, off + yl, cols["rw"], cols["rl"]


def per_pair_values(spec: LossSpec, policy: PolicyParams, env: Environment, dataset: PreferenceDataset):
    policy.check(env)
    x, iw, il, rw, rl = dataset_columns(env, dataset)
    r = policy.log_probs - env.log_ref
    return pair_terms(spec, r[iw], r[il], rw, rl)[0]


def batch_loss(spec: LossSpec, policy: PolicyParams, env: Environment, dataset: PreferenceDataset) -> LossValue:
    """Mean loss over the dataset; gradient accumulated in dataset order."""
    if dataset is None or len(dataset) == 0:
        raise InvalidInputError("batch loss needs a non-empty dataset")
    policy.check(env)
    x, iw, il, rw, rl = dataset_columns(env, dataset)
    return batch_from_columns(spec, policy.log_probs, env, x, iw, il, rw, rl)


def batch_from_columns(spec, log_probs, env, x, iw, il, rw, rl) -> LossValue:
    r = log_probs - env.log_ref
    vals, g_w, g_l = pair_terms(spec, r[iw], r[il], rw, rl)
    n = len(vals)
    grad = assemble_gradient(env, np.exp(log_probs), x, iw, il, g_w, g_l) / n
    return LossValue(math.fsum(vals.tolist()) / n, grad)
