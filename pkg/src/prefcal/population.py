"""Exact population quantities for tabular policies.

All expectations are finite sums over a prompt's response set. Per-prompt
functions take ``(env, beta, policy, x)``; gradients come back as full flat
tables that are zero outside prompt ``x``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from prefcal.envcore import (
    Environment,
    PolicyParams,
    _check_beta,
    log_optimal_policy,
    log_partition,
    segment_log_softmax,
    segment_logsumexp,
)
from prefcal.errors import InvalidInputError
from prefcal.losses import LossValue
from prefcal.prefdata import PreferencePair


def _rows(env: Environment, beta: float, policy: PolicyParams, x):
    x = env.check_prompt(x)
    policy.check(env)
    log_ref = env.row(env.log_ref, x)
    log_pi = env.row(policy.log_probs, x)
    log_star = log_optimal_policy(env, beta, x)
    return x, log_ref, log_pi, log_star


def _kl(log_p: np.ndarray, log_q: np.ndarray) -> float:
    return float(np.sum(np.exp(log_p) * (log_p - log_q)))


def forward_kl(env: Environment, beta, policy: PolicyParams, x) -> float:
    """KL(pi* || pi_theta) for prompt ``x``."""
    beta = _check_beta(beta)
    _, _, log_pi, log_star = _rows(env, beta, policy, x)
    return _kl(log_star, log_pi)


def reverse_kl(env: Environment, beta, policy: PolicyParams, x) -> float:
    """KL(pi_theta || pi*) for prompt ``x``."""
    beta = _check_beta(beta)
    _, _, log_pi, log_star = _rows(env, beta, policy, x)
    return _kl(log_pi, log_star)


def optimal_ref_kl(env: Environment, beta, x) -> float:
    """KL(pi* || pi_ref); the theta-independent offset between the contrastive term and forward KL."""
    beta = _check_beta(beta)
    return _kl(log_optimal_policy(env, beta, x), env.row(env.log_ref, x))


def policy_ref_kl(env: Environment, policy: PolicyParams, x) -> float:
    x = env.check_prompt(x)
    policy.check(env)
    return _kl(env.row(policy.log_probs, x), env.row(env.log_ref, x))


def expected_reward(env: Environment, policy: PolicyParams, x) -> float:
    x = env.check_prompt(x)
    policy.check(env)
    return float(np.dot(np.exp(env.row(policy.log_probs, x)), env.rewards(x)))


def rlhf_objective(env: Environment, beta, policy: PolicyParams, x) -> float:
    """KL-regularized reward E_pi[r] - beta * KL(pi || pi_ref)."""
    beta = _check_beta(beta)
    return expected_reward(env, policy, x) - beta * policy_ref_kl(env, policy, x)


def ground_truth_weights(env: Environment, beta, x) -> np.ndarray:
    """w(y) = exp(r/beta) / E_ref[exp(r/beta)], i.e. pi*/pi_ref."""
    beta = _check_beta(beta)
    return np.exp(env.rewards(x) / beta - log_partition(env, beta, x))


def population_mle_loss(env: Environment, beta, policy: PolicyParams, x) -> float:
    """Weighted log-likelihood loss -E_ref[w log pi_theta]."""
    beta = _check_beta(beta)
    x = env.check_prompt(x)
    policy.check(env)
    w = ground_truth_weights(env, beta, x)
    return float(-np.sum(env.ref_probs(x) * w * env.row(policy.log_probs, x)))


def contrastive_term(env: Environment, beta, policy: PolicyParams, x) -> float:
    """First term of the population Cal-DPO loss, by its defining formula.

    -E_ref[w * log(w_raw / E_ref[w_raw])] with w_raw = pi_theta / pi_ref.
    """
    beta = _check_beta(beta)
    x, log_ref, log_pi, _ = _rows(env, beta, policy, x)
    ref = np.exp(log_ref)
    w = ground_truth_weights(env, beta, x)
    log_w_raw = log_pi - log_ref
    log_norm = math.log(float(np.sum(ref * np.exp(log_w_raw))))
    return float(-np.sum(ref * w * (log_w_raw - log_norm)))


def calibration_term(env: Environment, beta, policy: PolicyParams, x) -> float:
    """E_ref[(log(pi_theta/pi_ref) - r/beta)^2]."""
    beta = _check_beta(beta)
    x, log_ref, log_pi, _ = _rows(env, beta, policy, x)
    resid = log_pi - log_ref - env.rewards(x) / beta
    return float(np.sum(np.exp(log_ref) * resid**2))


@dataclass(frozen=True)
class PopulationReport:
    prompt: int
    forward_kl: float
    reverse_kl: float
    mle_loss: float
    caldpo_population_loss: float
    first_term: float
    calibration_term: float
    log_partition: float
    theorem2_gap_raw: float
    theorem2_gap_corrected: float
    first_term_via_kl: float
    optimal_ref_kl: float

    def as_row(self) -> dict:
        return asdict(self)


def population_caldpo_loss(env: Environment, beta, policy: PolicyParams, x) -> PopulationReport:
    beta = _check_beta(beta)
    x = env.check_prompt(x)
    fkl = forward_kl(env, beta, policy, x)
    rkl = reverse_kl(env, beta, policy, x)
    first = contrastive_term(env, beta, policy, x)
    cal = calibration_term(env, beta, policy, x)
    const = optimal_ref_kl(env, beta, x)
    total = first + cal
    return PopulationReport(
        prompt=x,
        forward_kl=fkl,
        reverse_kl=rkl,
        mle_loss=population_mle_loss(env, beta, policy, x),
        caldpo_population_loss=total,
        first_term=first,
        calibration_term=cal,
        log_partition=log_partition(env, beta, x),
        theorem2_gap_raw=total - rkl,
        theorem2_gap_corrected=fkl + cal - rkl,
        first_term_via_kl=fkl - const,
        optimal_ref_kl=const,
    )


def population_reports(env: Environment, beta, policy: PolicyParams) -> list[PopulationReport]:
    return [population_caldpo_loss(env, beta, policy, x) for x in range(env.n_prompts)]


@dataclass(frozen=True)
class ContrastWeights:
    w: np.ndarray
    w_hat: np.ndarray


def contrast_weights(env: Environment, beta, policy: PolicyParams, x) -> ContrastWeights:
    """Ground-truth weights w and policy-ratio weights w_hat for prompt ``x``."""
    beta = _check_beta(beta)
    x, log_ref, log_pi, _ = _rows(env, beta, policy, x)
    ratio = np.exp(log_pi - log_ref)
    w_hat = ratio / float(np.sum(np.exp(log_ref) * ratio))
    return ContrastWeights(ground_truth_weights(env, beta, x), w_hat)


def _embed(env: Environment, x: int, row: np.ndarray) -> np.ndarray:
    out = np.zeros(env.n_entries)
    out[env.offsets[x] : env.offsets[x + 1]] = row
    return out


def theorem1_gradient(env: Environment, beta, policy: PolicyParams, x) -> np.ndarray:
    """Gradient of the contrastive term in weight form: -E_ref[(w - w_hat) grad log pi_theta]."""
    beta = _check_beta(beta)
    x = env.check_prompt(x)
    cw = contrast_weights(env, beta, policy, x)
    pi = policy.probs(x)
    # jac[y, j] = d log pi(y) / d theta_j
    jac = np.eye(pi.size) - pi[None, :]
    coeff = env.ref_probs(x) * (cw.w - cw.w_hat)
    return _embed(env, x, -(coeff @ jac))


def contrastive_gradient_direct(env: Environment, beta, policy: PolicyParams, x) -> np.ndarray:
    """Gradient of the contrastive term by differentiating its defining formula term by term."""
    beta = _check_beta(beta)
    x, log_ref, log_pi, log_star = _rows(env, beta, policy, x)
    pi = np.exp(log_pi)
    a = np.exp(log_star)  # pi_ref * w
    total = float(np.sum(pi))  # E_ref[w_raw]
    sa = float(np.sum(a))
    grad = -a + pi * sa + sa * pi * (1.0 - total) / total
    return _embed(env, x, grad)


def mle_gradient(env: Environment, beta, policy: PolicyParams, x) -> np.ndarray:
    beta = _check_beta(beta)
    x, _, log_pi, log_star = _rows(env, beta, policy, x)
    star = np.exp(log_star)
    return _embed(env, x, np.exp(log_pi) * float(np.sum(star)) - star)


def calibration_gradient(env: Environment, beta, policy: PolicyParams, x) -> np.ndarray:
    beta = _check_beta(beta)
    x, log_ref, log_pi, _ = _rows(env, beta, policy, x)
    ref = np.exp(log_ref)
    resid = log_pi - log_ref - env.rewards(x) / beta
    return _embed(env, x, 2.0 * ref * resid - 2.0 * np.exp(log_pi) * float(np.sum(ref * resid)))


POPULATION_TERMS = ("full", "contrastive", "calibration")


def population_objective(env: Environment, beta, policy: PolicyParams, terms: str = "full") -> LossValue:
    """Mean over prompts of the population Cal-DPO loss (or one of its two terms).

    Vectorized over the flat layout; the contrastive gradient uses the
    contrast-weight form -E_ref[(w - w_hat) grad log pi].
    """
    beta = _check_beta(beta)
    if terms not in POPULATION_TERMS:
        raise InvalidInputError(f"terms must be one of {POPULATION_TERMS}")
    policy.check(env)
    sizes, starts = env.sizes, env.offsets[:-1]
    seg_sum = lambda v: np.add.reduceat(v, starts)
    log_ref, log_pi = env.log_ref, policy.log_probs
    ref, pi = np.exp(log_ref), np.exp(log_pi)
    value = np.zeros(env.n_prompts)
    grad = np.zeros(env.n_entries)
    if terms in ("full", "contrastive"):
        scaled = log_ref + env.reward / beta
        log_z = segment_logsumexp(scaled, sizes)
        w = np.exp(env.reward / beta - np.repeat(log_z, sizes))
        mass = seg_sum(pi)  # E_ref[w_raw]
        value += -seg_sum(ref * w * (log_pi - log_ref - np.repeat(np.log(mass), sizes)))
        w_hat = np.exp(log_pi - log_ref) / np.repeat(mass, sizes)
        coeff = ref * (w - w_hat)
        grad += -(coeff - pi * np.repeat(seg_sum(coeff), sizes))
    if terms in ("full", "calibration"):
        resid = log_pi - log_ref - env.reward / beta
        value += seg_sum(ref * resid**2)
        grad += 2.0 * ref * resid - 2.0 * pi * np.repeat(seg_sum(ref * resid), sizes)
    k = env.n_prompts
    return LossValue(math.fsum(value.tolist()) / k, grad / k)


def kl_means(env: Environment, beta, policy: PolicyParams) -> tuple[float, float]:
    """(mean forward KL, mean reverse KL) over prompts, vectorized."""
    beta = _check_beta(beta)
    policy.check(env)
    log_star = segment_log_softmax(env.log_ref + env.reward / beta, env.sizes)
    log_pi = policy.log_probs
    starts = env.offsets[:-1]
    fwd = np.add.reduceat(np.exp(log_star) * (log_star - log_pi), starts)
    rev = np.add.reduceat(np.exp(log_pi) * (log_pi - log_star), starts)
    return float(fwd.mean()), float(rev.mean())


@dataclass
class Theorem2Diagnostic:
    """Per-prompt comparison of the population Cal-DPO loss with reverse KL.

    Nothing here is asserted; the raw comparison omits the constant
    -KL(pi* || pi_ref) and can legitimately come out negative.
    """

    reports: list[PopulationReport]
    raw_violations: int = 0
    corrected_violations: int = 0
    min_raw_gap: float = math.inf
    min_corrected_gap: float = math.inf
    tolerance: float = 1e-12
    extra: dict = field(default_factory=dict)

    @property
    def prompts(self) -> int:
        return len(self.reports)


def theorem2_diagnostic(env: Environment, beta, policy: PolicyParams, tolerance: float = 1e-12) -> Theorem2Diagnostic:
    beta = _check_beta(beta)
    reports = population_reports(env, beta, policy)
    raw = [r.theorem2_gap_raw for r in reports]
    corr = [r.theorem2_gap_corrected for r in reports]
    return Theorem2Diagnostic(
        reports=reports,
        raw_violations=sum(g < -tolerance for g in raw),
        corrected_violations=sum(g < -tolerance for g in corr),
        min_raw_gap=min(raw),
        min_corrected_gap=min(corr),
        tolerance=tolerance,
    )


def soft_weights(reward_chosen: float, reward_rejected: float, beta) -> tuple[float, float]:
    """Two-sample softmax weights of exp(r/beta) over {chosen, rejected}."""
    beta = _check_beta(beta)
    d = (reward_chosen - reward_rejected) / beta
    w = float(np.exp(-np.logaddexp(0.0, -d)))
    wl = float(np.exp(-np.logaddexp(0.0, d)))
    return w, wl


def empirical_population_estimate(env: Environment, beta, policy: PolicyParams, pair: PreferencePair) -> float:
    """Two-sample estimate of the population Cal-DPO loss from one preference pair.

    The expectation over pi_ref is replaced by the pair {y_w, y_l}: softmax
    weights of exp(r/beta) on the contrastive log-ratios, plus both
    calibration residuals against r/beta. As beta -> 0 with rewards +-1/2 it
    reduces to the pairwise Cal-DPO loss.
    """
    beta = _check_beta(beta)
    if not pair.has_oracle_rewards:
        raise InvalidInputError("the population estimate needs oracle rewards on the pair")
    pair.check(env)
    policy.check(env)
    iw = env.index(pair.prompt, pair.chosen)
    il = env.index(pair.prompt, pair.rejected)
    u = float(policy.log_probs[iw] - env.log_ref[iw])
    v = float(policy.log_probs[il] - env.log_ref[il])
    rw, rl = float(pair.oracle_reward_chosen), float(pair.oracle_reward_rejected)
    p_w, p_l = soft_weights(rw, rl, beta)
    h = u - v
    log_share_w = -float(np.logaddexp(0.0, -h))  # log(w_raw_w / (w_raw_w + w_raw_l))
    log_share_l = -float(np.logaddexp(0.0, h))
    contrast = -p_w * log_share_w - p_l * log_share_l
    return contrast + (u - rw / beta) ** 2 + (v - rl / beta) ** 2
