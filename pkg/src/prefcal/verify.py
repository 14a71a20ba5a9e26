"""Independent oracles and the bundled verification suites.

Each suite draws ``trials`` random instances (trial ``i`` uses the generator
seeded with ``[seed, i]``) and compares an implementation path against an
independent one. A suite result is the worst check: ``passed`` holds exactly
when ``max_deviation <= tolerance``. The ``theorem2`` suite is a diagnostic
and never fails.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from prefcal.envcore import (
    Environment,
    PolicyParams,
    log_partition,
    normalize_rewards,
    optimal_policy_params,
)
from prefcal.errors import InvalidInputError, ProbeFailureError
from prefcal.losses import LossSpec, Method, any_pair_loss, batch_loss, cal_pair_loss
from prefcal.population import (
    calibration_gradient,
    calibration_term,
    contrastive_gradient_direct,
    contrastive_term,
    empirical_population_estimate,
    forward_kl,
    mle_gradient,
    optimal_ref_kl,
    population_mle_loss,
    reverse_kl,
    rlhf_objective,
    soft_weights,
    theorem1_gradient,
    theorem2_diagnostic,
)
from prefcal.prefdata import PreferenceDataset, PreferencePair

SUITES = ("gradients", "theorem1", "theorem2", "identities", "beta_limit")
ASSERTING = {"gradients": True, "theorem1": True, "theorem2": False, "identities": True, "beta_limit": True}
FD_STEP = 1e-5
MAX_RECORDED_FAILURES = 20


def finite_diff_grad(fn: Callable[[PolicyParams], float], policy: PolicyParams, step: float = FD_STEP) -> np.ndarray:
    """Central differences ``(f(theta + h e_i) - f(theta - h e_i)) / 2h`` for every logit."""
    if not step > 0:
        raise InvalidInputError("finite-difference step must be positive")
    base = np.array(policy.logits)
    grad = np.empty_like(base)
    for i in range(base.size):
        probe = base.copy()
        probe[i] = base[i] + step
        f_plus = fn(PolicyParams(probe, policy.sizes))
        probe[i] = base[i] - step
        f_minus = fn(PolicyParams(probe, policy.sizes))
        for value in (f_plus, f_minus):
            if not math.isfinite(value):
                raise ProbeFailureError(i, value)
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """``max|a - b| / (1 + max|a|)``."""
    analytic = np.asarray(analytic)
    return float(np.max(np.abs(analytic - reference)) / (1.0 + np.max(np.abs(analytic))))


# -- random instances -------------------------------------------------------


@dataclass
class Instance:
    env: Environment
    policy: PolicyParams
    beta: float
    rng: np.random.Generator = field(repr=False)

    def describe(self) -> dict:
        return {
            "environment": self.env.to_dict(),
            "logits": self.policy.rows(),
            "beta": self.beta,
        }

    def random_pair(self, oracle: str | None = None) -> PreferencePair:
        x = int(self.rng.integers(self.env.n_prompts))
        a, b = self.rng.choice(self.env.sizes[x], size=2, replace=False)
        pair = PreferencePair(x, int(a), int(b))
        if oracle == "convention":
            return PreferencePair(x, int(a), int(b), 0.5, -0.5)
        if oracle == "env":
            r = self.env.rewards(x)
            return PreferencePair(x, int(a), int(b), float(r[a]), float(r[b]))
        return pair

    def random_dataset(self, n: int) -> PreferenceDataset:
        pairs = [self.random_pair(oracle="env" if i % 2 else None) for i in range(n)]
        return PreferenceDataset(tuple(pairs), self.env.fingerprint, 0, "bt")


def random_environment(rng: np.random.Generator, max_prompts: int = 4, max_responses: int = 8) -> Environment:
    k = int(rng.integers(1, max_prompts + 1))
    sizes = rng.integers(2, max_responses + 1, size=k)
    rewards = [rng.uniform(-1.0, 1.0, size=m) for m in sizes]
    ref_logits = [rng.standard_normal(m) for m in sizes]
    return Environment.from_rows(rewards, ref_logits)


def random_instance(seed: int, trial: int, beta: float | None = None) -> Instance:
    """K in 1..4 prompts, 2..8 responses each, rewards U[-1, 1], ref and policy
    logits N(0, 1), beta log-uniform in [1e-2, 1]."""
    rng = np.random.default_rng([int(seed), int(trial)])
    env = random_environment(rng)
    policy = PolicyParams.gaussian(env, 1.0, rng)
    if beta is None:
        beta = float(10.0 ** rng.uniform(-2.0, 0.0))
    return Instance(env, policy, beta, rng)


def counterexample_instance(seed: int = 0) -> Instance:
    """pi_theta = pi* on rewards shifted so log Z = 0: reverse KL and the calibration term vanish,
    so the raw comparison equals -KL(pi* || pi_ref) < 0."""
    rng = np.random.default_rng([int(seed), 2**31 - 1])
    beta = 0.5
    env = normalize_rewards(random_environment(rng), beta)
    return Instance(env, optimal_policy_params(env, beta), beta, rng)


# -- results ----------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    tolerance: float
    max_deviation: float = 0.0
    evaluations: int = 0

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance

    def observe(self, deviation: float) -> bool:
        self.evaluations += 1
        if not deviation <= self.max_deviation:  # NaN propagates as a failure
            self.max_deviation = deviation if math.isfinite(deviation) else math.inf
        return deviation <= self.tolerance


@dataclass
class VerificationSuiteResult:
    name: str
    instances: int
    max_deviation: float
    tolerance: float
    passed: bool
    asserting: bool
    failures: list[dict] = field(default_factory=list)
    checks: list[CheckResult] = field(default_factory=list)
    statistics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "name": self.name,
                "instances": self.instances,
                "max_deviation": self.max_deviation,
                "tolerance": self.tolerance,
                "passed": self.passed,
                "asserting": self.asserting,
                "checks": [
                    {
                        "name": c.name,
                        "max_deviation": c.max_deviation,
                        "tolerance": c.tolerance,
                        "evaluations": c.evaluations,
                        "passed": c.passed,
                    }
                    for c in self.checks
                ],
                "statistics": self.statistics,
                "failures": self.failures,
            }
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_json(results: list[VerificationSuiteResult]) -> str:
    doc = {"suites": [r.to_dict() for r in results], "passed": all(r.passed for r in results)}
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _finish(name: str, trials: int, checks: list[CheckResult], failures: list[dict], statistics=None):
    worst = max(checks, key=lambda c: c.max_deviation / c.tolerance if c.tolerance > 0 else math.inf)
    return VerificationSuiteResult(
        name=name,
        instances=trials,
        max_deviation=worst.max_deviation,
        tolerance=worst.tolerance,
        passed=all(c.passed for c in checks),
        asserting=ASSERTING[name],
        failures=failures[:MAX_RECORDED_FAILURES],
        checks=checks,
        statistics=statistics or {},
    )


def _fail(failures: list, trial: int, check: str, deviation: float, inst: Instance, **extra):
    if len(failures) < MAX_RECORDED_FAILURES:
        failures.append({"trial": trial, "check": check, "deviation": deviation, "inputs": inst.describe(), **extra})


# -- suites -----------------------------------------------------------------


def _summed(fn, env):
    return lambda p: sum(fn(p, x) for x in range(env.n_prompts))


def _suite_gradients(trials: int, seed: int) -> VerificationSuiteResult:
    tol = 1e-6
    checks = {f"pair_{m.value}": CheckResult(f"pair_{m.value}", tol) for m in Method}
    checks.update({f"batch_{m.value}": CheckResult(f"batch_{m.value}", tol) for m in Method})
    for name in ("population_first_term", "population_mle", "population_calibration"):
        checks[name] = CheckResult(name, tol)
    failures: list[dict] = []
    for t in range(trials):
        inst = random_instance(seed, t)
        env, policy, beta = inst.env, inst.policy, inst.beta
        pair = inst.random_pair(oracle=("env", None, "convention")[t % 3])
        dataset = inst.random_dataset(4)
        for m in Method:
            spec = LossSpec(m, beta)
            analytic = any_pair_loss(spec, policy, env, pair).grad
            fd = finite_diff_grad(lambda p: any_pair_loss(spec, p, env, pair).value, policy)
            dev = relative_error(analytic, fd)
            if not checks[f"pair_{m.value}"].observe(dev):
                _fail(failures, t, f"pair_{m.value}", dev, inst)
            analytic = batch_loss(spec, policy, env, dataset).grad
            fd = finite_diff_grad(lambda p: batch_loss(spec, p, env, dataset).value, policy)
            dev = relative_error(analytic, fd)
            if not checks[f"batch_{m.value}"].observe(dev):
                _fail(failures, t, f"batch_{m.value}", dev, inst)
        population = {
            "population_first_term": (theorem1_gradient, contrastive_term),
            "population_mle": (mle_gradient, population_mle_loss),
            "population_calibration": (calibration_gradient, calibration_term),
        }
        for name, (grad_fn, value_fn) in population.items():
            analytic = sum(grad_fn(env, beta, policy, x) for x in range(env.n_prompts))
            fd = finite_diff_grad(_summed(lambda p, x: value_fn(env, beta, p, x), env), policy)
            dev = relative_error(analytic, fd)
            if not checks[name].observe(dev):
                _fail(failures, t, name, dev, inst)
    return _finish("gradients", trials, list(checks.values()), failures)


def _suite_theorem1(trials: int, seed: int) -> VerificationSuiteResult:
    offset = CheckResult("constant_offset", 1e-9)
    gradient = CheckResult("contrast_weight_gradient", 1e-8)
    failures: list[dict] = []
    for t in range(trials):
        inst = random_instance(seed, t)
        env, policy, beta = inst.env, inst.policy, inst.beta
        for x in range(env.n_prompts):
            dev = abs(
                (contrastive_term(env, beta, policy, x) - forward_kl(env, beta, policy, x))
                + optimal_ref_kl(env, beta, x)
            )
            if not offset.observe(dev):
                _fail(failures, t, offset.name, dev, inst, prompt=x)
            dev = relative_error(
                theorem1_gradient(env, beta, policy, x), contrastive_gradient_direct(env, beta, policy, x)
            )
            if not gradient.observe(dev):
                _fail(failures, t, gradient.name, dev, inst, prompt=x)
    return _finish("theorem1", trials, [offset, gradient], failures)


def _suite_identities(trials: int, seed: int) -> VerificationSuiteResult:
    rlhf = CheckResult("reverse_kl_rlhf_identity", 1e-9)
    cross = CheckResult("first_term_cross_check", 1e-9)
    failures: list[dict] = []
    for t in range(trials):
        inst = random_instance(seed, t)
        env, policy, beta = inst.env, inst.policy, inst.beta
        for x in range(env.n_prompts):
            lhs = beta * reverse_kl(env, beta, policy, x) - beta * log_partition(env, beta, x)
            dev = abs(lhs + rlhf_objective(env, beta, policy, x))
            if not rlhf.observe(dev):
                _fail(failures, t, rlhf.name, dev, inst, prompt=x)
            via_kl = forward_kl(env, beta, policy, x) - optimal_ref_kl(env, beta, x)
            dev = abs(contrastive_term(env, beta, policy, x) - via_kl)
            if not cross.observe(dev):
                _fail(failures, t, cross.name, dev, inst, prompt=x)
    return _finish("identities", trials, [rlhf, cross], failures)


def _suite_beta_limit(trials: int, seed: int) -> VerificationSuiteResult:
    beta = 1e-3
    limit = CheckResult("estimate_matches_cal_dpo", 1e-9)
    saturation = CheckResult("chosen_weight_saturates", 1e-10)
    spec = LossSpec(Method.CAL_DPO, beta)
    failures: list[dict] = []
    for t in range(trials):
        inst = random_instance(seed, t, beta=beta)
        pair = inst.random_pair(oracle="convention")
        estimate = empirical_population_estimate(inst.env, beta, inst.policy, pair)
        exact = cal_pair_loss(spec, inst.policy, inst.env, pair).value
        dev = abs(estimate - exact)
        if not limit.observe(dev):
            _fail(failures, t, limit.name, dev, inst)
        w_chosen, _ = soft_weights(pair.oracle_reward_chosen, pair.oracle_reward_rejected, beta)
        dev = abs(1.0 - w_chosen)
        if not saturation.observe(dev):
            _fail(failures, t, saturation.name, dev, inst)
    return _finish("beta_limit", trials, [limit, saturation], failures)


def _suite_theorem2(trials: int, seed: int) -> VerificationSuiteResult:
    tol = 1e-12
    prompts = raw_prompt = corr_prompt = raw_inst = corr_inst = 0
    min_raw = min_corr = math.inf
    for t in range(trials):
        inst = random_instance(seed, t)
        diag = theorem2_diagnostic(inst.env, inst.beta, inst.policy, tolerance=tol)
        prompts += len(diag.reports)
        raw_prompt += diag.raw_violations
        corr_prompt += diag.corrected_violations
        raw_inst += diag.raw_violations > 0
        corr_inst += diag.corrected_violations > 0
        min_raw = min(min_raw, diag.min_raw_gap)
        min_corr = min(min_corr, diag.min_corrected_gap)

    cx = counterexample_instance(seed)
    cx_diag = theorem2_diagnostic(cx.env, cx.beta, cx.policy, tolerance=tol)
    counterexample = {
        "description": "pi_theta = pi*, rewards shifted so log Z = 0",
        "known_negative_raw_gap": True,
        "beta": cx.beta,
        "prompts": [
            {
                "prompt": r.prompt,
                "reverse_kl": r.reverse_kl,
                "calibration_term": r.calibration_term,
                "log_partition": r.log_partition,
                "theorem2_gap_raw": r.theorem2_gap_raw,
                "theorem2_gap_corrected": r.theorem2_gap_corrected,
                "minus_optimal_ref_kl": -r.optimal_ref_kl,
            }
            for r in cx_diag.reports
        ],
        "raw_gap_negative": all(r.theorem2_gap_raw < 0 for r in cx_diag.reports),
        "corrected_gap_max_abs": max(abs(r.theorem2_gap_corrected) for r in cx_diag.reports),
    }
    stats = {
        "random_instances": trials,
        "random_prompts": prompts,
        "violation_tolerance": tol,
        "raw_gap_violations_prompts": raw_prompt,
        "raw_gap_violation_rate_prompts": raw_prompt / prompts if prompts else 0.0,
        "raw_gap_violations_instances": raw_inst,
        "raw_gap_violation_rate_instances": raw_inst / trials if trials else 0.0,
        "corrected_gap_violations_prompts": corr_prompt,
        "corrected_gap_violation_rate_prompts": corr_prompt / prompts if prompts else 0.0,
        "corrected_gap_violations_instances": corr_inst,
        "corrected_gap_violation_rate_instances": corr_inst / trials if trials else 0.0,
        "min_raw_gap": min_raw,
        "min_corrected_gap": min_corr,
        "counterexample": counterexample,
    }
    diag_check = CheckResult("corrected_gap_violation_magnitude", math.inf, max(0.0, -min_corr), prompts)
    return VerificationSuiteResult(
        name="theorem2",
        instances=trials,
        max_deviation=diag_check.max_deviation,
        tolerance=math.inf,
        passed=True,
        asserting=False,
        checks=[diag_check],
        statistics=stats,
    )


_RUNNERS = {
    "gradients": _suite_gradients,
    "theorem1": _suite_theorem1,
    "theorem2": _suite_theorem2,
    "identities": _suite_identities,
    "beta_limit": _suite_beta_limit,
}


def run_suite(name: str, trials: int, seed: int) -> VerificationSuiteResult:
    """Run one named suite over ``trials`` seeded random instances."""
    if name not in _RUNNERS:
        raise InvalidInputError(f"unknown suite {name!r}; choose from {SUITES}")
    if int(trials) < 1:
        raise InvalidInputError("trials must be at least 1")
    return _RUNNERS[name](int(trials), int(seed))
