"""Acceptance gate: ten criteria, each at its stated tolerance and runtime bound.

Run with pytest, or directly (``python tests/test_acceptance.py``) for a
one-line-per-criterion summary.
"""

from __future__ import annotations

import contextlib
import io
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from prefcal.cli import main as cli_main
from prefcal.envcore import Environment, PolicyParams, log_partition, normalize_rewards, optimal_policy
from prefcal.fixtures import standard_fixture
from prefcal.losses import LossSpec, Method
from prefcal.population import (
    calibration_term,
    contrastive_gradient_direct,
    contrastive_term,
    forward_kl,
    optimal_ref_kl,
    reverse_kl,
    rlhf_objective,
    theorem1_gradient,
)
from prefcal.trainer import TrainConfig, train
from prefcal.verify import random_environment, random_instance, relative_error, run_suite

SEED = 2024


def report(number: int, title: str, passed: bool, detail: str) -> None:
    print(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


# -- criteria ---------------------------------------------------------------


def criterion_1():
    res, secs = timed(lambda: run_suite("gradients", 100, SEED))
    ok = res.passed and res.max_deviation < 1e-6 and secs < 30
    return ok, f"max relative deviation {res.max_deviation:.2e} (< 1e-6) over {len(res.checks)} checks, {secs:.2f}s (< 30s)"


def criterion_2():
    def run():
        worst = 0.0
        rng = np.random.default_rng(SEED)
        for _ in range(10):
            env = random_environment(rng)
            beta = float(10 ** rng.uniform(-2, 0))
            const = [optimal_ref_kl(env, beta, x) for x in range(env.n_prompts)]
            for _ in range(100):
                pol = PolicyParams.gaussian(env, 1.0, rng)
                for x in range(env.n_prompts):
                    dev = abs(contrastive_term(env, beta, pol, x) - forward_kl(env, beta, pol, x) + const[x])
                    worst = max(worst, dev)
        return worst

    worst, secs = timed(run)
    return worst < 1e-9 and secs < 10, f"max deviation {worst:.2e} (< 1e-9) on 10 envs x 100 thetas, {secs:.2f}s (< 10s)"


def criterion_3():
    def run():
        worst = 0.0
        for t in range(100):
            inst = random_instance(SEED, t)
            for x in range(inst.env.n_prompts):
                a = theorem1_gradient(inst.env, inst.beta, inst.policy, x)
                b = contrastive_gradient_direct(inst.env, inst.beta, inst.policy, x)
                worst = max(worst, relative_error(a, b))
        return worst

    worst, secs = timed(run)
    return worst < 1e-8 and secs < 10, f"max relative error {worst:.2e} (< 1e-8) on 100 instances, {secs:.2f}s (< 10s)"


def criterion_4():
    def run():
        worst = 0.0
        for t in range(100):
            inst = random_instance(SEED + 1, t)
            env, pol, beta = inst.env, inst.policy, inst.beta
            for x in range(env.n_prompts):
                lhs = beta * reverse_kl(env, beta, pol, x) - beta * log_partition(env, beta, x)
                worst = max(worst, abs(lhs + rlhf_objective(env, beta, pol, x)))
        return worst

    worst, secs = timed(run)
    return worst < 1e-9 and secs < 10, f"max deviation {worst:.2e} (< 1e-9) on 100 instances, {secs:.2f}s (< 10s)"


def criterion_5():
    res, secs = timed(lambda: run_suite("beta_limit", 100, SEED))
    devs = {c.name: c.max_deviation for c in res.checks}
    ok = (
        devs["estimate_matches_cal_dpo"] < 1e-9
        and devs["chosen_weight_saturates"] < 1e-10
        and secs < 5
    )
    return ok, (
        f"estimate vs Cal-DPO {devs['estimate_matches_cal_dpo']:.2e} (< 1e-9), "
        f"weight gap {devs['chosen_weight_saturates']:.2e} (< 1e-10), {secs:.2f}s (< 5s)"
    )


def criterion_6():
    def run():
        fixture = standard_fixture(0)
        out = {}
        for method in (Method.DPO, Method.CAL_DPO):
            _, log = train(fixture.config(method), fixture.env, fixture.dataset, 0)
            out[method] = (log.first, log.final)
        return out

    out, secs = timed(run)
    (d0, d), (c0, c) = out[Method.DPO], out[Method.CAL_DPO]
    checks = {
        "DPO chosen < 0": d.chosen_reward_mean < 0,
        "Cal-DPO chosen > 0": c.chosen_reward_mean > 0,
        "DPO rejected < 0": d.rejected_reward_mean < 0,
        "Cal-DPO rejected < 0": c.rejected_reward_mean < 0,
        "DPO margin grows": d.margin_mean > d0.margin_mean,
        "Cal-DPO margin grows": c.margin_mean > c0.margin_mean,
        "runtime < 60s": secs < 60,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (
        f"DPO chosen {d.chosen_reward_mean:+.4f} rejected {d.rejected_reward_mean:+.4f}; "
        f"Cal-DPO chosen {c.chosen_reward_mean:+.4f} rejected {c.rejected_reward_mean:+.4f}; {secs:.2f}s"
    )
    if failed:
        detail += f"; unmet: {', '.join(failed)}"
    return not failed, detail


def criterion_7():
    rng = np.random.default_rng(SEED)
    beta = 1.0
    env = normalize_rewards(Environment.from_rows(rng.uniform(-1, 1, size=(3, 4))), beta)
    cfg = TrainConfig(LossSpec(Method.CAL_DPO, beta), steps=10000, learning_rate=0.1, objective="population",
                      init="zeros", log_every=10000)
    (_, log), secs = timed(lambda: train(cfg, env))
    rkl = log.final.reverse_kl_mean
    return rkl < 1e-3 and secs < 10, f"final reverse_kl_mean {rkl:.2e} (< 1e-3), {secs:.2f}s (< 10s)"


def criterion_8():
    rng = np.random.default_rng(SEED)
    beta = 0.5
    env = normalize_rewards(
        Environment.from_rows(rng.uniform(-1, 1, size=(3, 5)), rng.standard_normal((3, 5))), beta
    )
    cfg = TrainConfig(LossSpec(Method.CAL_DPO, beta), steps=3000, learning_rate=0.5, objective="population",
                      population_terms="calibration", log_every=3000)
    (pol, _), secs = timed(lambda: train(cfg, env))
    cal = max(calibration_term(env, beta, pol, x) for x in range(env.n_prompts))
    tv = max(0.5 * float(np.abs(pol.probs(x) - optimal_policy(env, beta, x)).sum()) for x in range(env.n_prompts))
    ok = cal < 1e-8 and tv < 1e-4 and secs < 10
    return ok, f"calibration term {cal:.2e} (< 1e-8), TV to pi* {tv:.2e} (< 1e-4), {secs:.2f}s (< 10s)"


def criterion_9():
    res, secs = timed(lambda: run_suite("theorem2", 1000, SEED))
    stats = res.statistics
    cx = stats["counterexample"]
    ok = (
        not res.asserting
        and res.passed
        and stats["random_instances"] >= 1000
        and cx["raw_gap_negative"]
        and cx["corrected_gap_max_abs"] < 1e-12
        and "raw_gap_violation_rate_prompts" in stats
        and "corrected_gap_violation_rate_prompts" in stats
        and secs < 30
    )
    return ok, (
        f"counterexample raw gap {min(p['theorem2_gap_raw'] for p in cx['prompts']):.3f} (< 0), "
        f"corrected {cx['corrected_gap_max_abs']:.1e}; raw violation rate "
        f"{stats['raw_gap_violation_rate_prompts']:.3f}, corrected {stats['corrected_gap_violation_rate_prompts']:.3f} "
        f"over {stats['random_instances']} instances, {secs:.2f}s (< 30s)"
    )


def criterion_10():
    def snapshot(out: Path, argv):
        with contextlib.redirect_stdout(io.StringIO()):
            code = cli_main([*argv, "--out", str(out)])
        return code, {p.name: p.read_bytes() for p in sorted(out.iterdir())}

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        runs = {}
        for tag in ("a", "b"):
            runs[("dynamics", tag)] = snapshot(tmp / f"dyn_{tag}", ["dynamics", "--seed", "3"])
            runs[("verify", tag)] = snapshot(tmp / f"ver_{tag}", ["verify", "--trials", "20", "--seed", "3"])
    same = all(runs[(c, "a")] == runs[(c, "b")] for c in ("dynamics", "verify"))
    codes = all(code == 0 for code, _ in runs.values())
    files = sum(len(f) for _, f in runs.values()) // 2
    return same and codes, f"{files} output files byte-identical across reruns: {same}"


CRITERIA = [
    (1, "gradient suite", criterion_1),
    (2, "first-term constant offset", criterion_2),
    (3, "contrast-weight gradient identity", criterion_3),
    (4, "reverse-KL / RLHF identity", criterion_4),
    (5, "small-beta limit of the population estimate", criterion_5),
    (6, "reward dynamics on the standard fixture", criterion_6),
    (7, "population convergence", criterion_7),
    (8, "calibration optimum", criterion_8),
    (9, "reverse-KL diagnostic completeness", criterion_9),
    (10, "determinism of dynamics and verify", criterion_10),
]


@pytest.mark.parametrize("number,title,fn", CRITERIA, ids=[f"criterion_{n}" for n, _, _ in CRITERIA])
def test_criterion(number, title, fn):
    ok, detail = fn()
    report(number, title, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    results = []
    for number, title, fn in CRITERIA:
        ok, detail = fn()
        report(number, title, ok, detail)
        results.append(ok)
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
