"""Command-line entry point: ``prefcal <command> [flags]``.

Precedence for every setting: built-in default, then the ``--config`` JSON
file, then command-line flags (last writer wins). The seed falls back to the
``PREFCAL_SEED`` environment variable, then 0.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical
divergence, 4 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

from prefcal import __version__
from prefcal.envcore import Environment
from prefcal.errors import ConfigurationError, DivergenceError, PrefCalError
from prefcal.fixtures import (
    FIXTURE_BETA,
    FIXTURE_LR,
    FIXTURE_PAIRS,
    FIXTURE_PROMPTS,
    FIXTURE_RESPONSES,
    FIXTURE_STEPS,
    REF_LAWS,
    REWARD_LAWS,
    build_environment,
    standard_fixture,
)
from prefcal.losses import BETA_GRID, Method
from prefcal.population import population_reports
from prefcal.prefdata import LABELINGS, PreferenceDataset, attach_oracle_rewards, sample_dataset
from prefcal.trainer import LOG_FIELDS, TrainConfig, TrainLog, beta_sweep, format_float, sweep_to_csv, train
from prefcal.verify import SUITES, report_json, run_suite

EXIT_OK, EXIT_USAGE, EXIT_DIVERGENCE, EXIT_VERIFY = 0, 2, 3, 4


class UsageError(ConfigurationError):
    pass


# -- io helpers -------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def default_seed() -> int:
    raw = os.environ.get("PREFCAL_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"PREFCAL_SEED must be an integer, got {raw!r}") from exc


def resolve_seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    return default_seed()


def _set(d: dict, key: str, value) -> None:
    if value is not None:
        d[key] = value


# -- environment and dataset specs ------------------------------------------


def resolve_env_spec(spec: dict, seed: int) -> dict:
    """Fill defaults; law seeds fall back to the run seed."""
    spec = copy.deepcopy(spec)
    if "path" in spec:
        return {"path": str(spec["path"])}
    reward = dict(spec.get("reward_law") or {"name": "gaussian"})
    ref = dict(spec.get("ref_law") or {"name": "uniform"})
    if reward.get("name") not in REWARD_LAWS:
        raise UsageError(f"reward_law.name must be one of {REWARD_LAWS}")
    if ref.get("name") not in REF_LAWS:
        raise UsageError(f"ref_law.name must be one of {REF_LAWS}")
    if reward["name"] == "gaussian":
        reward.setdefault("scale", 1.0)
        reward.setdefault("seed", seed)
    elif reward["name"] == "bimodal":
        reward.setdefault("gap", 2.0)
        reward.setdefault("seed", seed)
    elif "rewards" not in reward:
        raise UsageError("reward_law 'table' needs a 'rewards' list of rows")
    if ref["name"] == "gaussian_logits":
        ref.setdefault("scale", 1.0)
        ref.setdefault("seed", seed)
    out = {"reward_law": reward, "ref_law": ref}
    if reward["name"] != "table":
        out["prompts"] = int(spec.get("prompts", FIXTURE_PROMPTS))
        out["responses"] = int(spec.get("responses", FIXTURE_RESPONSES))
    return out


def build_env(spec: dict) -> Environment:
    if "path" in spec:
        try:
            return Environment.load(spec["path"])
        except OSError as exc:
            raise UsageError(f"cannot read environment {spec['path']}: {exc.strerror}") from exc
    reward, ref = spec["reward_law"], spec["ref_law"]
    return build_environment(
        spec.get("prompts", 0),
        spec.get("responses", 0),
        reward["name"],
        ref["name"],
        reward_scale=float(reward.get("scale", 1.0)),
        gap=float(reward.get("gap", 2.0)),
        reward_seed=int(reward.get("seed", 0)),
        reward_table=reward.get("rewards"),
        ref_scale=float(ref.get("scale", 1.0)),
        ref_seed=int(ref.get("seed", 0)),
    )


def resolve_data_spec(spec: dict, seed: int) -> dict:
    spec = dict(spec)
    if "path" in spec:
        return {"path": str(spec["path"]), "oracle_rewards": spec.get("oracle_rewards")}
    spec.setdefault("n_pairs", FIXTURE_PAIRS)
    spec.setdefault("seed", seed)
    spec.setdefault("labeling", "bt")
    spec.setdefault("oracle_rewards", None)
    if spec["labeling"] not in LABELINGS:
        raise UsageError(f"dataset labeling must be one of {LABELINGS}")
    if spec["oracle_rewards"] not in (None, "env", "convention"):
        raise UsageError("dataset oracle_rewards must be null, 'env' or 'convention'")
    if int(spec["n_pairs"]) < 1:
        raise UsageError("n_pairs must be at least 1")
    return spec


def build_data(spec: dict, env: Environment) -> PreferenceDataset:
    if "path" in spec:
        try:
            data = PreferenceDataset.load(spec["path"])
        except OSError as exc:
            raise UsageError(f"cannot read dataset {spec['path']}: {exc.strerror}") from exc
    else:
        data = sample_dataset(env, int(spec["n_pairs"]), int(spec["seed"]), spec["labeling"])
    data.validate(env)
    if spec.get("oracle_rewards"):
        data = attach_oracle_rewards(data, env, spec["oracle_rewards"])
    return data


def resolve_train_config(cfg: dict, args) -> TrainConfig:
    train_cfg = copy.deepcopy(cfg.get("train", {}))
    loss = dict(train_cfg.get("loss", {}))
    loss.setdefault("method", "CAL_DPO")
    loss.setdefault("beta", FIXTURE_BETA)
    _set(loss, "method", getattr(args, "method", None))
    _set(loss, "beta", getattr(args, "beta", None))
    train_cfg["loss"] = loss
    train_cfg.setdefault("steps", FIXTURE_STEPS)
    train_cfg.setdefault("learning_rate", FIXTURE_LR)
    _set(train_cfg, "steps", getattr(args, "steps", None))
    _set(train_cfg, "learning_rate", getattr(args, "lr", None))
    return TrainConfig.from_dict(train_cfg)


def resolve_out(args, cfg: dict, default: str = ".") -> Path:
    return Path(args.out if args.out is not None else cfg.get("out", default))


# -- commands ---------------------------------------------------------------


def cmd_gen_env(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    spec = dict(cfg.get("environment", cfg))
    spec.pop("out", None)
    spec.pop("seed", None)
    _set(spec, "prompts", args.prompts)
    _set(spec, "responses", args.responses)
    if args.reward_law is not None:
        spec["reward_law"] = {"name": args.reward_law}
    if args.ref_law is not None:
        spec["ref_law"] = {"name": args.ref_law}
    reward = dict(spec.get("reward_law") or {"name": "gaussian"})
    _set(reward, "scale", args.reward_scale)
    _set(reward, "gap", args.gap)
    if args.reward_table is not None:
        reward["rewards"] = load_config_value(args.reward_table)
    spec["reward_law"] = reward
    ref = dict(spec.get("ref_law") or {"name": "uniform"})
    _set(ref, "scale", args.ref_scale)
    spec["ref_law"] = ref

    if reward.get("name") != "table":
        for key in ("prompts", "responses"):
            if key not in spec:
                raise UsageError(f"gen-env needs --{key}")
        if int(spec["prompts"]) < 1 or int(spec["responses"]) < 2:
            raise UsageError("need at least 1 prompt and 2 responses")
    resolved = resolve_env_spec(spec, seed)
    env = build_env(resolved)
    out = resolve_out(args, cfg)
    atomic_write(out / "environment.json", env.to_json())
    atomic_write(
        out / "manifest.json",
        dump_json({"command": "gen-env", "version": __version__, "seed": seed, "environment": resolved,
                   "environment_fingerprint": env.fingerprint}),
    )
    print(out / "environment.json")
    return EXIT_OK


def load_config_value(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    env_spec = dict(cfg.get("environment", {}))
    if args.env is not None:
        env_spec = {"path": args.env}
    if not env_spec:
        raise UsageError("gen-data needs --env or an 'environment' config section")
    data_spec = dict(cfg.get("dataset", {}))
    _set(data_spec, "n_pairs", args.n_pairs)
    _set(data_spec, "labeling", args.labeling)
    _set(data_spec, "oracle_rewards", args.oracle_rewards)
    if args.seed is not None:
        data_spec["seed"] = args.seed
    env = build_env(resolve_env_spec(env_spec, seed))
    resolved = resolve_data_spec(data_spec, seed)
    data = build_data(resolved, env)
    out = resolve_out(args, cfg)
    atomic_write(out / "dataset.jsonl", data.to_jsonl())
    print(out / "dataset.jsonl")
    return EXIT_OK


def _experiment(args, cfg: dict):
    seed = resolve_seed(args, cfg)
    env_spec = resolve_env_spec(cfg.get("environment", {}), seed)
    env = build_env(env_spec)
    tc = resolve_train_config(cfg, args)
    data_spec = data = None
    if tc.objective == "empirical" or "dataset" in cfg:
        data_spec = resolve_data_spec(cfg.get("dataset", {}), seed)
        data = build_data(data_spec, env)
    return seed, env_spec, env, data_spec, data, tc


def _manifest(command: str, seed: int, env_spec, env: Environment, data_spec, data, extra: dict) -> str:
    doc = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "environment": env_spec,
        "environment_fingerprint": env.fingerprint,
        "dataset": None if data is None else {**data_spec, **data.header(), "n_pairs": len(data)},
        **extra,
    }
    return dump_json(doc)


def population_report_csv(env: Environment, beta: float, policy) -> str:
    reports = population_reports(env, beta, policy)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = list(reports[0].as_row())
    writer.writerow(names)
    for r in reports:
        row = r.as_row()
        writer.writerow([row["prompt"]] + [format_float(row[k]) for k in names[1:]])
    return buf.getvalue()


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed, env_spec, env, data_spec, data, tc = _experiment(args, cfg)
    out = resolve_out(args, cfg)
    policy, log = train(tc, env, data, seed)
    atomic_write(out / "train_log.csv", log.to_csv())
    atomic_write(
        out / "final_policy.json",
        dump_json({"environment_fingerprint": env.fingerprint, "logits": policy.rows()}),
    )
    atomic_write(out / "population_report.csv", population_report_csv(env, tc.loss.beta, policy))
    atomic_write(out / "manifest.json", _manifest("train", seed, env_spec, env, data_spec, data, {"train": tc.to_dict()}))
    f = log.final
    print(f"step={f.step} loss={format_float(f.loss)} margin={format_float(f.margin_mean)} -> {out}")
    return EXIT_OK


def cmd_sweep_beta(args) -> int:
    cfg = load_config(args.config)
    seed, env_spec, env, data_spec, data, tc = _experiment(args, cfg)
    betas = args.betas if args.betas is not None else cfg.get("sweep", {}).get("betas", list(BETA_GRID))
    out = resolve_out(args, cfg)
    rows = beta_sweep(tc, betas, env, data, seed)
    atomic_write(out / "sweep.csv", sweep_to_csv(rows))
    atomic_write(
        out / "manifest.json",
        _manifest("sweep-beta", seed, env_spec, env, data_spec, data,
                  {"train": tc.to_dict(), "sweep": {"betas": [float(b) for b in betas]}}),
    )
    print(out / "sweep.csv")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    suites = args.suites if args.suites else cfg.get("suites", list(SUITES))
    trials = args.trials if args.trials is not None else int(cfg.get("trials", 100))
    unknown = [s for s in suites if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suites {unknown}; choose from {list(SUITES)}")
    if not suites:
        raise UsageError("choose at least one suite")
    if trials < 1:
        raise UsageError("--trials must be at least 1")
    results = [run_suite(name, trials, seed) for name in suites]
    out = resolve_out(args, cfg)
    atomic_write(out / "verify_report.json", report_json(results))
    atomic_write(
        out / "manifest.json",
        dump_json({"command": "verify", "version": __version__, "seed": seed, "suites": list(suites), "trials": trials}),
    )
    failed = False
    for r in results:
        status = "pass" if r.passed else ("FAIL" if r.asserting else "diagnostic")
        print(f"{r.name}: {status} max_deviation={r.max_deviation:.3e} tolerance={r.tolerance:.3e}")
        failed |= r.asserting and not r.passed
    return EXIT_VERIFY if failed else EXIT_OK


def dynamics_csv(logs: dict[str, TrainLog]) -> str:
    """Both runs' logs joined on step, columns prefixed by method."""
    names = list(logs)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step"] + [f"{m.lower()}_{f}" for m in names for f in LOG_FIELDS[1:]])
    for rows in zip(*(logs[m].rows for m in names)):
        writer.writerow([rows[0].step] + [format_float(getattr(r, f)) for r in rows for f in LOG_FIELDS[1:]])
    return buf.getvalue()


def cmd_dynamics(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    params = {
        "beta": FIXTURE_BETA,
        "learning_rate": FIXTURE_LR,
        "steps": FIXTURE_STEPS,
        "prompts": FIXTURE_PROMPTS,
        "responses": FIXTURE_RESPONSES,
        "n_pairs": FIXTURE_PAIRS,
        "labeling": "bt",
        "reward_scale": 1.0,
        "log_every": 1,
    }
    unknown = set(cfg) - set(params) - {"seed", "out"}
    if unknown:
        raise UsageError(f"unknown dynamics config fields: {sorted(unknown)}")
    params.update({k: v for k, v in cfg.items() if k in params})
    _set(params, "beta", args.beta)
    _set(params, "learning_rate", args.lr)
    _set(params, "steps", args.steps)
    log_every = int(params.pop("log_every"))
    fixture = standard_fixture(seed, **params)
    logs, configs = {}, {}
    for method in (Method.DPO, Method.CAL_DPO):
        configs[method.value] = fixture.config(method, log_every)
        _, logs[method.value] = train(configs[method.value], fixture.env, fixture.dataset, seed)
    out = resolve_out(args, cfg)
    atomic_write(out / "dynamics.csv", dynamics_csv(logs))
    for name, log in logs.items():
        atomic_write(out / f"train_log_{name.lower()}.csv", log.to_csv())
    atomic_write(
        out / "manifest.json",
        dump_json({"command": "dynamics", "version": __version__, "seed": seed,
                   "fixture": {**params, "log_every": log_every},
                   "train": {name: c.to_dict() for name, c in configs.items()},
                   "environment_fingerprint": fixture.env.fingerprint}),
    )
    for name, log in logs.items():
        f = log.final
        print(
            f"{name}: chosen={format_float(f.chosen_reward_mean)} rejected={format_float(f.rejected_reward_mean)}"
            f" margin={format_float(f.margin_mean)}"
        )
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser, train_flags: bool = False) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON config file; flags override its fields")
    p.add_argument("--seed", type=int, help="run seed (default: config, then $PREFCAL_SEED, then 0)")
    p.add_argument("--out", metavar="DIR", help="output directory (default: config 'out', then .)")
    if train_flags:
        p.add_argument("--beta", type=float, help="loss beta")
        p.add_argument("--method", choices=[m.value for m in Method], help="loss method")
        p.add_argument("--steps", type=int, help="gradient steps")
        p.add_argument("--lr", type=float, help="learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefcal", description="Calibrated preference optimization on tabular policies.")
    parser.add_argument("--version", action="version", version=f"prefcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-env", help="write a synthetic environment.json")
    _common(p)
    p.add_argument("--prompts", type=int, help="number of prompts (>= 1)")
    p.add_argument("--responses", type=int, help="responses per prompt (>= 2)")
    p.add_argument("--reward-law", choices=REWARD_LAWS, help="reward generator (default gaussian)")
    p.add_argument("--reward-scale", type=float, help="std of gaussian rewards (default 1)")
    p.add_argument("--gap", type=float, help="bimodal gap between the two top responses and the rest (default 2)")
    p.add_argument("--reward-table", metavar="PATH", help="JSON list of reward rows for --reward-law table")
    p.add_argument("--ref-law", choices=REF_LAWS, help="reference policy law (default uniform)")
    p.add_argument("--ref-scale", type=float, help="std of gaussian reference logits (default 1)")
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("gen-data", help="sample a preference dataset.jsonl from an environment")
    _common(p)
    p.add_argument("--env", metavar="PATH", help="environment JSON file")
    p.add_argument("--n-pairs", type=int, help="number of pairs (default 2000)")
    p.add_argument("--labeling", choices=LABELINGS, help="bt (default) or hard")
    p.add_argument("--oracle-rewards", choices=("env", "convention"), help="attach oracle rewards to each pair")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one policy and write logs, final policy and population report")
    _common(p, train_flags=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-beta", help="train once per beta and write sweep.csv")
    _common(p, train_flags=True)
    p.add_argument("--betas", type=float, nargs="+", help=f"beta grid (default {list(BETA_GRID)})")
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("verify", help="run verification suites and write verify_report.json")
    _common(p)
    p.add_argument("--trials", type=int, help="random instances per suite (default 100)")
    p.add_argument("--suites", nargs="+", metavar="SUITE", help=f"subset of {list(SUITES)} (default all)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("dynamics", help="paired DPO / CAL_DPO run on the standard fixture")
    _common(p)
    p.add_argument("--beta", type=float, help=f"loss beta (default {FIXTURE_BETA})")
    p.add_argument("--steps", type=int, help=f"gradient steps (default {FIXTURE_STEPS})")
    p.add_argument("--lr", type=float, help=f"learning rate (default {FIXTURE_LR})")
    p.set_defaults(func=cmd_dynamics)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"prefcal: divergence at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (PrefCalError, ValueError, TypeError, KeyError) as exc:
        print(f"prefcal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
