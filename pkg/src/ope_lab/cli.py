"""Command-line entry point.

    ope-lab bandit-demo    --config cfg.yaml --out out/
    ope-lab sweep          --config cfg.yaml --workers 4
    ope-lab select-history --config cfg.yaml
    ope-lab truth          --config cfg.yaml
    ope-lab simulate       --config cfg.yaml

Config files are YAML with the sections below; unknown keys are rejected and
the merged configuration is written to ``resolved_config.yaml`` in the output
directory.  Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .analysis import (
    BANDIT_MODES,
    ORACLE,
    EstimatorConfig,
    run_bandit_sweep,
    run_sweep,
    select_from_variances,
    select_history,
)
from .environments import (
    BanditSpec,
    CartPoleSpec,
    Dataset,
    StateTablePolicy,
    TabularMDPSpec,
    default_bandit,
    exact_value,
    monte_carlo_value,
    q_function,
    reference_mdp,
    sample,
    sample_bandit_dataset,
    sample_trajectories,
)
from .estimators import QFunction
from .policies import DEFAULT_MIX, PolynomialLagFeatures, TabularLagFeatures, sieve_features


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "environment": {"kind": "reference_mdp"},
    "policy": {"ks": [ORACLE, 0, 1, 2], "mix": DEFAULT_MIX, "features": "default", "max_degree": 3},
    "estimator": {"kinds": ["ois", "sis", "dr", "mis"], "q_mode": "exact", "q_offset": 0.0, "ridge": 1e-8},
    "sweep": {"ns": [1000], "replications": 200, "seed": 0},
    "select": {
        "dataset": None,
        "n": 1000,
        "estimator": "sis",
        "candidates": [0, 1, 2],
        "variance_estimator": "bootstrap",
        "bootstrap_samples": 200,
        "variances": None,
    },
    "truth": {"episodes": 100000, "discount": None},
    "simulate": {"n": 1000},
    "output": {"directory": "ope_lab_out"},
    "workers": None,
}

ENV_KEYS = {
    "bandit": {"kind", "context_probs", "reward_mean", "behavior_probs", "target_probs", "reward_noise_sd"},
    "reference_mdp": {"kind", "horizon", "reward_noise_sd"},
    "tabular": {"kind", "transition", "reward_mean", "initial_dist", "horizon", "discount", "reward_noise_sd", "behavior", "target"},
    "cartpole": {"kind"} | set(CartPoleSpec.__dataclass_fields__),
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "environment":
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: Optional[str]) -> dict:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping")
    cfg = _merge(DEFAULTS, raw)
    env = cfg["environment"]
    if not isinstance(env, dict) or env.get("kind") not in ENV_KEYS:
        raise ConfigError(f"environment.kind must be one of {sorted(ENV_KEYS)}")
    extra = set(env) - ENV_KEYS[env["kind"]]
    if extra:
        raise ConfigError(f"unknown environment keys for kind {env['kind']!r}: {sorted(extra)}")
    return cfg


def apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        cfg["sweep"]["seed"] = args.seed
    if args.out is not None:
        cfg["output"]["directory"] = args.out
    if args.replications is not None:
        cfg["sweep"]["replications"] = args.replications
    if args.workers is not None:
        cfg["workers"] = args.workers
    elif cfg["workers"] is None:
        env = os.environ.get("OPE_LAB_WORKERS")
        cfg["workers"] = int(env) if env else (os.cpu_count() or 1)
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# building blocks from config


def build_environment(env: dict):
    """(spec, behavior, target) for the configured environment."""
    kind = env["kind"]
    fields = {k: v for k, v in env.items() if k != "kind"}
    if kind == "bandit":
        base = default_bandit().to_dict()
        base.pop("kind")
        base.update(fields)
        spec = BanditSpec(**base)
        return spec, spec.behavior, spec.target
    if kind == "reference_mdp":
        return reference_mdp(**fields)
    if kind == "tabular":
        try:
            behavior = StateTablePolicy(np.asarray(fields.pop("behavior"), dtype=float))
            target = StateTablePolicy(np.asarray(fields.pop("target"), dtype=float))
        except KeyError as exc:
            raise ConfigError(f"tabular environment needs {exc.args[0]!r}") from exc
        return TabularMDPSpec(**fields), behavior, target
    spec = CartPoleSpec(**fields)
    return spec, spec.behavior, spec.target


def build_estimators(cfg: dict, spec, target) -> list[EstimatorConfig]:
    est = cfg["estimator"]
    kinds = est["kinds"]
    if not kinds:
        raise ConfigError("estimator.kinds is empty")
    out = []
    for kind in kinds:
        if kind not in ("ois", "sis", "dr", "mis"):
            raise ConfigError(f"unknown estimator kind {kind!r}")
        q = None
        if kind == "dr":
            mode, offset = est["q_mode"], float(est["q_offset"])
            if mode == "zero":
                q = QFunction("zero", offset=offset)
            elif mode == "exact":
                if not isinstance(spec, TabularMDPSpec):
                    raise ConfigError("q_mode 'exact' needs a tabular environment")
                q = QFunction.tabular(q_function(spec, target), offset)
            else:
                raise ConfigError(f"unknown q_mode {mode!r}")
        out.append(EstimatorConfig(kind, kind, q, float(est["ridge"])))
    return out


def _parse_ks(ks: Sequence) -> list:
    out = []
    for k in ks:
        if k == ORACLE:
            out.append(ORACLE)
        elif isinstance(k, int) and k >= 0:
            out.append(k)
        else:
            raise ConfigError(f"history lengths must be 'oracle' or non-negative integers, got {k!r}")
    if not out:
        raise ConfigError("policy.ks is empty")
    return out


def build_features(cfg: dict, spec, n: int):
    choice = cfg["policy"]["features"]
    if isinstance(spec, TabularMDPSpec):
        return TabularLagFeatures(spec.num_states, spec.num_actions)
    if choice == "sieve":
        return sieve_features(4, n, int(cfg["policy"]["max_degree"]))
    if choice == "default":
        return PolynomialLagFeatures(4, 2)
    raise ConfigError(f"unknown policy.features {choice!r}")


# ---------------------------------------------------------------------------
# commands


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: dict, out: Path, command: str) -> None:
    snap = {"command": command, **copy.deepcopy(cfg)}
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(snap, sort_keys=True))


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")


def cmd_bandit_demo(cfg: dict) -> int:
    env = cfg["environment"] if cfg["environment"]["kind"] == "bandit" else {"kind": "bandit"}
    spec, _, _ = build_environment(env)
    sw = cfg["sweep"]
    ns = [int(n) for n in sw["ns"]]
    reps = int(sw["replications"])
    if reps < 2:
        raise ConfigError("replications must be >= 2 (variance undefined otherwise)")
    report = run_bandit_sweep(spec, ns, reps, int(sw["seed"]), int(cfg["workers"]))
    out = _out_dir(cfg)
    with open(out / "bandit_demo.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "estimator", "log_abs_bias", "log_mse"])
        for n in ns:
            for mode in BANDIT_MODES:
                r = report.row(mode, ORACLE if mode == "oracle" else 0, n)
                lab = math.log(abs(r.bias)) if r.bias != 0 else -math.inf
                w.writerow([n, mode, repr(lab), repr(math.log(r.mse))])
    report.to_csv(out / "bandit_sweep.csv")
    _snapshot(cfg, out, "bandit-demo")
    big = max(ns)
    mse = {m: report.row(m, ORACLE if m == "oracle" else 0, big).mse for m in BANDIT_MODES}
    print(f"n={big}: " + ", ".join(f"MSE({m})={v:.6g}" for m, v in mse.items()))
    return 0


def cmd_sweep(cfg: dict) -> int:
    spec, behavior, target = build_environment(cfg["environment"])
    if isinstance(spec, BanditSpec):
        raise ConfigError("use bandit-demo for the bandit environment")
    estimators = build_estimators(cfg, spec, target)
    ks = _parse_ks(cfg["policy"]["ks"])
    sw = cfg["sweep"]
    ns = [int(n) for n in sw["ns"]]
    reps = int(sw["replications"])
    if reps < 2:
        raise ConfigError("replications must be >= 2 (variance undefined otherwise)")
    features = build_features(cfg, spec, min(ns))
    report = run_sweep(spec, behavior, target, estimators, ks, ns, reps, int(sw["seed"]),
                       features=features, workers=int(cfg["workers"]), mix=float(cfg["policy"]["mix"]))
    out = _out_dir(cfg)
    report.to_csv(out / "sweep.csv")
    cells = [
        {"estimator": r.estimator, "k": r.k, "n": r.n, "failures": r.failures, "valid": r.valid}
        for r in report.rows
    ]
    _write_json(out / "sweep_diagnostics.json", {"truth": report.truth, "truth_se": report.truth_se, "cells": cells})
    _snapshot(cfg, out, "sweep")
    for r in report.rows:
        flag = "" if r.valid else "  INVALID"
        print(f"{r.estimator:>4} k={str(r.k):>6} n={r.n:<6} bias={r.bias:+.4f} var={r.variance:.5f} mse={r.mse:.5f}{flag}")
    return 0


def cmd_select_history(cfg: dict) -> int:
    sel = cfg["select"]
    cands = [int(h) for h in sel["candidates"]]
    if not cands:
        raise ConfigError("select.candidates is empty")
    out = _out_dir(cfg)
    if sel["variances"] is not None:
        result = select_from_variances(cands, [float(v) for v in sel["variances"]], int(sel["n"]))
    else:
        spec, behavior, target = build_environment(cfg["environment"])
        if isinstance(spec, BanditSpec):
            raise ConfigError("history selection needs an MDP environment")
        if sel["dataset"] is not None:
            path = Path(sel["dataset"])
            if not path.exists():
                raise ConfigError(f"dataset not found: {path}")
            data = Dataset.from_csv(path)
        else:
            data = sample_trajectories(spec, behavior, int(sel["n"]), int(cfg["sweep"]["seed"]))
        est = build_estimators({"estimator": {**cfg["estimator"], "kinds": [sel["estimator"]]}}, spec, target)[0]
        result = select_history(
            data, target, est, cands, sel["variance_estimator"], int(sel["bootstrap_samples"]),
            int(cfg["sweep"]["seed"]), spec.discount if hasattr(spec, "discount") else 1.0,
            build_features(cfg, spec, len(data)),
        )
    _write_json(out / "history_selection.json", result.to_dict())
    _snapshot(cfg, out, "select-history")
    print(f"{'h':>3} {'var_hat':>12} {'objective':>12}")
    for h, v, o in zip(result.candidates, result.var_hat, result.objective):
        print(f"{h:>3} {v:>12.6g} {o:>12.6g}")
    print(f"h* = {result.h_star}")
    return 0


def cmd_truth(cfg: dict) -> int:
    spec, _, target = build_environment(cfg["environment"])
    tr = cfg["truth"]
    episodes = int(tr["episodes"])
    default_gamma = getattr(spec, "discount", 1.0)
    gamma = float(default_gamma if tr["discount"] is None else tr["discount"])
    mc = monte_carlo_value(spec, target, episodes, gamma, int(cfg["sweep"]["seed"]))
    payload = {"value": mc.value, "se": mc.se, "episodes": mc.episodes, "discount": gamma}
    if isinstance(spec, BanditSpec):
        payload["exact"] = spec.true_value()
    elif isinstance(spec, TabularMDPSpec):
        payload["exact"] = exact_value(spec, target, gamma)
    out = _out_dir(cfg)
    _write_json(out / "truth.json", payload)
    _snapshot(cfg, out, "truth")
    print(f"value = {mc.value:.6g} +/- {mc.se:.3g} ({episodes} episodes)")
    return 0


def cmd_simulate(cfg: dict) -> int:
    spec, behavior, _ = build_environment(cfg["environment"])
    n = int(cfg["simulate"]["n"])
    if isinstance(spec, BanditSpec):
        data = sample_bandit_dataset(spec, n, int(cfg["sweep"]["seed"]))
    else:
        data = sample(spec, behavior, n, int(cfg["sweep"]["seed"]))
    out = _out_dir(cfg)
    data.to_csv(out / "dataset.csv", spec)
    _snapshot(cfg, out, "simulate")
    print(f"wrote {n} trajectories to {out / 'dataset.csv'}")
    return 0


COMMANDS = {
    "bandit-demo": cmd_bandit_demo,
    "sweep": cmd_sweep,
    "select-history": cmd_select_history,
    "truth": cmd_truth,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ope-lab", description="Off-policy evaluation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="worker processes (env OPE_LAB_WORKERS)")
        p.add_argument("--replications", type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
