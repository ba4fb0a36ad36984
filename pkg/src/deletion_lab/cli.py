"""Command-line runner: ``deletion-lab <kind> [options]``.

Every run starts from the kind's default config, merges an optional YAML or
JSON config file, then applies flags and ``--set a.b.c=value`` overrides.
Outputs (CSV, JSON, JSONL) and a manifest land under ``--out``.

Exit codes: 0 success, 1 soundness violation found, 2 invalid configuration,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .numerics import NumericsError, make_rng

log = logging.getLogger("deletion_lab")

SCHEMA_VERSION = 1
KINDS = ("train-adaptive", "sweep-alpha", "ablate-strategies", "verify-theorem",
         "corollary-sweep", "extra-class", "survival-table")


class ConfigError(ValueError):
    pass


# -- defaults ---------------------------------------------------------------------------

_RL = {
    "env": "pendulum",
    "spec": {},
    "contexts": {"train": 40, "eval": 15, "seed": 123},
    "controller": "analytic",
    "search": {"population": 64, "elites": 8, "iterations": 60, "episodes": 2, "hidden": 32},
    "plan": {"rounds": 6, "episodes_per_round": 50, "strategy": "random", "alpha": 1.0, "refresh": 1,
             "estimator": {"arch": "mlp", "k": 4, "widths": [128, 32, 32], "hidden": 32},
             "train": {"lr": 0.01, "batch_size": 64, "steps": 1000, "momentum": 0.9, "clip_norm": 5.0}},
    "eval_episodes": 4,
    "eval_seed": 0,
}

DEFAULTS = {
    "train-adaptive": {**_RL, "seeds": [0]},
    "sweep-alpha": {**_RL, "seeds": [0, 1, 2, 3, 4], "alphas": [0.5, 0.8, 0.9, 1.0]},
    "ablate-strategies": {**_RL, "seeds": [0, 1, 2, 3, 4], "alpha": 0.8,
                          "strategies": ["stale", "random", "uniform"]},
    "verify-theorem": {"seeds": [7], "instances": 100, "instances_file": None,
                       "sources": ["corollary", "shifted-ridge", "shifted-logistic",
                                   "coherent-ridge", "coherent-logistic"],
                       "corollary": {"d": 5, "N": 50, "R": 1.0, "snr_range": [1e-6, 5e-5],
                                     "k1": 0.05, "k2": 0.1, "k3": 0.05}},
    "corollary-sweep": {"seeds": [0], "instances": 500, "d": 5, "N": 50, "R": 1.0,
                        "snr_range": [1e-6, 5e-5], "placement_range": [0.05, 0.95],
                        "k1": 0.05, "k2": 0.1, "k3": 0.05},
    "extra-class": {"seeds": list(range(20)), "train_sizes": [60, 40, 40], "test_sizes": [600, 400],
                    "centers": [[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], "spread": 1.0,
                    "delete_fraction": 0.05, "lams": [float(v) for v in np.logspace(-3, 4, 15)]},
    "survival-table": {"seeds": [0], "alpha": 0.8, "rounds": 5, "replays": 10000, "per_round": 625},
}


# -- config handling ------------------------------------------------------------------------

def parse_seeds(text):
    """'3' -> [3]; '1..5' -> [1, 2, 3, 4, 5]; '1,4,9' -> [1, 4, 9]."""
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    if isinstance(text, int):
        return [text]
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seeds: cannot parse {text!r}; use N, A..B or A,B,C") from None
    if not seeds:
        raise ConfigError(f"seeds: {text!r} is empty")
    return seeds


def set_path(tree, path, value):
    keys = path.split(".")
    node = tree
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"{path}: '{k}' is not a section")
        node = node[k]
    if keys[-1] not in node and keys[0] != "spec":
        raise ConfigError(f"{path}: unknown field")
    node[keys[-1]] = value


def merge(base, extra, prefix=""):
    for k, v in extra.items():
        where = f"{prefix}{k}"
        if k not in base:
            # spec overrides are free-form
            if prefix.startswith("spec."):
                base[k] = v
                continue
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[k], dict) and isinstance(v, dict):
            merge(base[k], v, where + ".")
        else:
            base[k] = v
    return base


def load_config_file(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark else ""
        raise ConfigError(f"{path}:{where} {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_value(raw):
    value = yaml.safe_load(raw)
    # YAML 1.1 reads 1e-3 as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    return value


def build_config(kind, file_data=None, overrides=()):
    if kind not in DEFAULTS:
        raise ConfigError(f"unknown experiment kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    cfg = copy.deepcopy(DEFAULTS[kind])
    if file_data:
        file_data = dict(file_data)
        file_data.pop("kind", None)
        merge(cfg, file_data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key.path=value")
        path, raw = item.split("=", 1)
        set_path(cfg, path.strip(), parse_value(raw))
    cfg["seeds"] = parse_seeds(cfg["seeds"])
    return cfg


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


# -- output ------------------------------------------------------------------------------------

def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_csv(path, rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    atomic_write(path, buf.getvalue())


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def write_json(path, obj):
    atomic_write(path, json.dumps(_jsonable(obj), indent=2) + "\n")


def write_jsonl(path, objs):
    atomic_write(path, "".join(json.dumps(_jsonable(o)) + "\n" for o in objs))


# -- RL plumbing -------------------------------------------------------------------------------

def _rl_setup(cfg):
    from .adapt import EstimatorSpec, RoundPlan
    from .envs import get_spec
    from .estimators import TrainConfig
    from .policies import AnalyticPendulum, PolicySearchConfig, train_universal

    spec = get_spec(cfg["env"], **cfg["spec"])
    rng = make_rng(cfg["contexts"]["seed"])
    train_ctx = spec.sample_contexts(rng, cfg["contexts"]["train"])
    eval_ctx = spec.sample_contexts(rng, cfg["contexts"]["eval"])
    if cfg["controller"] == "analytic":
        if spec.name != "pendulum":
            raise ConfigError("controller: 'analytic' exists only for env pendulum; use 'search'")
        K = AnalyticPendulum()
    elif cfg["controller"] == "search":
        K = train_universal(spec, train_ctx, PolicySearchConfig(seed=cfg["contexts"]["seed"], **cfg["search"]))
    else:
        raise ConfigError(f"controller: {cfg['controller']!r} is not one of analytic, search")
    p = cfg["plan"]
    est = p["estimator"]
    plan = RoundPlan(rounds=p["rounds"], episodes_per_round=p["episodes_per_round"], strategy=p["strategy"],
                     alpha=p["alpha"], refresh=p["refresh"],
                     estimator=EstimatorSpec(est["arch"], est["k"], tuple(est["widths"]), est["hidden"]),
                     train=TrainConfig(**p["train"]))
    return spec, train_ctx, eval_ctx, K, plan


GAP_COLUMNS = ["alpha", "seed", "max_gap", "mean_gap", "final_loss", "error"]


def run_train_adaptive(cfg, out):
    from .adapt import oracle_values, robustness_gap, run_training
    from .policies import with_estimator

    spec, tr, ev, K, plan = _rl_setup(cfg)
    j_star, _ = oracle_values(spec, ev, K, cfg["eval_episodes"], cfg["eval_seed"])
    artifacts, rows = {}, []
    for seed in cfg["seeds"]:
        res = run_training(spec, tr, K, plan, seed=seed)
        rep = robustness_gap(spec, ev, with_estimator(K, res.estimator, refresh=plan.refresh), j_star, cfg["eval_episodes"],
                             cfg["eval_seed"])
        curve = [{"round": lg.round, "step": j, "loss": loss} for lg in res.logs for j, loss in enumerate(lg.losses)]
        write_csv(out / f"loss_seed{seed}.csv", curve, ["round", "step", "loss"])
        res.estimator.save(out / f"estimator_seed{seed}.json")
        write_json(out / f"gap_seed{seed}.json", rep.to_dict())
        artifacts[seed] = [f"loss_seed{seed}.csv", f"estimator_seed{seed}.json", f"gap_seed{seed}.json"]
        rows.append({"alpha": plan.alpha, "seed": seed, "max_gap": rep.max_gap, "mean_gap": rep.mean_gap,
                     "final_loss": curve[-1]["loss"] if curve else float("nan"), "error": ""})
    write_csv(out / "gaps.csv", rows, GAP_COLUMNS)
    return artifacts, 0


def run_sweep_alpha(cfg, out):
    from .adapt import sweep_alpha

    spec, tr, ev, K, plan = _rl_setup(cfg)
    rows, summary = sweep_alpha(spec, tr, ev, K, plan, tuple(cfg["alphas"]), cfg["seeds"],
                                eval_episodes=cfg["eval_episodes"], eval_seed=cfg["eval_seed"])
    write_csv(out / "sweep.csv", rows, GAP_COLUMNS)
    write_json(out / "summary.json", summary)
    return {"all": ["sweep.csv", "summary.json"]}, 0


def run_ablate(cfg, out):
    from .adapt import ablate_strategies

    spec, tr, ev, K, plan = _rl_setup(cfg)
    rows, summary = ablate_strategies(spec, tr, ev, K, plan, tuple(cfg["strategies"]), cfg["alpha"],
                                      cfg["seeds"], eval_episodes=cfg["eval_episodes"],
                                      eval_seed=cfg["eval_seed"])
    write_csv(out / "ablation.csv", rows, ["strategy"] + GAP_COLUMNS)
    write_json(out / "summary.json", summary)
    return {"all": ["ablation.csv", "summary.json"]}, 0


# -- theory commands ----------------------------------------------------------------------------

def _theory_instances(cfg, rng):
    from . import erm, ridge

    c = cfg["corollary"]
    params = ridge.CorollaryParams(c["k1"], c["k2"], c["k3"])
    lo, hi = np.log(c["snr_range"])
    for j in range(cfg["instances"]):
        source = cfg["sources"][j % len(cfg["sources"])]
        if source == "corollary":
            inst = ridge.generate_instance(rng, c["d"], c["N"], c["R"], float(np.exp(rng.uniform(lo, hi))),
                                           float(rng.uniform(0.05, 0.95)), params)
            yield source, inst.to_erm(), inst, params
        elif source == "shifted-ridge":
            yield source, erm.random_ridge_instance(rng), None, None
        elif source == "shifted-logistic":
            yield source, erm.random_logistic_instance(rng), None, None
        elif source == "coherent-ridge":
            yield source, erm.coherent_shift_instance(rng, family="ridge"), None, None
        elif source == "coherent-logistic":
            yield source, erm.coherent_shift_instance(rng, family="logistic", lam=1.0), None, None
        else:
            raise ConfigError(f"sources: unknown source {source!r}")


def run_verify_theorem(cfg, out):
    from . import erm, ridge

    reports = []
    for seed in cfg["seeds"]:
        if cfg["instances_file"]:
            items = [("file", inst, None, None) for inst in erm.load_instances(cfg["instances_file"])]
        else:
            items = _theory_instances(cfg, make_rng(seed))
        for j, (source, inst, rinst, params) in enumerate(items):
            rec = {"seed": seed, "index": j, "source": source, "family": inst.family,
                   **erm.theorem_check(inst).to_dict()}
            if rinst is not None:
                avg = ridge.averaged_theorem_check(rinst)
                rec["corollary_pass"] = ridge.corollary_check(rinst, params).passes
                rec["averaged"] = {**avg.to_dict(), "drop": avg.drop, "counterexample": avg.counterexample}
            reports.append(rec)
    write_jsonl(out / "reports.jsonl", reports)
    cor = [r for r in reports if r.get("corollary_pass")]
    summary = {
        "instances": len(reports),
        "verdict_true": sum(r["verdict"] for r in reports),
        "counterexamples": sum(r["counterexample"] for r in reports),
        "corollary_pass": len(cor),
        "corollary_averaged_drop": sum(r["averaged"]["drop"] > 0 for r in cor),
        "corollary_realized_drop": sum(r["drop"] > 0 for r in cor),
    }
    sound = summary["counterexamples"] == 0 and summary["corollary_averaged_drop"] == len(cor)
    summary["sound"] = sound
    write_json(out / "summary.json", summary)
    print(json.dumps(summary))
    return {"all": ["reports.jsonl", "summary.json"]}, 0 if sound else 1


COROLLARY_COLUMNS = ["d", "N", "R", "SNR", "lam", "D", "C", "margin", "expected_drop", "realized_drop", "pass"]


def run_corollary_sweep(cfg, out):
    from .ridge import CorollaryParams, corollary_sweep

    params = CorollaryParams(cfg["k1"], cfg["k2"], cfg["k3"])
    artifacts = {}
    for seed in cfg["seeds"]:
        rows = corollary_sweep(make_rng(seed), cfg["instances"], cfg["d"], cfg["N"], cfg["R"],
                               tuple(cfg["snr_range"]), tuple(cfg["placement_range"]), params)
        write_csv(out / f"corollary_seed{seed}.csv", rows, COROLLARY_COLUMNS)
        artifacts[seed] = [f"corollary_seed{seed}.csv"]
    return artifacts, 0


def run_extra_class(cfg, out):
    from .erm import ExtraClassConfig, extra_class_experiment

    ec = ExtraClassConfig(tuple(cfg["train_sizes"]), tuple(cfg["test_sizes"]),
                          tuple(tuple(c) for c in cfg["centers"]), cfg["spread"], cfg["delete_fraction"],
                          tuple(cfg["lams"]), tuple(cfg["seeds"]))
    rows, summary, majority = extra_class_experiment(ec)
    write_csv(out / "extra_class.csv", rows, ["lam", "seed", "acc_full", "acc_deleted"])
    write_csv(out / "extra_class_summary.csv", summary, ["lam", "acc_full", "acc_deleted", "improved"])
    return {"all": ["extra_class.csv", "extra_class_summary.csv"]}, 0


def run_survival(cfg, out):
    from .buffer import survival_frequencies, survival_table

    table = survival_table(cfg["alpha"], cfg["rounds"])
    emp = survival_frequencies(cfg["alpha"], cfg["rounds"], cfg["per_round"], cfg["replays"], cfg["seeds"][0])
    rows = [{"round": r, "analytic": table[r], "empirical": emp[r]} for r in table]
    write_csv(out / "survival.csv", rows, ["round", "analytic", "empirical"])
    return {"all": ["survival.csv"]}, 0


RUNNERS = {
    "train-adaptive": run_train_adaptive, "sweep-alpha": run_sweep_alpha, "ablate-strategies": run_ablate,
    "verify-theorem": run_verify_theorem, "corollary-sweep": run_corollary_sweep,
    "extra-class": run_extra_class, "survival-table": run_survival,
}


# -- entry point ----------------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="deletion-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="kind", metavar="KIND")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dot-path override")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--seeds", help="N, A..B or A,B,C")
    common.add_argument("--seed", type=int, help="single seed")
    common.add_argument("-v", "--verbose", action="store_true")
    for kind in KINDS:
        sp = sub.add_parser(kind, parents=[common])
        if kind in ("train-adaptive", "sweep-alpha", "ablate-strategies"):
            sp.add_argument("--env")
        if kind in ("verify-theorem", "corollary-sweep"):
            sp.add_argument("--instances", type=int)
        if kind == "verify-theorem":
            sp.add_argument("--instances-file")
    run = sub.add_parser("run", parents=[common], help="run the kind named in the config file")
    run.add_argument("config_file")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.kind is None:
        _parser().print_usage(sys.stderr)
        print(f"deletion-lab: error: missing experiment kind; valid kinds: {', '.join(KINDS)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    from .erm import SolverFailure
    from .estimators import NonFiniteLoss
    from .envs import NonFiniteState

    try:
        if args.kind == "run":
            data = load_config_file(args.config_file)
            kind = data.get("kind")
        else:
            data = load_config_file(args.config) if args.config else None
            kind = args.kind
        overrides = list(args.set)
        for flag in ("env", "instances", "instances_file"):
            v = getattr(args, flag, None)
            if v is not None:
                overrides.insert(0, f"{flag}={json.dumps(v)}")
        if args.seed is not None:
            overrides.insert(0, f"seeds=[{args.seed}]")
        if args.seeds is not None:
            overrides.insert(0, f"seeds={json.dumps(parse_seeds(args.seeds))}")
        cfg = build_config(kind, data, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        artifacts, code = RUNNERS[kind](cfg, out)
    except ConfigError as exc:
        print(f"deletion-lab: config error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, SolverFailure, NonFiniteLoss, NonFiniteState, FloatingPointError) as exc:
        print(f"deletion-lab: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except (ValueError, TypeError, KeyError) as exc:
        print(f"deletion-lab: invalid configuration: {exc}", file=sys.stderr)
        return 2
    write_json(out / "manifest.json", {
        "version": __version__, "schema": SCHEMA_VERSION, "kind": kind, "config": cfg,
        "config_hash": config_hash(cfg), "seeds": cfg["seeds"], "artifacts": artifacts,
        "started": started, "elapsed_s": time.time() - started, "exit_code": code,
    })
    return code


if __name__ == "__main__":
    sys.exit(main())
