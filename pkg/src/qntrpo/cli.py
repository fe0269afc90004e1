"""Command-line entry point.

    qntrpo optimize <config> --out <dir>
    qntrpo train    <config> --out <dir> [--seeds 0,1,2] [--workers N]
    qntrpo compare  <configA> <configB> --out <dir> [--seeds ...]

Every subcommand accepts ``--override key=value`` (repeatable; nested keys
joined with dots, values parsed as YAML). Log verbosity comes from the
``QNTRPO_LOG_LEVEL`` environment variable.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 environment construction failure, 5 incompatible configurations.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, List, Optional

import numpy as np
import scipy
import yaml

from qntrpo import __version__
from qntrpo.driver import (
    EpisodeRecord,
    TrainConfig,
    check_comparable,
    compare_run,
    episodes_to_threshold,
    optimal_eta,
    run_seeds,
    threshold_for,
)
from qntrpo.envs import make_env
from qntrpo.errors import ConfigError, ConfigMismatch, QntrpoError
from qntrpo.linalg import SpdOperator
from qntrpo.policy import make_policy
from qntrpo.testfunctions import REGISTRY
from qntrpo.trustregion import IterationRecord, TrustRegionConfig, qntrm_minimize

log = logging.getLogger("qntrpo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ENV, EXIT_INCOMPATIBLE = 0, 2, 3, 4, 5


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclasses.dataclass(frozen=True)
class OptimizeConfig:
    function: str = "rosenbrock"
    dim: int = 2
    theta0: Optional[list] = None
    metric: Any = "identity"
    A: Optional[list] = None
    update_hessian: bool = True
    trust_region: TrustRegionConfig = TrustRegionConfig(max_iters=500)


# config parsing ---------------------------------------------------------------

def load_yaml(path) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def apply_overrides(raw: dict, overrides: List[str]) -> dict:
    out = json.loads(json.dumps(raw))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not a mapping", key=key)
        node[parts[-1]] = yaml.safe_load(text)
    return out


def _coerce(key: str, value, default, annotation: str = ""):
    if annotation == "Any":
        return value
    if "list" in annotation:
        if value is None or isinstance(value, list):
            return value
        raise ConfigError(f"{key}: expected a list or null, got {value!r}", key=key)
    if default is None:
        # optional numeric entries
        if value is None or (isinstance(value, (int, float)) and not isinstance(value, bool)):
            return value
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number or null, got {value!r}", key=key) from None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}", key=key)
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}", key=key)
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key=key)
        try:
            return float(value)  # YAML reads 1e-3 as a string
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key=key) from None
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}", key=key)
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"{key}: expected a mapping, got {value!r}", key=key)
    return value


def build_dataclass(cls, raw: dict, prefix: str = "", base=None):
    """Instantiate ``cls`` from ``raw``; unknown keys and wrong types raise ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping", key=prefix.rstrip("."))
    base = cls() if base is None else base
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        full = prefix + str(key)
        if key not in fields:
            raise ConfigError(f"unknown key {full!r}", key=full)
        default = getattr(base, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = build_dataclass(type(default), value or {}, full + ".", base=default)
        else:
            kwargs[key] = _coerce(full, value, default, str(fields[key].type))
    return dataclasses.replace(base, **kwargs)


def _pop_seeds(raw: dict):
    raw = dict(raw)
    seeds = raw.pop("seeds", None)
    workers = raw.pop("workers", 1)
    if seeds is not None:
        if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds: expected a list of integers", key="seeds")
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers: expected a positive integer", key="workers")
    return raw, seeds, workers


def parse_seeds(text: Optional[str]):
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds: cannot parse {text!r}", key="seeds") from None


def build_train(path, overrides, seeds_arg):
    raw, seeds, workers = _pop_seeds(apply_overrides(load_yaml(path), overrides))
    cfg = build_dataclass(TrainConfig, raw)
    cfg.validate()
    seeds = parse_seeds(seeds_arg) or seeds or [cfg.seed]
    return cfg, seeds, workers


def build_optimize(path, overrides) -> OptimizeConfig:
    cfg = build_dataclass(OptimizeConfig, apply_overrides(load_yaml(path), overrides))
    if cfg.function not in REGISTRY:
        raise ConfigError(f"function: unknown test function {cfg.function!r}", key="function")
    if cfg.dim < 1 or (cfg.function == "rosenbrock" and cfg.dim < 2):
        raise ConfigError("dim: too small for the chosen function", key="dim")
    cfg.trust_region.validate()
    return cfg


# output helpers ----------------------------------------------------------------

def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def versions() -> dict:
    return {"qntrpo": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """``manifest.json``; written before any data file and finalized on success."""

    def __init__(self, out_dir: Path, command: str, resolved: dict, seeds, outputs: List[str]):
        self.path = out_dir / "manifest.json"
        h = config_hash(resolved)
        self.data = {
            "run_id": f"{command}-{h[:12]}",
            "command": command,
            "config_hash": h,
            "seeds": list(seeds),
            "outputs": outputs,
            "status": "running",
            "started": _now(),
            "finished": None,
            "versions": versions(),
        }
        self._write()

    def _write(self):
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self, status="complete"):
        self.data["status"] = status
        self.data["finished"] = _now()
        self._write()


def _fmt(v):
    if isinstance(v, bool) or v is None:
        return "" if v is None else int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


def _finite_or_none(x):
    return x if x is not None and math.isfinite(x) else None


# commands ---------------------------------------------------------------------

def _metric_operator(cfg: OptimizeConfig, d: int) -> SpdOperator:
    if cfg.metric == "identity":
        return SpdOperator.identity(d)
    M = np.asarray(cfg.metric, dtype=np.float64)
    if M.shape != (d, d):
        raise ConfigError(f"metric: expected a {d}x{d} matrix", key="metric")
    op = SpdOperator.from_matrix(M)
    op.check_positive()
    return op


def cmd_optimize(args) -> int:
    cfg = build_optimize(args.config, args.override)
    d = cfg.dim
    if cfg.theta0 is not None:
        theta0 = np.asarray(cfg.theta0, dtype=np.float64)
        if theta0.shape != (d,):
            raise ConfigError(f"theta0: expected {d} entries", key="theta0")
    elif cfg.function == "rosenbrock":
        theta0 = np.tile([-1.2, 1.0], d)[:d]
    else:
        theta0 = np.ones(d)
    fun = REGISTRY[cfg.function]
    if cfg.function == "quadratic" and cfg.A is not None:
        A = np.asarray(cfg.A, dtype=np.float64)
        if A.shape != (d, d):
            raise ConfigError(f"A: expected a {d}x{d} matrix", key="A")
        objective = lambda th: fun(th, A)  # noqa: E731
    else:
        objective = fun
    try:
        metric_op = _metric_operator(cfg, d)
    except (ValueError, QntrpoError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"metric: {exc}", key="metric") from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = dataclasses.asdict(cfg)
    manifest = RunManifest(out, "optimize", resolved, [], ["trace.csv", "summary.json"])
    try:
        theta, _, trace = qntrm_minimize(objective, lambda _t: metric_op, theta0, cfg.trust_region,
                                         update_hessian=cfg.update_hessian)
    except (QntrpoError, ValueError, ArithmeticError) as exc:
        manifest.finish("failed")
        raise CliFailure(EXIT_NUMERIC, f"numerical failure: {exc}") from exc
    (out / "trace.csv").write_text(trace.to_csv())
    summary = {
        "config": resolved,
        "theta": theta.tolist(),
        "final_f": trace.final_f,
        "final_grad_norm": trace.final_grad_norm,
        "converged": trace.converged,
        "iterations": len(trace.records),
        "accepted_steps": trace.accepted_steps,
        "evaluations": trace.evaluations,
        "versions": versions(),
    }
    write_json(out / "summary.json", summary)
    if not (math.isfinite(trace.final_f) and math.isfinite(trace.final_grad_norm)):
        manifest.finish("failed")
        raise CliFailure(EXIT_NUMERIC, "numerical failure: non-finite final iterate")
    manifest.finish()
    log.info("optimize: f=%.6g |g|=%.3g after %d iterations", trace.final_f, trace.final_grad_norm,
             len(trace.records))
    return EXIT_OK


def _check_env(cfg: TrainConfig):
    try:
        env = make_env(cfg.env)
        make_policy(cfg.policy, env)
    except (ValueError, TypeError, AttributeError, KeyError, np.linalg.LinAlgError) as exc:
        raise CliFailure(EXIT_ENV, f"cannot construct environment: {exc}") from exc
    return env


def _episode_rows(recs: List[EpisodeRecord]):
    return [[getattr(r, f) for f in EpisodeRecord.CSV_FIELDS] for r in recs]


def _inner_rows(recs: List[EpisodeRecord]):
    names = [f.name for f in dataclasses.fields(IterationRecord)]
    rows = []
    for r in recs:
        if r.trace is None:
            continue
        for it in r.trace.records:
            rows.append([r.episode, *[getattr(it, n) for n in names]])
    return ["episode", *names], rows


def _seed_summary(cfg, seed, recs, eta_star, thr):
    return {
        "algorithm": cfg.algorithm,
        "seed": seed,
        "episodes": len(recs),
        "eta_star": eta_star,
        "threshold": thr,
        "final_eta": recs[-1].eta if recs else None,
        "episodes_to_threshold": episodes_to_threshold(recs, thr),
        "max_evaluations_per_episode": max((r.evaluations for r in recs), default=0),
        "max_kl": max((r.kl for r in recs), default=0.0),
        "max_step_violation": max((r.max_step_violation for r in recs), default=0.0),
        "timing": {"mean_episode_s": float(np.mean([r.wall_ms for r in recs]) / 1000.0) if recs else 0.0},
    }


def cmd_train(args) -> int:
    cfg, seeds, workers = build_train(args.config, args.override, args.seeds)
    workers = args.workers or workers
    env = _check_env(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for s in seeds:
        outputs += [f"seed_{s}.csv", f"seed_{s}.json"]
        if cfg.algorithm == "QNTRPO":
            outputs.append(f"seed_{s}_inner.csv")
    resolved = dataclasses.asdict(cfg)
    manifest = RunManifest(out, "train", {**resolved, "seeds": seeds}, seeds, outputs)
    try:
        runs = run_seeds(cfg, seeds, workers)
    except (QntrpoError, ArithmeticError) as exc:
        manifest.finish("failed")
        raise CliFailure(EXIT_NUMERIC, f"numerical failure: {exc}") from exc
    eta_star = _finite_or_none(optimal_eta(env))
    thr = threshold_for(eta_star) if eta_star is not None else math.inf
    for s, recs in runs.items():
        write_csv(out / f"seed_{s}.csv", EpisodeRecord.CSV_FIELDS, _episode_rows(recs))
        if cfg.algorithm == "QNTRPO":
            header, rows = _inner_rows(recs)
            write_csv(out / f"seed_{s}_inner.csv", header, rows)
        summary = _seed_summary(cfg, s, recs, eta_star, thr)
        write_json(out / f"seed_{s}.json", {"config": resolved, "versions": versions(), **summary})
        log.info("train %s seed %d: final eta %.4f, threshold reached after %s episodes",
                 cfg.algorithm, s, summary["final_eta"], summary["episodes_to_threshold"])
    manifest.finish()
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg_a, seeds_a, workers = build_train(args.config, args.override, args.seeds)
    cfg_b, seeds_b, _ = build_train(args.config_b, args.override, args.seeds)
    if seeds_a != seeds_b:
        raise CliFailure(EXIT_INCOMPATIBLE, f"seed lists differ: {seeds_a} vs {seeds_b}")
    workers = args.workers or workers
    _check_env(cfg_a)
    _check_env(cfg_b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"A": dataclasses.asdict(cfg_a), "B": dataclasses.asdict(cfg_b), "seeds": seeds_a}
    try:
        check_comparable(cfg_a, cfg_b)
    except ConfigMismatch as exc:
        raise CliFailure(EXIT_INCOMPATIBLE, f"incompatible configs: {exc}") from exc
    manifest = RunManifest(out, "compare", resolved, seeds_a,
                           ["curves.csv", "thresholds.csv", "timing.csv", "summary.json"])
    try:
        report = compare_run(cfg_a, cfg_b, seeds_a, workers=workers)
    except (QntrpoError, ArithmeticError) as exc:
        manifest.finish("failed")
        raise CliFailure(EXIT_NUMERIC, f"numerical failure: {exc}") from exc

    la, lb = report.labels
    curve_rows = []
    for s in report.seeds:
        ca, cb = report.curves[la][s], report.curves[lb][s]
        ra, rb = report.returns[la][s], report.returns[lb][s]
        for i in range(len(ca)):
            curve_rows.append([s, i, ca[i], cb[i], ca[i] - cb[i], ra[i], rb[i]])
    write_csv(out / "curves.csv", ["seed", "episode", f"eta_{la}", f"eta_{lb}", "eta_diff",
                                   f"return_{la}", f"return_{lb}"], curve_rows)
    rows = [[lab, s, report.to_threshold[lab][s]] for lab in report.labels for s in report.seeds]
    rows += [[lab, "median", report.median_to_threshold(lab)] for lab in report.labels]
    write_csv(out / "thresholds.csv", ["label", "seed", "episodes_to_threshold"], rows)
    rows = []
    for lab in report.labels:
        mean, std = report.timing(lab)
        n = sum(len(v) for v in report.wall_ms[lab].values())
        rows.append([lab, mean, std, n])
    write_csv(out / "timing.csv", ["label", "mean_s_per_episode", "std_s_per_episode", "episodes"], rows)
    summary = {
        "labels": list(report.labels),
        "seeds": report.seeds,
        "eta_star": report.eta_star,
        "threshold": report.threshold,
        "median_episodes_to_threshold": {lab: _finite_or_none(report.median_to_threshold(lab))
                                         for lab in report.labels},
        "max_abs_eta_diff": float(max((abs(r[4]) for r in curve_rows), default=0.0)),
        "timing": {"time_ratio": report.time_ratio},
        "versions": versions(),
    }
    write_json(out / "summary.json", summary)
    manifest.finish()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qntrpo", description="Quasi-Newton trust region policy optimization")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. trust_region.max_iters=5")

    sp = sub.add_parser("optimize", help="run QNTRM on an analytic test function")
    sp.add_argument("config")
    common(sp)
    sp.set_defaults(func=cmd_optimize)

    for name, fn, help_ in (("train", cmd_train, "train a policy on a toy environment"),
                            ("compare", cmd_compare, "train two configs on the same seeds")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config")
        if name == "compare":
            sp.add_argument("config_b")
        common(sp)
        sp.add_argument("--seeds", help="comma-separated seed list, e.g. 0,1,2")
        sp.add_argument("--workers", type=int, help="processes for multi-seed runs")
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    level = os.environ.get("QNTRPO_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [key: {exc.key}]" if exc.key else ""
        print(f"qntrpo: config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliFailure as exc:
        print(f"qntrpo: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
