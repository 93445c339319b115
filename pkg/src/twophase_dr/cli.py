"""Command-line front end: simulation grids, CSV estimation, report emission.

Three subcommands:

    simulate   run a Monte Carlo grid and write summary.csv, records.jsonl,
               and manifest.json into an output directory
    estimate   read a dataset CSV and write a JSON array of estimates
    report     pivot a summary.csv into per-metric tables or SVG panels

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Every file-writing command also writes a manifest naming its artifacts;
the manifest is written last, so its presence marks a completed run.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import (
    DEFAULT_LEARNER_MENU,
    KAPPA_MODES,
    CsvSchemaError,
    ScenarioConfig,
    _fmt,
    read_dataset_csv,
    validate_dataset,
)
from .errors import TwoPhaseError
from .estimators import (
    aipw_pair,
    ate_from_arms,
    ensemble,
    onestep1,
    onestep2,
    plugin1,
    tmle2,
)
from .learners import make_folds
from .nuisance import fit_nuisances
from .simulation import SUMMARY_COLUMNS, DgpParams, run_grid

SIMULATE_DEFAULTS = {
    "n": [1000],
    "rho": [0.3],
    "reps": 100,
    "seed": 0,
    "folds": 5,
    "delta": 0.01,
    "clip_eps": 0.01,
    "kappa_mode": "known",
    "learners": list(DEFAULT_LEARNER_MENU),
    "jobs": 0,  # 0 means available parallelism
}

ESTIMATE_METHODS = (
    "naive_aipw",
    "oracle_aipw",
    "pi1",
    "os1",
    "os2",
    "os2_eem",
    "tmle2",
    "ensemble",
)


class UsageError(ValueError):
    """Validation failure that should exit with status 2."""


def _clean(obj):
    """Make a record JSON-safe: non-finite floats become null."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _clean(obj.item())
    return obj


def _write_manifest(out_dir: str, command: list[str], config: dict, seed, started: str, artifacts: list[str]) -> None:
    manifest = {
        "command": command,
        "config": _clean(config),
        "seed": seed,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "artifacts": artifacts,
        "version": __version__,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------
# simulate
# ----------------------------------------------------------------------


def _resolve_simulate(args) -> dict:
    resolved = {k: (list(v) if isinstance(v, list) else v) for k, v in SIMULATE_DEFAULTS.items()}
    if args.config is not None:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(resolved))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for key in ("n", "rho", "learners"):
            if key in file_cfg and not isinstance(file_cfg[key], list):
                file_cfg[key] = [file_cfg[key]]
        resolved.update(file_cfg)
    for key in ("n", "rho", "reps", "seed", "folds", "delta", "clip_eps", "kappa_mode", "learners", "jobs"):
        val = getattr(args, key)
        if val is not None:
            resolved[key] = val
    return resolved


def cmd_simulate(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    resolved = _resolve_simulate(args)
    cells = []
    for n in resolved["n"]:
        for rho in resolved["rho"]:
            cells.append(
                ScenarioConfig(
                    n=int(n),
                    rho=float(rho),
                    reps=int(resolved["reps"]),
                    master_seed=int(resolved["seed"]),
                    folds=int(resolved["folds"]),
                    clip_eps=float(resolved["clip_eps"]),
                    delta=float(resolved["delta"]),
                    kappa_mode=resolved["kappa_mode"],
                    learner_menu=tuple(resolved["learners"]),
                )
            )
    jobs = int(resolved["jobs"])
    if jobs < 0:
        raise UsageError("jobs must be nonnegative")
    if jobs == 0:
        jobs = os.cpu_count() or 1

    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    summaries, records = run_grid(cells, DgpParams(), jobs=jobs)
    elapsed = time.perf_counter() - t0

    summary_path = os.path.join(args.out, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            w.writerow([_cell_text(v) for v in s.to_row()])
    records_path = os.path.join(args.out, "records.jsonl")
    with open(records_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_clean(rec), sort_keys=True))
            fh.write("\n")

    config_doc = dict(resolved)
    config_doc["cells"] = [c.to_dict() for c in cells]
    _write_manifest(
        args.out, ["simulate"] + _echo_flags(args), config_doc, resolved["seed"], started,
        ["summary.csv", "records.jsonl", "manifest.json"],
    )
    print(f"wrote {summary_path} ({len(cells)} cells, {elapsed:.1f}s)")
    return 0


def _cell_text(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _fmt(float(v))


def _echo_flags(args) -> list[str]:
    out = []
    for key, val in sorted(vars(args).items()):
        if key in ("func", "command") or val is None:
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(val, list):
            for item in val:
                out.extend([flag, str(item)])
        elif isinstance(val, bool):
            if val:
                out.append(flag)
        else:
            out.extend([flag, str(val)])
    return out


# ----------------------------------------------------------------------
# estimate
# ----------------------------------------------------------------------


def _arm_pair(fn) -> tuple:
    return fn(1), fn(0)


def cmd_estimate(args) -> int:
    d = read_dataset_csv(args.data)
    validate_dataset(d)
    kappa_mode = args.kappa_mode
    if kappa_mode is None:
        kappa_mode = "known" if d.kappa_known is not None else "estimated"
    if kappa_mode in ("known", "known_refit") and d.kappa_known is None:
        raise UsageError(
            f"kappa_mode {kappa_mode!r} needs a kappa column, but the file has none"
        )

    requested = list(args.method) if args.method else None
    if requested is None:
        requested = [m for m in ESTIMATE_METHODS if m != "oracle_aipw" or d.is_complete]

    cfg = ScenarioConfig(
        n=d.n,
        rho=0.5,  # placeholder; estimation never samples
        reps=1,
        master_seed=args.seed,
        folds=args.folds,
        clip_eps=args.clip_eps,
        delta=args.delta,
        kappa_mode=kappa_mode,
        learner_menu=tuple(args.learners) if args.learners else DEFAULT_LEARNER_MENU,
        ci_level=args.ci_level,
    )
    strata = d.r if 0 < d.r.sum() < d.n else None
    folds = make_folds(d.n, cfg.folds, seed=np.random.SeedSequence([cfg.master_seed, 1]), strata=strata)

    results: list[dict] = []

    def emit(r1, r0):
        ate = ate_from_arms(r1, r0)
        results.extend([r1.to_dict(), r0.to_dict(), ate.to_dict()])

    level = cfg.ci_level
    if "naive_aipw" in requested:
        pair = aipw_pair(d, "starred", cfg.learner_menu, folds, level, cfg.clip_eps)
        emit(pair[1], pair[0])
    if "oracle_aipw" in requested:
        pair = aipw_pair(d, "gold", cfg.learner_menu, folds, level, cfg.clip_eps)
        emit(pair[1], pair[0])

    corrected = [m for m in requested if m not in ("naive_aipw", "oracle_aipw")]
    if corrected:
        nus = fit_nuisances(d, cfg, folds)
        builders = {
            "pi1": lambda a: plugin1(d, nus, a, level),
            "os1": lambda a: onestep1(d, nus, a, level),
            "os2": lambda a: onestep2(d, nus, a, "conventional", level),
            "os2_eem": lambda a: onestep2(d, nus, a, "eem", level),
            "tmle2": lambda a: tmle2(d, nus, a, level),
        }
        for tag in corrected:
            if tag == "ensemble":
                r1 = ensemble(builders["os1"](1), builders["os2_eem"](1), cfg.delta, level)
                r0 = ensemble(builders["os1"](0), builders["os2_eem"](0), cfg.delta, level)
                emit(r1, r0)
            else:
                r1, r0 = _arm_pair(builders[tag])
                emit(r1, r0)

    doc = json.dumps(_clean(results), indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(doc)
        print(f"wrote {args.out} ({len(results)} results)")
    else:
        sys.stdout.write(doc)
    return 0


# ----------------------------------------------------------------------
# report
# ----------------------------------------------------------------------


def _read_summary(path: str) -> tuple[list[str], list[dict]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise UsageError("summary file is empty") from None
            if tuple(header) != SUMMARY_COLUMNS:
                raise UsageError(
                    f"summary header must be {','.join(SUMMARY_COLUMNS)}"
                )
            rows = []
            for raw in reader:
                if not raw:
                    continue
                if len(raw) != len(header):
                    raise UsageError(f"summary row has {len(raw)} cells, expected {len(header)}")
                rec = dict(zip(header, raw))
                rec["n"] = int(rec["n"])
                rec["rho"] = float(rec["rho"])
                for key in ("pct_bias", "rmse", "coverage", "mean_se"):
                    rec[key] = float(rec[key]) if rec[key] != "" else float("nan")
                rows.append(rec)
    except OSError as exc:
        raise UsageError(f"cannot read summary: {exc}") from None
    if not rows:
        raise UsageError("summary file has no data rows")
    return header, rows


def _pivot(rows: list[dict], metric: str) -> tuple[list[str], list[tuple[int, float]], dict]:
    methods = []
    for rec in rows:
        if rec["method"] not in methods:
            methods.append(rec["method"])
    cells = sorted({(rec["n"], rec["rho"]) for rec in rows})
    table = {(rec["method"], rec["n"], rec["rho"]): rec[metric] for rec in rows}
    return methods, cells, table


def cmd_report(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    _, rows = _read_summary(args.summary)
    os.makedirs(args.out, exist_ok=True)
    metrics = ("pct_bias", "rmse", "coverage")
    names = {"pct_bias": "bias", "rmse": "rmse", "coverage": "coverage"}
    artifacts = []
    for metric in metrics:
        methods, cells, table = _pivot(rows, metric)
        if args.format == "csv":
            fname = f"{names[metric]}.csv"
            with open(os.path.join(args.out, fname), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["method"] + [f"n={n},rho={_fmt(rho)}" for n, rho in cells])
                for method in methods:
                    row = [method]
                    for n, rho in cells:
                        v = table.get((method, n, rho))
                        row.append("" if v is None or math.isnan(v) else _fmt(v))
                    w.writerow(row)
        else:
            fname = f"{names[metric]}.svg"
            _render_panel(
                os.path.join(args.out, fname), metric, methods, cells, table
            )
        artifacts.append(fname)
    artifacts.append("manifest.json")
    _write_manifest(
        args.out, ["report"] + _echo_flags(args),
        {"summary": args.summary, "format": args.format}, None, started, artifacts,
    )
    print(f"wrote {len(artifacts) - 1} {args.format} tables to {args.out}")
    return 0


def _render_panel(path: str, metric: str, methods, cells, table) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed hash salt and scrubbed date metadata keep the bytes reproducible
    plt.rcParams["svg.hashsalt"] = "twophase-dr"
    labels = {"pct_bias": "percent bias", "rmse": "RMSE", "coverage": "95% CI coverage"}
    fig, ax = plt.subplots(figsize=(max(6.0, 1.8 * len(cells) + 2.0), 4.0))
    width = 0.8 / max(1, len(methods))
    xs = np.arange(len(cells))
    for j, method in enumerate(methods):
        vals = [table.get((method, n, rho), float("nan")) for n, rho in cells]
        ax.bar(xs + (j - (len(methods) - 1) / 2.0) * width, vals, width, label=method)
    if metric == "coverage":
        ax.axhline(0.95, color="black", linewidth=0.8, linestyle="--")
    if metric == "pct_bias":
        ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(xs)
    ax.set_xticklabels([f"n={n}\nrho={rho:g}" for n, rho in cells])
    ax.set_ylabel(labels[metric])
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="twophase-dr",
        description="Doubly robust treatment-effect estimation with two-phase validation data.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="run a Monte Carlo grid")
    ps.add_argument("--n", action="append", type=int, help="sample size (repeatable)")
    ps.add_argument("--rho", action="append", type=float, help="validation fraction (repeatable)")
    ps.add_argument("--reps", type=int, help="replications per cell")
    ps.add_argument("--seed", type=int, help="master seed")
    ps.add_argument("--folds", type=int, help="cross-fitting folds")
    ps.add_argument("--delta", type=float, help="ensemble weight regularization")
    ps.add_argument("--clip-eps", type=float, dest="clip_eps", help="probability clip bound")
    ps.add_argument("--kappa-mode", choices=KAPPA_MODES, dest="kappa_mode")
    ps.add_argument("--learner", action="append", dest="learners", help="candidate learner (repeatable)")
    ps.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    ps.add_argument("--config", help="JSON file with defaults for any of the above")
    ps.add_argument("--out", required=True, help="output directory")
    ps.set_defaults(func=cmd_simulate)

    pe = sub.add_parser("estimate", help="estimate from a dataset CSV")
    pe.add_argument("--data", required=True, help="dataset CSV path")
    pe.add_argument("--method", action="append", choices=ESTIMATE_METHODS, help="method tag (repeatable; default: all applicable)")
    pe.add_argument("--kappa-mode", choices=KAPPA_MODES, dest="kappa_mode", help="default: known if the file has kappa, else estimated")
    pe.add_argument("--folds", type=int, default=5)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--ci-level", type=float, default=0.95, dest="ci_level")
    pe.add_argument("--clip-eps", type=float, default=0.01, dest="clip_eps")
    pe.add_argument("--delta", type=float, default=0.01)
    pe.add_argument("--learner", action="append", dest="learners")
    pe.add_argument("--out", help="output JSON path (default: stdout)")
    pe.set_defaults(func=cmd_estimate)

    pr = sub.add_parser("report", help="pivot a summary.csv into metric tables")
    pr.add_argument("--summary", required=True, help="summary.csv path")
    pr.add_argument("--out", required=True, help="output directory")
    pr.add_argument("--format", choices=("csv", "svg"), default="csv")
    pr.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, CsvSchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TwoPhaseError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
