"""``twinloop`` command line: simulate, estimate, tune, sweep and report.

Every command writes its resolved configuration and a checksum manifest next
to its outputs, so ``twinloop report --verify DIR`` can re-run it and compare.
"""

from __future__ import annotations

import argparse
import logging
import math
import statistics
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .config import ConfigError, RunConfig, load_config, parse_yaml
from .experiments import (ESTIMATORS, TARGET_PARAMS, Condition, ConditionOutcome,
                          HeadToHeadResult, head_to_head, run_condition, sweep)
from .observer import TRAJECTORY_COLUMNS, write_trajectory_csv
from .report import (CONFIG_NAME, MANIFEST_NAME, RunManifest, collect_artifacts, format_table,
                     gnuplot_lines, gnuplot_sweep, write_csv)
from .scenario import TRUTH_COLUMNS, UndefinedSNRError, simulate_truth, write_truth_csv
from .tuner import (BENCH_BOUNDS, BENCH_THETA, TIL_BOUNDS, TIL_THETA, AllDivergedError, BOResult,
                    bounds_for)
from .twin import TwinDivergenceError

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

COMMANDS = ("simulate", "estimate", "tune", "sweep")

log = logging.getLogger("twinloop")


class UsageError(Exception):
    pass


class DivergedError(Exception):
    pass


# -- argument parsing -------------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="FILE", default=default, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=default, help="override the top-level seed")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory")
    p.add_argument("--jobs", type=int, default=default, help="worker processes for tune and sweep")
    p.add_argument("--quiet", action="store_true", default=default, help="only report errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twinloop", parents=[_global_flags(False)],
                                     description="Twin-in-the-loop vehicle parameter estimation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    flags = _global_flags(True)
    sub.add_parser("simulate", parents=[flags], help="simulate the loaded truth vehicle")
    est = sub.add_parser("estimate", parents=[flags], help="run the observer over the configured conditions")
    est.add_argument("--gains", metavar="FILE",
                     help="gain YAML: a plain gain mapping, or 'til'/'benchmark' sections")
    tune = sub.add_parser("tune", parents=[flags], help="tune observer gains by Bayesian optimisation")
    tune.add_argument("--estimator", choices=ESTIMATORS + ("both",), help="override tune.estimator")
    sub.add_parser("sweep", parents=[flags], help="sensitivity sweep over snr or road_eps")
    rep = sub.add_parser("report", parents=[flags], help="summarise or verify a finished run")
    rep.add_argument("directory", metavar="DIR")
    rep.add_argument("--verify", action="store_true",
                     help="re-run from the stored config and compare checksums")
    return parser


# -- shared plumbing --------------------------------------------------------------------------

def _gains_overrides(path: str) -> dict:
    file = Path(path)
    if not file.is_file():
        raise UsageError(f"gains file not found: {path}")
    data, _ = parse_yaml(file.read_text(encoding="utf-8"), str(file))
    if not isinstance(data, dict):
        raise ConfigError("gains file must hold a mapping", str(file), 1)
    if set(data) & {"til", "benchmark"}:
        extra = set(data) - {"til", "benchmark"}
        if extra:
            raise ConfigError(f"unexpected sections {sorted(extra)} next to til/benchmark", str(file), 1)
        out: dict[str, Any] = {}
        if "til" in data:
            out["estimation"] = {"gains": data["til"]}
        if "benchmark" in data:
            out["benchmark"] = {"gains": data["benchmark"]}
        return out
    return {"estimation": {"gains": data}}


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["tune"] = {"jobs": args.jobs}
        overrides["sweep"] = {"jobs": args.jobs}
    if getattr(args, "estimator", None):
        overrides.setdefault("tune", {})["estimator"] = args.estimator
    if getattr(args, "gains", None):
        for key, value in _gains_overrides(args.gains).items():
            overrides[key] = {**overrides.get(key, {}), **value}
    return load_config(args.config, overrides=overrides)


def _finish(out: Path, command: str, cfg: RunConfig, args: argparse.Namespace) -> RunManifest:
    (out / CONFIG_NAME).write_text(cfg.dump(), encoding="utf-8")
    manifest = RunManifest(command, CONFIG_NAME, cfg.seed, str(out),
                           {"source": cfg.source}, collect_artifacts(out))
    manifest.write(out)
    log.info("wrote %d files to %s", len(manifest.artifacts) + 1, out)
    return manifest


def _say(args: argparse.Namespace, text: str) -> None:
    if not args.quiet:
        print(text)


# -- simulate ---------------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path, args: argparse.Namespace) -> None:
    vehicle = cfg.vehicle()
    sc = cfg.scenario()
    try:
        run = simulate_truth(sc, vehicle.base, vehicle.config)
    except TwinDivergenceError as exc:
        raise DivergedError(str(exc)) from exc
    write_truth_csv(run, out / "truth.csv")
    cols = ("x_vx", "x_vy", "x_wz")
    (out / "truth.gp").write_text(gnuplot_lines("truth.csv", "t", cols, TRUTH_COLUMNS,
                                                f"{sc.kind} truth run", "SI units", "truth.png"))
    _say(args, f"{sc.kind}: {len(run.t)} samples at {sc.fs:g} Hz, seed {sc.seed}")


# -- estimate ---------------------------------------------------------------------------------

def _condition_label(cond: Condition) -> str:
    return cond.label or cond.describe()


def _summary_rows(outcomes: Sequence[ConditionOutcome], conditions: Sequence[Condition],
                  params: Sequence[str]) -> list[list[object]]:
    rows: list[list[object]] = []
    for cond in conditions:
        mine = [o for o in outcomes if o.condition == cond]
        row: list[object] = [_condition_label(cond)]
        for p in params:
            vals = [o.rms[p] for o in mine if not o.diverged]
            row.append(statistics.fmean(vals) if vals else math.nan)
        row.append(sum(o.diverged for o in mine))
        rows.append(row)
    return rows


def cmd_estimate(cfg: RunConfig, out: Path, args: argparse.Namespace) -> None:
    vehicle = cfg.vehicle()
    target = cfg.target
    if target not in TARGET_PARAMS:
        raise ConfigError(f"estimation.target must be one of {sorted(TARGET_PARAMS)}", cfg.source,
                          cfg.line("estimation", "target"))
    scenario = cfg.scenario()
    gains, settings = cfg.gains(), cfg.settings()
    schedule, initial = cfg.schedule(), cfg.initial()
    conditions = cfg.conditions() or ()
    params = TARGET_PARAMS[target]

    outcomes: list[ConditionOutcome] = []
    table: list[list[object]] = []
    for ci, cond in enumerate(conditions):
        for seed in cfg.seeds():
            try:
                o = run_condition(vehicle, scenario, target, cond, gains, settings, schedule,
                                  initial, seed)
            except TwinDivergenceError as exc:
                raise DivergedError(f"truth simulation failed: {exc}") from exc
            outcomes.append(o)
            if o.diverged:
                log.warning("condition %d (%s) seed %d: estimator diverged at sample %d",
                            ci, _condition_label(cond), seed, o.diverged_at)
            else:
                name = f"traj_c{ci}_s{seed}"
                write_trajectory_csv(o.result, out / f"{name}.csv")  # type: ignore[arg-type]
                cols = [f"{p}_hat" for p in params] + [f"{p}_true" for p in params]
                (out / f"{name}.gp").write_text(gnuplot_lines(
                    f"{name}.csv", "t", cols, [c for c, _ in TRAJECTORY_COLUMNS],
                    f"{target} estimate, {_condition_label(cond)}, seed {seed}",
                    "deviation [SI]", f"{name}.png"))
            for p in params:
                table.append([_condition_label(cond), seed, p, o.rms[p],
                              "" if o.diverged_at is None else o.diverged_at])

    write_csv(out / "rms_table.csv", ("condition", "seed", "param", "rms_percent", "diverged_at"), table)
    header = ("condition", *(f"{p}_rms_percent" for p in params), "diverged")
    summary = _summary_rows(outcomes, conditions, params)
    write_csv(out / "rms_summary.csv", header, summary)
    _say(args, format_table(header, summary))
    if outcomes and all(o.diverged for o in outcomes):
        raise DivergedError("every estimation run diverged")


# -- tune -------------------------------------------------------------------------------------

def _history_rows(bo: BOResult) -> list[list[object]]:
    rows, best = [], math.inf
    for i, rec in enumerate(bo.history):
        if not rec.diverged:
            best = min(best, rec.raw)
        rows.append([i, *map(float, rec.theta), rec.value, rec.raw, int(rec.diverged), best])
    return rows


def _write_tuning(result: HeadToHeadResult, cfg: RunConfig, out: Path,
                  args: argparse.Namespace) -> None:
    bounds_over = cfg.tune_bounds()
    theta_rows: list[list[object]] = []
    gains_doc: dict[str, dict] = {}
    val_rows: list[list[object]] = []
    val = result.validation
    trace_cols: list[str] = ["t", "dm_true", "beta_true"]
    traces: list[np.ndarray] = [val.t, np.full(len(val.t), result.dm_true), val.beta]
    for name, est in result.estimators.items():
        names, table = (TIL_THETA, TIL_BOUNDS) if name == "til" else (BENCH_THETA, BENCH_BOUNDS)
        box = bounds_for(names, {**table, **bounds_over})
        write_csv(out / f"history_{name}.csv",
                  ("iter", *names, "value", "raw", "diverged", "incumbent"), _history_rows(est.tuning))
        for gain, (lo, hi), opt in zip(names, box, est.tuning.best_theta):
            theta_rows.append([name, gain, lo, hi, float(opt)])
        gains_doc[name] = est.gains.to_dict()
        s = est.score
        val_rows.append([name, s.mass_rms, s.final_mass_error, s.beta_rms, est.tuning.best_value,
                         "" if s.diverged_at is None else s.diverged_at])
        trace_cols += [f"dm_{name}", f"beta_{name}"]
        traces += [est.dm, est.beta]

    write_csv(out / "theta_table.csv", ("estimator", "gain", "lower", "upper", "optimum"), theta_rows)
    (out / "gains.yaml").write_text(yaml.safe_dump(gains_doc, sort_keys=False), encoding="utf-8")
    val_header = ("estimator", "mass_rms_kg", "final_mass_error_kg", "beta_rms_rad", "tuning_cost",
                  "diverged_at")
    write_csv(out / "validation.csv", val_header, val_rows)
    write_csv(out / "validation_traces.csv", trace_cols, np.column_stack(traces).tolist())
    dm_cols = ["dm_true"] + [c for c in trace_cols if c.startswith("dm_") and c != "dm_true"]
    (out / "validation_traces.gp").write_text(gnuplot_lines(
        "validation_traces.csv", "t", dm_cols, trace_cols, "mass deviation on validation",
        "dm [kg]", "validation_traces.png"))
    _say(args, format_table(("estimator", "gain", "lower", "upper", "optimum"), theta_rows))
    _say(args, "")
    _say(args, format_table(val_header, val_rows))


def cmd_tune(cfg: RunConfig, out: Path, args: argparse.Namespace) -> None:
    choice = str(cfg.get("tune", "estimator"))
    if choice not in ESTIMATORS + ("both",):
        raise ConfigError(f"tune.estimator must be one of {ESTIMATORS + ('both',)}", cfg.source,
                          cfg.line("tune", "estimator"))
    estimators = ESTIMATORS if choice == "both" else (choice,)
    vehicle = cfg.vehicle()
    if not cfg.get("tune", "loaded"):
        vehicle = vehicle.unloaded()
    setup = cfg.head_to_head_setup()
    bounds = cfg.tune_bounds()
    unknown = set(bounds) - set(TIL_BOUNDS) - set(BENCH_BOUNDS)
    if unknown:
        raise ConfigError(f"unknown tuned gains in tune.bounds: {sorted(unknown)}", cfg.source,
                          cfg.line("tune", "bounds"))
    try:
        result = head_to_head(vehicle, cfg.gains(), cfg.bench_gains(), cfg.bench_model(),
                              cfg.settings(), setup,
                              {k: v for k, v in bounds.items() if k in TIL_BOUNDS},
                              {k: v for k, v in bounds.items() if k in BENCH_BOUNDS},
                              estimators)
    except AllDivergedError as exc:
        raise DivergedError(str(exc)) from exc
    except TwinDivergenceError as exc:
        raise DivergedError(f"truth simulation failed: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc), cfg.source, cfg.line("tune")) from exc
    _write_tuning(result, cfg, out, args)


# -- sweep ------------------------------------------------------------------------------------

def cmd_sweep(cfg: RunConfig, out: Path, args: argparse.Namespace) -> None:
    s = cfg.get("sweep")
    axis = str(s["axis"])
    values = cfg.build(("sweep", "values"), lambda: [float(v) for v in s["values"]])
    seeds = cfg.build(("sweep", "seeds"), lambda: [int(v) for v in s["seeds"]])
    conditions = cfg.conditions() or (Condition(),)
    target = cfg.target
    try:
        rows = cfg.build(("sweep",), lambda: sweep(
            cfg.vehicle(), cfg.scenario(), target, axis, values, seeds, cfg.gains(), cfg.settings(),
            conditions[0], cfg.schedule(), cfg.initial(), int(s["jobs"])))
    except TwinDivergenceError as exc:
        raise DivergedError(f"truth simulation failed: {exc}") from exc
    header = ("axis", "value", "seed", "param", "rms_percent", "diverged")
    write_csv(out / "sweep.csv", header,
              [[r.axis, r.value, r.seed, r.param, r.rms_percent, int(r.diverged)] for r in rows])
    summary: list[list[object]] = []
    for v in values:
        for p in TARGET_PARAMS[target]:
            mine = [r for r in rows if r.value == v and r.param == p]
            ok = [r.rms_percent for r in mine if not r.diverged]
            summary.append([v, p, statistics.fmean(ok) if ok else math.nan,
                            statistics.median(ok) if ok else math.nan, sum(r.diverged for r in mine)])
    sum_header = (axis, "param", "mean_rms_percent", "median_rms_percent", "diverged")
    write_csv(out / "sweep_summary.csv", sum_header, summary)
    (out / "sweep.gp").write_text(gnuplot_sweep("sweep.csv", axis, "sweep.png"))
    _say(args, format_table(sum_header, summary))
    if rows and all(r.diverged for r in rows):
        raise DivergedError("every sweep run diverged")


# -- report -----------------------------------------------------------------------------------

_SUMMARIES = ("rms_summary.csv", "validation.csv", "theta_table.csv", "sweep_summary.csv")


def _print_csv(path: Path) -> None:
    import csv

    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if rows:
        body = [[_maybe_float(c) for c in r] for r in rows[1:]]
        print(f"{path.name}\n{format_table(rows[0], body)}\n")


def _maybe_float(text: str) -> object:
    try:
        return float(text) if any(ch in text for ch in ".eEn") else text
    except ValueError:
        return text


def cmd_report(args: argparse.Namespace) -> int:
    directory = Path(args.directory)
    if not (directory / MANIFEST_NAME).is_file():
        raise UsageError(f"no {MANIFEST_NAME} in {directory}")
    manifest = RunManifest.read(directory)
    stale = [name for name, digest in manifest.artifacts.items()
             if collect_artifacts(directory).get(name) != digest]
    if not args.verify:
        if not args.quiet:
            print(f"{manifest.command} run, seed {manifest.seed}, {len(manifest.artifacts)} files")
            for name in _SUMMARIES:
                if (directory / name).is_file():
                    _print_csv(directory / name)
        if stale:
            log.warning("files changed since the run: %s", ", ".join(stale))
        return EXIT_OK

    with tempfile.TemporaryDirectory(prefix="twinloop-verify-") as tmp:
        argv = [manifest.command, "--config", str(directory / manifest.config), "--out", tmp, "--quiet"]
        code = main(argv)
        if code != EXIT_OK:
            log.error("re-run exited with status %d", code)
            return code
        fresh = RunManifest.read(tmp).artifacts
    mismatched = sorted(n for n in set(fresh) | set(manifest.artifacts)
                        if fresh.get(n) != manifest.artifacts.get(n))
    mismatched += [n for n in stale if n not in mismatched]
    if mismatched:
        print("MISMATCH: " + ", ".join(mismatched), file=sys.stderr)
        return EXIT_MISMATCH
    _say(args, f"verified {len(fresh)} files bit-identical")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------------

_HANDLERS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "tune": cmd_tune, "sweep": cmd_sweep}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="twinloop: %(message)s", stream=sys.stderr, force=True)
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = _resolve(args)
        out = Path(args.out or f"twinloop-{args.command}")
        out.mkdir(parents=True, exist_ok=True)
        _HANDLERS[args.command](cfg, out, args)
        _finish(out, args.command, cfg, args)
        return EXIT_OK
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UndefinedSNRError as exc:
        print(f"error: scenario.noise: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
