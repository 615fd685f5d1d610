"""Experiment harnesses shared by the CLI and the acceptance suite.

Each harness simulates a loaded truth vehicle, feeds its (noisy) sensors to an
estimator and scores the result with the metrics module.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .benchmark import BenchGains, BenchModel, BenchState, run_benchmark
from .metrics import rms_percent, rms_window
from .observer import (EstimationDivergedError, EstimationResult, GainSet, ObserverSettings,
                       StageSchedule, run_estimation)
from .rigidbody import LoadConfig, VehicleParams, perturbed_params
from .scenario import Scenario, TruthRun, simulate_truth
from .tuner import (BENCH_BOUNDS, BENCH_THETA, TIL_BOUNDS, TIL_THETA, BOConfig, BOResult,
                    bo_minimize, bounds_for, make_bench_objective, make_til_objective,
                    theta_to_dict)
from .twin import TwinConfig

PARAM_COLUMNS = ("dm", "djxx", "djyy", "djzz")
TARGET_PARAMS = {
    "mass": ("dm",),
    "roll_yaw": ("djxx", "djzz"),
    "pitch": ("djyy",),
    "staged": PARAM_COLUMNS,
}
SWEEP_AXES = ("snr", "road_eps")


@dataclass(frozen=True)
class Vehicle:
    """Unloaded base vehicle, the extra loads carried by the truth, and twin constants."""

    base: VehicleParams
    loads: LoadConfig = field(default_factory=LoadConfig)
    config: TwinConfig = field(default_factory=TwinConfig)

    @cached_property
    def truth(self) -> VehicleParams:
        return perturbed_params(self.base, self.loads)

    @property
    def deviations(self) -> np.ndarray:
        t, b = self.truth, self.base
        return np.array([t.m0 - b.m0, t.jxx - b.jxx, t.jyy - b.jyy, t.jzz - b.jzz])

    def estimator_nominal(self, correct_cm: bool = True) -> VehicleParams:
        """Twin nominal parameters: the base vehicle, optionally with the loaded CM."""
        return replace(self.base, cm=self.truth.cm) if correct_cm else self.base

    def unloaded(self) -> "Vehicle":
        return replace(self, loads=LoadConfig())


@dataclass(frozen=True)
class Condition:
    """One row of a performance table: noise levels and what the twin knows."""

    label: str = ""
    snr: float | None = 10.0
    road_eps: float = 0.0
    correct_mass: bool = True
    correct_cm: bool = True

    def describe(self) -> str:
        if self.label:
            return self.label
        parts = ["noiseless" if self.snr is None else f"snr={self.snr:g}"]
        if self.road_eps:
            parts.append(f"eps_z={self.road_eps:g}")
        parts.append("correct mass" if self.correct_mass else "wrong mass")
        parts.append("correct CM" if self.correct_cm else "wrong CM")
        return "; ".join(parts)


CONDITION_TABLES: dict[str, tuple[Condition, ...]] = {
    "mass": (
        Condition(snr=None),
        Condition(snr=10.0),
        Condition(snr=10.0, correct_cm=False),
    ),
    "roll_yaw": (
        Condition(snr=None),
        Condition(snr=None, correct_mass=False),
        Condition(snr=10.0),
        Condition(snr=10.0, correct_mass=False),
        Condition(snr=10.0, correct_mass=False, correct_cm=False),
    ),
    "pitch": (
        Condition(snr=None),
        Condition(snr=None, road_eps=0.1),
        Condition(snr=10.0),
        Condition(snr=10.0, road_eps=0.1),
        Condition(snr=10.0, road_eps=0.1, correct_mass=False),
        Condition(snr=10.0, road_eps=0.1, correct_cm=False),
        Condition(snr=10.0, road_eps=0.1, correct_mass=False, correct_cm=False),
    ),
}


def default_schedule(target: str) -> StageSchedule:
    if target not in TARGET_PARAMS:
        raise ValueError(f"unknown estimation target {target!r}; expected one of {tuple(TARGET_PARAMS)}")
    return StageSchedule() if target == "staged" else StageSchedule.single(target)


def initial_deviations(vehicle: Vehicle, target: str, condition: Condition,
                       initial: Sequence[float] = (0.0, 0.0, 0.0, 0.0)) -> tuple[float, ...]:
    """Starting (dm, djxx, djyy, djzz).

    When the mass is not being estimated a "correct mass" twin starts at the
    true mass deviation; otherwise the requested initial value is used.
    """
    init = [float(v) for v in initial]
    if len(init) != 4:
        raise ValueError("initial deviations need four values")
    if target not in ("mass", "staged") and condition.correct_mass:
        init[0] = float(vehicle.deviations[0])
    return tuple(init)


def condition_scenario(scenario: Scenario, condition: Condition, vehicle: Vehicle,
                       seed: int | None = None) -> Scenario:
    noise = replace(scenario.noise, snr=condition.snr, road_eps=condition.road_eps)
    if condition.snr is None:
        noise = replace(noise, sigma={})
    return replace(scenario, noise=noise, loads=vehicle.loads,
                   seed=scenario.seed if seed is None else int(seed))


@dataclass
class ConditionOutcome:
    condition: Condition
    seed: int
    rms: dict[str, float]
    result: EstimationResult | None
    run: TruthRun | None
    diverged_at: int | None = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


def run_condition(vehicle: Vehicle, scenario: Scenario, target: str, condition: Condition,
                  gains: GainSet, settings: ObserverSettings | None = None,
                  schedule: StageSchedule | None = None,
                  initial: Sequence[float] = (0.0, 0.0, 0.0, 0.0), seed: int | None = None,
                  window: float = 1.0, keep_traces: bool = True) -> ConditionOutcome:
    """Simulate the truth under ``condition`` and score the estimated parameters (rms%).

    A diverged estimator yields ``nan`` scores and records the failing sample.
    """
    sc = condition_scenario(scenario, condition, vehicle, seed)
    schedule = schedule or default_schedule(target)
    run = simulate_truth(sc, vehicle.base, vehicle.config)
    dev = vehicle.deviations
    init = initial_deviations(vehicle, target, condition, initial)
    params = TARGET_PARAMS[target]
    try:
        res = run_estimation(vehicle.estimator_nominal(condition.correct_cm), vehicle.config,
                             run.u_twin, run.y, sc.fs, gains, schedule, initial=init,
                             x0=run.x0, settings=settings, truth=tuple(dev))
    except EstimationDivergedError as exc:
        return ConditionOutcome(condition, sc.seed, {p: math.nan for p in params}, None,
                                run if keep_traces else None, exc.sample)
    rms = {p: rms_percent(res.column(p), dev[PARAM_COLUMNS.index(p)], sc.fs, window)
           for p in params}
    if not keep_traces:
        return ConditionOutcome(condition, sc.seed, rms, None, None)
    return ConditionOutcome(condition, sc.seed, rms, res, run)


def run_table(vehicle: Vehicle, scenario: Scenario, target: str, gains: GainSet,
              settings: ObserverSettings | None = None,
              conditions: Sequence[Condition] | None = None, seeds: Sequence[int] = (1,),
              schedule: StageSchedule | None = None,
              initial: Sequence[float] = (0.0, 0.0, 0.0, 0.0)) -> list[ConditionOutcome]:
    """Every condition of the target's table (or ``conditions``) for every seed."""
    conds = CONDITION_TABLES[target] if conditions is None else tuple(conditions)
    return [run_condition(vehicle, scenario, target, c, gains, settings, schedule, initial, s)
            for c in conds for s in seeds]


# -- sensitivity sweeps -----------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    seed: int
    param: str
    rms_percent: float
    diverged: bool


@dataclass(frozen=True)
class _SweepJob:
    vehicle: Vehicle
    scenario: Scenario
    target: str
    condition: Condition
    gains: GainSet
    settings: ObserverSettings | None
    schedule: StageSchedule | None
    initial: tuple[float, ...]
    axis: str
    value: float
    seed: int


def _run_sweep_job(job: _SweepJob) -> list[SweepRow]:
    cond = replace(job.condition, **{job.axis: job.value})
    out = run_condition(job.vehicle, job.scenario, job.target, cond, job.gains, job.settings,
                        job.schedule, job.initial, job.seed, keep_traces=False)
    return [SweepRow(job.axis, job.value, job.seed, p, v, out.diverged) for p, v in out.rms.items()]


def sweep(vehicle: Vehicle, scenario: Scenario, target: str, axis: str, values: Sequence[float],
          seeds: Sequence[int], gains: GainSet, settings: ObserverSettings | None = None,
          base_condition: Condition = Condition(), schedule: StageSchedule | None = None,
          initial: Sequence[float] = (0.0, 0.0, 0.0, 0.0), jobs: int = 1) -> list[SweepRow]:
    """One rms% row per (value, seed, estimated parameter), ordered by value then seed."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}")
    vals = [float(v) for v in values]
    if vals != sorted(vals):
        raise ValueError("sweep values must be sorted ascending")
    jobs_list = [_SweepJob(vehicle, scenario, target, base_condition, gains, settings, schedule,
                           tuple(initial), axis, v, int(s)) for v in vals for s in seeds]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            chunks = list(ex.map(_run_sweep_job, jobs_list))
    else:
        chunks = [_run_sweep_job(j) for j in jobs_list]
    return [row for chunk in chunks for row in chunk]


# -- TiL vs planar benchmark ------------------------------------------------------------------

@dataclass(frozen=True)
class HeadToHeadSetup:
    tuning_kind: str = "circuit-like"
    tuning_duration: float = 60.0
    validation_kind: str = "lane-change-braking"
    validation_duration: float = 120.0
    drag_scale: float = 1.15
    tire_stiffness_scale: float = 0.9
    snr: float | None = 10.0
    initial_dm: float = -350.0
    iterations: int = 40
    n_seed: int = 10
    seed: int = 0
    jobs: int = 1


ESTIMATORS = ("til", "benchmark")


@dataclass
class EstimatorScore:
    mass_rms: float          # final 1 s window, kg
    final_mass_error: float  # |dm_hat - dm| at the last sample, kg
    beta_rms: float          # whole run, rad
    diverged_at: int | None = None


@dataclass
class TunedEstimator:
    name: str
    tuning: BOResult
    gains: GainSet | BenchGains
    score: EstimatorScore
    dm: np.ndarray           # validation trace of the estimated mass deviation
    beta: np.ndarray         # validation trace of the estimated sideslip


@dataclass
class HeadToHeadResult:
    setup: HeadToHeadSetup
    dm_true: float
    validation: TruthRun
    estimators: dict[str, TunedEstimator]

    @property
    def til(self) -> TunedEstimator:
        return self.estimators["til"]

    @property
    def bench(self) -> TunedEstimator:
        return self.estimators["benchmark"]


def _mismatch_run(vehicle: Vehicle, kind: str, duration: float, setup: HeadToHeadSetup,
                  seed: int) -> TruthRun:
    from .scenario import NoiseSettings

    sc = Scenario(kind, duration, seed=seed, noise=NoiseSettings(snr=setup.snr),
                  loads=vehicle.loads, drag_scale=setup.drag_scale,
                  tire_stiffness_scale=setup.tire_stiffness_scale)
    return simulate_truth(sc, vehicle.base, vehicle.config)


def _score(run: TruthRun, dm_true: float, dm_hat: np.ndarray, beta_hat: np.ndarray) -> EstimatorScore:
    err = dm_hat - dm_true
    return EstimatorScore(rms_window(err, run.scenario.fs), float(abs(err[-1])),
                          float(np.sqrt(np.mean((run.beta - beta_hat) ** 2))))


def _diverged(n: int, sample: int) -> tuple[EstimatorScore, np.ndarray, np.ndarray]:
    nan = np.full(n, np.nan)
    return EstimatorScore(math.nan, math.nan, math.nan, sample), nan, nan.copy()


def head_to_head(vehicle: Vehicle, til_base: GainSet, bench_base: BenchGains, bench_model: BenchModel,
                 settings: ObserverSettings | None = None,
                 setup: HeadToHeadSetup = HeadToHeadSetup(),
                 til_bounds: dict[str, tuple[float, float]] | None = None,
                 bench_bounds: dict[str, tuple[float, float]] | None = None,
                 estimators: Sequence[str] = ESTIMATORS) -> HeadToHeadResult:
    """Tune observers on one manoeuvre with the same BO budget, then validate on another.

    The truth carries unmodeled drag and tire-stiffness offsets; every
    estimator starts ``initial_dm`` away from the true mass of ``vehicle``.
    Raises :class:`~twinloop.tuner.AllDivergedError` when a tuning seed phase
    diverges everywhere.
    """
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown or not estimators:
        raise ValueError(f"estimators must be a non-empty subset of {ESTIMATORS}")
    nominal = vehicle.estimator_nominal(correct_cm=True)
    dm_true = float(vehicle.deviations[0])
    tune_run = _mismatch_run(vehicle, setup.tuning_kind, setup.tuning_duration, setup, setup.seed + 1)
    val_run = _mismatch_run(vehicle, setup.validation_kind, setup.validation_duration, setup,
                            setup.seed + 1001)
    fs, n = val_run.scenario.fs, len(val_run.t)
    dm0 = dm_true + setup.initial_dm
    out: dict[str, TunedEstimator] = {}

    if "til" in estimators:
        tb = {**TIL_BOUNDS, **(til_bounds or {})}
        cfg = BOConfig(bounds_for(TIL_THETA, tb), setup.iterations, setup.n_seed, seed=setup.seed,
                       jobs=setup.jobs, names=TIL_THETA)
        bo = bo_minimize(make_til_objective(tune_run, nominal, vehicle.config, til_base, settings,
                                            dm0, dm_true), cfg)
        gains = til_base.with_values(**theta_to_dict(bo.best_theta, TIL_THETA))
        try:
            res = run_estimation(nominal, vehicle.config, val_run.u_twin, val_run.y, fs, gains,
                                 StageSchedule.single("mass"), initial=(dm0, 0.0, 0.0, 0.0),
                                 x0=val_run.x0, settings=settings)
            dm, beta = res.column("dm"), res.beta
            score = _score(val_run, dm_true, dm, beta)
        except EstimationDivergedError as exc:
            score, dm, beta = _diverged(n, exc.sample)
        out["til"] = TunedEstimator("til", bo, gains, score, dm, beta)

    if "benchmark" in estimators:
        bb = {**BENCH_BOUNDS, **(bench_bounds or {})}
        cfg = BOConfig(bounds_for(BENCH_THETA, bb), setup.iterations, setup.n_seed,
                       seed=setup.seed, jobs=setup.jobs, names=BENCH_THETA)
        bo = bo_minimize(make_bench_objective(tune_run, bench_model, bench_base, dm0, dm_true), cfg)
        bgains = replace(bench_base, **theta_to_dict(bo.best_theta, BENCH_THETA))
        try:
            bres = run_benchmark(bench_model, val_run.u_twin[:, 0], val_run.y, fs, bgains,
                                 BenchState(float(val_run.x0[0]), 0.0, 0.0, dm0))
            dm, beta = bres.dm, bres.beta
            score = _score(val_run, dm_true, dm, beta)
        except EstimationDivergedError as exc:
            score, dm, beta = _diverged(n, exc.sample)
        out["benchmark"] = TunedEstimator("benchmark", bo, bgains, score, dm, beta)

    return HeadToHeadResult(setup, dm_true, val_run, out)


__all__ = [
    "CONDITION_TABLES", "Condition", "ConditionOutcome", "ESTIMATORS", "EstimatorScore", "HeadToHeadResult",
    "HeadToHeadSetup", "PARAM_COLUMNS", "SWEEP_AXES", "SweepRow", "TARGET_PARAMS", "Vehicle",
    "default_schedule", "head_to_head", "initial_deviations",
    "run_condition", "run_table", "sweep", "TunedEstimator",
]
