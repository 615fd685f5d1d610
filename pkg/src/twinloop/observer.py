"""Twin-in-the-loop estimator: augmented state, correction laws and the staged run loop.

Only the public :class:`~twinloop.twin.DigitalTwin` surface (step, readout,
inject, set_params) is used here; the vehicle equations stay opaque.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .rigidbody import VehicleParams
from .twin import (MEAS_NAMES, DigitalTwin, TwinConfig, TwinDivergenceError, TwinState, inject)

YAW_GATE_DEFAULT = math.radians(3.0)
SIGN_SOURCES = ("twin", "measured", "fused")
_AX, _AY, _WX, _WY, _WZ = (MEAS_NAMES.index(n) for n in ("ax", "ay", "wx", "wy", "wz"))
_WHEELS = tuple(range(6, 10))
_WHEEL_STATES = ("om_fl", "om_fr", "om_rl", "om_rr")

STATE_GAINS = ("k_wheel", "k_ax_vx", "k_ay_vy", "k_wy_wy", "k_wz_wz")
PARAM_GAINS = ("k_ax_dm", "k_wdx_djxx", "k_wdy_djyy", "k_wdz_djzz")
GAIN_NAMES = STATE_GAINS + PARAM_GAINS


class EstimationDivergedError(RuntimeError):
    def __init__(self, message: str, sample: int):
        super().__init__(message)
        self.sample = sample


@dataclass(frozen=True)
class GainSet:
    """Sparse correction gains plus the yaw-rate gate for the mass law.

    ``bounds`` maps gain names to (lower, upper); a gain outside its bounds is
    rejected at construction.
    """

    k_wheel: float = 0.0
    k_ax_vx: float = 0.0
    k_ay_vy: float = 0.0
    k_wy_wy: float = 0.0
    k_wz_wz: float = 0.0
    k_ax_dm: float = 0.0
    k_wdx_djxx: float = 0.0
    k_wdy_djyy: float = 0.0
    k_wdz_djzz: float = 0.0
    yaw_gate: float = YAW_GATE_DEFAULT
    bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.yaw_gate > 0:
            raise ValueError("yaw_gate must be > 0")
        for name in GAIN_NAMES:
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"gain {name} is not finite")
        for name, (lo, hi) in self.bounds.items():
            if name not in GAIN_NAMES:
                raise ValueError(f"bounds given for unknown gain {name!r}")
            if not lo <= getattr(self, name) <= hi:
                raise ValueError(f"gain {name}={getattr(self, name)} outside [{lo}, {hi}]")

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "GainSet":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown gain keys {sorted(unknown)}")
        kw = dict(data)
        if "bounds" in kw:
            kw["bounds"] = {k: (float(v[0]), float(v[1])) for k, v in dict(kw["bounds"]).items()}
        return cls(**{k: (v if k == "bounds" else float(v)) for k, v in kw.items()})

    def to_dict(self) -> dict[str, object]:
        out: dict[str, object] = {n: getattr(self, n) for n in GAIN_NAMES}
        out["yaw_gate"] = self.yaw_gate
        if self.bounds:
            out["bounds"] = {k: list(v) for k, v in self.bounds.items()}
        return out

    def scaled(self, factor: float) -> "GainSet":
        return replace(self, bounds={}, **{n: getattr(self, n) * factor for n in GAIN_NAMES})

    def with_values(self, **values: float) -> "GainSet":
        return replace(self, **values)


@dataclass(frozen=True)
class AugmentedState:
    twin: TwinState
    dm: float = 0.0
    djxx: float = 0.0
    djyy: float = 0.0
    djzz: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.deviations):
            raise ValueError("parameter deviations must be finite")

    @property
    def deviations(self) -> tuple[float, float, float, float]:
        return (self.dm, self.djxx, self.djyy, self.djzz)


@dataclass(frozen=True)
class Innovation:
    """Residuals of one sample.

    ``predicted`` is the twin's a-priori readout; ``wdot_meas`` / ``wdot_pred`` are
    the filtered angular accelerations (x, y, z) of the measurement and of the twin.
    """

    measured: np.ndarray
    predicted: np.ndarray
    wdot_meas: np.ndarray = field(default_factory=lambda: np.zeros(3))
    wdot_pred: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def residual(self) -> np.ndarray:
        return self.measured - self.predicted

    @property
    def wdot_residual(self) -> np.ndarray:
        return self.wdot_meas - self.wdot_pred


class RateDifferentiator:
    """Backward difference followed by a first-order low-pass (discretized by backward Euler)."""

    def __init__(self, fs: float, cutoff_hz: float | Sequence[float], width: int = 3):
        cut = np.broadcast_to(np.asarray(cutoff_hz, dtype=float), (width,))
        if fs <= 0 or np.any(cut <= 0):
            raise ValueError("fs and cutoff must be > 0")
        dt = 1.0 / fs
        tau = 1.0 / (2.0 * math.pi * cut)
        self.alpha = dt / (dt + tau)
        self.fs = fs
        self._prev: np.ndarray | None = None
        self._out = np.zeros(width)

    def reset(self, initial: Sequence[float] | None = None) -> None:
        self._prev = None if initial is None else np.array(initial, dtype=float)
        self._out[:] = 0.0

    def update(self, value: np.ndarray, previous: np.ndarray | None = None) -> np.ndarray:
        """Filtered derivative; ``previous`` overrides the stored last input."""
        prev = previous if previous is not None else self._prev
        raw = np.zeros_like(self._out) if prev is None else (value - prev) * self.fs
        self._out = self._out + self.alpha * (raw - self._out)
        self._prev = np.array(value, dtype=float)
        return self._out.copy()


# -- correction laws --------------------------------------------------------------------------

def state_correction(innov: Innovation, gains: GainSet) -> dict[str, float]:
    """Sparse linear map from output residuals onto correctable states."""
    r = innov.residual
    corr = {
        "vx": gains.k_ax_vx * r[_AX],
        "vy": gains.k_ay_vy * r[_AY],
        "wy": gains.k_wy_wy * r[_WY],
        "wz": gains.k_wz_wz * r[_WZ],
    }
    for name, j in zip(_WHEEL_STATES, _WHEELS):
        corr[name] = gains.k_wheel * r[j]
    return {k: v for k, v in corr.items() if v != 0.0}


def state_gain_matrix(gains: GainSet) -> np.ndarray:
    """Dense (correctable-state x measurement) equivalent of :func:`state_correction`."""
    from .twin import CORRECTABLE
    k = np.zeros((len(CORRECTABLE), len(MEAS_NAMES)))
    pairs = {"vx": (_AX, gains.k_ax_vx), "vy": (_AY, gains.k_ay_vy),
             "wy": (_WY, gains.k_wy_wy), "wz": (_WZ, gains.k_wz_wz)}
    for i, name in enumerate(CORRECTABLE):
        if name in pairs:
            j, g = pairs[name]
            k[i, j] = g
        else:
            k[i, MEAS_NAMES.index(name)] = gains.k_wheel
    return k


def correct_states(aug: AugmentedState, innov: Innovation, gains: GainSet,
                   config: TwinConfig | None = None) -> AugmentedState:
    corr = state_correction(innov, gains)
    if not corr:
        return aug
    return replace(aug, twin=inject(aug.twin, corr, config))


def mass_gate(ax: float, wz: float, yaw_gate: float, deadband: float = 0.0) -> int:
    """Switching factor of the mass law: 0 while cornering, else the sign of a_x.

    ``deadband`` additionally gates out samples with |a_x| below it.
    """
    if abs(wz) > yaw_gate or abs(ax) < deadband:
        return 0
    return 1 if ax >= 0 else -1


def _sign(v: float) -> float:
    return 1.0 if v > 0 else (-1.0 if v < 0 else 0.0)


def _reference(measured: float, predicted: float, source: str) -> float:
    if source == "measured":
        return measured
    if source == "twin":
        return predicted
    return 0.5 * (measured + predicted)


def mass_increment(innov: Innovation, gains: GainSet,
                   settings: "ObserverSettings | None" = None) -> float:
    settings = settings or ObserverSettings()
    ref = _reference(innov.measured[_AX], innov.predicted[_AX], settings.sign_source)
    eps = mass_gate(ref, innov.measured[_WZ], gains.yaw_gate, settings.ax_deadband)
    return gains.k_ax_dm * eps * (innov.measured[_AX] - innov.predicted[_AX])


def inertia_increment(innov: Innovation, axis: int, gain: float,
                      settings: "ObserverSettings | None" = None) -> float:
    """Gain x angular-acceleration residual x sign of the angular acceleration on ``axis``."""
    settings = settings or ObserverSettings()
    ref = _reference(innov.wdot_meas[axis], innov.wdot_pred[axis], settings.sign_source)
    if abs(ref) < settings.wdot_deadband[axis]:
        return 0.0
    return gain * (innov.wdot_meas[axis] - innov.wdot_pred[axis]) * _sign(ref)


def correct_mass(aug: AugmentedState, innov: Innovation, gains: GainSet,
                 settings: "ObserverSettings | None" = None) -> AugmentedState:
    return replace(aug, dm=aug.dm + mass_increment(innov, gains, settings))


def correct_roll_yaw_inertia(aug: AugmentedState, innov: Innovation, gains: GainSet,
                             settings: "ObserverSettings | None" = None) -> AugmentedState:
    return replace(aug,
                   djxx=aug.djxx + inertia_increment(innov, 0, gains.k_wdx_djxx, settings),
                   djzz=aug.djzz + inertia_increment(innov, 2, gains.k_wdz_djzz, settings))


def correct_pitch_inertia(aug: AugmentedState, innov: Innovation, gains: GainSet,
                          settings: "ObserverSettings | None" = None) -> AugmentedState:
    return replace(aug, djyy=aug.djyy + inertia_increment(innov, 1, gains.k_wdy_djyy, settings))


# -- staged schedule --------------------------------------------------------------------------

STAGES = ("mass", "pitch", "roll_yaw")
_STAGE_LAW = {"mass": correct_mass, "pitch": correct_pitch_inertia,
              "roll_yaw": correct_roll_yaw_inertia}


@dataclass(frozen=True)
class Stage:
    name: str
    duration: float

    def __post_init__(self) -> None:
        if self.name not in STAGES:
            raise ValueError(f"unknown stage {self.name!r}; expected one of {STAGES}")
        if not self.duration >= 0:
            raise ValueError("stage duration must be >= 0")


@dataclass(frozen=True)
class StageSchedule:
    """Ordered stages switched on elapsed time; after the last one no law is active."""

    stages: tuple[Stage, ...] = (Stage("mass", 60.0), Stage("pitch", 40.0), Stage("roll_yaw", 30.0))

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))

    @classmethod
    def single(cls, name: str, duration: float = math.inf) -> "StageSchedule":
        return cls((Stage(name, duration),))

    @classmethod
    def from_list(cls, items: Iterable[Mapping[str, object]]) -> "StageSchedule":
        return cls(tuple(Stage(str(i["name"]), float(i["duration"])) for i in items))

    def active(self, t: float) -> int:
        """Index of the stage running at elapsed time ``t``, or -1 when finished."""
        start = 0.0
        for i, s in enumerate(self.stages):
            if t < start + s.duration:
                return i
            start += s.duration
        return -1

    def stage_name(self, index: int) -> str:
        return "none" if index < 0 else self.stages[index].name


# -- run loop ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class ObserverSettings:
    """Choices that are not gains: where the law's sign comes from and the rate filter.

    ``cutoff_hz`` and ``wdot_deadband`` take one value or one per axis (x, y, z).
    """

    sign_source: str = "twin"
    cutoff_hz: float | tuple[float, float, float] = 10.0
    ax_deadband: float = 0.0
    wdot_deadband: float | tuple[float, float, float] = 0.0

    def __post_init__(self) -> None:
        if self.sign_source not in SIGN_SOURCES:
            raise ValueError(f"sign_source must be one of {SIGN_SOURCES}")
        for name in ("cutoff_hz", "wdot_deadband"):
            val = getattr(self, name)
            vals = tuple(float(v) for v in val) if isinstance(val, (tuple, list)) else (float(val),) * 3
            if len(vals) != 3:
                raise ValueError(f"{name} needs one value or three")
            object.__setattr__(self, name, vals)
        if min(self.cutoff_hz) <= 0:
            raise ValueError("cutoff_hz must be > 0")
        if self.ax_deadband < 0 or min(self.wdot_deadband) < 0:
            raise ValueError("deadbands must be >= 0")


@dataclass
class EstimationResult:
    t: np.ndarray
    deviations: np.ndarray      # (N, 4) dm, djxx, djyy, djzz after each sample
    stage: np.ndarray           # active stage index per sample
    residuals: np.ndarray       # (N, 10) y - y_tilde
    vx: np.ndarray
    vy: np.ndarray
    schedule: StageSchedule
    truth: tuple[float, float, float, float] | None = None
    stage_names: tuple[str, ...] = ()

    @property
    def beta(self) -> np.ndarray:
        return np.arctan2(self.vy, np.maximum(self.vx, 0.1))

    def column(self, name: str) -> np.ndarray:
        return self.deviations[:, ("dm", "djxx", "djyy", "djzz").index(name)]


def run_estimation(nominal: VehicleParams, config: TwinConfig, inputs: np.ndarray,
                   measurements: np.ndarray, fs: float, gains: GainSet,
                   schedule: StageSchedule, initial: Sequence[float] = (0.0, 0.0, 0.0, 0.0),
                   x0: TwinState | np.ndarray | None = None,
                   settings: ObserverSettings | None = None,
                   truth: Sequence[float] | None = None) -> EstimationResult:
    """Predict / correct loop over a recorded run.

    ``inputs`` (N, 5) and ``measurements`` (N, 10) are aligned per sample;
    ``initial`` holds the starting (dm, djxx, djyy, djzz).
    """
    settings = settings or ObserverSettings()
    n = len(measurements)
    if len(inputs) != n:
        raise ValueError("inputs and measurements must have the same length")
    dt = 1.0 / fs
    state0 = x0 if isinstance(x0, TwinState) else TwinState(x0)
    twin = DigitalTwin(nominal, config, state0)
    aug = AugmentedState(state0, *map(float, initial))
    twin.set_params(*aug.deviations)
    meas_diff = RateDifferentiator(fs, settings.cutoff_hz)
    pred_diff = RateDifferentiator(fs, settings.cutoff_hz)
    prev_meas_w = np.array(measurements[0, _WX:_WZ + 1], dtype=float) if n else np.zeros(3)
    prev_post_w = np.array([state0.wx, state0.wy, state0.wz])

    devs = np.empty((n, 4))
    stages = np.empty(n, dtype=np.int8)
    res = np.empty((n, 10))
    vx = np.empty(n)
    vy = np.empty(n)
    laws = [_STAGE_LAW[s.name] for s in schedule.stages]
    for k in range(n):
        u = inputs[k]
        y = measurements[k]
        try:
            prior = twin.step(u, dt)
        except TwinDivergenceError as exc:
            raise EstimationDivergedError(f"twin diverged at sample {k}: {exc}", k) from exc
        y_pred = twin.readout(u)
        w_meas = y[_WX:_WZ + 1]
        w_prior = np.array([prior.wx, prior.wy, prior.wz])
        innov = Innovation(y, y_pred,
                           meas_diff.update(w_meas, prev_meas_w),
                           pred_diff.update(w_prior, prev_post_w))
        prev_meas_w = w_meas
        aug = replace(aug, twin=prior)
        try:
            aug = correct_states(aug, innov, gains, config)
        except ValueError as exc:
            raise EstimationDivergedError(f"state correction rejected at sample {k}: {exc}", k) from exc
        idx = schedule.active(k * dt)
        if idx >= 0:
            aug = laws[idx](aug, innov, gains, settings)
            try:
                twin.set_params(*aug.deviations)
            except ValueError as exc:
                raise EstimationDivergedError(f"non-physical parameters at sample {k}: {exc}", k) from exc
        twin.state = aug.twin
        post = aug.twin
        prev_post_w = np.array([post.wx, post.wy, post.wz])
        devs[k] = aug.deviations
        stages[k] = idx
        res[k] = innov.residual
        vx[k] = post.vx
        vy[k] = post.vy
    return EstimationResult(np.arange(1, n + 1) * dt, devs, stages, res, vx, vy, schedule,
                            None if truth is None else tuple(map(float, truth)),
                            tuple(s.name for s in schedule.stages))


# -- logging ----------------------------------------------------------------------------------

TRAJECTORY_COLUMNS = (
    ("t", "time [s]"),
    ("stage", "active stage (mass, pitch, roll_yaw, none)"),
    ("dm_true", "truth mass deviation [kg]"),
    ("djxx_true", "truth roll inertia deviation [kg m^2]"),
    ("djyy_true", "truth pitch inertia deviation [kg m^2]"),
    ("djzz_true", "truth yaw inertia deviation [kg m^2]"),
    ("dm_hat", "estimated mass deviation [kg]"),
    ("djxx_hat", "estimated roll inertia deviation [kg m^2]"),
    ("djyy_hat", "estimated pitch inertia deviation [kg m^2]"),
    ("djzz_hat", "estimated yaw inertia deviation [kg m^2]"),
    ("beta_hat", "estimated sideslip [rad]"),
) + tuple((f"res_{n}", f"residual y - y_tilde on {n} [SI]") for n in MEAS_NAMES)


def write_trajectory_csv(result: EstimationResult, path: str | Path) -> Path:
    path = Path(path)
    truth = result.truth or (math.nan,) * 4
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c for c, _ in TRAJECTORY_COLUMNS])
        beta = result.beta
        for k in range(len(result.t)):
            w.writerow([repr(float(result.t[k])), result.schedule.stage_name(int(result.stage[k])),
                        *(repr(float(v)) for v in truth), *(repr(float(v)) for v in result.deviations[k]),
                        repr(float(beta[k])), *(repr(float(v)) for v in result.residuals[k])])
    return path
