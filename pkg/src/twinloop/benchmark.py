"""Planar double-track observer with an augmented mass state, used as the comparison baseline.

Wheel rates enter as measured inputs, normal loads come from measured
accelerations, and the state is advanced by explicit Euler at the sample rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .observer import YAW_GATE_DEFAULT, EstimationDivergedError, mass_gate
from .rigidbody import VehicleParams
from .twin import MEAS_NAMES, TwinConfig, tire_sweep

log = logging.getLogger(__name__)

_AX, _AY, _WZ = (MEAS_NAMES.index(n) for n in ("ax", "ay", "wz"))
SLIP_FLOOR = 0.5
BENCH_GAINS = ("k_ax_vx", "k_wz_wz", "k_ax_dm", "k_ay_vy")


@dataclass(frozen=True)
class PacejkaCoeffs:
    bx: float = 10.0
    cx: float = 1.9
    dx: float = 1.0
    ex: float = 0.97
    by: float = 10.0
    cy: float = 1.9
    dy: float = 1.0
    ey: float = 0.97

    def __post_init__(self) -> None:
        for name in ("bx", "cx", "dx", "by", "cy", "dy"):
            if not getattr(self, name) > 0:
                raise ValueError(f"Pacejka coefficient {name} must be > 0")
        if not (self.ex < 1 and self.ey < 1):
            raise ValueError("Pacejka curvature E must be < 1")

    @classmethod
    def from_dict(cls, data: Mapping[str, float] | None) -> "PacejkaCoeffs":
        return cls(**{k: float(v) for k, v in (data or {}).items()})

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("bx", "cx", "dx", "ex", "by", "cy", "dy", "ey")}


def pacejka(slip: np.ndarray | float, fz: np.ndarray | float, b: float, c: float, d: float,
            e: float) -> np.ndarray | float:
    bs = b * np.asarray(slip, dtype=float)
    return fz * d * np.sin(c * np.arctan(bs - e * (bs - np.arctan(bs))))


def fit_pacejka(config: TwinConfig, fz: float | None = None) -> PacejkaCoeffs:
    """Least-squares magic-formula fit to the twin's pure-slip curves at one load."""
    from scipy.optimize import least_squares

    fz = config.fz_nominal if fz is None else fz
    slips = np.linspace(-0.3, 0.3, 121)
    out = {}
    for axis, lateral in (("x", False), ("y", True)):
        target = tire_sweep(config, slips, fz, lateral)

        def resid(p: np.ndarray) -> np.ndarray:
            return (pacejka(slips, fz, *p) - target) / fz

        sol = least_squares(resid, [10.0, 1.9, 1.0, 0.0],
                            bounds=([0.5, 0.5, 0.1, -5.0], [50.0, 3.0, 3.0, 0.999]))
        out.update({f"{k}{axis}": float(v) for k, v in zip("bcde", sol.x)})
    return PacejkaCoeffs(**out)


@dataclass(frozen=True)
class BenchState:
    vx: float
    vy: float = 0.0
    wz: float = 0.0
    dm: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.vx, self.vy, self.wz, self.dm)):
            raise ValueError("benchmark state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.wz, self.dm])


@dataclass(frozen=True)
class BenchGains:
    k_ax_vx: float = 0.0
    k_wz_wz: float = 0.0
    k_ax_dm: float = 0.0
    k_ay_vy: float = 0.0
    yaw_gate: float = YAW_GATE_DEFAULT

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "BenchGains":
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in BENCH_GAINS + ("yaw_gate",)}


@dataclass(frozen=True)
class BenchModel:
    """Everything the benchmark knows about the car."""

    params: VehicleParams
    tires: PacejkaCoeffs
    wheel_radius: float = 0.36
    steer_ratio: float = 15.0
    gravity: float = 9.81

    @classmethod
    def from_twin(cls, params: VehicleParams, config: TwinConfig,
                  tires: PacejkaCoeffs | None = None) -> "BenchModel":
        return cls(params, tires or fit_pacejka(config), config.wheel_radius,
                   config.steer_ratio, config.gravity)


class SaturationCounter:
    """Counts clamped normal loads; the first event per run is logged."""

    def __init__(self) -> None:
        self.events = 0

    def record(self, n: int, sample: int | None = None) -> None:
        if n and self.events == 0:
            log.warning("normal load clamped to zero at sample %s", sample)
        self.events += n


def estimate_normal_loads(ax: float, ay: float, mass: float, params: VehicleParams,
                          gravity: float = 9.81,
                          saturation: SaturationCounter | None = None,
                          sample: int | None = None) -> np.ndarray:
    """Quasi-static wheel loads (fl, fr, rl, rr) from CM accelerations.

    Static split by axle distances plus longitudinal transfer m a_x h / wb and
    lateral transfer m a_y h / t shared between axles like the static load.
    """
    wb, t, h = params.wheelbase, params.track, params.h
    lf, lr = params.lf, params.lr
    front = mass * (gravity * lr - ax * h) / wb
    rear = mass * (gravity * lf + ax * h) / wb
    lat = mass * ay * h / t
    lat_f, lat_r = lat * lr / wb, lat * lf / wb
    fz = np.array([0.5 * front - lat_f, 0.5 * front + lat_f,
                   0.5 * rear - lat_r, 0.5 * rear + lat_r])
    neg = fz < 0
    if neg.any():
        # move the clipped load to the opposite wheel so the total is preserved
        for i, j in ((0, 1), (1, 0), (2, 3), (3, 2)):
            if fz[i] < 0:
                fz[j] += fz[i]
                fz[i] = 0.0
        fz = np.maximum(fz, 0.0)
        if saturation is not None:
            saturation.record(int(neg.sum()), sample)
    return fz


def wheel_positions(params: VehicleParams) -> np.ndarray:
    t2 = 0.5 * params.track
    return np.array([[params.lf, t2], [params.lf, -t2], [-params.lr, t2], [-params.lr, -t2]])


def bench_forces(state: BenchState, steer: float, wheel_rates: Sequence[float], fz: np.ndarray,
                 model: BenchModel) -> tuple[float, float, float]:
    """Body-frame (Fx, Fy, Mz) from the four tires."""
    delta = steer / model.steer_ratio
    pos = wheel_positions(model.params)
    tc = model.tires
    fx_sum = fy_sum = mz = 0.0
    for i in range(4):
        x_i, y_i = pos[i]
        vxi = state.vx - state.wz * y_i
        vyi = state.vy + state.wz * x_i
        d = delta if i < 2 else 0.0
        cd, sd = math.cos(d), math.sin(d)
        vxw = vxi * cd + vyi * sd
        vyw = -vxi * sd + vyi * cd
        rw = model.wheel_radius * wheel_rates[i]
        lam = (rw - vxw) / max(abs(rw), abs(vxw), SLIP_FLOOR)
        alpha = -math.atan(vyw / max(abs(vxw), SLIP_FLOOR))
        fxw = pacejka(lam, fz[i], tc.bx, tc.cx, tc.dx, tc.ex)
        fyw = pacejka(alpha, fz[i], tc.by, tc.cy, tc.dy, tc.ey)
        fxb = fxw * cd - fyw * sd
        fyb = fxw * sd + fyw * cd
        fx_sum += fxb
        fy_sum += fyb
        mz += x_i * fyb - y_i * fxb
    return fx_sum, fy_sum, mz


def bench_predict(state: BenchState, steer: float, wheel_rates: Sequence[float], fz: np.ndarray,
                  model: BenchModel, dt: float) -> tuple[BenchState, np.ndarray]:
    """Explicit-Euler step; returns the prior state and its (a_x, a_y) readout."""
    m = model.params.m0 + state.dm
    fx, fy, mz = bench_forces(state, steer, wheel_rates, fz, model)
    nxt = BenchState(state.vx + dt * (fx / m + state.vy * state.wz),
                     state.vy + dt * (fy / m - state.vx * state.wz),
                     state.wz + dt * mz / model.params.jzz,
                     state.dm)
    fx2, fy2, _ = bench_forces(nxt, steer, wheel_rates, fz, model)
    return nxt, np.array([fx2 / m, fy2 / m])


def bench_correct(prior: BenchState, pred_acc: np.ndarray, y: np.ndarray, gains: BenchGains,
                  sign_source: str = "twin", ax_deadband: float = 0.0) -> BenchState:
    r_ax = y[_AX] - pred_acc[0]
    r_ay = y[_AY] - pred_acc[1]
    r_wz = y[_WZ] - prior.wz
    ref = {"measured": y[_AX], "twin": pred_acc[0]}.get(sign_source, 0.5 * (y[_AX] + pred_acc[0]))
    eps = mass_gate(ref, y[_WZ], gains.yaw_gate, ax_deadband)
    return BenchState(prior.vx + gains.k_ax_vx * r_ax, prior.vy + gains.k_ay_vy * r_ay,
                      prior.wz + gains.k_wz_wz * r_wz, prior.dm + gains.k_ax_dm * eps * r_ax)


def bench_step(state: BenchState, inputs: np.ndarray, y: np.ndarray, gains: BenchGains,
               model: BenchModel, dt: float, sign_source: str = "twin",
               saturation: SaturationCounter | None = None) -> BenchState:
    """One predict/correct cycle. ``inputs`` is [steer, w_fl, w_fr, w_rl, w_rr]."""
    m = model.params.m0 + state.dm
    if not m > 0:
        raise ValueError("effective mass must be > 0")
    fz = estimate_normal_loads(y[_AX], y[_AY], m, model.params, model.gravity, saturation)
    prior, acc = bench_predict(state, inputs[0], inputs[1:5], fz, model, dt)
    return bench_correct(prior, acc, y, gains, sign_source)


@dataclass
class BenchResult:
    t: np.ndarray
    states: np.ndarray      # (N, 4) vx, vy, wz, dm
    saturation_events: int

    @property
    def beta(self) -> np.ndarray:
        return np.arctan2(self.states[:, 1], np.maximum(self.states[:, 0], 0.1))

    @property
    def dm(self) -> np.ndarray:
        return self.states[:, 3]


def run_benchmark(model: BenchModel, steer: np.ndarray, measurements: np.ndarray, fs: float,
                  gains: BenchGains, initial: BenchState, sign_source: str = "twin",
                  max_speed: float = 150.0) -> BenchResult:
    """Benchmark observer over a recorded run; wheel rates come from ``measurements``."""
    n = len(measurements)
    dt = 1.0 / fs
    sat = SaturationCounter()
    out = np.empty((n, 4))
    s = initial
    wheel = [MEAS_NAMES.index(k) for k in ("om_fl", "om_fr", "om_rl", "om_rr")]
    for k in range(n):
        y = measurements[k]
        u = np.concatenate(([steer[k]], y[wheel]))
        try:
            s = bench_step(s, u, y, gains, model, dt, sign_source, sat)
        except ValueError as exc:
            raise EstimationDivergedError(f"benchmark failed at sample {k}: {exc}", k) from exc
        if abs(s.vx) > max_speed or abs(s.vy) > max_speed or abs(s.wz) > 10.0:
            raise EstimationDivergedError(f"benchmark diverged at sample {k}", k)
        out[k] = s.as_array()
    return BenchResult(np.arange(1, n + 1) * dt, out, sat.events)
