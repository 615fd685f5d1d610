"""Driver inputs, road profiles, noise realizations and truth-vehicle runs."""

from __future__ import annotations

import math
import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .rigidbody import LoadConfig, VehicleParams, perturbed_params
from .twin import (MEAS_NAMES, STATE_NAMES, DigitalTwin, TwinConfig, TwinDivergenceError, TwinState)

KINDS = ("urban", "swept-steer", "constant-speed-rough-road", "circuit-like", "lane-change-braking")

# stream keys so each generator draws from its own RNG
_STREAM = {"inputs": 1, "road": 2, "road_noise": 3, "meas_noise": 4}


def rng_for(seed: int, stream: str, rep: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STREAM[stream], int(rep)])


@dataclass(frozen=True)
class NoiseSettings:
    """Additive white measurement noise and multiplicative road-profile noise.

    ``snr`` is a power ratio (signal mean square over noise variance) applied to
    every channel in ``channels``; ``sigma`` overrides it per channel.
    ``snr=None`` or ``inf`` means noiseless.
    """

    snr: float | None = None
    channels: tuple[str, ...] = ("ax", "wx", "wy", "wz")
    sigma: dict[str, float] = field(default_factory=dict)
    road_eps: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(self.channels))
        bad = (set(self.channels) | set(self.sigma)) - set(MEAS_NAMES)
        if bad:
            raise ValueError(f"unknown measurement channels {sorted(bad)}")
        if any(s < 0 for s in self.sigma.values()):
            raise ValueError("noise standard deviations must be >= 0")
        if self.snr is not None and not self.snr > 0:
            raise ValueError("snr must be > 0")
        if not 0.0 <= self.road_eps <= 0.5:
            raise ValueError("road_eps must lie in [0, 0.5]")

    @property
    def noiseless(self) -> bool:
        return (self.snr is None or math.isinf(self.snr)) and not any(self.sigma.values())


@dataclass(frozen=True)
class Scenario:
    kind: str
    duration: float
    fs: float = 100.0
    seed: int = 0
    speed: float = 20.0          # target speed for constant-speed kinds, m/s
    sigma_z: float = 0.01        # road random-walk intensity, m / sqrt(s)
    steer_amplitude: float = 0.5  # steering-wheel rad for swept steer
    noise: NoiseSettings = field(default_factory=NoiseSettings)
    loads: LoadConfig = field(default_factory=LoadConfig)
    drag_scale: float = 1.0
    tire_stiffness_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if self.duration < 0 or self.fs <= 0:
            raise ValueError("duration must be >= 0 and fs > 0")
        n = self.duration * self.fs
        if abs(n - round(n)) > 1e-6:
            raise ValueError(f"duration*fs must be integral, got {n}")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.fs))

    @property
    def dt(self) -> float:
        return 1.0 / self.fs


# -- road -------------------------------------------------------------------------------------

def gen_road_profile(duration: float, fs: float, sigma_z: float, seed: int) -> np.ndarray:
    """Front-wheel road height: integral of white noise of intensity ``sigma_z``.

    Discretized as a Wiener process, so Var[z(t)] = sigma_z**2 * t independently
    of the sampling rate.
    """
    n = int(round(duration * fs))
    if sigma_z < 0:
        raise ValueError("sigma_z must be >= 0")
    if n == 0:
        return np.zeros(0)
    if sigma_z == 0:
        return np.zeros(n)
    dt = 1.0 / fs
    eta = rng_for(seed, "road").normal(0.0, sigma_z / math.sqrt(dt), n - 1)
    return np.concatenate(([0.0], np.cumsum(eta * dt)))


def rear_profile(z_front: np.ndarray, fs: float, speed: float | np.ndarray, wheelbase: float) -> np.ndarray:
    """Rear-wheel height: the front profile delayed by the wheelbase travel time."""
    t = np.arange(len(z_front)) / fs
    v = np.maximum(np.broadcast_to(np.asarray(speed, dtype=float), t.shape), 0.1)
    return np.interp(t - wheelbase / v, t, z_front, left=0.0)


def corrupt_road(z: np.ndarray, eps: float, seed: int) -> np.ndarray:
    """Multiplicative uniform noise z * U(1-eps, 1+eps)."""
    if eps == 0:
        return np.array(z, dtype=float, copy=True)
    u = rng_for(seed, "road_noise").uniform(1.0 - eps, 1.0 + eps, len(z))
    return z * u


# -- measurement noise ------------------------------------------------------------------------

class UndefinedSNRError(ValueError):
    pass


def noise_sigmas(clean: np.ndarray, settings: NoiseSettings) -> dict[str, float]:
    out: dict[str, float] = {}
    snr_on = settings.snr is not None and not math.isinf(settings.snr)
    for ch in settings.channels:
        if ch in settings.sigma:
            out[ch] = float(settings.sigma[ch])
        elif snr_on:
            col = clean[:, MEAS_NAMES.index(ch)]
            power = float(np.mean(col ** 2)) if len(col) else 0.0
            if power == 0.0:
                raise UndefinedSNRError(f"channel {ch!r} carries no signal; give sigma explicitly")
            out[ch] = math.sqrt(power / settings.snr)
    for ch, s in settings.sigma.items():
        out.setdefault(ch, float(s))
    return out


def apply_measurement_noise(clean: np.ndarray, settings: NoiseSettings, seed: int,
                            rep: int = 0) -> np.ndarray:
    """Add white noise to the configured channels of an (N, 10) measurement stream."""
    clean = np.asarray(clean, dtype=float)
    noisy = clean.copy()
    if settings.noiseless or len(clean) == 0:
        return noisy
    sig = noise_sigmas(clean, settings)
    rng = rng_for(seed, "meas_noise", rep)
    draws = rng.standard_normal(clean.shape)  # full block keeps channels independent of the set
    for ch, s in sig.items():
        j = MEAS_NAMES.index(ch)
        if s > 0:
            noisy[:, j] = clean[:, j] + s * draws[:, j]
    return noisy


# -- driver inputs ----------------------------------------------------------------------------

@dataclass
class InputProfile:
    """Open-loop columns [steer, drive, brake, z_f, z_r] plus an optional speed target.

    When ``speed_target`` is set the truth run overrides drive/brake with a
    speed-hold controller and records what it applied.
    """

    u: np.ndarray
    speed_target: np.ndarray | None
    initial_speed: float
    fs: float

    @property
    def n(self) -> int:
        return len(self.u)


def swept_frequency(t: np.ndarray, duration: float, f_end: float = 4.0) -> np.ndarray:
    return f_end * t / duration if duration > 0 else np.zeros_like(t)


def _urban(n: int, fs: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    u = np.zeros((n, 5))
    dt = 1.0 / fs
    # crude point-mass plan so brake phases reach standstill
    mass, radius, aero, roll_res = 2125.8, 0.36, 0.616, 0.012 * 9.81
    k = 0
    v = 0.0
    while k < n:
        idle = int(rng.uniform(1.0, 2.0) * fs)
        u[k:k + idle, 2] = 1500.0
        k += idle
        v = 0.0
        # accelerate
        torque = rng.uniform(1400.0, 2400.0)
        v_top = rng.uniform(9.0, 15.0)
        while k < n and v < v_top:
            u[k, 1] = torque
            v += dt * (torque / radius / mass - roll_res - aero * v * v / mass)
            k += 1
        # cruise, possibly turning
        cruise = int(rng.uniform(2.0, 5.0) * fs)
        hold = (aero * v * v + roll_res * mass) * radius
        seg = slice(k, min(k + cruise, n))
        u[seg, 1] = hold * rng.uniform(0.9, 1.6)
        if rng.random() < 0.45:
            m = seg.stop - seg.start
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.4)
            u[seg, 0] = amp * np.sin(np.pi * np.arange(m) / max(m, 1))
        k += cruise
        # coast
        coast = int(rng.uniform(1.5, 3.5) * fs)
        for _ in range(coast):
            if k >= n:
                break
            v = max(v - dt * (roll_res + aero * v * v / mass), 0.0)
            k += 1
        # brake to standstill
        torque_b = rng.uniform(2500.0, 5000.0)
        decel = torque_b / radius / mass + roll_res
        brake_len = int((v / decel * 1.25 + 1.0) * fs)
        u[k:k + brake_len, 2] = torque_b
        k += brake_len
    return u[:n], 0.0


def _swept(n: int, fs: float, duration: float, amp: float) -> np.ndarray:
    t = np.arange(n) / fs
    phase = 2 * np.pi * (4.0 * t ** 2 / (2 * duration)) if duration > 0 else t * 0
    return amp * np.sin(phase)


def _circuit(n: int, fs: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Laps of accelerate / straight-line brake / constant-speed corner."""
    steer = np.zeros(n)
    speed = np.zeros(n)
    k = 0
    v = 18.0

    def put(arr: np.ndarray, values: np.ndarray) -> int:
        m = min(len(values), n - k)
        arr[k:k + m] = values[:m]
        return m

    while k < n:
        v_end = rng.uniform(24.0, 30.0)
        accel = int((v_end - v) / rng.uniform(1.5, 2.5) * fs) + int(rng.uniform(1.0, 2.0) * fs)
        k += put(speed, np.minimum(v + np.arange(accel) / fs * 2.0, v_end))
        v_c = rng.uniform(14.0, 18.0)
        brake = int((v_end - v_c) / rng.uniform(3.5, 5.0) * fs)
        k += put(speed, np.linspace(v_end, v_c, max(brake, 1)))
        corner = int(rng.uniform(3.0, 5.0) * fs)
        a_lat = rng.uniform(3.0, 4.5)
        sign = rng.choice([-1.0, 1.0])
        # handwheel angle for the target lateral acceleration on a neutral-steer car
        delta = sign * a_lat * 2.85 / v_c ** 2 * 15.0
        m = put(speed, np.full(corner, v_c))
        steer[k:k + m] = (delta * np.sin(np.pi * np.arange(corner) / corner))[:m]
        k += m
        v = v_c
    return steer, speed


def _lane_change_braking(n: int, fs: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    steer = np.zeros(n)
    speed = np.zeros(n)
    k = 0
    v = 22.0
    while k < n:
        cruise = int(rng.uniform(2.0, 3.0) * fs)
        m = min(cruise, n - k)
        speed[k:k + m] = v
        k += m
        # double lane change: two opposite steering periods
        period = rng.uniform(2.5, 3.5)
        amp = rng.uniform(0.4, 0.7)
        dlc = int(2 * period * fs)
        t = np.arange(dlc) / fs
        prof = amp * np.sin(2 * np.pi * t / period) * (t < period) \
            - amp * np.sin(2 * np.pi * (t - period) / period) * (t >= period)
        m = min(dlc, n - k)
        steer[k:k + m] = prof[:m]
        speed[k:k + m] = v
        k += m
        # straight braking then re-acceleration
        v_low = rng.uniform(8.0, 12.0)
        brake = int((v - v_low) / rng.uniform(4.0, 6.0) * fs)
        m = min(brake, n - k)
        speed[k:k + m] = np.linspace(v, v_low, brake)[:m]
        k += m
        v_next = rng.uniform(20.0, 26.0)
        acc = int((v_next - v_low) / rng.uniform(1.5, 2.5) * fs)
        m = min(acc, n - k)
        speed[k:k + m] = np.linspace(v_low, v_next, acc)[:m]
        k += m
        v = v_next
    return steer, speed


def gen_inputs(kind: str, duration: float, fs: float, seed: int, speed: float = 20.0,
               steer_amplitude: float = 0.5, road: np.ndarray | None = None,
               wheelbase: float = 2.85) -> InputProfile:
    """Driver-input stream for a maneuver kind.

    Road columns are filled from ``road`` (front profile) when given; the rear is
    the front delayed by wheelbase / speed.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    n = int(round(duration * fs))
    u = np.zeros((n, 5))
    target = None
    v0 = speed
    rng = rng_for(seed, "inputs")
    if n == 0:
        return InputProfile(u, None if kind == "urban" else np.zeros(0), 0.0 if kind == "urban" else speed, fs)
    if kind == "urban":
        u, v0 = _urban(n, fs, rng)
    elif kind == "swept-steer":
        u[:, 0] = _swept(n, fs, duration, steer_amplitude)
        target = np.full(n, speed)
    elif kind == "constant-speed-rough-road":
        target = np.full(n, speed)
    elif kind == "circuit-like":
        u[:, 0], target = _circuit(n, fs, rng)
        v0 = float(target[0])
    else:
        u[:, 0], target = _lane_change_braking(n, fs, rng)
        v0 = float(target[0])
    if road is not None:
        u[:, 3] = road[:n]
        v_delay = target if target is not None else speed
        u[:, 4] = rear_profile(road[:n], fs, v_delay, wheelbase)
    return InputProfile(u, target, v0, fs)


# -- truth runs -------------------------------------------------------------------------------

@dataclass
class TruthRun:
    scenario: Scenario
    params: VehicleParams       # loaded (truth) parameters
    t: np.ndarray
    u: np.ndarray               # inputs actually applied to the truth vehicle
    u_twin: np.ndarray          # inputs handed to estimators (noisy road)
    x: np.ndarray               # truth states after each sample
    y_clean: np.ndarray
    y: np.ndarray               # noisy measurements
    x0: np.ndarray

    @property
    def beta(self) -> np.ndarray:
        return np.arctan2(self.x[:, 1], np.maximum(self.x[:, 0], 0.1))


@dataclass
class SpeedHold:
    kp: float = 2500.0
    ki: float = 400.0
    mass: float = 2125.8
    radius: float = 0.36
    integ: float = 0.0

    def torque(self, v: float, target: float, target_rate: float, dt: float) -> tuple[float, float]:
        err = target - v
        self.integ = min(max(self.integ + err * dt, -5.0), 5.0)
        tq = self.kp * err + self.ki * self.integ + self.mass * target_rate * self.radius
        return (tq, 0.0) if tq >= 0 else (0.0, -tq)


def simulate_truth(scenario: Scenario, base: VehicleParams, config: TwinConfig | None = None,
                   rep: int = 0) -> TruthRun:
    """Run the loaded "real" vehicle through the scenario and record its sensors."""
    config = config or TwinConfig()
    truth_cfg = config.with_mismatch(scenario.drag_scale, scenario.tire_stiffness_scale)
    params = perturbed_params(base, scenario.loads)
    n, fs, dt = scenario.n_samples, scenario.fs, scenario.dt
    road = None
    if scenario.kind == "constant-speed-rough-road":
        road = gen_road_profile(scenario.duration, fs, scenario.sigma_z, scenario.seed)
    prof = gen_inputs(scenario.kind, scenario.duration, fs, scenario.seed, scenario.speed,
                      scenario.steer_amplitude, road, params.wheelbase)
    x0 = TwinState.rolling(prof.initial_speed, truth_cfg)
    plant = DigitalTwin(params, truth_cfg, x0)
    u = prof.u.copy()
    xs = np.empty((n, len(x0.array)))
    ys = np.empty((n, 10))
    hold = SpeedHold(mass=params.m0, radius=truth_cfg.wheel_radius)
    for k in range(n):
        if prof.speed_target is not None:
            tgt = prof.speed_target[k]
            rate = (prof.speed_target[min(k + 1, n - 1)] - tgt) * fs
            u[k, 1], u[k, 2] = hold.torque(plant.state.vx, tgt, rate, dt)
        try:
            plant.step(u[k], dt)
        except TwinDivergenceError as exc:
            raise TwinDivergenceError(f"truth run diverged at sample {k}: {exc}", k) from exc
        xs[k] = plant.state.array
        ys[k] = plant.readout(u[k])
    y = apply_measurement_noise(ys, scenario.noise, scenario.seed, rep)
    u_twin = u.copy()
    if road is not None and scenario.noise.road_eps > 0:
        z_noisy = corrupt_road(road, scenario.noise.road_eps, scenario.seed + 7919 * rep)
        u_twin[:, 3] = z_noisy
        u_twin[:, 4] = rear_profile(z_noisy, fs, prof.speed_target, params.wheelbase)
    return TruthRun(scenario, params, np.arange(1, n + 1) * dt, u, u_twin, xs, ys, y, x0.array.copy())


INPUT_NAMES = ("steer", "drive", "brake", "z_front", "z_rear")
TRUTH_COLUMNS = (("t",) + tuple(f"u_{n}" for n in INPUT_NAMES) + tuple(f"x_{n}" for n in STATE_NAMES)
                 + tuple(f"y_{n}" for n in MEAS_NAMES) + tuple(f"ynoisy_{n}" for n in MEAS_NAMES)
                 + ("beta",))


def write_truth_csv(run: TruthRun, path: str | Path) -> Path:
    """One row per sample: applied inputs, truth states, clean and noisy sensors, sideslip."""
    path = Path(path)
    beta = run.beta
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for k in range(len(run.t)):
            row = np.concatenate(([run.t[k]], run.u[k], run.x[k], run.y_clean[k], run.y[k], [beta[k]]))
            w.writerow([repr(float(v)) for v in row])
    return path
