"""Digital-twin vehicle simulator behind a black-box step / readout / inject contract.

The model is a double-track chassis with roll, pitch and heave, four wheel-spin
states, four unsprung corners and combined-slip magic-formula tires. Estimators
only ever see the :class:`DigitalTwin` methods; the equations live in
:mod:`twinloop._dynamics`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import _dynamics as dyn
from .rigidbody import NonPhysicalConfigError, VehicleParams

STATE_NAMES = (
    "vx", "vy", "vz", "wx", "wy", "wz", "roll", "pitch", "heave",
    "om_fl", "om_fr", "om_rl", "om_rr",
    "zu_fl", "zu_fr", "zu_rl", "zu_rr",
    "vu_fl", "vu_fr", "vu_rl", "vu_rr",
)
CORRECTABLE = ("vx", "vy", "wy", "wz", "om_fl", "om_fr", "om_rl", "om_rr")
MEAS_NAMES = ("ax", "ay", "az", "wx", "wy", "wz", "om_fl", "om_fr", "om_rl", "om_rr")
_STATE_INDEX = {n: i for i, n in enumerate(STATE_NAMES)}


class TwinDivergenceError(RuntimeError):
    def __init__(self, message: str, sample: int | None = None):
        super().__init__(message)
        self.sample = sample


class InjectionError(ValueError):
    """A correction would leave the twin in a non-physical state."""


@dataclass(frozen=True)
class TwinConfig:
    """Twin constants that are not part of the estimated parameter set."""

    wheel_radius: float = 0.36
    wheel_inertia: float = 1.8
    unsprung_mass: float = 45.0
    spring_front: float = 42000.0
    spring_rear: float = 38000.0
    damper_front: float = 3000.0
    damper_rear: float = 2600.0
    arb_front: float = 16000.0
    arb_rear: float = 10000.0
    tire_vertical: float = 260000.0
    aero: float = 0.616  # 0.5 rho Cd A
    rolling: float = 0.012
    bx: float = 10.0
    cx: float = 1.6
    dx: float = 1.0
    ex: float = 0.0
    by: float = 8.5
    cy: float = 1.3
    dy: float = 0.95
    ey: float = -0.6
    load_sensitivity: float = 0.1
    fz_nominal: float = 5000.0
    brake_front: float = 0.6
    slip_floor: float = 3.0
    spin_eps: float = 1.0
    steer_ratio: float = 15.0
    steer_lock: float = 9.0  # steering-wheel rad
    gravity: float = 9.81
    max_substep: float = 4e-4
    # divergence bounds
    max_speed: float = 150.0
    max_angle: float = 1.0
    max_rate: float = 5.0
    max_wheel_rate: float = 600.0
    max_travel: float = 0.25

    @classmethod
    def from_dict(cls, data: Mapping[str, float] | None) -> "TwinConfig":
        if not data:
            return cls()
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown twin config keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def with_mismatch(self, drag_scale: float = 1.0, tire_stiffness_scale: float = 1.0) -> "TwinConfig":
        """Same vehicle with unmodeled drag / tire-stiffness offsets."""
        return replace(self, aero=self.aero * drag_scale, bx=self.bx * tire_stiffness_scale,
                       by=self.by * tire_stiffness_scale)


@dataclass(frozen=True)
class DriverInput:
    steer: float = 0.0   # steering-wheel angle, rad
    drive: float = 0.0   # total traction torque on the rear axle, N m
    brake: float = 0.0   # total brake torque, N m
    z_front: float = 0.0
    z_rear: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.drive, self.brake, self.z_front, self.z_rear])

    @classmethod
    def from_array(cls, u: Sequence[float]) -> "DriverInput":
        return cls(*map(float, u[:5]))


@dataclass(frozen=True)
class MeasurementVec:
    ax: float
    ay: float
    az: float
    wx: float
    wy: float
    wz: float
    om_fl: float
    om_fr: float
    om_rl: float
    om_rr: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in MEAS_NAMES])

    @classmethod
    def from_array(cls, y: Sequence[float]) -> "MeasurementVec":
        return cls(*map(float, y))


class TwinState:
    """Immutable view over the twin's state vector."""

    __slots__ = ("_x",)

    def __init__(self, x: Sequence[float] | None = None):
        arr = np.zeros(dyn.NX) if x is None else np.array(x, dtype=float)
        if arr.shape != (dyn.NX,):
            raise ValueError(f"twin state needs {dyn.NX} entries, got {arr.shape}")
        arr.setflags(write=False)
        self._x = arr

    @classmethod
    def rolling(cls, speed: float, config: TwinConfig | None = None) -> "TwinState":
        config = config or TwinConfig()
        x = np.zeros(dyn.NX)
        x[dyn.VX] = speed
        x[dyn.OM:dyn.OM + 4] = speed / config.wheel_radius
        return cls(x)

    def __getattr__(self, name: str) -> float:
        try:
            return float(self._x[_STATE_INDEX[name]])
        except KeyError:
            raise AttributeError(name) from None

    @property
    def array(self) -> np.ndarray:
        return self._x

    def replace(self, **values: float) -> "TwinState":
        x = self._x.copy()
        for k, v in values.items():
            x[_STATE_INDEX[k]] = v
        return TwinState(x)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TwinState) and np.array_equal(self._x, other._x)

    def __repr__(self) -> str:
        return f"TwinState(vx={self.vx:.3f}, vy={self.vy:.4f}, wz={self.wz:.4f})"


def pack_params(params: VehicleParams, config: TwinConfig) -> np.ndarray:
    p = np.empty(dyn.NP)
    p[dyn.P_M] = params.m0
    p[dyn.P_JXX] = params.jxx
    p[dyn.P_JYY] = params.jyy
    p[dyn.P_JZZ] = params.jzz
    p[dyn.P_LF] = params.lf
    p[dyn.P_LR] = params.lr
    p[dyn.P_H] = params.h
    p[dyn.P_DY] = params.cm[1]
    p[dyn.P_TRACK] = params.track
    p[dyn.P_MU] = config.unsprung_mass
    p[dyn.P_KSF] = config.spring_front
    p[dyn.P_KSR] = config.spring_rear
    p[dyn.P_CSF] = config.damper_front
    p[dyn.P_CSR] = config.damper_rear
    p[dyn.P_KARBF] = config.arb_front
    p[dyn.P_KARBR] = config.arb_rear
    p[dyn.P_KT] = config.tire_vertical
    p[dyn.P_R] = config.wheel_radius
    p[dyn.P_JW] = config.wheel_inertia
    p[dyn.P_CAERO] = config.aero
    p[dyn.P_CR] = config.rolling
    p[dyn.P_BX] = config.bx
    p[dyn.P_CX] = config.cx
    p[dyn.P_DX] = config.dx
    p[dyn.P_EX] = config.ex
    p[dyn.P_BY] = config.by
    p[dyn.P_CY] = config.cy
    p[dyn.P_DYT] = config.dy
    p[dyn.P_EY] = config.ey
    p[dyn.P_LOADSENS] = config.load_sensitivity
    p[dyn.P_FZNOM] = config.fz_nominal
    p[dyn.P_BRAKEF] = config.brake_front
    p[dyn.P_VFLOOR] = config.slip_floor
    p[dyn.P_WEPS] = config.spin_eps
    p[dyn.P_STEER_RATIO] = config.steer_ratio
    p[dyn.P_G] = config.gravity
    if p[dyn.P_M] <= 4 * config.unsprung_mass:
        raise NonPhysicalConfigError("vehicle mass must exceed the unsprung masses")
    return p


def _substeps(dt: float, config: TwinConfig) -> int:
    if not 0 < dt <= 0.01:
        raise ValueError(f"dt must be in (0, 0.01], got {dt}")
    return max(1, math.ceil(dt / config.max_substep - 1e-9))


def _check_bounds(x: np.ndarray, config: TwinConfig) -> str | None:
    if not np.all(np.isfinite(x)):
        return "non-finite state"
    if abs(x[dyn.VX]) > config.max_speed or abs(x[dyn.VY]) > config.max_speed:
        return f"speed out of bounds (vx={x[dyn.VX]:.2f}, vy={x[dyn.VY]:.2f})"
    if abs(x[dyn.ROLL]) > config.max_angle or abs(x[dyn.PITCH]) > config.max_angle:
        return "attitude out of bounds"
    if np.any(np.abs(x[dyn.WX:dyn.WZ + 1]) > config.max_rate):
        return "body rate out of bounds"
    om = x[dyn.OM:dyn.OM + 4]
    if np.any(om > config.max_wheel_rate) or np.any(om < -5.0):
        return "wheel rate out of bounds"
    if abs(x[dyn.HEAVE]) > config.max_travel or np.any(np.abs(x[dyn.ZU:dyn.ZU + 4]) > config.max_travel):
        return "suspension travel out of bounds"
    return None


def _as_input(inp: DriverInput | np.ndarray) -> np.ndarray:
    return inp.as_array() if isinstance(inp, DriverInput) else np.asarray(inp, dtype=float)


def step(state: TwinState, inp: DriverInput | np.ndarray, params: VehicleParams, dt: float,
         config: TwinConfig | None = None) -> TwinState:
    """Advance one sample with fixed-step RK4 (internal substeps keep the tires stable)."""
    config = config or TwinConfig()
    x = dyn.rk4(state.array, _as_input(inp), pack_params(params, config), dt, _substeps(dt, config))
    problem = _check_bounds(x, config)
    if problem:
        raise TwinDivergenceError(problem)
    return TwinState(x)


def readout(state: TwinState, params: VehicleParams, inp: DriverInput | np.ndarray,
            config: TwinConfig | None = None) -> MeasurementVec:
    config = config or TwinConfig()
    y = np.empty(10)
    dyn.outputs(state.array, _as_input(inp), pack_params(params, config), y)
    return MeasurementVec.from_array(y)


def inject(state: TwinState, correction: Mapping[str, float],
           config: TwinConfig | None = None) -> TwinState:
    """Additive correction on the correctable subset of states."""
    bad = set(correction) - set(CORRECTABLE)
    if bad:
        raise InjectionError(f"states {sorted(bad)} are not correctable")
    x = state.array.copy()
    for name, dv in correction.items():
        x[_STATE_INDEX[name]] += dv
    problem = _check_bounds(x, config or TwinConfig())
    if problem:
        raise InjectionError(f"correction rejected: {problem}")
    return TwinState(x)


class DigitalTwin:
    """Single-owner simulator instance.

    Holds its nominal parameters, the currently applied deviations and its own
    state. ``step``/``readout``/``inject``/``set_params`` are the whole public
    surface an estimator is allowed to use.
    """

    def __init__(self, nominal: VehicleParams, config: TwinConfig | None = None,
                 state: TwinState | None = None):
        self.config = config or TwinConfig()
        self._nominal = nominal
        self._p = pack_params(nominal, self.config)
        self._deviation = (0.0, 0.0, 0.0, 0.0)
        self._nsub_cache: dict[float, int] = {}
        self.state = state or TwinState()

    def get_nominal_params(self) -> VehicleParams:
        return self._nominal

    def get_params(self) -> dict[str, float]:
        return {"m": float(self._p[dyn.P_M]), "jxx": float(self._p[dyn.P_JXX]),
                "jyy": float(self._p[dyn.P_JYY]), "jzz": float(self._p[dyn.P_JZZ])}

    def set_params(self, dm: float = 0.0, djxx: float = 0.0, djyy: float = 0.0,
                   djzz: float = 0.0) -> None:
        """Apply parameter deviations on top of the nominal set."""
        nom = self._nominal
        vals = (nom.m0 + dm, nom.jxx + djxx, nom.jyy + djyy, nom.jzz + djzz)
        if not all(math.isfinite(v) for v in vals):
            raise NonPhysicalConfigError(f"non-finite parameters {vals}")
        if vals[0] <= 4 * self.config.unsprung_mass or min(vals[1:]) <= 0:
            raise NonPhysicalConfigError(f"non-physical parameters {vals}")
        self._p[dyn.P_M], self._p[dyn.P_JXX], self._p[dyn.P_JYY], self._p[dyn.P_JZZ] = vals
        self._deviation = (dm, djxx, djyy, djzz)

    def step(self, inp: DriverInput | np.ndarray, dt: float) -> TwinState:
        nsub = self._nsub_cache.get(dt)
        if nsub is None:
            nsub = self._nsub_cache[dt] = _substeps(dt, self.config)
        x = dyn.rk4(self.state.array, _as_input(inp), self._p, dt, nsub)
        problem = _check_bounds(x, self.config)
        if problem:
            raise TwinDivergenceError(problem)
        self.state = TwinState(x)
        return self.state

    def readout(self, inp: DriverInput | np.ndarray) -> np.ndarray:
        y = np.empty(10)
        dyn.outputs(self.state.array, _as_input(inp), self._p, y)
        return y

    def inject(self, correction: Mapping[str, float]) -> TwinState:
        self.state = inject(self.state, correction, self.config)
        return self.state


def tire_sweep(config: TwinConfig, slips: np.ndarray, fz: float, lateral: bool = False) -> np.ndarray:
    """Pure-slip tire force of the twin's tire at load ``fz`` (test-rig output)."""
    scale = 1.0 - config.load_sensitivity * (fz / config.fz_nominal - 1.0)
    if lateral:
        b, c, d, e = config.by, config.cy, config.dy * scale, config.ey
    else:
        b, c, d, e = config.bx, config.cx, config.dx * scale, config.ex
    bs = b * np.asarray(slips, dtype=float)
    return fz * d * np.sin(c * np.arctan(bs - e * (bs - np.arctan(bs))))
