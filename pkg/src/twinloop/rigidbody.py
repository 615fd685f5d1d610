"""Mass, center-of-mass and moments of inertia of a chassis carrying point loads.

The chassis is a lumped rigid body (mass ``m0`` at ``cm``) and every added load
is a point mass. Moments are recomputed about the combined center of mass with
the parallel-axis theorem; products of inertia are carried through unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np


class NonPhysicalConfigError(ValueError):
    """Raised when a parameter set violates rigid-body constraints."""


@dataclass(frozen=True)
class PointMass:
    mass: float
    position: tuple[float, float, float]
    name: str = ""

    def __post_init__(self) -> None:
        if not (self.mass > 0 and math.isfinite(self.mass)):
            raise NonPhysicalConfigError(f"point mass must be > 0, got {self.mass!r}")
        pos = tuple(float(c) for c in self.position)
        if len(pos) != 3 or not all(math.isfinite(c) for c in pos):
            raise NonPhysicalConfigError(f"position must be a finite 3-vector, got {self.position!r}")
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class LoadConfig:
    loads: tuple[PointMass, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "loads", tuple(self.loads))

    @property
    def masses(self) -> np.ndarray:
        return np.array([p.mass for p in self.loads], dtype=float)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.loads], dtype=float).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.loads)


@dataclass(frozen=True)
class VehicleParams:
    """Lumped chassis parameters in the body frame.

    The frame origin is the front-axle center on the ground, x forward, y left,
    z up, so ``lf = -cm[0]`` and ``cm[2]`` is the CM height.
    """

    m0: float
    cm: tuple[float, float, float]
    jxx: float
    jyy: float
    jzz: float
    jxy: float = 0.0
    jxz: float = 0.0
    jyz: float = 0.0
    wheelbase: float = 2.85
    track: float = 1.62

    def __post_init__(self) -> None:
        object.__setattr__(self, "cm", tuple(float(c) for c in self.cm))
        self.validate()

    def validate(self) -> None:
        vals = (self.m0, self.jxx, self.jyy, self.jzz, self.wheelbase, self.track, *self.cm)
        if not all(math.isfinite(v) for v in vals):
            raise NonPhysicalConfigError("vehicle parameters must be finite")
        if self.m0 <= 0:
            raise NonPhysicalConfigError(f"mass must be > 0, got {self.m0}")
        if min(self.jxx, self.jyy, self.jzz) <= 0:
            raise NonPhysicalConfigError(
                f"principal moments must be > 0, got {(self.jxx, self.jyy, self.jzz)}"
            )
        j = (self.jxx, self.jyy, self.jzz)
        for a in range(3):
            if j[a] > j[(a + 1) % 3] + j[(a + 2) % 3] * (1 + 1e-12):
                raise NonPhysicalConfigError(f"moments violate the triangle inequality: {j}")
        if not 0 < self.lf < self.wheelbase:
            raise NonPhysicalConfigError(
                f"CM x={self.cm[0]} must lie between the axles (wheelbase {self.wheelbase})"
            )

    @property
    def lf(self) -> float:
        return -self.cm[0]

    @property
    def lr(self) -> float:
        return self.wheelbase - self.lf

    @property
    def h(self) -> float:
        return self.cm[2]

    def with_deviation(self, dm: float = 0.0, djxx: float = 0.0,
                       djyy: float = 0.0, djzz: float = 0.0) -> "VehicleParams":
        return replace(self, m0=self.m0 + dm, jxx=self.jxx + djxx,
                       jyy=self.jyy + djyy, jzz=self.jzz + djzz)


def _loads(loads: LoadConfig | Iterable[PointMass]) -> LoadConfig:
    return loads if isinstance(loads, LoadConfig) else LoadConfig(tuple(loads))


def total_mass(base: VehicleParams, loads: LoadConfig) -> float:
    loads = _loads(loads)
    return base.m0 + float(sum(p.mass for p in loads.loads))


def combined_cm(base: VehicleParams, loads: LoadConfig) -> np.ndarray:
    """Mass-weighted mean position of chassis plus loads."""
    loads = _loads(loads)
    cm0 = np.asarray(base.cm, dtype=float)
    if not loads.loads:
        return cm0.copy()
    m = loads.masses
    num = base.m0 * cm0 + (m[:, None] * loads.positions).sum(axis=0)
    return num / (base.m0 + m.sum())


def combined_inertia(base: VehicleParams, loads: LoadConfig) -> np.ndarray:
    """(Jxx, Jyy, Jzz) about the combined CM.

    The chassis moment is carried from its own CM to the new one (``+m0 * d^2``)
    and each load adds ``m_i * r^2`` about the new CM, per axis.
    """
    loads = _loads(loads)
    j0 = np.array([base.jxx, base.jyy, base.jzz], dtype=float)
    if not loads.loads:
        return j0
    cm0 = np.asarray(base.cm, dtype=float)
    cm = combined_cm(base, loads)
    shift2 = (cm - cm0) ** 2
    off2 = (loads.positions - cm) ** 2
    m = loads.masses
    # perpendicular-axis pairs for x, y, z
    pairs = ((1, 2), (0, 2), (0, 1))
    out = np.empty(3)
    for a, (i, k) in enumerate(pairs):
        out[a] = (j0[a] + base.m0 * (shift2[i] + shift2[k])
                  + float(np.sum(m * (off2[:, i] + off2[:, k]))))
    if np.any(out <= 0):
        raise NonPhysicalConfigError(f"non-physical combined inertia {out}")
    return out


def perturbed_params(base: VehicleParams, loads: LoadConfig) -> VehicleParams:
    """Full parameter set of the loaded vehicle; products of inertia unchanged."""
    jxx, jyy, jzz = combined_inertia(base, loads)
    return replace(base, m0=total_mass(base, loads), cm=tuple(combined_cm(base, loads)),
                   jxx=jxx, jyy=jyy, jzz=jzz)


def inertia_about_axis_point(base: VehicleParams, loads: LoadConfig,
                             point: Sequence[float]) -> np.ndarray:
    """Moments about axes through ``point`` parallel to the body axes."""
    loads = _loads(loads)
    cm = combined_cm(base, loads)
    mtot = total_mass(base, loads)
    d2 = (np.asarray(point, dtype=float) - cm) ** 2
    extra = mtot * np.array([d2[1] + d2[2], d2[0] + d2[2], d2[0] + d2[1]])
    return combined_inertia(base, loads) + extra


# Fitting of unpublished seat/trunk positions -------------------------------------------------

@dataclass
class LoadFit:
    positions: np.ndarray
    params: VehicleParams
    rel_errors: dict[str, float] = field(default_factory=dict)


def fit_load_positions(base: VehicleParams, masses: Sequence[float], targets: dict[str, float],
                       initial: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                       cm_weight: float = 0.05) -> LoadFit:
    """Least-squares placement of point loads so the loaded vehicle hits ``targets``.

    ``targets`` holds any of ``jxx, jyy, jzz`` (relative residuals) and
    ``dx, dy, dz`` (residuals in meters, scaled by ``cm_weight``). Bounds are
    per-coordinate arrays shaped like ``initial`` (n_loads x 3).
    """
    from scipy.optimize import least_squares

    masses = [float(m) for m in masses]
    shape = np.asarray(initial).shape

    def build(flat: np.ndarray) -> VehicleParams:
        pos = flat.reshape(shape)
        loads = LoadConfig(tuple(PointMass(m, tuple(p)) for m, p in zip(masses, pos)))
        return perturbed_params(base, loads)

    def residuals(flat: np.ndarray) -> np.ndarray:
        p = build(flat)
        res = []
        for key, attr in (("jxx", p.jxx), ("jyy", p.jyy), ("jzz", p.jzz)):
            if key in targets:
                res.append(attr / targets[key] - 1.0)
        for key, val in zip(("dx", "dy", "dz"), p.cm):
            if key in targets:
                res.append(cm_weight * (val - targets[key]))
        return np.asarray(res)

    sol = least_squares(residuals, np.asarray(initial, float).ravel(),
                        bounds=(np.asarray(lower, float).ravel(), np.asarray(upper, float).ravel()),
                        xtol=1e-12, ftol=1e-12)
    params = build(sol.x)
    errs = {}
    for key in ("jxx", "jyy", "jzz"):
        if key in targets:
            errs[key] = getattr(params, key) / targets[key] - 1.0
    return LoadFit(positions=sol.x.reshape(shape), params=params, rel_errors=errs)
