"""Independent reference computations used by the tests."""

from __future__ import annotations

import math

import numpy as np

from twinloop.rigidbody import LoadConfig, VehicleParams


def chassis_as_points(base: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """Six point masses with the chassis' mass, CM and principal moments.

    Pairs at +-r_a on each body axis: mass m0/6 each, with r chosen so the
    pair set reproduces (Jxx, Jyy, Jzz) about CM0.
    """
    j = np.array([base.jxx, base.jyy, base.jzz])
    # second moments s_a = sum m a^2 satisfy J_x = s_y + s_z etc.
    s = 0.5 * (j.sum() - 2 * j)
    m = base.m0 / 6.0
    cm0 = np.asarray(base.cm)
    pts, masses = [], []
    for axis in range(3):
        r = math.sqrt(s[axis] / (2 * m))
        for sign in (1.0, -1.0):
            p = cm0.copy()
            p[axis] += sign * r
            pts.append(p)
            masses.append(m)
    return np.array(masses), np.array(pts)


def brute_force_inertia(base: VehicleParams, loads: LoadConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """(M, CM, diag J about CM) by direct summation over point masses."""
    m, p = chassis_as_points(base)
    if len(loads):
        m = np.concatenate([m, loads.masses])
        p = np.vstack([p, loads.positions])
    total = float(m.sum())
    cm = (m[:, None] * p).sum(axis=0) / total
    r = p - cm
    jxx = float(np.sum(m * (r[:, 1] ** 2 + r[:, 2] ** 2)))
    jyy = float(np.sum(m * (r[:, 0] ** 2 + r[:, 2] ** 2)))
    jzz = float(np.sum(m * (r[:, 0] ** 2 + r[:, 1] ** 2)))
    return total, cm, np.array([jxx, jyy, jzz])


def bicycle_yaw_rate(speed: float, road_wheel_angle: float, mass: float, lf: float, lr: float,
                     cf: float, cr: float) -> float:
    """Steady-state yaw rate of the linear single-track model."""
    wb = lf + lr
    understeer = mass / wb * (lr / cf - lf / cr)
    return speed * road_wheel_angle / (wb + understeer * speed ** 2)
