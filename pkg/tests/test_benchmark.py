import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bicycle_yaw_rate
from twinloop.benchmark import (BenchGains, BenchModel, BenchState, PacejkaCoeffs, SaturationCounter,
                                bench_correct, bench_forces, bench_step, estimate_normal_loads,
                                wheel_positions,
                                pacejka, run_benchmark)
from twinloop.config import BASE_VEHICLE
from twinloop.twin import MEAS_NAMES, TwinConfig

DT = 0.01
MODEL = BenchModel(BASE_VEHICLE, PacejkaCoeffs(bx=10.0, cx=1.6, dx=1.0, ex=0.0,
                                               by=8.5, cy=1.3, dy=0.95, ey=-0.6))
AX, AY, WZ = (MEAS_NAMES.index(n) for n in ("ax", "ay", "wz"))
WHEELS = [MEAS_NAMES.index(n) for n in ("om_fl", "om_fr", "om_rl", "om_rr")]


def static_loads(mass=BASE_VEHICLE.m0):
    return estimate_normal_loads(0.0, 0.0, mass, BASE_VEHICLE)


def measurement(speed=0.0, ax=0.0, ay=0.0, wz=0.0):
    y = np.zeros(len(MEAS_NAMES))
    y[AX], y[AY], y[WZ] = ax, ay, wz
    y[WHEELS] = speed / MODEL.wheel_radius
    return y


def test_zero_forces_and_gains_keep_state_constant():
    s = BenchState(0.0, 0.0, 0.0, 12.0)
    for _ in range(100):
        s = bench_step(s, np.zeros(5), measurement(), BenchGains(), MODEL, DT)
    assert s == BenchState(0.0, 0.0, 0.0, 12.0)


def test_free_rolling_straight_has_no_force():
    s = BenchState(20.0)
    fx, fy, mz = bench_forces(s, 0.0, [20.0 / MODEL.wheel_radius] * 4, static_loads(), MODEL)
    assert (fx, fy, mz) == (0.0, 0.0, 0.0)


def test_steady_circle_matches_single_track_yaw_rate():
    speed, steer = 15.0, 0.6
    fz = static_loads()
    slope = MODEL.tires.by * MODEL.tires.cy * MODEL.tires.dy
    cf, cr = slope * (fz[0] + fz[1]), slope * (fz[2] + fz[3])
    delta = steer / MODEL.steer_ratio
    pos = wheel_positions(BASE_VEHICLE)
    s = BenchState(speed)
    y = measurement(speed)
    for _ in range(1500):
        # every wheel free-rolling, as in the single-track model
        vx = s.vx - s.wz * pos[:, 1]
        vy = s.vy + s.wz * pos[:, 0]
        d = np.array([delta, delta, 0.0, 0.0])
        rates = (vx * np.cos(d) + vy * np.sin(d)) / MODEL.wheel_radius
        s = bench_step(s, np.concatenate(([steer], rates)), y, BenchGains(), MODEL, DT)
    expected = bicycle_yaw_rate(s.vx, steer / MODEL.steer_ratio, BASE_VEHICLE.m0,
                                BASE_VEHICLE.lf, BASE_VEHICLE.lr, cf, cr)
    assert s.wz == pytest.approx(expected, rel=0.1)


coeff = st.floats(0.5, 3.0)


@given(st.floats(-1.0, 1.0), st.floats(0.0, 2e4), st.floats(1.0, 20.0), st.floats(0.5, 1.9), coeff,
       st.floats(-2.0, 0.9))
def test_magic_formula_is_odd_and_bounded(slip, fz, b, c, d, e):
    assert pacejka(-slip, fz, b, c, d, e) == pytest.approx(-pacejka(slip, fz, b, c, d, e), abs=1e-9)
    assert abs(pacejka(slip, fz, b, c, d, e)) <= fz * d * (1 + 1e-12)


@given(st.floats(-8.0, 8.0), st.floats(-8.0, 8.0), st.floats(1500.0, 3000.0))
def test_normal_loads_sum_to_weight(ax, ay, mass):
    fz = estimate_normal_loads(ax, ay, mass, BASE_VEHICLE)
    assert fz.sum() == pytest.approx(mass * 9.81, rel=1e-12)
    assert np.all(fz >= 0)


def test_braking_moves_load_forward():
    still, braking = static_loads(), estimate_normal_loads(-5.0, 0.0, BASE_VEHICLE.m0, BASE_VEHICLE)
    assert braking[0] > still[0] and braking[1] > still[1]
    assert braking[2] < still[2] and braking[3] < still[3]


def test_extreme_cornering_clamps_and_counts():
    counter = SaturationCounter()
    fz = estimate_normal_loads(0.0, 30.0, BASE_VEHICLE.m0, BASE_VEHICLE, saturation=counter)
    assert fz.min() == 0.0 and counter.events > 0
    assert fz.sum() == pytest.approx(BASE_VEHICLE.m0 * 9.81)


def test_mass_state_constant_with_zero_gain():
    prior = BenchState(10.0, 0.1, 0.0, 40.0)
    out = bench_correct(prior, np.array([0.5, 0.0]), measurement(ax=2.0), BenchGains(k_ax_vx=-0.05))
    assert out.dm == 40.0


def test_mass_update_gated_while_cornering():
    prior = BenchState(10.0, 0.0, 0.3, 0.0)
    g = BenchGains(k_ax_dm=-5.0)
    assert bench_correct(prior, np.array([1.0, 0.0]), measurement(ax=2.0, wz=0.3), g).dm == 0.0
    assert bench_correct(prior, np.array([1.0, 0.0]), measurement(ax=2.0), g).dm == -5.0


def test_run_benchmark_is_deterministic_and_shaped():
    n = 300
    steer = 0.4 * np.sin(np.linspace(0, 6, n))
    y = np.tile(measurement(12.0), (n, 1))
    g = BenchGains(k_ax_vx=-0.02, k_wz_wz=0.5)
    a = run_benchmark(MODEL, steer, y, 100.0, g, BenchState(12.0))
    b = run_benchmark(MODEL, steer, y, 100.0, g, BenchState(12.0))
    assert a.states.shape == (n, 4) and np.array_equal(a.states, b.states)
    assert a.t[0] == pytest.approx(DT) and np.all(np.isfinite(a.beta))


def test_fitted_tires_track_the_twin_tire():
    from twinloop.benchmark import fit_pacejka
    from twinloop.twin import tire_sweep
    cfg = TwinConfig()
    fitted = fit_pacejka(cfg)
    slips = np.linspace(-0.2, 0.2, 41)
    lat = pacejka(slips, cfg.fz_nominal, fitted.by, fitted.cy, fitted.dy, fitted.ey)
    assert np.max(np.abs(lat - tire_sweep(cfg, slips, cfg.fz_nominal, True))) < 0.05 * cfg.fz_nominal


def test_pacejka_coeffs_validation():
    with pytest.raises(ValueError):
        PacejkaCoeffs(bx=0.0)
    with pytest.raises(ValueError):
        PacejkaCoeffs(ey=1.0)
    assert PacejkaCoeffs.from_dict(MODEL.tires.to_dict()) == MODEL.tires


def test_nonphysical_mass_is_rejected():
    with pytest.raises(ValueError):
        bench_step(BenchState(5.0, dm=-BASE_VEHICLE.m0), np.zeros(5), measurement(), BenchGains(), MODEL, DT)
    assert math.isfinite(BenchGains().yaw_gate)
