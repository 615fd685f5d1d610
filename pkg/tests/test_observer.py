import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twinloop.config import BASE_VEHICLE
from twinloop.experiments import Condition, run_condition
from twinloop.observer import (GAIN_NAMES, AugmentedState, GainSet, Innovation, ObserverSettings,
                               RateDifferentiator, Stage, StageSchedule, correct_mass,
                               correct_pitch_inertia, correct_roll_yaw_inertia, correct_states,
                               inertia_increment, mass_gate, mass_increment, run_estimation)
from twinloop.scenario import Scenario, simulate_truth
from twinloop.twin import CORRECTABLE, MEAS_NAMES, STATE_NAMES, DigitalTwin, DriverInput, TwinState

AX, AY, WX, WY, WZ = (MEAS_NAMES.index(n) for n in ("ax", "ay", "wx", "wy", "wz"))
DEG = math.pi / 180.0
# oracle: which measurement channel feeds which correctable state, and through which gain
CHANNEL_OF = {"vx": ("ax", "k_ax_vx"), "vy": ("ay", "k_ay_vy"), "wy": ("wy", "k_wy_wy"),
              "wz": ("wz", "k_wz_wz"), "om_fl": ("om_fl", "k_wheel"), "om_fr": ("om_fr", "k_wheel"),
              "om_rl": ("om_rl", "k_wheel"), "om_rr": ("om_rr", "k_wheel")}


def innovation(residual=None, measured=None, wdot_meas=(0.0, 0.0, 0.0), wdot_pred=(0.0, 0.0, 0.0)):
    meas = np.zeros(10) if measured is None else np.array(measured, dtype=float)
    res = np.zeros(10) if residual is None else np.array(residual, dtype=float)
    return Innovation(meas, meas - res, np.array(wdot_meas, float), np.array(wdot_pred, float))


def aug_state(speed=15.0):
    return AugmentedState(TwinState.rolling(speed))


# -- state correction -------------------------------------------------------------------------

def test_zero_gains_leave_state_unchanged():
    aug = aug_state()
    out = correct_states(aug, innovation(np.ones(10)), GainSet())
    assert out == aug


def test_unit_yaw_gain_adds_residual():
    r = np.zeros(10)
    r[WZ] = 0.05
    out = correct_states(aug_state(), innovation(r), GainSet(k_wz_wz=1.0))
    assert out.twin.wz == pytest.approx(aug_state().twin.wz + 0.05, abs=1e-15)


gain_value = st.one_of(st.just(0.0), st.floats(-0.5, 0.5))


@given(st.fixed_dictionaries({n: gain_value for n in ("k_wheel", "k_ax_vx", "k_ay_vy", "k_wy_wy", "k_wz_wz")}),
       st.lists(st.floats(-0.5, 0.5), min_size=10, max_size=10))
def test_sparse_correction_matches_dense_oracle(gains, residual):
    gs = GainSet(**gains)
    aug = aug_state()
    dense = np.zeros((len(STATE_NAMES), len(MEAS_NAMES)))
    for state, (channel, gain) in CHANNEL_OF.items():
        dense[STATE_NAMES.index(state), MEAS_NAMES.index(channel)] = gains[gain]
    expected = aug.twin.array + dense @ np.array(residual)
    out = correct_states(aug, innovation(residual), gs)
    np.testing.assert_allclose(out.twin.array, expected, rtol=0, atol=1e-15)
    assert set(CHANNEL_OF) == set(CORRECTABLE)


# -- mass law ---------------------------------------------------------------------------------

def test_mass_gate_cases():
    gate = 3 * DEG
    assert mass_gate(1.0, 5 * DEG, gate) == 0
    assert mass_gate(-1.0, -5 * DEG, gate) == 0
    assert mass_gate(0.0, 0.0, gate) == 1
    assert mass_gate(0.4, 0.0, gate) == 1
    assert mass_gate(-0.4, 0.0, gate) == -1
    assert mass_gate(0.4, 0.0, gate, deadband=0.5) == 0


def test_mass_law_frozen_while_cornering():
    meas = np.zeros(10)
    meas[AX], meas[WZ] = -1.0, 5 * DEG
    r = np.zeros(10)
    r[AX] = 0.3
    assert mass_increment(innovation(r, meas), GainSet(k_ax_dm=-2.0)) == 0.0


def test_mass_law_zero_residual():
    meas = np.zeros(10)
    meas[AX] = 1.0
    assert mass_increment(innovation(None, meas), GainSet(k_ax_dm=-2.0)) == 0.0


def _coast_residual() -> float:
    """Measured minus predicted a_x while a heavier real car and a nominal twin coast down."""
    heavy = DigitalTwin(BASE_VEHICLE.with_deviation(dm=355.0), state=TwinState.rolling(30.0))
    twin = DigitalTwin(BASE_VEHICLE, state=TwinState.rolling(30.0))
    idle = DriverInput().as_array()
    for _ in range(200):
        heavy.step(idle, 0.01)
        twin.step(idle, 0.01)
    return float(heavy.readout(idle)[AX] - twin.readout(idle)[AX]), float(heavy.readout(idle)[AX])


def test_mass_law_raises_estimate_for_heavier_coasting_car():
    residual, ax = _coast_residual()
    assert ax < 0
    meas = np.zeros(10)
    meas[AX] = ax
    r = np.zeros(10)
    r[AX] = residual
    settings = ObserverSettings(sign_source="measured")
    assert mass_increment(innovation(r, meas), GainSet(k_ax_dm=-1.5), settings) > 0
    aug = correct_mass(aug_state(), innovation(r, meas), GainSet(k_ax_dm=-1.5), settings)
    assert aug.dm > 0


@pytest.mark.parametrize("source", ["twin", "measured", "fused"])
def test_sign_sources_agree_when_signs_agree(source):
    meas = np.zeros(10)
    meas[AX] = -1.0
    r = np.zeros(10)
    r[AX] = 0.2
    inc = mass_increment(innovation(r, meas), GainSet(k_ax_dm=-1.0), ObserverSettings(sign_source=source))
    assert inc == pytest.approx(0.2)


# -- inertia laws -----------------------------------------------------------------------------

def test_inertia_laws_zero_residual():
    aug = aug_state()
    innov = innovation(wdot_meas=(0.3, -0.2, 0.5), wdot_pred=(0.3, -0.2, 0.5))
    g = GainSet(k_wdx_djxx=-2.0, k_wdy_djyy=-200.0, k_wdz_djzz=-20.0)
    assert correct_roll_yaw_inertia(aug, innov, g).deviations == (0.0, 0.0, 0.0, 0.0)
    assert correct_pitch_inertia(aug, innov, g).deviations == (0.0, 0.0, 0.0, 0.0)


@given(st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3),
       st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3),
       st.floats(-50.0, 50.0, allow_subnormal=False))
def test_inertia_increment_is_linear_in_gain(meas, pred, gain):
    innov = innovation(wdot_meas=meas, wdot_pred=pred)
    for axis in range(3):
        one = inertia_increment(innov, axis, gain)
        two = inertia_increment(innov, axis, 2 * gain)
        assert two == 2 * one


def test_gains_doubled_double_all_increments():
    innov = innovation(wdot_meas=(0.4, 0.1, -0.3), wdot_pred=(0.1, 0.3, 0.2))
    g = GainSet(k_wdx_djxx=-2.0, k_wdy_djyy=-200.0, k_wdz_djzz=-20.0)
    one = correct_roll_yaw_inertia(aug_state(), innov, g)
    two = correct_roll_yaw_inertia(aug_state(), innov, g.scaled(2.0))
    assert (two.djxx, two.djzz) == (2 * one.djxx, 2 * one.djzz)
    assert correct_pitch_inertia(aug_state(), innov, g.scaled(2.0)).djyy == \
        2 * correct_pitch_inertia(aug_state(), innov, g).djyy


def _paired_rates(real_dev, steer, seconds, road=None):
    """Filtered angular accelerations of a real car with ``real_dev`` and of the nominal twin."""
    real = DigitalTwin(BASE_VEHICLE, state=TwinState.rolling(20.0))
    real.set_params(**real_dev)
    twin = DigitalTwin(BASE_VEHICLE, state=TwinState.rolling(20.0))
    d_real, d_twin = RateDifferentiator(100.0, 4.0), RateDifferentiator(100.0, 4.0)
    out = []
    for k in range(int(seconds * 100)):
        u = np.zeros(5)
        u[0] = steer(k * 0.01)
        if road is not None:
            u[3], u[4] = road(k * 0.01), road(k * 0.01 - 2.85 / 20.0)
        real.step(u, 0.01)
        twin.step(u, 0.01)
        out.append((d_real.update(np.array([real.state.wx, real.state.wy, real.state.wz])),
                    d_twin.update(np.array([twin.state.wx, twin.state.wy, twin.state.wz]))))
    return out


def test_yaw_inertia_law_raises_estimate_for_heavier_real_car():
    pairs = _paired_rates({"djzz": 827.23}, lambda t: 0.6 if t > 0.2 else 0.0, 1.0)
    # while the yaw rate builds up, the heavier car turns in more slowly
    window = [(m, p) for m, p in pairs if m[2] > 0.05]
    assert window
    for m, p in window[:10]:
        assert m[2] - p[2] < 0
        inc = inertia_increment(Innovation(np.zeros(10), np.zeros(10), m, p), 2, -20.0,
                                ObserverSettings(sign_source="measured"))
        assert inc > 0


def test_pitch_inertia_law_raises_estimate_for_heavier_real_car():
    bump = lambda t: 0.02 if 0.5 <= t < 0.6 else 0.0  # noqa: E731
    pairs = _paired_rates({"djyy": 757.0}, lambda t: 0.0, 1.0, road=bump)
    total = sum(inertia_increment(Innovation(np.zeros(10), np.zeros(10), m, p), 1, -200.0,
                                  ObserverSettings(sign_source="measured")) for m, p in pairs)
    assert total > 0


# -- differentiator, schedule, settings --------------------------------------------------------

def test_differentiator_tracks_a_ramp():
    d = RateDifferentiator(100.0, 10.0)
    out = None
    for k in range(200):
        out = d.update(np.full(3, 0.5 * k / 100.0))
    np.testing.assert_allclose(out, 0.5, rtol=1e-6)


def test_differentiator_is_zero_for_constant_input():
    d = RateDifferentiator(100.0, (1.0, 4.0, 1.0))
    for _ in range(10):
        assert np.all(d.update(np.array([1.0, 2.0, 3.0])) == 0.0)


def test_default_schedule_switches_on_time():
    s = StageSchedule()
    assert [s.stage_name(s.active(t)) for t in (0.0, 59.99, 60.0, 99.99, 100.0, 129.99, 130.0)] == \
        ["mass", "mass", "pitch", "pitch", "roll_yaw", "roll_yaw", "none"]
    assert StageSchedule.single("pitch").active(1e9) == 0
    with pytest.raises(ValueError):
        Stage("yaw", 1.0)


def test_gainset_validation():
    with pytest.raises(ValueError):
        GainSet(k_ax_dm=1.0, bounds={"k_ax_dm": (-20.0, 0.0)})
    with pytest.raises(ValueError):
        GainSet(yaw_gate=0.0)
    with pytest.raises(KeyError):
        GainSet.from_dict({"k_bogus": 1.0})
    g = GainSet.from_dict({"k_ax_dm": -1.5, "bounds": {"k_ax_dm": [-20, 0]}})
    assert GainSet.from_dict(g.to_dict()) == g
    assert set(GAIN_NAMES) <= set(g.to_dict())


def test_observer_settings_validation():
    assert ObserverSettings(cutoff_hz=4.0).cutoff_hz == (4.0, 4.0, 4.0)
    for bad in ({"sign_source": "gps"}, {"cutoff_hz": 0.0}, {"cutoff_hz": (1.0, 2.0)},
                {"ax_deadband": -1.0}):
        with pytest.raises(ValueError):
            ObserverSettings(**bad)


# -- closed loop ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def urban_run(vehicle):
    return simulate_truth(Scenario("urban", 40.0, seed=2, loads=vehicle.loads), vehicle.base, vehicle.config)


def test_zero_gains_keep_deviations_at_initial_value(urban_run):
    res = run_estimation(BASE_VEHICLE, None, urban_run.u_twin, urban_run.y,
                         100.0, GainSet(), StageSchedule(), initial=(12.0, 3.0, -4.0, 5.0),
                         x0=urban_run.x0)
    assert np.all(res.deviations == np.array([12.0, 3.0, -4.0, 5.0]))


def test_deviations_constant_outside_their_stage(urban_run):
    gains = GainSet(k_wheel=0.5, k_ax_dm=-1.5, k_wdx_djxx=-2.0, k_wdy_djyy=-200.0, k_wdz_djzz=-20.0)
    sched = StageSchedule((Stage("mass", 10.0), Stage("roll_yaw", 10.0)))
    res = run_estimation(BASE_VEHICLE, None, urban_run.u_twin, urban_run.y, 100.0, gains, sched,
                         x0=urban_run.x0)
    t = res.t
    # mass frozen after its stage, pitch never active, roll/yaw frozen before and after theirs
    dm = res.column("dm")
    assert np.all(dm[t > 10.0 + 1e-9] == dm[t <= 10.0 + 1e-9][-1])
    assert np.all(res.column("djyy") == 0.0)
    assert np.all(res.column("djzz")[t <= 10.0 - 1e-9] == 0.0)
    djxx = res.column("djxx")
    assert np.all(djxx[t > 20.0 + 1e-9] == djxx[t <= 20.0 + 1e-9][-1])


def test_mass_frozen_while_yaw_rate_above_gate(vehicle):
    run = simulate_truth(Scenario("circuit-like", 30.0, seed=3, loads=vehicle.loads), vehicle.base,
                         vehicle.config)
    gains = GainSet(k_wheel=0.5, k_wy_wy=0.3, k_ax_dm=-1.5)
    res = run_estimation(BASE_VEHICLE, None, run.u_twin, run.y, 100.0, gains,
                         StageSchedule.single("mass"), x0=run.x0)
    dm = res.column("dm")
    cornering = np.abs(run.y[:, WZ]) > gains.yaw_gate
    assert cornering.sum() > 50
    idx = np.flatnonzero(cornering)
    idx = idx[idx > 0]
    assert np.all(dm[idx] == dm[idx - 1])


def test_mass_converges_with_wrong_inertia(vehicle, run_config):
    dev = vehicle.deviations
    truth = vehicle.truth
    # twin inertias 20% above the truth; inertia laws disabled
    initial = (0.0, dev[1] + 0.2 * truth.jxx, dev[2] + 0.2 * truth.jyy, dev[3] + 0.2 * truth.jzz)
    out = run_condition(vehicle, run_config.scenario(), "staged", Condition(snr=10.0), run_config.gains(),
                        run_config.settings(), StageSchedule.single("mass"), initial, seed=1)
    assert out.rms["dm"] <= 10.0
