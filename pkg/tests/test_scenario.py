import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinloop.observer import YAW_GATE_DEFAULT
from twinloop.scenario import (KINDS, TRUTH_COLUMNS, NoiseSettings, Scenario, UndefinedSNRError,
                               apply_measurement_noise, corrupt_road, gen_inputs, gen_road_profile,
                               rear_profile, simulate_truth, swept_frequency, write_truth_csv)
from twinloop.twin import MEAS_NAMES

WZ = MEAS_NAMES.index("wz")


def test_zero_intensity_road_is_flat():
    assert np.array_equal(gen_road_profile(10.0, 100.0, 0.0, 1), np.zeros(1000))


def test_road_variance_grows_linearly_in_time():
    # disjoint increments of a random walk are independent with variance sigma^2 * lag
    sigma, fs = 0.01, 100.0
    z = np.stack([gen_road_profile(20.0, fs, sigma, seed) for seed in range(100)])
    for lag in (1.0, 2.0, 4.0):
        step = int(lag * fs)
        inc = np.diff(z[:, ::step], axis=1).ravel()
        assert np.mean(inc ** 2) == pytest.approx(sigma ** 2 * lag, rel=0.15)


def test_road_corruption_magnitude():
    z = gen_road_profile(60.0, 100.0, 0.01, 3)
    err = math.sqrt(np.mean((corrupt_road(z, 0.1, 3) - z) ** 2))
    assert 0.0005 < err < 0.01  # millimetre order
    assert np.array_equal(corrupt_road(z, 0.0, 3), z)


def test_rear_profile_is_delayed_front():
    fs, v, wb = 100.0, 20.0, 2.0
    z = np.sin(np.arange(500) / 30.0)
    rear = rear_profile(z, fs, v, wb)
    lag = int(wb / v * fs)
    np.testing.assert_allclose(rear[lag:], z[:-lag], atol=1e-12)
    assert np.all(rear[:lag] == 0.0)


def _clean(n=5000, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(n, len(MEAS_NAMES)))
    y[:, WZ] += 0.3
    return y


@pytest.mark.parametrize("snr", [2.0, 10.0, 100.0])
def test_realized_snr_matches_target(snr):
    clean = _clean()
    noisy = apply_measurement_noise(clean, NoiseSettings(snr=snr), seed=4)
    for ch in ("ax", "wx", "wy", "wz"):
        j = MEAS_NAMES.index(ch)
        realized = np.mean(clean[:, j] ** 2) / np.var(noisy[:, j] - clean[:, j])
        assert realized == pytest.approx(snr, rel=0.05)


def test_unselected_channels_pass_through_bitwise():
    clean = _clean()
    noisy = apply_measurement_noise(clean, NoiseSettings(snr=10.0), seed=1)
    for ch in MEAS_NAMES:
        if ch not in ("ax", "wx", "wy", "wz"):
            j = MEAS_NAMES.index(ch)
            assert np.array_equal(noisy[:, j], clean[:, j])


def test_zero_sigma_is_identity_and_silent_channel_errors():
    clean = _clean()
    assert np.array_equal(apply_measurement_noise(clean, NoiseSettings(sigma={"ax": 0.0}), 1), clean)
    clean[:, MEAS_NAMES.index("wx")] = 0.0
    with pytest.raises(UndefinedSNRError):
        apply_measurement_noise(clean, NoiseSettings(snr=10.0), 1)


def test_swept_steer_ends_at_four_hertz():
    duration, fs = 60.0, 100.0
    u = gen_inputs("swept-steer", duration, fs, 0).u[:, 0]
    t = np.arange(len(u)) / fs
    assert swept_frequency(t[-1:], duration)[0] == pytest.approx(4.0, abs=0.1)
    # count zero crossings of the last two seconds: ~2 per period
    tail = u[t > duration - 2.0]
    crossings = np.count_nonzero(np.diff(np.signbit(tail)))
    assert crossings / 2 / 2.0 == pytest.approx(4.0 - 4.0 / 60.0, abs=0.5)


def test_urban_is_mostly_below_the_yaw_gate(vehicle):
    run = simulate_truth(Scenario("urban", 60.0, seed=5, loads=vehicle.loads), vehicle.base, vehicle.config)
    duty = np.mean(np.abs(run.y_clean[:, WZ]) < YAW_GATE_DEFAULT)
    assert duty >= 0.6


@pytest.mark.parametrize("kind", KINDS)
def test_zero_duration_gives_empty_stream(kind):
    assert gen_inputs(kind, 0.0, 100.0, 1).u.shape == (0, 5)


@settings(max_examples=10)
@given(st.sampled_from(KINDS), st.integers(0, 2 ** 31))
def test_generators_are_seed_deterministic(kind, seed):
    a, b = gen_inputs(kind, 5.0, 100.0, seed), gen_inputs(kind, 5.0, 100.0, seed)
    assert np.array_equal(a.u, b.u)
    assert np.array_equal(gen_road_profile(5.0, 100.0, 0.01, seed), gen_road_profile(5.0, 100.0, 0.01, seed))


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario("drag-race", 1.0)
    with pytest.raises(ValueError):
        Scenario("urban", 0.005)
    with pytest.raises(ValueError):
        NoiseSettings(channels=("speedometer",))


def test_truth_csv_schema_and_determinism(tmp_path, vehicle):
    sc = Scenario("urban", 2.0, seed=8, loads=vehicle.loads, noise=NoiseSettings(snr=10.0))
    a = write_truth_csv(simulate_truth(sc, vehicle.base, vehicle.config), tmp_path / "a.csv")
    b = write_truth_csv(simulate_truth(sc, vehicle.base, vehicle.config), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    with a.open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRUTH_COLUMNS
    assert len(rows) == 201 and all(len(r) == len(TRUTH_COLUMNS) for r in rows)


def test_empty_truth_csv_is_header_only(tmp_path, vehicle):
    path = write_truth_csv(simulate_truth(Scenario("urban", 0.0), vehicle.base, vehicle.config),
                           tmp_path / "e.csv")
    assert path.read_text().splitlines() == [",".join(TRUTH_COLUMNS)]
