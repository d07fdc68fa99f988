import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnnmtt.scenario import (
    MeasurementSet,
    MultiTargetState,
    ScenarioConfig,
    Sensor,
    TargetState,
    apply_birth_death,
    expected_in_window,
    in_window,
    init_scenario,
    run_simulation,
    sense,
    step_dynamics,
    stream,
    wrap_angle,
)


def single(p, v=(0.0, 0.0)):
    return MultiTargetState.from_targets([TargetState(p, v, 0)])


def within_3sigma(mean, expected, var, n):
    return abs(mean - expected) <= 3 * math.sqrt(var / n)


# --- config -----------------------------------------------------------------


def test_config_derived_widths():
    c = ScenarioConfig(window_width_w=1.5, sensor_range_R=2.0)
    assert c.sim_width_W == 1.5 + 2 * 2.0
    assert c.birth_rate_lambda == pytest.approx(0.5 * 1.5**2)
    assert c.replace(window_width_w=3.0).birth_rate_lambda == pytest.approx(4.5)


def test_config_roundtrip_and_validation():
    c = ScenarioConfig(seed=7, clutter_rate_lambda_C=12.0)
    assert ScenarioConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        ScenarioConfig(p_death=1.5)
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"bogus": 1})


def test_state_rejects_duplicate_ids_and_nonfinite():
    with pytest.raises(ValueError):
        MultiTargetState(np.zeros((2, 2)), np.zeros((2, 2)), [1, 1])
    with pytest.raises(ValueError):
        MultiTargetState([[np.nan, 0]], [[0, 0]], [0])


def test_measurement_invariants():
    with pytest.raises(ValueError):
        MeasurementSet([-1.0], [0.0], [0], [False])
    with pytest.raises(ValueError):
        MeasurementSet([1.0], [-np.pi], [0], [False])


@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_range(a):
    w = float(wrap_angle(a))
    assert -np.pi < w <= np.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


# --- dynamics ---------------------------------------------------------------


@pytest.mark.parametrize(
    "v, eta, p_out, v_out",
    [
        ((0, 0), (0, 0), (0, 0), (0, 0)),
        ((5, 0), (0, 0), (5, 0), (5, 0)),
        ((5, 0), (1, 0), (5.5, 0), (6, 0)),
    ],
)
def test_cv_step(v, eta, p_out, v_out):
    s = step_dynamics(single((0.0, 0.0), v), ScenarioConfig(), noise=[eta])
    np.testing.assert_array_equal(s.positions[0], p_out)
    np.testing.assert_array_equal(s.velocities[0], v_out)
    assert s.time_step == 1


def test_dynamics_noise_shared_between_rows():
    # p' - p - T v = T^2/2 * eta and v' - v = T * eta for the same eta
    c = ScenarioConfig(time_step_T=2.0)
    s0 = MultiTargetState(np.zeros((500, 2)), np.ones((500, 2)), np.arange(500))
    s1 = step_dynamics(s0, c, stream(0, 1))
    eta_p = (s1.positions - s0.positions - 2.0 * s0.velocities) / 2.0
    eta_v = (s1.velocities - s0.velocities) / 2.0
    np.testing.assert_allclose(eta_p, eta_v, rtol=1e-12, atol=1e-12)
    assert np.std(eta_v) == pytest.approx(1.0, rel=0.1)


def test_birth_death_extremes():
    s = MultiTargetState(np.zeros((10, 2)), np.zeros((10, 2)), np.arange(10))
    gone = apply_birth_death(s, ScenarioConfig(p_death=1.0, birth_rate_lambda=0.0), stream(0))
    assert len(gone) == 0
    same = apply_birth_death(s, ScenarioConfig(p_death=0.0, birth_rate_lambda=0.0), stream(0))
    np.testing.assert_array_equal(same.positions, s.positions)
    np.testing.assert_array_equal(same.ids, s.ids)


def test_births_get_fresh_ids():
    s = MultiTargetState(np.zeros((3, 2)), np.zeros((3, 2)), [0, 4, 9])
    out = apply_birth_death(s, ScenarioConfig(p_death=0.0, birth_rate_lambda=20.0), stream(1), next_id=100)
    new = out.ids[3:]
    assert len(new) > 0 and new.min() == 100
    assert len(np.unique(out.ids)) == len(out)


def test_initial_counts_match_poisson_means():
    c = ScenarioConfig()
    nt, ns = [], []
    for s in range(2000):
        st_, sensors = init_scenario(c, stream(s, 0))
        nt.append(len(st_))
        ns.append(len(sensors))
    assert within_3sigma(np.mean(nt), 250.0, 250.0, len(nt))
    assert within_3sigma(np.mean(ns), 6.25, 6.25, len(ns))


def test_initial_count_small_region():
    # W = 1 km: 0.5 km window with 0.25 km range
    c = ScenarioConfig(window_width_w=0.5, sensor_range_R=0.25)
    counts = [len(init_scenario(c, stream(s, 0))[0]) for s in range(20000)]
    assert within_3sigma(np.mean(counts), 10.0, 10.0, len(counts))


def test_zero_density_gives_empty_state():
    st_, sensors = init_scenario(ScenarioConfig(target_density=0.0, sensor_density=0.0), stream(0))
    assert len(st_) == 0 and sensors == ()


def test_initial_positions_uniform_and_velocity_spread():
    c = ScenarioConfig()
    st_, _ = init_scenario(c, stream(5, 0))
    half = c.sim_width_m / 2
    assert np.all(np.abs(st_.positions) <= half)
    assert np.std(st_.velocities) == pytest.approx(5.0, rel=0.15)


# --- sensing ----------------------------------------------------------------


def test_out_of_range_target_never_detected():
    c = ScenarioConfig(p_detect=1.0, clutter_rate_lambda_C=0.0)
    z = sense(single((3000.0, 0.0)), [Sensor((0.0, 0.0), 0)], c, stream(0))
    assert len(z) == 0


def test_noise_free_measurement():
    c = ScenarioConfig(p_detect=1.0, clutter_rate_lambda_C=0.0, range_noise_std=0.0, bearing_noise_std=0.0)
    z = sense(single((100.0, 0.0)), [Sensor((0.0, 0.0), 0)], c, stream(0))
    assert z.ranges.tolist() == [100.0] and z.bearings.tolist() == [0.0]


def test_coincident_target_bearing_zero():
    c = ScenarioConfig(p_detect=1.0, clutter_rate_lambda_C=0.0, range_noise_std=0.0, bearing_noise_std=0.0)
    z = sense(single((40.0, -20.0)), [Sensor((40.0, -20.0), 3)], c, stream(0))
    assert z.ranges.tolist() == [0.0] and z.bearings.tolist() == [0.0]


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1900, 1900), st.floats(-1900, 1900),
    st.floats(-5000, 5000), st.floats(-5000, 5000),
)
def test_noise_free_cartesian_roundtrip(dx, dy, sx, sy):
    if math.hypot(dx, dy) > 2000 or math.hypot(dx, dy) < 1e-3:
        return
    c = ScenarioConfig(p_detect=1.0, clutter_rate_lambda_C=0.0, range_noise_std=0.0, bearing_noise_std=0.0)
    sensors = [Sensor((sx, sy), 0)]
    truth = np.array([sx + dx, sy + dy])
    z = sense(single(tuple(truth)), sensors, c, stream(0))
    back = z.to_cartesian(sensors)[0]
    assert np.linalg.norm(back - truth) <= 1e-9 * max(1.0, np.linalg.norm(truth))


def test_noise_free_no_detection_beyond_range(rng):
    c = ScenarioConfig(p_detect=1.0, clutter_rate_lambda_C=0.0, range_noise_std=0.0, bearing_noise_std=0.0)
    p = rng.uniform(-4000, 4000, size=(2000, 2))
    s = MultiTargetState(p, np.zeros_like(p), np.arange(len(p)))
    z = sense(s, [Sensor((0.0, 0.0), 0)], c, stream(2))
    assert np.all(z.ranges <= c.range_m)
    assert len(z) == int((np.hypot(p[:, 0], p[:, 1]) <= c.range_m).sum())


def test_clutter_uniform_on_disk():
    c = ScenarioConfig(clutter_rate_lambda_C=40.0)
    sensors = [Sensor((0.0, 0.0), i) for i in range(500)]
    z = sense(MultiTargetState.empty(), sensors, c, stream(4))
    r = z.ranges / c.range_m
    assert np.all(z.is_clutter) and np.all(r <= 1.0)
    # r^2 is uniform on [0, 1] for a uniform disk
    assert np.mean(r**2) == pytest.approx(0.5, abs=3 * math.sqrt(1 / 12 / len(r)))


# --- simulation -------------------------------------------------------------


def test_run_simulation_length_and_determinism():
    c = ScenarioConfig(seed=11)
    a, b = run_simulation(c, 5, 2), run_simulation(c, 5, 2)
    assert len(a) == 5
    for (sa, za), (sb, zb) in zip(a, b):
        np.testing.assert_array_equal(sa.positions, sb.positions)
        np.testing.assert_array_equal(sa.ids, sb.ids)
        np.testing.assert_array_equal(za.ranges, zb.ranges)
        np.testing.assert_array_equal(za.bearings, zb.bearings)
    other = run_simulation(c, 5, 3)
    assert not np.array_equal(other[0][0].positions[:3], a[0][0].positions[:3])


def test_single_step_consistent_with_init():
    c = ScenarioConfig(seed=2)
    run = run_simulation(c, 1)
    s0 = run.initial
    s1, z1 = run[0]
    assert s1.time_step == 1 and z1.time_step == 1
    ids = np.intersect1d(s0.ids, s1.ids)
    i0 = np.searchsorted(s0.ids, ids)
    i1 = np.searchsorted(s1.ids, ids)
    # survivors moved by one CV step: velocity change equals twice the residual position change
    dv = s1.velocities[i1] - s0.velocities[i0]
    dp = s1.positions[i1] - s0.positions[i0] - s0.velocities[i0]
    np.testing.assert_allclose(dp, dv / 2, atol=1e-9)


def test_ids_never_reused():
    run = run_simulation(ScenarioConfig(seed=5, p_death=0.5, birth_rate_lambda=3.0), 30)
    seen_dead = set()
    alive_prev = set(run.initial.ids.tolist())
    for s, _ in run:
        alive = set(s.ids.tolist())
        assert not (alive & seen_dead)
        seen_dead |= alive_prev - alive
        alive_prev = alive


def test_measurement_sensor_ids_reference_sensors():
    run = run_simulation(ScenarioConfig(seed=3), 3)
    ids = {s.id for s in run.sensors}
    for _, z in run:
        assert set(z.sensor_ids.tolist()) <= ids


@pytest.mark.slow
def test_in_window_count_matches_birth_death_balance():
    c = ScenarioConfig(seed=21)
    deviations = []
    for sim in range(100):
        run = run_simulation(c, 100, sim)
        d = [in_window(s.positions, c.window_m).sum() - expected_in_window(c, s.time_step) for s, _ in run]
        deviations.append(np.mean(d))
    deviations = np.array(deviations)
    se = deviations.std(ddof=1) / math.sqrt(len(deviations))
    assert abs(deviations.mean()) <= 3 * se
