import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from cnnmtt import _core_py, kernels
from cnnmtt.raster import (
    DEFAULT_RESOLUTION,
    GridSpec,
    IntensityImage,
    PulseConfig,
    measurement_intensity,
    stack_history,
    target_intensity,
    window,
)
from cnnmtt.scenario import MeasurementSet, MultiTargetState, ScenarioConfig, Sensor

RHO = DEFAULT_RESOLUTION


def targets(p):
    p = np.asarray(p, float).reshape(-1, 2)
    return MultiTargetState(p, np.zeros_like(p), np.arange(len(p)))


def meas(r, b, sid=0):
    r, b = np.atleast_1d(r), np.atleast_1d(b)
    return MeasurementSet(r, b, np.full(len(r), sid), np.zeros(len(r), bool))


# --- grid -------------------------------------------------------------------


def test_grid_pixel_centers():
    g = GridSpec(2.0, 4, (10.0, -3.0))
    c = g.centers().reshape(4, 4, 2)
    assert tuple(c[1, 3]) == (12.0, 3.0)
    assert g.extent == 8.0
    assert GridSpec.from_dict(g.to_dict()) == g


def test_centered_grid_symmetric():
    g = GridSpec.centered(1000.0)
    assert g.width_pixels == 128
    x, _ = g.axes()
    np.testing.assert_allclose(x, -x[::-1], atol=1e-9)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(0.0, 4, (0, 0))
    with pytest.raises(ValueError):
        GridSpec(1.0, 0, (0, 0))
    with pytest.raises(ValueError):
        PulseConfig(sigma=10.0, truncation_radius=30.0)


# --- target intensity -------------------------------------------------------


def test_empty_state_gives_zero_image():
    im = target_intensity(MultiTargetState.empty(), GridSpec.centered(500.0))
    assert im.values.shape == (1, 64, 64) and not im.values.any()


def test_pulse_value_formula():
    g = GridSpec(1.0, 11, (-5.0, -5.0))
    pulse = PulseConfig(sigma=2.0)
    im = target_intensity(targets([(0.0, 0.0)]), g, pulse)
    x = g.centers()
    d2 = (x**2).sum(1)
    want = np.where(d2 <= 100.0, np.exp(-d2 / 8.0) / (2 * np.pi * 4.0), 0.0).reshape(11, 11)
    np.testing.assert_allclose(im.values[0], want, rtol=1e-12, atol=1e-300)


def test_single_pulse_unit_mass():
    g = GridSpec.centered(500.0)
    pulse = PulseConfig(sigma=4 * RHO)
    im = target_intensity(targets([g.centers()[64 * 32 + 32]]), g, pulse)
    assert im.mass()[0] == pytest.approx(1.0, abs=0.02)


def test_two_pulses_mass():
    im = target_intensity(targets([(-100.0, 0.0), (100.0, 30.0)]), GridSpec.centered(500.0))
    assert im.mass()[0] == pytest.approx(2.0, abs=0.04)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 30), st.data())
def test_mass_conservation_interior(n, data):
    g = GridSpec.centered(1000.0)
    pulse = PulseConfig()
    lim = g.extent / 2 - 3 * pulse.sigma - RHO
    pts = data.draw(st.lists(st.tuples(st.floats(-lim, lim), st.floats(-lim, lim)), min_size=n, max_size=n))
    im = target_intensity(targets(pts), g, pulse)
    assert abs(im.mass()[0] - n) <= 0.02 * max(1, n)


@settings(max_examples=25, deadline=None)
@given(st.integers(-6, 6), st.integers(-6, 6))
def test_shift_by_whole_pixels(a, b):
    g = GridSpec.centered(500.0)
    p = np.array([[3.3, -7.1], [-40.2, 55.0]])
    base = target_intensity(targets(p), g).values[0]
    moved = target_intensity(targets(p + RHO * np.array([a, b])), g).values[0]
    n = g.width_pixels
    i0, i1 = max(0, -a), n - max(0, a)
    j0, j1 = max(0, -b), n - max(0, b)
    np.testing.assert_allclose(moved[i0 + a : i1 + a, j0 + b : j1 + b], base[i0:i1, j0:j1], atol=1e-9)


def test_linearity_exact():
    g = GridSpec.centered(500.0)
    a, b = [(10.0, 10.0), (-50.0, 20.0)], [(70.0, -90.0)]
    both = target_intensity(targets(a + b), g).values
    np.testing.assert_array_equal(both, target_intensity(targets(a), g).values + target_intensity(targets(b), g).values)


def test_outside_targets_contribute_tail_only():
    g = GridSpec.centered(250.0)
    im = target_intensity(targets([(g.extent / 2 + 10.0, 0.0)]), g)
    assert 0 < im.mass()[0] < 0.5


# --- measurement intensity --------------------------------------------------


def _likelihood_mass_oracle(r, s_r, s_b):
    # integral of the truncated likelihood over the plane, in polar coordinates
    inner = integrate.quad(lambda x: math.exp(-0.5 * ((x - r) / s_r) ** 2), r - 5 * s_r, r + 5 * s_r)[0]
    ang = integrate.quad(lambda t: math.exp(-0.5 * (t / s_b) ** 2), -5 * s_b, 5 * s_b)[0]
    return inner * ang / (2 * math.pi * s_r * s_b)


def test_single_measurement_mass():
    g = GridSpec.centered(1000.0)
    c = ScenarioConfig()
    sensors = [Sensor((-300.0, -200.0), 0)]
    im = measurement_intensity(meas(400.0, 0.6), sensors, g, c)
    want = _likelihood_mass_oracle(400.0, c.range_noise_std, c.bearing_noise_std)
    assert im.mass()[0] == pytest.approx(want, abs=0.05)
    assert im.mass()[0] == pytest.approx(1.0, abs=0.05)


def test_likelihood_pixel_value():
    g = GridSpec(5.0, 40, (0.0, 0.0))
    c = ScenarioConfig()
    im = measurement_intensity(meas(100.0, 0.3), [Sensor((0.0, 0.0), 0)], g, c)
    i, j = 18, 6
    x, y = 5.0 * i, 5.0 * j
    r, b = math.hypot(x, y), math.atan2(y, x)
    er, eb = (r - 100.0) / c.range_noise_std, (b - 0.3) / c.bearing_noise_std
    want = math.exp(-0.5 * (er**2 + eb**2)) / (2 * math.pi * c.range_noise_std * c.bearing_noise_std * r)
    assert im.values[0, i, j] == pytest.approx(want, rel=1e-12)


def test_measurement_superposition():
    g = GridSpec.centered(1000.0)
    sensors = [Sensor((0.0, 0.0), 0), Sensor((300.0, -100.0), 1)]
    a, b = meas(200.0, 1.0, 0), meas(350.0, -2.5, 1)
    both = MeasurementSet.concat([a, b])
    np.testing.assert_allclose(
        measurement_intensity(both, sensors, g).values,
        measurement_intensity(a, sensors, g).values + measurement_intensity(b, sensors, g).values,
        rtol=1e-12, atol=0,
    )


def test_empty_measurements_zero_image():
    im = measurement_intensity(meas([], []), [Sensor((0.0, 0.0), 0)], GridSpec.centered(250.0))
    assert not im.values.any()


def test_sensor_pixel_singularity_zeroed():
    g = GridSpec(1.0, 9, (-4.0, -4.0))
    c = ScenarioConfig(range_noise_std=2.0, bearing_noise_std=0.5)
    im = measurement_intensity(meas(1.0, 0.0), [Sensor((0.0, 0.0), 0)], g, c)
    assert im.values[0, 4, 4] == 0.0 and np.isfinite(im.values).all()


def test_bearing_wrap_sector():
    # a measurement at bearing pi must light pixels on both sides of the branch cut
    g = GridSpec.centered(500.0)
    im = measurement_intensity(meas(150.0, np.pi), [Sensor((0.0, 0.0), 0)], g)
    v = im.values[0]
    x, y = g.axes()
    assert v[:, y > 0].sum() > 0 and v[:, y < 0].sum() > 0
    assert im.mass()[0] == pytest.approx(1.0, abs=0.05)


# --- history and window -----------------------------------------------------


def _frames(g, k, seed=0):
    r = np.random.default_rng(seed)
    return [IntensityImage(g, r.random((g.width_pixels,) * 2)) for _ in range(k)]


def test_stack_history_rules(small_grid):
    f = _frames(small_grid, 3)
    np.testing.assert_array_equal(stack_history(f, 1).values[0], f[-1].values[0])
    two = stack_history(f[:2], 3).values
    assert not two[0].any()
    np.testing.assert_array_equal(two[1], f[0].values[0])
    assert not np.array_equal(stack_history(f, 3).values, stack_history(f[::-1], 3).values)
    with pytest.raises(ValueError):
        stack_history([f[0], IntensityImage(GridSpec.centered(500.0), np.zeros((64, 64)))], 2)


def test_window_cases(small_grid):
    im = _frames(small_grid, 1)[0]
    np.testing.assert_array_equal(window(im, small_grid.extent).values, im.values)
    assert not window(im, 1e-9).values.any()
    w = window(im, 100.0)
    np.testing.assert_array_equal(window(w, 100.0).values, w.values)
    x, y = small_grid.axes()
    inside = (np.abs(x)[:, None] < 50) & (np.abs(y)[None, :] < 50)
    np.testing.assert_array_equal(w.values[0][inside], im.values[0][inside])
    assert not w.values[0][~inside].any()


@given(st.floats(1.0, 400.0))
def test_window_never_adds_mass(a):
    im = _frames(GridSpec.centered(250.0), 1, seed=9)[0]
    assert window(im, a).mass()[0] <= im.mass()[0]


# --- backends ---------------------------------------------------------------


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_backends_agree(seed):
    if kernels.BACKEND != "cython":
        pytest.skip("compiled extension not built")
    r = np.random.default_rng(seed)
    n = 48
    args = (-180.0, -170.0, RHO)
    xs, ys = r.uniform(-250, 250, 7), r.uniform(-250, 250, 7)
    a, b = np.zeros((n, n)), np.zeros((n, n))
    kernels.splat_gaussian(a, xs, ys, *args, 15.6, 78.0)
    _core_py.splat_gaussian(b, xs, ys, *args, 15.6, 78.0)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-18)
    sx, sy = r.uniform(-300, 300, 9), r.uniform(-300, 300, 9)
    rr, bb = r.uniform(0, 500, 9), r.uniform(-np.pi, np.pi, 9)
    a[:], b[:] = 0, 0
    kernels.splat_range_bearing(a, sx, sy, rr, bb, 10.0, 0.035, 5.0, *args)
    _core_py.splat_range_bearing(b, sx, sy, rr, bb, 10.0, 0.035, 5.0, *args)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-16)


def test_pure_python_override():
    import os
    import subprocess
    import sys

    env = {**os.environ, "CNNMTT_PURE_PYTHON": "1"}
    out = subprocess.run(
        [sys.executable, "-c", "from cnnmtt import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"
