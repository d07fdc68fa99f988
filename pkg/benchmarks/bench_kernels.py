"""Time the compiled rasterization kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--frames 20] [--width-km 1]

Each frame is one simulated step: target pulses plus all measurement
likelihoods, rasterized at 128 px/km. Both backends get the same inputs and
their images are compared before timing is reported.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cnnmtt import _core_py, kernels
from cnnmtt.raster import LIKELIHOOD_NSIG, GridSpec, PulseConfig
from cnnmtt.scenario import ScenarioConfig, run_simulation, sensor_positions


def frame_jobs(config: ScenarioConfig, frames: int):
    run = run_simulation(config, frames)
    for state, meas in run:
        origin = sensor_positions(run.sensors, meas.sensor_ids)
        yield state.positions, origin, meas.ranges, meas.bearings


def rasterize(impl, grid: GridSpec, pulse: PulseConfig, config: ScenarioConfig, job):
    pos, origin, ranges, bearings = job
    n = grid.width_pixels
    u, v = np.zeros((n, n)), np.zeros((n, n))
    ox, oy = grid.origin
    impl.splat_gaussian(
        u, np.ascontiguousarray(pos[:, 0]), np.ascontiguousarray(pos[:, 1]), ox, oy, grid.resolution_rho,
        pulse.sigma, pulse.truncation_radius,
    )
    impl.splat_range_bearing(
        v, np.ascontiguousarray(origin[:, 0]), np.ascontiguousarray(origin[:, 1]), ranges, bearings,
        config.range_noise_std, config.bearing_noise_std, LIKELIHOOD_NSIG, ox, oy, grid.resolution_rho,
    )
    return u, v


def bench(impl, jobs, grid, pulse, config, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for job in jobs:
            rasterize(impl, grid, pulse, config, job)
        best = min(best, time.perf_counter() - t0)
    return best / len(jobs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=20)
    ap.add_argument("--width-km", type=float, default=1.0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    config = ScenarioConfig(window_width_w=args.width_km, seed=0)
    grid = GridSpec.centered(config.window_m)
    pulse = PulseConfig()
    jobs = list(frame_jobs(config, args.frames))
    n_meas = np.mean([len(j[2]) for j in jobs])

    if kernels.BACKEND != "cython":
        print("compiled extension unavailable; timing the fallback only")
        t = bench(_core_py, jobs, grid, pulse, config, args.repeat)
        print(f"python  {1e3 * t:8.2f} ms/frame")
        return

    from cnnmtt import _core

    for j in jobs[:3]:
        a = rasterize(_core, grid, pulse, config, j)
        b = rasterize(_core_py, grid, pulse, config, j)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-16)

    t_c = bench(_core, jobs, grid, pulse, config, args.repeat)
    t_py = bench(_core_py, jobs, grid, pulse, config, args.repeat)
    print(f"grid {grid.width_pixels}x{grid.width_pixels}, {n_meas:.0f} measurements/frame on average")
    print(f"cython  {1e3 * t_c:8.2f} ms/frame")
    print(f"python  {1e3 * t_py:8.2f} ms/frame")
    print(f"speedup {t_py / t_c:8.1f}x")


if __name__ == "__main__":
    main()
