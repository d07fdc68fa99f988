"""Intensity images of target sets and measurement sets.

Pixel ``(i, j)`` of a :class:`GridSpec` sits at ``origin + rho * (i, j)``, so
the first array axis runs along x and the second along y. Image values are
intensities in 1/m^2; ``mass`` integrates them back to counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .scenario import KM, MeasurementSet, MultiTargetState, ScenarioConfig, Sensor, sensor_positions

PIXELS_PER_KM = 128
DEFAULT_RESOLUTION = KM / PIXELS_PER_KM


@dataclass(frozen=True)
class GridSpec:
    resolution_rho: float
    width_pixels: int
    origin: tuple[float, float]

    def __post_init__(self):
        if not self.resolution_rho > 0:
            raise ValueError("resolution must be positive")
        if self.width_pixels < 1:
            raise ValueError("grid needs at least one pixel")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def centered(cls, width_m: float, resolution: float = DEFAULT_RESOLUTION) -> "GridSpec":
        """Square grid of extent ``width_m`` centered on the world origin."""
        n = int(round(width_m / resolution))
        half = (n - 1) * resolution / 2
        return cls(resolution, n, (-half, -half))

    @property
    def extent(self) -> float:
        return self.width_pixels * self.resolution_rho

    @property
    def center(self) -> tuple[float, float]:
        half = (self.width_pixels - 1) * self.resolution_rho / 2
        return (self.origin[0] + half, self.origin[1] + half)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates along x and y."""
        k = np.arange(self.width_pixels) * self.resolution_rho
        return self.origin[0] + k, self.origin[1] + k

    def centers(self) -> np.ndarray:
        """All pixel centers as an ``(N*N, 2)`` array in ``values[i, j]`` order."""
        x, y = self.axes()
        xx, yy = np.meshgrid(x, y, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def inside(self, width_m: float, center=(0.0, 0.0)) -> np.ndarray:
        """Mask of pixel centers strictly inside a square of side ``width_m``."""
        x, y = self.axes()
        half = width_m / 2
        mx = np.abs(x - center[0]) < half
        my = np.abs(y - center[1]) < half
        return mx[:, None] & my[None, :]

    def to_dict(self) -> dict:
        return {"resolution_rho": self.resolution_rho, "width_pixels": self.width_pixels, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(d["resolution_rho"], d["width_pixels"], tuple(d["origin"]))


@dataclass(frozen=True, eq=False)
class IntensityImage:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[None]
        n = self.grid.width_pixels
        if v.ndim != 3 or v.shape[1:] != (n, n):
            raise ValueError(f"values must have shape (C, {n}, {n}), got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def mass(self) -> np.ndarray:
        """Per-channel integral, sum(values) * rho^2."""
        return self.values.sum(axis=(1, 2)) * self.grid.resolution_rho**2

    def channel(self, c: int) -> "IntensityImage":
        return IntensityImage(self.grid, self.values[c : c + 1])


@dataclass(frozen=True)
class PulseConfig:
    """Target pulse shape. ``sigma`` defaults to two pixels of the default grid."""

    sigma: float = 2 * DEFAULT_RESOLUTION
    truncation_radius: float | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.truncation_radius is None:
            object.__setattr__(self, "truncation_radius", 5.0 * self.sigma)
        if self.truncation_radius < 4 * self.sigma:
            raise ValueError("truncation radius must be at least 4 sigma")


# measurement likelihoods are cut at +-5 std in range and bearing
LIKELIHOOD_NSIG = 5.0


def target_intensity(state: MultiTargetState, grid: GridSpec, pulse: PulseConfig = PulseConfig()) -> IntensityImage:
    """Sampled sum of unit-mass Gaussian pulses at the target positions."""
    out = np.zeros((grid.width_pixels, grid.width_pixels))
    p = state.positions if isinstance(state, MultiTargetState) else np.asarray(state, float).reshape(-1, 2)
    kernels.splat_gaussian(
        out,
        np.ascontiguousarray(p[:, 0]),
        np.ascontiguousarray(p[:, 1]),
        grid.origin[0],
        grid.origin[1],
        grid.resolution_rho,
        pulse.sigma,
        pulse.truncation_radius,
    )
    return IntensityImage(grid, out[None])


def measurement_intensity(
    measurements: MeasurementSet,
    sensors: Sequence[Sensor],
    grid: GridSpec,
    config: ScenarioConfig = ScenarioConfig(),
) -> IntensityImage:
    """Sampled sum of range-bearing likelihoods over every measurement."""
    out = np.zeros((grid.width_pixels, grid.width_pixels))
    if len(measurements):
        origin = sensor_positions(sensors, measurements.sensor_ids)
        kernels.splat_range_bearing(
            out,
            np.ascontiguousarray(origin[:, 0]),
            np.ascontiguousarray(origin[:, 1]),
            np.ascontiguousarray(measurements.ranges),
            np.ascontiguousarray(measurements.bearings),
            config.range_noise_std,
            config.bearing_noise_std,
            LIKELIHOOD_NSIG,
            grid.origin[0],
            grid.origin[1],
            grid.resolution_rho,
        )
    return IntensityImage(grid, out[None])


def stack_history(images: Sequence[IntensityImage], length: int) -> IntensityImage:
    """Stack the last ``length`` single-channel frames, oldest first.

    Missing leading frames are zero-filled.
    """
    if length < 1:
        raise ValueError("history length must be >= 1")
    if not images:
        raise ValueError("need at least one image")
    grid = images[-1].grid
    if any(im.grid != grid for im in images):
        raise ValueError("all images in a history must share one grid")
    n = grid.width_pixels
    out = np.zeros((length, n, n), dtype=images[-1].values.dtype)
    recent = images[-length:]
    for k, im in enumerate(recent):
        out[length - len(recent) + k] = im.values[-1]
    return IntensityImage(grid, out)


def window(image: IntensityImage, width_A: float, center=(0.0, 0.0)) -> IntensityImage:
    """Zero every pixel whose center lies outside the open square of side ``width_A``."""
    if not width_A > 0:
        return IntensityImage(image.grid, np.zeros_like(image.values))
    mask = image.grid.inside(width_A, center)
    return IntensityImage(image.grid, np.where(mask[None], image.values, 0))


__all__ = [
    "DEFAULT_RESOLUTION",
    "GridSpec",
    "IntensityImage",
    "LIKELIHOOD_NSIG",
    "PIXELS_PER_KM",
    "PulseConfig",
    "measurement_intensity",
    "stack_history",
    "target_intensity",
    "window",
]
