"""Empirical check of the small-window to large-window transfer bound.

For a CNN with ``L`` layers of filter width ``K`` and filter-norm product
``H``, the loss on the unbounded problem satisfies

    L_inf <= L_win + P * C + sqrt(L_win * P * C)
    C = H^2 / B^2 * max(0, (B + L K)^2 - A^2)

where ``L_win`` is the loss with inputs cut to width ``A`` and errors
measured on width ``B``, and ``P`` is the input's second moment. Both losses
are Monte Carlo estimates here, so the verdict allows three combined
standard errors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import FrameDataset
from .model import Model, filter_l1_product, layer_l1_norms, receptive_field
from .trainer import LossReport, WindowSpec, evaluate_loss


def bound_constant(H: float, A: float, B: float, L: int, K: float) -> float:
    if not (A > 0 and B > 0 and K > 0 and L >= 1):
        raise ValueError("A, B, K must be positive and L >= 1")
    return H**2 / B**2 * max(0.0, (B + L * K) ** 2 - A**2)


def bound_rhs(loss_window: float, power: float, C: float) -> float:
    return loss_window + power * C + math.sqrt(loss_window * power * C)


def _as_datasets(datasets):
    if isinstance(datasets, FrameDataset):
        return [datasets]
    return datasets


def _frame_powers(dataset: FrameDataset, batch_size: int = 32) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), batch_size):
        x, _ = dataset.batch(range(start, min(start + batch_size, len(dataset))))
        out.append((x.astype(np.float64) ** 2).mean(axis=(1, 2, 3)))
    return np.concatenate(out) if out else np.zeros(0)


def estimate_signal_power(datasets) -> tuple[float, float]:
    """Mean of squared input intensities over frames, channels and pixels, with stderr."""
    v = np.concatenate([_frame_powers(ds) for ds in _as_datasets(datasets)] or [np.zeros(0)])
    if len(v) == 0:
        raise ValueError("empty dataset")
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def receptive_width_m(model: Model, rho: float) -> float:
    """Total receptive-field width in meters; plays the role of ``L K``."""
    return receptive_field(model.spec) * rho


def even_pixel_width(width: float, rho: float) -> float:
    """Round ``width`` down to an even number of pixels.

    A window that is an even number of pixels wide and centered on a pixel
    boundary covers exactly that many pixel centers, so its Riemann sum and
    its ``1/B^2`` normalization refer to the same area.
    """
    return 2 * rho * math.floor(width / (2 * rho) + 1e-9)


def tiled_centers(extent: float, A: float, rho: float, stride: int) -> list[tuple[float, float]]:
    """Half-overlapping side-``A`` windows covering the grid, snapped to stride multiples.

    Shifts that are whole multiples of the network stride keep every tile in
    the same sampling phase as the centered one.
    """
    n = 2 * max(1, int(math.floor(extent / A + 1e-9))) - 1
    step = stride * rho
    offs = [round((k - (n - 1) / 2) * A / 2 / step) * step for k in range(n)]
    return [(x, y) for x in offs for y in offs]


def _clustered(groups: list[np.ndarray], window=None) -> LossReport:
    """Pooled mean; stderr across groups (simulations) when there are several.

    Frames of one simulation share targets and sensors, so a frame-level
    stderr would overstate the precision.
    """
    rep = LossReport.from_samples(np.concatenate(groups), window)
    if len(groups) > 1:
        means = np.array([g.mean() for g in groups])
        rep.std_error = float(means.std(ddof=1) / math.sqrt(len(means)))
    return rep


@dataclass
class BoundReport:
    loss_window: float
    loss_window_se: float
    loss_large: float
    loss_large_se: float
    H: float
    C: float
    signal_power: float
    signal_power_se: float
    rhs: float
    holds: bool
    margin: float
    input_width_A: float
    output_width_B: float
    large_output_width: float
    eval_width: float
    receptive_field_px: int
    receptive_width_m: float
    num_layers: int
    num_frames: int
    num_window_centers: int
    layer_norms: list

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BoundReport":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "BoundReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def check_bound(
    model: Model,
    train_window: WindowSpec,
    eval_window_width: float,
    datasets,
    tile: bool = True,
    batch_size: int = 8,
) -> BoundReport:
    """Compare the large-window loss with the windowed loss plus the bound terms.

    ``datasets`` is one :class:`FrameDataset` or an iterable of them (e.g. one
    per simulation, generated lazily), all rasterized at the evaluation
    width. The windowed loss cuts inputs to ``A`` and scores ``C_B``; with
    ``tile`` it averages over window positions tiling the grid. The
    large-window loss feeds the full input and scores everything farther
    than one receptive field from the grid border, as a stand-in for the
    unbounded loss. With several datasets the standard errors are taken
    across their means.
    """
    A, B = train_window.input_width_A, train_window.output_width_B
    if eval_window_width <= B:
        raise ValueError("evaluation window must be wider than the training output window")
    L = model.spec.num_layers
    win_losses, large_losses, powers = [], [], []
    grid = None
    for ds in _as_datasets(datasets):
        if grid is None:
            grid = ds.grid
            rho = grid.resolution_rho
            lk = receptive_width_m(model, rho)
            centers = tiled_centers(grid.extent, A, rho, model.spec.total_stride) if tile else [(0.0, 0.0)]
            inner = even_pixel_width(eval_window_width - lk, rho)
            b_large = inner if inner > B else eval_window_width
        elif ds.grid != grid:
            raise ValueError("all datasets must share one grid")
        win_losses.append(evaluate_loss(model, ds, train_window, batch_size, centers).per_sample)
        large_losses.append(evaluate_loss(model, ds, WindowSpec(grid.extent, b_large), batch_size).per_sample)
        powers.append(_frame_powers(ds))
    if grid is None:
        raise ValueError("no frames to evaluate")
    win = _clustered(win_losses, train_window)
    large = _clustered(large_losses)
    pw = _clustered(powers)
    power, power_se = pw.mean_loss, pw.std_error
    H = filter_l1_product(model)
    C = bound_constant(H, A, B, L, lk / L)
    rhs = bound_rhs(win.mean_loss, power, C)
    margin = 3.0 * math.sqrt(win.std_error**2 + large.std_error**2)
    return BoundReport(
        loss_window=win.mean_loss,
        loss_window_se=win.std_error,
        loss_large=large.mean_loss,
        loss_large_se=large.std_error,
        H=H,
        C=C,
        signal_power=power,
        signal_power_se=power_se,
        rhs=rhs,
        holds=bool(large.mean_loss <= rhs + margin),
        margin=margin,
        input_width_A=A,
        output_width_B=B,
        large_output_width=b_large,
        eval_width=eval_window_width,
        receptive_field_px=receptive_field(model.spec),
        receptive_width_m=lk,
        num_layers=L,
        num_frames=win.num_samples,
        num_window_centers=len(centers),
        layer_norms=layer_l1_norms(model),
    )


def zero_padding_free_window(model: Model, A: float, rho: float) -> WindowSpec:
    """Largest even-pixel output window whose errors are unaffected by cutting inputs to ``A``."""
    B = even_pixel_width(A - receptive_width_m(model, rho), rho)
    if B <= 0:
        raise ValueError(f"input window {A} m leaves no output pixels beyond the receptive field")
    return WindowSpec(A, B)


def spatial_autocorrelation(dataset: FrameDataset, max_offset_px: int = 16, regions: int = 2, channel: int = -1):
    """Input autocorrelation ``E[V(p) V(p + d e_x)]`` per region of a ``regions x regions`` split.

    Under joint stationarity the curves agree across regions; no threshold is
    imposed. Returns an array of shape ``(regions, regions, max_offset_px + 1)``.
    """
    n = dataset.grid.width_pixels
    size = n // regions
    acc = np.zeros((regions, regions, max_offset_px + 1))
    for i in range(len(dataset)):
        x, _ = dataset.batch([i])
        v = x[0, channel].astype(np.float64)
        for a in range(regions):
            for b in range(regions):
                tile = v[a * size : (a + 1) * size, b * size : (b + 1) * size]
                for d in range(max_offset_px + 1):
                    acc[a, b, d] += (tile[: size - d] * tile[d:]).mean()
    return acc / max(len(dataset), 1)


__all__ = [
    "BoundReport",
    "bound_constant",
    "bound_rhs",
    "check_bound",
    "estimate_signal_power",
    "even_pixel_width",
    "receptive_width_m",
    "spatial_autocorrelation",
    "tiled_centers",
    "zero_padding_free_window",
]
