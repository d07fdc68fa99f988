"""Windowed squared-error loss, AdamW training loop and loss evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .dataset import FrameDataset
from .model import Model, receptive_field
from .raster import GridSpec, IntensityImage


@dataclass(frozen=True)
class WindowSpec:
    """Input window ``A`` and output window ``B``, both in meters, ``A >= B > 0``."""

    input_width_A: float
    output_width_B: float

    def __post_init__(self):
        if not self.output_width_B > 0:
            raise ValueError("output window must be positive")
        if self.input_width_A < self.output_width_B:
            raise ValueError("input window must be at least as wide as the output window")

    @classmethod
    def full(cls, grid: GridSpec) -> "WindowSpec":
        return cls(grid.extent, grid.extent)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 6.11e-6
    epochs: int = 84
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("batch_size, epochs and learning_rate must be positive")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    mean_loss: float
    std_error: float
    num_samples: int
    window: WindowSpec | None = None
    wall_time_s: float = 0.0
    per_sample: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_samples(cls, losses, window=None, wall_time_s=0.0) -> "LossReport":
        losses = np.asarray(losses, dtype=float)
        n = len(losses)
        se = float(losses.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(float(losses.mean()) if n else 0.0, se, n, window, wall_time_s, losses)


def windowed_loss(prediction: IntensityImage, target: IntensityImage, B: float, center=(0.0, 0.0)) -> float:
    """Riemann sum of the squared error over the centered square ``C_B``, divided by ``B^2``."""
    if prediction.grid != target.grid:
        raise ValueError("prediction and target must share a grid")
    grid = target.grid
    if B > grid.extent + 1e-9 * grid.extent:
        raise ValueError(f"output window {B} m exceeds the grid extent {grid.extent} m")
    mask = grid.inside(B, center)
    d = prediction.values[0].astype(np.float64) - target.values[0].astype(np.float64)
    return float(np.sum(d[mask] ** 2) * grid.resolution_rho**2 / B**2)


def _masks(grid: GridSpec, window: WindowSpec, center, dtype):
    a = torch.as_tensor(grid.inside(window.input_width_A, center), dtype=dtype)
    b = torch.as_tensor(grid.inside(window.output_width_B, center), dtype=dtype)
    return a, b


def _input_box(model: Model, grid: GridSpec, window: WindowSpec, mask_a):
    """Stride-aligned crop around the input window, or None to use the full grid.

    Only used when ``A >= B + LK``: every scored output then depends on
    inputs inside the window alone, so the crop gives the same values.
    """
    lk = receptive_field(model.spec) * grid.resolution_rho
    if window.input_width_A < window.output_width_B + lk - 1e-9:
        return None
    idx = [torch.nonzero(mask_a.any(dim=d)).flatten() for d in (1, 0)]
    if any(len(i) == 0 for i in idx):
        return None
    s = model.spec.total_stride
    box = []
    for i in idx:
        lo, hi = int(i[0]), int(i[-1]) + 1
        if lo % s or (hi - lo) % s:
            return None
        box.append(slice(lo, hi))
    if all(b.stop - b.start == grid.width_pixels for b in box):
        return None
    return tuple(box)


def batch_losses(model: Model, inputs, targets, grid: GridSpec, window: WindowSpec, center=(0.0, 0.0)) -> torch.Tensor:
    """Per-sample windowed losses (physical units) with inputs windowed to ``A``."""
    if window.output_width_B > grid.extent * (1 + 1e-9):
        raise ValueError(f"output window {window.output_width_B} m exceeds the grid extent {grid.extent} m")
    dtype = model.dtype
    x = torch.as_tensor(inputs, dtype=dtype)
    u = torch.as_tensor(targets, dtype=dtype)
    mask_a, mask_b = _masks(grid, window, center, dtype)
    box = _input_box(model, grid, window, mask_a)
    if box is not None:
        rows, cols = box
        x, u = x[..., rows, cols], u[..., rows, cols]
        mask_a, mask_b = mask_a[rows, cols], mask_b[rows, cols]
    pred = model.net(x * mask_a)
    sq = ((pred - u) ** 2 * mask_b).sum(dim=(1, 2, 3))
    return sq * (grid.resolution_rho**2 / window.output_width_B**2)


def train(model: Model, dataset: FrameDataset, window: WindowSpec, config: TrainConfig, on_epoch=None):
    """AdamW on the batched windowed loss; returns ``(model, per-epoch LossReports)``.

    Iteration order is a seeded permutation per epoch, so runs are
    reproducible. The objective is divided by ``output_scale**2`` so the
    optimizer sees network-scale errors; reported losses stay physical.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.AdamW(
        model.net.parameters(),
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    scale = 1.0 / model.spec.output_scale**2
    history = []
    model.net.train()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            x, u = dataset.batch(idx)
            per = batch_losses(model, x, u, dataset.grid, window)
            opt.zero_grad(set_to_none=True)
            (per.mean() * scale).backward()
            opt.step()
            losses.append(per.detach().double().numpy())
        report = LossReport.from_samples(np.concatenate(losses), window, time.perf_counter() - t0)
        history.append(report)
        if on_epoch is not None:
            on_epoch(epoch, report, model)
    model.net.eval()
    return model, history


def evaluate_loss(
    model: Model,
    dataset: FrameDataset,
    window: WindowSpec,
    batch_size: int = 16,
    centers=((0.0, 0.0),),
) -> LossReport:
    """Mean and standard error of the windowed loss over the dataset.

    Each frame contributes the average over ``centers`` of the loss with both
    windows moved to that center; the default is the centered window only.
    """
    t0 = time.perf_counter()
    out = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            x, u = dataset.batch(idx)
            per = sum(batch_losses(model, x, u, dataset.grid, window, c).double() for c in centers) / len(centers)
            out.append(per.numpy())
    losses = np.concatenate(out) if out else np.zeros(0)
    return LossReport.from_samples(losses, window, time.perf_counter() - t0)


__all__ = [
    "LossReport",
    "TrainConfig",
    "WindowSpec",
    "batch_losses",
    "evaluate_loss",
    "train",
    "windowed_loss",
]
