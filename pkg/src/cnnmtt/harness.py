"""Experiment orchestration: training runs, evaluation sweeps and their artifacts."""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import __version__
from .dataset import DiskDataset, InMemoryDataset, dataset_digest
from .evaluation import OspaConfig, TrackingSummary, evaluate_tracking, summarize
from .model import PRESETS, Model, ModelSpec, build_model, save_checkpoint
from .raster import PIXELS_PER_KM, GridSpec, PulseConfig
from .scenario import KM, ScenarioConfig
from .trainer import LossReport, TrainConfig, WindowSpec, train
from .transfer import BoundReport, check_bound, zero_padding_free_window

log = logging.getLogger("cnnmtt")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def load_scenario(path) -> ScenarioConfig:
    return ScenarioConfig.from_dict(load_json(path))


@dataclass
class TrainSettings:
    """Contents of a training config file."""

    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSpec | None = None
    preset: str = "desk"
    init_seed: int = 0
    input_width_A: float | None = None
    output_width_B: float | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        d = dict(d)
        unknown = set(d) - {"train", "model", "preset", "init_seed", "window"}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        window = d.get("window") or {}
        return cls(
            train=TrainConfig(**d.get("train", {})),
            model=ModelSpec.from_dict(d["model"]) if d.get("model") else None,
            preset=d.get("preset", "desk"),
            init_seed=d.get("init_seed", 0),
            input_width_A=window.get("input_width_A"),
            output_width_B=window.get("output_width_B"),
        )

    def model_spec(self, history_length: int) -> ModelSpec:
        if self.model is not None:
            return self.model
        return PRESETS[self.preset](history_length)

    def window(self, grid: GridSpec) -> WindowSpec:
        A = self.input_width_A if self.input_width_A is not None else grid.extent
        B = self.output_width_B if self.output_width_B is not None else A
        return WindowSpec(A, B)


@dataclass
class ExperimentPlan:
    w_train: float = 1.0
    eval_widths: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0)
    sims: int = 100
    steps: int = 100
    seed: int = 1000
    bound_sims: int | None = None
    bound_steps: int | None = None
    scenario: dict = field(default_factory=dict)
    ospa: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eval_widths = tuple(sorted(float(w) for w in self.eval_widths))
        if any(w < self.w_train for w in self.eval_widths):
            raise ValueError("evaluation widths must be at least the training width")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def grid_for_width(width_km: float, model: Model | None = None) -> GridSpec:
    n = width_km * PIXELS_PER_KM
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"width {width_km} km is not a whole number of pixels at {PIXELS_PER_KM} px/km")
    n = int(round(n))
    if model is not None and n % model.spec.total_stride:
        tile = model.spec.total_stride / PIXELS_PER_KM
        raise ValueError(f"incompatible width {width_km} km: must be a multiple of {tile} km ({model.spec.total_stride} px)")
    return GridSpec.centered(width_km * KM)


def simulation_datasets(
    config: ScenarioConfig, sims: int, steps: int, history_length: int, pulse: PulseConfig = PulseConfig()
) -> Iterator[InMemoryDataset]:
    """One in-memory dataset per simulation, generated lazily."""
    grid = grid_for_width(config.window_width_w)
    for s in range(sims):
        yield InMemoryDataset.simulate(config, 1, steps, history_length, pulse, grid, first_sim=s)


def run_manifest(**entries) -> dict:
    return {
        "code_version": __version__,
        "python": platform.python_version(),
        "created_unix": time.time(),
        **entries,
    }


# --- training ----------------------------------------------------------------


METRIC_COLUMNS = ("epoch", "mean_loss", "stderr", "wall_time_s")


def run_training(dataset_dir, settings: TrainSettings, out_dir) -> tuple[Model, list[LossReport]]:
    """Train on a dataset directory; writes checkpoint, metrics CSV and run manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = DiskDataset(dataset_dir, verify=True)
    spec = settings.model_spec(ds.history_length)
    if spec.history_length != ds.history_length:
        raise ValueError(f"model expects history {spec.history_length}, dataset has {ds.history_length}")
    if ds.grid.width_pixels % spec.total_stride:
        raise ValueError(f"dataset grid of {ds.grid.width_pixels} px is not a multiple of the model stride {spec.total_stride}")
    window = settings.window(ds.grid)
    model = build_model(spec, settings.init_seed)
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as f:
        csv.writer(f).writerow(METRIC_COLUMNS)

    def on_epoch(epoch, report, m):
        with open(metrics_path, "a", newline="") as f:
            csv.writer(f).writerow([epoch + 1, repr(report.mean_loss), repr(report.std_error), f"{report.wall_time_s:.3f}"])
        log.info("epoch %d: loss %.4g +- %.2g (%.0f s)", epoch + 1, report.mean_loss, report.std_error, report.wall_time_s)

    model, history = train(model, ds, window, settings.train, on_epoch=on_epoch)
    meta = {
        "dataset": str(Path(dataset_dir).resolve()),
        "dataset_digest": dataset_digest(dataset_dir),
        "train": settings.train.to_dict(),
        "window": asdict(window),
        "num_frames": len(ds),
        "num_sims": ds.manifest["num_sims"],
        "steps": ds.manifest["steps"],
        "grid": ds.grid.to_dict(),
        "scenario": ds.manifest["scenario"],
    }
    model.meta = meta
    save_checkpoint(model, out / "checkpoint.mttc")
    manifest = run_manifest(command="train", model=spec.to_dict(), init_seed=settings.init_seed, **meta)
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1))
    return model, history


# --- evaluation --------------------------------------------------------------

FRAME_COLUMNS = ("sim_id", "step", "n_truth", "n_estimate", "ospa_m")
SUMMARY_COLUMNS = ("w_km", "mean_ospa_m", "ci95_m", "num_sims", "num_frames")


def evaluate_width(
    model: Model,
    config: ScenarioConfig,
    sims: int,
    steps: int,
    ospa_config: OspaConfig = OspaConfig(),
    panels: list | None = None,
    panel_steps: tuple[int, ...] = (),
) -> TrackingSummary:
    """OSPA over ``sims`` fresh simulations at ``config.window_width_w``."""
    grid_for_width(config.window_width_w, model)
    records = []
    for ds in simulation_datasets(config, sims, steps, model.spec.history_length):
        def keep(rec, out, x):
            if panels is not None and rec["sim_id"] == 0 and rec["step"] in panel_steps:
                panels.append((rec, x[-1].copy(), out[0].copy()))

        records.extend(evaluate_tracking(model, ds, config.window_m, ospa_config, on_frame=keep).records)
    return summarize(records, config.window_m)


def write_frame_csv(path, summary: TrackingSummary) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(FRAME_COLUMNS)
        for r in summary.records:
            w.writerow([r["sim_id"], r["step"], r["n_truth"], r["n_estimate"], repr(r["ospa_m"])])


def write_summary_csv(path, rows: list[TrackingSummary]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        for s in rows:
            w.writerow([s.window_width_m / KM, repr(s.mean_ospa), repr(s.ci95), s.num_sims, s.num_frames])


PANEL_PERCENTILE = 99.5


def render_panels(path, panels, width_km: float) -> dict:
    """Grayscale input/output panels, normalized by a shared percentile per row."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not panels:
        return {}
    inputs = np.stack([p[1] for p in panels])
    outputs = np.stack([np.maximum(p[2], 0) for p in panels])
    vin = float(np.percentile(inputs, PANEL_PERCENTILE)) or 1.0
    vout = float(np.percentile(outputs, PANEL_PERCENTILE)) or 1.0
    fig, axes = plt.subplots(2, len(panels), figsize=(3 * len(panels), 6), squeeze=False)
    half = width_km / 2
    for k, (rec, x, y) in enumerate(panels):
        for row, (img, vmax) in enumerate(((x, vin), (np.maximum(y, 0), vout))):
            ax = axes[row, k]
            ax.imshow(img.T, origin="lower", cmap="gray", vmin=0, vmax=vmax, extent=(-half, half, -half, half))
            ax.set_xticks([])
            ax.set_yticks([])
        axes[0, k].set_title(f"step {rec['step']}")
    axes[0, 0].set_ylabel("sensor image")
    axes[1, 0].set_ylabel("CNN output")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return {"percentile": PANEL_PERCENTILE, "input_vmax": vin, "output_vmax": vout, "colormap": "gray"}


def default_bound_windows(model: Model, w_train_km: float) -> dict[str, WindowSpec]:
    """Padding-free window (bound constant zero) and a deliberately narrow one."""
    A = w_train_km * KM
    grid = grid_for_width(w_train_km)
    return {
        "padding_free": zero_padding_free_window(model, A, grid.resolution_rho),
        "narrow": WindowSpec(A, A),
    }


def run_bound(
    model: Model, config: ScenarioConfig, window: WindowSpec, sims: int, steps: int
) -> BoundReport:
    datasets = simulation_datasets(config, sims, steps, model.spec.history_length)
    return check_bound(model, window, config.window_m, datasets)


SWEEP_COLUMNS = ("w_km", "mean_ospa_m", "ci95_m", "loss_window", "loss_large", "C", "H", "holds")


def run_sweep(model: Model, plan: ExperimentPlan, out_dir, base: ScenarioConfig | None = None) -> list[dict]:
    """OSPA and bound check per evaluation width; writes CSV, plot and bound reports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = base or ScenarioConfig()
    base = ScenarioConfig.from_dict({**base.to_dict(), **plan.scenario, "seed": plan.seed})
    ospa_config = OspaConfig(**plan.ospa)
    windows = default_bound_windows(model, plan.w_train)
    rows = []
    for w in plan.eval_widths:
        cfg = base.replace(window_width_w=w)
        summary = evaluate_width(model, cfg, plan.sims, plan.steps, ospa_config)
        write_frame_csv(out / f"frames_w{w:g}.csv", summary)
        write_summary_csv(out / f"summary_w{w:g}.csv", [summary])
        row = {"w_km": w, "mean_ospa_m": summary.mean_ospa, "ci95_m": summary.ci95}
        bsims = plan.bound_sims or plan.sims
        bsteps = plan.bound_steps or plan.steps
        reports = {}
        if w * KM > windows["padding_free"].output_width_B and w > plan.w_train:
            for name, win in windows.items():
                rep = run_bound(model, cfg, win, bsims, bsteps)
                rep.save(out / f"bound_w{w:g}_{name}.json")
                reports[name] = rep
        main = reports.get("padding_free")
        row.update(
            loss_window=main.loss_window if main else float("nan"),
            loss_large=main.loss_large if main else float("nan"),
            C=main.C if main else float("nan"),
            H=main.H if main else float("nan"),
            holds=all(r.holds for r in reports.values()) if reports else "",
        )
        rows.append(row)
        log.info("w=%g km: OSPA %.1f +- %.1f m", w, summary.mean_ospa, summary.ci95)
    rows.sort(key=lambda r: r["w_km"])
    with open(out / "sweep.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(SWEEP_COLUMNS)
        for r in rows:
            wr.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in SWEEP_COLUMNS])
    plot_sweep(out / "sweep.png", rows)
    manifest = run_manifest(command="sweep", plan=plan.to_dict(), scenario=base.to_dict(), model_meta=model.meta)
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, default=str))
    return rows


def plot_sweep(path, rows: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    w = [r["w_km"] for r in rows]
    ax.errorbar(w, [r["mean_ospa_m"] for r in rows], yerr=[r["ci95_m"] for r in rows], marker="o", capsize=3, label="CNN")
    ax.set_xlabel("window width w (km)")
    ax.set_ylabel("OSPA (m)")
    ax.set_xticks(w)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


__all__ = [
    "ExperimentPlan",
    "TrainSettings",
    "evaluate_width",
    "grid_for_width",
    "load_scenario",
    "run_bound",
    "run_sweep",
    "run_training",
    "simulation_datasets",
]
