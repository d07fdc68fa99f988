"""Frame generation and the on-disk dataset format.

A dataset directory holds ``manifest.json`` and, per chunk of whole
simulations, two tensor files sharing one layout: a fixed 64-byte
little-endian header followed by row-major data.

Header layout (``<8sIIII4Q8x``)::

    magic    8 bytes  b"MTTDATA\\0"
    version  uint32
    dtype    uint32   1 = float32, 2 = float64
    ndim     uint32
    reserved uint32
    shape    4 x uint64 (unused trailing dims are 0)
    padding  8 bytes

``chunk_XXXXX.bin`` stores ``(frames, K + 1, N, N)`` float32: the stacked
observation history (oldest first) followed by the target image.
``chunk_XXXXX.truth.bin`` stores ``(M, 4)`` float64 rows ``(sim, step, x, y)``
for every target inside the rendering window.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import __version__
from .raster import (
    GridSpec,
    PulseConfig,
    measurement_intensity,
    target_intensity,
)
from .scenario import ScenarioConfig, in_window, run_simulation

MAGIC = b"MTTDATA\x00"
FORMAT_VERSION = 1
SCHEMA_VERSION = 1
HEADER = struct.Struct("<8sIIII4Q8x")
assert HEADER.size == 64
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}
CHUNK_BYTES = 64 * 2**20


class PartialDatasetError(RuntimeError):
    pass


@dataclass(eq=False)
class Frame:
    sim_id: int
    step: int
    inputs: np.ndarray  # (K, N, N) float32
    target: np.ndarray  # (1, N, N) float32
    truth: np.ndarray  # (m, 2) in-window target positions


def simulate_frames(
    config: ScenarioConfig,
    grid: GridSpec,
    pulse: PulseConfig,
    history_length: int,
    num_steps: int,
    sim_index: int,
) -> Iterator[Frame]:
    """Rasterized frames of one simulation, with zero-filled history at the start."""
    run = run_simulation(config, num_steps, sim_index)
    n = grid.width_pixels
    history = np.zeros((history_length, n, n), dtype=np.float32)
    for state, meas in run:
        v = measurement_intensity(meas, run.sensors, grid, config).values[0]
        history = np.concatenate([history[1:], v[None].astype(np.float32)])
        u = target_intensity(state, grid, pulse).values.astype(np.float32)
        truth = state.positions[in_window(state.positions, config.window_m)]
        yield Frame(sim_index, state.time_step, history.copy(), u, truth)


# --- tensor files ----------------------------------------------------------


def write_tensor(path, array: np.ndarray) -> str:
    """Write ``array`` with the 64-byte header; returns the file's sha256."""
    dtype = np.dtype(array.dtype).newbyteorder("<")
    code = DTYPE_CODES[dtype]
    if array.ndim > 4:
        raise ValueError("at most 4 dimensions")
    shape = list(array.shape) + [0] * (4 - array.ndim)
    header = HEADER.pack(MAGIC, FORMAT_VERSION, code, array.ndim, 0, *shape)
    body = np.ascontiguousarray(array, dtype=dtype).tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)
    return hashlib.sha256(header + body).hexdigest()


def read_header(path) -> tuple[np.dtype, tuple[int, ...]]:
    with open(path, "rb") as f:
        raw = f.read(HEADER.size)
    magic, version, code, ndim, _, *shape = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    return DTYPES[code], tuple(shape[:ndim])


def read_tensor(path, mmap: bool = True) -> np.ndarray:
    dtype, shape = read_header(path)
    if mmap and int(np.prod(shape)) > 0:
        return np.memmap(path, dtype=dtype, mode="r", offset=HEADER.size, shape=shape)
    with open(path, "rb") as f:
        f.seek(HEADER.size)
        return np.frombuffer(f.read(), dtype=dtype).reshape(shape).copy()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --- datasets ----------------------------------------------------------------


class FrameDataset:
    """Indexable frames sharing one grid. Subclasses fill ``_frames``-like storage."""

    grid: GridSpec
    history_length: int
    window_m: float

    def __len__(self) -> int:
        raise NotImplementedError

    def batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """``(inputs, targets)`` as ``(b, K, N, N)`` and ``(b, 1, N, N)`` float32."""
        raise NotImplementedError

    def truth(self, i: int) -> np.ndarray:
        raise NotImplementedError

    def key(self, i: int) -> tuple[int, int]:
        """``(sim_id, step)`` of frame ``i``."""
        raise NotImplementedError

    def frames(self) -> Iterator[Frame]:
        for i in range(len(self)):
            x, u = self.batch([i])
            s, n = self.key(i)
            yield Frame(s, n, x[0], u[0], self.truth(i))


class InMemoryDataset(FrameDataset):
    def __init__(self, frames: Iterable[Frame], grid: GridSpec, window_m: float | None = None):
        self._frames = list(frames)
        self.grid = grid
        self.window_m = grid.extent if window_m is None else window_m
        self.history_length = self._frames[0].inputs.shape[0] if self._frames else 0

    def __len__(self):
        return len(self._frames)

    def batch(self, indices):
        x = np.stack([self._frames[i].inputs for i in indices])
        u = np.stack([self._frames[i].target for i in indices])
        return x, u

    def truth(self, i):
        return self._frames[i].truth

    def key(self, i):
        return self._frames[i].sim_id, self._frames[i].step

    @classmethod
    def simulate(
        cls,
        config: ScenarioConfig,
        num_sims: int,
        num_steps: int,
        history_length: int = 4,
        pulse: PulseConfig = PulseConfig(),
        grid: GridSpec | None = None,
        first_sim: int = 0,
    ) -> "InMemoryDataset":
        grid = grid or GridSpec.centered(config.window_m)
        frames = [
            f
            for s in range(first_sim, first_sim + num_sims)
            for f in simulate_frames(config, grid, pulse, history_length, num_steps, s)
        ]
        return cls(frames, grid, config.window_m)


class DiskDataset(FrameDataset):
    """Memory-mapped view of a dataset directory written by :func:`generate_dataset`."""

    def __init__(self, root, verify: bool = False):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(mpath.read_text())
        self.grid = GridSpec.from_dict(self.manifest["grid"])
        self.history_length = self.manifest["history_length"]
        self.scenario = ScenarioConfig.from_dict(self.manifest["scenario"])
        self.window_m = self.scenario.window_m
        self.steps = self.manifest["steps"]
        if verify:
            verify_dataset(self.root)
        self._chunks = []
        self._truth = {}
        self._keys = []
        for c in self.manifest["chunks"]:
            arr = read_tensor(self.root / c["file"])
            truth = read_tensor(self.root / c["truth_file"], mmap=False)
            self._chunks.append(arr)
            for row in truth:
                self._truth.setdefault((int(row[0]), int(row[1])), []).append(row[2:])
            s0, s1 = c["sims"]
            self._keys.extend((s, n) for s in range(s0, s1) for n in range(1, self.steps + 1))
        self._offsets = np.cumsum([0] + [len(a) for a in self._chunks])

    def __len__(self):
        return int(self._offsets[-1])

    def _locate(self, i):
        c = int(np.searchsorted(self._offsets, i, side="right") - 1)
        return c, i - int(self._offsets[c])

    def batch(self, indices):
        k = self.history_length
        rows = [self._locate(int(i)) for i in indices]
        data = np.stack([np.asarray(self._chunks[c][j]) for c, j in rows])
        return data[:, :k].copy(), data[:, k:].copy()

    def truth(self, i):
        return np.array(self._truth.get(self._keys[i], []), dtype=float).reshape(-1, 2)

    def key(self, i):
        return self._keys[i]


# --- generation --------------------------------------------------------------


def _chunk_name(k: int) -> tuple[str, str]:
    return f"chunk_{k:05d}.bin", f"chunk_{k:05d}.truth.bin"


def _write_chunk(args) -> dict:
    root, k, sims, config_dict, grid_dict, pulse_sigma, pulse_radius, history_length, steps = args
    config = ScenarioConfig.from_dict(config_dict)
    grid = GridSpec.from_dict(grid_dict)
    pulse = PulseConfig(pulse_sigma, pulse_radius)
    data, truth = [], []
    for s in range(*sims):
        for f in simulate_frames(config, grid, pulse, history_length, steps, s):
            data.append(np.concatenate([f.inputs, f.target]))
            for x, y in f.truth:
                truth.append((s, f.step, x, y))
    name, tname = _chunk_name(k)
    arr = np.stack(data).astype("<f4")
    digest = write_tensor(Path(root) / name, arr)
    tdigest = write_tensor(Path(root) / tname, np.array(truth, dtype="<f8").reshape(-1, 4))
    return {
        "file": name,
        "truth_file": tname,
        "sims": list(sims),
        "frames": len(data),
        "shape": list(arr.shape),
        "dtype": "<f4",
        "header_bytes": HEADER.size,
        "sha256": digest,
        "truth_sha256": tdigest,
    }


def sims_per_chunk(grid: GridSpec, history_length: int, steps: int, target_bytes: int = CHUNK_BYTES) -> int:
    frame_bytes = (history_length + 1) * grid.width_pixels**2 * 4
    return max(1, target_bytes // (frame_bytes * steps))


def generate_dataset(
    root,
    config: ScenarioConfig,
    num_sims: int,
    num_steps: int,
    history_length: int = 4,
    pulse: PulseConfig = PulseConfig(),
    grid: GridSpec | None = None,
    workers: int = 1,
    resume: bool = False,
    chunk_bytes: int = CHUNK_BYTES,
    log=None,
) -> dict:
    """Simulate, rasterize and write a chunked dataset; returns the manifest.

    Chunks cover whole simulations, so outputs do not depend on ``workers``.
    An interrupted run leaves ``manifest.partial.json`` behind and is only
    continued with ``resume=True``; finished chunks whose hashes check out
    are kept.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    final = root / "manifest.json"
    partial = root / "manifest.partial.json"
    if final.exists():
        raise FileExistsError(f"{root} already holds a complete dataset")
    stray = list(root.glob("chunk_*.bin"))
    if (partial.exists() or stray) and not resume:
        raise PartialDatasetError(f"{root} holds a partial dataset; pass resume=True (--resume) to continue it")

    grid = grid or GridSpec.centered(config.window_m)
    per = sims_per_chunk(grid, history_length, num_steps, chunk_bytes)
    plan = [(a, min(a + per, num_sims)) for a in range(0, num_sims, per)]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "scenario": config.to_dict(),
        "scenario_hash": config.digest(),
        "grid": grid.to_dict(),
        "pulse": {"sigma": pulse.sigma, "truncation_radius": pulse.truncation_radius},
        "history_length": history_length,
        "num_sims": num_sims,
        "steps": num_steps,
        "seed": config.seed,
        "chunks": [],
    }
    done = {}
    if resume and partial.exists():
        old = json.loads(partial.read_text())
        same = {k: old.get(k) for k in ("scenario", "grid", "pulse", "history_length", "num_sims", "steps")}
        if same != {k: manifest[k] for k in same}:
            raise PartialDatasetError("partial dataset was generated with different settings")
        for c in old["chunks"]:
            p = root / c["file"]
            if p.exists() and file_sha256(p) == c["sha256"] and file_sha256(root / c["truth_file"]) == c["truth_sha256"]:
                done[tuple(c["sims"])] = c

    todo = [
        (str(root), k, sims, config.to_dict(), grid.to_dict(), pulse.sigma, pulse.truncation_radius, history_length, num_steps)
        for k, sims in enumerate(plan)
        if sims not in done
    ]

    def record(entry):
        done[tuple(entry["sims"])] = entry
        manifest["chunks"] = [done[s] for s in plan if s in done]
        partial.write_text(json.dumps(manifest, indent=1))
        if log:
            log(f"chunk {entry['file']}: sims {entry['sims'][0]}-{entry['sims'][1] - 1}, {entry['frames']} frames")

    partial.write_text(json.dumps(manifest, indent=1))
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as pool:
            for entry in pool.map(_write_chunk, todo):
                record(entry)
    else:
        for job in todo:
            record(_write_chunk(job))

    manifest["chunks"] = [done[s] for s in plan]
    final.write_text(json.dumps(manifest, indent=1))
    partial.unlink()
    return manifest


def verify_dataset(root) -> None:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    for c in manifest["chunks"]:
        for key, h in (("file", "sha256"), ("truth_file", "truth_sha256")):
            p = root / c[key]
            if not p.exists():
                raise FileNotFoundError(p)
            if file_sha256(p) != c[h]:
                raise ValueError(f"hash mismatch for {p}")


def dataset_digest(root) -> str:
    """Hash over all chunk hashes, used in run manifests."""
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    h = hashlib.sha256()
    for c in manifest["chunks"]:
        h.update(c["sha256"].encode())
        h.update(c["truth_sha256"].encode())
    return h.hexdigest()


def default_workers() -> int:
    return int(os.environ.get("CNNMTT_WORKERS", "1"))
