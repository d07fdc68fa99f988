"""Fully convolutional encoder-decoder mapping observation history to target intensity.

The network works on scaled images: inputs are multiplied by
``spec.input_scale`` and outputs by ``spec.output_scale``, so the public
forward maps physical intensities (1/m^2) to physical intensities.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .raster import IntensityImage

CONV = "conv"
TRANSPOSE = "transpose"
LEAKY_RELU = "leaky_relu"
IDENTITY = "identity"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: int
    stride: int
    in_channels: int
    out_channels: int
    nonlinearity: str = LEAKY_RELU

    def __post_init__(self):
        if self.kind not in (CONV, TRANSPOSE):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.nonlinearity not in (LEAKY_RELU, IDENTITY):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("kernel_size and stride must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    history_length: int = 4
    leaky_slope: float = 0.01
    input_scale: float = 1e3
    output_scale: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        if self.layers[0].in_channels != self.history_length:
            raise ValueError(
                f"first layer takes {self.layers[0].in_channels} channels but history_length is {self.history_length}"
            )
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_channels != b.in_channels:
                raise ValueError(f"layer {k} outputs {a.out_channels} channels but layer {k + 1} expects {b.in_channels}")
        if self.layers[-1].out_channels != 1:
            raise ValueError("the last layer must produce a single channel")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def total_stride(self) -> int:
        """Required divisor of the input width."""
        down = math.prod(l.stride for l in self.layers if l.kind == CONV)
        return down

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        return cls(**d)


def encoder_decoder_spec(
    history_length: int = 4,
    channels: int = 128,
    hidden_channels: int = 1024,
    kernel_size: int = 9,
    stride: int = 2,
    n_encoder: int = 3,
    n_hidden: int = 4,
    n_decoder: int = 3,
    **kwargs,
) -> ModelSpec:
    """Encoder (strided convs), 1x1 hidden convs, decoder (transpose convs)."""
    layers = []
    c_in = history_length
    for _ in range(n_encoder):
        layers.append(LayerSpec(CONV, kernel_size, stride, c_in, channels))
        c_in = channels
    for _ in range(n_hidden):
        layers.append(LayerSpec(CONV, 1, 1, c_in, hidden_channels))
        c_in = hidden_channels
    for k in range(n_decoder):
        last = k == n_decoder - 1
        layers.append(
            LayerSpec(TRANSPOSE, kernel_size, stride, c_in, 1 if last else channels, IDENTITY if last else LEAKY_RELU)
        )
        c_in = channels
    return ModelSpec(tuple(layers), history_length, **kwargs)


def default_spec(history_length: int = 4) -> ModelSpec:
    """Full-width architecture: 3 x (k9, s2, 128) / 4 x (k1, 1024) / 3 x transpose (k9, s2)."""
    return encoder_decoder_spec(history_length)


def desk_spec(history_length: int = 4) -> ModelSpec:
    """Same topology with narrower layers, trainable on a single CPU core."""
    return encoder_decoder_spec(history_length, channels=16, hidden_channels=64)


PRESETS = {"default": default_spec, "desk": desk_spec}


class _Layer(nn.Module):
    def __init__(self, spec: LayerSpec, slope: float):
        super().__init__()
        self.spec = spec
        self.slope = slope
        k, s = spec.kernel_size, spec.stride
        if spec.kind == CONV:
            self.op = nn.Conv2d(spec.in_channels, spec.out_channels, k, s, padding=0)
        else:
            self.op = nn.ConvTranspose2d(spec.in_channels, spec.out_channels, k, s, padding=(k - 1) // 2)

    def forward(self, x):
        k, s = self.spec.kernel_size, self.spec.stride
        if self.spec.kind == CONV:
            lo = (k - 1) // 2
            x = self.op(F.pad(x, (lo, k - 1 - lo, lo, k - 1 - lo)))
        else:
            n = x.shape[-1]
            p = (k - 1) // 2
            natural = (n - 1) * s - 2 * p + k
            want = n * s
            if 0 <= want - natural < s:
                x = self.op(x, output_size=[want, want])
            else:
                x = self.op(x)
                cut = x.shape[-1] - want
                a = cut // 2
                x = x[..., a : a + want, a : a + want]
        if self.spec.nonlinearity == LEAKY_RELU:
            x = F.leaky_relu(x, self.slope)
        return x


class Network(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(_Layer(l, spec.leaky_slope) for l in spec.layers)

    def forward(self, x):
        n = x.shape[-1]
        m = self.spec.total_stride
        if x.shape[-2] != n or n % m:
            raise ValueError(f"input must be square with width a multiple of {m}, got {tuple(x.shape[-2:])}")
        x = x * self.spec.input_scale
        for layer in self.layers:
            x = layer(x)
        return x * self.spec.output_scale


def _fan_in(spec: LayerSpec) -> float:
    if spec.kind == CONV:
        return spec.in_channels * spec.kernel_size**2
    return spec.in_channels * (spec.kernel_size / spec.stride) ** 2


@dataclass(eq=False)
class Model:
    spec: ModelSpec
    net: Network
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def to(self, dtype) -> "Model":
        self.net.to(dtype)
        return self

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def build_model(spec: ModelSpec, init_seed: int = 0) -> Model:
    """He-normal weights (fan-in scaled), zero biases; deterministic in ``init_seed``."""
    net = Network(spec)
    gen = torch.Generator().manual_seed(int(init_seed))
    slope = spec.leaky_slope
    with torch.no_grad():
        for layer in net.layers:
            gain = math.sqrt(2.0 / (1 + slope**2)) if layer.spec.nonlinearity == LEAKY_RELU else 1.0
            layer.op.weight.normal_(0.0, gain / math.sqrt(_fan_in(layer.spec)), generator=gen)
            layer.op.bias.zero_()
    return Model(spec, net, int(init_seed))


def _as_batch(model: Model, image) -> torch.Tensor:
    vals = image.values if isinstance(image, IntensityImage) else np.asarray(image)
    if vals.ndim == 3:
        vals = vals[None]
    if vals.shape[1] != model.spec.history_length:
        raise ValueError(f"model expects {model.spec.history_length} input channels, got {vals.shape[1]}")
    return torch.as_tensor(np.ascontiguousarray(vals), dtype=model.dtype)


def forward(model: Model, image: IntensityImage) -> IntensityImage:
    """Single-channel output image on the input's grid."""
    with torch.no_grad():
        out = model.net(_as_batch(model, image))
    return IntensityImage(image.grid, out[0].numpy().astype(np.float64))


def backward(model: Model, image: IntensityImage, grad_output) -> dict[str, np.ndarray]:
    """Parameter gradients of ``<forward(image), grad_output>``."""
    x = _as_batch(model, image)
    g = torch.as_tensor(np.asarray(grad_output, dtype=np.float64), dtype=model.dtype).reshape(1, 1, *x.shape[-2:])
    model.net.zero_grad(set_to_none=False)
    out = model.net(x)
    out.backward(g)
    return {name: p.grad.detach().numpy().copy() for name, p in model.net.named_parameters()}


def receptive_field(spec: ModelSpec) -> int:
    """Width in input pixels of the region one output pixel depends on.

    Conv layers add ``(k - 1)`` steps of the current jump. A transpose conv
    output depends on at most ``ceil(k / s)`` consecutive input samples,
    which adds ``ceil(k / s) - 1`` steps of the incoming jump.
    """
    rf = 1
    jump = 1.0
    for l in spec.layers:
        if l.kind == CONV:
            rf += (l.kernel_size - 1) * jump
            jump *= l.stride
        else:
            rf += (math.ceil(l.kernel_size / l.stride) - 1) * jump
            jump /= l.stride
    return int(round(rf))


def layer_l1_norms(model: Model) -> list[float]:
    """Per layer: max over output channels of summed |weights| over inputs and taps."""
    norms = []
    for layer in model.net.layers:
        w = layer.op.weight.detach().abs().double()
        if layer.spec.kind == CONV:
            per_out = w.sum(dim=(1, 2, 3))
        else:
            per_out = w.sum(dim=(0, 2, 3))
        norms.append(float(per_out.max()))
    return norms


def filter_l1_product(model: Model) -> float:
    """Product of per-layer L1 gains, including the fixed input/output scaling."""
    return math.prod(layer_l1_norms(model)) * model.spec.input_scale * model.spec.output_scale


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"CNNMTTCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write ``model`` as magic, version, JSON header and raw little-endian float32 tensors."""
    tensors = []
    offset = 0
    blobs = []
    for name, t in model.net.state_dict().items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "tensors": tensors,
        "meta": {**model.meta, **(extra or {})},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    data = raw[16 + hlen :]
    model = build_model(ModelSpec.from_dict(header["spec"]), header["seed"])
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(data, dtype=t["dtype"], count=int(np.prod(t["shape"])), offset=t["offset"])
        state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).astype(np.float32))
    model.net.load_state_dict(state)
    model.meta = header.get("meta", {})
    return model



__all__ = [
    "CONV",
    "IDENTITY",
    "LEAKY_RELU",
    "LayerSpec",
    "Model",
    "ModelSpec",
    "Network",
    "PRESETS",
    "TRANSPOSE",
    "backward",
    "build_model",
    "default_spec",
    "desk_spec",
    "encoder_decoder_spec",
    "filter_l1_product",
    "forward",
    "layer_l1_norms",
    "load_checkpoint",
    "receptive_field",
    "save_checkpoint",
]
