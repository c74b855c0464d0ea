"""The four imputation architectures and their forward/backward execution.

Every model is a flat list of ops run in order; the temporal kinds fold the
time axis into the batch for the convolutional parts and unfold it around the
LSTM. All kinds take the 9-channel input built by :func:`prepare_input` and
emit 8 reflectance channels at full resolution.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import BadDims, DimMismatch, NonFiniteInput, ShapeMismatch, UnsupportedKind
from .raster import N_BANDS, CloudMask, MultibandImage, atomic_write_bytes

KINDS = ("cnn", "autoencoder_cnn", "cnn_lstm", "autoencoder_lstm")
TEMPORAL_KINDS = ("cnn_lstm", "autoencoder_lstm")
IN_CHANNELS = N_BANDS + 1
TIMESTEPS = 5

# filters, lstm units, dropout
TABLE = {
    "cnn": ((32, 64, 128), 0, 0.2),
    "autoencoder_cnn": ((32, 64, 128), 0, 0.2),
    "cnn_lstm": ((32, 64), 64, 0.2),
    "autoencoder_lstm": ((32, 64), 64, 0.3),
}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    height: int
    width: int
    in_channels: int = IN_CHANNELS
    filters: tuple[int, ...] = ()
    lstm_units: int = 0
    dropout: float = 0.0
    timesteps: int = 1

    def __post_init__(self):
        if self.kind not in TABLE:
            raise UnsupportedKind(f"model kind {self.kind!r} is not supported (choose from {', '.join(KINDS)})")
        filters, units, rate = TABLE[self.kind]
        if tuple(self.filters) != filters or self.lstm_units != units or self.dropout != rate:
            raise ValueError(f"{self.kind} must use filters {filters}, lstm_units {units}, dropout {rate}")
        want_t = TIMESTEPS if self.temporal else 1
        if self.timesteps != want_t:
            raise ValueError(f"{self.kind} runs on {want_t} timestep(s), got {self.timesteps}")
        if self.height < 4 or self.width < 4 or self.height % 4 or self.width % 4:
            raise BadDims(f"input {self.height}x{self.width} must be >= 4 and divisible by 4")

    @classmethod
    def for_kind(cls, kind: str, height: int, width: int, in_channels: int = IN_CHANNELS) -> ModelSpec:
        if kind not in TABLE:
            raise UnsupportedKind(f"model kind {kind!r} is not supported (choose from {', '.join(KINDS)})")
        filters, units, rate = TABLE[kind]
        t = TIMESTEPS if kind in TEMPORAL_KINDS else 1
        return cls(kind, height, width, in_channels, filters, units, rate, t)

    @property
    def temporal(self) -> bool:
        return self.kind in TEMPORAL_KINDS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        d = dict(d)
        d["filters"] = tuple(d["filters"])
        return cls(**d)


ModelParams = dict  # layer name -> tensor.LayerParams, in layer order


# ---------------------------------------------------------------------------
# ops


class Conv:
    def __init__(self, name: str, c_in: int, c_out: int, act: str):
        self.name, self.c_in, self.c_out, self.act = name, c_in, c_out, act

    def init(self, rng, dtype):
        return {self.name: T.init_conv(rng, self.c_in, self.c_out, dtype)}

    def forward(self, x, params, ctx):
        p = params[self.name]
        z = T.conv2d(x, p, self.c_out)
        y = T.activation(self.act, z)
        return y, (x, z)

    def backward(self, g, cache, params):
        x, z = cache
        gz = T.activation_backward(self.act, g, z)
        gx, grads = T.conv2d_backward(gz, x, params[self.name])
        return gx, {self.name: grads}


class Pool:
    def init(self, rng, dtype):
        return {}

    def forward(self, x, params, ctx):
        y, arg = T.maxpool2(x)
        return y, arg

    def backward(self, g, cache, params):
        return T.maxpool2_backward(g, cache), {}


class Up:
    def init(self, rng, dtype):
        return {}

    def forward(self, x, params, ctx):
        return T.upsample2(x), None

    def backward(self, g, cache, params):
        return T.upsample2_backward(g), {}


class Drop:
    def __init__(self, rate: float):
        self.rate = rate

    def init(self, rng, dtype):
        return {}

    def forward(self, x, params, ctx):
        if not ctx["training"] or self.rate == 0:
            return x, None
        mask = T.dropout_mask(x.shape, self.rate, ctx["rng"], x.dtype)
        return x * mask, mask

    def backward(self, g, cache, params):
        return T.dropout_backward(g, cache), {}


class ToSeq:
    """(N*T, h, w, c) -> (N, T, h*w*c)"""

    def __init__(self, steps: int):
        self.steps = steps

    def init(self, rng, dtype):
        return {}

    def forward(self, x, params, ctx):
        return x.reshape(-1, self.steps, int(np.prod(x.shape[1:]))), x.shape

    def backward(self, g, cache, params):
        return g.reshape(cache), {}


class FromSeq:
    """(N, T, h*w*c) -> (N*T, h, w, c)"""

    def __init__(self, h: int, w: int, c: int):
        self.shape = (h, w, c)

    def init(self, rng, dtype):
        return {}

    def forward(self, x, params, ctx):
        return x.reshape(-1, *self.shape), x.shape

    def backward(self, g, cache, params):
        return g.reshape(cache), {}


class Lstm:
    def __init__(self, name: str, d_in: int, units: int):
        self.name, self.d_in, self.units = name, d_in, units

    def init(self, rng, dtype):
        return {self.name: T.init_lstm(rng, self.d_in, self.units, dtype=dtype)}

    def forward(self, x, params, ctx):
        return T.lstm_sequence(x, params[self.name])

    def backward(self, g, cache, params):
        gx, grads = T.lstm_sequence_backward(g, cache, params[self.name])
        return gx, {self.name: grads}


class TimeDense:
    """Dense layer applied independently at every timestep of (N, T, D)."""

    def __init__(self, name: str, d_in: int, d_out: int, act: str):
        self.name, self.d_in, self.d_out, self.act = name, d_in, d_out, act

    def init(self, rng, dtype):
        return {self.name: T.init_dense(rng, self.d_in, self.d_out, dtype)}

    def forward(self, x, params, ctx):
        n, t, d = x.shape
        flat = x.reshape(n * t, d)
        z = T.dense(flat, params[self.name])
        return T.activation(self.act, z).reshape(n, t, -1), (flat, z)

    def backward(self, g, cache, params):
        flat, z = cache
        n, t, _ = g.shape
        gz = T.activation_backward(self.act, g.reshape(n * t, -1), z)
        gx, grads = T.dense_backward(gz, flat, params[self.name])
        return gx.reshape(n, t, -1), {self.name: grads}


def layers(spec: ModelSpec) -> list:
    c = spec.in_channels
    h4, w4 = spec.height // 4, spec.width // 4
    if spec.kind == "cnn":
        f1, f2, f3 = spec.filters
        return [
            Conv("conv1", c, f1, "relu"),
            Conv("conv2", f1, f2, "relu"),
            Drop(spec.dropout),
            Conv("conv3", f2, f3, "relu"),
            Conv("out", f3, N_BANDS, "linear"),
        ]
    if spec.kind == "autoencoder_cnn":
        f1, f2, f3 = spec.filters
        return [
            Conv("enc1", c, f1, "relu"),
            Pool(),
            Conv("enc2", f1, f2, "relu"),
            Pool(),
            Conv("bottleneck", f2, f3, "relu"),
            Drop(spec.dropout),
            Up(),
            Conv("dec1", f3, f2, "relu"),
            Up(),
            Conv("dec2", f2, f1, "relu"),
            Conv("out", f1, N_BANDS, "linear"),
        ]
    f1, f2 = spec.filters
    u = spec.lstm_units
    trunk = [Conv("enc1", c, f1, "relu"), Pool(), Conv("enc2", f1, f2, "relu"), Pool(), ToSeq(spec.timesteps)]
    feat = h4 * w4 * f2
    if spec.kind == "cnn_lstm":
        return trunk + [
            Drop(spec.dropout),
            Lstm("lstm", feat, u),
            TimeDense("proj", u, h4 * w4 * f1, "relu"),
            FromSeq(h4, w4, f1),
            Up(),
            Conv("dec1", f1, f1, "relu"),
            Up(),
            Conv("out", f1, N_BANDS, "linear"),
        ]
    return trunk + [
        Lstm("lstm", feat, u),
        Drop(spec.dropout),
        TimeDense("proj", u, h4 * w4 * f2, "relu"),
        FromSeq(h4, w4, f2),
        Up(),
        Conv("dec1", f2, f2, "relu"),
        Up(),
        Conv("dec2", f2, f1, "relu"),
        Conv("out", f1, N_BANDS, "linear"),
    ]


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for op in layers(spec):
        params.update(op.init(rng, dtype))
    return params


def param_count(params: ModelParams) -> int:
    return sum(p.size for p in params.values())


def flatten_params(params: ModelParams) -> dict[str, np.ndarray]:
    return {f"{name}/{k}": a for name, p in params.items() for k, a in p.arrays.items()}


def unflatten_params(flat: dict[str, np.ndarray], template: ModelParams) -> ModelParams:
    out = {}
    for name, p in template.items():
        out[name] = T.LayerParams(p.kind, {k: flat[f"{name}/{k}"] for k in p.arrays})
    return out


def copy_params(params: ModelParams) -> ModelParams:
    return {n: T.LayerParams(p.kind, {k: a.copy() for k, a in p.arrays.items()}) for n, p in params.items()}


# ---------------------------------------------------------------------------
# execution


def _check_batch(spec: ModelSpec, batch: np.ndarray) -> None:
    want = (spec.height, spec.width, spec.in_channels)
    if spec.temporal:
        if batch.ndim != 5 or batch.shape[1] != spec.timesteps or batch.shape[2:] != want:
            raise ShapeMismatch(f"{spec.kind} expects (N, {spec.timesteps}, {want[0]}, {want[1]}, {want[2]}), got {batch.shape}")
    elif batch.ndim != 4 or batch.shape[1:] != want:
        raise ShapeMismatch(f"{spec.kind} expects (N, {want[0]}, {want[1]}, {want[2]}), got {batch.shape}")
    if not np.all(np.isfinite(batch)):
        raise NonFiniteInput("model input contains NaN or inf; build it with prepare_input")


def forward(spec: ModelSpec, params: ModelParams, batch: np.ndarray, training: bool = False, seed=None, tape: list | None = None):
    """Predict 8-band images. Spatial kinds: (N,H,W,8); temporal: (N,T,H,W,8).

    Pass a list as ``tape`` to record what :func:`backward` needs.
    """
    _check_batch(spec, batch)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ctx = {"training": training, "rng": rng}
    x = batch.reshape(-1, *batch.shape[-3:]) if spec.temporal else batch
    for op in layers(spec):
        x, cache = op.forward(x, params, ctx)
        if tape is not None:
            tape.append((op, cache))
    if spec.temporal:
        x = x.reshape(batch.shape[0], spec.timesteps, *x.shape[1:])
    return x


def backward(spec: ModelSpec, params: ModelParams, tape: list, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every parameter, keyed like :func:`flatten_params`."""
    g = grad_out.reshape(-1, *grad_out.shape[-3:]) if spec.temporal else grad_out
    grads: dict[str, dict] = {}
    for op, cache in reversed(tape):
        g, layer_grads = op.backward(g, cache, params)
        grads.update(layer_grads)
    return {f"{name}/{k}": grads[name][k] for name, p in params.items() for k in p.arrays}


def prepare_input(x: MultibandImage, mask: CloudMask | None = None) -> np.ndarray:
    """(H, W, 9) array: bands with gaps zeroed, plus a 0/1 gap indicator channel.

    A cell is a gap when the artificial mask covers it or any band is NaN.
    """
    data = x.data
    if mask is not None and mask.cells.shape != data.shape[:2]:
        raise DimMismatch(f"image {data.shape[:2]} vs mask {mask.cells.shape}")
    gap = np.any(np.isnan(data), axis=2)
    if mask is not None:
        gap |= mask.cells == 1
    bands = np.where(gap[:, :, None] | np.isnan(data), 0, data).astype(np.float32)
    return np.concatenate([bands, gap[:, :, None].astype(np.float32)], axis=2)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path: str | os.PathLike, spec: ModelSpec, params: ModelParams) -> None:
    header = {"spec": spec.to_dict(), "kinds": {n: p.kind for n, p in params.items()}}
    atomic_write_bytes(path, T.encode_params(flatten_params(params), header))


def load_model(path: str | os.PathLike) -> tuple[ModelSpec, ModelParams]:
    with open(path, "rb") as f:
        header, flat = T.decode_params(f.read(), str(path))
    spec = ModelSpec.from_dict(header["spec"])
    template = build_model(spec, 0)
    params = unflatten_params(flat, template)
    for name, p in params.items():
        for k, a in p.arrays.items():
            if a.shape != template[name].arrays[k].shape:
                raise ShapeMismatch(f"checkpoint blob {name}/{k} has shape {a.shape}")
    return spec, params


def stack_inputs(images: Sequence[MultibandImage], masks: Sequence[CloudMask | None]) -> np.ndarray:
    return np.stack([prepare_input(img, m) for img, m in zip(images, masks)])
