"""Dense NHWC layer kernels with hand-written backward passes.

Each layer is a forward function plus a ``*_backward`` that takes the upstream
gradient and whatever the forward saved. Arrays are plain numpy; float32 is the
working precision, float64 is used by the gradient checks.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import BadMagic, BadRate, EmptyMask, OddDims, ShapeMismatch, TruncatedFile

ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")


@dataclass
class LayerParams:
    kind: str  # conv2d | dense | lstm
    arrays: dict[str, np.ndarray]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())


# ---------------------------------------------------------------------------
# initialisation


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, dtype=np.float32) -> LayerParams:
    w = glorot_uniform(rng, (3, 3, c_in, c_out), 9 * c_in, 9 * c_out, dtype)
    return LayerParams("conv2d", {"w": w, "b": np.zeros(c_out, dtype)})


def init_dense(rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float32) -> LayerParams:
    w = glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype)
    return LayerParams("dense", {"w": w, "b": np.zeros(d_out, dtype)})


def init_lstm(rng: np.random.Generator, d_in: int, units: int, forget_bias: float = 1.0, dtype=np.float32) -> LayerParams:
    wx = rng.uniform(-1, 1, size=(d_in, 4 * units)) * np.sqrt(1.0 / d_in)
    wh = rng.uniform(-1, 1, size=(units, 4 * units)) * np.sqrt(1.0 / units)
    b = np.zeros(4 * units)
    b[units:2 * units] = forget_bias
    return LayerParams("lstm", {"wx": wx.astype(dtype), "wh": wh.astype(dtype), "b": b.astype(dtype)})


# ---------------------------------------------------------------------------
# conv2d: 3x3, stride 1, zero "same" padding


def _padded_rows(x: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Zero-pads H and W by one and flattens to rows.

    In the flattened padded grid every kernel tap of every interior output
    is a fixed row offset away, so tap ``(di, dj)`` reads the contiguous
    slice ``rows[di * wp + dj : di * wp + dj + span]`` and no im2col copy
    is needed. Returns ``(rows, wp, span)``.
    """
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    wp = xp.shape[2]
    rows = xp.reshape(-1, x.shape[3])
    return rows, wp, rows.shape[0] - 2 * wp - 2


def _check_conv(x: np.ndarray, params: LayerParams) -> None:
    w = params["w"]
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeMismatch(f"conv2d input {x.shape} incompatible with kernel {w.shape}")
    if params["b"].shape != (w.shape[3],):
        raise ShapeMismatch(f"conv2d bias {params['b'].shape} does not match kernel {w.shape}")


def conv2d(x: np.ndarray, params: LayerParams, out_channels: int | None = None) -> np.ndarray:
    _check_conv(x, params)
    w, b = params["w"], params["b"]
    if out_channels is not None and w.shape[3] != out_channels:
        raise ShapeMismatch(f"kernel has {w.shape[3]} output channels, expected {out_channels}")
    n, h, wd, _ = x.shape
    rows, wp, span = _padded_rows(x)
    acc = rows[0:span] @ w[0, 0]
    for di in range(3):
        for dj in range(3):
            if di or dj:
                off = di * wp + dj
                acc += rows[off:off + span] @ w[di, dj]
    full = np.zeros((rows.shape[0], w.shape[3]), dtype=acc.dtype)
    full[wp + 1:wp + 1 + span] = acc
    return full.reshape(n, h + 2, wd + 2, -1)[:, 1:-1, 1:-1, :] + b


def conv2d_backward(grad_out: np.ndarray, saved_input: np.ndarray, params: LayerParams):
    """Returns ``(grad_input, {"w": ..., "b": ...})``."""
    _check_conv(saved_input, params)
    w = params["w"]
    n, h, wd, c = saved_input.shape
    c_out = w.shape[3]
    if grad_out.shape != (n, h, wd, c_out):
        raise ShapeMismatch(f"grad_out {grad_out.shape} does not match forward output {(n, h, wd, c_out)}")
    rows, wp, span = _padded_rows(saved_input)
    gp = np.zeros((n, h + 2, wd + 2, c_out), dtype=grad_out.dtype)
    gp[:, 1:-1, 1:-1, :] = grad_out
    g = gp.reshape(-1, c_out)[wp + 1:wp + 1 + span]  # zero at padding rows, so border taps drop out
    grad_w = np.empty(w.shape, dtype=np.result_type(rows, g))
    grad_rows = np.zeros(rows.shape, dtype=np.result_type(g, w))
    for di in range(3):
        for dj in range(3):
            off = di * wp + dj
            grad_w[di, dj] = rows[off:off + span].T @ g
            grad_rows[off:off + span] += g @ w[di, dj].T
    gx = grad_rows.reshape(n, h + 2, wd + 2, c)[:, 1:-1, 1:-1, :]
    return np.ascontiguousarray(gx), {"w": grad_w, "b": grad_out.reshape(-1, c_out).sum(axis=0)}


# ---------------------------------------------------------------------------
# 2x2 max pooling and nearest-neighbour upsampling


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns the pooled map and the argmax (0..3, row-major in each window)."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise OddDims(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.uint8)


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, h2, w2, c = grad_out.shape
    win = np.zeros((n, h2, w2, c, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    return win.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(grad_out: np.ndarray) -> np.ndarray:
    n, h, w, c = grad_out.shape
    return grad_out.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# dense


def dense(x: np.ndarray, params: LayerParams) -> np.ndarray:
    w, b = params["w"], params["b"]
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense input {x.shape} incompatible with weight {w.shape} / bias {b.shape}")
    return x @ w + b


def dense_backward(grad_out: np.ndarray, saved_input: np.ndarray, params: LayerParams):
    w = params["w"]
    if grad_out.shape != (saved_input.shape[0], w.shape[1]):
        raise ShapeMismatch(f"dense grad_out {grad_out.shape} does not match forward output")
    return grad_out @ w.T, {"w": saved_input.T @ grad_out, "b": grad_out.sum(axis=0)}


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, grad_out: np.ndarray, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """``x`` is the forward input, ``y`` the forward output (recomputed if omitted)."""
    if kind == "linear":
        return grad_out
    if kind == "relu":
        return grad_out * (x > 0)  # derivative at exactly 0 is 0
    if y is None:
        y = activation(kind, x)
    if kind == "sigmoid":
        return grad_out * y * (1 - y)
    if kind == "tanh":
        return grad_out * (1 - y * y)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# inverted dropout


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Survivor mask already scaled by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise BadRate(f"dropout rate {rate} outside [0, 1)")
    if rate == 0:
        return np.ones(shape, dtype)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def dropout(x: np.ndarray, rate: float, training: bool, seed=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns ``(output, mask)``; ``mask`` is None in inference mode or at rate 0."""
    if not 0 <= rate < 1:
        raise BadRate(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0:
        return x, None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = dropout_mask(x.shape, rate, rng, x.dtype)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


# ---------------------------------------------------------------------------
# LSTM (gate order: input, forget, cell, output)


def _check_lstm(x: np.ndarray, h: np.ndarray, params: LayerParams) -> int:
    wx, wh, b = params["wx"], params["wh"], params["b"]
    units = wh.shape[0]
    if (
        wx.shape[1] != 4 * units
        or wh.shape != (units, 4 * units)
        or b.shape != (4 * units,)
        or x.ndim != 2
        or x.shape[1] != wx.shape[0]
        or h.shape != (x.shape[0], units)
    ):
        raise ShapeMismatch(f"lstm input {x.shape}/state {h.shape} incompatible with wx {wx.shape}, wh {wh.shape}")
    return units


def lstm_step(x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, params: LayerParams):
    """One step. Returns ``(h_t, c_t, cache)``."""
    u = _check_lstm(x_t, h_prev, params)
    z = x_t @ params["wx"] + h_prev @ params["wh"] + params["b"]
    i = _sigmoid(z[:, :u])
    f = _sigmoid(z[:, u:2 * u])
    g = np.tanh(z[:, 2 * u:3 * u])
    o = _sigmoid(z[:, 3 * u:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x_t, h_prev, c_prev, i, f, g, o, tc)


def lstm_step_backward(dh: np.ndarray, dc: np.ndarray, cache, params: LayerParams):
    """Returns ``(dx, dh_prev, dc_prev, grads)``."""
    x_t, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dct = dc + dh * o * (1 - tc * tc)
    dz = np.concatenate(
        [dct * g * i * (1 - i), dct * c_prev * f * (1 - f), dct * i * (1 - g * g), do * o * (1 - o)], axis=1
    )
    grads = {"wx": x_t.T @ dz, "wh": h_prev.T @ dz, "b": dz.sum(axis=0)}
    return dz @ params["wx"].T, dz @ params["wh"].T, dct * f, grads


def lstm_sequence(xs: np.ndarray, params: LayerParams):
    """Run over ``xs`` of shape (N, T, D) from a zero state; returns all hidden states (N, T, U)."""
    n, t, _ = xs.shape
    u = params["wh"].shape[0]
    h = np.zeros((n, u), xs.dtype)
    c = np.zeros((n, u), xs.dtype)
    hs, caches = [], []
    for k in range(t):
        h, c, cache = lstm_step(xs[:, k], h, c, params)
        hs.append(h)
        caches.append(cache)
    return np.stack(hs, axis=1), caches


def lstm_sequence_backward(dhs: np.ndarray, caches, params: LayerParams):
    """Backprop through time. Returns ``(dxs, grads)``."""
    n, t, u = dhs.shape
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    dxs = [None] * t
    dh_next = np.zeros((n, u), dhs.dtype)
    dc_next = np.zeros((n, u), dhs.dtype)
    for k in reversed(range(t)):
        dx, dh_next, dc_next, g = lstm_step_backward(dhs[:, k] + dh_next, dc_next, caches[k], params)
        dxs[k] = dx
        for name in grads:
            grads[name] += g[name]
    return np.stack(dxs, axis=1), grads


# ---------------------------------------------------------------------------
# loss


def masked_mse(y_true: np.ndarray, y_pred: np.ndarray, vm: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over positions with ``vm == 1`` and a finite target.

    Returns the loss and its gradient with respect to ``y_pred``.
    """
    if y_true.shape != y_pred.shape:
        raise ShapeMismatch(f"y_true {y_true.shape} vs y_pred {y_pred.shape}")
    try:
        vm = np.broadcast_to(vm, y_true.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"mask {np.shape(vm)} does not broadcast to {y_true.shape}") from exc
    sel = (vm == 1) & np.isfinite(y_true)
    count = int(sel.sum())
    if count == 0:
        raise EmptyMask("no masked position has a finite target")
    diff = np.where(sel, y_pred - np.where(sel, y_true, 0), 0)
    loss = float(np.sum(diff.astype(np.float64) ** 2) / count)
    grad = (2.0 / count) * diff
    return loss, grad.astype(y_pred.dtype, copy=False)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if set(params) != set(grads):
        raise ShapeMismatch("params and grads have different keys")
    t = state.step_count + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.get(k, np.zeros_like(p))
        v = state.second_moment.get(k, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        new_params[k] = (p - update).astype(p.dtype, copy=False)
        m_new[k], v_new[k] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.epsilon, t, m_new, v_new)
    return new_params, new_state


# ---------------------------------------------------------------------------
# PRM1 parameter checkpoints
#
#   b"PRM1" | u32 header_len | header (UTF-8 JSON) | u32 count |
#   count x ( u16 name_len | name | u32 ndim | u32 dims[ndim] | f32 values )

PRM_MAGIC = b"PRM1"


def encode_params(arrays: Mapping[str, np.ndarray], header: dict | None = None) -> bytes:
    head = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    parts = [PRM_MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_params(buf: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != PRM_MAGIC:
        raise BadMagic(f"{source}: not a PRM1 file")
    try:
        pos = 4
        (hlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise TruncatedFile(f"{source}: blob {name!r} truncated")
            arrays[name] = np.frombuffer(buf, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise TruncatedFile(f"{source}: {exc}") from exc
    return header, arrays
