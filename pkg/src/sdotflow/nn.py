"""Small fully-connected velocity network with hand-written derivatives.

Input layout is ``[x, emb(t), emb(extra_0), ...]`` where ``emb`` is a
sinusoidal embedding of width ``embed_width``: ``sin(w_k s)`` for the first
half, ``cos(w_k s)`` for the second, with frequencies spaced geometrically
from 1 to ``MAX_FREQ``. Hidden layers use tanh; the output layer is linear.

All functions are pure and accept either a single sample (``x`` of shape
``(d,)``) or a batch (``(B, d)``); per-sample ``t`` and ``extra`` may be
scalars or arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, NumericalError, ValidationError
from .rng import generator

MAX_FREQ = 32.0
ACTIVATIONS = ("tanh",)


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]
    dim: int
    embed_width: int = 16
    n_extra: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValidationError("need one bias per weight matrix and at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.embed_width % 2:
            raise ValidationError("embed_width must be even")
        expect_in = self.input_width
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValidationError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if w.shape[1] != expect_in:
                raise ValidationError(f"layer {k} expects {expect_in} inputs, weight has {w.shape[1]}")
            expect_in = w.shape[0]
        if expect_in != self.dim:
            raise ValidationError(f"output width {expect_in} != data dimension {self.dim}")

    @property
    def input_width(self) -> int:
        return self.dim + self.embed_width * (1 + self.n_extra)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.dim, self.embed_width, self.n_extra, self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        out = self.copy()
        pos = 0
        for w, b in zip(out.weights, out.biases):
            for a in (w, b):
                a[...] = vec[pos:pos + a.size].reshape(a.shape)
                pos += a.size
        return out


def init_mlp(dim: int, hidden: Sequence[int] = (128, 128, 128), seed: int = 0,
             embed_width: int = 16, n_extra: int = 0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = generator(seed)
    widths = [dim + embed_width * (1 + n_extra), *hidden, dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, fan_out))
    return MlpParams(weights, biases, dim, embed_width, n_extra)


def zero_like(params: MlpParams) -> MlpParams:
    return MlpParams([np.zeros_like(w) for w in params.weights],
                     [np.zeros_like(b) for b in params.biases],
                     params.dim, params.embed_width, params.n_extra, params.activation)


# --- embedding ----------------------------------------------------------------


def frequencies(width: int) -> np.ndarray:
    return np.geomspace(1.0, MAX_FREQ, width // 2)


def embed(s: np.ndarray, width: int) -> np.ndarray:
    """(B,) scalars -> (B, width) sinusoidal features."""
    arg = s[:, None] * frequencies(width)[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def embed_derivative(s: np.ndarray, width: int) -> np.ndarray:
    """d embed / d s, shape (B, width)."""
    w = frequencies(width)
    arg = s[:, None] * w[None, :]
    return np.concatenate([w * np.cos(arg), -w * np.sin(arg)], axis=1)


def _per_sample(value, n: int, k: int, name: str) -> np.ndarray:
    """Broadcast a scalar, a (k,) vector, an (n,) vector (k == 1) or an (n, k) array to (n, k)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full((n, k), float(arr))
    if arr.ndim == 1:
        if arr.size == k:
            return np.broadcast_to(arr[None, :], (n, k))
        if k == 1 and arr.size == n:
            return arr[:, None]
    if arr.shape != (n, k):
        raise ValidationError(f"{name} has shape {arr.shape}, expected ({n}, {k})")
    return arr


def _prepare(params: MlpParams, x, t, extra):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != params.dim:
        raise ValidationError(f"x has shape {x.shape}, network expects dimension {params.dim}")
    n = x2.shape[0]
    t_arr = _per_sample(t, n, 1, "t")[:, 0]
    if params.n_extra == 0:
        if extra is not None and np.size(extra) != 0:
            raise ValidationError("network takes no extra inputs")
        ex = np.zeros((n, 0))
    elif extra is None:
        raise ValidationError(f"network expects {params.n_extra} extra input(s)")
    else:
        ex = _per_sample(extra, n, params.n_extra, "extra")
    return x2, t_arr, ex, single


def _input_features(params: MlpParams, x2, t_arr, ex):
    parts = [x2, embed(t_arr, params.embed_width)]
    parts += [embed(ex[:, k], params.embed_width) for k in range(params.n_extra)]
    return np.concatenate(parts, axis=1)


# --- forward / backward -------------------------------------------------------


@dataclass
class ForwardCache:
    activations: list[np.ndarray]  # input to each layer
    output: np.ndarray
    t: np.ndarray = field(repr=False)
    extra: np.ndarray = field(repr=False)
    single: bool = False


def forward_cached(params: MlpParams, x, t, extra=None) -> ForwardCache:
    x2, t_arr, ex, single = _prepare(params, x, t, extra)
    h = _input_features(params, x2, t_arr, ex)
    acts = [h]
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.tanh(h)
            acts.append(h)
    return ForwardCache(acts, h, t_arr, ex, single)


def forward(params: MlpParams, x, t, extra=None) -> np.ndarray:
    """Velocity ``u(x, t, extra)``; shape follows ``x``."""
    out = forward_cached(params, x, t, extra).output
    return out[0] if np.ndim(x) == 1 else out


@dataclass
class GradBundle:
    """Gradients of ``<upstream, u>`` summed over the batch.

    ``x``, ``t`` and ``extra`` hold per-sample input gradients.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x: np.ndarray
    t: np.ndarray
    extra: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


def backward_cached(params: MlpParams, cache: ForwardCache, upstream) -> GradBundle:
    up = np.asarray(upstream, dtype=np.float64)
    up = up.reshape(cache.output.shape)
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    delta = up
    for k in range(len(params.weights) - 1, -1, -1):
        a_in = cache.activations[k]
        gw[k] = delta.T @ a_in
        gb[k] = delta.sum(axis=0)
        delta = delta @ params.weights[k]
        if k > 0:
            delta = delta * (1.0 - a_in * a_in)
    d, e = params.dim, params.embed_width
    gx = delta[:, :d]
    gt = np.einsum("be,be->b", delta[:, d:d + e], embed_derivative(cache.t, e))
    gextra = np.stack(
        [np.einsum("be,be->b", delta[:, d + e * (k + 1):d + e * (k + 2)],
                   embed_derivative(cache.extra[:, k], e)) for k in range(params.n_extra)],
        axis=1,
    ) if params.n_extra else np.zeros((delta.shape[0], 0))
    if cache.single:
        gx, gt, gextra = gx[0], gt[0], gextra[0]
    return GradBundle(gw, gb, gx, gt, gextra)


def backward(params: MlpParams, x, t, extra, upstream) -> GradBundle:
    """Reverse-mode gradient of ``sum_j <upstream_j, u(x_j, t_j, extra_j)>``."""
    return backward_cached(params, forward_cached(params, x, t, extra), upstream)


def jvp(params: MlpParams, x, t, extra, tangent) -> np.ndarray:
    """Directional derivative of ``u`` along ``(dx, dt, dextra)``.

    ``tangent`` is a tuple; ``dt`` and ``dextra`` may be scalars, and a
    missing ``dextra`` counts as zero.
    """
    x2, t_arr, ex, single = _prepare(params, x, t, extra)
    n = x2.shape[0]
    dx = np.broadcast_to(np.asarray(tangent[0], dtype=np.float64), x2.shape) \
        if np.ndim(tangent[0]) < 2 else np.asarray(tangent[0], dtype=np.float64)
    if dx.shape != x2.shape:
        raise ValidationError(f"dx has shape {dx.shape}, expected {x2.shape}")
    dt = _per_sample(tangent[1], n, 1, "dt")[:, 0]
    dextra = tangent[2] if len(tangent) > 2 else None
    if dextra is None or params.n_extra == 0:
        dex = np.zeros((n, params.n_extra))
    else:
        dex = _per_sample(dextra, n, params.n_extra, "dextra")
    e = params.embed_width
    parts = [dx, embed_derivative(t_arr, e) * dt[:, None]]
    parts += [embed_derivative(ex[:, k], e) * dex[:, k:k + 1] for k in range(params.n_extra)]
    h = _input_features(params, x2, t_arr, ex)
    dh = np.concatenate(parts, axis=1)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        dh = dh @ w.T
        if k < last:
            h = np.tanh(h)
            dh = dh * (1.0 - h * h)
    return dh[0] if single else dh


# --- optimiser ----------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, **kw) -> "AdamState":
        shapes = [a for pair in zip(params.weights, params.biases) for a in pair]
        return cls([np.zeros_like(a) for a in shapes], [np.zeros_like(a) for a in shapes], **kw)


def adam_update(params: MlpParams, grads: GradBundle, state: AdamState,
                lr: float) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam descent step; returns new params and state."""
    g_list = [a for pair in zip(grads.weights, grads.biases) for a in pair]
    for a in g_list:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite parameter gradient", step=state.step + 1)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_m, new_v, new_p = [], [], []
    p_list = [a for pair in zip(params.weights, params.biases) for a in pair]
    for p, g, m, v in zip(p_list, g_list, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    out = MlpParams(new_p[0::2], new_p[1::2], params.dim, params.embed_width,
                    params.n_extra, params.activation)
    return out, AdamState(new_m, new_v, step, b1, b2, state.eps)


# --- checkpoint ---------------------------------------------------------------

_CKPT_MAGIC = b"ALNP"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHHIIII")  # magic, version, activation, dim, embed, n_extra, layers


def write_checkpoint(params: MlpParams, path) -> None:
    """``ALNP`` v1 header, layer widths (u32), then per layer W then b as f64."""
    dims = params.layer_dims
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, ACTIVATIONS.index(params.activation),
                                   params.dim, params.embed_width, params.n_extra,
                                   len(params.weights)))
        fh.write(np.asarray(dims, dtype="<u4").tobytes())
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def read_checkpoint(path) -> MlpParams:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError("checkpoint truncated in header", offset=len(raw))
    magic, version, act, dim, embed_width, n_extra, n_layers = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != _CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    if act >= len(ACTIVATIONS):
        raise FormatError(f"unknown activation code {act}", offset=6)
    pos = _CKPT_HEADER.size
    if len(raw) < pos + 4 * (n_layers + 1):
        raise FormatError("checkpoint truncated in layer table", offset=len(raw))
    dims = np.frombuffer(raw, dtype="<u4", count=n_layers + 1, offset=pos).astype(int)
    pos += 4 * (n_layers + 1)
    weights, biases = [], []
    for k in range(n_layers):
        n_in, n_out = dims[k], dims[k + 1]
        need = 8 * (n_out * n_in + n_out)
        if len(raw) < pos + need:
            raise FormatError(f"checkpoint truncated in layer {k}", offset=len(raw))
        weights.append(np.frombuffer(raw, dtype="<f8", count=n_out * n_in, offset=pos)
                       .reshape(n_out, n_in).astype(np.float64))
        pos += 8 * n_out * n_in
        biases.append(np.frombuffer(raw, dtype="<f8", count=n_out, offset=pos).astype(np.float64))
        pos += 8 * n_out
    if pos != len(raw):
        raise FormatError("trailing bytes after last layer", offset=pos)
    return MlpParams(weights, biases, dim, embed_width, n_extra, ACTIVATIONS[act])
