"""
Small convolutional Q-network engine written directly against numpy.

Tensors are plain ``float64`` ndarrays. All parameters of a model live in one
contiguous flat vector; per-layer weight and bias arrays are views into it, so
flattening for the wire and in-place optimizer updates cost nothing extra.

Layout conventions:
    conv weights  (N, C, k, k), conv bias (N,)
    fc weights    (H, D),       fc bias   (H,)
    inputs        (B, C, H, W); conv stages run channel-last internally and
                  dense layers flatten in (C, H, W) order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, UsageError

CONV = "conv"
FC = "fc"
RELU = "relu"

CHECKPOINT_MAGIC = b"DDQ1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    width: int = 0
    stride: int = 1
    size: int = 0

    @classmethod
    def conv(cls, filters: int, width: int, stride: int = 1) -> "LayerSpec":
        return cls(CONV, filters=filters, width=width, stride=stride)

    @classmethod
    def fc(cls, size: int) -> "LayerSpec":
        return cls(FC, size=size)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(RELU)


def default_architecture(n_actions: int, hidden: int = 128) -> list[LayerSpec]:
    """Conv(16,4x4,s2) - ReLU - Conv(32,3x3,s1) - ReLU - FC(hidden) - ReLU - FC(n_actions)."""
    return [
        LayerSpec.conv(16, 4, 2),
        LayerSpec.relu(),
        LayerSpec.conv(32, 3, 1),
        LayerSpec.relu(),
        LayerSpec.fc(hidden),
        LayerSpec.relu(),
        LayerSpec.fc(n_actions),
    ]


def _conv_out(size: int, width: int, stride: int) -> int:
    span = size - width
    if span < 0 or span % stride:
        raise ConfigError(
            f"input width {size} incompatible with filter width {width} and stride {stride}"
        )
    return span // stride + 1


def layer_shapes(specs: Sequence[LayerSpec], input_shape: Sequence[int]):
    """Walk the layer chain and return ``(param_shapes, output_shape)``.

    ``param_shapes`` holds one ``(weight_shape, bias_shape)`` pair per
    parametric layer, in order.
    """
    shape = tuple(int(s) for s in input_shape)
    params = []
    for spec in specs:
        if spec.kind == CONV:
            if spec.filters < 1 or spec.width < 1 or spec.stride < 1:
                raise ConfigError(f"bad conv layer {spec}")
            if len(shape) != 3:
                raise ConfigError(f"conv layer needs a C x H x W input, got {shape}")
            c, h, w = shape
            oh = _conv_out(h, spec.width, spec.stride)
            ow = _conv_out(w, spec.width, spec.stride)
            params.append(((spec.filters, c, spec.width, spec.width), (spec.filters,)))
            shape = (spec.filters, oh, ow)
        elif spec.kind == FC:
            if spec.size < 1:
                raise ConfigError(f"bad fc layer {spec}")
            params.append(((spec.size, int(np.prod(shape))), (spec.size,)))
            shape = (spec.size,)
        elif spec.kind == RELU:
            pass
        else:
            raise ConfigError(f"unknown layer kind {spec.kind!r}")
    return params, shape


def param_count(specs: Sequence[LayerSpec], d: int, frames: int) -> int:
    """Exact number of scalar weights and biases for an F x d x d input."""
    if not specs:
        return 0
    shapes, _ = layer_shapes(specs, (frames, d, d))
    return sum(int(np.prod(w)) + int(np.prod(b)) for w, b in shapes)


def param_breakdown(specs: Sequence[LayerSpec], d: int, frames: int) -> dict[str, int]:
    """Parameter counts split into ``conv``, ``bridge`` (first dense layer) and ``fc`` (the rest)."""
    shapes, _ = layer_shapes(specs, (frames, d, d))
    out = {"conv": 0, "bridge": 0, "fc": 0}
    seen_dense = False
    for spec, (w, b) in zip((s for s in specs if s.kind != RELU), shapes):
        n = int(np.prod(w)) + int(np.prod(b))
        if spec.kind == CONV:
            out["conv"] += n
        elif not seen_dense:
            out["bridge"] += n
            seen_dense = True
        else:
            out["fc"] += n
    return out


class ParamSet:
    """Flat float64 vector viewed as a list of ``(weight, bias)`` arrays."""

    def __init__(self, shapes, flat: np.ndarray | None = None):
        self.shapes = [(tuple(w), tuple(b)) for w, b in shapes]
        size = sum(int(np.prod(w)) + int(np.prod(b)) for w, b in self.shapes)
        if flat is None:
            flat = np.zeros(size, dtype=np.float64)
        else:
            flat = np.ascontiguousarray(flat, dtype=np.float64)
            if flat.ndim != 1 or flat.size != size:
                raise ConfigError(f"flat vector of length {flat.size} does not match {size} parameters")
        self.flat = flat
        self.layers = []
        offset = 0
        for w_shape, b_shape in self.shapes:
            nw, nb = int(np.prod(w_shape)), int(np.prod(b_shape))
            w = flat[offset:offset + nw].reshape(w_shape)
            offset += nw
            b = flat[offset:offset + nb].reshape(b_shape)
            offset += nb
            self.layers.append((w, b))

    @property
    def size(self) -> int:
        return self.flat.size

    def tensors(self) -> list[np.ndarray]:
        return [t for pair in self.layers for t in pair]


class ModelParams(ParamSet):
    def __init__(self, shapes, flat: np.ndarray | None = None, generation: int = 0):
        super().__init__(shapes, flat)
        self.generation = int(generation)

    def copy(self) -> "ModelParams":
        return ModelParams(self.shapes, self.flat.copy(), self.generation)


class Gradient(ParamSet):
    pass


def init_model(specs, input_shape, rng: np.random.Generator, std: float = 0.01) -> ModelParams:
    """Gaussian weights with standard deviation ``std``, zero biases, generation 0."""
    shapes, _ = layer_shapes(specs, input_shape)
    model = ModelParams(shapes)
    for w, _ in model.layers:
        w[...] = rng.normal(0.0, std, size=w.shape)
    return model


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _window(x: np.ndarray, di: int, dj: int, oh: int, ow: int, stride: int) -> np.ndarray:
    return x[:, di:di + stride * (oh - 1) + 1:stride, dj:dj + stride * (ow - 1) + 1:stride, :]


def _im2col(x: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # NHWC (B, H, W, C) -> (B*H'*W', k*k*C), columns ordered (ki, kj, c)
    b, c = x.shape[0], x.shape[3]
    cols = np.empty((b, oh, ow, k, k, c))
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = _window(x, di, dj, oh, ow, stride)
    return cols.reshape(b * oh * ow, k * k * c)


def _conv_batch(x, w, bias, stride):
    # x is NHWC; returns NHWC output and the column matrix for backward
    n, c, k, _ = w.shape
    if x.ndim != 4 or x.shape[3] != c:
        raise ConfigError(f"conv input with {x.shape[3] if x.ndim == 4 else '?'} channels does not match weights {w.shape}")
    if bias.shape != (n,):
        raise ConfigError(f"conv bias {bias.shape} does not match {n} filters")
    batch = x.shape[0]
    oh = _conv_out(x.shape[1], k, stride)
    ow = _conv_out(x.shape[2], k, stride)
    cols = _im2col(x, k, stride, oh, ow)
    wmat = w.transpose(0, 2, 3, 1).reshape(n, -1)
    out = cols @ wmat.T
    out += bias
    return out.reshape(batch, oh, ow, n), cols


def conv_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Valid (unpadded) convolution of one C x H x W input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ConfigError(f"expected a C x H x W input, got shape {x.shape}")
    out, _ = _conv_batch(x.transpose(1, 2, 0)[None], weights, bias, stride)
    return out[0].transpose(2, 0, 1)


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if weights.ndim != 2 or x.shape != (weights.shape[1],) or bias.shape != (weights.shape[0],):
        raise ConfigError(f"fc shapes disagree: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return weights @ x + bias


def _run(model: ParamSet, specs, x: np.ndarray, keep: bool):
    # conv stages run channel-last; dense layers see the usual (C, H, W) flattening
    caches = []
    params = iter(model.layers)
    channel_last = False
    for spec in specs:
        if spec.kind == CONV:
            w, b = next(params)
            if not channel_last:
                if x.ndim != 4:
                    raise ConfigError(f"conv layer needs B x C x H x W input, got {x.shape}")
                x = x.transpose(0, 2, 3, 1)
                channel_last = True
            in_shape = x.shape
            x, cols = _conv_batch(x, w, b, spec.stride)
            caches.append((in_shape, cols) if keep else None)
        elif spec.kind == FC:
            w, b = next(params)
            if channel_last:
                x = x.transpose(0, 3, 1, 2)
                channel_last = False
            flat = x.reshape(x.shape[0], -1)
            if flat.shape[1] != w.shape[1]:
                raise ConfigError(f"fc input width {flat.shape[1]} does not match weights {w.shape}")
            caches.append((x.shape, flat) if keep else None)
            x = flat @ w.T
            x += b
        elif spec.kind == RELU:
            caches.append(x > 0 if keep else None)
            x = np.maximum(x, 0.0)
        else:
            raise ConfigError(f"unknown layer kind {spec.kind!r}")
    return x, caches


def q_values(model: ParamSet, specs, states: np.ndarray) -> np.ndarray:
    """Q-values for a batch of stacked states, shape (B, |A|)."""
    out, _ = _run(model, specs, np.asarray(states, dtype=np.float64), keep=False)
    return out


def forward(model: ParamSet, specs, state: np.ndarray) -> np.ndarray:
    """Q-values of every action for a single F x d x d state."""
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 3:
        raise ConfigError(f"state must be F x d x d, got {state.shape}")
    return q_values(model, specs, state[None])[0]


def backward(model: ParamSet, specs, states, actions, targets):
    """Loss ``mean(0.5 * (Q(s_i, a_i) - y_i)**2)`` and its gradient w.r.t. every parameter."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.intp)
    targets = np.asarray(targets, dtype=np.float64)
    b = states.shape[0] if states.ndim else 0
    if b == 0:
        raise UsageError("backward needs a non-empty minibatch")
    if actions.shape != (b,) or targets.shape != (b,):
        raise ConfigError("states, actions and targets must have the same batch length")

    q, caches = _run(model, specs, states, keep=True)
    rows = np.arange(b)
    residual = q[rows, actions] - targets
    loss = 0.5 * float(np.mean(residual * residual))

    grad = Gradient(model.shapes)
    delta = np.zeros_like(q)
    delta[rows, actions] = residual / b

    slots = list(zip(model.layers, grad.layers))
    slot = len(slots)
    for i in range(len(specs) - 1, -1, -1):
        spec, cache = specs[i], caches[i]
        if spec.kind == RELU:
            delta = delta * cache
            continue
        slot -= 1
        (w, _), (gw, gb) = slots[slot]
        need_input_grad = i > 0
        if spec.kind == FC:
            in_shape, flat = cache
            np.matmul(delta.T, flat, out=gw)
            gb[...] = delta.sum(axis=0)
            if need_input_grad:
                delta = (delta @ w).reshape(in_shape)
                if len(in_shape) == 4:
                    delta = delta.transpose(0, 2, 3, 1)
        else:
            in_shape, cols = cache
            n, c, k, _ = w.shape
            batch, oh, ow = delta.shape[:3]
            dmat = delta.reshape(-1, n)
            gw[...] = (dmat.T @ cols).reshape(n, k, k, c).transpose(0, 3, 1, 2)
            gb[...] = dmat.sum(axis=0)
            if need_input_grad:
                wmat = w.transpose(0, 2, 3, 1).reshape(n, -1)
                dcols = (dmat @ wmat).reshape(batch, oh, ow, k, k, c)
                dx = np.zeros(in_shape)
                for di in range(k):
                    for dj in range(k):
                        _window(dx, di, dj, oh, ow, spec.stride)[...] += dcols[:, :, :, di, dj, :]
                delta = dx
    return loss, grad


def save_checkpoint(path, model: ModelParams) -> None:
    parts = [CHECKPOINT_MAGIC]
    for t in model.tensors():
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    parts.append(struct.pack("<Q", model.generation))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a model checkpoint")
    pos, end = 4, len(data) - 8
    tensors = []
    while pos < end:
        (rank,) = struct.unpack_from("<I", data, pos)
        dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
        pos += 4 + 4 * rank
        count = int(np.prod(dims)) if dims else 1
        tensors.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims))
        pos += 8 * count
    if pos != end or len(tensors) % 2:
        raise ConfigError(f"{path}: truncated or malformed checkpoint")
    (generation,) = struct.unpack_from("<Q", data, end)
    shapes = [(tensors[i].shape, tensors[i + 1].shape) for i in range(0, len(tensors), 2)]
    flat = np.concatenate([t.ravel() for t in tensors]) if tensors else np.zeros(0)
    return ModelParams(shapes, flat.astype(np.float64), generation)
