"""Small reverse-mode network engine.

Only the layer types the two recognition/reconstruction architectures need are
provided: same-size 2-D convolution, ReLU, 2x2 max pooling, quadrant max
pooling, flatten, fully connected, dropout, and an MSE loss. Tensors are plain
``numpy.ndarray`` values laid out as ``(batch, channels, height, width)``;
any non-finite value raises :class:`NonFiniteError`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up anywhere in the engine."""


class ShapeError(ValueError):
    pass


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite value in {where}")
    return x


@dataclass
class LayerParams:
    """Weights and biases of one parametrised layer.

    ``learn_rate_scale`` multiplies the phase learning rate for this layer only;
    transplanted layers run at 0.1 while freshly initialised ones run at 1.0.
    """

    kind: str
    weights: np.ndarray
    biases: np.ndarray
    learn_rate_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("conv", "fc", "none"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.learn_rate_scale < 0:
            raise ValueError("learn_rate_scale must be non-negative")
        if self.kind == "conv":
            if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
                raise ShapeError(f"conv weights must be (out, in, k, k), got {self.weights.shape}")
        elif self.kind == "fc" and self.weights.ndim != 2:
            raise ShapeError(f"fc weights must be (out, in), got {self.weights.shape}")
        if self.kind != "none" and self.biases.shape != (self.weights.shape[0],):
            raise ShapeError("bias length must equal the number of output channels/units")

    @property
    def size(self) -> int:
        return int(self.weights.size + self.biases.size)

    def copy(self) -> "LayerParams":
        return LayerParams(self.kind, self.weights.copy(), self.biases.copy(), self.learn_rate_scale)


@dataclass
class SGDConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


# ---------------------------------------------------------------------------
# functional forward / backward


def _im2col(x: np.ndarray, k: int, padding: int) -> np.ndarray:
    """Patch matrix ``(B*H*W, k*k*C)`` with rows ordered (ky, kx, channel)."""
    b, c, h, w = x.shape
    xp = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((b, h, w, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(b * h * w, k * k * c)


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    # (out, in, k, k) -> (out, k*k*in), matching the _im2col column order
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


# below this many output channels the shifted-row matmul beats im2col
_SHIFT_MAX_OUT = 4


def _padded_rows(x: np.ndarray, k: int, padding: int) -> tuple[np.ndarray, int]:
    """Zero-padded NHWC copy flattened to rows, with a tail so every kernel offset is a row slice."""
    b, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    n = b * hp * wp
    xp = np.zeros((n + (k - 1) * (wp + 1), c), dtype=x.dtype)
    xp[:n].reshape(b, hp, wp, c)[:, padding:padding + h, padding:padding + w, :] = x.transpose(0, 2, 3, 1)
    return xp, n


def conv2d(x: np.ndarray, params: LayerParams, padding: int | None = None, cache: dict | None = None) -> np.ndarray:
    """Same-size convolution (cross-correlation) with zero padding ``(k-1)/2``."""
    w = params.weights
    out_c, in_c, k, _ = w.shape
    if k % 2 == 0:
        raise ShapeError("kernel size must be odd")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ShapeError(f"padding must be {(k - 1) // 2} for a same-size {k}x{k} convolution")
    if x.ndim != 4 or x.shape[1] != in_c:
        raise ShapeError(f"conv expects (B, {in_c}, H, W) input, got {x.shape}")
    b, _, h, wd = x.shape
    if out_c <= _SHIFT_MAX_OUT:
        wp = wd + 2 * padding
        xp, n = _padded_rows(x, k, padding)
        wt = w.transpose(2, 3, 1, 0)
        out = np.zeros((n, out_c), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                out += xp[off:off + n] @ wt[i, j]
        out = out.reshape(b, h + 2 * padding, wp, out_c)[:, :h, :wd, :]
        if cache is not None:
            cache["rows"] = (xp, n, wp)
    else:
        cols = _im2col(x, k, padding)
        out = (cols @ _weight_matrix(w).T).reshape(b, h, wd, out_c)
        if cache is not None:
            cache["cols"] = cols
    out = out + params.biases
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(dy: np.ndarray, params: LayerParams, cache: dict, need_input_grad: bool = True):
    """Return ``(dx, dW, db)`` for :func:`conv2d`; ``dx`` is None when not requested."""
    w = params.weights
    out_c, in_c, k, _ = w.shape
    dy_nhwc = dy.transpose(0, 2, 3, 1)
    db = dy_nhwc.reshape(-1, out_c).sum(axis=0)
    if "rows" in cache:
        xp, n, wp = cache["rows"]
        b, _, h, wd = dy.shape
        full = np.zeros((b, n // b // wp, wp, out_c), dtype=dy.dtype)
        full[:, :h, :wd, :] = dy_nhwc
        full = full.reshape(n, out_c)
        dw = np.empty((k, k, in_c, out_c), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                dw[i, j] = xp[off:off + n].T @ full
        dw = dw.transpose(3, 2, 0, 1)
    else:
        dy_m = dy_nhwc.reshape(-1, out_c)
        dw = (dy_m.T @ cache["cols"]).reshape(out_c, k, k, in_c).transpose(0, 3, 1, 2)
    dx = None
    if need_input_grad:
        # input gradient of a same-size correlation is a same-size correlation
        # of dy with the spatially flipped, channel-transposed kernel
        flipped = LayerParams("conv", np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]),
                              np.zeros(in_c, dtype=w.dtype))
        dx = conv2d(dy, flipped)
    return dx, np.ascontiguousarray(dw), db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return dy * (x > 0)


def _pool_windows(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Reshape ``(B, C, H, W)`` into ``(B, C, H/ph, W/pw, ph*pw)`` windows (row-major inside)."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h // ph, ph, w // pw, pw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // ph, w // pw, ph * pw)


def _unpool(dy: np.ndarray, arg: np.ndarray, ph: int, pw: int) -> np.ndarray:
    b, c, oh, ow = dy.shape
    win = np.zeros((b, c, oh, ow, ph * pw), dtype=dy.dtype)
    np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
    return win.reshape(b, c, oh, ow, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh * ph, ow * pw)


def _check_even(x: np.ndarray, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a (B, C, H, W) tensor")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{what} needs even spatial extents, got {x.shape[2]}x{x.shape[3]}")


def maxpool2x2(x: np.ndarray, cache: dict | None = None) -> np.ndarray:
    _check_even(x, "maxpool2x2")
    win = _pool_windows(x, 2, 2)
    arg = win.argmax(axis=-1)  # first occurrence on ties
    if cache is not None:
        cache["arg"] = arg
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]


def maxpool2x2_backward(dy: np.ndarray, cache: dict) -> np.ndarray:
    return _unpool(dy, cache["arg"], 2, 2)


def quadrant_pool(x: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Max over each of the four equal quadrants -> ``(B, C, 2, 2)``."""
    _check_even(x, "quadrant_pool")
    h, w = x.shape[2] // 2, x.shape[3] // 2
    win = _pool_windows(x, h, w)
    arg = win.argmax(axis=-1)
    if cache is not None:
        cache["arg"] = arg
        cache["window"] = (h, w)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]


def quadrant_pool_backward(dy: np.ndarray, cache: dict) -> np.ndarray:
    h, w = cache["window"]
    return _unpool(dy, cache["arg"], h, w)


def fully_connected(x: np.ndarray, params: LayerParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != params.weights.shape[1]:
        raise ShapeError(f"fc expects (B, {params.weights.shape[1]}) input, got {x.shape}")
    return x @ params.weights.T + params.biases


def fully_connected_backward(dy: np.ndarray, x: np.ndarray, params: LayerParams):
    return dy @ params.weights, dy.T @ x, dy.sum(axis=0)


def dropout(x: np.ndarray, p: float, train: bool, rng: np.random.Generator | None = None,
            cache: dict | None = None) -> np.ndarray:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time; eval is identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0:
        if cache is not None:
            cache["mask"] = None
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    if cache is not None:
        cache["mask"] = mask
    return x * mask


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    return loss, 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# layers


class Layer:
    params: LayerParams | None = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape


class Conv2D(Layer):
    def __init__(self, params: LayerParams, name: str = "conv"):
        self.params = params
        self.name = name
        self.need_input_grad = True
        self._cache: dict = {}
        self.grads: tuple | None = None

    def forward(self, x, train=False, rng=None):
        self._cache = {}
        return check_finite(conv2d(x, self.params, cache=self._cache), self.name)

    def backward(self, dy):
        dx, dw, db = conv2d_backward(dy, self.params, self._cache, self.need_input_grad)
        self.grads = (dw, db)
        self._cache = {}
        return dx

    def output_shape(self, shape):
        return (shape[0], self.params.weights.shape[0], shape[2], shape[3])


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False, rng=None):
        self._x = x
        return relu(x)

    def backward(self, dy):
        return relu_backward(dy, self._x)


class MaxPool2x2(Layer):
    name = "maxpool"

    def forward(self, x, train=False, rng=None):
        self._cache = {}
        return maxpool2x2(x, self._cache)

    def backward(self, dy):
        return maxpool2x2_backward(dy, self._cache)

    def output_shape(self, shape):
        return (shape[0], shape[1], shape[2] // 2, shape[3] // 2)


class QuadrantPool(Layer):
    name = "quadpool"

    def forward(self, x, train=False, rng=None):
        self._cache = {}
        return quadrant_pool(x, self._cache)

    def backward(self, dy):
        return quadrant_pool_backward(dy, self._cache)

    def output_shape(self, shape):
        return (shape[0], shape[1], 2, 2)


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))


class FullyConnected(Layer):
    def __init__(self, params: LayerParams, name: str = "fc"):
        self.params = params
        self.name = name
        self.grads = None

    def forward(self, x, train=False, rng=None):
        self._x = x
        return check_finite(fully_connected(x, self.params), self.name)

    def backward(self, dy):
        dx, dw, db = fully_connected_backward(dy, self._x, self.params)
        self.grads = (dw, db)
        return dx

    def output_shape(self, shape):
        return (shape[0], self.params.weights.shape[0])


class Dropout(Layer):
    name = "dropout"

    def __init__(self, p: float = 0.5):
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, x, train=False, rng=None):
        self._cache = {}
        return dropout(x, self.p, train, rng, self._cache)

    def backward(self, dy):
        mask = self._cache.get("mask")
        return dy if mask is None else dy * mask


class Network:
    """An ordered stack of layers with named parametrised layers."""

    def __init__(self, layers: Sequence[Layer], kind: str = "net"):
        self.layers = list(layers)
        self.kind = kind
        # first parametrised layer never needs an input gradient
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                layer.need_input_grad = False
                break

    @property
    def param_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.params is not None]

    def params(self) -> list[LayerParams]:
        return [l.params for l in self.param_layers]

    def named(self) -> dict[str, LayerParams]:
        return {l.name: l.params for l in self.param_layers}

    def grads(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [l.grads for l in self.param_layers]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None,
                trace: list | None = None) -> np.ndarray:
        check_finite(x, "network input")
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
            if trace is not None:
                trace.append((layer.name, x))
        return x

    def backward(self, dy: np.ndarray) -> None:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
            if dy is None:
                break

    def shapes(self, input_shape) -> list[tuple[str, tuple]]:
        out = []
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append((layer.name, shape))
        return out

    def astype(self, dtype) -> "Network":
        for p in self.params():
            p.weights = p.weights.astype(dtype)
            p.biases = p.biases.astype(dtype)
        return self


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(params: Sequence[LayerParams], grads, velocity: list, cfg: SGDConfig, phase_lr: float) -> None:
    """One momentum-SGD update in place.

    ``v <- momentum*v - lr*scale*(g + wd*w)`` then ``w <- w + v``; biases skip
    the weight-decay term. ``velocity`` is a list of ``[v_w, v_b]`` pairs that
    is filled lazily on the first call.
    """
    if len(grads) != len(params):
        raise ValueError("grads not aligned with params")
    if not velocity:
        velocity.extend([np.zeros_like(p.weights), np.zeros_like(p.biases)] for p in params)
    for p, (gw, gb), v in zip(params, grads, velocity):
        lr = phase_lr * p.learn_rate_scale
        v[0] *= cfg.momentum
        v[0] -= lr * (gw + cfg.weight_decay * p.weights)
        v[1] *= cfg.momentum
        v[1] -= lr * gb
        p.weights += v[0]
        p.biases += v[1]


class SGD:
    """Momentum SGD over a fixed parameter list.

    ``SGD.total_steps`` counts updates across every optimizer in the process,
    which lets callers audit that a code path performed no training.
    """

    total_steps = 0

    def __init__(self, params: Sequence[LayerParams], cfg: SGDConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity: list = []
        self.steps = 0

    def step(self, grads, phase_lr: float) -> None:
        sgd_step(self.params, grads, self.velocity, self.cfg, phase_lr)
        self.steps += 1
        SGD.total_steps += 1


def init_params(kind: str, shape: tuple, rng: np.random.Generator, std: float | None = 0.01,
                dtype=DEFAULT_DTYPE) -> LayerParams:
    """Zero-mean Gaussian weights, zero biases.

    ``std=None`` uses the fan-in scaled deviation ``sqrt(2 / fan_in)``.
    """
    if std is None:
        std = float(np.sqrt(2.0 / np.prod(shape[1:])))
    w = (rng.standard_normal(shape) * std).astype(dtype)
    return LayerParams(kind, w, np.zeros(shape[0], dtype=dtype))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(network: Network, x: np.ndarray, target: np.ndarray, epsilon: float = 1e-5,
               floor: float = 1e-7, loss_fn: Callable = mse_loss) -> float:
    """Max relative error between analytic and central-difference parameter gradients.

    Runs in eval mode, so dropout is the identity. The relative error of one
    entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    out = network.forward(x, train=False)
    _, dy = loss_fn(out, target)
    network.backward(dy)
    worst = 0.0
    for layer in network.param_layers:
        for arr, analytic in zip((layer.params.weights, layer.params.biases), layer.grads):
            if arr.dtype != np.float64:
                raise TypeError("gradient checks require 64-bit parameters")
            flat = arr.reshape(-1)
            ana = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                lp, _ = loss_fn(network.forward(x), target)
                flat[i] = orig - epsilon
                lm, _ = loss_fn(network.forward(x), target)
                flat[i] = orig
                num = (lp - lm) / (2 * epsilon)
                err = abs(ana[i] - num) / max(abs(ana[i]), abs(num), floor)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"LBEMOCK1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, network: Network, header: dict | None = None) -> None:
    """Write a deterministic binary checkpoint.

    Layout: magic, uint32 header length, UTF-8 JSON header, then each layer's
    weights and biases as raw little-endian float64 in header order.
    """
    layers = []
    for layer in network.param_layers:
        p = layer.params
        layers.append({"name": layer.name, "kind": p.kind, "weights": list(p.weights.shape),
                       "biases": list(p.biases.shape), "learn_rate_scale": p.learn_rate_scale})
    meta = {"version": CHECKPOINT_VERSION, "network": network.kind, "layers": layers}
    meta.update(header or {})
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in network.params():
            fh.write(np.ascontiguousarray(p.weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(p.biases, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, list[tuple[str, LayerParams]]]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    meta = json.loads(data[12:12 + n])
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    off = 12 + n
    out = []
    for spec in meta["layers"]:
        arrs = []
        for key in ("weights", "biases"):
            shape = tuple(spec[key])
            count = int(np.prod(shape))
            arrs.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
            off += 8 * count
        out.append((spec["name"], LayerParams(spec["kind"], arrs[0], arrs[1], spec["learn_rate_scale"])))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter payload")
    return meta, out


def load_into(network: Network, layers: list[tuple[str, LayerParams]]) -> Network:
    named = {l.name: l for l in network.param_layers}
    if set(named) != {n for n, _ in layers}:
        raise ShapeError("checkpoint layers do not match the network")
    for name, p in layers:
        tgt = named[name].params
        if tgt.weights.shape != p.weights.shape:
            raise ShapeError(f"layer {name}: shape {p.weights.shape} != {tgt.weights.shape}")
        tgt.weights = p.weights.astype(tgt.weights.dtype)
        tgt.biases = p.biases.astype(tgt.biases.dtype)
        tgt.learn_rate_scale = p.learn_rate_scale
    return network
