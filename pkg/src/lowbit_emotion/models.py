"""SR-FCN and the valence CNN, plus the conv-layer transplant between them."""

from __future__ import annotations

import numpy as np

from .nn import (
    Conv2D,
    Dropout,
    Flatten,
    FullyConnected,
    MaxPool2x2,
    Network,
    QuadrantPool,
    ReLU,
    ShapeError,
    init_params,
)

FULL_WIDTHS = (64, 128, 256)
FULL_HIDDEN = 300
KERNEL = 5
INPUT_SIZE = 96
TRANSPLANT_LR_SCALE = 0.1
CONV_NAMES = ("conv1", "conv2", "conv3")


class SRFCN(Network):
    """Four same-size conv layers, ReLU after the first three, linear reconstruction.

    With ``residual=True`` the last layer predicts a correction that is added
    to the (bicubic-upscaled) input.
    """

    def __init__(self, layers, residual: bool):
        super().__init__(layers, kind="srfcn")
        self.residual = residual

    def forward(self, x, train=False, rng=None, trace=None):
        out = super().forward(x, train, rng, trace)
        return out + x if self.residual else out

    # residual path contributes nothing to parameter gradients


class EmoCNN(Network):
    def __init__(self, layers):
        super().__init__(layers, kind="emocnn")


def build_srfcn(seed: int, widths=FULL_WIDTHS, residual: bool = True, dtype=np.float64,
                init_std: float | None = None) -> SRFCN:
    rng = np.random.default_rng(seed)
    c1, c2, c3 = widths

    def conv(o, i, name):
        return Conv2D(init_params("conv", (o, i, KERNEL, KERNEL), rng, init_std, dtype), name)

    layers = [conv(c1, 1, "conv1"), ReLU(), conv(c2, c1, "conv2"), ReLU(), conv(c3, c2, "conv3"), ReLU(),
              conv(1, c3, "conv4")]
    return SRFCN(layers, residual)


def build_emocnn(seed: int, widths=FULL_WIDTHS, hidden: int = FULL_HIDDEN, dropout_p: float = 0.5,
                 dtype=np.float64, init_std: float | None = None) -> EmoCNN:
    rng = np.random.default_rng(seed)
    c1, c2, c3 = widths

    def conv(o, i, name):
        return Conv2D(init_params("conv", (o, i, KERNEL, KERNEL), rng, init_std, dtype), name)

    def fc(o, i, name):
        return FullyConnected(init_params("fc", (o, i), rng, init_std, dtype), name)

    layers = [
        conv(c1, 1, "conv1"), ReLU(), MaxPool2x2(),
        conv(c2, c1, "conv2"), ReLU(), MaxPool2x2(),
        conv(c3, c2, "conv3"), ReLU(), QuadrantPool(),
        Flatten(),
        fc(hidden, 4 * c3, "fc"), ReLU(), Dropout(dropout_p),
        fc(1, hidden, "regressor"),
    ]
    return EmoCNN(layers)


def conv_widths(model: Network) -> tuple[int, ...]:
    named = model.named()
    return tuple(named[n].weights.shape[0] for n in CONV_NAMES)


def transplant(src: SRFCN, dst: EmoCNN, lr_scale: float = TRANSPLANT_LR_SCALE) -> EmoCNN:
    """Copy conv1..conv3 of ``src`` into ``dst`` in place and slow them down to ``lr_scale``."""
    s, d = src.named(), dst.named()
    for name in CONV_NAMES:
        if s[name].weights.shape != d[name].weights.shape:
            raise ShapeError(f"{name}: SR-FCN filters {s[name].weights.shape} do not match CNN {d[name].weights.shape}")
    for name in CONV_NAMES:
        d[name].weights = s[name].weights.astype(d[name].weights.dtype, copy=True)
        d[name].biases = s[name].biases.astype(d[name].biases.dtype, copy=True)
        d[name].learn_rate_scale = lr_scale
    return dst


def forward_sr(model: SRFCN, frames: np.ndarray) -> np.ndarray:
    """Reconstruct normalised 96x96 frames; accepts ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)``."""
    x = _as_batch(frames, model)
    out = model.forward(x)[:, 0]
    return out[0] if np.ndim(frames) == 2 else out


def forward_valence(model: EmoCNN, frames: np.ndarray, train: bool = False, rng=None) -> np.ndarray | float:
    x = _as_batch(frames, model)
    out = model.forward(x, train=train, rng=rng)[:, 0]
    return float(out[0]) if np.ndim(frames) == 2 else out


def predict(model: Network, frames: np.ndarray, batch: int = 64) -> np.ndarray:
    """Eval-mode forward over many frames in fixed-size chunks."""
    outs = [model.forward(_as_batch(frames[i:i + batch], model)) for i in range(0, len(frames), batch)]
    out = np.concatenate(outs)
    return out[:, 0]


def _as_batch(frames, model: Network) -> np.ndarray:
    x = np.asarray(frames)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected single-channel frames, got {np.shape(frames)}")
    dtype = model.params()[0].weights.dtype
    return x.astype(dtype, copy=False)
