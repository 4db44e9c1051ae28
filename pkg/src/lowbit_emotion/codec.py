"""Intra-frame block-DCT codec surrogate with an entropy-based rate estimate.

Frames enter as 8-bit samples (values in [0, 1] rounded to the 1/255 grid),
each block is transformed with an orthonormal type-II DCT, quantised with a
uniform step ``Q(qp) = 2**((qp - 4) / 6)`` in 8-bit units, and reconstructed
back onto the 8-bit grid. The DC coefficient's step is capped so flat blocks
always come back exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .imageops import check_factor

QP_MAX = 51
DEFAULT_HEADER_BITS = 256
DC_STEP_CAP = 4.0
DEFAULT_QP_GRID = (0, 8, 16, 24, 32, 40, 48)


@dataclass(frozen=True)
class CodecConfig:
    qp: int = 24
    block_size: int = 8
    header_bits: int = DEFAULT_HEADER_BITS

    def __post_init__(self):
        if not 0 <= self.qp <= QP_MAX:
            raise ValueError(f"qp must lie in [0, {QP_MAX}], got {self.qp}")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")


@dataclass(frozen=True)
class RDPoint:
    s: int
    qp: int
    bpp: float
    rmse: float
    cc: float
    ccc: float
    n: int = 0


def qstep(qp: int) -> float:
    return 2.0 ** ((qp - 4) / 6.0)


def _blocks(img: np.ndarray, b: int) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // b, b, w // b, b).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    nh, nw, b, _ = blocks.shape
    return blocks.transpose(0, 2, 1, 3).reshape(nh * b, nw * b)


def quantize_coefficients(frame: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Integer DCT symbols of shape ``(rows, cols, b, b)`` for an edge-padded frame."""
    b = cfg.block_size
    h, w = frame.shape
    pix = np.rint(np.clip(frame, 0.0, 1.0) * 255.0)
    pix = np.pad(pix, ((0, -h % b), (0, -w % b)), mode="edge")
    coef = dctn(_blocks(pix - 128.0, b), axes=(2, 3), norm="ortho")
    steps = _step_table(cfg)
    return np.rint(coef / steps).astype(np.int64)


def _step_table(cfg: CodecConfig) -> np.ndarray:
    q = qstep(cfg.qp)
    steps = np.full((cfg.block_size, cfg.block_size), q)
    steps[0, 0] = min(q, DC_STEP_CAP)
    return steps


def reconstruct(symbols: np.ndarray, shape: tuple[int, int], cfg: CodecConfig) -> np.ndarray:
    coef = symbols * _step_table(cfg)
    pix = _unblocks(idctn(coef, axes=(2, 3), norm="ortho")) + 128.0
    h, w = shape
    return np.clip(np.rint(pix[:h, :w]), 0, 255) / 255.0


def entropy_bits(symbols: np.ndarray) -> float:
    """Zeroth-order entropy of the symbol histogram times the symbol count."""
    symbols = np.asarray(symbols).ravel()
    if symbols.size == 0:
        return 0.0
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / symbols.size
    return float(-(counts * np.log2(p)).sum())


def bpp_estimate(symbols, pixel_count: int, header_bits: float = DEFAULT_HEADER_BITS) -> float:
    """Bits per pixel for one frame.

    ``symbols`` is one array or a sequence of independently coded streams
    (the codec passes DC and AC separately).
    """
    streams = [symbols] if isinstance(symbols, np.ndarray) else list(symbols)
    bits = sum(entropy_bits(s) for s in streams)
    return (bits + header_bits) / pixel_count


def encode_decode(frame: np.ndarray, cfg: CodecConfig = CodecConfig()) -> tuple[np.ndarray, float]:
    """Code one frame; returns the decoded frame and its estimated size in bits."""
    frame = np.asarray(frame, dtype=np.float64)
    sym = quantize_coefficients(frame, cfg)
    dc = sym[:, :, 0, 0]
    ac = sym.reshape(*sym.shape[:2], -1)[:, :, 1:]
    bits = bpp_estimate([dc, ac], 1, cfg.header_bits)
    return reconstruct(sym, frame.shape, cfg), bits


def rd_sweep(sequences, s: int, qp_list, model, header_bits: int = DEFAULT_HEADER_BITS) -> list[RDPoint]:
    """Evaluate a trained recognizer on coded LR video, one point per qp.

    ``model`` is anything with ``predict(inputs) -> valence``; it is only ever
    run forward.
    """
    from .data import make_inputs
    from .metrics import concat_eval

    check_factor(s)
    if not qp_list:
        raise ValueError("qp_list is empty")
    points = []
    for qp in qp_list:
        cfg = CodecConfig(qp=qp, header_bits=header_bits)
        pairs, bpps = [], []
        for seq in sequences:
            inputs, info = make_inputs(seq.frames, s, codec=cfg)
            bpps.extend(info["bpp"])
            pairs.append((model.predict(inputs), seq.valence))
        rep = concat_eval(pairs, degenerate_ok=True)
        points.append(RDPoint(s, qp, float(np.mean(bpps)), rep.rmse, rep.cc, rep.ccc, rep.n))
    return points
