"""Grayscale conversion, cropping, bicubic resampling, normalisation and PGM I/O.

Frames are 2-D float arrays with nominal range [0, 1].
"""

from __future__ import annotations

import math
from functools import lru_cache
from pathlib import Path

import numpy as np

HR_SIZE = 96
FACTORS = (3, 4, 6, 8, 12, 16)
NORM_EPS = 1e-6
LUMA = np.array([0.299, 0.587, 0.114])


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected a trailing RGB axis, got shape {rgb.shape}")
    return rgb @ LUMA


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; ``a=-0.5`` is Catmull-Rom."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=128)
def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` bicubic weights with edge clamping.

    When shrinking, the kernel is stretched by the reduction factor so it
    low-passes before decimation. Rows sum to one.
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = math.floor(center - support) + 1
        hi = math.ceil(center + support)
        taps = np.arange(lo, hi)
        w = cubic_kernel((taps - center) / stretch)
        idx = np.clip(taps, 0, n_in - 1)
        np.add.at(m[i], idx, w)
        m[i] /= m[i].sum()
    m.setflags(write=False)
    return m


def resize(frame: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bicubic resize: one pass along rows, then one along columns."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[-2:]
    return resample_matrix(h, height) @ frame @ resample_matrix(w, width).T


def lr_size(s: int) -> int:
    return math.ceil(HR_SIZE / s)


def check_factor(s: int) -> int:
    if s not in FACTORS:
        raise ValueError(f"downsampling factor {s} not in {FACTORS}")
    return s


def downsample(frame: np.ndarray, s: int) -> np.ndarray:
    check_factor(s)
    if frame.shape[-2:] != (HR_SIZE, HR_SIZE):
        raise ValueError(f"downsample expects a {HR_SIZE}x{HR_SIZE} frame, got {frame.shape}")
    n = lr_size(s)
    return resize(frame, n, n)


def upsample_bicubic(frame: np.ndarray, target: int = HR_SIZE) -> np.ndarray:
    return resize(frame, target, target)


def crop_resize_face(frame: np.ndarray, bbox: tuple[int, int, int, int]) -> np.ndarray:
    """Crop ``bbox = (x, y, w, h)`` and resample it to 96x96."""
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate bounding box {bbox}")
    H, W = frame.shape[:2]
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"bounding box {bbox} falls outside the {W}x{H} frame")
    if frame.ndim == 3:
        frame = to_grayscale(frame)
    return resize(frame[y:y + h, x:x + w], HR_SIZE, HR_SIZE)


def normalize(frame: np.ndarray, return_stats: bool = False):
    """Per-image mean subtraction and contrast (std) normalisation.

    Works on one ``(H, W)`` frame or a stack ``(N, H, W)``; statistics are
    always per image. Flat images map to zeros.
    """
    frame = np.asarray(frame, dtype=np.float64)
    mu = frame.mean(axis=(-2, -1), keepdims=True)
    centered = frame - mu
    sigma = np.maximum(np.sqrt(np.mean(centered * centered, axis=(-2, -1), keepdims=True)), NORM_EPS)
    flat = np.ptp(frame.reshape(*frame.shape[:-2], -1), axis=-1)[..., None, None] == 0
    out = np.where(flat, 0.0, centered / sigma)
    if frame.ndim == 2:
        mu, sigma = float(mu.item()), float(sigma.item())
    return (out, mu, sigma) if return_stats else out


def psnr(ref: np.ndarray, img: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(ref) - np.asarray(img)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# binary PGM


def write_pgm(path: str | Path, frame: np.ndarray, bits: int = 8) -> None:
    if bits not in (8, 16):
        raise ValueError("PGM depth must be 8 or 16 bits")
    maxval = (1 << bits) - 1
    q = np.rint(np.clip(frame, 0.0, 1.0) * maxval)
    data = q.astype(">u2" if bits == 16 else "u1").tobytes()
    h, w = frame.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + data)


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    pix = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    if pix.size != count:
        raise ValueError(f"{path}: truncated pixel data")
    return pix.reshape(h, w).astype(np.float64) / maxval
