"""Corpora: an AVEC-style on-disk loader, a synthetic face generator, and LR/HR pair fabrication.

On-disk layout shared by both sources::

    <root>/<seq_id>/frame_000000.pgm
    <root>/<seq_id>/labels.csv        # header: frame,valence
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import CodecConfig, encode_decode
from .imageops import HR_SIZE, check_factor, downsample, normalize, read_pgm, upsample_bicubic, write_pgm


class CorpusError(ValueError):
    """Malformed corpus on disk; the message names the offending file or row."""


@dataclass
class LabeledSequence:
    id: str
    frames: np.ndarray  # (N, 96, 96) in [0, 1]
    valence: np.ndarray  # (N,) in [-1, 1]

    def __post_init__(self):
        if len(self.frames) != len(self.valence):
            raise CorpusError(f"{self.id}: {len(self.frames)} frames but {len(self.valence)} labels")
        if np.any(np.abs(self.valence) > 1):
            raise CorpusError(f"{self.id}: valence outside [-1, 1]")

    def __len__(self):
        return len(self.valence)


@dataclass(frozen=True)
class SyntheticSpec:
    n_sequences: int = 27
    frames_per_sequence: int = 300
    seed: int = 0
    noise_level: float = 0.02
    jitter: float = 1.5  # peak head displacement in pixels


# ---------------------------------------------------------------------------
# synthetic faces

MOUTH_HALF_WIDTH = 15.0
MOUTH_DEPTH = 7.0
MOUTH_THICKNESS = 2.2


@dataclass
class FaceStyle:
    """Per-frame rendering parameters other than valence."""

    cx: float = 48.0
    cy: float = 50.0
    head_w: float = 30.0
    head_h: float = 38.0
    skin: float = 0.68
    background: float = 0.22
    eye_gap: float = 13.0
    eye_open: float = 1.0
    mouth_y: float = 70.0
    gain: float = 1.0


def mouth_box(style: FaceStyle) -> tuple[slice, slice]:
    """Rows/cols a mouth of any valence can touch (with a soft-edge margin)."""
    pad = MOUTH_THICKNESS + 2
    r0 = int(np.floor(style.mouth_y - MOUTH_DEPTH - pad))
    r1 = int(np.ceil(style.mouth_y + MOUTH_DEPTH + pad)) + 1
    c0 = int(np.floor(style.cx - MOUTH_HALF_WIDTH - pad))
    c1 = int(np.ceil(style.cx + MOUTH_HALF_WIDTH + pad)) + 1
    return slice(r0, r1), slice(c0, c1)


def render_face(valence: float, style: FaceStyle = FaceStyle()) -> np.ndarray:
    """Schematic 96x96 face: oval head, two eyes, nose, and a mouth whose bend tracks valence.

    Positive valence bends the mouth centre down (a smile), negative bends it up.
    """
    yy, xx = np.mgrid[0:HR_SIZE, 0:HR_SIZE].astype(np.float64)
    img = np.full((HR_SIZE, HR_SIZE), style.background) + 0.04 * (yy / HR_SIZE)

    r = np.sqrt(((xx - style.cx) / style.head_w) ** 2 + ((yy - style.cy) / style.head_h) ** 2)
    head = np.clip((1.0 - r) * style.head_w, 0.0, 1.0)
    shade = style.skin - 0.08 * r
    img = img * (1 - head) + shade * head

    for side in (-1, 1):
        ex, ey = style.cx + side * style.eye_gap, style.cy - 10.0
        brow = np.exp(-(((xx - ex) / 6.0) ** 2) - ((yy - (ey - 7.0)) / 1.2) ** 2)
        img -= 0.25 * brow
        if style.eye_open > 0.05:
            er = ((xx - ex) / 5.0) ** 2 + ((yy - ey) / (2.8 * style.eye_open)) ** 2
            img -= 0.45 * np.clip(1.0 - er, 0.0, 1.0) ** 0.5

    nose = np.exp(-(((xx - style.cx) / 1.5) ** 2)) * ((yy > style.cy - 4) & (yy < style.cy + 8))
    img -= 0.12 * nose

    u = (xx - style.cx) / MOUTH_HALF_WIDTH
    inside = np.clip(1.0 - np.abs(u), 0.0, None)
    curve_y = style.mouth_y + MOUTH_DEPTH * valence * (1.0 - u * u)
    dist = np.abs(yy - curve_y)
    stroke = np.clip(1.0 - dist / MOUTH_THICKNESS, 0.0, 1.0) * np.clip(inside * 6.0, 0.0, 1.0)
    img -= 0.4 * stroke

    return np.clip(img * style.gain, 0.0, 1.0)


def _smooth_signal(rng: np.random.Generator, n: int, periods=(40, 240), k: int = 3) -> np.ndarray:
    t = np.arange(n)
    sig = np.zeros(n)
    for _ in range(k):
        period = rng.uniform(*periods)
        sig += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    return sig


def synthetic_valence(rng: np.random.Generator, n: int) -> np.ndarray:
    v = _smooth_signal(rng, n)
    v -= v.mean()
    peak = np.abs(v).max()
    v = v / peak * rng.uniform(0.7, 1.0) if peak > 0 else v
    return v + rng.uniform(-0.3, 0.3) * (1 - np.abs(v).max())


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> list[LabeledSequence]:
    root = np.random.default_rng(spec.seed)
    seqs = []
    for k in range(spec.n_sequences):
        rng = np.random.default_rng(root.integers(2**63))
        n = spec.frames_per_sequence
        v = synthetic_valence(rng, n)
        base = FaceStyle(
            head_w=rng.uniform(27, 32), head_h=rng.uniform(35, 40), skin=rng.uniform(0.6, 0.75),
            background=rng.uniform(0.15, 0.3), eye_gap=rng.uniform(12, 14.5), mouth_y=rng.uniform(68, 72),
        )
        jx = spec.jitter * _smooth_signal(rng, n, (30, 120), 2) / 2
        jy = spec.jitter * _smooth_signal(rng, n, (30, 120), 2) / 2
        gain = 1.0 + 0.05 * _smooth_signal(rng, n, (60, 200), 1)
        blink_phase = rng.uniform(0, 2 * np.pi)
        frames = np.empty((n, HR_SIZE, HR_SIZE))
        for i in range(n):
            blink = 0.5 * (1 + np.cos(2 * np.pi * i / 37.0 + blink_phase))
            style = FaceStyle(
                cx=48.0 + jx[i], cy=50.0 + jy[i], head_w=base.head_w, head_h=base.head_h, skin=base.skin,
                background=base.background, eye_gap=base.eye_gap, eye_open=max(0.0, 1.0 - blink ** 8),
                mouth_y=base.mouth_y + jy[i], gain=gain[i],
            )
            img = render_face(v[i], style)
            if spec.noise_level > 0:
                img = np.clip(img + rng.normal(0.0, spec.noise_level, img.shape), 0.0, 1.0)
            frames[i] = img
        seqs.append(LabeledSequence(f"seq{k:03d}", frames, np.clip(v, -1.0, 1.0)))
    return seqs


# ---------------------------------------------------------------------------
# disk I/O


def write_corpus(seqs, root: str | Path, bits: int = 8) -> Path:
    root = Path(root)
    for seq in seqs:
        d = root / seq.id
        d.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            write_pgm(d / f"frame_{i:06d}.pgm", frame, bits)
        with open(d / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "valence"])
            for i, v in enumerate(seq.valence):
                w.writerow([i, repr(float(v))])
    return root


def _read_labels(path: Path) -> np.ndarray:
    if not path.exists():
        raise CorpusError(f"{path}: missing labels file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame", "valence"]:
            raise CorpusError(f"{path}: header must be 'frame,valence', got {header}")
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                idx, val = int(row[0]), float(row[1])
            except (ValueError, IndexError):
                raise CorpusError(f"{path}:{lineno}: unparseable row {row}") from None
            if idx != len(values):
                raise CorpusError(f"{path}:{lineno}: expected frame index {len(values)}, got {idx}")
            if not np.isfinite(val) or abs(val) > 1:
                raise CorpusError(f"{path}:{lineno}: valence {val} outside [-1, 1]")
            values.append(val)
    return np.array(values)


def load_avec_like(root: str | Path) -> list[LabeledSequence]:
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"{root}: corpus directory not found")
    seqs = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        labels = _read_labels(d / "labels.csv")
        files = sorted(d.glob("frame_*.pgm"))
        if len(files) != len(labels):
            raise CorpusError(f"{d}: {len(files)} frame files but {len(labels)} labels")
        frames = np.empty((len(files), HR_SIZE, HR_SIZE))
        for i, f in enumerate(files):
            if f.name != f"frame_{i:06d}.pgm":
                raise CorpusError(f"{f}: expected frame_{i:06d}.pgm")
            try:
                img = read_pgm(f)
            except ValueError as exc:
                raise CorpusError(f"{f}: {exc}") from None
            if img.shape != (HR_SIZE, HR_SIZE):
                raise CorpusError(f"{f}: frame is {img.shape[1]}x{img.shape[0]}, expected {HR_SIZE}x{HR_SIZE}")
            frames[i] = img
        seqs.append(LabeledSequence(d.name, frames, labels))
    if not seqs:
        raise CorpusError(f"{root}: no sequences found")
    return seqs


def split_sequences(seqs, val_fraction: float = 0.1, test_fraction: float = 0.0, seed: int = 0):
    """Whole-sequence train/val/test split (never splits inside a sequence)."""
    order = np.random.default_rng(seed).permutation(len(seqs))
    n_val = max(1, int(round(val_fraction * len(seqs))))
    n_test = int(round(test_fraction * len(seqs)))
    test = [seqs[i] for i in sorted(order[:n_test])]
    val = [seqs[i] for i in sorted(order[n_test:n_test + n_val])]
    train = [seqs[i] for i in sorted(order[n_test + n_val:])]
    if not train:
        raise CorpusError("split left no training sequences")
    return train, val, test


# ---------------------------------------------------------------------------
# model inputs


@dataclass
class Pairs:
    inputs: np.ndarray  # (N, 96, 96) normalised
    targets: np.ndarray  # (N, 96, 96) HR in input-normalised units, or (N,) valence
    log: list = field(default_factory=list)  # (seq_id, frame, s, qp)
    stats: tuple | None = None  # per-input (mu, sigma), shape (N, 1, 1) each


def make_inputs(frames: np.ndarray, s: int | None, codec: CodecConfig | None = None):
    """HR frames -> [downsample(s)] -> [code(qp)] -> bicubic 96x96 -> normalised model input.

    ``s=None`` is the HR path and never touches the resampler. Returns the
    inputs and an info dict with the LR intermediates' shape, per-frame bpp
    (coded path only), the stages run, and normalisation stats.
    """
    frames = np.asarray(frames, dtype=np.float64)
    stages = []
    info = {"bpp": []}
    x = frames
    if s is not None:
        check_factor(s)
        x = downsample(x, s)
        stages.append("downsample")
        info["lr_shape"] = x.shape[-2:]
        if codec is not None:
            coded = np.empty_like(x)
            for i, f in enumerate(x):
                coded[i], bits = encode_decode(f, codec)
                info["bpp"].append(bits / f.size)
            x = coded
            stages.append("codec")
        x = upsample_bicubic(x)
        stages.append("upsample")
    elif codec is not None:
        raise ValueError("coding is only simulated on downsampled frames")
    x, mu, sigma = normalize(x, return_stats=True)
    stages.append("normalize")
    info["stages"] = tuple(stages)
    info["mu"], info["sigma"] = mu, sigma
    return x, info


def make_pairs(seq: LabeledSequence, s: int | None, qp: int | None = None, target: str = "valence") -> Pairs:
    """Inputs and targets for one sequence.

    ``target="hr"`` gives the HR frame expressed in the input's normalisation
    (so an identity map scores the bicubic baseline); ``"valence"`` gives labels.
    """
    codec = None if qp is None else CodecConfig(qp=qp)
    inputs, info = make_inputs(seq.frames, s, codec)
    if target == "hr":
        tgt = (seq.frames - info["mu"]) / info["sigma"]
    elif target == "valence":
        tgt = np.asarray(seq.valence, dtype=np.float64)
    else:
        raise ValueError(f"unknown target {target!r}")
    log = [(seq.id, i, s, qp, info["stages"]) for i in range(len(seq))]
    return Pairs(inputs, tgt, log, (info["mu"], info["sigma"]))


def concat_pairs(parts: list[Pairs]) -> Pairs:
    return Pairs(
        np.concatenate([p.inputs for p in parts]),
        np.concatenate([p.targets for p in parts]),
        [e for p in parts for e in p.log],
        (np.concatenate([p.stats[0] for p in parts]), np.concatenate([p.stats[1] for p in parts])),
    )
