"""RMSE, Pearson CC and Lin's CCC over prediction/label series.

All moments are population (1/n) moments so CC and CCC are tied by
``ccc = cc * 2*sx*sy / (sx**2 + sy**2 + (mx - my)**2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateSeriesError(ValueError):
    """A correlation was requested on series without enough variance."""


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    cc: float
    ccc: float
    n: int
    degenerate: bool = False


def _pair(pred, labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} predictions vs {y.size} labels")
    if x.size == 0:
        raise ValueError("empty series")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("series contain non-finite values")
    return x, y


def _moments(x, y):
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    return mx, my, np.mean(dx * dx), np.mean(dy * dy), np.mean(dx * dy)


def rmse(pred, labels) -> float:
    x, y = _pair(pred, labels)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def pearson_cc(pred, labels) -> float:
    x, y = _pair(pred, labels)
    _, _, vx, vy, cov = _moments(x, y)
    if vx == 0 or vy == 0:
        raise DegenerateSeriesError("Pearson CC undefined: a series has zero variance")
    return float(np.clip(cov / np.sqrt(vx * vy), -1.0, 1.0))


def lin_ccc(pred, labels) -> float:
    x, y = _pair(pred, labels)
    mx, my, vx, vy, cov = _moments(x, y)
    denom = vx + vy + (mx - my) ** 2
    if denom == 0:
        raise DegenerateSeriesError("CCC undefined: both series constant and equal")
    return float(2.0 * cov / denom)


def evaluate(pred, labels, degenerate_ok: bool = False) -> MetricsReport:
    """All three metrics for one pair.

    With ``degenerate_ok`` a constant series yields ``cc = ccc = 0`` and a
    ``degenerate`` flag instead of raising.
    """
    x, y = _pair(pred, labels)
    err = rmse(x, y)
    try:
        return MetricsReport(err, pearson_cc(x, y), lin_ccc(x, y), x.size)
    except DegenerateSeriesError:
        if not degenerate_ok:
            raise
        return MetricsReport(err, 0.0, 0.0, x.size, degenerate=True)


def concat_eval(pairs, degenerate_ok: bool = False) -> MetricsReport:
    """Metrics over the concatenation of all ``(pred, labels)`` sequences."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no sequences to evaluate")
    x = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p, _ in pairs])
    y = np.concatenate([np.asarray(l, dtype=np.float64).ravel() for _, l in pairs])
    return evaluate(x, y, degenerate_ok)
