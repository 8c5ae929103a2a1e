"""Error metrics. ``mse`` keeps the 1/(2m) convention; ``mse_conventional`` is the plain mean."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ArgumentError


def _pair(pred, target):
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(target, dtype=float).ravel()
    if p.shape != t.shape:
        raise ArgumentError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ArgumentError("metrics need at least one sample")
    return p, t


def mse(pred, target) -> float:
    """(1/2m) * sum((pred - target)**2)."""
    p, t = _pair(pred, target)
    d = p - t
    return float(d @ d) / (2.0 * d.size)


def mse_conventional(pred, target) -> float:
    p, t = _pair(pred, target)
    d = p - t
    return float(d @ d) / d.size


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.abs(p - t).sum()) / p.size


@dataclass(frozen=True)
class Metrics:
    mse: float
    mae: float
    n: int
    mse_conventional: float
    denorm_mse: Optional[float] = None
    denorm_mae: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"mse": self.mse, "mae": self.mae, "n": self.n,
             "mse_conventional": self.mse_conventional}
        if self.denorm_mse is not None:
            d["denorm_mse"] = self.denorm_mse
            d["denorm_mae"] = self.denorm_mae
        return d


def compute_metrics(pred, target) -> Metrics:
    p, t = _pair(pred, target)
    return Metrics(mse(p, t), mae(p, t), int(p.size), mse_conventional(p, t))
