"""Reference-based (PCC, SIM) and no-reference (Lipschitz) metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import N_CHANNELS, Q, sum_normalize
from .errors import (
    EmptyLevelError,
    IdenticalInputsError,
    InvalidParameterError,
    LengthMismatchError,
    NoValidVariantsError,
    ShapeMismatchError,
    ZeroBaselineError,
    ZeroVarianceError,
)


@dataclass(frozen=True)
class LevelStats:
    level: float
    mean: float
    std: float
    count: int

    def to_dict(self) -> dict:
        return {"level": self.level, "mean": self.mean, "std": self.std, "count": self.count}


@dataclass(frozen=True)
class MetricSeries:
    metric: str
    stats: tuple

    @property
    def means(self) -> list:
        return [s.mean for s in self.stats]

    @property
    def levels(self) -> list:
        return [s.level for s in self.stats]


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"shape {x.shape} != {y.shape}")
    return x, y


def pcc(x, y) -> float:
    """Pearson correlation of two maps over all pixels."""
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise ZeroVarianceError("PCC is undefined for a constant map")
    r = float(np.sum(dx * dy) / (sx * sy))
    return min(1.0, max(-1.0, r))


def sim(x, y) -> float:
    """Histogram intersection of the two maps seen as distributions."""
    x, y = _pair(x, y)
    return float(np.sum(np.minimum(sum_normalize(x), sum_normalize(y))))


def image_distance(x, x2) -> float:
    x, x2 = _pair(x, x2)
    d = x - x2
    return float(np.sqrt(np.sum(d * d)))


map_distance = image_distance


def lipschitz_ratio(x, x2, e, e2) -> float:
    num = map_distance(e, e2)
    den = image_distance(x, x2)
    if den == 0:
        raise IdenticalInputsError("distorted image equals the original")
    return num / den


def lipschitz_at_level(x, variants, e) -> float:
    """Largest ratio over the ``(x', e')`` variants of one distortion level.

    Variants whose image equals ``x`` are skipped.
    """
    best = None
    for x2, e2 in variants:
        try:
            r = lipschitz_ratio(x, x2, e, e2)
        except IdenticalInputsError:
            continue
        best = r if best is None else max(best, r)
    if best is None:
        raise NoValidVariantsError("no variant differs from the original image")
    return best


def theoretical_radius(width, height, n_channels=N_CHANNELS, q=Q) -> float:
    if width <= 0 or height <= 0 or n_channels <= 0 or q < 0:
        raise InvalidParameterError("radius needs positive sizes and q >= 0")
    return math.sqrt(n_channels) * q * math.sqrt(width * height)


def stability_series(means) -> list:
    """Relative change in percent between consecutive level means.

    A pair of zero means counts as no change; a zero mean followed by a
    non-zero one raises :class:`ZeroBaselineError`.
    """
    means = [float(m) for m in means]
    if len(means) < 2:
        raise LengthMismatchError("stability needs at least two levels")
    out = []
    for a, b in zip(means, means[1:]):
        if a == 0:
            if b == 0:
                out.append(0.0)
                continue
            raise ZeroBaselineError("stability is undefined after a zero mean")
        out.append(abs(a - b) / abs(a) * 100.0)
    return out


def consensus(a, b) -> float:
    """Pearson correlation between two per-level mean sequences."""
    ma = a.means if isinstance(a, MetricSeries) else list(a)
    mb = b.means if isinstance(b, MetricSeries) else list(b)
    if len(ma) != len(mb):
        raise LengthMismatchError(f"series lengths differ: {len(ma)} vs {len(mb)}")
    if len(ma) < 2:
        raise LengthMismatchError("consensus needs at least two levels")
    return pcc(np.asarray(ma, dtype=np.float64), np.asarray(mb, dtype=np.float64))


def aggregate(values, level: float = 0.0) -> LevelStats:
    """Mean and population standard deviation of one level's samples."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise EmptyLevelError(f"no samples at level {level}")
    return LevelStats(float(level), float(v.mean()), float(v.std()), int(v.size))
