"""Gaze fixation density maps built from recorded fixation points."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyFixationsError, FormatError, ImageIOError, InvalidParameterError


@dataclass(frozen=True)
class FixationSet:
    image_id: str
    points: np.ndarray  # (n, 2) of (u, v) = (column, row)
    width: int
    height: int
    allow_empty: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        if len(pts) == 0 and not self.allow_empty:
            raise EmptyFixationsError(f"no fixations for image {self.image_id!r}")
        u, v = pts[:, 0], pts[:, 1]
        if np.any((u < 0) | (u >= self.width) | (v < 0) | (v >= self.height)):
            raise InvalidParameterError(f"fixation outside the {self.width}x{self.height} image {self.image_id!r}")


def default_sigma(width: int) -> float:
    return width / 20.0


def gfdm(fixations: FixationSet, sigma: float | None = None) -> np.ndarray:
    """Sum of isotropic Gaussians on the fixations, divided by its maximum."""
    if sigma is None:
        sigma = default_sigma(fixations.width)
    if not (np.isfinite(sigma) and sigma > 0):
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    if len(fixations.points) == 0:
        raise EmptyFixationsError(f"no fixations for image {fixations.image_id!r}")
    u = np.arange(fixations.width, dtype=np.float64)
    v = np.arange(fixations.height, dtype=np.float64)
    acc = np.zeros((fixations.height, fixations.width))
    inv = 1.0 / (2.0 * sigma * sigma)
    # separable: exp(-(du^2 + dv^2) k) = exp(-du^2 k) * exp(-dv^2 k)
    for fu, fv in fixations.points:
        gu = np.exp(-((u - fu) ** 2) * inv)
        gv = np.exp(-((v - fv) ** 2) * inv)
        acc += np.outer(gv, gu)
    return acc / acc.max()


def load_fixations(path) -> dict:
    """Read fixations as ``{image_id: (n, 2) array}``.

    CSV needs an ``image_id,u,v`` header. JSON is either one object
    ``{"image_id": ..., "points": [[u, v], ...]}`` or a list of them.
    """
    path = Path(path)
    out: dict = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        records = data if isinstance(data, list) else [data]
        for rec in records:
            try:
                pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 2)
                out.setdefault(str(rec["image_id"]), []).append(pts)
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: malformed record {rec!r}") from exc
    else:
        reader = csv.DictReader(text.splitlines())
        if reader.fieldnames is None or not {"image_id", "u", "v"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: CSV header must contain image_id,u,v")
        for row in reader:
            try:
                pt = np.array([[float(row["u"]), float(row["v"])]])
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}: bad row {row!r}") from exc
            out.setdefault(row["image_id"], []).append(pt)
    return {k: np.concatenate(v, axis=0) for k, v in out.items()}


def write_fixations_csv(fixations: dict, path) -> None:
    lines = ["image_id,u,v"]
    for image_id in sorted(fixations):
        for u, v in np.asarray(fixations[image_id]).reshape(-1, 2):
            lines.append(f"{image_id},{u:g},{v:g}")
    Path(path).write_text("\n".join(lines) + "\n")
