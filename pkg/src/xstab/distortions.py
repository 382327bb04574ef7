"""Seeded image degradations: additive noise, blur, brightness, perspective.

Every generator is a pure function of its arguments. Random families take an
integer seed and build a fresh ``numpy.random.Generator`` (PCG64) from it, so
a corpus can be regenerated bit-for-bit from the manifest seeds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import ndtri

from .core import Q, as_image, ensure_dir, save_image
from .errors import DegenerateQuadError, InvalidParameterError

FAMILIES = ("noise", "blur", "brightness", "perspective")
ORIENTATIONS = ("top", "right", "bottom", "left")

# default grids of the evaluation protocol
NOISE_LEVELS = tuple(range(25, 201, 25))
BRIGHTNESS_LEVELS = tuple(range(25, 201, 25))
BLUR_SIGMAS = (1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0, 6.0)
BLUR_MASKS = (5, 7, 9, 11)
PERSPECTIVE_LEVELS = tuple(range(1, 11))

_MASK64 = (1 << 64) - 1


def _check_magnitude(k, name="k"):
    if not (np.isfinite(k) and 0 < k <= Q):
        raise InvalidParameterError(f"{name} must lie in (0, 255], got {k}")


# ---------------------------------------------------------------------------
# truncated Gaussian shifts


def sample_shifts(k: float, n: int, rng: np.random.Generator, return_draws: bool = False):
    """Draw ``n`` shifts from N(0, (k/2)^2) by inverse-CDF sampling, redrawing
    any value with ``|alpha| > k``.

    With ``return_draws=True`` the total number of raw draws consumed is
    returned alongside the accepted shifts.
    """
    _check_magnitude(k)
    sigma = k / 2.0
    out = np.empty(n, dtype=np.float64)
    pending = np.arange(n)
    draws = 0
    while pending.size:
        z = rng.random(pending.size)
        draws += pending.size
        alpha = sigma * ndtri(z)
        ok = np.abs(alpha) <= k
        out[pending[ok]] = alpha[ok]
        pending = pending[~ok]
    if return_draws:
        return out, draws
    return out


def truncated_gaussian_shift(k: float, rng: np.random.Generator) -> float:
    return float(sample_shifts(k, 1, rng)[0])


def _round_clamp(values: np.ndarray) -> np.ndarray:
    # round half up so a uniform real shift stays uniform after quantization
    return np.clip(np.floor(values + 0.5), 0, Q).astype(np.uint8)


def add_gaussian_noise(img, k: float, seed: int) -> np.ndarray:
    """One shift per pixel, shared by the three channels, then clamped."""
    img = as_image(img)
    _check_magnitude(k)
    rng = np.random.default_rng(seed)
    h, w, _ = img.shape
    alpha = sample_shifts(k, h * w, rng).reshape(h, w, 1)
    return _round_clamp(img.astype(np.float64) + alpha)


def apply_brightness(img, shift: float) -> np.ndarray:
    img = as_image(img)
    return _round_clamp(img.astype(np.float64) + shift)


def brightness_shift(img, beta: float, seed: int) -> np.ndarray:
    """Add a single truncated-Gaussian shift to every pixel and channel."""
    _check_magnitude(beta, "beta")
    rng = np.random.default_rng(seed)
    return apply_brightness(img, truncated_gaussian_shift(beta, rng))


# ---------------------------------------------------------------------------
# blur


def _check_blur(size, sigma):
    if int(size) != size or size < 3 or size % 2 == 0:
        raise InvalidParameterError(f"mask size must be odd and >= 3, got {size}")
    if not (np.isfinite(sigma) and sigma > 0):
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    _check_blur(size, sigma)
    r = int(size) // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def gaussian_blur(img, size: int, sigma: float) -> np.ndarray:
    """Per-channel convolution with reflected borders, rounded and clamped."""
    img = as_image(img)
    g = gaussian_kernel(size, sigma)
    src = img.astype(np.float64)
    out = np.empty_like(src)
    for ch in range(src.shape[2]):
        # symmetric kernel: correlation equals convolution
        out[:, :, ch] = ndimage.correlate(src[:, :, ch], g, mode="reflect")
    return _round_clamp(out)


# ---------------------------------------------------------------------------
# perspective


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    scale = max(1.0, float(np.abs(pts).max()))
    for skip in range(4):
        a, b, c = (pts[i] for i in range(4) if i != skip)
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) <= tol * scale * scale:
            return True
    return False


def solve_homography(src, dst) -> np.ndarray:
    """Exact 4-point homography with ``H[2, 2] = 1`` (8x8 linear solve)."""
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    if _has_collinear_triple(src) or _has_collinear_triple(dst):
        raise DegenerateQuadError("three of the four points are collinear")
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateQuadError("singular homography system") from exc
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(H, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = np.c_[pts, np.ones(len(pts))] @ np.asarray(H).T
    return hom[:, :2] / hom[:, 2:3]


def trapezoid(width: int, height: int, orientation: str, level: float) -> tuple[np.ndarray, np.ndarray]:
    """Source corners and the destination trapezoid for one orientation.

    Corners are pixel centres ordered top-left, top-right, bottom-right,
    bottom-left. The narrow side is inset by ``round(level * edge / 40)``
    pixels at each of its two corners.
    """
    if orientation not in ORIENTATIONS:
        raise InvalidParameterError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")
    if not (np.isfinite(level) and level >= 0):
        raise InvalidParameterError(f"zoom level must be >= 0, got {level}")
    x1, y1 = width - 1.0, height - 1.0
    src = np.array([[0, 0], [x1, 0], [x1, y1], [0, y1]], dtype=np.float64)
    dst = src.copy()
    if orientation in ("top", "bottom"):
        d = int(np.floor(level * width / 40.0 + 0.5))
        if 2 * d >= width:
            raise DegenerateQuadError(f"inset {d} px collapses an edge of length {width}")
        rows = (0, 1) if orientation == "top" else (3, 2)
        dst[rows[0], 0] += d
        dst[rows[1], 0] -= d
    else:
        d = int(np.floor(level * height / 40.0 + 0.5))
        if 2 * d >= height:
            raise DegenerateQuadError(f"inset {d} px collapses an edge of length {height}")
        rows = (1, 2) if orientation == "right" else (0, 3)
        dst[rows[0], 1] += d
        dst[rows[1], 1] -= d
    return src, dst


def warp_bilinear(img, H, tol: float = 1e-6) -> np.ndarray:
    """Warp by ``H`` (source -> target) using inverse mapping.

    Target pixels whose preimage falls outside the source are black.
    """
    img = as_image(img)
    h, w, _ = img.shape
    Hinv = np.linalg.inv(H)
    vv, uu = np.mgrid[0:h, 0:w]
    pts = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    sp = apply_homography(Hinv, pts)
    x, y = sp[:, 0], sp[:, 1]
    inside = (x >= -tol) & (x <= w - 1 + tol) & (y >= -tol) & (y <= h - 1 + tol)
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    src = img.astype(np.float64)
    val = (
        src[y0, x0] * (1 - fx) * (1 - fy)
        + src[y0, x1] * fx * (1 - fy)
        + src[y1, x0] * (1 - fx) * fy
        + src[y1, x1] * fx * fy
    )
    val[~inside] = 0.0
    return _round_clamp(val).reshape(h, w, 3)


def perspective_distort(img, orientation: str, level: float) -> np.ndarray:
    img = as_image(img)
    h, w, _ = img.shape
    src, dst = trapezoid(w, h, orientation, level)
    if np.array_equal(src, dst):
        return img.copy()
    return warp_bilinear(img, solve_homography(src, dst))


# ---------------------------------------------------------------------------
# corpus generation


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _id64(image_id) -> int:
    if isinstance(image_id, (int, np.integer)):
        return int(image_id) & _MASK64
    digest = hashlib.blake2b(str(image_id).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, image_id, level_index: int, variant_index: int) -> int:
    """Fold (seed, image id, level, variant) into one 64-bit seed."""
    h = splitmix64(int(seed) & _MASK64)
    for part in (_id64(image_id), level_index, variant_index):
        h = splitmix64(h ^ (int(part) & _MASK64))
    return h


def _severity(family, level):
    if isinstance(level, (tuple, list)):
        return level[1]
    return level


@dataclass(frozen=True)
class DistortionSpec:
    """One distortion family with its level grid.

    ``levels`` holds the severity parameter of each level: ``k`` for noise,
    ``beta`` for brightness, ``sigma`` for blur and the zoom ``l`` for
    perspective. Blur levels may also be explicit ``(mask, sigma)`` pairs and
    perspective levels explicit ``(orientation, l)`` pairs. Otherwise the
    deterministic families cycle over ``masks`` / ``orientations`` across
    the variants of a level.
    """

    family: str
    levels: tuple
    variants: int = 5
    seed: int = 0
    masks: tuple = BLUR_MASKS
    orientations: tuple = ORIENTATIONS
    name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(tuple(l) if isinstance(l, list) else l for l in self.levels))
        object.__setattr__(self, "masks", tuple(self.masks))
        object.__setattr__(self, "orientations", tuple(self.orientations))
        self.validate()

    @property
    def label(self) -> str:
        return self.name or self.family

    def validate(self):
        if self.family not in FAMILIES:
            raise InvalidParameterError(f"unknown family {self.family!r}")
        if not self.levels:
            raise InvalidParameterError("levels must be non-empty")
        if int(self.variants) != self.variants or self.variants < 1:
            raise InvalidParameterError("variants per level must be >= 1")
        sev = [_severity(self.family, l) for l in self.levels]
        if any(b <= a for a, b in zip(sev, sev[1:])):
            raise InvalidParameterError("levels must be strictly increasing in severity")
        for level in self.levels:
            if self.family in ("noise", "brightness"):
                _check_magnitude(level)
            elif self.family == "blur":
                if isinstance(level, tuple):
                    _check_blur(*level)
                else:
                    for s in self.masks:
                        _check_blur(s, level)
            else:
                orient, l = level if isinstance(level, tuple) else (self.orientations[0], level)
                if orient not in ORIENTATIONS or not (l >= 0):
                    raise InvalidParameterError(f"bad perspective level {level!r}")
        if self.family == "blur" and not self.masks:
            raise InvalidParameterError("blur needs at least one mask size")
        if self.family == "perspective":
            if not self.orientations or any(o not in ORIENTATIONS for o in self.orientations):
                raise InvalidParameterError(f"orientations must be drawn from {ORIENTATIONS}")

    def level_value(self, index: int) -> float:
        return float(_severity(self.family, self.levels[index]))

    def to_dict(self) -> dict:
        d = {
            "family": self.family,
            "levels": [list(l) if isinstance(l, tuple) else l for l in self.levels],
            "variants": self.variants,
            "seed": self.seed,
        }
        if self.family == "blur":
            d["masks"] = list(self.masks)
        if self.family == "perspective":
            d["orientations"] = list(self.orientations)
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionSpec":
        kw = dict(d)
        if "levels" not in kw:
            kw["levels"] = default_levels(kw["family"])
        return cls(**kw)


def default_levels(family: str) -> tuple:
    return {
        "noise": NOISE_LEVELS,
        "brightness": BRIGHTNESS_LEVELS,
        "blur": BLUR_SIGMAS,
        "perspective": PERSPECTIVE_LEVELS,
    }[family]


def default_spec(family: str, seed: int = 0, variants: int | None = None) -> DistortionSpec:
    m = {"noise": 5, "brightness": 5, "blur": 4, "perspective": 4}[family]
    return DistortionSpec(family, default_levels(family), variants or m, seed)


def distort_variant(img, spec: DistortionSpec, image_id, level_index: int, variant_index: int):
    """Produce a single corpus entry. Returns ``(image, derived_seed)``."""
    level = spec.levels[level_index]
    seed = derive_seed(spec.seed, image_id, level_index, variant_index)
    if spec.family == "noise":
        out = add_gaussian_noise(img, level, seed)
    elif spec.family == "brightness":
        out = brightness_shift(img, level, seed)
    elif spec.family == "blur":
        if isinstance(level, tuple):
            size, sigma = level
        else:
            size, sigma = spec.masks[variant_index % len(spec.masks)], level
        out = gaussian_blur(img, size, sigma)
    else:
        if isinstance(level, tuple):
            orient, l = level
        else:
            orient, l = spec.orientations[variant_index % len(spec.orientations)], level
        out = perspective_distort(img, orient, l)
    return out, seed


def generate_distortion_set(img, spec: DistortionSpec, image_id=0) -> list:
    """All ``len(levels) * variants`` distorted copies of one image.

    Returns a list of ``(level_index, variant_index, image)`` in level-major
    order.
    """
    img = as_image(img)
    out = []
    for li in range(len(spec.levels)):
        for vi in range(spec.variants):
            d, _ = distort_variant(img, spec, image_id, li, vi)
            out.append((li, vi, d))
    return out


def _level_dirname(level) -> str:
    if isinstance(level, tuple):
        return "_".join(_level_dirname(p) for p in level)
    return f"{level:g}" if isinstance(level, (int, float)) else str(level)


def write_corpus(images: dict, specs: Sequence[DistortionSpec], out_dir) -> dict:
    """Write ``<out>/<image-id>/<family>/<level>/<variant>.png`` plus
    ``manifest.json``; returns the manifest."""
    out_dir = ensure_dir(out_dir)
    entries = []
    for image_id in sorted(images):
        img = as_image(images[image_id])
        for spec in specs:
            for li, level in enumerate(spec.levels):
                level_dir = ensure_dir(out_dir / str(image_id) / spec.label / _level_dirname(level))
                for vi in range(spec.variants):
                    d, seed = distort_variant(img, spec, image_id, li, vi)
                    path = level_dir / f"{vi}.png"
                    save_image(d, path)
                    entries.append(
                        {
                            "image_id": str(image_id),
                            "family": spec.family,
                            "level_index": li,
                            "level": list(level) if isinstance(level, tuple) else level,
                            "variant": vi,
                            "seed": seed,
                            "path": str(path.relative_to(out_dir)),
                            "sha256": hashlib.sha256(d.tobytes()).hexdigest(),
                        }
                    )
    manifest = {"specs": [s.to_dict() for s in specs], "entries": entries}
    (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
