"""Raster and map primitives shared by the other modules.

Conventions used across the package:

* an *image* is a ``uint8`` array of shape ``(H, W, 3)``;
* a *saliency map* is a ``float64`` array of shape ``(H, W)``;
* an *activation tensor* is a ``float64`` array of shape ``(C, h, w)``.
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import (
    EmptyInputError,
    FormatError,
    ImageIOError,
    NegativeValueError,
    NonFiniteInputError,
    ZeroMassError,
)

Q = 255
N_CHANNELS = 3


def as_image(arr) -> np.ndarray:
    """Validate ``arr`` as an 8-bit RGB image and return it as ``uint8``."""
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != N_CHANNELS or a.shape[0] < 1 or a.shape[1] < 1:
        raise FormatError(f"expected an (H, W, 3) image, got shape {a.shape}")
    if a.dtype != np.uint8:
        if not np.issubdtype(a.dtype, np.integer):
            raise FormatError(f"image dtype must be integral, got {a.dtype}")
        if a.min() < 0 or a.max() > Q:
            raise FormatError("image intensities must lie in [0, 255]")
        a = a.astype(np.uint8)
    return a


def as_map(arr) -> np.ndarray:
    m = np.asarray(arr, dtype=np.float64)
    if m.ndim != 2:
        raise FormatError(f"expected a 2-D map, got shape {m.shape}")
    if m.size == 0:
        raise EmptyInputError("map is empty")
    return m


def _read_ppm(path: Path, raw: bytes) -> np.ndarray:
    # P6 header: magic, width, height, maxval, separated by whitespace/comments
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(raw):
            raise FormatError(f"{path}: truncated PPM header")
        c = raw[pos : pos + 1]
        if c == b"#":
            pos = raw.index(b"\n", pos) + 1 if b"\n" in raw[pos:] else len(raw)
        elif c.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end : end + 1].isspace():
                end += 1
            try:
                fields.append(int(raw[pos:end]))
            except ValueError as exc:
                raise FormatError(f"{path}: bad PPM header") from exc
            pos = end
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if maxval < 1 or maxval > 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    n = width * height * N_CHANNELS
    data = raw[pos : pos + n]
    if width < 1 or height < 1 or len(data) != n:
        raise FormatError(f"{path}: PPM raster size does not match header")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, N_CHANNELS).copy()


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM (P6) file.

    Grayscale PNGs are replicated to three channels. Anything else
    (palette, alpha, 16-bit, JPEG, ...) raises :class:`FormatError`.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    if raw[:2] == b"P6":
        return _read_ppm(path, raw)
    try:
        with PILImage.open(io.BytesIO(raw)) as im:
            if im.format != "PNG":
                raise FormatError(f"{path}: unsupported format {im.format}")
            if im.mode == "RGB":
                data = np.array(im, dtype=np.uint8)
            elif im.mode == "L":
                g = np.array(im, dtype=np.uint8)
                data = np.repeat(g[:, :, None], N_CHANNELS, axis=2)
            else:
                raise FormatError(f"{path}: unsupported mode {im.mode} (need 8-bit RGB or grayscale)")
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: cannot decode image") from exc
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return np.ascontiguousarray(data)


def save_image(img, path) -> None:
    """Write ``img`` as PNG, or as PPM P6 when the suffix is ``.ppm``."""
    img = as_image(img)
    path = Path(path)
    h, w, _ = img.shape
    try:
        if path.suffix.lower() == ".ppm":
            path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())
        else:
            PILImage.fromarray(img, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc


def save_npy(arr, path) -> None:
    try:
        np.save(Path(path), np.ascontiguousarray(arr), allow_pickle=False)
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc


def load_npy(path) -> np.ndarray:
    try:
        arr = np.load(Path(path), allow_pickle=False)
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if arr.dtype not in (np.float64, np.uint8):
        raise FormatError(f"{path}: dtype {arr.dtype} not supported (float64 or uint8)")
    return arr


def _axis_weights(n_out: int, n_in: int):
    # half-pixel centres, edge samples clamped
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = x - i0
    return i0, i1, f


def resize_bilinear(m, width: int, height: int) -> np.ndarray:
    """Bilinear resampling of a 2-D map to ``height x width``.

    Pixel centres are aligned (``(x + 0.5) * scale - 0.5``) and samples
    outside the source are clamped to the border, so every output value is a
    convex combination of at most four source values.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise EmptyInputError("resize_bilinear needs a non-empty 2-D map")
    if width < 1 or height < 1:
        raise EmptyInputError(f"invalid target size {width}x{height}")
    h, w = m.shape
    if (h, w) == (height, width):
        return m.copy()
    r0, r1, fr = _axis_weights(height, h)
    c0, c1, fc = _axis_weights(width, w)
    fr = fr[:, None]
    fc = fc[None, :]
    top = m[r0][:, c0] * (1.0 - fc) + m[r0][:, c1] * fc
    bot = m[r1][:, c0] * (1.0 - fc) + m[r1][:, c1] * fc
    out = top * (1.0 - fr) + bot * fr
    # guard against 1-ulp overshoot of the convex combination
    return np.clip(out, m.min(), m.max())


def minmax_normalize(m) -> np.ndarray:
    """Scale to ``[0, 1]``; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise EmptyInputError("cannot normalize an empty map")
    if not np.all(np.isfinite(m)):
        raise NonFiniteInputError("map contains NaN or inf")
    lo = m.min()
    hi = m.max()
    if hi == lo:
        return np.zeros_like(m)
    out = (m - lo) / (hi - lo)
    return out


def sum_normalize(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise EmptyInputError("cannot normalize an empty map")
    if not np.all(np.isfinite(m)):
        raise NonFiniteInputError("map contains NaN or inf")
    if np.any(m < 0):
        raise NegativeValueError("sum normalization needs non-negative values")
    total = m.sum()
    if total <= 0:
        raise ZeroMassError("map has zero total mass")
    return m / total


def to_gray(img) -> np.ndarray:
    """Channel mean of an image as float64 in ``[0, 255]``."""
    return as_image(img).astype(np.float64).mean(axis=2)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
