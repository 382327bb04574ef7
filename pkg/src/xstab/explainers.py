"""FEM, multi-layer FEM and Grad-CAM explanation maps.

All explainers return a min-max normalized ``(outH, outW)`` float64 map; a
degenerate (constant) importance map comes out as all zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import minmax_normalize, resize_bilinear
from .errors import (
    EmptyInputError,
    EmptyTrainingSetError,
    InvalidParameterError,
    ShapeMismatchError,
)


@dataclass(frozen=True)
class FemParams:
    K: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.K) and self.K >= 0):
            raise InvalidParameterError(f"K must be finite and >= 0, got {self.K}")


@dataclass(frozen=True)
class FusionWeights:
    weights: tuple
    bias: float = 0.0

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if not w:
            raise InvalidParameterError("need at least one fusion weight")
        if not all(np.isfinite(x) and x >= 0 for x in w):
            raise InvalidParameterError("fusion weights must be finite and >= 0")
        if not any(x > 0 for x in w):
            raise InvalidParameterError("at least one fusion weight must be positive")

    @classmethod
    def uniform(cls, n_layers: int) -> "FusionWeights":
        return cls((1.0 / n_layers,) * n_layers)


def _as_tensor(act) -> np.ndarray:
    a = np.asarray(act, dtype=np.float64)
    if a.ndim != 3 or a.size == 0:
        raise EmptyInputError(f"expected a non-empty (C, h, w) tensor, got shape {a.shape}")
    return a


def fem_channel_stats(act):
    """Per-channel mean and population standard deviation."""
    a = _as_tensor(act)
    flat = a.reshape(a.shape[0], -1)
    mu = flat.mean(axis=1)
    sigma = flat.std(axis=1)
    return mu, sigma


def fem_binary_maps(act, K: float = 1.0) -> np.ndarray:
    """``b[c] = act[c] >= mu_c + K * sigma_c`` as a boolean ``(C, h, w)`` array."""
    a = _as_tensor(act)
    mu, sigma = fem_channel_stats(a)
    thresh = mu + K * sigma
    return a >= thresh[:, None, None]


def fem_importance(act, K: float = 1.0) -> np.ndarray:
    """Unnormalized importance map: binary maps weighted by channel means."""
    a = _as_tensor(act)
    mu, _ = fem_channel_stats(a)
    b = fem_binary_maps(a, K)
    return np.tensordot(mu, b.astype(np.float64), axes=1)


def fem(act, params: FemParams | None = None, out_w: int | None = None, out_h: int | None = None) -> np.ndarray:
    params = params or FemParams()
    a = _as_tensor(act)
    m = minmax_normalize(fem_importance(a, params.K))
    if out_w is None and out_h is None:
        return m
    return resize_bilinear(m, out_w or a.shape[2], out_h or a.shape[1])


def gradcam(act, grad, out_w: int | None = None, out_h: int | None = None) -> np.ndarray:
    """Channels weighted by their spatially averaged gradient, then ReLU."""
    a = _as_tensor(act)
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != a.shape:
        raise ShapeMismatchError(f"gradient shape {g.shape} != activation shape {a.shape}")
    alpha = g.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    m = minmax_normalize(raw)
    if out_w is None and out_h is None:
        return m
    return resize_bilinear(m, out_w or a.shape[2], out_h or a.shape[1])


def mlfem_layer_maps(cache, params: FemParams | None = None, out_w: int = 64, out_h: int = 64) -> list:
    """FEM of every cached activation, shallowest layer first."""
    acts = getattr(cache, "activations", cache)
    if not acts:
        raise EmptyInputError("no activations to explain")
    return [fem(a, params, out_w, out_h) for a in acts]


def _stack_problem(layer_maps_per_image, gfdms):
    if len(layer_maps_per_image) == 0:
        raise EmptyTrainingSetError("fusion fitting needs at least one image")
    if len(layer_maps_per_image) != len(gfdms):
        raise ShapeMismatchError("one GFDM per training image is required")
    n_layers = len(layer_maps_per_image[0])
    if n_layers == 0:
        raise EmptyTrainingSetError("images carry no layer maps")
    G = np.zeros((n_layers, n_layers))
    h = np.zeros(n_layers)
    c = 0.0
    for maps, y in zip(layer_maps_per_image, gfdms):
        if len(maps) != n_layers:
            raise ShapeMismatchError("layer count differs between images")
        y = np.asarray(y, dtype=np.float64)
        A = np.stack([np.asarray(m, dtype=np.float64).ravel() for m in maps], axis=1)
        if A.shape[0] != y.size or any(np.shape(m) != y.shape for m in maps):
            raise ShapeMismatchError("layer maps and GFDM must share one resolution")
        G += A.T @ A
        h += A.T @ y.ravel()
        c += float(y.ravel() @ y.ravel())
    return G, h, c


def fit_fusion_weights(layer_maps_per_image, gfdms, tol: float = 1e-8, max_iter: int = 10_000, history: list | None = None) -> FusionWeights:
    """Non-negative least-squares fit of per-layer weights to the GFDMs.

    Minimizes ``sum_i ||sum_l w_l * map_il - gfdm_i||^2`` over ``w >= 0`` by
    projected gradient descent with step ``1 / lambda_max``, stopping once no
    weight moves by more than ``tol``. Falls back to uniform weights when the
    optimum is the zero vector. The objective after each iteration is
    appended to ``history`` when given.
    """
    G, h, c = _stack_problem(layer_maps_per_image, gfdms)
    n = len(h)
    lip = float(np.linalg.eigvalsh(G)[-1])
    w = np.zeros(n)
    if lip > 0:
        step = 1.0 / lip
        for _ in range(max_iter):
            w_new = np.maximum(w - step * (G @ w - h), 0.0)
            moved = np.max(np.abs(w_new - w))
            w = w_new
            if history is not None:
                history.append(float(w @ G @ w - 2 * h @ w + c))
            if moved <= tol:
                break
    if not np.any(w > 0):
        return FusionWeights.uniform(n)
    return FusionWeights(tuple(w))


def mlfem(layer_maps, weights: FusionWeights) -> np.ndarray:
    w = weights.weights if isinstance(weights, FusionWeights) else tuple(weights)
    if len(layer_maps) != len(w):
        raise ShapeMismatchError(f"{len(layer_maps)} layer maps but {len(w)} weights")
    shape = np.shape(layer_maps[0])
    if any(np.shape(m) != shape for m in layer_maps):
        raise ShapeMismatchError("layer maps must share one shape")
    fused = np.zeros(shape)
    for wl, m in zip(w, layer_maps):
        fused += wl * np.asarray(m, dtype=np.float64)
    return minmax_normalize(fused)


# heat-map overlay --------------------------------------------------------


def _color_ramp() -> np.ndarray:
    # blue -> cyan -> green -> yellow -> red, 256 entries
    stops = np.array([[0, 0, 128], [0, 128, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=np.float64)
    t = np.linspace(0, len(stops) - 1, 256)
    i = np.minimum(t.astype(int), len(stops) - 2)
    f = (t - i)[:, None]
    return np.floor(stops[i] * (1 - f) + stops[i + 1] * f + 0.5).astype(np.uint8)


COLOR_RAMP = _color_ramp()


def overlay(img, saliency, alpha: float = 0.5) -> np.ndarray:
    """Blend a ``[0, 1]`` map over ``img`` through the fixed colour ramp."""
    img = np.asarray(img, dtype=np.uint8)
    m = np.asarray(saliency, dtype=np.float64)
    if m.shape != img.shape[:2]:
        m = resize_bilinear(m, img.shape[1], img.shape[0])
    idx = np.clip(np.floor(np.clip(m, 0, 1) * 255 + 0.5), 0, 255).astype(np.intp)
    blend = (1 - alpha) * img.astype(np.float64) + alpha * COLOR_RAMP[idx].astype(np.float64)
    return np.clip(np.floor(blend + 0.5), 0, 255).astype(np.uint8)
