"""A small numpy CNN used as the classifier under explanation.

Architecture: a stack of 3x3 'same' convolutions, each followed by ReLU and
an optional 2x2 max-pool, then global average pooling and a fully connected
layer. The post-ReLU (pre-pool) output of every block is cached so the
explainers can read it, and the gradient of any logit with respect to those
tensors is computed by reverse accumulation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import as_image, ensure_dir
from .errors import (
    EmptyDatasetError,
    FormatError,
    ImageIOError,
    InvalidLayerError,
    InvalidParameterError,
    ShapeMismatchError,
)


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (8, 16, 32)
    pools: tuple = (True, True, False)
    n_classes: int = 3
    input_size: tuple = (64, 64)  # (width, height)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "pools", tuple(bool(p) for p in self.pools))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.channels) < 2:
            raise InvalidParameterError("need at least two conv blocks")
        if len(self.pools) != len(self.channels):
            raise InvalidParameterError("one pool flag per conv block")
        if self.n_classes < 2:
            raise InvalidParameterError("need at least two classes")
        w, h = self.input_size
        for p in self.pools:
            if p:
                if w % 2 or h % 2:
                    raise InvalidParameterError("max-pool needs even spatial size")
                w, h = w // 2, h // 2


@dataclass
class ForwardCache:
    activations: list
    logits: np.ndarray
    label: int
    score: float
    probs: np.ndarray
    # internals consumed by the backward pass
    inputs: list = field(repr=False, default_factory=list)
    pre: list = field(repr=False, default_factory=list)
    argmax: list = field(repr=False, default_factory=list)
    owner: int = field(repr=False, default=0)


# ---------------------------------------------------------------------------
# layer primitives on batched (N, C, H, W) arrays


def _im2col(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv_forward(x, w, b):
    n, _, h, wd = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def conv_backward_input(dout, w):
    n, co, h, wd = dout.shape
    ci = w.shape[1]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, co) @ w.reshape(co, -1)
    d = d.reshape(n, h, wd, ci, 3, 3)
    dxp = np.zeros((n, ci, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + h, j : j + wd] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def conv_backward_params(dout, cols, w_shape):
    co = w_shape[0]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, co)
    return (d.T @ cols).reshape(w_shape), d.sum(axis=0)


def pool_forward(x):
    """2x2/2 max-pool; ties resolve to the first cell in row-major order."""
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def pool_backward(dout, idx):
    n, c, h2, w2 = dout.shape
    d = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(d, idx[..., None], dout[..., None], axis=-1)
    return d.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def preprocess(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64) / 255.0 - 0.5
    if x.ndim == 3:
        x = x[None]
    return x.transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------


class ToyCNN:
    """Weights plus the forward/backward machinery.

    ``conv_w[l]`` has shape ``(C_out, C_in, 3, 3)``; ``fc_w`` has shape
    ``(n_classes, C_last)``.
    """

    def __init__(self, config: ModelConfig | None = None, params: dict | None = None):
        self.config = config or ModelConfig()
        if params is None:
            params = self._init_params()
        self.conv_w = [np.asarray(w, dtype=np.float64) for w in params["conv_w"]]
        self.conv_b = [np.asarray(b, dtype=np.float64) for b in params["conv_b"]]
        self.fc_w = np.asarray(params["fc_w"], dtype=np.float64)
        self.fc_b = np.asarray(params["fc_b"], dtype=np.float64)

    def _init_params(self):
        rng = np.random.default_rng(self.config.seed)
        conv_w, conv_b = [], []
        cin = 3
        for cout in self.config.channels:
            std = np.sqrt(2.0 / (cin * 9))
            conv_w.append(rng.normal(0.0, std, size=(cout, cin, 3, 3)))
            conv_b.append(np.full(cout, 0.01))
            cin = cout
        fc_w = rng.normal(0.0, np.sqrt(1.0 / cin), size=(self.config.n_classes, cin))
        return {"conv_w": conv_w, "conv_b": conv_b, "fc_w": fc_w, "fc_b": np.zeros(self.config.n_classes)}

    @property
    def n_layers(self) -> int:
        return len(self.conv_w)

    def params(self) -> dict:
        return {
            "conv_w": [w.copy() for w in self.conv_w],
            "conv_b": [b.copy() for b in self.conv_b],
            "fc_w": self.fc_w.copy(),
            "fc_b": self.fc_b.copy(),
        }

    def copy(self) -> "ToyCNN":
        return ToyCNN(self.config, self.params())

    def fingerprint(self) -> int:
        # cheap identity tag so a cache can be matched to the model that built it
        return id(self)

    # -- forward -----------------------------------------------------------

    def _forward_batch(self, x, start: int = 0):
        inputs, pre, acts, argmax = [], [], [], []
        h = x
        for l in range(start, self.n_layers):
            inputs.append(h)
            z, _ = conv_forward(h, self.conv_w[l], self.conv_b[l])
            a = np.maximum(z, 0.0)
            pre.append(z)
            acts.append(a)
            if self.config.pools[l]:
                h, idx = pool_forward(a)
            else:
                h, idx = a, None
            argmax.append(idx)
        feat = h.mean(axis=(2, 3))
        logits = feat @ self.fc_w.T + self.fc_b
        return logits, inputs, pre, acts, argmax

    def _check_image(self, img):
        img = as_image(img)
        w, h = self.config.input_size
        if img.shape != (h, w, 3):
            raise ShapeMismatchError(f"model expects {w}x{h} RGB input, got {img.shape}")
        return img

    def forward(self, img) -> ForwardCache:
        img = self._check_image(img)
        logits, inputs, pre, acts, argmax = self._forward_batch(preprocess(img))
        logits = logits[0]
        probs = softmax(logits)
        label = int(np.argmax(logits))
        return ForwardCache(
            activations=[a[0] for a in acts],
            logits=logits,
            label=label,
            score=float(probs[label]),
            probs=probs,
            inputs=[x[0] for x in inputs],
            pre=[z[0] for z in pre],
            argmax=[None if i is None else i[0] for i in argmax],
            owner=self.fingerprint(),
        )

    def predict(self, images) -> np.ndarray:
        logits = self._forward_batch(preprocess(np.asarray(images)))[0]
        return logits.argmax(axis=1)

    def logits_from_activation(self, layer: int, act) -> np.ndarray:
        """Run the network above ``layer`` given its post-ReLU activation."""
        self._check_layer(layer)
        a = np.asarray(act, dtype=np.float64)[None]
        h = pool_forward(a)[0] if self.config.pools[layer] else a
        if layer + 1 < self.n_layers:
            return self._forward_batch(h, start=layer + 1)[0][0]
        return (h.mean(axis=(2, 3)) @ self.fc_w.T + self.fc_b)[0]

    # -- backward ----------------------------------------------------------

    def _check_layer(self, layer):
        if not (isinstance(layer, (int, np.integer)) and 0 <= layer < self.n_layers):
            raise InvalidLayerError(f"layer must be in [0, {self.n_layers}), got {layer}")

    def grad_wrt_activation(self, cache: ForwardCache, cls: int, layer: int) -> np.ndarray:
        """d logit[cls] / d activation[layer], same shape as the activation."""
        self._check_layer(layer)
        if cache.owner != self.fingerprint():
            raise ShapeMismatchError("cache was produced by a different model")
        if not 0 <= cls < self.config.n_classes:
            raise InvalidParameterError(f"class index {cls} out of range")
        last = self.n_layers - 1
        top = cache.activations[last]
        if self.config.pools[last]:
            hh, ww = top.shape[1] // 2, top.shape[2] // 2
        else:
            hh, ww = top.shape[1:]
        g = np.broadcast_to(self.fc_w[cls][:, None, None] / (hh * ww), (top.shape[0], hh, ww)).copy()
        l = last
        while True:
            if self.config.pools[l]:
                g = pool_backward(g[None], cache.argmax[l][None])[0]
            if l == layer:
                return g
            dz = g * (cache.pre[l] > 0)
            g = conv_backward_input(dz[None], self.conv_w[l])[0]
            l -= 1

    def loss_and_grads(self, images, labels):
        """Mean cross-entropy over a batch and its parameter gradients."""
        x = preprocess(images)
        labels = np.asarray(labels)
        n = x.shape[0]
        logits, inputs, pre, acts, argmax = self._forward_batch(x)
        probs = softmax(logits)
        loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-300))
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        last = self.n_layers - 1
        top = acts[last]
        if self.config.pools[last]:
            feat_map = pool_forward(top)[0]
        else:
            feat_map = top
        feat = feat_map.mean(axis=(2, 3))
        grads = {
            "fc_w": dlogits.T @ feat,
            "fc_b": dlogits.sum(axis=0),
            "conv_w": [None] * self.n_layers,
            "conv_b": [None] * self.n_layers,
        }
        hh, ww = feat_map.shape[2:]
        g = np.broadcast_to((dlogits @ self.fc_w)[:, :, None, None] / (hh * ww), feat_map.shape).copy()
        for l in range(last, -1, -1):
            if self.config.pools[l]:
                g = pool_backward(g, argmax[l])
            dz = g * (pre[l] > 0)
            cols = _im2col(inputs[l])
            grads["conv_w"][l], grads["conv_b"][l] = conv_backward_params(dz, cols, self.conv_w[l].shape)
            if l > 0:
                g = conv_backward_input(dz, self.conv_w[l])
        return loss, grads

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> None:
        d = ensure_dir(directory)
        desc = asdict(self.config)
        desc["layers"] = [f"conv{l}" for l in range(self.n_layers)] + ["fc"]
        (d / "model.json").write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
        for l in range(self.n_layers):
            np.save(d / f"w_conv{l}.npy", self.conv_w[l])
            np.save(d / f"b_conv{l}.npy", self.conv_b[l])
        np.save(d / "w_fc.npy", self.fc_w)
        np.save(d / "b_fc.npy", self.fc_b)

    @classmethod
    def load(cls, directory) -> "ToyCNN":
        d = Path(directory)
        try:
            desc = json.loads((d / "model.json").read_text())
            desc.pop("layers", None)
            config = ModelConfig(**desc)
            n = len(config.channels)
            params = {
                "conv_w": [np.load(d / f"w_conv{l}.npy") for l in range(n)],
                "conv_b": [np.load(d / f"b_conv{l}.npy") for l in range(n)],
                "fc_w": np.load(d / "w_fc.npy"),
                "fc_b": np.load(d / "b_fc.npy"),
            }
        except OSError as exc:
            raise ImageIOError(f"cannot load model from {d}: {exc}") from exc
        except (ValueError, TypeError, KeyError) as exc:
            raise FormatError(f"malformed model bundle in {d}: {exc}") from exc
        model = cls(config, params)
        expected_in = 3
        for w in model.conv_w:
            if w.ndim != 4 or w.shape[1] != expected_in or w.shape[2:] != (3, 3):
                raise FormatError(f"conv weight shape {w.shape} does not match architecture")
            expected_in = w.shape[0]
        if model.fc_w.shape != (config.n_classes, expected_in):
            raise FormatError("fc weight shape does not match architecture")
        return model


def forward(model: ToyCNN, img) -> ForwardCache:
    return model.forward(img)


def grad_wrt_activation(model: ToyCNN, cache: ForwardCache, cls: int, layer: int) -> np.ndarray:
    return model.grad_wrt_activation(cache, cls, layer)


def train(model: ToyCNN, dataset, epochs: int = 5, lr: float = 0.05, seed: int = 0, batch_size: int = 8, history: list | None = None) -> ToyCNN:
    """Mini-batch SGD on cross-entropy. Returns a trained copy of ``model``.

    ``dataset`` is a sequence of ``(image, label)`` pairs. Per-epoch mean
    losses are appended to ``history`` when given.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("training set is empty")
    images = np.stack([as_image(img) for img, _ in dataset])
    labels = np.array([lab for _, lab in dataset], dtype=np.intp)
    model = model.copy()
    rng = np.random.default_rng(seed)
    n = len(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, g = model.loss_and_grads(images[idx], labels[idx])
            total += loss * len(idx)
            if lr == 0:
                continue
            for l in range(model.n_layers):
                model.conv_w[l] -= lr * g["conv_w"][l]
                model.conv_b[l] -= lr * g["conv_b"][l]
            model.fc_w -= lr * g["fc_w"]
            model.fc_b -= lr * g["fc_b"]
        if history is not None:
            history.append(total / n)
    return model


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("circle", "square", "triangle")


def _shape_mask(kind: int, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == 1:
        return (np.abs(xx - cx) <= r * 0.85) & (np.abs(yy - cy) <= r * 0.85)
    # upward triangle with apex at (cx, cy - r)
    top = cy - r
    bottom = cy + r * 0.8
    half = (yy - top) / (bottom - top) * r
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def _contrasting_colors(rng):
    # shape brighter than background keeps the edge polarity learnable
    while True:
        bg = rng.integers(0, 256, size=3)
        fg = rng.integers(0, 256, size=3)
        if fg.mean() - bg.mean() >= 70:
            return bg, fg


def synth_dataset(n: int, seed: int = 0, size: int = 64, return_masks: bool = False):
    """``n`` images of a circle, square or triangle on a flat background.

    Labels cycle over the three classes and are then shuffled, so every class
    appears ``n // 3`` or ``n // 3 + 1`` times. With ``return_masks`` the
    boolean object mask of each image is returned as a third element.
    """
    if int(n) != n or n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(SHAPES))
    out = []
    for label in labels:
        r = rng.uniform(size * 0.16, size * 0.3)
        cx = rng.uniform(r + 2, size - r - 2)
        cy = rng.uniform(r + 2, size - r - 2)
        bg, fg = _contrasting_colors(rng)
        mask = _shape_mask(int(label), cx, cy, r, size)
        img = np.empty((size, size, 3), dtype=np.uint8)
        img[:] = bg.astype(np.uint8)
        img[mask] = fg.astype(np.uint8)
        item = (img, int(label), mask) if return_masks else (img, int(label))
        out.append(item)
    return out


def synth_fixations(mask, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``(u, v)`` points inside ``mask`` to stand in for observer clicks."""
    vv, uu = np.nonzero(mask)
    if len(uu) == 0:
        h, w = mask.shape
        return np.array([[w / 2.0, h / 2.0]])
    pick = rng.integers(0, len(uu), size=n_points)
    return np.stack([uu[pick], vv[pick]], axis=1).astype(np.float64)
