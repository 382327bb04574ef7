import json

import numpy as np
import pytest

from oracles import fd_gradient_error
from xstab.errors import (
    EmptyDatasetError,
    FormatError,
    InvalidLayerError,
    InvalidParameterError,
    ShapeMismatchError,
)
from xstab.model import (
    ModelConfig,
    ToyCNN,
    forward,
    grad_wrt_activation,
    pool_backward,
    pool_forward,
    synth_dataset,
    synth_fixations,
    train,
)


@pytest.fixture(scope="module")
def small_model():
    cfg = ModelConfig(channels=(4, 6), pools=(True, False), input_size=(16, 16), seed=3)
    return ToyCNN(cfg)


def zero_weight_model(cfg=None):
    m = ToyCNN(cfg or ModelConfig())
    p = m.params()
    p["conv_w"] = [np.zeros_like(w) for w in p["conv_w"]]
    p["conv_b"] = [np.zeros_like(b) for b in p["conv_b"]]
    p["fc_w"] = np.zeros_like(p["fc_w"])
    return ToyCNN(m.config, p)


# -- config ----------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(channels=(8,), pools=(True,)),
        dict(channels=(8, 8), pools=(True,)),
        dict(n_classes=1),
        dict(input_size=(63, 64)),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(InvalidParameterError):
        ModelConfig(**kwargs)


# -- forward ---------------------------------------------------------------


def test_forward_shapes_and_invariants(rand_image):
    m = ToyCNN()
    cache = forward(m, rand_image(64, 64))
    assert [a.shape for a in cache.activations] == [(8, 64, 64), (16, 32, 32), (32, 16, 16)]
    assert all(a.min() >= 0 for a in cache.activations)
    assert abs(cache.probs.sum() - 1.0) <= 1e-9
    assert cache.label == int(np.argmax(cache.logits))
    assert cache.score == pytest.approx(cache.probs.max(), abs=0)


def test_all_zero_weights_tie_to_label_zero(rand_image):
    cache = zero_weight_model().forward(rand_image(64, 64))
    assert np.all(cache.logits == cache.logits[0])
    assert cache.label == 0


def test_forward_is_deterministic(rand_image):
    m = ToyCNN()
    img = rand_image(64, 64)
    a, b = m.forward(img), m.forward(img.copy())
    for x, y in zip(a.activations, b.activations):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a.logits, b.logits)


def test_forward_rejects_wrong_size(rand_image):
    with pytest.raises(ShapeMismatchError):
        ToyCNN().forward(rand_image(32, 64))


def test_predict_matches_forward(rand_image):
    m = ToyCNN()
    imgs = np.stack([rand_image(64, 64) for _ in range(4)])
    assert list(m.predict(imgs)) == [m.forward(i).label for i in imgs]


def test_pool_ties_route_to_first_cell():
    x = np.zeros((1, 1, 2, 2))
    out, idx = pool_forward(x)
    assert idx[0, 0, 0, 0] == 0
    back = pool_backward(np.ones((1, 1, 1, 1)), idx)
    np.testing.assert_array_equal(back[0, 0], [[1, 0], [0, 0]])
    x = np.array([[[[1.0, 3.0], [3.0, 2.0]]]])
    _, idx = pool_forward(x)
    assert idx[0, 0, 0, 0] == 1


# -- gradients -------------------------------------------------------------


def test_gradient_matches_finite_differences_two_blocks(small_model):
    rng = np.random.default_rng(0)
    for _ in range(3):
        img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        cache = small_model.forward(img)
        for layer in range(2):
            for cls in range(3):
                err, kept = fd_gradient_error(small_model, cache, cls, layer, 60, rng)
                assert kept == 60
                assert err <= 1e-4


def test_zero_head_gives_zero_gradient(rand_image):
    m = ToyCNN()
    p = m.params()
    p["fc_w"] = np.zeros_like(p["fc_w"])
    m = ToyCNN(m.config, p)
    cache = m.forward(rand_image(64, 64))
    for layer in range(3):
        assert not grad_wrt_activation(m, cache, 1, layer).any()


def test_gradient_vanishes_through_dead_relu(rand_image):
    m = ToyCNN()
    p = m.params()
    p["conv_b"][1] = np.full_like(p["conv_b"][1], -1e6)  # every layer-1 unit off
    m = ToyCNN(m.config, p)
    cache = m.forward(rand_image(64, 64))
    assert not cache.activations[1].any()
    assert not m.grad_wrt_activation(cache, 0, 0).any()
    assert m.grad_wrt_activation(cache, 0, 2).any()


def test_last_layer_gradient_is_head_term(rand_image):
    m = ToyCNN()
    cache = m.forward(rand_image(64, 64))
    g = m.grad_wrt_activation(cache, 2, 2)
    np.testing.assert_allclose(g, np.broadcast_to(m.fc_w[2][:, None, None] / 256, g.shape), rtol=1e-15)


def test_gradient_rejects_bad_layer_and_foreign_cache(rand_image):
    m = ToyCNN()
    cache = m.forward(rand_image(64, 64))
    for layer in (-1, 3, 1.0):
        with pytest.raises(InvalidLayerError):
            m.grad_wrt_activation(cache, 0, layer)
    with pytest.raises(ShapeMismatchError):
        m.copy().grad_wrt_activation(cache, 0, 0)


# -- training --------------------------------------------------------------


@pytest.fixture(scope="module")
def shapes():
    return synth_dataset(48, seed=2)


def test_zero_learning_rate_keeps_weights(shapes):
    m = ToyCNN()
    out = train(m, shapes[:16], epochs=1, lr=0)
    for a, b in zip(m.conv_w + [m.fc_w], out.conv_w + [out.fc_w]):
        np.testing.assert_array_equal(a, b)


def test_training_reduces_loss(shapes):
    history = []
    train(ToyCNN(), shapes, epochs=5, seed=0, history=history)
    assert len(history) == 5
    # trend check: later epochs below the first, overall slope negative
    assert history[-1] < history[0]
    assert np.polyfit(np.arange(5), history, 1)[0] < 0


def test_training_is_deterministic_and_returns_a_copy(shapes):
    m = ToyCNN()
    before = m.fc_w.copy()
    a = train(m, shapes[:16], epochs=1, seed=4)
    b = train(m, shapes[:16], epochs=1, seed=4)
    np.testing.assert_array_equal(m.fc_w, before)
    for x, y in zip(a.conv_w + [a.fc_w], b.conv_w + [b.fc_w]):
        np.testing.assert_array_equal(x, y)


def test_empty_dataset():
    with pytest.raises(EmptyDatasetError):
        train(ToyCNN(), [])


# -- persistence -----------------------------------------------------------


def test_save_load_round_trip(tmp_path, rand_image):
    m = ToyCNN(ModelConfig(seed=9))
    m.save(tmp_path / "m")
    desc = json.loads((tmp_path / "m" / "model.json").read_text())
    assert desc["channels"] == [8, 16, 32] and desc["seed"] == 9
    assert (tmp_path / "m" / "w_conv2.npy").exists() and (tmp_path / "m" / "b_fc.npy").exists()
    back = ToyCNN.load(tmp_path / "m")
    img = rand_image(64, 64)
    np.testing.assert_array_equal(back.forward(img).logits, m.forward(img).logits)


def test_load_rejects_mismatched_bundle(tmp_path):
    m = ToyCNN()
    m.save(tmp_path)
    np.save(tmp_path / "w_fc.npy", np.zeros((3, 5)))
    with pytest.raises(FormatError):
        ToyCNN.load(tmp_path)


# -- synthetic data --------------------------------------------------------


def test_synth_small_set():
    a = synth_dataset(3, seed=5)
    b = synth_dataset(3, seed=5)
    assert sorted(lab for _, lab in a) == [0, 1, 2]
    for (x, lx), (y, ly) in zip(a, b):
        assert lx == ly and x.tobytes() == y.tobytes()
        assert x.shape == (64, 64, 3) and x.dtype == np.uint8


def test_synth_label_distribution():
    counts = np.bincount([lab for _, lab in synth_dataset(300, seed=0)], minlength=3)
    assert np.all(np.abs(counts - 100) <= 10)


def test_synth_rejects_bad_count():
    with pytest.raises(InvalidParameterError):
        synth_dataset(0)


def test_synth_fixations_fall_inside_mask():
    _, _, mask = synth_dataset(1, seed=8, return_masks=True)[0]
    pts = synth_fixations(mask, 20, np.random.default_rng(0))
    assert pts.shape == (20, 2)
    assert all(mask[int(v), int(u)] for u, v in pts)
