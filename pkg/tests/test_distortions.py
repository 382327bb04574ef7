import hashlib
import json
import math

import numpy as np
import pytest
from scipy.stats import truncnorm

from xstab.distortions import (
    BLUR_MASKS,
    BLUR_SIGMAS,
    NOISE_LEVELS,
    DistortionSpec,
    add_gaussian_noise,
    apply_brightness,
    apply_homography,
    brightness_shift,
    derive_seed,
    gaussian_blur,
    gaussian_kernel,
    generate_distortion_set,
    perspective_distort,
    sample_shifts,
    solve_homography,
    trapezoid,
    truncated_gaussian_shift,
    write_corpus,
)
from xstab.errors import DegenerateQuadError, InvalidParameterError


def phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def smooth_image(seed, size=48):
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, (size // 6, size // 6, 3)).astype(float)
    rep = np.kron(base, np.ones((6, 6, 1)))
    return rep.astype(np.uint8)


# -- truncated shifts ------------------------------------------------------


def test_raw_acceptance_rate_is_two_sigma_mass():
    _, draws = sample_shifts(100, 100_000, np.random.default_rng(0), return_draws=True)
    rate = 100_000 / draws
    assert abs(rate - (phi(2) - phi(-2))) <= 0.01


def test_accepted_shifts_are_bounded():
    alpha = sample_shifts(100, 100_000, np.random.default_rng(1))
    assert np.all(np.abs(alpha) <= 100)


def test_shift_std_matches_truncated_gaussian():
    k = 80
    alpha = sample_shifts(k, 100_000, np.random.default_rng(2))
    expected = truncnorm.std(-2, 2, scale=k / 2)
    assert abs(alpha.std() - expected) / expected < 0.03


def test_shift_sequence_is_deterministic():
    a = [truncated_gaussian_shift(50, np.random.default_rng(9)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    assert np.array_equal(sample_shifts(50, 1000, np.random.default_rng(4)), sample_shifts(50, 1000, np.random.default_rng(4)))


@pytest.mark.parametrize("k", [0, -5, 256, np.nan])
def test_shift_rejects_bad_magnitude(k):
    with pytest.raises(InvalidParameterError):
        truncated_gaussian_shift(k, np.random.default_rng(0))


# -- additive noise --------------------------------------------------------


def test_noise_deviation_bounded_on_mid_gray():
    img = np.full((32, 32, 3), 128, np.uint8)
    out = add_gaussian_noise(img, 25, seed=3)
    assert np.abs(out.astype(int) - 128).max() <= 25


def test_noise_shift_shared_across_channels():
    img = np.empty((40, 40, 3), np.uint8)
    img[:] = (100, 128, 150)
    out = add_gaussian_noise(img, 50, seed=5)
    diff = out.astype(int) - img
    assert np.all(diff[:, :, 0] == diff[:, :, 1])
    assert np.all(diff[:, :, 1] == diff[:, :, 2])
    assert diff.std() > 0


def test_noise_mean_absolute_deviation_matches_monte_carlo():
    k = 100
    img = np.full((64, 64, 3), 128, np.uint8)
    out = add_gaussian_noise(img, k, seed=11)
    mad = np.abs(out[:, :, 0].astype(float) - 128).mean()
    # independent oracle: rejection sampling from numpy's normal generator
    draws = np.random.default_rng(77).normal(0, k / 2, size=1_000_000)
    draws = draws[np.abs(draws) <= k]
    oracle = np.abs(np.clip(128 + draws, 0, 255) - 128).mean()
    assert abs(mad - oracle) / oracle < 0.05


def test_noise_clamps_and_keeps_shape():
    img = np.zeros((10, 12, 3), np.uint8)
    out = add_gaussian_noise(img, 200, seed=0)
    assert out.shape == img.shape and out.dtype == np.uint8


# -- blur ------------------------------------------------------------------


@pytest.mark.parametrize("size", BLUR_MASKS)
@pytest.mark.parametrize("sigma", [0.5, 1.25, 6.0])
def test_kernel_normalized_and_symmetric(size, sigma):
    g = gaussian_kernel(size, sigma)
    assert g.shape == (size, size)
    assert abs(g.sum() - 1.0) <= 1e-12
    np.testing.assert_array_equal(g, g[::-1, :])
    np.testing.assert_array_equal(g, g[:, ::-1])


def test_kernel_centre_edge_ratio():
    g = gaussian_kernel(3, 1.0)
    assert g[1, 1] / g[0, 1] == pytest.approx(math.exp(0) / math.exp(-0.5), rel=1e-14)


@pytest.mark.parametrize("size,sigma", [(4, 1.0), (1, 1.0), (5, 0.0), (5, -1.0)])
def test_kernel_rejects_bad_parameters(size, sigma):
    with pytest.raises(InvalidParameterError):
        gaussian_kernel(size, sigma)


def test_blur_constant_image_fixed_point():
    img = np.full((20, 20, 3), 77, np.uint8)
    np.testing.assert_array_equal(gaussian_blur(img, 7, 2.0), img)


def test_blur_impulse_response():
    img = np.zeros((15, 15, 3), np.uint8)
    img[7, 7] = 255
    out = gaussian_blur(img, 5, 1.5)
    mu = np.arange(-2, 3)
    g = np.exp(-(mu[:, None] ** 2 + mu[None, :] ** 2) / (2 * 1.5**2))
    g /= g.sum()
    expected = np.floor(255 * g + 0.5)
    for ch in range(3):
        np.testing.assert_array_equal(out[5:10, 5:10, ch], expected)
    assert out.sum() == out[5:10, 5:10].sum()


def test_blur_composition_semigroup():
    img = np.random.default_rng(3).integers(0, 256, (48, 48, 3)).astype(np.uint8)
    twice = gaussian_blur(gaussian_blur(img, 7, 1.0), 7, 1.0)
    once = gaussian_blur(img, 11, math.sqrt(2.0))
    assert np.abs(twice.astype(int) - once).max() <= 2


# -- brightness ------------------------------------------------------------


def test_brightness_uniform_shift_and_clamp():
    np.testing.assert_array_equal(apply_brightness(np.full((4, 4, 3), 100, np.uint8), 50), 150)
    np.testing.assert_array_equal(apply_brightness(np.full((4, 4, 3), 128, np.uint8), 200), 255)


def test_brightness_preserves_pairwise_differences():
    img = np.random.default_rng(0).integers(40, 200, (16, 16, 3)).astype(np.uint8)
    out = apply_brightness(img, 23.4)
    d_in = img.astype(int).ravel()[:, None] - img.astype(int).ravel()[None, :]
    d_out = out.astype(int).ravel()[:, None] - out.astype(int).ravel()[None, :]
    np.testing.assert_array_equal(d_in, d_out)


def test_brightness_shift_is_single_constant_and_seeded():
    img = np.random.default_rng(1).integers(60, 190, (16, 16, 3)).astype(np.uint8)
    a = brightness_shift(img, 25, seed=8)
    b = brightness_shift(img, 25, seed=8)
    np.testing.assert_array_equal(a, b)
    diff = a.astype(int) - img
    assert np.unique(diff).size == 1
    assert abs(diff.flat[0]) <= 25


# -- homography ------------------------------------------------------------

UNIT = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def test_homography_identity_and_scale():
    np.testing.assert_allclose(solve_homography(UNIT, UNIT), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(solve_homography(UNIT, 2 * UNIT), np.diag([2.0, 2.0, 1.0]), atol=1e-12)


def random_quad(rng):
    while True:
        base = np.array([[0, 0], [100, 0], [100, 100], [0, 100]], float)
        q = base + rng.uniform(-30, 30, size=(4, 2))
        try:
            solve_homography(UNIT, q)
            return q
        except DegenerateQuadError:
            continue


def test_homography_residual_on_random_quads():
    rng = np.random.default_rng(0)
    for _ in range(200):
        src, dst = random_quad(rng), random_quad(rng)
        H = solve_homography(src, dst)
        assert H[2, 2] == 1.0
        assert np.abs(apply_homography(H, src) - dst).max() < 1e-6
        back = solve_homography(dst, src)
        comp = back @ H
        np.testing.assert_allclose(comp / comp[2, 2], np.eye(3), atol=1e-6)


def test_homography_rejects_collinear():
    bad = np.array([[0, 0], [1, 1], [2, 2], [0, 3]], float)
    with pytest.raises(DegenerateQuadError):
        solve_homography(UNIT, bad)


# -- perspective -----------------------------------------------------------


@pytest.mark.parametrize("orientation", ["top", "bottom", "left", "right"])
def test_perspective_zero_level_is_identity(rand_image, orientation):
    img = rand_image(20, 24)
    np.testing.assert_array_equal(perspective_distort(img, orientation, 0), img)


def test_perspective_top_corner_mapping():
    src, dst = trapezoid(400, 300, "top", 10)
    np.testing.assert_array_equal(dst[0], [100, 0])
    np.testing.assert_array_equal(dst[1], [399 - 100, 0])
    np.testing.assert_array_equal(dst[2:], src[2:])
    H = solve_homography(src, dst)
    assert np.abs(apply_homography(H, src) - dst).max() < 1e-6


def test_perspective_narrow_side_goes_black():
    img = np.full((40, 40, 3), 200, np.uint8)
    out = perspective_distort(img, "top", 8)
    assert out[0, 0].sum() == 0 and out[0, -1].sum() == 0
    assert np.all(out[-1] == 200)
    assert out.shape == img.shape


@pytest.mark.parametrize("level", [1, 4, 10])
def test_perspective_rotation_equivariance(level):
    img = smooth_image(5, 36)[:32, :32]
    order = ["top", "right", "bottom", "left"]
    for i, orient in enumerate(order):
        rotated = np.rot90(img, k=-1)
        lhs = perspective_distort(rotated, order[(i + 1) % 4], level)
        rhs = np.rot90(perspective_distort(img, orient, level), k=-1)
        assert np.abs(lhs.astype(int) - rhs).max() <= 1


def test_perspective_rejects_collapsed_edge():
    with pytest.raises(DegenerateQuadError):
        perspective_distort(np.zeros((40, 40, 3), np.uint8), "left", 20)
    with pytest.raises(InvalidParameterError):
        perspective_distort(np.zeros((40, 40, 3), np.uint8), "diagonal", 1)
    with pytest.raises(InvalidParameterError):
        perspective_distort(np.zeros((40, 40, 3), np.uint8), "top", -1)


# -- corpus ----------------------------------------------------------------


def test_noise_protocol_corpus_shape(rand_image):
    spec = DistortionSpec("noise", NOISE_LEVELS, variants=5, seed=1)
    out = generate_distortion_set(rand_image(12, 12), spec, "a")
    assert len(out) == 40
    assert [(li, vi) for li, vi, _ in out][:6] == [(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (1, 0)]


def test_blur_protocol_corpus_shape(rand_image):
    spec = DistortionSpec("blur", BLUR_SIGMAS, variants=4, masks=BLUR_MASKS)
    img = rand_image(24, 24)
    out = generate_distortion_set(img, spec, "a")
    assert len(out) == 40
    # the four variants of a level are the four mask sizes
    level0 = [d for li, _, d in out if li == 0]
    expected = [gaussian_blur(img, s, BLUR_SIGMAS[0]) for s in BLUR_MASKS]
    for got, want in zip(level0, expected):
        np.testing.assert_array_equal(got, want)


def test_single_level_single_variant(rand_image):
    spec = DistortionSpec("brightness", (50,), variants=1, seed=3)
    assert len(generate_distortion_set(rand_image(), spec, 0)) == 1


def test_corpus_is_reproducible(rand_image):
    img = rand_image(16, 16)
    for spec in [
        DistortionSpec("noise", (25, 100), variants=3, seed=7),
        DistortionSpec("brightness", (25, 100), variants=3, seed=7),
        DistortionSpec("perspective", (1, 3), variants=4),
    ]:
        a = generate_distortion_set(img, spec, "img")
        b = generate_distortion_set(img, spec, "img")
        assert all(x[2].tobytes() == y[2].tobytes() for x, y in zip(a, b))
        assert all(d.shape == img.shape for _, _, d in a)


def test_variant_seeds_are_distinct():
    seeds = {derive_seed(1, "img", li, vi) for li in range(8) for vi in range(5)}
    assert len(seeds) == 40
    assert derive_seed(1, "a", 0, 0) != derive_seed(1, "b", 0, 0)
    assert derive_seed(1, "a", 0, 0) == derive_seed(1, "a", 0, 0)
    assert all(0 <= s < 2**64 for s in seeds)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(family="noise", levels=()),
        dict(family="noise", levels=(50, 25)),
        dict(family="noise", levels=(25,), variants=0),
        dict(family="noise", levels=(300,)),
        dict(family="blur", levels=(1.0,), masks=(4,)),
        dict(family="fog", levels=(1,)),
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(InvalidParameterError):
        DistortionSpec(**kwargs)


def test_write_corpus_layout_and_manifest(tmp_path, rand_image):
    img = rand_image(12, 12)
    spec = DistortionSpec("noise", (25, 50), variants=2, seed=4)
    manifest = write_corpus({"cat": img}, [spec], tmp_path)
    assert (tmp_path / "cat" / "noise" / "25" / "1.png").exists()
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == manifest
    assert len(manifest["entries"]) == 4
    entry = manifest["entries"][3]
    expected = generate_distortion_set(img, spec, "cat")[3][2]
    assert entry["sha256"] == hashlib.sha256(expected.tobytes()).hexdigest()
    assert entry["seed"] == derive_seed(4, "cat", 1, 1)
