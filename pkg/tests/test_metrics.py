import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from curigs import metrics as M

from conftest import numeric_grad


def checkerboard(n=32, cell=4):
    yy, xx = np.mgrid[:n, :n]
    board = (((yy // cell) + (xx // cell)) % 2).astype(float)
    return np.repeat(board[..., None], 3, axis=2) * 0.8 + 0.1


def blur(img, sigma):
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))


def test_psnr_examples():
    a = np.zeros((8, 8, 3))
    assert M.psnr(a, a) == M.PSNR_CAP
    assert M.psnr(a, a + 0.1) == pytest.approx(20.0)
    mask = np.zeros((8, 8), dtype=bool)
    mask[:2] = True
    b = a.copy()
    b[4:] = 1.0
    assert M.psnr(b, a, mask=mask) == M.PSNR_CAP
    with pytest.raises(M.ShapeMismatch):
        M.psnr(a, np.zeros((8, 7, 3)))


def test_ssim_identity_and_symmetry(rng):
    a = rng.uniform(0, 1, (20, 24, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert M.ssim(a, a) == pytest.approx(1.0)
    assert M.ssim(a, b) == pytest.approx(M.ssim(b, a))
    assert M.ssim(a, b) < 1


def test_ssim_orders_blur_levels():
    img = checkerboard()
    scores = [M.ssim(img, blur(img, s)) for s in (0.5, 1.0, 2.0, 4.0)]
    assert np.all(np.diff(scores) < 0)


def test_ssim_needs_a_full_window():
    with pytest.raises(M.TooSmall):
        M.ssim(np.zeros((10, 30, 3)), np.zeros((10, 30, 3)))


def test_ssim_gradient(rng):
    a = rng.uniform(0, 1, (13, 14, 3))
    b = rng.uniform(0, 1, (13, 14, 3))
    value, grad = M.ssim_with_grad(a, b)
    assert value == pytest.approx(M.ssim(a, b))
    numeric = numeric_grad(lambda: M.ssim(a, b), a, h=1e-5)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)


@given(
    st.integers(0, 2**31),
    st.floats(0.1, 10),
    st.floats(-5, 5),
)
def test_pearson_ignores_affine_changes(seed, scale, shift):
    rng = np.random.default_rng(seed)
    d = rng.uniform(1, 5, (6, 7))
    assert M.pearson_depth_loss(d, scale * d + shift) == pytest.approx(0, abs=1e-9)
    assert M.pearson_depth_loss(d, -scale * d + shift) == pytest.approx(2, abs=1e-9)
    e = rng.uniform(1, 5, d.shape)
    loss = M.pearson_depth_loss(d, e)
    assert 0 <= loss <= 2
    assert M.pearson_depth_loss(scale * d + shift, e) == pytest.approx(loss, abs=1e-9)


def test_pearson_gradient(rng):
    d = rng.uniform(1, 5, (5, 6))
    e = rng.uniform(1, 5, (5, 6))
    mask = rng.random((5, 6)) < 0.7
    loss, grad = M.pearson_depth_loss_with_grad(d, e, mask)
    numeric = numeric_grad(lambda: M.pearson_depth_loss(d, e, mask), d, h=1e-6)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-8)
    assert not grad[~mask].any()


def test_pearson_degenerate_inputs():
    d = np.arange(12.0).reshape(3, 4)
    with pytest.raises(M.DegenerateDepth):
        M.pearson_depth_loss(d, np.ones((3, 4)))
    mask = np.zeros((3, 4), dtype=bool)
    mask[0, 0] = True
    with pytest.raises(M.DegenerateDepth):
        M.pearson_depth_loss(d, d[::-1], mask)


class FixedPlugin:
    def perceptual_distance(self, a, b):
        return 0.3

    def nr_score(self, img):
        return 0.6


def test_composite_is_a_weighted_sum(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    report = M.composite_score(a, a, plugin=FixedPlugin())
    assert report.ssim == pytest.approx(1.0)
    assert report.composite == pytest.approx(0.4 * 0.0 + 0.4 * 0.3 + 0.2 * 0.4)
    weights = M.MetricWeights(1.0, 0.0, 0.0)
    b = np.clip(a + 0.2, 0, 1)
    report = M.composite_score(b, a, weights=weights)
    assert report.composite == pytest.approx(1 - M.ssim(b, a))
    assert set(report.as_dict()) == {"ssim", "perceptual", "nr_quality", "composite"}


def test_composite_prefers_the_closer_render():
    ref = checkerboard()
    near = M.composite_score(blur(ref, 0.5), ref)
    far = M.composite_score(blur(ref, 3.0), ref)
    assert near.composite < far.composite


def test_metric_weights_are_checked():
    with pytest.raises(ValueError):
        M.MetricWeights(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        M.MetricWeights(1.2, -0.2, 0.0)


def test_builtin_scores():
    img = checkerboard()
    assert M.builtin_perceptual(img, img) == 0.0
    assert M.builtin_perceptual(img, blur(img, 2)) == pytest.approx(
        M.builtin_perceptual(blur(img, 2), img)
    )
    sharp, soft = M.builtin_nr_score(img), M.builtin_nr_score(blur(img, 3))
    assert 0 <= soft < sharp <= 1
    assert M.builtin_nr_score(np.full((16, 16, 3), 0.5)) == 0.0


def background_scene(rng):
    teacher = np.zeros((20, 20, 3))
    teacher[:] = [0.2, 0.3, 0.4]
    teacher_mask = np.ones((20, 20), dtype=bool)
    teacher_mask[6:14, 6:14] = False

    student = np.clip(np.array([0.2, 0.3, 0.4]) + rng.normal(0, 0.01, (20, 20, 3)), 0, 1)
    student[8:12, 8:12] = [0.9, 0.1, 0.1]
    return teacher, teacher_mask, student


def test_mask_marks_the_background(rng):
    teacher, teacher_mask, student = background_scene(rng)
    mask = M.propagate_background_mask(teacher, teacher_mask, student, 6.0)
    assert not mask[8:12, 8:12].any()
    assert mask[:4].all()


def test_mask_grows_with_tau(rng):
    teacher, teacher_mask, student = background_scene(rng)
    masks = [M.propagate_background_mask(teacher, teacher_mask, student, t) for t in (1, 2, 4)]
    for small, big in zip(masks, masks[1:]):
        assert not (small & ~big).any()
    assert masks[0].sum() < masks[-1].sum()


def test_mask_needs_background():
    img = np.zeros((12, 12, 3))
    with pytest.raises(M.EmptyBackground):
        M.propagate_background_mask(img, np.zeros((12, 12), dtype=bool), img, 3.0)
