#!/usr/bin/env python3
#
# Image and depth quality measures
#
# Images are (H, W, 3) linear RGB arrays with values in [0, 1]. Gradient
# variants return the derivative of the measure with respect to their
# first argument.
#
# October 2026

from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage
from scipy.signal import convolve2d, correlate2d
from scipy.special import expit

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MASK_STD_FLOOR = 1e-3
NR_SHARPNESS_SCALE = 1e-3
EXPOSURE_RANGE = (0.02, 0.98)


class ShapeMismatch(ValueError):
    pass


class TooSmall(ValueError):
    pass


class DegenerateDepth(ValueError):
    pass


class EmptyBackground(ValueError):
    pass


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ShapeMismatch(f"Shapes differ: {sorted(shapes)}")


def _gray(img):
    img = np.asarray(img, dtype=float)
    return img.mean(axis=2) if img.ndim == 3 else img


def psnr(a, b, mask=None):
    """Peak signal to noise ratio in dB for a dynamic range of 1.

    With a mask, only the masked pixels enter the mean squared error.
    Identical images report PSNR_CAP."""
    _check_shapes(a, b)
    err = (np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != err.shape[:2]:
            raise ShapeMismatch("Mask does not match the images.")
        err = err[mask]
    if err.size == 0:
        raise ValueError("No pixel to compare.")
    mse = err.mean()
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(1 / mse)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_terms(x, y):
    if min(x.shape) < SSIM_WINDOW:
        raise TooSmall(f"SSIM needs images of at least {SSIM_WINDOW} pixels per side.")
    w = gaussian_window()

    def filt(img):
        return correlate2d(img, w, mode="valid")

    mx, my = filt(x), filt(y)
    ex2, ey2, exy = filt(x * x), filt(y * y), filt(x * y)
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    a1 = 2 * mx * my + c1
    a2 = 2 * (exy - mx * my) + c2
    b1 = mx**2 + my**2 + c1
    b2 = (ex2 - mx**2) + (ey2 - my**2) + c2
    return w, mx, my, a1, a2, b1, b2


def ssim(a, b):
    """Mean local SSIM of the grayscale (channel mean) images."""
    _check_shapes(a, b)
    _, _, _, a1, a2, b1, b2 = _ssim_terms(_gray(a), _gray(b))
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(a, b):
    """SSIM and its gradient with respect to `a`."""
    _check_shapes(a, b)
    x, y = _gray(a), _gray(b)
    w, mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    n = s.size

    d_mx = (2 * my * (a2 - a1) / (b1 * b2) - 2 * mx * s * (1 / b1 - 1 / b2)) / n
    d_exy = 2 * a1 / (b1 * b2) / n
    d_ex2 = -s / b2 / n

    def adj(g):
        return convolve2d(g, w, mode="full")

    gx = adj(d_mx) + 2 * x * adj(d_ex2) + y * adj(d_exy)
    if np.ndim(a) == 3:
        gx = np.repeat(gx[..., None] / np.shape(a)[2], np.shape(a)[2], axis=2)
    return float(s.mean()), gx


def pearson_depth_loss(d_render, d_pseudo, valid_mask=None):
    return pearson_depth_loss_with_grad(d_render, d_pseudo, valid_mask)[0]


def pearson_depth_loss_with_grad(d_render, d_pseudo, valid_mask=None):
    """1 - Pearson correlation of two depth maps over the valid pixels.

    The gradient is taken with respect to `d_render`, the pseudo depth being
    a constant."""
    _check_shapes(d_render, d_pseudo)
    d_render = np.asarray(d_render, dtype=float)
    d_pseudo = np.asarray(d_pseudo, dtype=float)
    if valid_mask is None:
        valid_mask = np.ones(d_render.shape, dtype=bool)
    else:
        valid_mask = np.asarray(valid_mask, dtype=bool)
        _check_shapes(d_render, valid_mask)

    x, y = d_render[valid_mask], d_pseudo[valid_mask]
    if x.size < 2:
        raise DegenerateDepth("Fewer than 2 valid depth pixels.")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateDepth("Depth map is constant over the valid pixels.")

    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = xc @ xc, yc @ yc
    norm = np.sqrt(sxx * syy)
    r = np.clip(xc @ yc / norm, -1.0, 1.0)

    grad = np.zeros(d_render.shape)
    grad[valid_mask] = -(yc / norm - r * xc / sxx)
    return float(1 - r), grad


@dataclass(frozen=True)
class MetricWeights:
    ssim: float = 0.4
    perceptual: float = 0.4
    nr_quality: float = 0.2

    def __post_init__(self):
        vals = (self.ssim, self.perceptual, self.nr_quality)
        if min(vals) < 0 or abs(sum(vals) - 1) > 1e-9:
            raise ValueError(f"Metric weights must be nonnegative and sum to 1: {vals}")


@dataclass(frozen=True)
class MetricReport:
    ssim: float
    perceptual: float
    nr_quality: float
    composite: float

    def __repr__(self):
        return (
            f"Report<ssim={self.ssim:.4f} perc={self.perceptual:.4f} "
            f"nr={self.nr_quality:.4f} -> {self.composite:.4f}>"
        )

    def as_dict(self):
        return asdict(self)


class MetricPlugin(Protocol):
    def perceptual_distance(self, a, b) -> float: ...

    def nr_score(self, img) -> float: ...


def _downsample(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _gradient_magnitude(img):
    return np.hypot(ndimage.sobel(img, axis=0), ndimage.sobel(img, axis=1))


def builtin_perceptual(a, b, scales=3):
    """Mean absolute difference of Sobel gradient magnitudes of the
    grayscale images, averaged over `scales` dyadic scales (2x2 box
    downsampling between scales)."""
    _check_shapes(a, b)
    x, y = _gray(a), _gray(b)
    dist = []
    for _ in range(scales):
        dist.append(np.mean(np.abs(_gradient_magnitude(x) - _gradient_magnitude(y))))
        if min(x.shape) < 2:
            break
        x, y = _downsample(x), _downsample(y)
    return float(np.mean(dist))


def builtin_nr_score(img):
    """Sharpness times exposure validity, in [0, 1].

    sharpness = 2 * logistic(var(laplacian(gray)) / NR_SHARPNESS_SCALE) - 1
    exposure  = fraction of channel values inside EXPOSURE_RANGE
    score     = sharpness * (0.5 + 0.5 * exposure)"""
    img = np.asarray(img, dtype=float)
    sharpness = 2 * expit(np.var(ndimage.laplace(_gray(img))) / NR_SHARPNESS_SCALE) - 1
    lo, hi = EXPOSURE_RANGE
    exposure = np.mean((img >= lo) & (img <= hi))
    return float(sharpness * (0.5 + 0.5 * exposure))


class BuiltinMetrics:
    """Deterministic stand-ins for a learned perceptual distance and a
    learned no-reference quality scorer."""

    name = "builtin"

    def __repr__(self):
        return "BuiltinMetrics<>"

    def perceptual_distance(self, a, b):
        return builtin_perceptual(a, b)

    def nr_score(self, img):
        return builtin_nr_score(img)


def composite_score(render, reference, plugin=None, weights=None):
    plugin = plugin or BuiltinMetrics()
    weights = weights or MetricWeights()
    _check_shapes(render, reference)
    s = ssim(render, reference)
    p = float(plugin.perceptual_distance(render, reference))
    q = float(plugin.nr_score(render))
    composite = weights.ssim * (1 - s) + weights.perceptual * p + weights.nr_quality * (1 - q)
    return MetricReport(s, p, q, composite)


def propagate_background_mask(teacher_img, teacher_mask, student_img, tau):
    """Background mask of a student view from the teacher's background.

    `teacher_mask` is True on teacher background pixels. Student colors at
    those coordinates give a per-channel mean and standard deviation (the
    latter floored at MASK_STD_FLOOR); a student pixel is background when
    every channel lies strictly within tau standard deviations of the mean."""
    _check_shapes(teacher_img, student_img)
    teacher_mask = np.asarray(teacher_mask, dtype=bool)
    if teacher_mask.shape != np.shape(student_img)[:2]:
        raise ShapeMismatch("Mask does not match the images.")
    if not teacher_mask.any():
        raise EmptyBackground("Teacher mask has no background pixel.")

    student = np.asarray(student_img, dtype=float)
    if student.ndim == 2:
        student = student[..., None]
    samples = student[teacher_mask]
    mu = samples.mean(axis=0)
    sigma = np.maximum(samples.std(axis=0), MASK_STD_FLOOR)
    return np.all(np.abs(student - mu) < tau * sigma, axis=-1)
