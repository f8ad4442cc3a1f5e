"""Evaluation metrics: PSNR, SSIM, mean angular error for normals,
affine-aligned absolute mean relative error for depth, and WHDR over
synthesized pairwise reflectance judgments.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import UsageError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
WHDR_DELTA = 0.10


def psnr(pred, gt, data_range=1.0):
    """10*log10(range^2 / MSE), capped at 99 dB (exact-match sentinel)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise UsageError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(data_range**2 / mse), PSNR_CAP_DB)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=-1)
    return img


def ssim(pred, gt):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) on unit
    range; color inputs are converted to grayscale by channel mean, and
    statistics use valid-mode windows (no padding)."""
    x = _to_gray(pred)
    y = _to_gray(gt)
    if x.shape != y.shape:
        raise UsageError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise UsageError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = _gaussian_window()
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    xx = convolve2d(x * x, w, mode="valid") - mu_x**2
    yy = convolve2d(y * y, w, mode="valid") - mu_y**2
    xy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (xx + yy + SSIM_C2)
    return float(np.mean(num / den))


def angular_error(pred_normals, gt_normals, mask=None):
    """Mean angle in degrees between unit normal maps over valid pixels."""
    p = np.asarray(pred_normals, dtype=np.float64)
    g = np.asarray(gt_normals, dtype=np.float64)
    if p.shape != g.shape:
        raise UsageError(f"shape mismatch {p.shape} vs {g.shape}")
    if mask is None:
        mask = np.ones(p.shape[:-1], dtype=bool)
    p = p[mask]
    g = g[mask]
    for name, arr in (("pred", p), ("gt", g)):
        norms = np.linalg.norm(arr, axis=-1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-3:
            raise UsageError(f"{name} normals are not unit length")
    # renormalize so float32 storage drift cannot register as angle
    p = p / np.linalg.norm(p, axis=-1, keepdims=True)
    g = g / np.linalg.norm(g, axis=-1, keepdims=True)
    dots = np.clip(np.sum(p * g, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())


def amre(pred_depth, gt_depth, mask=None, align=True):
    """Mean |pred - gt| / gt, optionally after least-squares scale+shift
    alignment of the prediction; falls back to scale-only when the
    alignment system is degenerate (constant prediction)."""
    p = np.asarray(pred_depth, dtype=np.float64).reshape(-1)
    g = np.asarray(gt_depth, dtype=np.float64).reshape(-1)
    if p.shape != g.shape:
        raise UsageError("depth shape mismatch")
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        p, g = p[m], g[m]
    if g.size == 0:
        raise UsageError("no valid pixels for depth evaluation")
    if g.min() <= 0:
        raise UsageError("ground-truth depth must be positive")
    if align:
        a = np.stack([p, np.ones_like(p)], axis=1)
        if np.ptp(p) < 1e-12:
            denom = float(p @ p)
            scale = float(p @ g) / denom if denom > 0 else 1.0
            p = scale * p
        else:
            (scale, shift), *_ = np.linalg.lstsq(a, g, rcond=None)
            p = scale * p + shift
    return float(np.mean(np.abs(p - g) / g))


@dataclass
class Judgment:
    pixel_a: tuple  # (row, col)
    pixel_b: tuple
    label: str  # a_darker | b_darker | equal
    weight: float = 1.0


@dataclass
class JudgmentSet:
    judgments: list
    delta: float = WHDR_DELTA


LABELS = ("a_darker", "b_darker", "equal")


def _luminance(albedo, pixel):
    r, c = pixel
    return float(np.mean(albedo[r, c]))


def classify_pair(lum_a, lum_b, delta):
    """Label from the luminance ratio; None when the denominator is zero."""
    if lum_b == 0.0:
        return None
    ratio = lum_a / lum_b
    if ratio < 1.0 / (1.0 + delta):
        return "a_darker"
    if ratio > 1.0 + delta:
        return "b_darker"
    return "equal"


def whdr(pred_albedo, judgment_set):
    """Weighted fraction of judgments the predicted albedo disagrees with.

    Pairs whose predicted denominator luminance is zero are skipped; the
    skip count is reported alongside the rate as (whdr, skipped).
    """
    albedo = np.asarray(pred_albedo, dtype=np.float64)
    h, w = albedo.shape[:2]
    err = 0.0
    total = 0.0
    skipped = 0
    for j in judgment_set.judgments:
        if j.label not in LABELS:
            raise UsageError(f"invalid judgment label {j.label!r}")
        if j.weight <= 0:
            raise UsageError("judgment weights must be positive")
        for pix in (j.pixel_a, j.pixel_b):
            if not (0 <= pix[0] < h and 0 <= pix[1] < w):
                raise UsageError(f"judgment pixel {pix} outside image bounds")
        pred_label = classify_pair(
            _luminance(albedo, j.pixel_a), _luminance(albedo, j.pixel_b), judgment_set.delta
        )
        if pred_label is None:
            skipped += 1
            continue
        if pred_label != j.label:
            err += j.weight
        total += j.weight
    rate = err / total if total > 0 else 0.0
    return rate, skipped


def synthesize_judgments(gt_albedo, n_pairs, seed, delta=WHDR_DELTA):
    """Sample pixel pairs uniformly and label them from the ground-truth
    albedo with the same ratio threshold the metric uses."""
    albedo = np.asarray(gt_albedo, dtype=np.float64)
    h, w = albedo.shape[:2]
    rng = np.random.default_rng(seed)
    judgments = []
    while len(judgments) < n_pairs:
        a = (int(rng.integers(0, h)), int(rng.integers(0, w)))
        b = (int(rng.integers(0, h)), int(rng.integers(0, w)))
        if a == b:
            continue
        label = classify_pair(_luminance(albedo, a), _luminance(albedo, b), delta)
        if label is None:
            continue
        judgments.append(Judgment(pixel_a=a, pixel_b=b, label=label, weight=1.0))
    return JudgmentSet(judgments=judgments, delta=delta)
