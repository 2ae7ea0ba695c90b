"""No-reference image quality scoring for grayscale images.

An image is reduced to local-contrast-normalized (MSCN) coefficients; each
patch yields 18 distribution-fit features per scale (a generalized Gaussian
fit of the coefficients plus asymmetric fits of four neighbor products) at
two scales.  Quality is the Mahalanobis-style distance between the feature
Gaussian of a test image and a pristine-corpus model.

Grayscale convention: 2-D float arrays in [0, 255].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import scipy.special

from .errors import AllPatchesRejected, CorpusTooSmall, ImageTooSmall

# Shape-parameter lookup grid for the moment-matching fits.
_GAMMA_RANGE = np.arange(0.2, 10.001, 0.001)
_G1 = scipy.special.gamma(1.0 / _GAMMA_RANGE)
_G2 = scipy.special.gamma(2.0 / _GAMMA_RANGE)
_G3 = scipy.special.gamma(3.0 / _GAMMA_RANGE)
_PREC_RATIO = _G2 * _G2 / (_G1 * _G3)  # Gamma(2/g)^2 / (Gamma(1/g) Gamma(3/g))

FEATURE_DIM = 36


def _gaussian_window(half_width: int = 3, sigma: float = 7.0 / 6.0) -> np.ndarray:
    x = np.arange(-half_width, half_width + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def mscn(image: np.ndarray, c: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Mean-subtracted contrast-normalized coefficients and the local std map.

    The local mean uses a replicated-edge Gaussian window, so a global
    brightness offset cancels exactly everywhere.
    """
    img = np.asarray(image, dtype=np.float64)
    w = _gaussian_window()
    mu = scipy.ndimage.correlate1d(img, w, axis=0, mode="nearest")
    mu = scipy.ndimage.correlate1d(mu, w, axis=1, mode="nearest")
    e2 = scipy.ndimage.correlate1d(img * img, w, axis=0, mode="nearest")
    e2 = scipy.ndimage.correlate1d(e2, w, axis=1, mode="nearest")
    sigma = np.sqrt(np.maximum(e2 - mu * mu, 0.0))
    return (img - mu) / (sigma + c), sigma


def fit_ggd(x: np.ndarray) -> tuple[float, float]:
    """Moment-matching generalized Gaussian fit -> (shape, variance)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    var = float(np.mean(x * x))
    mean_abs = float(np.mean(np.abs(x)))
    if mean_abs == 0.0:
        return float(_GAMMA_RANGE[-1]), var
    rho = var / (mean_abs * mean_abs)
    idx = int(np.argmin(np.abs(1.0 / _PREC_RATIO - rho)))
    return float(_GAMMA_RANGE[idx]), var


def fit_aggd(x: np.ndarray) -> tuple[float, float, float, float]:
    """Asymmetric generalized Gaussian fit -> (shape, mean, left var, right var)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    left = x[x < 0]
    right = x[x >= 0]
    left_std = np.sqrt(np.mean(left * left)) if left.size else 0.0
    right_std = np.sqrt(np.mean(right * right)) if right.size else 0.0
    if right_std == 0.0:
        gamma_hat = np.inf
    else:
        gamma_hat = left_std / right_std
    e2 = np.mean(x * x)
    if e2 == 0.0:
        return float(_GAMMA_RANGE[-1]), 0.0, 0.0, 0.0
    r_hat = np.mean(np.abs(x)) ** 2 / e2
    if np.isfinite(gamma_hat):
        r_norm = r_hat * ((gamma_hat ** 3 + 1) * (gamma_hat + 1)) / ((gamma_hat ** 2 + 1) ** 2)
    else:
        r_norm = r_hat
    idx = int(np.argmin((_PREC_RATIO - r_norm) ** 2))
    alpha = float(_GAMMA_RANGE[idx])
    g1, g2, g3 = (scipy.special.gamma(k / alpha) for k in (1.0, 2.0, 3.0))
    ratio = np.sqrt(g1 / g3)
    bl = ratio * left_std
    br = ratio * right_std
    mean = (br - bl) * (g2 / g1)
    return alpha, float(mean), float(bl * bl), float(br * br)


def _paired_products(p: np.ndarray):
    return (
        p[:, :-1] * p[:, 1:],      # horizontal
        p[:-1, :] * p[1:, :],      # vertical
        p[:-1, :-1] * p[1:, 1:],   # main diagonal
        p[:-1, 1:] * p[1:, :-1],   # secondary diagonal
    )


def _patch_features(coeffs: np.ndarray) -> np.ndarray:
    alpha, var = fit_ggd(coeffs)
    feats = [alpha, var]
    for prod in _paired_products(coeffs):
        feats.extend(fit_aggd(prod))
    return np.asarray(feats, dtype=np.float64)


def _half_scale(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    a = img[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2])


def image_patch_features(image: np.ndarray, patch: int):
    """Per-patch 36-dim features and full-scale patch sharpness.

    Non-overlapping patches tile from the top-left corner; the second scale
    uses the half-resolution image with half the patch size so both scales
    cover the same area.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ImageTooSmall(f"expected a 2-D grayscale array, got shape {img.shape}")
    if img.shape[0] < patch or img.shape[1] < patch:
        raise ImageTooSmall(f"image {img.shape} too small for one {patch}x{patch} patch")
    coeffs1, sigma1 = mscn(img)
    coeffs2, _ = mscn(_half_scale(img))

    ny, nx = img.shape[0] // patch, img.shape[1] // patch
    half = patch // 2
    feats, sharp = [], []
    for j in range(ny):
        for i in range(nx):
            p1 = coeffs1[j * patch:(j + 1) * patch, i * patch:(i + 1) * patch]
            p2 = coeffs2[j * half:(j + 1) * half, i * half:(i + 1) * half]
            feats.append(np.concatenate([_patch_features(p1), _patch_features(p2)]))
            sharp.append(sigma1[j * patch:(j + 1) * patch, i * patch:(i + 1) * patch].mean())
    return np.asarray(feats), np.asarray(sharp)


@dataclass
class NiqeModel:
    """Pristine feature Gaussian plus the patch/selection settings."""

    mean: np.ndarray
    cov: np.ndarray
    patch_size: int
    sharpness_quantile: float
    regularizer: float = 1e-6

    def validate(self):
        if self.patch_size < 8:
            raise ImageTooSmall(f"patch size must be >= 8, got {self.patch_size}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("model covariance must be symmetric")


def niqe_fit(corpus, patch: int = 16, sharpness_quantile: float = 0.75) -> NiqeModel:
    """Fit the pristine model on a corpus of grayscale images.

    Patches whose local-variance mean falls below the corpus-wide sharpness
    quantile are dropped (ties kept, so flat corpora still fit); the feature
    covariance is ridge-regularized so degenerate corpora stay usable.
    """
    corpus = list(corpus)
    if len(corpus) < 10:
        raise CorpusTooSmall(f"need >= 10 pristine images, got {len(corpus)}")
    if patch < 8:
        raise ImageTooSmall(f"patch size must be >= 8, got {patch}")
    all_feats, all_sharp = [], []
    for img in corpus:
        a = np.asarray(img)
        if a.shape[0] < 2 * patch or a.shape[1] < 2 * patch:
            raise ImageTooSmall(f"pristine image {a.shape} smaller than 2x patch {patch}")
        f, s = image_patch_features(a, patch)
        all_feats.append(f)
        all_sharp.append(s)
    feats = np.concatenate(all_feats)
    sharp = np.concatenate(all_sharp)
    threshold = np.quantile(sharp, sharpness_quantile)
    keep = sharp >= threshold
    if not keep.any():
        raise AllPatchesRejected("sharpness filter rejected every patch")
    kept = feats[keep]
    mean = kept.mean(axis=0)
    if kept.shape[0] > 1:
        cov = np.cov(kept, rowvar=False)
    else:
        cov = np.zeros((FEATURE_DIM, FEATURE_DIM))
    cov = cov + 1e-6 * np.eye(FEATURE_DIM)
    model = NiqeModel(mean, cov, patch, sharpness_quantile)
    model.validate()
    return model


def niqe_score(image: np.ndarray, model: NiqeModel) -> float:
    """Distance of the test image's feature Gaussian from the pristine model."""
    feats, _ = image_patch_features(np.asarray(image), model.patch_size)
    mean2 = feats.mean(axis=0)
    cov2 = np.cov(feats, rowvar=False) if feats.shape[0] > 1 else np.zeros_like(model.cov)
    pooled = (model.cov + cov2) / 2.0 + model.regularizer * np.eye(FEATURE_DIM)
    delta = model.mean - mean2
    try:
        solved = np.linalg.solve(pooled, delta)
    except np.linalg.LinAlgError:
        solved = np.linalg.pinv(pooled) @ delta
    return float(np.sqrt(max(0.0, float(delta @ solved))))


def tensor_to_grayscale(img) -> np.ndarray:
    """3 x H x W tensor in [-1, 1] -> 2-D grayscale array in [0, 255]."""
    a = np.asarray(img.detach().cpu().numpy() if hasattr(img, "detach") else img)
    gray = a.mean(axis=0)
    return (gray + 1.0) * (255.0 / 2.0)
