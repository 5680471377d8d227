"""Naturalness Image Quality Evaluator, fitted on a training corpus.

Images are converted to 0-255 luma, normalized into MSCN coefficients,
cut into non-overlapping patches, and described by asymmetric generalized
Gaussian fits of the coefficients and their four neighbour products at
two scales (18 features per scale). A fitted model is the mean and
covariance of those patch features over a pristine corpus; an image's
score is a Mahalanobis-type distance between its own patch statistics
and the model's. Higher is worse.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import gamma as gamma_fn

from . import persistence
from .errors import DegenerateInputError, DomainError, DualNdaError, FitError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
WINDOW_RADIUS = 3
WINDOW_SIGMA = 7.0 / 6.0
N_FEATURES_PER_SCALE = 18
N_SCALES = 2
COV_RIDGE = 1e-6

ALPHA_GRID = np.linspace(0.2, 10.0, 9801)
_RHO_GRID = gamma_fn(2.0 / ALPHA_GRID) ** 2 / (gamma_fn(1.0 / ALPHA_GRID) * gamma_fn(3.0 / ALPHA_GRID))


class ScoreOverflowError(DualNdaError, ArithmeticError):
    pass


def _gauss_window() -> np.ndarray:
    x = np.arange(-WINDOW_RADIUS, WINDOW_RADIUS + 1, dtype=np.float64)
    w = np.exp(-0.5 * x * x / WINDOW_SIGMA ** 2)
    return w / w.sum()


_WINDOW = _gauss_window()


def to_gray(image: np.ndarray) -> np.ndarray:
    """Map a C x H x W image in [-1, 1] (or an H x W array) to 0-255 luma."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] == 3:
            img = np.tensordot(LUMA_WEIGHTS, img, axes=(0, 0))
        elif img.shape[0] == 1:
            img = img[0]
        else:
            raise DomainError(f"expected 1 or 3 channels, got {img.shape[0]}")
    elif img.ndim != 2:
        raise DomainError(f"expected a 2-D or C x H x W image, got shape {img.shape}")
    return (img + 1.0) * 127.5


def _local_stats(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = ndimage.correlate1d(gray, _WINDOW, axis=0, mode="reflect")
    mu = ndimage.correlate1d(mu, _WINDOW, axis=1, mode="reflect")
    sq = ndimage.correlate1d(gray * gray, _WINDOW, axis=0, mode="reflect")
    sq = ndimage.correlate1d(sq, _WINDOW, axis=1, mode="reflect")
    sd = np.sqrt(np.abs(sq - mu * mu))
    return mu, sd


def mscn(gray: np.ndarray) -> np.ndarray:
    """Mean-subtracted contrast-normalized coefficients, same size as input.

    The +1 stabilizer in the denominator makes the map depend on the
    absolute intensity scale; inputs are expected in 0-255 units.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise DomainError("mscn expects a single-channel 2-D image")
    size = 2 * WINDOW_RADIUS + 1
    if min(gray.shape) < size:
        raise DomainError(f"image {gray.shape} is smaller than the {size}x{size} window")
    return _mscn_with_sd(gray)[0]


def _mscn_with_sd(gray):
    # centering first makes a constant image map to exact zeros
    g = gray - gray.mean()
    mu, sd = _local_stats(g)
    return (g - mu) / (sd + 1.0), sd


def _aggd_batch(x: np.ndarray):
    """AGGD moment-matching fit for each row of ``x`` (rows = samples sets).

    Returns (alpha, beta_left, beta_right, valid) arrays; rows that are
    entirely zero are flagged invalid.
    """
    x = np.asarray(x, dtype=np.float64)
    sq = x * x
    neg = x < 0
    n_left = neg.sum(axis=1)
    n_right = x.shape[1] - n_left
    left_ms = np.where(n_left > 0, (sq * neg).sum(axis=1) / np.maximum(n_left, 1), 0.0)
    right_ms = np.where(n_right > 0, (sq * ~neg).sum(axis=1) / np.maximum(n_right, 1), 0.0)
    sl, sr = np.sqrt(left_ms), np.sqrt(right_ms)
    mean_sq = sq.mean(axis=1)
    valid = mean_sq > 0
    safe_sq = np.where(valid, mean_sq, 1.0)
    r_hat = np.abs(x).mean(axis=1) ** 2 / safe_sq
    # the correction factor is symmetric under gamma -> 1/gamma
    hi = np.maximum(sl, sr)
    g = np.where(hi > 0, np.minimum(sl, sr) / np.where(hi > 0, hi, 1.0), 1.0)
    r_norm = r_hat * (g ** 3 + 1) * (g + 1) / (g ** 2 + 1) ** 2
    alpha = ALPHA_GRID[_nearest_rho(r_norm)]
    ratio = np.sqrt(gamma_fn(1.0 / alpha) / gamma_fn(3.0 / alpha))
    return alpha, ratio * sl, ratio * sr, valid


def _nearest_rho(r: np.ndarray) -> np.ndarray:
    """Index of the grid point minimizing (rho - r)**2; first index on ties."""
    k = np.searchsorted(_RHO_GRID, r)
    lo = np.clip(k - 1, 0, len(_RHO_GRID) - 1)
    hi = np.clip(k, 0, len(_RHO_GRID) - 1)
    d_lo = (_RHO_GRID[lo] - r) ** 2
    d_hi = (_RHO_GRID[hi] - r) ** 2
    return np.where(d_hi < d_lo, hi, lo)


def fit_aggd(samples) -> tuple[float, float, float]:
    """Fit (alpha, beta_left, beta_right) of an asymmetric generalized Gaussian."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 16:
        raise DomainError(f"fit_aggd needs at least 16 samples, got {x.size}")
    alpha, bl, br, valid = _aggd_batch(x[None])
    if not valid[0]:
        raise DegenerateInputError("fit_aggd received all-zero samples")
    return float(alpha[0]), float(bl[0]), float(br[0])


def _pair_products(m: np.ndarray) -> list[np.ndarray]:
    # horizontal, vertical, main diagonal, anti-diagonal neighbours
    return [
        m * np.roll(m, 1, axis=1),
        m * np.roll(m, 1, axis=0),
        m * np.roll(np.roll(m, 1, axis=0), 1, axis=1),
        m * np.roll(np.roll(m, 1, axis=0), -1, axis=1),
    ]


def _tiles(a: np.ndarray, p: int, rows: int, cols: int) -> np.ndarray:
    a = a[:rows * p, :cols * p]
    return a.reshape(rows, p, cols, p).transpose(0, 2, 1, 3).reshape(rows * cols, p * p)


def _scale_features(m: np.ndarray, p: int, rows: int, cols: int):
    feats, ok = [], np.ones(rows * cols, dtype=bool)
    a, bl, br, valid = _aggd_batch(_tiles(m, p, rows, cols))
    feats += [a, (bl + br) / 2]
    ok &= valid
    for prod in _pair_products(m):
        a, bl, br, valid = _aggd_batch(_tiles(prod, p, rows, cols))
        mean = (br - bl) * gamma_fn(2.0 / a) / gamma_fn(1.0 / a)
        feats += [a, mean, bl, br]
        ok &= valid
    return np.stack(feats, axis=1), ok


def _downsample(gray: np.ndarray) -> np.ndarray:
    h, w = (gray.shape[0] // 2) * 2, (gray.shape[1] // 2) * 2
    g = gray[:h, :w]
    return 0.25 * (g[0::2, 0::2] + g[1::2, 0::2] + g[0::2, 1::2] + g[1::2, 1::2])


def patch_grid(height: int, width: int, patch_size: int) -> tuple[int, int]:
    """Number of full base-scale patch rows and columns."""
    return height // patch_size, width // patch_size


def niqe_features(image, patch_size: int = 16, sharpness_quantile: float = 0.0) -> np.ndarray:
    """Per-patch feature matrix of shape (n_patches, 36).

    Patches whose local-deviation sum falls below ``sharpness_quantile`` of
    the image's patch ranking are dropped, as are patches with an all-zero
    subband.
    """
    if patch_size % 2 or patch_size < 8:
        raise DomainError("patch_size must be an even number >= 8")
    if not 0 <= sharpness_quantile < 1:
        raise DomainError("sharpness_quantile must lie in [0, 1)")
    gray = to_gray(image) if np.ndim(image) == 3 else np.asarray(image, dtype=np.float64)
    rows, cols = patch_grid(*gray.shape, patch_size)
    if rows == 0 or cols == 0 or min(gray.shape) // 2 < 2 * WINDOW_RADIUS + 1:
        raise DomainError(f"image {gray.shape} is too small for patch size {patch_size}")

    m1, sd1 = _mscn_with_sd(gray)
    m2, _ = _mscn_with_sd(_downsample(gray))
    f1, ok1 = _scale_features(m1, patch_size, rows, cols)
    f2, ok2 = _scale_features(m2, patch_size // 2, rows, cols)
    keep = ok1 & ok2
    if sharpness_quantile > 0:
        sharp = _tiles(sd1, patch_size, rows, cols).sum(axis=1)
        keep &= sharp >= np.quantile(sharp, sharpness_quantile)
    if not keep.any():
        raise DegenerateInputError("no patch survived sharpness/degeneracy screening")
    return np.hstack([f1, f2])[keep]


@dataclass(frozen=True)
class NiqeSettings:
    patch_size: int = 16
    sharpness_quantile: float = 0.75
    score_sharpness_quantile: float = 0.0


@dataclass
class NiqeModel:
    feature_mean: np.ndarray
    feature_cov: np.ndarray
    patch_size: int
    sharpness_quantile: float
    score_sharpness_quantile: float = 0.0
    scales: int = N_SCALES
    fit_manifest: dict = field(default_factory=dict)

    def score(self, image) -> float:
        return niqe_score(self, image)


def corpus_hash(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images, dtype="<f4").tobytes()).hexdigest()


def fit_niqe_model(images, settings: NiqeSettings = NiqeSettings()) -> NiqeModel:
    """Fit the pristine feature statistics on a corpus (N x C x H x W or a Dataset)."""
    images = getattr(images, "images", images)
    if len(images) < 50:
        raise FitError(f"NIQE fit needs at least 50 images, got {len(images)}")
    feats, skipped = [], 0
    for img in images:
        try:
            feats.append(niqe_features(img, settings.patch_size, settings.sharpness_quantile))
        except DegenerateInputError:
            skipped += 1
    if not feats:
        raise FitError("every image was degenerate")
    x = np.vstack(feats)
    if len(x) < 2:
        raise FitError("need at least two surviving patches to form a covariance")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    cov = 0.5 * (cov + cov.T)
    if np.linalg.matrix_rank(cov) == 0:
        raise FitError("feature covariance has rank 0")
    manifest = {
        "corpus_sha256": corpus_hash(images),
        "n_images": int(len(images)),
        "n_skipped": skipped,
        "n_patches": int(len(x)),
        "patch_size": settings.patch_size,
        "sharpness_quantile": settings.sharpness_quantile,
        "note": "patch size scaled down from the 96 px convention for small images",
    }
    return NiqeModel(mu, cov, settings.patch_size, settings.sharpness_quantile,
                     settings.score_sharpness_quantile, N_SCALES, manifest)


def niqe_distance(model: NiqeModel, mean: np.ndarray, cov: np.ndarray) -> float:
    d = model.feature_mean - mean
    c = 0.5 * (model.feature_cov + cov) + COV_RIDGE * np.eye(len(d))
    q = float(d @ np.linalg.pinv(c, hermitian=True) @ d)
    if not math.isfinite(q):
        raise ScoreOverflowError("NIQE distance is not finite")
    return math.sqrt(max(q, 0.0))


def niqe_score(model: NiqeModel, image) -> float:
    feats = niqe_features(image, model.patch_size, model.score_sharpness_quantile)
    if not np.all(np.isfinite(feats)):
        raise ScoreOverflowError("non-finite NIQE features")
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False) if len(feats) > 1 else np.zeros((feats.shape[1],) * 2)
    return niqe_distance(model, mean, cov)


def niqe_scores(model: NiqeModel, images) -> tuple[np.ndarray, int]:
    """Score a batch; degenerate or overflowing images get NaN. Returns (scores, n_failed)."""
    out = np.empty(len(images))
    failed = 0
    for i, img in enumerate(images):
        try:
            out[i] = niqe_score(model, img)
        except (DegenerateInputError, ScoreOverflowError):
            out[i] = np.nan
            failed += 1
    return out, failed


def save_niqe_model(model: NiqeModel, path) -> None:
    manifest = {
        "settings": {"patch_size": model.patch_size, "sharpness_quantile": model.sharpness_quantile,
                     "score_sharpness_quantile": model.score_sharpness_quantile, "scales": model.scales},
        "fit_manifest": model.fit_manifest,
    }
    persistence.save(path, "niqe_model", manifest,
                     {"mean": np.asarray(model.feature_mean, np.float64),
                      "cov": np.asarray(model.feature_cov, np.float64)})


def load_niqe_model(path) -> NiqeModel:
    manifest, t = persistence.load(path, "niqe_model")
    s = manifest["settings"]
    return NiqeModel(t["mean"], t["cov"], s["patch_size"], s["sharpness_quantile"],
                     s["score_sharpness_quantile"], s["scales"], manifest["fit_manifest"])
