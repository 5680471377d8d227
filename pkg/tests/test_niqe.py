import math

import numpy as np
import pytest
from scipy.special import gamma as G

from dualnda.data import make_synthetic
from dualnda.errors import DegenerateInputError, DomainError, FitError
from dualnda.niqe import (ALPHA_GRID, NiqeModel, NiqeSettings, fit_aggd, fit_niqe_model, load_niqe_model, mscn,
                          niqe_distance, niqe_features, niqe_score, niqe_scores, patch_grid, save_niqe_model,
                          to_gray)


@pytest.fixture(scope="module")
def corpus():
    return make_synthetic("rotated_bar", 160, 32, 0.0, 5)


@pytest.fixture(scope="module")
def model(corpus):
    return fit_niqe_model(corpus.images[:120])


def mscn_oracle(gray):
    """Direct 7x7 loop with mirrored borders."""
    x = np.arange(-3, 4)
    k1 = np.exp(-0.5 * x * x / (7 / 6) ** 2)
    k = np.outer(k1, k1)
    k /= k.sum()
    pad = np.pad(gray, 3, mode="symmetric")
    out = np.empty_like(gray)
    for i in range(gray.shape[0]):
        for j in range(gray.shape[1]):
            w = pad[i:i + 7, j:j + 7]
            mu = (k * w).sum()
            sd = math.sqrt(abs((k * w * w).sum() - mu * mu))
            out[i, j] = (gray[i, j] - mu) / (sd + 1.0)
    return out


def aggd_oracle(x):
    x = np.asarray(x, dtype=np.float64)
    sl = math.sqrt(np.mean(x[x < 0] ** 2))
    sr = math.sqrt(np.mean(x[x >= 0] ** 2))
    g = sl / sr
    r = np.mean(np.abs(x)) ** 2 / np.mean(x * x)
    rn = r * (g ** 3 + 1) * (g + 1) / (g ** 2 + 1) ** 2
    rho = G(2 / ALPHA_GRID) ** 2 / (G(1 / ALPHA_GRID) * G(3 / ALPHA_GRID))
    a = ALPHA_GRID[np.argmin((rho - rn) ** 2)]
    c = math.sqrt(G(1 / a) / G(3 / a))
    return a, c * sl, c * sr


def test_to_gray_luma():
    img = np.stack([np.full((8, 8), 1.0), np.full((8, 8), -1.0), np.full((8, 8), -1.0)])
    assert np.allclose(to_gray(img), 0.299 * 255)
    with pytest.raises(DomainError):
        to_gray(np.zeros((2, 8, 8)))


def test_mscn_matches_oracle(corpus):
    gray = to_gray(corpus.images[0])
    np.testing.assert_allclose(mscn(gray), mscn_oracle(gray), atol=1e-10)


def test_mscn_properties():
    assert not mscn(np.full((9, 9), 42.0)).any()
    with pytest.raises(DomainError):
        mscn(np.zeros((6, 20)))
    big = to_gray(make_synthetic("rotated_bar", 100, 64, 0.0, 0).images[0])
    assert abs(mscn(big).mean()) < 0.05
    # the +1 stabilizer makes the map depend on intensity scale
    assert not np.array_equal(mscn(big), mscn(2 * big))


def test_fit_aggd_oracle_and_gaussian():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(100_000)
    a, bl, br = fit_aggd(x)
    assert 1.8 <= a <= 2.2 and abs(bl / br - 1) < 0.05
    skew = np.where(x < 0, 0.5 * x, 2.0 * x) ** 3
    for s in (x, skew, rng.laplace(size=5000)):
        np.testing.assert_allclose(fit_aggd(s), aggd_oracle(s), rtol=1e-12)


def test_fit_aggd_symmetry_and_scaling():
    rng = np.random.default_rng(1)
    x = np.where(rng.random(4000) < 0.4, -rng.gamma(2.0, 1.0, 4000), rng.gamma(1.5, 2.0, 4000))
    a, bl, br = fit_aggd(x)
    a2, bl2, br2 = fit_aggd(-x)
    assert a == a2 and bl == pytest.approx(br2, rel=1e-12) and br == pytest.approx(bl2, rel=1e-12)
    a3, bl3, br3 = fit_aggd(3.0 * x)
    assert abs(a3 - a) <= 0.001 + 1e-12
    assert bl3 == pytest.approx(3 * bl, rel=1e-9) and br3 == pytest.approx(3 * br, rel=1e-9)
    with pytest.raises(DegenerateInputError):
        fit_aggd(np.zeros(32))
    with pytest.raises(DomainError):
        fit_aggd(np.ones(8))


def test_features_shape_and_tiling(corpus):
    assert patch_grid(64, 64, 16) == (4, 4)
    img64 = make_synthetic("rotated_bar", 100, 64, 0.0, 0).images[0]
    assert niqe_features(img64, 16, 0.0).shape == (16, 36)
    f = niqe_features(corpus.images[1], 16, 0.0)
    assert f.shape[1] == 36 and len(f) <= 4
    assert len(niqe_features(img64, 16, 0.75)) < 16
    with pytest.raises(DegenerateInputError):
        niqe_features(np.zeros((1, 32, 32)), 16, 0.0)


def test_model_fit_deterministic_and_psd(corpus, model):
    again = fit_niqe_model(corpus.images[:120])
    assert np.array_equal(model.feature_mean, again.feature_mean)
    assert np.array_equal(model.feature_cov, again.feature_cov)
    cov = model.feature_cov
    assert np.allclose(cov, cov.T, atol=1e-9)
    assert np.linalg.eigvalsh(cov).min() >= -1e-8
    assert model.feature_mean.shape == (36,)
    with pytest.raises(FitError):
        fit_niqe_model(corpus.images[:20])


def test_score_properties(corpus, model):
    assert niqe_distance(model, model.feature_mean, model.feature_cov) == pytest.approx(0.0, abs=1e-9)
    held = corpus.images[120:]
    s1, failed = niqe_scores(model, held)
    s2, _ = niqe_scores(model, held)
    assert np.array_equal(s1, s2, equal_nan=True) and failed == 0
    assert np.all(s1 >= 0)
    noise = np.random.default_rng(0).uniform(-1, 1, (20, 1, 32, 32))
    sn, _ = niqe_scores(model, noise)
    assert sn.min() > np.median(s1)


def test_degenerate_scored_as_failure(model):
    imgs = np.zeros((3, 1, 32, 32))
    imgs[1] = np.random.default_rng(0).uniform(-1, 1, (1, 32, 32))
    s, failed = niqe_scores(model, imgs)
    assert failed == 2 and np.isnan(s[0]) and np.isfinite(s[1])


def test_threshold_filter_monotone(corpus, model):
    s, _ = niqe_scores(model, corpus.images[120:])
    sizes = [int((s > c).sum()) for c in np.linspace(s.min() - 1, s.max() + 1, 30)]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_model_roundtrip(model, tmp_path):
    save_niqe_model(model, tmp_path / "n.bin")
    back = load_niqe_model(tmp_path / "n.bin")
    assert np.array_equal(back.feature_cov, model.feature_cov)
    img = np.random.default_rng(3).uniform(-1, 1, (1, 32, 32))
    assert niqe_score(back, img) == niqe_score(model, img)
    save_niqe_model(back, tmp_path / "m.bin")
    assert (tmp_path / "n.bin").read_bytes() == (tmp_path / "m.bin").read_bytes()
