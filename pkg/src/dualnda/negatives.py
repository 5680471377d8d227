"""Type I / Type II negative samples, the persisted Type II pool, and jigsaw negatives.

Quantiles use linear interpolation between order statistics (numpy's
default method) and every selection is a strict ``>`` against the
threshold, so a value tied with the threshold is dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import persistence
from .data import LabelKind, LabelSpace
from .errors import ConfigError, DomainError
from .niqe import NiqeModel, niqe_scores

log = logging.getLogger(__name__)

MAX_DOUBLINGS = 6

# generator(labels_norm, rng) -> images (n, C, H, W)
GeneratorFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]
# scorer(images) -> (scores, n_failed); NaN marks a failed image
ScorerFn = Callable[[np.ndarray], tuple[np.ndarray, int]]


def quantile(values, q: float) -> float:
    return float(np.quantile(np.asarray(values, dtype=np.float64), q))


def strict_filter(values, q: float) -> tuple[np.ndarray, float]:
    """Mask of values strictly above their q-quantile, and the threshold."""
    values = np.asarray(values, dtype=np.float64)
    c = quantile(values, q)
    return values > c, c


def _check_q(name: str, q: float, lo_open: bool = True) -> None:
    ok = (0 < q < 1) if lo_open else (0 <= q < 1)
    if not ok:
        raise ConfigError(f"{name} must lie in {'(0, 1)' if lo_open else '[0, 1)'}, got {q}")


def type1_select(train_labels, y_anchor: float, q1: float) -> np.ndarray:
    """Indices i with |y_anchor - y_i| strictly above the q1-quantile of those distances.

    An empty result means every distance is tied at or below the
    threshold; the caller should resample its anchor.
    """
    _check_q("q1", q1)
    labels = np.asarray(train_labels, dtype=np.float64)
    if labels.size == 0:
        raise DomainError("type1_select needs at least one training label")
    keep, _ = strict_filter(np.abs(y_anchor - labels), q1)
    return np.flatnonzero(keep)


def type1_draw(train_labels, anchors: np.ndarray, q1: float, u: np.ndarray) -> np.ndarray:
    """For each anchor pick one Type I index, uniformly among type1_select's set.

    ``u`` holds one U[0,1) draw per anchor. Returns -1 where the set is empty.
    """
    labels = np.asarray(train_labels, dtype=np.float64)
    d = np.abs(np.asarray(anchors, dtype=np.float64)[:, None] - labels[None, :])
    c = np.quantile(d, q1, axis=1)
    mask = d > c[:, None]
    counts = mask.sum(axis=1)
    k = np.minimum((u * counts).astype(np.int64), np.maximum(counts - 1, 0))
    # position of the (k+1)-th True in each row
    pos = np.argmax(np.cumsum(mask, axis=1) > k[:, None], axis=1)
    return np.where(counts > 0, pos, -1)


@dataclass
class NegativePool:
    images: np.ndarray          # (n, C, H, W) float32
    labels: np.ndarray          # (n,) normalized, ascending
    scores: np.ndarray          # (n,) NIQE scores
    thresholds: np.ndarray      # (n,) governing threshold of each entry
    ids: np.ndarray             # (n,) generation index
    mode: str                   # "integer" or "continuous"
    threshold_record: dict      # label key -> threshold, or {"global": c}
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        order = np.lexsort((self.ids, self.labels))
        for name in ("images", "labels", "scores", "thresholds", "ids"):
            setattr(self, name, np.asarray(getattr(self, name))[order])

    def __len__(self) -> int:
        return len(self.labels)

    def check_invariants(self) -> None:
        if not np.all(self.scores > self.thresholds):
            raise DomainError("pool entry does not exceed its quantile threshold")
        total = self.manifest.get("n_generated")
        if total is not None and len(self) >= total:
            raise DomainError("pool must be strictly smaller than the generated set")


def _as_scorer(scorer) -> ScorerFn:
    if isinstance(scorer, NiqeModel):
        return lambda imgs: niqe_scores(scorer, imgs)
    return scorer


def _label_key(label_norm: float) -> str:
    return repr(float(label_norm))


def build_type2_integer(generator: GeneratorFn, label_space: LabelSpace, m_per_label: int,
                        q2: float, scorer, seed: int = 0, chunk: int = 1000,
                        source: str = "") -> NegativePool:
    """Per-label NIQE filtering for integer-valued labels."""
    if label_space.kind is not LabelKind.INTEGER_VALUED:
        raise ConfigError("integer-mode pool build needs an integer-valued label space")
    if m_per_label < 10:
        raise ConfigError(f"m_per_label must be at least 10, got {m_per_label}")
    _check_q("q2", q2, lo_open=False)
    score = _as_scorer(scorer)
    root = np.random.SeedSequence([seed, 2])
    keep_img, keep_lab, keep_s, keep_c, keep_id = [], [], [], [], []
    record, n_failed = {}, 0
    for k, (y, ss) in enumerate(zip(label_space.distinct_labels, root.spawn(len(label_space.distinct_labels)))):
        rng = np.random.default_rng(ss)
        imgs, scores = _generate_and_score(generator, score, np.full(m_per_label, y), rng, chunk)
        ok = np.isfinite(scores)
        n_failed += int((~ok).sum())
        if not ok.any():
            continue
        keep, c = strict_filter(scores[ok], q2)
        idx = np.flatnonzero(ok)[keep]
        record[_label_key(y)] = c
        keep_img.append(imgs[idx])
        keep_lab.append(np.full(len(idx), y))
        keep_s.append(scores[idx])
        keep_c.append(np.full(len(idx), c))
        keep_id.append(k * m_per_label + idx)
    manifest = {"mode": "integer", "q2": q2, "m_per_label": m_per_label, "n_labels": len(label_space.distinct_labels),
                "n_generated": m_per_label * len(label_space.distinct_labels), "n_failed": n_failed,
                "seed": seed, "source": source}
    return _assemble(keep_img, keep_lab, keep_s, keep_c, keep_id, "integer", record, manifest)


def build_type2_continuous(generator: GeneratorFn, train_labels, M: int, q2: float, scorer,
                           seed: int = 0, chunk: int = 1000, source: str = "") -> NegativePool:
    """Global NIQE filtering for strictly continuous labels.

    Labels are drawn with replacement from the empirical training labels.
    """
    if M < 100:
        raise ConfigError(f"M must be at least 100, got {M}")
    _check_q("q2", q2, lo_open=False)
    score = _as_scorer(scorer)
    train_labels = np.asarray(train_labels, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    labels = rng.choice(train_labels, size=M, replace=True)
    imgs, scores = _generate_and_score(generator, score, labels, rng, chunk)
    ok = np.isfinite(scores)
    keep, c = strict_filter(scores[ok], q2)
    idx = np.flatnonzero(ok)[keep]
    manifest = {"mode": "continuous", "q2": q2, "M": M, "n_generated": M, "n_failed": int((~ok).sum()),
                "seed": seed, "source": source}
    return _assemble([imgs[idx]], [labels[idx]], [scores[idx]], [np.full(len(idx), c)], [idx],
                     "continuous", {"global": c}, manifest)


def _generate_and_score(generator, score, labels, rng, chunk):
    imgs, scores = [], []
    for s in range(0, len(labels), chunk):
        batch = np.asarray(generator(labels[s:s + chunk], rng), dtype=np.float32)
        sc, _ = score(batch)
        imgs.append(batch)
        scores.append(np.asarray(sc, dtype=np.float64))
    return np.concatenate(imgs), np.concatenate(scores)


def _assemble(imgs, labs, scores, cs, ids, mode, record, manifest) -> NegativePool:
    if not imgs or sum(len(x) for x in labs) == 0:
        raise ConfigError("no generated image survived the quantile filter")
    pool = NegativePool(np.concatenate(imgs), np.concatenate(labs), np.concatenate(scores),
                        np.concatenate(cs), np.concatenate(ids).astype(np.int64), mode, record, manifest)
    pool.manifest["n_kept"] = len(pool)
    return pool


def _vicinity_range(sorted_labels: np.ndarray, t: float, kappa: float) -> tuple[int, int]:
    lo = int(np.searchsorted(sorted_labels, t - kappa, side="left"))
    hi = int(np.searchsorted(sorted_labels, t + kappa, side="right"))
    n = len(sorted_labels)
    # searchsorted works on t +- kappa, which can round differently from |label - t| <= kappa
    while lo > 0 and abs(sorted_labels[lo - 1] - t) <= kappa:
        lo -= 1
    while lo < hi and abs(sorted_labels[lo] - t) > kappa:
        lo += 1
    while hi < n and abs(sorted_labels[hi] - t) <= kappa:
        hi += 1
    while hi > lo and abs(sorted_labels[hi - 1] - t) > kappa:
        hi -= 1
    return lo, hi


def pool_query_many(pool: NegativePool, targets, kappa: float, rng: np.random.Generator,
                    max_doublings: int = MAX_DOUBLINGS) -> tuple[np.ndarray, int]:
    """One uniform draw from the hard vicinity of each target. Returns (indices, widenings)."""
    if len(pool) == 0:
        raise ConfigError("Type II pool is empty")
    targets = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    u = rng.random(len(targets))
    out = np.empty(len(targets), dtype=np.int64)
    widenings, widened = 0, 0
    for i, t in enumerate(targets):
        k = kappa
        lo, hi = _vicinity_range(pool.labels, t, k)
        d = 0
        while lo == hi and d < max_doublings:
            k *= 2.0
            d += 1
            lo, hi = _vicinity_range(pool.labels, t, k)
        if d:
            widenings += d
            widened += 1
            log.debug("empty Type II vicinity at %.5f; widened kappa %d times", t, d)
        if lo == hi:
            out[i] = int(np.argmin(np.abs(pool.labels - t)))
            log.warning("falling back to the nearest pool label for target %.5f", t)
        else:
            out[i] = lo + min(int(u[i] * (hi - lo)), hi - lo - 1)
    if widened:
        log.warning("empty Type II vicinity for %d of %d targets; kappa widened %d times in total",
                    widened, len(targets), widenings)
    return out, widenings


def pool_query_vicinity(pool: NegativePool, y_target: float, kappa: float, rng: np.random.Generator,
                        max_doublings: int = MAX_DOUBLINGS) -> tuple[int, int]:
    idx, w = pool_query_many(pool, [y_target], kappa, rng, max_doublings)
    return int(idx[0]), w


def jigsaw_negative(image: np.ndarray, grid: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle grid x grid tiles by a uniformly random non-identity permutation.

    Returns (shuffled image, permutation); output tile j is input tile perm[j].
    """
    if grid not in (2, 4):
        raise DomainError(f"grid must be 2 or 4, got {grid}")
    image = np.asarray(image)
    c, h, w = image.shape
    if h % grid or w % grid:
        raise DomainError(f"image side {h}x{w} is not divisible by grid {grid}")
    n = grid * grid
    perm = rng.permutation(n)
    while np.array_equal(perm, np.arange(n)):
        perm = rng.permutation(n)
    return _apply_tiles(image, perm, grid), perm


def _apply_tiles(image, perm, grid):
    c, h, w = image.shape
    th, tw = h // grid, w // grid
    tiles = image.reshape(c, grid, th, grid, tw).transpose(1, 3, 0, 2, 4).reshape(grid * grid, c, th, tw)
    tiles = tiles[perm]
    return tiles.reshape(grid, grid, c, th, tw).transpose(2, 0, 3, 1, 4).reshape(c, h, w)


def invert_jigsaw(image: np.ndarray, perm: np.ndarray, grid: int) -> np.ndarray:
    return _apply_tiles(np.asarray(image), np.argsort(perm), grid)


def save_pool(pool: NegativePool, path) -> None:
    manifest = {"mode": pool.mode, "threshold_record": pool.threshold_record, "manifest": pool.manifest}
    persistence.save(path, "negative_pool", manifest, {
        "images": pool.images.astype(np.float32), "labels": pool.labels.astype(np.float64),
        "scores": pool.scores.astype(np.float64), "thresholds": pool.thresholds.astype(np.float64),
        "ids": pool.ids.astype(np.int64),
    })


def load_pool(path) -> NegativePool:
    manifest, t = persistence.load(path, "negative_pool")
    pool = NegativePool(t["images"], t["labels"], t["scores"], t["thresholds"], t["ids"],
                        manifest["mode"], manifest["threshold_record"], manifest["manifest"])
    pool.check_invariants()
    return pool
