"""Labeled image corpora: label spaces, the synthetic orientation corpus, folder ingestion."""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import persistence
from .errors import ConfigError, LoadError

log = logging.getLogger(__name__)

SYNTHETIC_RANGE = (-80.0, 80.0)
SYNTHETIC_KINDS = ("rotated_bar", "gabor")
RESOLUTIONS = (16, 32, 64)
N_THICKNESS_CLASSES = 8


class LabelKind(str, enum.Enum):
    INTEGER_VALUED = "integer_valued"
    STRICTLY_CONTINUOUS = "strictly_continuous"


@dataclass(frozen=True)
class LabelSpace:
    raw_min: float
    raw_max: float
    kind: LabelKind
    distinct_labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.raw_min < self.raw_max:
            raise ConfigError(f"label space needs raw_min < raw_max, got {self.raw_min}, {self.raw_max}")
        d = np.asarray(self.distinct_labels, dtype=np.float64)
        if d.size and (d.min() < 0 or d.max() > 1 or np.any(np.diff(d) <= 0)):
            raise ConfigError("distinct_labels must be strictly increasing within [0, 1]")
        d.setflags(write=False)
        object.__setattr__(self, "distinct_labels", d)
        object.__setattr__(self, "kind", LabelKind(self.kind))

    @property
    def span(self) -> float:
        return self.raw_max - self.raw_min

    def normalize(self, raw):
        return (np.asarray(raw, dtype=np.float64) - self.raw_min) / self.span

    def denormalize(self, norm):
        return np.asarray(norm, dtype=np.float64) * self.span + self.raw_min

    @classmethod
    def from_raw_labels(cls, raw: np.ndarray, bounds: tuple[float, float] | None = None,
                        kind: LabelKind | str | None = None) -> "LabelSpace":
        raw = np.asarray(raw, dtype=np.float64)
        lo, hi = bounds if bounds is not None else (float(raw.min()), float(raw.max()))
        if kind is None:
            kind = LabelKind.INTEGER_VALUED if np.all(raw == np.round(raw)) else LabelKind.STRICTLY_CONTINUOUS
        distinct = (np.unique(raw) - lo) / (hi - lo)
        return cls(float(lo), float(hi), LabelKind(kind), distinct)


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # C x H x W, values in [-1, 1]
    label_norm: float
    label_raw: float
    id: str


class Dataset:
    """Immutable collection of labeled images stored as stacked arrays.

    ``aux`` holds per-image side attributes (e.g. thickness class, noise
    variance for synthetic corpora); ``meta`` records provenance.
    """

    def __init__(self, images: np.ndarray, labels_raw: np.ndarray, label_space: LabelSpace,
                 ids: Sequence[str] | None = None, aux: dict[str, np.ndarray] | None = None,
                 meta: dict | None = None):
        images = np.ascontiguousarray(images, dtype=np.float32)
        labels_raw = np.asarray(labels_raw, dtype=np.float64)
        if images.ndim != 4 or len(images) == 0:
            raise ConfigError("dataset needs a nonempty N x C x H x W image array")
        if len(labels_raw) != len(images):
            raise ConfigError("one label per image required")
        if images.min() < -1 or images.max() > 1:
            raise ConfigError("pixel values must lie in [-1, 1]")
        self.images = images
        self.labels_raw = labels_raw
        self.label_space = label_space
        self.labels_norm = label_space.normalize(labels_raw)
        self.ids = list(ids) if ids is not None else [f"{i:06d}" for i in range(len(images))]
        if len(set(self.ids)) != len(self.ids):
            raise ConfigError("image ids must be unique")
        self.aux = {k: np.asarray(v) for k, v in (aux or {}).items()}
        self.meta = dict(meta or {})
        for arr in (self.images, self.labels_raw, self.labels_norm, *self.aux.values()):
            arr.setflags(write=False)

        order = np.argsort(self.labels_norm, kind="stable")
        self._sorted_idx = order
        self._sorted_labels = self.labels_norm[order]
        uniq, starts = np.unique(self._sorted_labels, return_index=True)
        self._group_starts = np.append(starts, len(order))
        self._distinct = uniq
        # raw label -> image indices
        self.index = {float(labels_raw[order[st]]): order[st:self._group_starts[k + 1]]
                      for k, st in enumerate(starts)}

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], float(self.labels_norm[i]), float(self.labels_raw[i]), self.ids[i])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def sorted_labels(self) -> np.ndarray:
        """Normalized labels in ascending order (pairs with ``sorted_indices``)."""
        return self._sorted_labels

    @property
    def sorted_indices(self) -> np.ndarray:
        return self._sorted_idx

    @property
    def distinct_labels(self) -> np.ndarray:
        return self._distinct

    def indices_with_label(self, y_norm: float) -> np.ndarray:
        """Indices of images whose normalized label equals ``y_norm`` exactly."""
        k = np.searchsorted(self._distinct, y_norm)
        if k < len(self._distinct) and self._distinct[k] == y_norm:
            return self._sorted_idx[self._group_starts[k]:self._group_starts[k + 1]]
        return np.empty(0, dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = np.asarray(list(indices), dtype=np.int64)
        ls = self.label_space
        space = LabelSpace.from_raw_labels(self.labels_raw[idx], bounds=(ls.raw_min, ls.raw_max), kind=ls.kind)
        return Dataset(self.images[idx], self.labels_raw[idx], space,
                       [self.ids[i] for i in idx], {k: v[idx] for k, v in self.aux.items()}, self.meta)

    def split(self, holdout_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        perm = np.random.default_rng(seed).permutation(len(self))
        n_hold = int(round(holdout_fraction * len(self)))
        return self.subset(np.sort(perm[n_hold:])), self.subset(np.sort(perm[:n_hold]))


def _sample_unit_labels(rng: np.random.Generator, n: int, imbalance: float) -> np.ndarray:
    # density on [0, 1] proportional to exp(-2 * imbalance * u)
    v = rng.random(n)
    if imbalance == 0:
        return v
    a = 2.0 * imbalance
    return -np.log1p(-v * -np.expm1(-a)) / a


def _render(kind: str, angles_deg: np.ndarray, widths: np.ndarray, res: int, rng: np.random.Generator,
            chunk: int = 512) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    n = len(angles_deg)
    background = rng.uniform(-0.9, -0.55, n)
    contrast = rng.uniform(0.9, 1.5, n)
    offset = rng.uniform(-res / 16, res / 16, (n, 2))
    length = rng.uniform(0.55, 0.8, n) * res
    noise_std = rng.uniform(0.02, 0.08, n)
    noise = rng.standard_normal((n, res, res))

    c = (res - 1) / 2.0
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    out = np.empty((n, 1, res, res), dtype=np.float32)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        th = np.deg2rad(angles_deg[s:e])[:, None, None]
        dx = xx[None] - c - offset[s:e, 0, None, None]
        dy = yy[None] - c - offset[s:e, 1, None, None]
        # bar axis (sin th, -cos th) in image coordinates; 0 deg is vertical
        along = dx * np.sin(th) - dy * np.cos(th)
        across = dx * np.cos(th) + dy * np.sin(th)
        w = widths[s:e, None, None]
        if kind == "rotated_bar":
            inside_w = np.clip(w / 2 + 0.5 - np.abs(across), 0.0, 1.0)
            inside_l = np.clip(length[s:e, None, None] / 2 + 0.5 - np.abs(along), 0.0, 1.0)
            profile = inside_w * inside_l
        else:
            env = np.exp(-(dx ** 2 + dy ** 2) / (2 * (0.22 * res) ** 2))
            profile = env * 0.5 * (1 + np.cos(np.pi * across / w))
        img = background[s:e, None, None] + contrast[s:e, None, None] * profile
        img = img + noise_std[s:e, None, None] * noise[s:e]
        out[s:e, 0] = np.clip(img, -1.0, 1.0)
    aux = {"noise_var": noise_std ** 2, "contrast": contrast, "background": background}
    return out, aux


def make_synthetic(kind: str = "rotated_bar", n: int = 1000, resolution: int = 32,
                   imbalance: float = 0.0, seed: int = 0) -> Dataset:
    """Render a corpus of oriented structures whose orientation is the label.

    Labels are raw angles in [-80, 80] degrees rounded to 0.1 degree. With
    ``imbalance > 0`` the label density decays as ``exp(-2*imbalance*u)``
    along the normalized axis, so low angles are over-represented.
    Thickness comes from 8 equiprobable classes and is independent of the
    label (stored as ``aux['thickness_class']``).
    """
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if resolution not in RESOLUTIONS:
        raise ConfigError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    if n < 100:
        raise ConfigError(f"synthetic corpus needs n >= 100, got {n}")
    if imbalance < 0 or not math.isfinite(imbalance):
        raise ConfigError("imbalance must be a finite value >= 0")

    rng = np.random.default_rng(seed)
    lo, hi = SYNTHETIC_RANGE
    unit = _sample_unit_labels(rng, n, imbalance)
    raw = np.round(lo + (hi - lo) * unit, 1)
    thick = rng.integers(0, N_THICKNESS_CLASSES, n)
    widths = (1.0 + 0.5 * thick) * resolution / 32.0
    images, aux = _render(kind, raw, widths, resolution, rng)
    aux["thickness_class"] = thick.astype(np.int64)
    space = LabelSpace.from_raw_labels(raw, bounds=SYNTHETIC_RANGE, kind=LabelKind.STRICTLY_CONTINUOUS)
    meta = {"source": "synthetic", "kind": kind, "n": n, "resolution": resolution,
            "imbalance": imbalance, "seed": seed}
    return Dataset(images, raw, space, aux=aux, meta=meta)


def _read_labels_file(labels_file) -> tuple[list[tuple[str, str]], int]:
    rows = []
    with open(labels_file, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else next(csv.reader([line]))
            if len(parts) < 2:
                rows.append((parts[0].strip(), ""))
            else:
                rows.append((parts[0].strip(), parts[1].strip()))
    return rows, len(rows)


def load_folder(path, labels_file, resolution: int = 32, channels: int = 3,
                bounds: tuple[float, float] | None = None) -> Dataset:
    """Read images listed in ``labels_file`` (``filename<TAB or comma>label``).

    Rows whose label does not parse, or whose file is missing, are skipped
    and counted in ``meta['skipped']``.
    """
    from PIL import Image

    path = Path(path)
    rows, _ = _read_labels_file(labels_file)
    skipped = {"bad_label": 0, "missing_file": 0}
    names, labels = [], []
    for name, label in rows:
        try:
            value = float(label)
            if not math.isfinite(value):
                raise ValueError(label)
        except ValueError:
            log.warning("skipping %s: label %r is not numeric", name, label)
            skipped["bad_label"] += 1
            continue
        if not (path / name).is_file():
            log.warning("skipping %s: file not found", name)
            skipped["missing_file"] += 1
            continue
        names.append(name)
        labels.append(value)
    if rows and skipped["bad_label"] == len(rows):
        raise LoadError("no row of the labels file has a numeric label")
    if not names:
        raise LoadError(f"none of the files listed in {labels_file} exist under {path}")

    mode = "L" if channels == 1 else "RGB"
    imgs = []
    for name in names:
        with Image.open(path / name) as im:
            im = im.convert(mode).resize((resolution, resolution), Image.BICUBIC)
            arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
        imgs.append(arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1))
    raw = np.asarray(labels)
    space = LabelSpace.from_raw_labels(raw, bounds=bounds)
    meta = {"source": os.fspath(path), "resolution": resolution, "skipped": skipped}
    return Dataset(np.clip(np.stack(imgs), -1, 1), raw, space, ids=names, meta=meta)


def save_dataset(dataset: Dataset, path) -> None:
    ls = dataset.label_space
    manifest = {
        "label_space": {"raw_min": ls.raw_min, "raw_max": ls.raw_max, "kind": ls.kind.value},
        "ids": dataset.ids,
        "aux": sorted(dataset.aux),
        "meta": dataset.meta,
    }
    tensors = {"images": dataset.images, "labels_raw": dataset.labels_raw,
               "distinct_labels": ls.distinct_labels}
    tensors.update({f"aux.{k}": v for k, v in dataset.aux.items()})
    persistence.save(path, "dataset", manifest, tensors)


def load_dataset(path) -> Dataset:
    manifest, t = persistence.load(path, "dataset")
    ls = manifest["label_space"]
    space = LabelSpace(ls["raw_min"], ls["raw_max"], LabelKind(ls["kind"]), t["distinct_labels"])
    aux = {k: t[f"aux.{k}"] for k in manifest["aux"]}
    return Dataset(t["images"], t["labels_raw"], space, manifest["ids"], aux, manifest["meta"])
