"""SFID, NIQE aggregate, Diversity and Label Score over labeled fake sets.

A single small CNN trained on the real corpus supplies every learned
handle: a label regressor (Label Score), a coarse label-bin classifier
whose penultimate 64-d activations are the SFID features, and a
classifier of a label-orthogonal nuisance attribute (Diversity).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import persistence
from .data import Dataset
from .errors import ConfigError, DomainError, EvaluationError
from .niqe import NiqeModel, niqe_scores

FEATURE_DIM = 64
NEG_EIG_TOL = 1e-6
METRICS = ("sfid", "niqe", "diversity", "label_score")


# Frechet distance ---------------------------------------------------------------------

def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).

    The trace of the square root is taken from the eigenvalues of the
    symmetric matrix cov_a^(1/2) cov_b cov_a^(1/2), which shares its
    spectrum with cov_a cov_b.
    """
    sa = _psd_sqrt(cov_a)
    m = sa @ cov_b @ sa
    ev = np.linalg.eigvalsh(0.5 * (m + m.T))
    if ev.min() < -NEG_EIG_TOL:
        raise EvaluationError(f"covariance product has a negative eigenvalue {ev.min():.3g}")
    tr_sqrt = float(np.sqrt(np.clip(ev, 0.0, None)).sum())
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def feature_stats(features) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise DomainError("need an (n >= 2) x d feature matrix")
    if not np.all(np.isfinite(f)):
        raise DomainError("features contain non-finite values")
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False, ddof=1))


def fid(features_a, features_b) -> float:
    a = np.asarray(features_a)
    b = np.asarray(features_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DomainError(f"feature dimensions differ: {a.shape} vs {b.shape}")
    return fid_from_stats(*feature_stats(a), *feature_stats(b))


@dataclass
class SfidResult:
    centers: np.ndarray
    values: np.ndarray          # NaN where skipped
    n_real: np.ndarray
    n_fake: np.ndarray
    skipped: list[int]

    @property
    def mean(self) -> float:
        return float(np.nanmean(self.values))

    @property
    def std(self) -> float:
        return float(np.nanstd(self.values))


def window_mask(labels, center: float, radius: float) -> np.ndarray:
    return np.abs(np.asarray(labels) - center) <= radius


def sfid(real_features, real_labels, fake_features, fake_labels, centers, radius: float,
         min_count: int = 50) -> SfidResult:
    """FID within each label window [c - radius, c + radius]; under-populated windows are skipped."""
    if radius < 0:
        raise ConfigError("radius must be nonnegative")
    centers = np.asarray(centers, dtype=np.float64)
    vals = np.full(len(centers), np.nan)
    nr = np.zeros(len(centers), dtype=np.int64)
    nf = np.zeros(len(centers), dtype=np.int64)
    skipped = []
    for i, c in enumerate(centers):
        mr = window_mask(real_labels, c, radius)
        mf = window_mask(fake_labels, c, radius)
        nr[i], nf[i] = mr.sum(), mf.sum()
        if nr[i] < min_count or nf[i] < min_count:
            skipped.append(i)
            continue
        vals[i] = fid(np.asarray(real_features)[mr], np.asarray(fake_features)[mf])
    if len(skipped) == len(centers):
        raise EvaluationError("every SFID center was skipped for lack of samples")
    return SfidResult(centers, vals, nr, nf, skipped)


# simple metrics -----------------------------------------------------------------------

def label_score(pred_raw, cond_raw) -> float:
    """Mean absolute error between predicted and conditioning labels, raw units."""
    return float(np.mean(np.abs(np.asarray(pred_raw, np.float64) - np.asarray(cond_raw, np.float64))))


def entropy(classes, n_classes: int) -> float:
    counts = np.bincount(np.asarray(classes, dtype=np.int64), minlength=n_classes).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def diversity(classes_per_center, n_classes: int) -> float:
    return float(np.mean([entropy(c, n_classes) for c in classes_per_center]))


def niqe_aggregate(images, model: NiqeModel, groups=None, n_groups: int | None = None) -> dict:
    scores, failed = niqe_scores(model, images)
    out = {"mean": float(np.nanmean(scores)), "std": float(np.nanstd(scores)), "n_failed": failed,
           "scores": scores}
    if groups is not None:
        groups = np.asarray(groups)
        n_groups = n_groups if n_groups is not None else int(groups.max()) + 1
        out["per_center"] = np.array([np.nanmean(scores[groups == g]) if np.any(groups == g) else np.nan
                                      for g in range(n_groups)])
    return out


# evaluation network -------------------------------------------------------------------

@dataclass(frozen=True)
class EvalNetSpec:
    resolution: int = 32
    channels: int = 1
    width: int = 32
    n_bins: int = 8
    n_aux: int = 8


class EvalNet(nn.Module):
    def __init__(self, spec: EvalNetSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.trunk = nn.Sequential(
            nn.Conv2d(spec.channels, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(),
            nn.Linear(8 * w, FEATURE_DIM), nn.ReLU(),
        )
        self.reg = nn.Linear(FEATURE_DIM, 1)
        self.bins = nn.Linear(FEATURE_DIM, spec.n_bins)
        self.aux = nn.Linear(FEATURE_DIM, spec.n_aux)

    def forward(self, x):
        f = self.trunk(x)
        return f, self.reg(f).squeeze(1), self.bins(f), self.aux(f)


@dataclass
class EvalModel:
    net: EvalNet
    bin_edges: np.ndarray            # normalized label bin edges (n_bins + 1)
    raw_min: float
    raw_max: float
    manifest: dict = field(default_factory=dict)

    @torch.no_grad()
    def predict(self, images, chunk: int = 512) -> dict[str, np.ndarray]:
        self.net.eval()
        feats, reg, bins, aux = [], [], [], []
        for s in range(0, len(images), chunk):
            x = torch.from_numpy(np.array(images[s:s + chunk], dtype=np.float32))
            f, r, b, a = self.net(x)
            feats.append(f.double().numpy())
            reg.append(r.double().numpy())
            bins.append(b.argmax(1).numpy())
            aux.append(a.argmax(1).numpy())
        label_norm = np.concatenate(reg)
        return {"features": np.concatenate(feats),
                "label_raw": self.raw_min + (self.raw_max - self.raw_min) * label_norm,
                "bin": np.concatenate(bins), "aux": np.concatenate(aux)}


def _label_bins(labels_norm: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.quantile(labels_norm, np.linspace(0, 1, n_bins + 1))
    edges[0], edges[-1] = -np.inf, np.inf
    return edges


def train_eval_net(dataset: Dataset, aux_key: str | None = "thickness_class", epochs: int = 20,
                   batch: int = 128, lr: float = 2e-3, seed: int = 0, spec: EvalNetSpec | None = None) -> EvalModel:
    """Fit the shared evaluation network on real images (deterministic for a fixed seed)."""
    c, h, _ = dataset.shape
    if aux_key is not None and aux_key not in dataset.aux:
        raise ConfigError(f"dataset has no auxiliary attribute {aux_key!r} for the diversity head")
    aux = dataset.aux[aux_key].astype(np.int64) if aux_key else np.zeros(len(dataset), np.int64)
    spec = spec or EvalNetSpec(resolution=h, channels=c, n_aux=int(aux.max()) + 1)
    torch.manual_seed(seed)
    net = EvalNet(spec)
    edges = _label_bins(dataset.labels_norm, spec.n_bins)
    bins = np.clip(np.searchsorted(edges, dataset.labels_norm, side="right") - 1, 0, spec.n_bins - 1)
    x_all = torch.from_numpy(np.array(dataset.images))
    y_all = torch.tensor(dataset.labels_norm, dtype=torch.float32)
    b_all = torch.from_numpy(bins)
    a_all = torch.from_numpy(aux)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    rng = np.random.default_rng(seed)
    ce = nn.CrossEntropyLoss()
    for _ in range(epochs):
        net.train()
        perm = torch.from_numpy(rng.permutation(len(dataset)))
        for s in range(0, len(perm), batch):
            idx = perm[s:s + batch]
            f, r, b, a = net(x_all[idx])
            loss = 20.0 * nn.functional.smooth_l1_loss(r, y_all[idx], beta=0.02) + ce(b, b_all[idx]) + ce(a, a_all[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
    ls = dataset.label_space
    model = EvalModel(net, edges, ls.raw_min, ls.raw_max,
                      {"epochs": epochs, "seed": seed, "aux_key": aux_key, "n_train": len(dataset),
                       "spec": asdict(spec)})
    pred = model.predict(dataset.images)
    model.manifest["train_mae_raw"] = label_score(pred["label_raw"], dataset.labels_raw)
    return model


def save_eval_model(model: EvalModel, path) -> None:
    manifest = {"raw_min": model.raw_min, "raw_max": model.raw_max, "manifest": model.manifest}
    tensors = {f"net/{k}": v.detach().numpy() for k, v in model.net.state_dict().items()}
    tensors["bin_edges"] = model.bin_edges
    persistence.save(path, "eval_net", manifest, tensors)


def load_eval_model(path) -> EvalModel:
    manifest, t = persistence.load(path, "eval_net")
    spec = EvalNetSpec(**manifest["manifest"]["spec"])
    net = EvalNet(spec)
    net.load_state_dict({k[4:]: torch.from_numpy(v) for k, v in t.items() if k.startswith("net/")})
    return EvalModel(net, t["bin_edges"], manifest["raw_min"], manifest["raw_max"], manifest["manifest"])


# full report --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    centers_raw: np.ndarray
    per_center: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        return {m: (float(np.nanmean(v)), float(np.nanstd(v))) for m, v in self.per_center.items()}

    def to_json(self) -> dict:
        agg = self.aggregate()
        return {
            "centers_raw": [float(c) for c in self.centers_raw],
            "per_center": {m: [None if math.isnan(x) else float(x) for x in v] for m, v in self.per_center.items()},
            "aggregate": {m: {"mean": a, "std": s} for m, (a, s) in agg.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        per = {m: np.array([np.nan if x is None else x for x in v], dtype=np.float64)
               for m, v in d["per_center"].items()}
        return cls(np.asarray(d["centers_raw"], dtype=np.float64), per, d.get("meta", {}))


def evaluate(fakes_images, fakes_labels_norm, real: Dataset, model: EvalModel, niqe_model: NiqeModel,
             centers_norm, radius_norm: float, min_count: int = 50) -> MetricsReport:
    """Evaluate a fake set sampled at ``centers_norm`` (each fake's label is one of the centers)."""
    centers_norm = np.asarray(centers_norm, dtype=np.float64)
    fl = np.asarray(fakes_labels_norm, dtype=np.float64)
    group = np.searchsorted(centers_norm, fl)
    group = np.clip(group, 0, len(centers_norm) - 1)
    if not np.allclose(centers_norm[group], fl, atol=1e-12):
        raise EvaluationError("every fake label must be one of the evaluation centers")
    fake_pred = model.predict(fakes_images)
    real_pred = model.predict(real.images)
    s = sfid(real_pred["features"], real.labels_norm, fake_pred["features"], fl, centers_norm,
             radius_norm, min_count)
    span = model.raw_max - model.raw_min
    cond_raw = model.raw_min + span * fl
    err = np.abs(fake_pred["label_raw"] - cond_raw)
    n_aux = model.net.spec.n_aux
    ls, dv = np.empty(len(centers_norm)), np.empty(len(centers_norm))
    for g in range(len(centers_norm)):
        sel = group == g
        ls[g] = err[sel].mean() if sel.any() else np.nan
        dv[g] = entropy(fake_pred["aux"][sel], n_aux) if sel.any() else np.nan
    nq = niqe_aggregate(fakes_images, niqe_model, group, len(centers_norm))
    report = MetricsReport(model.raw_min + span * centers_norm,
                           {"sfid": s.values, "niqe": nq["per_center"], "diversity": dv, "label_score": ls},
                           {"radius_norm": radius_norm, "min_count": min_count, "sfid_skipped": s.skipped,
                            "niqe_failed": nq["n_failed"], "n_fake": int(len(fl))})
    return report


SUMMARY_HEADER = ("sfid_mean", "sfid_std", "niqe_mean", "niqe_std", "diversity_mean", "diversity_std",
                  "label_score_mean", "label_score_std")


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def line_graph_csv(report: MetricsReport, metric: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["center_raw", metric])
    for c, v in zip(report.centers_raw, report.per_center[metric]):
        w.writerow([_fmt(c), _fmt(v)])
    return buf.getvalue()


def summary_row(report: MetricsReport) -> list[str]:
    agg = report.aggregate()
    return [_fmt(x) for m in METRICS for x in agg[m]]


def summary_csv(report: MetricsReport) -> str:
    return ",".join(SUMMARY_HEADER) + "\n" + ",".join(summary_row(report)) + "\n"


def export_line_graphs(report: MetricsReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in METRICS:
        p = out / f"line_{m}.csv"
        persistence.atomic_write_text(p, line_graph_csv(report, m))
        paths.append(p)
    p = out / "summary.csv"
    persistence.atomic_write_text(p, summary_csv(report))
    paths.append(p)
    p = out / "report.json"
    persistence.atomic_write_text(p, json.dumps(report.to_json(), sort_keys=True, indent=1) + "\n")
    paths.append(p)
    return paths
