"""Run-directory orchestration: data, baseline, NIQE, pools, Dual-NDA, sampling, evaluation, ablations.

Layout of a run directory::

    config.yaml                 resolved configuration snapshot
    dataset.bin  niqe.bin  evalnet.bin
    seed<k>/baseline/           warm-start and final baseline checkpoints, train log
    seed<k>/pool_q<q2>.bin      Type II pool built from the final baseline generator
    seed<k>/<variant>/          Dual-NDA (or ablation) phase resumed from the warm checkpoint
    seed<k>/<variant>/eval/     line-graph CSVs, summary.csv, report.json
    ablate/<axis>.csv           one row per setting
    report/                     figure-shaped CSVs rebuilt from report.json files only

Every step skips work whose output already exists, so an interrupted
command can simply be re-run.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as C
from . import persistence
from .data import Dataset, LabelKind, load_dataset, load_folder, make_synthetic, save_dataset
from .errors import ConfigError
from .evaluation import (METRICS, MetricsReport, _fmt, evaluate, export_line_graphs, load_eval_model,
                         save_eval_model, train_eval_net)
from .negatives import build_type2_continuous, build_type2_integer, load_pool, save_pool
from .niqe import fit_niqe_model, load_niqe_model, save_niqe_model
from .trainer import (Trainer, append_log, checkpoint_id, generator_fn, load_checkpoint, load_fake_set, sample,
                      save_checkpoint, save_fake_set)

log = logging.getLogger(__name__)


@dataclass
class Run:
    root: Path
    cfg: dict

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    def seed_dir(self, seed: int | None = None) -> Path:
        return self.root / f"seed{self.seed(seed)}"

    def seed(self, seed: int | None = None) -> int:
        return int(self.cfg["train"]["seed"] if seed is None else seed)

    @property
    def dataset_path(self) -> Path:
        return self.root / "dataset.bin"

    def write_snapshot(self) -> None:
        persistence.atomic_write_text(self.root / "config.yaml", C.dump_config(self.cfg))


def _label(value) -> str:
    return repr(float(value)) if isinstance(value, (int, float)) else str(value)


# data and auxiliary models ------------------------------------------------------------

def make_data(run: Run) -> Dataset:
    if run.dataset_path.exists():
        return load_dataset(run.dataset_path)
    d = run.cfg["dataset"]
    if d["path"]:
        if not d["labels_file"]:
            raise ConfigError("dataset.labels_file is required with dataset.path")
        bounds = tuple(d["bounds"]) if d["bounds"] else None
        ds = load_folder(d["path"], d["labels_file"], int(d["resolution"]), int(d["channels"]), bounds)
    else:
        ds = make_synthetic(d["kind"], int(d["n"]), int(d["resolution"]), float(d["imbalance"]), int(d["seed"]))
    save_dataset(ds, run.dataset_path)
    return ds


def dataset(run: Run) -> Dataset:
    if not run.dataset_path.exists():
        raise ConfigError(f"no dataset in {run.root}; run `make-data` first")
    return load_dataset(run.dataset_path)


def fit_niqe(run: Run):
    path = run.root / "niqe.bin"
    if path.exists():
        return load_niqe_model(path)
    model = fit_niqe_model(dataset(run).images, C.niqe_settings(run.cfg))
    save_niqe_model(model, path)
    return model


def niqe_model(run: Run):
    path = run.root / "niqe.bin"
    if not path.exists():
        raise ConfigError(f"no NIQE model in {run.root}; run `fit-niqe` first")
    return load_niqe_model(path)


def eval_model(run: Run):
    path = run.root / "evalnet.bin"
    if path.exists():
        return load_eval_model(path)
    ds = dataset(run)
    aux_key = "thickness_class" if "thickness_class" in ds.aux else None
    model = train_eval_net(ds, aux_key=aux_key, epochs=int(run.cfg["eval"]["evalnet_epochs"]),
                           seed=int(run.cfg["eval"]["seed"]))
    save_eval_model(model, path)
    return model


# training phases ----------------------------------------------------------------------

def train_baseline(run: Run, seed: int | None = None) -> Path:
    """Vicinal baseline without negatives; keeps the checkpoint at the warm-start step."""
    sd = run.seed_dir(seed) / "baseline"
    final = sd / "ckpt_final.bin"
    if final.exists():
        return final
    ds = dataset(run)
    c, h, _ = ds.shape
    cfg = C.train_config(run.cfg, c, h, nda=False)
    cfg = _with_seed(cfg, run.seed(seed))
    sd.mkdir(parents=True, exist_ok=True)
    log_path = sd / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    trainer = Trainer(cfg, ds, run_dir=sd)
    t0 = time.time()
    warm = list(trainer.run(until=cfg.nda_start_step))[-1]
    save_checkpoint(warm, sd / "ckpt_warm.bin")
    ck = list(trainer.run())[-1]
    save_checkpoint(ck, final)
    _write_json(sd / "timing.json", {"seconds": round(time.time() - t0, 1)})
    return final


def _with_seed(cfg, seed):
    import dataclasses
    return dataclasses.replace(cfg, seed=seed)


def pool_path(run: Run, q2: float, seed: int | None = None) -> Path:
    return run.seed_dir(seed) / f"pool_q{q2}.bin"


def build_negatives(run: Run, seed: int | None = None, q2: float | None = None, mode: str | None = None,
                    m: int | None = None, per_label: int | None = None) -> Path:
    neg = run.cfg["negatives"]
    q2 = float(neg["q2"] if q2 is None else q2)
    mode = mode or neg["mode"]
    out = pool_path(run, q2, seed)
    if out.exists():
        return out
    base = run.seed_dir(seed) / "baseline" / "ckpt_final.bin"
    if not base.exists():
        raise ConfigError(f"no baseline checkpoint at {base}; run `train-baseline` first")
    ck = load_checkpoint(base)
    gen = generator_fn(ck.generator())
    ds = dataset(run)
    nq = niqe_model(run)
    src = checkpoint_id(ck)
    pseed = int(neg["seed"]) + 1000 * run.seed(seed)
    if mode == "integer":
        if ds.label_space.kind is not LabelKind.INTEGER_VALUED:
            raise ConfigError("negatives.mode=integer needs integer-valued labels; use continuous")
        pool = build_type2_integer(gen, ds.label_space, int(per_label or neg["per_label"]), q2, nq,
                                   seed=pseed, source=src)
    else:
        pool = build_type2_continuous(gen, ds.labels_norm, int(m or neg["M"]), q2, nq, seed=pseed, source=src)
    save_pool(pool, out)
    return out


def train_variant(run: Run, name: str, seed: int | None = None, *, lambda1=None, lambda2=None,
                  lambda_nda=None, q1=None, q2=None) -> Path:
    """Resume the baseline at its warm-start checkpoint with negative terms switched on."""
    vd = run.seed_dir(seed) / name
    final = vd / "ckpt_final.bin"
    if final.exists():
        return final
    warm = run.seed_dir(seed) / "baseline" / "ckpt_warm.bin"
    if not warm.exists():
        raise ConfigError(f"no warm-start checkpoint at {warm}; run `train-baseline` first")
    ds = dataset(run)
    c, h, _ = ds.shape
    cfg = _with_seed(C.train_config(run.cfg, c, h, lambda1=lambda1, lambda2=lambda2,
                                    lambda_nda=lambda_nda, q1=q1), run.seed(seed))
    pool = None
    if cfg.uses_pool:
        q2 = float(run.cfg["negatives"]["q2"] if q2 is None else q2)
        pp = pool_path(run, q2, seed)
        if not pp.exists():
            raise ConfigError(f"no Type II pool at {pp}; run `build-negatives` first")
        pool = load_pool(pp)
    vd.mkdir(parents=True, exist_ok=True)
    log_path = vd / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    trainer = Trainer.from_checkpoint(load_checkpoint(warm), ds, pool, run_dir=vd, cfg=cfg)
    t0 = time.time()
    ck = list(trainer.run())[-1]
    save_checkpoint(ck, final)
    _write_json(vd / "timing.json", {"seconds": round(time.time() - t0, 1)})
    return final


def train_dualnda(run: Run, seed: int | None = None) -> Path:
    return train_variant(run, "dualnda", seed)


# sampling and evaluation --------------------------------------------------------------

def eval_centers(run: Run, ds: Dataset) -> tuple[np.ndarray, float]:
    e = run.cfg["eval"]
    if ds.label_space.kind is LabelKind.INTEGER_VALUED:
        centers = ds.distinct_labels
    else:
        centers = np.linspace(0.0, 1.0, int(e["n_centers"]))
    return centers, float(e["radius_raw"]) / ds.label_space.span


def phase_ckpt(run: Run, name: str, seed: int | None = None) -> Path:
    p = run.seed_dir(seed) / name / "ckpt_final.bin"
    if not p.exists():
        raise ConfigError(f"no checkpoint for {name!r} at {p}; train it first")
    return p


def sample_phase(run: Run, name: str, seed: int | None = None) -> Path:
    out = run.seed_dir(seed) / name / "fakes.bin"
    if out.exists():
        return out
    ds = dataset(run)
    centers, _ = eval_centers(run, ds)
    ck = load_checkpoint(phase_ckpt(run, name, seed))
    fs = sample(ck, centers, int(run.cfg["eval"]["n_per_center"]), int(run.cfg["eval"]["seed"]))
    fs.manifest["checkpoint"] = checkpoint_id(ck)
    save_fake_set(fs, out)
    return out


def evaluate_phase(run: Run, name: str, seed: int | None = None) -> MetricsReport:
    out = run.seed_dir(seed) / name / "eval"
    rp = out / "report.json"
    if rp.exists():
        return MetricsReport.from_json(json.loads(rp.read_text()))
    fs = load_fake_set(sample_phase(run, name, seed))
    ds = dataset(run)
    centers, radius = eval_centers(run, ds)
    report = evaluate(fs.images, fs.labels, ds, eval_model(run), niqe_model(run), centers, radius,
                      int(run.cfg["eval"]["min_count"]))
    report.meta.update({"phase": name, "seed": run.seed(seed)})
    export_line_graphs(report, out)
    return report


# ablations ----------------------------------------------------------------------------

AXES = ("q1", "q2", "lambda_sum", "combos")
TABLE_HEADER = ("setting",) + tuple(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))


def combo_lambdas(run: Run, combo: str) -> dict:
    t = run.cfg["train"]
    parts = set(combo.split("+")) - {"baseline"}
    return {"lambda1": float(t["lambda1"]) if "type1" in parts else 0.0,
            "lambda2": float(t["lambda2"]) if "type2" in parts else 0.0,
            "lambda_nda": C.NDA_LAMBDA if "nda" in parts else 0.0}


def axis_settings(run: Run, axis: str) -> list[tuple[str, str, dict]]:
    """(setting label, phase name, train_variant kwargs) for each grid point."""
    ab = run.cfg["ablation"]
    out = []
    if axis == "q1":
        for q in ab["q1"]:
            out.append((_label(q), f"abl_q1_{q}", {"q1": float(q)}))
    elif axis == "q2":
        for q in ab["q2"]:
            out.append((_label(q), f"abl_q2_{q}", {"q2": float(q)}))
    elif axis == "lambda_sum":
        r = float(ab["lambda_ratio"])
        for s in ab["lambda_sum"]:
            out.append((_label(s), f"abl_lsum_{s}", {"lambda1": r * float(s) / (1 + r), "lambda2": float(s) / (1 + r)}))
    elif axis == "combos":
        for c in ab["combos"]:
            out.append((c, f"abl_{c.replace('+', '_')}", combo_lambdas(run, c)))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    if not out:
        raise ConfigError(f"ablation grid for {axis!r} is empty")
    return out


def run_setting(run: Run, phase: str, kwargs: dict, seed: int) -> MetricsReport:
    train_baseline(run, seed)
    lam = {k: v for k, v in kwargs.items() if k.startswith("lambda")}
    if phase == "abl_baseline":
        return evaluate_phase(run, "baseline", seed)
    l2 = lam.get("lambda2", float(run.cfg["train"]["lambda2"]))
    if l2 > 0:
        build_negatives(run, seed, q2=kwargs.get("q2"))
    train_variant(run, phase, seed, **kwargs)
    return evaluate_phase(run, phase, seed)


def table_csv(rows: list[tuple[str, MetricsReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for setting, rep in rows:
        agg = rep.aggregate()
        w.writerow([setting] + [_fmt(x) for m in METRICS for x in agg[m]])
    return buf.getvalue()


def _pooled(reports: list[MetricsReport]) -> MetricsReport:
    if len(reports) == 1:
        return reports[0]
    per = {m: np.concatenate([r.per_center[m] for r in reports]) for m in METRICS}
    return MetricsReport(np.concatenate([r.centers_raw for r in reports]), per, {"pooled_seeds": len(reports)})


def ablate(run: Run, axes: list[str] | None = None) -> dict[str, Path]:
    axes = list(axes or AXES)
    seeds = [int(s) for s in run.cfg["ablation"]["seeds"]]
    if not seeds:
        raise ConfigError("ablation.seeds is empty")
    make_data(run)
    fit_niqe(run)
    out_dir = run.root / "ablate"
    out_dir.mkdir(exist_ok=True)
    written = {}
    for axis in axes:
        rows = []
        for label, phase, kwargs in axis_settings(run, axis):
            reps = [run_setting(run, phase, kwargs, s) for s in seeds]
            rows.append((label, _pooled(reps)))
        p = out_dir / f"{axis}.csv"
        persistence.atomic_write_text(p, table_csv(rows))
        written[axis] = p
    base = [evaluate_phase(run, "baseline", s) for s in seeds]
    p = out_dir / "baseline.csv"
    persistence.atomic_write_text(p, table_csv([("baseline", _pooled(base))]))
    written["baseline"] = p
    return written


# report -------------------------------------------------------------------------------

def report(run: Run) -> list[Path]:
    """Rebuild figure-shaped CSVs from the report.json files already in the run directory."""
    out = run.root / "report"
    out.mkdir(exist_ok=True)
    written = []
    for rp in sorted(run.root.glob("seed*/*/eval/report.json")):
        rep = MetricsReport.from_json(json.loads(rp.read_text()))
        tag = f"{rp.parts[-4]}_{rp.parts[-3]}"
        written += export_line_graphs(rep, out / "line_graphs" / tag)
    abl = run.root / "ablate"
    if (abl / "baseline.csv").exists():
        base = next(csv.DictReader(io.StringIO((abl / "baseline.csv").read_text())))
        for axis, metrics, fname in (("combos", ("niqe", "label_score"), "fig_types.csv"),
                                     ("lambda_sum", ("niqe", "label_score"), "fig_lambda.csv")):
            src = abl / f"{axis}.csv"
            if not src.exists():
                continue
            rows = list(csv.DictReader(io.StringIO(src.read_text())))
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["setting"] + [f"{m}_mean" for m in metrics] + [f"baseline_{m}_mean" for m in metrics])
            for r in rows:
                w.writerow([r["setting"]] + [r[f"{m}_mean"] for m in metrics] + [base[f"{m}_mean"] for m in metrics])
            p = out / fname
            persistence.atomic_write_text(p, buf.getvalue())
            written.append(p)
        for src in sorted(abl.glob("*.csv")):
            p = out / f"table_{src.name}"
            persistence.atomic_write_text(p, src.read_text())
            written.append(p)
    return written


def _write_json(path: Path, obj) -> None:
    persistence.atomic_write_text(path, json.dumps(obj, sort_keys=True) + "\n")
