"""The modified CcGAN training loop with online Type I and pooled Type II negatives.

Randomness is counter-based: every draw comes from a numpy stream keyed by
(seed, step, update index, component), so a run resumed from a checkpoint
replays exactly the draws a straight-through run would have made, and
switching a component off never shifts the draws of the others.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from . import persistence
from .data import Dataset
from .errors import ConfigError, DomainError, TrainingError
from .losses import DiscBatch, DualNdaParams, Term, disc_loss, gen_loss
from .models import Discriminator, Generator, NetSpec, build_models, generate, load_numpy_state, state_to_numpy
from .negatives import NegativePool, jigsaw_negative, pool_query_many, type1_draw
from .vicinal import VicinityParams, soft_radius

log = logging.getLogger(__name__)

MAX_ANCHOR_RESAMPLES = 100

# stream ids for the counter-based RNG
ANCHOR, REAL, FAKE, Z, TYPE1, TYPE2, AUGMENT, JIGSAW, GEN = range(9)


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    disc_batch: int
    gen_batch: int
    vicinity: VicinityParams
    dual_nda: DualNdaParams = DualNdaParams()
    q1: float = 0.5
    disc_updates_per_step: int = 2
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    nda_start_step: int = 0
    augment: bool = False
    augment_flip: bool = False
    jigsaw_grid: int = 2
    seed: int = 0
    net: NetSpec = NetSpec()
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.disc_batch <= 0 or self.gen_batch <= 0:
            raise ConfigError("batch sizes must be positive")
        if self.disc_updates_per_step < 1:
            raise ConfigError("disc_updates_per_step must be at least 1")
        if not 0 <= self.nda_start_step <= self.steps:
            raise ConfigError(f"nda_start_step must lie in [0, steps], got {self.nda_start_step}")
        if not 0 < self.q1 < 1:
            raise ConfigError(f"q1 must lie in (0, 1), got {self.q1}")
        if self.net.variant != self.dual_nda.variant:
            raise ConfigError("network head and loss variant disagree")

    @property
    def uses_pool(self) -> bool:
        return self.dual_nda.lambda2 > 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["vicinity"] = VicinityParams(**d["vicinity"])
        d["dual_nda"] = DualNdaParams(**d["dual_nda"])
        d["net"] = NetSpec(**d["net"])
        d["betas"] = tuple(d["betas"])
        return cls(**d)

    def hash(self) -> str:
        return persistence.sha256_hex(persistence.canonical_json(self.to_dict()))


def stream(seed: int, step: int, update: int, component: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, update, component]))


def augment_minimal(images: torch.Tensor, rng: np.random.Generator, flip: bool = True,
                    translate: bool = True, cutout: bool = True) -> torch.Tensor:
    """Random flip, integer translation (<= 1/8 side, zero fill) and one square cutout (<= 1/4 side)."""
    b, _, h, w = images.shape
    x = images
    do_flip = rng.random(b) < 0.5
    if flip and do_flip.any():
        mask = torch.from_numpy(do_flip)[:, None, None, None]
        x = torch.where(mask, x.flip(-1), x)
    s = int(0.125 * min(h, w))
    shifts = rng.integers(-s, s + 1, size=(b, 2))
    if translate and s > 0:
        x = translate_batch(x, shifts[:, 0], shifts[:, 1])
    size = int(0.25 * min(h, w))
    centers = rng.integers(0, [h, w], size=(b, 2))
    if cutout and size > 0:
        top = torch.from_numpy(centers[:, 0] - size // 2)[:, None, None]
        left = torch.from_numpy(centers[:, 1] - size // 2)[:, None, None]
        rows = torch.arange(h)[None, :, None]
        cols = torch.arange(w)[None, None, :]
        hole = (rows >= top) & (rows < top + size) & (cols >= left) & (cols < left + size)
        x = x * (~hole)[:, None].to(x.dtype)
    return x


def translate_batch(x: torch.Tensor, dy, dx) -> torch.Tensor:
    """out[b, :, i, j] = x[b, :, i - dy[b], j - dx[b]], zero outside the image."""
    b, c, h, w = x.shape
    s = int(max(np.abs(dy).max(), np.abs(dx).max(), 0))
    p = torch.nn.functional.pad(x, (s, s, s, s))
    rows = torch.arange(h)[None, :] + s - torch.as_tensor(dy)[:, None]
    cols = torch.arange(w)[None, :] + s - torch.as_tensor(dx)[:, None]
    bi = torch.arange(b)[:, None, None]
    return p.permute(0, 2, 3, 1)[bi, rows[:, :, None], cols[:, None, :]].permute(0, 3, 1, 2)


@dataclass
class SampleBatch:
    """Inputs of one discriminator update. D sees every image at its anchor label."""

    anchors: np.ndarray
    real_x: np.ndarray
    real_labels: np.ndarray
    real_w: np.ndarray
    fake_x: torch.Tensor
    fake_labels: np.ndarray
    fake_w: np.ndarray
    type1_x: np.ndarray | None = None
    type1_labels: np.ndarray | None = None
    type2_x: np.ndarray | None = None
    type2_labels: np.ndarray | None = None
    jigsaw_x: np.ndarray | None = None
    widenings: int = 0
    anchor_resamples: int = 0

    def sizes(self) -> list[int]:
        return [0 if a is None else len(a) for a in (self.real_x, self.fake_x, self.type1_x,
                                                     self.type2_x, self.jigsaw_x)]


def _soft_range(sorted_labels: np.ndarray, a: float, nu: float, floor: float, r: float) -> tuple[int, int]:
    """Index range of labels with exp(-nu (y - a)^2) > floor, tested exactly at the edges."""
    def inside(y):
        return math.exp(-nu * (y - a) ** 2) > floor
    n = len(sorted_labels)
    lo = int(np.searchsorted(sorted_labels, a - r, side="left"))
    hi = int(np.searchsorted(sorted_labels, a + r, side="right"))
    while lo > 0 and inside(sorted_labels[lo - 1]):
        lo -= 1
    while lo < hi and not inside(sorted_labels[lo]):
        lo += 1
    while hi < n and inside(sorted_labels[hi]):
        hi += 1
    while hi > lo and not inside(sorted_labels[hi - 1]):
        hi -= 1
    return lo, hi


def draw_anchors(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator, m: int,
                 need_type1: bool) -> tuple[np.ndarray, np.ndarray, int]:
    """Anchors y + eps with y uniform over distinct labels, clipped to [0, 1].

    Anchors whose soft vicinity holds no real image (or whose Type I set is
    empty, when needed) are redrawn, up to MAX_ANCHOR_RESAMPLES rounds.
    Returns (anchors, base labels, number of redraws).
    """
    vp = cfg.vicinity
    r = soft_radius(vp)
    distinct = dataset.distinct_labels
    base = distinct[rng.integers(0, len(distinct), m)]
    anchors = np.clip(base + rng.normal(0.0, vp.sigma, m), 0.0, 1.0)
    redraws = 0
    for _ in range(MAX_ANCHOR_RESAMPLES + 1):
        bad = np.array([np.subtract(*_soft_range(dataset.sorted_labels, a, vp.nu, vp.weight_floor, r)) == 0
                        for a in anchors])
        if need_type1:
            d = np.abs(anchors[:, None] - dataset.labels_norm[None, :])
            bad |= ~np.any(d > np.quantile(d, cfg.q1, axis=1)[:, None], axis=1)
        if not bad.any():
            return anchors, base, redraws
        k = int(bad.sum())
        redraws += k
        base[bad] = distinct[rng.integers(0, len(distinct), k)]
        anchors[bad] = np.clip(base[bad] + rng.normal(0.0, vp.sigma, k), 0.0, 1.0)
    raise TrainingError(
        f"no real image within the soft vicinity after {MAX_ANCHOR_RESAMPLES} anchor redraws; "
        f"nu={vp.nu} is probably too large for this label spacing")


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: Dataset, pool: NegativePool | None = None,
                 run_dir: str | os.PathLike | None = None):
        if cfg.uses_pool and (pool is None or len(pool) == 0):
            raise ConfigError("lambda2 > 0 needs a Type II pool; run `build-negatives` first")
        if dataset.shape != (cfg.net.channels, cfg.net.resolution, cfg.net.resolution):
            raise ConfigError(f"dataset images {dataset.shape} do not match the network spec")
        self.cfg = cfg
        self.data = dataset
        self.pool = pool
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.G, self.D = build_models(cfg.net, cfg.seed)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.step = 0
        self.counters = {"saturated": 0, "widenings": 0, "anchor_resamples": 0}
        self.history: list[dict] = []
        self._r = soft_radius(cfg.vicinity)

    # batch assembly -------------------------------------------------------------------

    def nda_active(self, step: int) -> bool:
        p = self.cfg.dual_nda
        return step >= self.cfg.nda_start_step and (p.lambda1 > 0 or p.lambda2 > 0 or p.lambda_nda > 0)

    def effective_params(self, step: int) -> DualNdaParams:
        p = self.cfg.dual_nda
        if self.nda_active(step):
            return p
        return DualNdaParams(0.0, 0.0, p.variant, 0.0)

    def build_disc_batch(self, step: int, update: int) -> SampleBatch:
        cfg, ds = self.cfg, self.data
        vp = cfg.vicinity
        m = cfg.disc_batch
        params = self.effective_params(step)
        rs = lambda comp: stream(cfg.seed, step, update, comp)  # noqa: E731
        anchors, _, redraws = draw_anchors(ds, cfg, rs(ANCHOR), m, need_type1=params.lambda1 > 0)

        # real: uniform within the soft vicinity of each anchor
        u = rs(REAL).random(m)
        real_idx = np.empty(m, dtype=np.int64)
        for i, a in enumerate(anchors):
            lo, hi = _soft_range(ds.sorted_labels, a, vp.nu, vp.weight_floor, self._r)
            real_idx[i] = ds.sorted_indices[lo + min(int(u[i] * (hi - lo)), hi - lo - 1)]
        real_y = ds.labels_norm[real_idx]

        # fake: y' uniform on the soft window around the anchor (clipped to [0, 1])
        frng = rs(FAKE)
        lo = np.maximum(anchors - self._r, 0.0)
        hi = np.minimum(anchors + self._r, 1.0)
        fake_y = lo + (hi - lo) * frng.random(m)
        z = rs(Z).standard_normal((m, cfg.net.z_dim)).astype(np.float32)
        with torch.no_grad():
            fake_x = self.G(torch.from_numpy(z), torch.from_numpy(fake_y).float())

        batch = SampleBatch(
            anchors=anchors, real_x=ds.images[real_idx], real_labels=real_y,
            real_w=np.exp(-vp.nu * (anchors - real_y) ** 2), fake_x=fake_x, fake_labels=fake_y,
            fake_w=np.exp(-vp.nu * (anchors - fake_y) ** 2), anchor_resamples=redraws)

        if params.lambda1 > 0:
            idx = type1_draw(ds.labels_norm, anchors, cfg.q1, rs(TYPE1).random(m))
            assert np.all(idx >= 0)
            batch.type1_x = ds.images[idx]
            batch.type1_labels = ds.labels_norm[idx]
        if params.lambda2 > 0:
            idx, widen = pool_query_many(self.pool, anchors, vp.kappa, rs(TYPE2))
            batch.type2_x = self.pool.images[idx]
            batch.type2_labels = self.pool.labels[idx]
            batch.widenings = widen
        if params.lambda_nda > 0:
            jr = rs(JIGSAW)
            batch.jigsaw_x = np.stack([jigsaw_negative(img, cfg.jigsaw_grid, jr)[0] for img in batch.real_x])
        return batch

    # updates --------------------------------------------------------------------------

    def _augment(self, x: torch.Tensor, step: int, update: int) -> torch.Tensor:
        if not self.cfg.augment:
            return x
        return augment_minimal(x, stream(self.cfg.seed, step, update, AUGMENT), flip=self.cfg.augment_flip)

    def disc_outputs(self, batch: SampleBatch, step: int, update: int) -> DiscBatch:
        """One concatenated D call over every slot, split back into loss terms."""
        parts = [torch.from_numpy(np.ascontiguousarray(batch.real_x)), batch.fake_x]
        for a in (batch.type1_x, batch.type2_x, batch.jigsaw_x):
            if a is not None:
                parts.append(torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32)))
        x = self._augment(torch.cat(parts), step, update)
        m = len(batch.anchors)
        y = torch.from_numpy(np.tile(batch.anchors, len(parts))).float()
        out = self.D(x, y).double()
        chunks = list(torch.split(out, m))
        rw = torch.from_numpy(batch.real_w / batch.real_w.sum())
        fw = torch.from_numpy(batch.fake_w / batch.fake_w.sum())
        one_group = torch.zeros(m, dtype=torch.long)
        db = DiscBatch(Term(chunks.pop(0), rw, one_group), Term(chunks.pop(0), fw, one_group))
        if batch.type1_x is not None:
            db.type1 = Term(chunks.pop(0))
        if batch.type2_x is not None:
            db.type2 = Term(chunks.pop(0))
        if batch.jigsaw_x is not None:
            db.jigsaw = Term(chunks.pop(0))
        return db

    def disc_update(self, step: int, update: int) -> tuple[float, int, SampleBatch]:
        batch = self.build_disc_batch(step, update)
        db = self.disc_outputs(batch, step, update)
        loss, sat = disc_loss(db, self.effective_params(step))
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self._guard(loss, "discriminator", step, batch)
        self.opt_d.step()
        return loss.item(), sat, batch

    def gen_update(self, step: int) -> tuple[float, int]:
        cfg = self.cfg
        upd = cfg.disc_updates_per_step
        rng = stream(cfg.seed, step, upd, GEN)
        m = cfg.gen_batch
        distinct = self.data.distinct_labels
        y = np.clip(distinct[rng.integers(0, len(distinct), m)] + rng.normal(0.0, cfg.vicinity.sigma, m), 0, 1)
        z = stream(cfg.seed, step, upd, Z).standard_normal((m, cfg.net.z_dim)).astype(np.float32)
        yt = torch.from_numpy(y).float()
        fake = self.G(torch.from_numpy(z), yt)
        out = self.D(self._augment(fake, step, upd), yt).double()
        loss, sat = gen_loss(out, cfg.dual_nda.variant)
        self.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        self._guard(loss, "generator", step, None, z=z, y=y)
        self.opt_g.step()
        return loss.item(), sat

    def _guard(self, loss, who, step, batch, **extra):
        if math.isfinite(float(loss.detach())):
            return
        path = None
        if self.run_dir is not None:
            path = self.run_dir / f"diverged_step{step}.bin"
            tensors = {k: np.asarray(v) for k, v in extra.items()}
            if batch is not None:
                for name in ("anchors", "real_x", "real_w", "fake_labels", "fake_w",
                             "type1_x", "type2_x", "jigsaw_x"):
                    v = getattr(batch, name)
                    if v is not None:
                        tensors[name] = np.asarray(v)
                tensors["fake_x"] = batch.fake_x.detach().numpy()
            persistence.save(path, "batch_dump", {"step": step, "who": who}, tensors)
        raise TrainingError(f"non-finite {who} loss at step {step}" + (f"; batch saved to {path}" if path else ""))

    def train_step(self) -> dict:
        step = self.step
        d_losses, sat, widen, redraws = [], 0, 0, 0
        for u in range(self.cfg.disc_updates_per_step):
            dl, s, b = self.disc_update(step, u)
            d_losses.append(dl)
            sat += s
            widen += b.widenings
            redraws += b.anchor_resamples
        gl, gs = self.gen_update(step)
        sat += gs
        self.counters["saturated"] += sat
        self.counters["widenings"] += widen
        self.counters["anchor_resamples"] += redraws
        self.step += 1
        rec = {"step": step, "d_loss": d_losses[-1], "g_loss": gl, "saturated": sat,
               "widenings": widen, "anchor_resamples": redraws, "nda": int(self.nda_active(step))}
        self.history.append(rec)
        return rec

    def run(self, until: int | None = None) -> Iterator["Checkpoint"]:
        """Train up to step ``until`` (default: cfg.steps), yielding periodic checkpoints."""
        until = self.cfg.steps if until is None else until
        every = self.cfg.checkpoint_every
        while self.step < until:
            rec = self.train_step()
            if self.run_dir is not None:
                append_log(self.run_dir / "train_log.csv", [rec])
            if every and self.step % every == 0 and self.step < until:
                yield self.checkpoint()
        yield self.checkpoint()

    # checkpoints ----------------------------------------------------------------------

    def checkpoint(self) -> "Checkpoint":
        return Checkpoint(self.step, self.cfg, state_to_numpy(self.G), state_to_numpy(self.D),
                          _opt_state(self.opt_g), _opt_state(self.opt_d), dict(self.counters))

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", dataset: Dataset, pool: NegativePool | None = None,
                        run_dir=None, cfg: TrainConfig | None = None) -> "Trainer":
        """Resume. ``cfg`` may replace the stored config (e.g. a longer run or a new phase)."""
        t = cls(cfg or ckpt.config, dataset, pool, run_dir)
        load_numpy_state(t.G, ckpt.g_state)
        load_numpy_state(t.D, ckpt.d_state)
        if cfg is None or cfg.lr == ckpt.config.lr:
            _load_opt_state(t.opt_g, ckpt.g_opt)
            _load_opt_state(t.opt_d, ckpt.d_opt)
        t.step = ckpt.step
        t.counters = dict(ckpt.counters)
        return t


def _opt_state(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    sd = opt.state_dict()
    out = {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            out[f"{pid}/{k}"] = np.asarray(v.detach().numpy() if torch.is_tensor(v) else v)
    return out


def _load_opt_state(opt: torch.optim.Optimizer, flat: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    state: dict = {}
    for key, v in flat.items():
        pid, name = key.split("/", 1)
        state.setdefault(int(pid), {})[name] = torch.from_numpy(np.array(v))
    sd["state"] = state
    opt.load_state_dict(sd)


@dataclass
class Checkpoint:
    step: int
    config: TrainConfig
    g_state: dict[str, np.ndarray]
    d_state: dict[str, np.ndarray]
    g_opt: dict[str, np.ndarray] = field(default_factory=dict)
    d_opt: dict[str, np.ndarray] = field(default_factory=dict)
    counters: dict = field(default_factory=dict)

    def generator(self) -> Generator:
        g = Generator(self.config.net)
        load_numpy_state(g, self.g_state)
        g.eval()
        return g

    def discriminator(self) -> Discriminator:
        d = Discriminator(self.config.net)
        load_numpy_state(d, self.d_state)
        d.eval()
        return d

    def tensors(self) -> dict[str, np.ndarray]:
        t = {f"G/{k}": v for k, v in self.g_state.items()}
        t.update({f"D/{k}": v for k, v in self.d_state.items()})
        t.update({f"optG/{k}": v for k, v in self.g_opt.items()})
        t.update({f"optD/{k}": v for k, v in self.d_opt.items()})
        return t

    def manifest(self) -> dict:
        return {"step": self.step, "config": self.config.to_dict(), "config_hash": self.config.hash(),
                "counters": self.counters, "rng": "SeedSequence([seed, step, update, component])"}

    def digest(self) -> str:
        return persistence.sha256_hex(persistence.encode("checkpoint", self.manifest(), self.tensors()))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    persistence.save(path, "checkpoint", ckpt.manifest(), ckpt.tensors())


def load_checkpoint(path) -> Checkpoint:
    manifest, t = persistence.load(path, "checkpoint")
    groups: dict[str, dict] = {"G": {}, "D": {}, "optG": {}, "optD": {}}
    for k, v in t.items():
        head, rest = k.split("/", 1)
        groups[head][rest] = v
    cfg = TrainConfig.from_dict(manifest["config"])
    if cfg.hash() != manifest["config_hash"]:
        raise persistence.CorruptionError("checkpoint config hash does not match its config")
    return Checkpoint(manifest["step"], cfg, groups["G"], groups["D"], groups["optG"], groups["optD"],
                      manifest["counters"])


LOG_FIELDS = ("step", "d_loss", "g_loss", "saturated", "widenings", "anchor_resamples", "nda")


def format_log(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in records:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS])
    return buf.getvalue()


def append_log(path: Path, records) -> None:
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(",".join(LOG_FIELDS) + "\n")
        fh.write(format_log(records))


def train(cfg: TrainConfig, dataset: Dataset, pool: NegativePool | None = None,
          run_dir=None) -> Iterator[Checkpoint]:
    return Trainer(cfg, dataset, pool, run_dir).run()


@dataclass
class FakeSet:
    images: np.ndarray      # (n, C, H, W) float32
    labels: np.ndarray      # (n,) normalized conditioning labels
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)


def sample(gen: Generator | Checkpoint, labels, n_per_label: int, seed: int, chunk: int = 500) -> FakeSet:
    """n_per_label fakes at each label, grouped by label in the given order."""
    if isinstance(gen, Checkpoint):
        gen = gen.generator()
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size and (labels.min() < 0 or labels.max() > 1):
        raise DomainError("sampling labels must lie in [0, 1]")
    y = np.repeat(labels, n_per_label)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    out = np.empty((len(y), gen.spec.channels, gen.spec.resolution, gen.spec.resolution), np.float32)
    for s in range(0, len(y), chunk):
        z = rng.standard_normal((min(chunk, len(y) - s), gen.spec.z_dim)).astype(np.float32)
        out[s:s + len(z)] = generate(gen, z, y[s:s + len(z)]).numpy()
    return FakeSet(out, y, {"seed": seed, "n_per_label": n_per_label, "n_labels": int(labels.size)})


def save_fake_set(fs: FakeSet, path) -> None:
    persistence.save(path, "fake_set", fs.manifest, {"images": fs.images, "labels": fs.labels})


def load_fake_set(path) -> FakeSet:
    manifest, t = persistence.load(path, "fake_set")
    return FakeSet(t["images"], t["labels"], manifest)


def generator_fn(gen: Generator, z_dim: int | None = None):
    """Adapter for the pool builders: (labels, rng) -> images."""
    z_dim = z_dim or gen.spec.z_dim

    def fn(labels, rng):
        z = rng.standard_normal((len(labels), z_dim)).astype(np.float32)
        return generate(gen, z, np.asarray(labels)).numpy()
    return fn


def checkpoint_id(ckpt: Checkpoint) -> str:
    return ckpt.digest()[:16]
