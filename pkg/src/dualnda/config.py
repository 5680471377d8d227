"""Experiment configuration: defaults, named presets, YAML files and dotted overrides."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .losses import DualNdaParams
from .models import NetSpec
from .niqe import NiqeSettings
from .trainer import TrainConfig
from .vicinal import VicinityParams, preset as vicinity_preset

# Full-scale training setups. Steps, warm-start step, batch sizes, D updates per
# step, lambdas, quantiles and pool sizes are the published values.
TRAIN_PRESETS: dict[str, dict[str, Any]] = {
    "utkface64": {
        "vicinity": "utkface64", "loss_variant": "vanilla", "steps": 60000, "nda_start_step": 40000,
        "disc_batch": 256, "gen_batch": 256, "disc_updates_per_step": 2,
        "lambda1": 0.05, "lambda2": 0.15, "q1": 0.9, "q2": 0.9,
        "negatives_mode": "integer", "per_label": 10000, "pool_size": 60000,
    },
    "utkface128": {
        "vicinity": "utkface128", "loss_variant": "hinge", "steps": 22500, "nda_start_step": 20000,
        "disc_batch": 256, "gen_batch": 256, "disc_updates_per_step": 4,
        "lambda1": 0.05, "lambda2": 0.15, "q1": 0.9, "q2": 0.9,
        "negatives_mode": "integer", "per_label": 10000, "pool_size": 60000,
    },
    "steering_angle64": {
        "vicinity": "steering_angle", "loss_variant": "hinge", "steps": 20000, "nda_start_step": 0,
        "disc_batch": 512, "gen_batch": 512, "disc_updates_per_step": 2,
        "lambda1": 0.1, "lambda2": 0.2, "q1": 0.5, "q2": 0.9,
        "negatives_mode": "continuous", "pool_size": 17740,
    },
    "steering_angle128": {
        "vicinity": "steering_angle", "loss_variant": "hinge", "steps": 20000, "nda_start_step": 15000,
        "disc_batch": 256, "gen_batch": 256, "disc_updates_per_step": 2,
        "lambda1": 0.2, "lambda2": 0.3, "q1": 0.5, "q2": 0.9,
        "negatives_mode": "continuous", "pool_size": 17740,
    },
}

# weight of the jigsaw term in the vanilla-NDA baseline
NDA_LAMBDA = 0.25

ABLATION_COMBOS = ("baseline", "nda", "nda+type1", "nda+type2", "nda+type1+type2",
                   "type1", "type2", "type1+type2")

# Desk-scale defaults: the synthetic orientation corpus at 32 px with the 64 px steering-angle
# setup scaled down (hinge loss, negatives on from step 0, lambda1=0.1, lambda2=0.2, q1=0.5, q2=0.9).
DEFAULTS: dict[str, Any] = {
    "dataset": {"kind": "rotated_bar", "n": 5000, "resolution": 32, "imbalance": 1.0, "seed": 0,
                "path": None, "labels_file": None, "channels": 1, "bounds": None},
    "vicinity": {"preset": "steering_angle", "sigma": None, "nu": None, "kappa": None, "weight_floor": 1e-3},
    "train": {"preset": None, "steps": 6000, "nda_start_step": 0, "disc_batch": 32, "gen_batch": 32,
              "disc_updates_per_step": 2, "lr": 2e-4, "beta1": 0.5, "beta2": 0.999,
              "loss_variant": "hinge", "lambda1": 0.1, "lambda2": 0.2, "lambda_nda": 0.0, "q1": 0.5,
              "augment": False, "augment_flip": False, "jigsaw_grid": 2, "seed": 0,
              "z_dim": 128, "embed_dim": 128, "g_ch": 8, "d_ch": 8, "checkpoint_every": 0},
    "negatives": {"mode": "continuous", "q2": 0.9, "M": 5000, "per_label": 10000, "seed": 0},
    "niqe": {"patch_size": 16, "sharpness_quantile": 0.75},
    "eval": {"n_centers": 41, "radius_raw": 4.0, "n_per_center": 100, "min_count": 50,
             "evalnet_epochs": 20, "seed": 1234},
    "ablation": {"q1": [0.3, 0.5, 0.7, 0.9], "q2": [0.5, 0.6, 0.7, 0.8, 0.9],
                 "lambda_sum": [0.2, 0.3, 0.4, 0.5, 0.6, 0.7], "lambda_ratio": 0.5,
                 "combos": list(ABLATION_COMBOS), "seeds": [0]},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and base[k]:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for text in overrides:
        keys, value = parse_override(text)
        node = cfg
        for i, k in enumerate(keys):
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown config key {'.'.join(keys[:i + 1])!r}")
            if i == len(keys) - 1:
                node[k] = value
            else:
                node = node[k]
    return cfg


def expand_train_preset(cfg: dict) -> dict:
    """Fill train/vicinity/negatives fields from ``train.preset`` where the user left defaults."""
    name = cfg["train"].get("preset")
    if not name:
        return cfg
    if name not in TRAIN_PRESETS:
        raise ConfigError(f"unknown training preset {name!r}; known: {sorted(TRAIN_PRESETS)}")
    p = TRAIN_PRESETS[name]
    cfg = copy.deepcopy(cfg)
    for k in ("steps", "nda_start_step", "disc_batch", "gen_batch", "disc_updates_per_step",
              "lambda1", "lambda2", "q1", "loss_variant"):
        cfg["train"][k] = p[k]
    cfg["vicinity"]["preset"] = p["vicinity"]
    cfg["negatives"]["mode"] = p["negatives_mode"]
    cfg["negatives"]["q2"] = p["q2"]
    if p["negatives_mode"] == "integer":
        cfg["negatives"]["per_label"] = p["per_label"]
    else:
        cfg["negatives"]["M"] = p["pool_size"]
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                expand_preset: bool = True) -> dict:
    """Defaults, then the YAML file, then ``train.preset`` expansion, then the overrides.

    Pass ``expand_preset=False`` when re-reading a resolved snapshot so earlier
    overrides are not clobbered by the preset again; an explicit
    ``train.preset=...`` override still expands.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path} must contain a mapping")
        cfg = _merge(cfg, user)
    overrides = overrides or []
    preset_ov = [o for o in overrides if o.split("=", 1)[0].strip() == "train.preset"]
    cfg = apply_overrides(cfg, preset_ov)
    if expand_preset or preset_ov:
        cfg = expand_train_preset(cfg)
    cfg = apply_overrides(cfg, [o for o in overrides if o not in preset_ov])
    validate(cfg)
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def vicinity_params(cfg: dict) -> VicinityParams:
    v = cfg["vicinity"]
    explicit = [v[k] for k in ("sigma", "nu", "kappa")]
    if all(x is not None for x in explicit):
        return VicinityParams(*map(float, explicit), weight_floor=float(v["weight_floor"]))
    if any(x is not None for x in explicit):
        raise ConfigError("vicinity.sigma, nu and kappa must be given together (or use vicinity.preset)")
    if not v["preset"]:
        raise ConfigError("set vicinity.preset or explicit vicinity.sigma/nu/kappa")
    return vicinity_preset(v["preset"]).params(float(v["weight_floor"]))


def net_spec(cfg: dict, channels: int, resolution: int) -> NetSpec:
    t = cfg["train"]
    return NetSpec(resolution=resolution, channels=channels, z_dim=int(t["z_dim"]),
                   embed_dim=int(t["embed_dim"]), g_ch=int(t["g_ch"]), d_ch=int(t["d_ch"]),
                   variant=t["loss_variant"])


def train_config(cfg: dict, channels: int, resolution: int, *, lambda1: float | None = None,
                 lambda2: float | None = None, lambda_nda: float | None = None,
                 q1: float | None = None, nda: bool = True) -> TrainConfig:
    """TrainConfig for one phase; ``nda=False`` gives the plain vicinal baseline."""
    t = cfg["train"]
    l1 = float(t["lambda1"] if lambda1 is None else lambda1) if nda else 0.0
    l2 = float(t["lambda2"] if lambda2 is None else lambda2) if nda else 0.0
    ln = float(t["lambda_nda"] if lambda_nda is None else lambda_nda) if nda else 0.0
    return TrainConfig(
        steps=int(t["steps"]), disc_batch=int(t["disc_batch"]), gen_batch=int(t["gen_batch"]),
        vicinity=vicinity_params(cfg),
        dual_nda=DualNdaParams(l1, l2, t["loss_variant"], ln),
        q1=float(t["q1"] if q1 is None else q1),
        disc_updates_per_step=int(t["disc_updates_per_step"]), lr=float(t["lr"]),
        betas=(float(t["beta1"]), float(t["beta2"])), nda_start_step=int(t["nda_start_step"]),
        augment=bool(t["augment"]), augment_flip=bool(t["augment_flip"]), jigsaw_grid=int(t["jigsaw_grid"]),
        seed=int(t["seed"]), net=net_spec(cfg, channels, resolution),
        checkpoint_every=int(t["checkpoint_every"]))


def niqe_settings(cfg: dict) -> NiqeSettings:
    n = cfg["niqe"]
    return NiqeSettings(int(n["patch_size"]), float(n["sharpness_quantile"]))


def validate(cfg: dict) -> None:
    vicinity_params(cfg)
    t = cfg["train"]
    if t["loss_variant"] not in ("vanilla", "hinge"):
        raise ConfigError(f"train.loss_variant must be vanilla or hinge, got {t['loss_variant']!r}")
    DualNdaParams(float(t["lambda1"]), float(t["lambda2"]), t["loss_variant"], float(t["lambda_nda"]))
    if cfg["negatives"]["mode"] not in ("integer", "continuous"):
        raise ConfigError("negatives.mode must be integer or continuous")
    for axis in ("q1", "q2", "lambda_sum", "combos", "seeds"):
        if not isinstance(cfg["ablation"][axis], list):
            raise ConfigError(f"ablation.{axis} must be a list")
    bad = [c for c in cfg["ablation"]["combos"] if c not in ABLATION_COMBOS]
    if bad:
        raise ConfigError(f"unknown ablation combos {bad}; choose from {ABLATION_COMBOS}")
