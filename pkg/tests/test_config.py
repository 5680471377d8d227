import pytest
import yaml

from dualnda import config as C
from dualnda.errors import ConfigError


def test_defaults_resolve():
    cfg = C.load_config()
    tc = C.train_config(cfg, 1, 32)
    assert tc.dual_nda.lambda1 == 0.1 and tc.dual_nda.lambda2 == 0.2
    base = C.train_config(cfg, 1, 32, nda=False)
    assert base.dual_nda.lambda1 == base.dual_nda.lambda2 == base.dual_nda.lambda_nda == 0.0


def test_overrides_and_unknown_keys(tmp_path):
    cfg = C.load_config(overrides=["train.seed=7", "eval.radius_raw=2.5"])
    assert cfg["train"]["seed"] == 7 and cfg["eval"]["radius_raw"] == 2.5
    with pytest.raises(ConfigError, match="unknown config key"):
        C.load_config(overrides=["train.bogus=1"])
    with pytest.raises(ConfigError):
        C.load_config(overrides=["train.seed"])
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"train": {"nope": 1}}))
    with pytest.raises(ConfigError, match="train.nope"):
        C.load_config(p)


def test_validation_errors():
    with pytest.raises(ConfigError):
        C.load_config(overrides=["train.loss_variant=wgan"])
    with pytest.raises(ConfigError):
        C.load_config(overrides=["train.lambda1=0.6", "train.lambda2=0.5"])
    with pytest.raises(ConfigError):
        C.load_config(overrides=["vicinity.sigma=0.1"])
    with pytest.raises(ConfigError):
        C.load_config(overrides=["ablation.combos=[type3]"])


def test_presets_expand_and_snapshot_keeps_overrides(tmp_path):
    cfg = C.load_config(overrides=["train.preset=utkface128", "train.steps=10", "train.nda_start_step=5"])
    assert cfg["train"]["disc_updates_per_step"] == 4 and cfg["train"]["steps"] == 10
    assert cfg["negatives"]["mode"] == "integer"
    snap = tmp_path / "config.yaml"
    snap.write_text(C.dump_config(cfg))
    again = C.load_config(snap, expand_preset=False)
    assert again == cfg
    with pytest.raises(ConfigError, match="unknown training preset"):
        C.load_config(overrides=["train.preset=mnist"])


def test_published_presets():
    p = C.TRAIN_PRESETS
    assert (p["utkface64"]["steps"], p["utkface64"]["nda_start_step"]) == (60000, 40000)
    assert (p["utkface128"]["steps"], p["utkface128"]["nda_start_step"]) == (22500, 20000)
    assert (p["steering_angle64"]["lambda1"], p["steering_angle64"]["lambda2"]) == (0.1, 0.2)
    assert (p["steering_angle128"]["lambda1"], p["steering_angle128"]["lambda2"]) == (0.2, 0.3)
    assert all(v["q2"] == 0.9 for v in p.values())
