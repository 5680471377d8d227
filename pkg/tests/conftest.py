from __future__ import annotations

import pytest
import yaml

# a run small enough to exercise every command in seconds
TINY = {
    "dataset": {"n": 300, "resolution": 16, "seed": 1},
    "train": {"steps": 4, "nda_start_step": 2, "disc_batch": 8, "gen_batch": 8, "loss_variant": "hinge",
              "z_dim": 8, "embed_dim": 8, "g_ch": 4, "d_ch": 4},
    "negatives": {"M": 120},
    "niqe": {"patch_size": 8},
    "eval": {"n_centers": 5, "n_per_center": 12, "min_count": 5, "evalnet_epochs": 1, "radius_raw": 40.0},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """record(n, ok, detail): collect one pass/fail line per acceptance criterion."""
    def record(n, ok, detail=""):
        ACCEPTANCE.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
