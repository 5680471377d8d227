import csv

import numpy as np

from dualnda import config as C
from dualnda import pipeline as P
from dualnda.evaluation import METRICS


def tiny_run(path, tiny_config, *overrides):
    return P.Run(path, C.load_config(tiny_config, list(overrides)))


def test_axis_settings_cover_grids(tiny_config, tmp_path):
    run = tiny_run(tmp_path, tiny_config)
    assert [s for s, _, _ in P.axis_settings(run, "q1")] == ["0.3", "0.5", "0.7", "0.9"]
    assert len(P.axis_settings(run, "q2")) == 5
    lsum = P.axis_settings(run, "lambda_sum")
    for (label, _, kw) in lsum:
        assert abs(kw["lambda1"] + kw["lambda2"] - float(label)) < 1e-12
        assert abs(kw["lambda1"] / kw["lambda2"] - 0.5) < 1e-12
    combos = dict((s, kw) for s, _, kw in P.axis_settings(run, "combos"))
    assert len(combos) == 8
    assert combos["nda+type1+type2"] == {"lambda1": 0.1, "lambda2": 0.2, "lambda_nda": C.NDA_LAMBDA}
    assert combos["type2"] == {"lambda1": 0.0, "lambda2": 0.2, "lambda_nda": 0.0}


def test_warm_start_shared_and_report_rerun(tiny_config, tmp_path):
    run = tiny_run(tmp_path, tiny_config, "ablation.combos=[baseline, type1]")
    P.make_data(run)
    P.fit_niqe(run)
    P.train_baseline(run)
    P.build_negatives(run)
    P.train_dualnda(run)
    log_b = (tmp_path / "seed0" / "baseline" / "train_log.csv").read_text().splitlines()
    log_d = (tmp_path / "seed0" / "dualnda" / "train_log.csv").read_text().splitlines()
    assert len(log_b) == 5 and len(log_d) == 3
    assert log_d[1].startswith("2,")
    paths = P.ablate(run, ["combos"])
    rows = list(csv.DictReader(open(paths["combos"])))
    assert [r["setting"] for r in rows] == ["baseline", "type1"]
    assert all(f"{m}_mean" in rows[0] for m in METRICS)
    first = {p: p.read_bytes() for p in P.report(run)}
    second = {p: p.read_bytes() for p in P.report(run)}
    assert first == second
    assert (tmp_path / "report" / "fig_types.csv").exists()


def test_eval_centers(tiny_config, tmp_path):
    run = tiny_run(tmp_path, tiny_config)
    ds = P.make_data(run)
    centers, radius = P.eval_centers(run, ds)
    assert np.allclose(centers, np.linspace(0, 1, 5))
    assert radius == 40.0 / ds.label_space.span
