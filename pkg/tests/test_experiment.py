import json
import os

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from noisy_i2i import experiment as ex
from noisy_i2i.cli import main
from noisy_i2i.errors import InvalidSpecError
from noisy_i2i.metrics import spearman_abs

SMOKE = {
    "name": "t",
    "dataset": {"kind": "synthetic", "num_domains": 3, "samples_per_domain": 12, "image_size": 16,
                "train_size": 24},
    "train": {"epochs_flat": 1, "epochs_decay": 1, "eval_every_epochs": 1, "cls_eval_every_iters": 2,
              "g_base_width": 4, "g_res_blocks": 1, "d_base_width": 4, "d_layers": 2, "batch_size": 4},
    "eval": {"classifier_epochs": 1, "kid_splits": 2, "kid_split_size": 10, "width": 4},
    "cells": [{"variant": ["StarGAN", "RMIT"], "classifier": "naive", "noise": "symmetric", "rate": 0.5,
               "seeds": [0, 1]}],
}


def result(row, condition, seed, ca, fid, is_score=1.5, kid=0.01, alpha=None, cell_index=0, variant=None):
    return {"row": row, "condition": condition, "seed": seed, "cell_index": cell_index,
            "config_hash": f"{row}-{condition}-{seed}",
            "cell": {"variant": variant or row, "alpha": alpha},
            "final": {"ca": ca, "fid": fid, "is_score": is_score, "kid": kid}}


def test_lower_median():
    assert ex.lower_median([3, 1, 2]) == 2
    assert ex.lower_median([4, 1, 3, 2]) == 2
    assert ex.lower_median([7]) == 7
    with pytest.raises(InvalidSpecError):
        ex.lower_median([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12), st.randoms())
def test_median_is_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert ex.lower_median(values) == ex.lower_median(shuffled)


GOLDEN_RESULTS = [
    result("StarGAN", "clean", 0, 92.0, 3.0), result("StarGAN", "clean", 1, 90.0, 5.0),
    result("StarGAN", "clean", 2, 94.0, 4.0),
    result("StarGAN", "symmetric 0.5", 0, 3.0, 2.0), result("StarGAN", "symmetric 0.5", 1, 5.0, 2.5),
    result("RMIT", "clean", 0, 91.0, 4.5), result("RMIT", "clean", 1, 93.0, 3.5),
    result("RMIT", "symmetric 0.5", 0, 20.0, 6.0), result("RMIT", "symmetric 0.5", 1, 17.0, 7.0),
    result("RMIT", "symmetric 0.5", 2, 15.0, 5.0),
]

GOLDEN_TABLE = """\
medians over trials (lower median for even trial counts)
        ||         clean         ||     symmetric 0.5    
model   ||        CA |       FID ||        CA |       FID
---------------------------------------------------------
StarGAN ||      92.0 |       4.0 ||       3.0 |       2.0
RMIT    ||      91.0 |       3.5 ||      17.0 |       6.0
"""


def test_golden_report():
    rows = ex.aggregate(GOLDEN_RESULTS)
    assert ex.format_table(rows) == GOLDEN_TABLE
    csv = ex.report_csv(rows).splitlines()
    assert csv[0] == "model,condition,alpha,trials,ca,fid,is_score,kid,config_hashes"
    assert csv[1].startswith("StarGAN,clean,,3,92.0,4.0,1.5,0.01,StarGAN-clean-0;")
    assert csv[4] == ("RMIT,symmetric 0.5,,3,17.0,6.0,1.5,0.01,"
                      "RMIT-symmetric 0.5-0;RMIT-symmetric 0.5-1;RMIT-symmetric 0.5-2")


def test_report_is_order_invariant():
    rows = ex.aggregate(GOLDEN_RESULTS)
    shuffled = sorted(GOLDEN_RESULTS, key=lambda r: (r["row"], -r["seed"]), reverse=True)
    again = {(r["model"], r["condition"]): r for r in ex.aggregate(shuffled)}
    for r in rows:
        assert again[(r["model"], r["condition"])] == r


def test_plan_validation():
    with pytest.raises(InvalidSpecError):
        ex.ExperimentPlan.from_dict({**SMOKE, "cells": [{"variant": "RMIT", "seeds": []}]})
    with pytest.raises(InvalidSpecError):
        ex.ExperimentPlan.from_dict({**SMOKE, "cells": [{"variant": "CycleGAN", "seeds": [0]}]})
    with pytest.raises(InvalidSpecError):
        ex.ExperimentPlan.from_dict({**SMOKE, "cells": [{"variant": "RMIT", "noise": "symmetric", "rate": 2}]})
    with pytest.raises(InvalidSpecError):
        ex.ExperimentPlan.from_dict({**SMOKE, "bogus": 1})
    with pytest.raises(InvalidSpecError):
        ex.ExperimentPlan.from_dict({**SMOKE, "train": {"lr": -1}})
    with pytest.raises(InvalidSpecError):
        ex.ExperimentPlan.from_dict({"cells": []})
    plan = ex.ExperimentPlan.from_dict(SMOKE)
    assert [c.variant.value for c in plan.cells] == ["StarGAN", "RMIT"]


def test_grid_plan_has_nineteen_conditions():
    plan = ex.ExperimentPlan.load(os.path.join(os.path.dirname(__file__), "..", "plans", "grid.yaml"))
    conditions = {(c.classifier, c.condition) for c in plan.cells}
    assert len(conditions) == 19
    assert len(plan.cells) == 6 * 19
    assert sum(len(c.seeds) for c in plan.cells) == 570


def test_alpha_sweep_endpoints():
    plan = ex.ExperimentPlan.from_dict(SMOKE)
    base = ex.Cell("RMIT_cyc-vcyc", noise="symmetric", rate=0.5, seeds=(0,))
    cells = ex.alpha_sweep(base, [0, 0.25, 0.5, 0.75, 1])
    assert [c.variant.value for c in cells] == ["RMIT", "RMIT_cyc-vcyc", "RMIT_cyc-vcyc", "RMIT_cyc-vcyc", "StarGAN"]
    stargan = ex.Cell("StarGAN", noise="symmetric", rate=0.5, seeds=(0,))
    rmit = ex.Cell("RMIT", noise="symmetric", rate=0.5, seeds=(0,))
    assert plan.config_for(cells[-1], 0) == plan.config_for(stargan, 0)
    assert plan.config_for(cells[0], 0) == plan.config_for(rmit, 0)
    assert plan.config_for(cells[1], 0).weights.alpha == 0.25
    recyc = ex.alpha_sweep(ex.Cell("RMIT_recyc-vcyc", seeds=(0,)), [1.0])
    assert recyc[0].variant.value == "StarGAN_recyc"
    with pytest.raises(InvalidSpecError):
        ex.alpha_sweep(base, [1.5])
    with pytest.raises(InvalidSpecError):
        ex.alpha_sweep(rmit, [0.5])


def test_sweep_rows_map_endpoints():
    rs = [result("RMIT", "s", 0, 20.0, 5.0, variant="RMIT"),
          result("RMIT_cyc-vcyc", "s", 0, 15.0, 4.0, alpha=0.5, variant="RMIT_cyc-vcyc"),
          result("StarGAN", "s", 0, 5.0, 3.0, variant="StarGAN")]
    rows = ex.sweep_rows(rs, [0, 0.5, 1])
    assert [(r["alpha"], r["ca"]) for r in rows] == [(0.0, 20.0), (0.5, 15.0), (1.0, 5.0)]


def test_correlation_report():
    rng = np.random.default_rng(0)
    rs = [result("m", "c", i, float(rng.uniform(0, 100)), float(rng.uniform(0, 10)),
                 float(rng.uniform(1, 3)), float(rng.uniform(0, 1))) for i in range(8)]
    rho, flagged = ex.correlation_report(rs)
    assert len(rho) == 6 and not flagged
    for (a, b), v in rho.items():
        assert v == spearman_abs([r["final"][a] for r in rs], [r["final"][b] for r in rs])
    for r in rs:
        r["final"]["kid"] = r["final"]["fid"]
    assert ex.correlation_report(rs)[0][("fid", "kid")] == 1.0
    for r in rs:
        r["final"]["is_score"] = 1.0
    rho, flagged = ex.correlation_report(rs)
    assert set(flagged) == {("ca", "is_score"), ("fid", "is_score"), ("is_score", "kid")}
    assert len(rho) == 3
    with pytest.raises(InvalidSpecError):
        ex.correlation_report(rs[:4])


def test_output_root_resolution(monkeypatch, tmp_path):
    plan = ex.ExperimentPlan.from_dict(SMOKE)
    monkeypatch.delenv(ex.OUT_ENV, raising=False)
    assert str(ex.resolve_output_root(plan)) == "runs"
    monkeypatch.setenv(ex.OUT_ENV, str(tmp_path / "env"))
    assert ex.resolve_output_root(plan) == tmp_path / "env"
    assert ex.resolve_output_root(plan, tmp_path / "flag") == tmp_path / "flag"


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    outcome = ex.run_plan(ex.ExperimentPlan.from_dict(SMOKE), workers=1, out=root)
    return root, outcome


def test_run_plan_outputs(smoke_run):
    root, outcome = smoke_run
    assert outcome.complete and len(outcome.results) == 4
    assert (root / "report.csv").exists() and (root / "report.txt").exists()
    assert len(list((root / "runs").iterdir())) == 4
    rows = ex.aggregate(outcome.results)
    assert {r["trials"] for r in rows} == {2}
    run = root / "runs" / outcome.results[0]["run_id"]
    assert {"checkpoint.pt", "labels.json", "config.json", "train_log.jsonl", "trajectory.jsonl",
            "metrics.jsonl", "result.json"} <= {p.name for p in run.iterdir()}


def test_rerun_is_noop(smoke_run):
    root, outcome = smoke_run
    stamps = {p: p.stat().st_mtime_ns for p in root.glob("runs/*/result.json")}
    report = (root / "report.txt").read_text()
    again = ex.run_plan(ex.ExperimentPlan.from_dict(SMOKE), workers=1, out=root)
    assert {p: p.stat().st_mtime_ns for p in root.glob("runs/*/result.json")} == stamps
    assert (root / "report.txt").read_text() == report
    assert again.results == outcome.results


def test_parallel_matches_serial(smoke_run, tmp_path):
    root, _ = smoke_run
    ex.run_plan(ex.ExperimentPlan.from_dict(SMOKE), workers=2, out=tmp_path)
    assert (tmp_path / "report.txt").read_text() == (root / "report.txt").read_text()
    assert (tmp_path / "report.csv").read_text() == (root / "report.csv").read_text()


def test_failed_run_is_recorded(monkeypatch, tmp_path):
    original = ex._run_one

    def flaky(plan_dict, cell_index, seed, root, resume):
        if seed == 1:
            raise RuntimeError("boom")
        return original(plan_dict, cell_index, seed, root, resume)

    monkeypatch.setattr(ex, "_run_one", flaky)
    plan_file = tmp_path / "plan.yaml"
    plan_file.write_text(yaml.safe_dump(SMOKE))
    assert main(["run", "--plan", str(plan_file), "--out", str(tmp_path / "out")]) == 3
    failures = json.loads((tmp_path / "out" / "failures.json").read_text())
    assert len(failures) == 2 and all(f["seed"] == 1 for f in failures)
    assert "incomplete: 2 run(s) missing" in (tmp_path / "out" / "report.txt").read_text()


def test_cli_verbs(smoke_run, tmp_path, capsys, monkeypatch):
    root, _ = smoke_run
    assert main(["report", "--out", str(root)]) == 0
    assert "StarGAN" in capsys.readouterr().out
    assert main(["plot-trajectories", "--out", str(root)]) == 0
    assert (root / "figures" / "trajectory_symmetric_0.5.png").exists()
    # only 4 runs: below the minimum for correlations
    assert main(["correlate", "--out", str(root)]) == 2
    monkeypatch.setenv(ex.OUT_ENV, str(root))
    assert main(["report"]) == 0


def test_cli_validation_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**SMOKE, "cells": [{"variant": "RMIT", "seeds": []}]}))
    assert main(["run", "--plan", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["run", "--plan", str(tmp_path / "missing.yaml")]) == 2
    assert main(["frobnicate"]) == 2
    (tmp_path / "broken.yaml").write_text("cells: [unclosed")
    assert main(["run", "--plan", str(tmp_path / "broken.yaml")]) == 2
    assert main(["run", "--plan", str(bad), "--workers", "0"]) == 2


def test_cli_sweep_alpha(tmp_path, capsys):
    plan = {**SMOKE, "train": {**SMOKE["train"], "epochs_flat": 1, "epochs_decay": 0},
            "cells": [{"variant": "RMIT_cyc-vcyc", "noise": "symmetric", "rate": 0.5, "seeds": [0]}]}
    f = tmp_path / "p.yaml"
    f.write_text(yaml.safe_dump(plan))
    assert main(["sweep-alpha", "--plan", str(f), "--out", str(tmp_path / "o"), "--alphas", "0,0.5,1"]) == 0
    out = capsys.readouterr().out
    assert "alpha=0.00" in out and "alpha=0.50" in out and "alpha=1.00" in out
    assert (tmp_path / "o" / "figures" / "alpha_sweep.png").exists()


def test_changed_dataset_does_not_reuse_runs(smoke_run, tmp_path):
    root, outcome = smoke_run
    other = {**SMOKE, "dataset": {**SMOKE["dataset"], "seed": 7}}
    plan = ex.ExperimentPlan.from_dict(other)
    assert ex.data_key(plan) != ex.data_key(ex.ExperimentPlan.from_dict(SMOKE))
    cell = plan.cells[0]
    assert ex.run_id(plan, plan.config_for(cell, 0)) not in {r["run_id"] for r in outcome.results}
    # the report for a root only covers the plan last run there
    (tmp_path / "runs").mkdir()
    for r in outcome.results:
        (tmp_path / "runs" / r["run_id"]).symlink_to(root / "runs" / r["run_id"])
    (tmp_path / "plan.json").write_text(json.dumps(plan.to_dict()))
    assert ex.load_results(tmp_path) == []
    assert len(ex.load_results(root)) == 4
