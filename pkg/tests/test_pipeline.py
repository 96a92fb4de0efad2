"""End-to-end pipeline stages, artifacts and the command-line interface."""
from __future__ import annotations

import csv
import json

import numpy as np
import pytest
import yaml

from loadinfer import cli
from loadinfer.feeder import FeederStructure, power_flow, feeder18
from loadinfer.pipeline import ExperimentConfig, StageError, run_pipeline, stage_evaluate


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = ExperimentConfig(seed=7, outdir=str(out))
    cfg.population.counts = {"residential": 30, "commercial": 12, "industrial": 8}
    cfg.population.unobserved = 4
    cfg.mtsl.max_epochs = 120
    cfg.mtsl.min_class_members = 4
    cfg.rbl.max_steps = 48
    run_pipeline(cfg)
    return cfg, out


EXPECTED_ARTIFACTS = [
    "observed.csv", "feeder_customers.csv", "placement.json", "unobserved.json",
    "truth.json", "bills.json", "bank.json", "dbi_curve.csv", "models.json",
    "joint_classes.json", "identification.json", "trajectories.csv",
    "assignments.json", "state_estimation.csv", "state_estimation_summary.json",
    "metrics.json", "mape_tables.csv", "config_used.yaml",
]


def test_all_artifacts_written(completed_run):
    _, out = completed_run
    for name in EXPECTED_ARTIFACTS:
        assert (out / name).exists(), name


def test_metrics_cover_all_scopes(completed_run):
    _, out = completed_run
    scopes = json.loads((out / "metrics.json").read_text())["scopes"]
    assert any(s.startswith("clustering/") for s in scopes)
    assert any(s.startswith("disaggregation/") for s in scopes)
    assert "identification" in scopes
    assert "state_estimation" in scopes
    ident = scopes["identification"]
    assert 0.0 <= ident["accuracy"] <= 1.0
    assert ident["customers"] == 4


def test_unobserved_customers_are_a_subset(completed_run):
    _, out = completed_run
    unobserved = json.loads((out / "unobserved.json").read_text())
    placement = json.loads((out / "placement.json").read_text())
    assert len(unobserved) == 4
    assert set(unobserved) <= set(placement)
    assignments = json.loads((out / "assignments.json").read_text())
    assert sorted(assignments) == sorted(unobserved)


def test_state_estimation_csv_shape(completed_run):
    cfg, out = completed_run
    with open(out / "state_estimation.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    n_nodes = 18
    assert len(rows) == 672 * n_nodes
    assert set(rows[0]) == {"step", "node", "true_vmag", "true_vang", "est_vmag", "est_vang"}


def test_evaluate_missing_artifacts_raises(tmp_path):
    cfg = ExperimentConfig(outdir=str(tmp_path / "empty"))
    with pytest.raises(StageError, match="missing artifacts"):
        stage_evaluate(cfg)


def test_config_yaml_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=99, outdir="x")
    cfg.population.months = 4
    cfg.rbl.max_steps = 10
    path = tmp_path / "cfg.yaml"
    cfg.to_yaml(path)
    back = ExperimentConfig.from_yaml(path)
    assert back.seed == 99
    assert back.population.months == 4
    assert back.rbl.max_steps == 10


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown config key"):
        ExperimentConfig.from_dict({"population": {"n_castles": 3}})


def test_cli_requires_command(capsys):
    assert cli.main([]) == 1


def test_cli_missing_config_exit_1(capsys):
    assert cli.main(["--config", "/nonexistent/cfg.yaml", "run-all"]) == 1
    assert "not found" in capsys.readouterr().err


def test_cli_evaluate_on_empty_dir_exit_2(tmp_path, capsys):
    assert cli.main(["--out", str(tmp_path / "void"), "evaluate"]) == 2
    assert "runtime failure" in capsys.readouterr().err


def test_cli_stage_rerun_exit_0(completed_run, capsys):
    cfg, out = completed_run
    path = out / "config_used.yaml"
    assert cli.main(["--config", str(path), "evaluate"]) == 0


def test_cli_estimate_file(tmp_path, capsys):
    fdr = feeder18()
    st = FeederStructure(fdr)
    loads = {nd.id: (nd.load_kw, nd.load_kvar) for nd in fdr.nodes if nd.id != fdr.slack_node}
    pf = power_flow(fdr, loads, tol=1e-12, structure=st)
    head_i = complex(np.sum(pf.branch_currents[st.head_branches]))
    feeder_path = str((tmp_path / "feeder.json"))
    import shutil
    from pathlib import Path
    shutil.copy(Path(cli.__file__).parent / "data" / "feeder18.json", feeder_path)
    ms_path = tmp_path / "ms.csv"
    with open(ms_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "kind", "node", "value_re", "value_im", "weight"])
        w.writerow([0, "head_voltage_phasor", 1, pf.voltages[0].real, pf.voltages[0].imag, 1e6])
        w.writerow([0, "head_current_phasor", 1, head_i.real, head_i.imag, 1e6])
        for nid, (kw, kvar) in sorted(loads.items()):
            p, q = kw / fdr.base_kva, kvar / fdr.base_kva
            w.writerow([0, "node_P", nid, p, "", 25.0 / max(p, 1e-4) ** 2])
            w.writerow([0, "node_Q", nid, q, "", 25.0 / max(q, 1e-4) ** 2])
    out_path = tmp_path / "estimates.csv"
    rc = cli.main(["estimate-file", feeder_path, str(ms_path), "--output", str(out_path)])
    assert rc == 0
    with open(out_path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 18
    est = {int(r["node"]): float(r["vmag"]) for r in rows}
    true = {nid: abs(v) for nid, v in pf.voltage_by_node.items()}
    worst = max(abs(est[n] - true[n]) for n in true)
    assert worst < 1e-4


def test_cli_estimate_file_bad_columns(tmp_path, capsys):
    (tmp_path / "ms.csv").write_text("a,b\n1,2\n")
    import shutil
    from pathlib import Path
    feeder_path = str(tmp_path / "feeder.json")
    shutil.copy(Path(cli.__file__).parent / "data" / "feeder18.json", feeder_path)
    assert cli.main(["estimate-file", feeder_path, str(tmp_path / "ms.csv")]) == 1
