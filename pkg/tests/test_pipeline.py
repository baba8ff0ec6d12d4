import json
import subprocess
import sys

import pytest

from propinf.errors import ConfigError
from propinf.graph import generate_sbm
from propinf.model import TrainConfig, train
from propinf.pipeline import (CSV_COLUMNS, ExperimentConfig, build_fixture,
                              emit_report, fit_bound_constant, load_config,
                              run_attack, run_shadow_baseline)


def tiny_config(seed=0, **overrides):
    cfg = ExperimentConfig(seed=seed)
    cfg.graph.blocks = (30, 30)
    cfg.graph.p_in = 0.2
    cfg.graph.p_out = 0.0
    cfg.sampling.references = 2
    cfg.sampling.reference_size = 20
    cfg.perturb.k = 4
    cfg.perturb.q = 2
    cfg.model.lam = 1e-2
    cfg.targets.count = 4
    cfg.targets.size = 20
    cfg.attack.epochs = 200
    cfg.shadow_count = 4
    for key, value in overrides.items():
        obj = cfg
        *path, last = key.split(".")
        for part in path:
            obj = getattr(obj, part)
        setattr(obj, last, value)
    return cfg


CONFIG_TEXT = """
[graph]
source = sbm
split = independent
blocks = 30,30
p_in = 0.2
p_out = 0.0
attr_fracs = 0.4,0.6
feature_noise = 1.0

[property]
kind = node
attr_value = 1

[sampling]
references = 2
reference_size = 20
walk_weight = 0.8

[perturbation]
k = 4
q = 2
node_frac = 0.1
edge_frac = 0.2
epsilon = auto
solver = exact_bb

[model]
hops = 2
lambda = 0.01
grad_tol = 1e-6
max_iters = 5000
damping = 0.001
cg_tol = 1e-8

[attack]
knowledge = white-box
epochs = 200
learning_rate = 0.05
weight_decay = 0.2
probe_size = 8

[targets]
count = 4
size = 20

[run]
seed = 3
threads = 1
shadow_count = 4
"""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(CONFIG_TEXT)
    cfg = load_config(str(path))
    assert cfg.graph.blocks == (30, 30)
    assert cfg.perturb.epsilon is None  # auto
    assert cfg.seed == 3
    assert cfg.attack.probe_size == 8


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[graph]\nsurprise = 1\n")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_load_config_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/exp.ini")


def test_env_thread_override(tmp_path, monkeypatch):
    path = tmp_path / "exp.ini"
    path.write_text(CONFIG_TEXT)
    monkeypatch.setenv("PROPINF_THREADS", "3")
    cfg = load_config(str(path))
    assert cfg.threads == 3


def test_validate_rejects_bad_combinations():
    cfg = tiny_config()
    cfg.perturb.q = 10  # q > k
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = tiny_config()
    cfg.graph.kind = "files"
    cfg.graph.split = "independent"
    with pytest.raises(ConfigError):
        cfg.validate()


# ---------------------------------------------------------------------------
# Orchestration contracts
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run():
    cfg = tiny_config(seed=1)
    fixture = build_fixture(cfg)
    report = run_attack(cfg, fixture)
    baseline = run_shadow_baseline(cfg, fixture)
    return cfg, fixture, report, baseline


def test_counting_contract(tiny_run):
    cfg, fixture, report, baseline = tiny_run
    assert report.counts["models_trained"] == cfg.sampling.references
    assert report.counts["models_approximated"] == sum(
        len(entry["chosen"]) for entry in report.selection_log)
    assert baseline.counts["models_trained"] == cfg.shadow_count
    assert baseline.counts["models_approximated"] == 0


def test_counting_with_k_equals_q():
    cfg = tiny_config(seed=2)
    cfg.graph.attr_fracs = (0.5, 0.5)  # near-tie, so stratified halves flip
    cfg.sampling.references = 1
    cfg.perturb.k = 4
    cfg.perturb.q = 4
    cfg.perturb.node_frac = 0.4
    cfg.perturb.epsilon = 1e9  # selection is trivially everything
    report = run_attack(cfg)
    assert report.counts["models_trained"] == 1
    assert report.counts["models_approximated"] == 4


def test_runtime_phase_accounting(tiny_run):
    _, _, report, baseline = tiny_run
    for rep in (report, baseline):
        assert rep.runtime["total_ms"] == pytest.approx(
            sum(rep.runtime["phases"].values()), abs=1e-6)
    assert baseline.runtime["phases"]["approximation"] == 0.0
    assert baseline.runtime["phases"]["selection"] == 0.0


def test_reports_are_deterministic():
    cfg = tiny_config(seed=5)
    a = run_attack(cfg).to_json_dict()
    b = run_attack(cfg).to_json_dict()
    a.pop("runtime")
    b.pop("runtime")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_attack_and_baseline_share_targets(tiny_run):
    cfg, fixture, report, baseline = tiny_run
    assert report.truths == baseline.truths
    fresh_a = build_fixture(cfg)
    fresh_b = build_fixture(cfg)
    assert [g.digest() for g in fresh_a.target_graphs] == \
           [g.digest() for g in fresh_b.target_graphs]


def test_budget_respected_in_selection_log(tiny_run):
    _, _, report, _ = tiny_run
    for entry in report.selection_log:
        if not entry["infeasible"]:
            assert sum(entry["deltas"]) <= entry["epsilon"] + 1e-9


def test_black_box_report_includes_probe():
    cfg = tiny_config(seed=4, **{"attack.knowledge": "black-box",
                                 "attack.probe_size": 12,
                                 "graph.attr_fracs": (0.5, 0.5),
                                 "perturb.node_frac": 0.4})
    report = run_attack(cfg)
    assert report.probe_nodes is not None
    assert len(report.probe_nodes) == 12


def test_threaded_run_matches_serial():
    cfg = tiny_config(seed=6)
    serial = run_attack(cfg).to_json_dict()
    cfg_mt = tiny_config(seed=6)
    cfg_mt.threads = 3
    threaded = run_attack(cfg_mt).to_json_dict()
    for rep in (serial, threaded):
        rep.pop("runtime")
        rep["config"]["threads"] = None
    assert json.dumps(serial, sort_keys=True) == json.dumps(threaded, sort_keys=True)


def test_louvain_split_mode_runs():
    # a louvain split of a two-block graph leaves one block per side, so the
    # attack training labels must come from the stratified perturbation flips
    cfg = tiny_config(seed=7)
    cfg.graph.split = "louvain"
    cfg.graph.blocks = (40, 40)
    cfg.graph.attr_fracs = (0.5, 0.5)
    cfg.sampling.reference_size = 15
    cfg.targets.size = 15
    cfg.perturb.node_frac = 0.4
    report = run_attack(cfg)
    assert report.metrics.n == cfg.targets.count


def test_cg_failure_is_flagged_not_fatal():
    # a one-iteration CG budget cannot converge; the run must still finish
    # and surface the failures as warnings
    cfg = tiny_config(seed=1)
    cfg.model.cg_max_iters = 1
    cfg.model.cg_tol = 1e-14
    report = run_attack(cfg)
    assert any("cg did not converge" in w for w in report.warnings)
    assert report.metrics.n == cfg.targets.count


# ---------------------------------------------------------------------------
# Bound fitting
# ---------------------------------------------------------------------------

def test_fit_bound_quadratic_surrogate_nearly_exact():
    g = generate_sbm([30, 30], 0.2, 0.02, [0.4, 0.6], 0.2, seed=2)
    cfg = TrainConfig(objective="quadratic", grad_tol=1e-11, max_iters=30000)
    theta = train(g, cfg=cfg)
    from propinf.approx import CGConfig
    fit = fit_bound_constant(g, theta, 12, seed=0,
                             cg=CGConfig(tol=1e-12, damping=0.0))
    norms = [n for _, n in fit["points"]]
    assert max(norms) <= 1e-8
    assert fit["C_hat"] <= 1e-8


def test_fit_bound_rejects_empty_only():
    g = generate_sbm([4], 0.0, 0.0, [0.5], 0.1, seed=0)
    g2 = g.induced_subgraph([0])  # single node, no edges
    theta = train(g2, cfg=TrainConfig(max_iters=50))
    with pytest.raises(ValueError):
        fit_bound_constant(g2, theta, 5, seed=0)


# ---------------------------------------------------------------------------
# Reports on disk
# ---------------------------------------------------------------------------

def test_emit_report_json_roundtrip(tiny_run, tmp_path):
    _, _, report, _ = tiny_run
    path = tmp_path / "report.json"
    emit_report(report, "json", str(path))
    back = json.loads(path.read_text())
    assert back == report.to_json_dict()


def test_emit_report_csv_schema(tiny_run, tmp_path):
    _, _, report, baseline = tiny_run
    path = tmp_path / "summary.csv"
    emit_report(report, "csv-summary", str(path))
    emit_report(baseline, "csv-summary", str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",") == CSV_COLUMNS
    assert len(CSV_COLUMNS) == 12
    assert len(lines) == 3
    assert lines[1].split(",")[0] == "attack"
    assert lines[2].split(",")[0] == "baseline"


def test_emit_report_unknown_format(tiny_run, tmp_path):
    _, _, report, _ = tiny_run
    with pytest.raises(ValueError):
        emit_report(report, "parquet", str(tmp_path / "x"))


# ---------------------------------------------------------------------------
# Shadow training scales linearly
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_shadow_training_scales_linearly():
    per_model = []
    for count in (20, 40, 80):
        cfg = tiny_config(seed=9)
        cfg.graph.blocks = (60, 60)
        cfg.sampling.reference_size = 40
        cfg.targets.size = 40
        cfg.targets.count = 2
        cfg.shadow_count = count
        report = run_shadow_baseline(cfg)
        per_model.append(report.runtime["phases"]["training"] / count)
    mid = sorted(per_model)[1]
    for value in per_model:
        assert 0.7 * mid <= value <= 1.3 * mid


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "propinf.cli", *args],
                          capture_output=True, text=True)


def test_cli_gen_sbm_and_split(tmp_path):
    out = tmp_path / "toy"
    res = run_cli("gen-sbm", "--blocks", "20,20", "--p-in", "0.3", "--p-out", "0.01",
                  "--attr-fracs", "0.4,0.6", "--seed", "1", "--out", str(out))
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "toy.edges.tsv").exists()
    assert (tmp_path / "toy.nodes.csv").exists()
    res = run_cli("split", "--graph", str(out), "--seed", "1",
                  "--out-aux", str(tmp_path / "aux"), "--out-target", str(tmp_path / "tgt"))
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "aux.nodes.csv").exists()


def test_cli_run_attack_and_report(tmp_path):
    config = tmp_path / "exp.ini"
    config.write_text(CONFIG_TEXT)
    report_path = tmp_path / "report.json"
    csv_path = tmp_path / "summary.csv"
    res = run_cli("run-attack", "--config", str(config),
                  "--out", str(report_path), "--csv", str(csv_path))
    assert res.returncode == 0, res.stderr
    data = json.loads(report_path.read_text())
    assert data["experiment"] == "attack"
    res = run_cli("report", "--csv", str(tmp_path / "table.csv"), str(report_path))
    assert res.returncode == 0, res.stderr
    lines = (tmp_path / "table.csv").read_text().strip().splitlines()
    assert len(lines) == 2


def test_cli_fit_bound(tmp_path):
    config = tmp_path / "exp.ini"
    config.write_text(CONFIG_TEXT)
    out = tmp_path / "bound.json"
    res = run_cli("fit-bound", "--config", str(config),
                  "--perturbations", "10", "--out", str(out))
    assert res.returncode == 0, res.stderr
    data = json.loads(out.read_text())
    assert set(data) == {"C_hat", "spearman_rho", "points"}
    assert len(data["points"]) == 10


def test_cli_config_error_exit_code(tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text("[graph]\nsource = cloud\n")
    res = run_cli("run-attack", "--config", str(config), "--out", str(tmp_path / "r.json"))
    assert res.returncode == 2


def test_cli_data_error_exit_code(tmp_path):
    res = run_cli("split", "--graph", str(tmp_path / "absent"),
                  "--out-aux", str(tmp_path / "a"), "--out-target", str(tmp_path / "b"))
    assert res.returncode == 3
