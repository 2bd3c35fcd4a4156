import csv
import json

import numpy as np
import pytest

from cocoa.data import partition_balanced, write_libsvm
from cocoa.engine import EngineConfig, run_cocoa
from cocoa.harness import (ConfigError, ExperimentConfig, SynthSpec, TraceRecord, clock_seconds, emit_report,
                           expand_settings, reference_optimum, run_experiment, synth_dataset)
from cocoa.local_solvers import LocalSolverConfig
from cocoa.problems import Regularizer, build_problem


def base_config(**kw):
    cfg = {
        "problem": {"type": "lasso", "lambda": 0.5},
        "data": {"synth": {"rows": 30, "cols": 40, "seed": 1}},
        "K": 2,
        "engine": {"max_rounds": 20, "local": {"passes_H": 2}},
    }
    cfg.update(kw)
    return cfg


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_synth_reproducible_dense():
    a = synth_dataset({"rows": 2, "cols": 2, "seed": 7})
    b = synth_dataset(SynthSpec(2, 2, seed=7))
    assert a.matrix == b.matrix and a.matrix.nnz == 4
    np.testing.assert_array_equal(a.labels, b.labels)
    c = synth_dataset({"rows": 2, "cols": 2, "seed": 8})
    assert not np.array_equal(a.matrix.to_dense(), c.matrix.to_dense())


@pytest.mark.parametrize("kw", [dict(density=0.0), dict(density=1.5), dict(rows=0), dict(noise=-1),
                                dict(task="ranking"), dict(sparsity=0.0), dict(scale=0.0)])
def test_synth_rejects(kw):
    spec = dict(rows=3, cols=3)
    spec.update(kw)
    with pytest.raises(ConfigError):
        synth_dataset(spec)


def test_synth_classification_and_sparsity():
    ds = synth_dataset({"rows": 50, "cols": 200, "density": 0.1, "seed": 2, "task": "classification"})
    assert set(np.unique(ds.labels)) <= {-1.0, 1.0}
    assert 0.05 < ds.matrix.nnz / (50 * 200) < 0.15
    assert ds.meta["planted_support"].size == 20


def test_support_recovery():
    ds = synth_dataset({"rows": 100, "cols": 400, "seed": 0, "noise": 0.001, "sparsity": 0.02})
    p = build_problem("least-squares", Regularizer("l1", 1.0), ds, normalize=True)
    lmax = np.max(np.abs(p.matrix.rmatvec(p.smooth.labels)))
    p = build_problem("least-squares", Regularizer("l1", 0.01 * lmax), ds, normalize=True)
    res = run_cocoa(p, partition_balanced(p.n, 4, 0), None,
                    EngineConfig(max_rounds=3000, gap_tolerance=1e-6, local=LocalSolverConfig(10)))
    found = set(np.flatnonzero(res.alpha))
    assert set(ds.meta["planted_support"].tolist()) <= found


@pytest.mark.parametrize("patch", [
    {"problem": {"type": "lasso", "lambda": 0.0}},
    {"problem": {"type": "nope", "lambda": 1.0}},
    {"problem": {"type": "elastic-net", "lambda": 1.0, "eta": 1.5}},
    {"problem": {"type": "lasso", "lambda": 1.0, "delta": -1.0}},
    {"data": {"path": "x.svm", "synth": {"rows": 2, "cols": 2}}},
    {"data": {}},
    {"sweep": {"H": []}},
    {"sweep": {"mu": [1]}},
    {"engine": {"bogus": 1}},
    {"extra_key": 1},
    {"baselines": [{"method": "admm", "rho": -1}]},
    {"clock": {"mode": "sundial"}},
])
def test_config_rejects(patch):
    with pytest.raises(ConfigError if "baselines" not in patch else ValueError):
        ExperimentConfig.from_dict(base_config(**patch))


def test_config_load_and_roundtrip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(base_config()))
    cfg = ExperimentConfig.load(path)
    assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_expand_settings():
    cfg = ExperimentConfig.from_dict(base_config(sweep={"H": [1, 10], "lambda": [0.1, 0.2]},
                                                 compare_unsmoothed=True))
    names = [s.name for s in expand_settings(cfg)]
    assert names[0] == "delta=0_primal" and len(names) == 5
    assert "lambda=0.1_H=10" in names


def test_run_experiment_outputs(tmp_path):
    cfg = base_config(baselines=[{"method": "prox-gd", "max_rounds": 15}], reference=True,
                      reference_rounds=50, reference_passes=200)
    summary = run_experiment(cfg, tmp_path)
    runs = {r["solver"]: r for r in summary["runs"]}
    assert set(runs) == {"cocoa", "prox-gd"}
    for key in ("final_objective", "final_gap", "rounds", "wall_seconds", "sparsity", "bytes_total"):
        assert key in runs["cocoa"]
    assert runs["cocoa"]["rounds"] == 20
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    csvs = sorted(p.name for p in tmp_path.glob("*.csv"))
    listed = sorted(v["csv"] for s in manifest["settings"].values() for v in s.values())
    assert csvs == listed
    rows = read_csv(tmp_path / "base__cocoa.csv")
    assert rows[0] == ["round", "seconds", "objA", "objB", "gap", "bytes", "subopt"]
    assert len(rows) - 1 == 20
    for name in csvs:
        for r in read_csv(tmp_path / name)[1:]:
            assert float(r[6]) >= -1e-9


def test_sweep_is_byte_for_byte_deterministic(tmp_path):
    cfg = base_config(sweep={"H": [1, 3]}, target_gap=1e-3, clock={"mode": "model", "comm_charge": 0.1})
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for f in sorted((tmp_path / "a").glob("*.csv")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    summary = json.loads((tmp_path / "a" / "manifest.json").read_text())["sweep"]
    assert summary["key"] == "H" and set(summary["settings"]) == {"1", "3"}


def test_smoothing_summary_fields():
    cfg = base_config(problem={"type": "lasso", "lambda": 0.5}, variant="dual", sweep={"delta": [0.01]},
                      compare_unsmoothed=True)
    summary = run_experiment(cfg)
    runs = {r["setting"]: r for r in summary["runs"]}
    assert runs["delta=0_primal"]["variant"] == "primal" and runs["delta=0.01"]["variant"] == "dual"
    assert runs["delta=0_primal"]["sparsity_deviation"] == 0.0
    assert "support_mismatch" in runs["delta=0.01"] and "true_objective" in runs["delta=0.01"]


def test_libsvm_data_path(tmp_path):
    ds = synth_dataset({"rows": 20, "cols": 8, "seed": 0})
    write_libsvm(ds, tmp_path / "d.svm")
    cfg = base_config(data={"path": str(tmp_path / "d.svm"), "n_features": 8})
    out = run_experiment(cfg)
    ref = run_experiment(base_config(data={"synth": {"rows": 20, "cols": 8, "seed": 0}}))
    assert out["runs"][0]["final_objective"] == ref["runs"][0]["final_objective"]


def test_emit_report(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
    p = build_problem("least-squares", Regularizer("l1", 0.5), synth_dataset({"rows": 10, "cols": 12}))
    res = run_cocoa(p, partition_balanced(p.n, 2, 0), None, EngineConfig(max_rounds=9))
    man = emit_report([("s", "cocoa", res.trace)], tmp_path, reference=0.0)
    assert len(read_csv(tmp_path / man["settings"]["s"]["cocoa"]["csv"])) - 1 == 9
    with pytest.raises(ValueError):
        emit_report([("s", "cocoa", [])], tmp_path)
    rec = TraceRecord("t", "x", res.trace, clock_seconds(res.trace, {"mode": "model"}), {})
    assert "t" in emit_report([rec], tmp_path / "r")["settings"]


def test_clock_modes():
    p = build_problem("least-squares", Regularizer("l1", 0.5), synth_dataset({"rows": 10, "cols": 12}))
    res = run_cocoa(p, partition_balanced(p.n, 2, 0), None, EngineConfig(max_rounds=4, trace_every=2))
    secs = clock_seconds(res.trace, {"mode": "model", "comm_charge": 0.5, "step_cost": 0.0})
    assert secs == [1.0, 2.0]
    assert clock_seconds(res.trace, {"mode": "wall"}) == [r.wall_seconds for r in res.trace]


def test_reference_optimum_is_tight():
    p = build_problem("least-squares", Regularizer("l1", 0.5), synth_dataset({"rows": 15, "cols": 20}))
    obj, gap = reference_optimum(p, 100, 500)
    assert gap <= 1e-12
