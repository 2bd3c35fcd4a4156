"""Experiment driver: data synthesis, configuration, sweeps and reports.

A configuration is one JSON document; see ``README.md`` for the schema.
"""

from __future__ import annotations

import copy
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .baselines import BaselineConfig, run_baseline
from .data import FEATURES_AS_COLUMNS, ColumnMatrix, Dataset, load_libsvm, partition_balanced
from .engine import EngineConfig, RunResult, run_cocoa, write_trace_csv
from .local_solvers import LocalSolverConfig
from .problems import PRIMAL, ProblemInstance, Regularizer, build_problem, input_objective

PROBLEMS = {
    # name: (loss, regularizer kind)
    "lasso": ("least-squares", "l1"),
    "elastic-net": ("least-squares", "elastic-net"),
    "ridge": ("least-squares", "l2"),
    "svm-hinge": ("hinge", "l2"),
    "absdev": ("absdev", "l2"),
    "logistic-l1": ("logistic", "l1"),
    "logistic-l2": ("logistic", "l2"),
}
SWEEP_KEYS = ("lambda", "eta", "H", "delta", "variant", "K")


class ConfigError(ValueError):
    pass


# --- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    rows: int                  # training points
    cols: int                  # features
    density: float = 1.0
    noise: float = 0.01
    seed: int = 0
    task: str = "regression"   # or "classification"
    sparsity: float = 0.1      # fraction of planted non-zeros
    scale: float = 1.0         # multiplies the design matrix

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("rows and cols must be at least 1")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError(f"density must lie in (0, 1], got {self.density}")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if not 0.0 < self.sparsity <= 1.0:
            raise ConfigError("sparsity must lie in (0, 1]")
        if not self.scale > 0:
            raise ConfigError("scale must be positive")


def synth_dataset(spec: SynthSpec | dict) -> Dataset:
    """Sparse Gaussian design, planted sparse model, noisy responses or their signs."""
    if isinstance(spec, dict):
        spec = SynthSpec(**spec)
    rng = np.random.default_rng(spec.seed)
    if spec.density >= 1.0:
        X = sp.csc_matrix(rng.standard_normal((spec.rows, spec.cols)))
    else:
        X = sp.random(spec.rows, spec.cols, density=spec.density, format="csc", random_state=rng,
                      data_rvs=rng.standard_normal)
    if spec.scale != 1.0:
        X = X * spec.scale
    k = max(1, int(round(spec.sparsity * spec.cols)))
    model = np.zeros(spec.cols)
    support = np.sort(rng.choice(spec.cols, size=k, replace=False))
    model[support] = rng.standard_normal(k)
    y = X @ model + spec.noise * rng.standard_normal(spec.rows)
    if spec.task == "classification":
        y = np.where(y >= 0, 1.0, -1.0)
    meta = {"planted_model": model, "planted_support": support, "synth": asdict(spec)}
    return Dataset(ColumnMatrix.from_scipy(X), y, FEATURES_AS_COLUMNS, meta)


# --- configuration --------------------------------------------------------------


@dataclass
class ExperimentConfig:
    problem: dict
    data: dict
    K: int = 4
    variant: str | None = None
    normalize: bool = True
    partition_seed: int = 0
    engine: dict = field(default_factory=dict)
    baselines: list = field(default_factory=list)
    run_cocoa: bool = True
    sweep: dict = field(default_factory=dict)
    reference: bool = False
    reference_rounds: int = 200
    reference_passes: int = 1000
    target_gap: float | None = None
    clock: dict = field(default_factory=lambda: {"mode": "model", "comm_charge": 0.0, "step_cost": 1e-7})
    compare_unsmoothed: bool = False
    workers: list = field(default_factory=list)
    output: str | None = None

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "problem" not in raw or "data" not in raw:
            raise ConfigError("config needs 'problem' and 'data'")
        return cls(**copy.deepcopy(raw))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def validate(self) -> None:
        p = self.problem
        if p.get("type") not in PROBLEMS:
            raise ConfigError(f"problem.type must be one of {sorted(PROBLEMS)}")
        if not p.get("lambda", 0) > 0:
            raise ConfigError("problem.lambda must be positive")
        if not 0.0 <= p.get("eta", 0.5) <= 1.0:
            raise ConfigError("problem.eta must lie in [0, 1]")
        if p.get("delta", 0.0) < 0:
            raise ConfigError("problem.delta must be non-negative")
        sources = [k for k in ("path", "synth") if self.data.get(k) is not None]
        if len(sources) != 1:
            raise ConfigError("data needs exactly one of 'path' or 'synth'")
        if self.data.get("synth") is not None:
            SynthSpec(**self.data["synth"])
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.variant not in (None, "primal", "dual"):
            raise ConfigError("variant must be null, 'primal' or 'dual'")
        bad = set(self.sweep) - set(SWEEP_KEYS)
        if bad:
            raise ConfigError(f"cannot sweep {sorted(bad)}; sweepable keys are {SWEEP_KEYS}")
        for key, vals in self.sweep.items():
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"sweep.{key} must be a non-empty list")
        if self.clock.get("mode", "model") not in ("model", "wall", "measured"):
            raise ConfigError("clock.mode must be 'model', 'wall' or 'measured'")
        for b in self.baselines:
            BaselineConfig(**b)
        self.engine_config(self.engine)

    @staticmethod
    def engine_config(raw: dict, H: int | None = None) -> EngineConfig:
        raw = dict(raw)
        local = dict(raw.pop("local", {}))
        if H is not None:
            local["passes_H"] = int(H)
        try:
            return EngineConfig(local=LocalSolverConfig(**local), **raw)
        except TypeError as err:
            raise ConfigError(f"bad engine config: {err}") from None


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.data.get("synth") is not None:
        return synth_dataset(config.data["synth"])
    return load_libsvm(config.data["path"], n_features=config.data.get("n_features"))


def regularizer_for(problem: dict) -> tuple[str, Regularizer]:
    loss, kind = PROBLEMS[problem["type"]]
    return loss, Regularizer(kind, float(problem["lambda"]), float(problem.get("eta", 1.0 if kind == "l1" else 0.5)),
                             float(problem.get("delta", 0.0)))


def data_spec_for(config: ExperimentConfig, problem: dict, variant) -> dict:
    """What a worker needs to rebuild the problem from its own copy of the data."""
    loss, reg = regularizer_for(problem)
    return {"loss": loss, "reg": {"kind": reg.kind, "lam": reg.lam, "eta": reg.eta, "smoothing": reg.smoothing},
            "variant": variant, "normalize": config.normalize, "n_features": config.data.get("n_features")}


# --- running ----------------------------------------------------------------------


@dataclass
class Setting:
    name: str
    values: dict
    problem: dict
    variant: str | None
    H: int | None
    K: int


def expand_settings(config: ExperimentConfig) -> list[Setting]:
    keys = [k for k in SWEEP_KEYS if k in config.sweep]
    out = []
    for combo in itertools.product(*(config.sweep[k] for k in keys)):
        vals = dict(zip(keys, combo))
        prob = dict(config.problem)
        for src, dst in (("lambda", "lambda"), ("eta", "eta"), ("delta", "delta")):
            if src in vals:
                prob[dst] = vals[src]
        name = "_".join(f"{k}={vals[k]}" for k in keys) or "base"
        out.append(Setting(name, vals, prob, vals.get("variant", config.variant), vals.get("H"),
                           int(vals.get("K", config.K))))
    if config.compare_unsmoothed and not any(s.problem.get("delta", 0) == 0 and s.variant == PRIMAL for s in out):
        prob = dict(config.problem, delta=0.0)
        out.insert(0, Setting("delta=0_primal", {"delta": 0.0, "variant": PRIMAL}, prob, PRIMAL, None, config.K))
    return out


def reference_optimum(problem: ProblemInstance, rounds: int = 200, passes: int = 1000) -> tuple[float, float]:
    """High-precision objective from a single-block run; returns ``(objective, gap)``."""
    part = partition_balanced(problem.n, 1, 0)
    cfg = EngineConfig(max_rounds=rounds, gap_tolerance=1e-12, local=LocalSolverConfig(passes, 12345))
    res = run_cocoa(problem, part, None, cfg)
    return res.trace[-1].objective_A, res.trace[-1].gap


def clock_seconds(trace, clock: dict) -> list[float]:
    """The ``seconds`` column under the configured clock.

    ``model``: ``round * (comm_charge + steps * step_cost)``, deterministic.
    ``measured``: cumulative ``comm_charge + compute_seconds``.
    ``wall``: coordinator wall time since the run started.
    """
    mode = clock.get("mode", "model")
    comm = float(clock.get("comm_charge", 0.0))
    if mode == "wall":
        return [r.wall_seconds for r in trace]
    if mode == "model":
        cost = float(clock.get("step_cost", 1e-7))
        out, acc, prev = [], 0.0, 0
        for r in trace:
            acc += (r.round - prev) * (comm + r.steps * cost)
            prev = r.round
            out.append(acc)
        return out
    out, acc, prev = [], 0.0, 0
    for r in trace:
        acc += comm * (r.round - prev) + r.compute_seconds
        prev = r.round
        out.append(acc)
    return out


def first_reaching(trace, seconds, target):
    for r, s in zip(trace, seconds):
        if r.gap <= target:
            return {"round": r.round, "seconds": s, "bytes": sum_bytes(trace, r.round)}
    return None


def sum_bytes(trace, upto=None) -> int:
    if not trace:
        return 0
    per_round = trace[0].bytes_communicated
    last = trace[-1].round if upto is None else upto
    return int(per_round * last)


@dataclass
class TraceRecord:
    setting: str
    solver: str
    trace: list
    seconds: list
    summary: dict


def _run_one(config, setting, dataset, solver, baseline=None):
    loss, reg = regularizer_for(setting.problem)
    problem = build_problem(loss, reg, dataset, setting.variant, None, config.normalize)
    part = partition_balanced(problem.n, setting.K, config.partition_seed)
    t0 = time.perf_counter()
    if baseline is None:
        ecfg = config.engine_config(config.engine, setting.H)
        executor = None
        if config.workers:
            from .runtime.tcp import tcp_executor

            executor = tcp_executor(config.workers, problem, part, ecfg.local, ecfg.sigma_for(setting.K),
                                    ecfg.gamma, ecfg.avg_start())
        res: RunResult = run_cocoa(problem, part, executor, ecfg)
    else:
        bcfg = BaselineConfig(**baseline)
        res = run_baseline(problem, part, bcfg)
    wall = time.perf_counter() - t0
    model = problem.model(res.alpha, res.v)
    u_scaled = model if problem.scale is None else model * problem.scale
    true_reg = replace(reg, smoothing=0.0)
    true_obj = input_objective(replace(problem, meta=dict(problem.meta, reg=true_reg)), u_scaled)
    summary = {
        "solver": solver, "setting": setting.name, "values": setting.values,
        "variant": problem.variant, "case": problem.case, "K": setting.K,
        "final_objective": res.trace[-1].objective_A, "final_gap": res.trace[-1].gap,
        "rounds": res.rounds, "wall_seconds": wall,
        "sparsity": float(np.mean(model == 0.0)) if model.size else 0.0,
        "true_objective": true_obj, "bytes_total": sum_bytes(res.trace),
        "bytes_per_round": res.trace[0].bytes_communicated,
    }
    if res.avg_gap is not None:
        summary["averaged_gap"] = res.avg_gap
    return problem, res, model, summary


def run_experiment(config: ExperimentConfig | dict, output_dir=None) -> dict:
    """Run every setting and solver; write traces and the manifest when ``output_dir`` is set."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    output_dir = output_dir if output_dir is not None else config.output
    dataset = load_dataset(config)
    records = []
    models = {}
    references = {}
    written = []
    try:
        for setting in expand_settings(config):
            solvers = ([("cocoa", None)] if config.run_cocoa else []) + [(b["method"], b) for b in config.baselines]
            for solver, b in solvers:
                problem, res, model, summary = _run_one(config, setting, dataset, solver, b)
                ref = None
                if config.reference:
                    key = (json.dumps(setting.problem, sort_keys=True), problem.variant)
                    if key not in references:
                        references[key] = reference_optimum(problem, config.reference_rounds,
                                                            config.reference_passes)
                    ref, ref_gap = references[key]
                    summary["reference_objective"] = ref
                    summary["reference_gap"] = ref_gap
                    summary["min_subopt"] = min(r.objective_A - ref for r in res.trace)
                seconds = clock_seconds(res.trace, config.clock)
                summary["seconds"] = seconds[-1]
                if config.target_gap is not None:
                    summary["to_target"] = first_reaching(res.trace, seconds, config.target_gap)
                rec = TraceRecord(setting.name, solver, res.trace, seconds, summary)
                records.append(rec)
                models[(setting.name, solver)] = model
                if output_dir is not None:
                    written.append(_write_trace(rec, output_dir, ref))
    finally:
        if output_dir is not None and written:
            _write_manifest(records, output_dir, config, written)
    summary = _summarize(records, models, config)
    if output_dir is not None:
        _write_manifest(records, output_dir, config, written, summary)
    return summary


def _summarize(records, models, config) -> dict:
    out = {"runs": [r.summary for r in records]}
    base = next((r for r in records if r.setting == "delta=0_primal" and r.solver == "cocoa"), None)
    if base is not None:
        zb = models[(base.setting, base.solver)] == 0.0
        for r in records:
            m = models[(r.setting, r.solver)]
            if m.shape == zb.shape:
                r.summary["sparsity_deviation"] = abs(r.summary["sparsity"] - base.summary["sparsity"])
                r.summary["support_mismatch"] = float(np.mean((m == 0.0) != zb))
    swept = [k for k in SWEEP_KEYS if k in config.sweep]
    if len(swept) == 1 and config.target_gap is not None:
        key = swept[0]
        axis = {}
        for r in records:
            if r.solver != "cocoa" or key not in r.summary["values"]:
                continue
            hit = r.summary.get("to_target")
            axis[str(r.summary["values"][key])] = {
                "value": r.summary["values"][key],
                "rounds_to_target": None if hit is None else hit["round"],
                "seconds_to_target": None if hit is None else hit["seconds"],
                "bytes_to_target": None if hit is None else hit["bytes"],
            }
        reached = [a for a in axis.values() if a["seconds_to_target"] is not None]
        best = min(reached, key=lambda a: a["seconds_to_target"])["value"] if reached else None
        out["sweep"] = {"key": key, "target_gap": config.target_gap, "settings": axis, "best_by_seconds": best}
    return out


def _fname(setting: str, solver: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_.=" else "_" for c in setting)
    return f"{safe}__{solver}.csv"


def _write_trace(rec: TraceRecord, output_dir, ref=None) -> str:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = _fname(rec.setting, rec.solver)
    write_trace_csv(rec.trace, out / name, rec.seconds, ref)
    return name


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def _write_manifest(records, output_dir, config, written, summary=None) -> None:
    manifest = {"config": config.to_dict(), "settings": {}}
    for rec in records:
        name = _fname(rec.setting, rec.solver)
        if name in written:
            manifest["settings"].setdefault(rec.setting, {})[rec.solver] = {"csv": name, **rec.summary}
    if summary is not None and "sweep" in summary:
        manifest["sweep"] = summary["sweep"]
    with open(Path(output_dir) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)


def emit_report(traces, output_dir, reference: float | None = None, clock: dict | None = None) -> dict:
    """Write one CSV per ``(setting, solver, trace)`` entry plus ``manifest.json``.

    ``traces`` holds ``TraceRecord`` objects or ``(setting, solver, trace)``
    tuples. Returns the manifest.
    """
    if not traces:
        raise ValueError("no traces to report")
    clock = clock or {"mode": "wall"}
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"settings": {}}
    if reference is not None:
        manifest["reference_objective"] = reference
    for item in traces:
        if isinstance(item, TraceRecord):
            setting, solver, trace, seconds = item.setting, item.solver, item.trace, item.seconds
        else:
            setting, solver, trace = item
            seconds = clock_seconds(trace, clock)
        if not trace:
            raise ValueError(f"trace for {setting}/{solver} is empty")
        name = _fname(setting, solver)
        write_trace_csv(trace, out / name, seconds, reference)
        manifest["settings"].setdefault(setting, {})[solver] = {"csv": name, "rows": len(trace)}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
    return manifest
