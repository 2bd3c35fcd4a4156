"""Command-line entry point: ``cocoa {solve,sweep,diag-sigma,diag-theta,serve-worker}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import harness
from .harness import ConfigError, ExperimentConfig


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment JSON; flags below override its fields")
    p.add_argument("--problem", choices=sorted(harness.PROBLEMS))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--delta", type=float, help="smoothing strength")
    p.add_argument("--data", help="LIBSVM file (one training point per line)")
    p.add_argument("--synth", metavar="ROWSxCOLS", help="synthetic data, e.g. 100x400")
    p.add_argument("--density", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--task", choices=["regression", "classification"])
    p.add_argument("--seed", type=int, help="synthetic data seed")
    p.add_argument("-K", "--K", dest="K", type=int)
    p.add_argument("-H", "--H", dest="H", type=int, help="local epochs per round")
    p.add_argument("--rounds", type=int)
    p.add_argument("--gap-tol", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--sigma-prime", type=float)
    p.add_argument("--variant", choices=["primal", "dual"])
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--output", "-o", help="directory for trace CSVs and manifest.json")
    p.add_argument("--set", action="append", default=[], metavar="PATH=JSON",
                   help="override any config field, e.g. --set engine.trace_every=5")


def _parse_synth(text: str) -> dict:
    try:
        rows, cols = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--synth expects ROWSxCOLS, got {text!r}") from None
    return {"rows": rows, "cols": cols}


def _apply_set(raw: dict, item: str) -> None:
    path, sep, value = item.partition("=")
    if not sep:
        raise ConfigError(f"--set expects PATH=JSON, got {item!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    keys = path.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = parsed


def build_config(args) -> ExperimentConfig:
    raw: dict = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    raw.setdefault("problem", {})
    raw.setdefault("data", {})
    raw.setdefault("engine", {})
    prob, data, eng = raw["problem"], raw["data"], raw["engine"]
    if args.problem:
        prob["type"] = args.problem
    if args.lam is not None:
        prob["lambda"] = args.lam
    if args.eta is not None:
        prob["eta"] = args.eta
    if args.delta is not None:
        prob["delta"] = args.delta
    if args.data:
        data.pop("synth", None)
        data["path"] = args.data
    if args.synth:
        data.pop("path", None)
        data["synth"] = dict(data.get("synth") or {}, **_parse_synth(args.synth))
    for flag, key in (("density", "density"), ("noise", "noise"), ("seed", "seed"), ("task", "task")):
        val = getattr(args, flag)
        if val is not None:
            if data.get("synth") is None:
                raise ConfigError(f"--{flag} only applies to synthetic data")
            data["synth"][key] = val
    if args.K is not None:
        raw["K"] = args.K
    if args.H is not None:
        eng.setdefault("local", {})["passes_H"] = args.H
    if args.rounds is not None:
        eng["max_rounds"] = args.rounds
    if args.gap_tol is not None:
        eng["gap_tolerance"] = args.gap_tol
    if args.gamma is not None:
        eng["gamma"] = args.gamma
    if args.sigma_prime is not None:
        eng["sigma_prime"] = args.sigma_prime
    if args.variant:
        raw["variant"] = args.variant
    if args.no_normalize:
        raw["normalize"] = False
    if args.output:
        raw["output"] = args.output
    if getattr(args, "workers", None):
        raw["workers"] = [w for w in args.workers.split(",") if w]
    for item in args.set:
        _apply_set(raw, item)
    return ExperimentConfig.from_dict(raw)


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, default=harness._json_default)
    sys.stdout.write("\n")


def cmd_solve(args) -> int:
    config = build_config(args)
    config.sweep = {}
    summary = harness.run_experiment(config)
    _print_json(summary)
    return 0


def cmd_sweep(args) -> int:
    config = build_config(args)
    if not config.sweep:
        raise ConfigError("sweep needs a 'sweep' section in the config (or --set sweep.H=[1,10])")
    _print_json(harness.run_experiment(config))
    return 0


def _problem_and_partition(config):
    from .data import partition_balanced
    from .problems import build_problem

    loss, reg = harness.regularizer_for(config.problem)
    problem = build_problem(loss, reg, harness.load_dataset(config), config.variant, None, config.normalize)
    return problem, partition_balanced(problem.n, config.K, config.partition_seed)


def cmd_diag_sigma(args) -> int:
    from .subproblem import estimate_sigma_min

    config = build_config(args)
    problem, part = _problem_and_partition(config)
    gamma = config.engine.get("gamma", 1.0)
    rec = estimate_sigma_min(problem.matrix, part, gamma, args.iterations)
    rec["variant"] = problem.variant
    _print_json(rec)
    return 0


def cmd_diag_theta(args) -> int:
    from .local_solvers import LocalSolverConfig, measure_theta, run_local_solver
    from .subproblem import make_view

    config = build_config(args)
    problem, part = _problem_and_partition(config)
    rng = np.random.default_rng(args.view_seed)
    Hs = [int(h) for h in args.H_list.split(",")]
    sigma = config.engine_config(config.engine).sigma_for(part.k_blocks)
    rows = []
    for j in range(args.views):
        # random feasible point: a short run from zero keeps every g_i finite
        cfg = LocalSolverConfig(1, int(rng.integers(1 << 31)))
        k = int(rng.integers(part.k_blocks))
        alpha = np.zeros(problem.n)
        view0 = make_view(problem, part, k, alpha, sigma)
        alpha[part.block(k)] = run_local_solver(view0, cfg).delta_block * rng.uniform(0, 1)
        view = make_view(problem, part, k, alpha, sigma)
        thetas = {}
        for H in Hs:
            # one value per solver seed: Theta is a statement in expectation
            vals = []
            for s in range(args.seeds):
                scfg = LocalSolverConfig(H, cfg.rng_seed + s)
                vals.append(measure_theta(view, run_local_solver(view, scfg), args.oracle_passes, scfg))
            thetas[str(H)] = {"min": min(vals), "mean": float(np.mean(vals)), "values": vals}
        rows.append({"view": j, "block": k, "theta": thetas})
    _print_json({"sigma_prime": sigma, "views": rows})
    return 0


def cmd_serve_worker(args) -> int:
    from .runtime.tcp import serve_worker

    def ready(addr):
        print(f"listening on {addr[0]}:{addr[1]}", flush=True)

    status = serve_worker(args.listen, args.data, ready)
    return 0 if status == "done" else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cocoa", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run one configuration")
    _add_config_args(p)
    p.add_argument("--workers", help="comma-separated host:port list of running workers")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="run every setting of the config's sweep section")
    _add_config_args(p)
    p.add_argument("--workers", help="comma-separated host:port list of running workers")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diag-sigma", help="estimate sigma'_min for the configured partition")
    _add_config_args(p)
    p.add_argument("--iterations", type=int, default=100)
    p.set_defaults(func=cmd_diag_sigma)

    p = sub.add_parser("diag-theta", help="measure local accuracy Theta on random views")
    _add_config_args(p)
    p.add_argument("--H-list", default="1,2,4,8,16")
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--view-seed", type=int, default=0)
    p.add_argument("--oracle-passes", type=int, default=500)
    p.add_argument("--seeds", type=int, default=3, help="solver seeds per (view, H)")
    p.set_defaults(func=cmd_diag_theta)

    p = sub.add_parser("serve-worker", help="serve one coordinator session over TCP")
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port (port 0 picks a free one)")
    p.add_argument("--data", help="local LIBSVM copy for worker-side loading")
    p.set_defaults(func=cmd_serve_worker)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
