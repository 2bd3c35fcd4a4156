"""The bulk-synchronous outer loop.

Each round the coordinator broadcasts ``v``; every worker derives
``w = grad f(v)``, approximately minimizes its local subproblem, applies
``alpha_[k] += gamma * dalpha_[k]`` to the block it owns and returns
``dv_k = A_[k] dalpha_[k]``. The coordinator then reduces
``v += gamma * sum_k dv_k`` in ascending worker order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, Partition, partition_balanced
from .local_solvers import LocalSolverConfig
from .problems import (InvariantViolation, ProblemInstance, Regularizer,
                       build_problem, duality_gap, gap_from_objectives, map_w, objective_A, objective_B)
from .runtime.threads import Executor, thread_executor
from .runtime.worker import ExecutorError
from .subproblem import BLOCK_BOUND_SLACK

log = logging.getLogger(__name__)

CONSISTENCY_TOL = 1e-8


class NumericalFailure(ArithmeticError):
    def __init__(self, message: str, round_id: int):
        super().__init__(message)
        self.round = round_id


class RunAborted(RuntimeError):
    """The executor failed; ``trace`` holds every row recorded before the failure."""

    def __init__(self, message: str, trace: list, round_id: int):
        super().__init__(message)
        self.trace = trace
        self.round = round_id


@dataclass(frozen=True)
class EngineConfig:
    """Outer-loop settings.

    ``sigma_prime=None`` means the safe ``gamma * K``. ``gap_tolerance=None``
    (or ``inf``) disables gap-based stopping so exactly ``max_rounds`` rounds
    run. ``averaging_window=W`` averages the last ``W`` iterates.
    """

    gamma: float = 1.0
    sigma_prime: float | None = None
    max_rounds: int = 100
    gap_tolerance: float | None = None
    local: LocalSolverConfig = field(default_factory=LocalSolverConfig)
    trace_every: int = 1
    averaging_window: int | None = None
    audit: bool = False
    keep_iterates: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.sigma_prime is not None and self.sigma_prime < self.gamma:
            raise ValueError(f"sigma'={self.sigma_prime} is below gamma={self.gamma}")
        if self.max_rounds < 1 or self.trace_every < 1:
            raise ValueError("max_rounds and trace_every must be at least 1")
        if self.averaging_window is not None and self.averaging_window < 1:
            raise ValueError("averaging_window must be at least 1")

    def sigma_for(self, k: int) -> float:
        return self.gamma * k if self.sigma_prime is None else float(self.sigma_prime)

    def avg_start(self) -> int | None:
        if self.averaging_window is None:
            return None
        return max(1, self.max_rounds - self.averaging_window + 1)

    @property
    def stops_on_gap(self) -> bool:
        return self.gap_tolerance is not None and not math.isinf(self.gap_tolerance)


@dataclass
class SolverState:
    v: np.ndarray
    round: int = 0
    objective_A: float = math.nan
    alpha: np.ndarray | None = None  # only when the executor exposes it
    resynced: bool = False


@dataclass
class RoundTrace:
    round: int
    wall_seconds: float
    objective_A: float
    objective_B: float
    gap: float
    bytes_communicated: int
    bytes_down: int = 0
    bytes_up: int = 0
    compute_seconds: float = 0.0
    steps: int = 0               # max local coordinate steps over workers
    block_bound_slack: float = math.nan
    theta_diag: float | None = None


TRACE_COLUMNS = ["round", "seconds", "objA", "objB", "gap", "bytes"]


def trace_rows(trace, seconds=None, reference: float | None = None) -> list[list]:
    """CSV rows in the shared trace schema; ``seconds`` overrides the clock column."""
    rows = []
    for i, r in enumerate(trace):
        s = r.wall_seconds if seconds is None else seconds[i]
        row = [r.round, repr(float(s)), repr(float(r.objective_A)), repr(float(r.objective_B)),
               repr(float(r.gap)), r.bytes_communicated]
        if reference is not None:
            row.append(repr(float(r.objective_A - reference)))
        rows.append(row)
    return rows


def write_trace_csv(trace, path_or_buf, seconds=None, reference: float | None = None) -> None:
    header = TRACE_COLUMNS + (["subopt"] if reference is not None else [])
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(trace_rows(trace, seconds, reference))
    finally:
        if own:
            fh.close()


def trace_csv(trace, seconds=None, reference=None) -> str:
    buf = io.StringIO()
    write_trace_csv(trace, buf, seconds, reference)
    return buf.getvalue()


def trace_jsonl(trace) -> str:
    return "".join(json.dumps(asdict(r)) + "\n" for r in trace)


@dataclass
class RunResult:
    alpha: np.ndarray
    v: np.ndarray
    trace: list
    rounds: int
    stopped_on_gap: bool
    alpha_avg: np.ndarray | None = None
    avg_gap: float | None = None
    iterates: list = field(default_factory=list)
    resyncs: int = 0
    sigma_prime: float = math.nan
    gamma: float = 1.0

    @property
    def final_gap(self) -> float:
        return self.trace[-1].gap if self.trace else math.nan


def _check_finite(v, round_id):
    if not np.all(np.isfinite(v)):
        raise NumericalFailure(f"shared vector became non-finite in round {round_id}", round_id)


def run_round(problem: ProblemInstance, state: SolverState, executor: Executor, config: EngineConfig,
              evaluate_gap: bool = True, start_time: float | None = None) -> tuple[SolverState, RoundTrace]:
    """One bulk-synchronous round; returns the new state and its trace row."""
    t = state.round + 1
    t0 = time.perf_counter()
    executor.broadcast(t, state.v)
    replies = executor.collect()
    elapsed = time.perf_counter() - t0
    gamma = config.gamma
    total = np.zeros_like(state.v)
    for rep in sorted(replies, key=lambda r: r.worker_id):
        total += rep.delta_v
    v = state.v + gamma * total
    _check_finite(v, t)
    obj_a = problem.smooth.value(v) + math.fsum(r.g_sum for r in sorted(replies, key=lambda r: r.worker_id))
    if not math.isfinite(obj_a) and math.isfinite(state.objective_A):
        raise NumericalFailure(f"objective became non-finite in round {t}", t)
    rhs = (1.0 - gamma) * state.objective_A + gamma * math.fsum(r.sub_value for r in replies)
    slack = rhs - obj_a
    alpha = None
    if hasattr(executor, "current_alpha"):
        alpha = executor.current_alpha(problem.n)
    resynced = False
    if config.audit:
        if slack < -BLOCK_BOUND_SLACK * max(1.0, abs(rhs)):
            raise InvariantViolation(f"block upper bound violated in round {t}: slack {slack:.3e}")
        if alpha is not None:
            exact = problem.shared_vector(alpha)
            drift = float(np.max(np.abs(exact - v), initial=0.0))
            if drift > CONSISTENCY_TOL * max(1.0, float(np.max(np.abs(exact), initial=0.0))):
                log.warning("round %d: shared vector drifted by %.3e, re-syncing", t, drift)
                v = exact
                resynced = True
    if evaluate_gap:
        rep = gap_from_objectives(obj_a, objective_B(problem, map_w(problem.smooth, v)))
        obj_b, gap = rep.objective_B, rep.gap
    else:
        obj_b = gap = math.nan
    down, up = executor.last_bytes
    compute = max((r.solve_seconds for r in replies), default=0.0) or elapsed
    row = RoundTrace(
        round=t,
        wall_seconds=time.perf_counter() - (t0 if start_time is None else start_time),
        objective_A=obj_a, objective_B=obj_b, gap=gap, bytes_communicated=down + up,
        bytes_down=down, bytes_up=up, compute_seconds=compute,
        steps=max((r.steps for r in replies), default=0), block_bound_slack=slack,
    )
    return SolverState(v=v, round=t, objective_A=obj_a, alpha=alpha, resynced=resynced), row


def run_cocoa(problem: ProblemInstance, partition: Partition, executor: Executor | None = None,
              config: EngineConfig | None = None) -> RunResult:
    """Run the outer loop from ``alpha = 0``; see :class:`EngineConfig` for stopping."""
    config = config or EngineConfig()
    K = partition.k_blocks
    if partition.n_cols != problem.n:
        raise ValueError(f"partition covers {partition.n_cols} columns, problem has {problem.n}")
    sigma = config.sigma_for(K)
    if sigma < config.gamma:
        raise ValueError(f"sigma'={sigma} is below gamma={config.gamma}")
    if executor is None:
        executor = thread_executor(problem, partition, config.local, sigma, config.gamma, config.avg_start())
    else:
        if executor.K != K:
            raise ValueError(f"executor has {executor.K} workers, partition has {K} blocks")
        if executor.d != problem.d:
            raise ValueError(f"executor works on d={executor.d}, problem has d={problem.d}")
        for name, want in (("gamma", config.gamma), ("sigma_prime", sigma)):
            have = getattr(executor, name, want)
            if have != want:
                raise ValueError(f"executor {name}={have} differs from config {want}")
    state = SolverState(v=np.zeros(problem.d), objective_A=objective_A(problem, np.zeros(problem.n)))
    trace, iterates = [], []
    resyncs = 0
    stopped = False
    start = time.perf_counter()
    try:
        for t in range(1, config.max_rounds + 1):
            evaluate = (t % config.trace_every == 0) or t == config.max_rounds
            state, row = run_round(problem, state, executor, config, evaluate, start)
            resyncs += int(state.resynced)
            if evaluate:
                trace.append(row)
                if config.keep_iterates and state.alpha is not None:
                    iterates.append(state.alpha.copy())
                if config.stops_on_gap and row.gap <= config.gap_tolerance:
                    stopped = True
                    break
    except ExecutorError as err:
        executor.shutdown()
        raise RunAborted(f"run aborted in round {state.round + 1}: {err}", trace, state.round + 1) from err
    except BaseException:
        executor.shutdown()
        raise
    blocks, avg = executor.finish()
    alpha = executor.assemble(blocks, problem.n)
    result = RunResult(alpha=alpha, v=state.v, trace=trace, rounds=state.round, stopped_on_gap=stopped,
                       iterates=iterates, resyncs=resyncs, sigma_prime=sigma, gamma=config.gamma)
    if avg is not None:
        result.alpha_avg = executor.assemble(avg, problem.n)
        result.avg_gap = duality_gap(problem, result.alpha_avg)
    return result


@dataclass
class Solution:
    model: np.ndarray       # solution of the input problem (input coordinates)
    alpha: np.ndarray
    problem: ProblemInstance
    partition: Partition
    result: RunResult

    @property
    def variant(self) -> str:
        return self.problem.variant

    @property
    def case(self) -> str:
        return self.problem.case


def solve(loss: str, reg: Regularizer, dataset: Dataset, K: int, config: EngineConfig | None = None,
          variant: str | None = None, normalize: bool = False, bound: float | None = None,
          seed: int = 0, executor_factory=None) -> Solution:
    """Map ``loss + reg`` to objective (A), run the outer loop and map the answer back.

    The primal variant returns ``alpha`` as the model; the dual variant
    returns ``w(alpha) = grad f(A alpha)``. ``executor_factory(problem,
    partition, config)`` may supply a non-default executor.
    """
    config = config or EngineConfig()
    problem = build_problem(loss, reg, dataset, variant, bound, normalize)
    partition = partition_balanced(problem.n, K, seed)
    executor = None if executor_factory is None else executor_factory(problem, partition, config)
    result = run_cocoa(problem, partition, executor, config)
    return Solution(problem.model(result.alpha, result.v), result.alpha, problem, partition, result)


__all__ = [
    "EngineConfig", "NumericalFailure", "RoundTrace", "RunAborted", "RunResult", "Solution",
    "SolverState", "TRACE_COLUMNS", "run_cocoa", "run_round", "solve", "trace_csv", "trace_jsonl",
    "write_trace_csv",
]
