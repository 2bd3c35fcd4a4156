"""Worker-side state shared by every executor.

A :class:`BlockWorker` owns one block of columns and the matching slice of
alpha. Thread and TCP executors both drive the same object, which is what
makes their trajectories bit-identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..data import ColumnMatrix, Partition
from ..local_solvers import LocalSolverConfig, run_local_solver
from ..problems import ProblemInstance, SeparableTerm, SmoothTerm, map_w
from ..subproblem import SubproblemView, value_from_image


class ExecutorError(RuntimeError):
    """A worker failed; ``worker_ids`` names the ones that did not report."""

    def __init__(self, message: str, worker_ids=()):
        super().__init__(message)
        self.worker_ids = tuple(worker_ids)


@dataclass
class WorkerReply:
    worker_id: int
    round_id: int
    delta_v: np.ndarray
    steps: int
    g_sum: float       # sum_i g_i(alpha_i) over the block after the update
    sub_value: float   # G_k at the returned local update
    solve_seconds: float = 0.0


@dataclass
class Shard:
    """What ASSIGN delivers: a block of columns plus the per-block terms."""

    worker_id: int
    columns: ColumnMatrix
    global_index: np.ndarray
    smooth: SmoothTerm
    separable: SeparableTerm
    n_blocks: int
    sigma_prime: float
    gamma: float
    local: LocalSolverConfig
    avg_start: int | None = None


def make_shards(problem: ProblemInstance, partition: Partition, sigma_prime: float, gamma: float,
                local: LocalSolverConfig, avg_start: int | None = None) -> list[Shard]:
    if partition.n_cols != problem.n:
        raise ValueError(f"partition covers {partition.n_cols} columns, problem has {problem.n}")
    out = []
    for k in range(partition.k_blocks):
        idx = partition.block(k)
        out.append(Shard(k, problem.matrix.select_columns(idx), idx, problem.smooth,
                         problem.separable.take(idx), partition.k_blocks, float(sigma_prime),
                         float(gamma), local, avg_start))
    return out


class BlockWorker:
    def __init__(self, shard: Shard):
        self.shard = shard
        self.worker_id = shard.worker_id
        self.alpha = np.zeros(shard.columns.n_cols)
        self.colsq = shard.columns.column_norms_sq()
        self.next_round = 1
        self.alpha_sum = None
        self.avg_count = 0

    @property
    def d(self) -> int:
        return self.shard.columns.n_rows

    def step(self, round_id: int, v) -> WorkerReply:
        if round_id != self.next_round:
            raise ExecutorError(f"worker {self.worker_id} expected round {self.next_round}, got {round_id}",
                                [self.worker_id])
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.d,):
            raise ExecutorError(f"worker {self.worker_id}: v has shape {v.shape}, expected ({self.d},)",
                                [self.worker_id])
        sh = self.shard
        t0 = time.perf_counter()
        view = SubproblemView(
            v=v, w=map_w(sh.smooth, v), f_v=sh.smooth.value(v), local_columns=sh.columns,
            alpha_block=self.alpha, separable=sh.separable, sigma_prime=sh.sigma_prime,
            tau=sh.smooth.tau, gamma=sh.gamma, n_blocks=sh.n_blocks, colsq=self.colsq,
        )
        res = run_local_solver(view, sh.local, key=(self.worker_id, round_id))
        sub_value = value_from_image(view, res.delta_block, res.delta_v)
        self.alpha = self.alpha + sh.gamma * res.delta_block
        g_sum = sh.separable.total(self.alpha)
        if sh.avg_start is not None and round_id >= sh.avg_start:
            self.alpha_sum = self.alpha.copy() if self.alpha_sum is None else self.alpha_sum + self.alpha
            self.avg_count += 1
        self.next_round += 1
        return WorkerReply(self.worker_id, round_id, res.delta_v, res.steps_taken, g_sum, sub_value,
                           time.perf_counter() - t0)

    def averaged_alpha(self) -> np.ndarray | None:
        if self.avg_count == 0:
            return None
        return self.alpha_sum / self.avg_count
