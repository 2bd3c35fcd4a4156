"""In-process executor backed by a thread pool."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..data import Partition
from ..local_solvers import LocalSolverConfig
from ..problems import ProblemInstance
from . import protocol
from .worker import BlockWorker, ExecutorError, WorkerReply, make_shards


class Executor:
    """The executor contract: ``broadcast`` then exactly one ``collect`` per round."""

    K: int
    d: int
    global_indices: list

    def broadcast(self, round_id: int, v) -> None:
        raise NotImplementedError

    def collect(self) -> list[WorkerReply]:
        raise NotImplementedError

    def finish(self) -> tuple[list, list | None]:
        """Stop the workers; returns per-block ``alpha`` and averaged ``alpha`` (or None)."""
        raise NotImplementedError

    def shutdown(self) -> None:
        pass

    @property
    def last_bytes(self) -> tuple[int, int]:
        """Bytes sent down and up in the last completed round."""
        return self._bytes

    def assemble(self, blocks, n: int) -> np.ndarray:
        out = np.zeros(n)
        for idx, a in zip(self.global_indices, blocks):
            out[idx] = a
        return out


class ThreadExecutor(Executor):
    def __init__(self, workers: list[BlockWorker], max_threads: int | None = None):
        if not workers:
            raise ValueError("need at least one worker")
        self.workers = workers
        self.K = len(workers)
        self.d = workers[0].d
        self.gamma = workers[0].shard.gamma
        self.sigma_prime = workers[0].shard.sigma_prime
        self.global_indices = [w.shard.global_index for w in workers]
        self._pool = ThreadPoolExecutor(max_workers=max_threads or self.K, thread_name_prefix="cocoa-worker")
        self._pending = None
        self._bytes = (0, 0)

    def broadcast(self, round_id: int, v) -> None:
        if self._pending is not None:
            raise RuntimeError("collect() must follow every broadcast()")
        snap = np.array(v, dtype=np.float64)
        snap.setflags(write=False)
        self._pending = [self._pool.submit(w.step, round_id, snap) for w in self.workers]

    def collect(self) -> list[WorkerReply]:
        if self._pending is None:
            raise RuntimeError("collect() without broadcast()")
        futures, self._pending = self._pending, None
        replies, failed, first = [], [], None
        for k, fut in enumerate(futures):
            try:
                replies.append(fut.result())
            except Exception as err:  # noqa: BLE001  any worker failure aborts the round
                failed.append(k)
                first = first or err
        if failed:
            raise ExecutorError(f"workers {failed} failed: {first!r}", failed) from first
        self._bytes = (self.K * protocol.broadcast_frame_size(self.d),
                       self.K * protocol.result_frame_size(self.d))
        return replies

    def current_alpha(self, n: int) -> np.ndarray:
        return self.assemble([w.alpha for w in self.workers], n)

    def finish(self):
        blocks = [w.alpha.copy() for w in self.workers]
        avg = [w.averaged_alpha() for w in self.workers]
        self.shutdown()
        return blocks, (None if any(a is None for a in avg) else avg)

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)


def thread_executor(problem: ProblemInstance, partition: Partition, solver_config: LocalSolverConfig,
                    sigma_prime: float | None = None, gamma: float = 1.0, avg_start: int | None = None,
                    max_threads: int | None = None) -> ThreadExecutor:
    if sigma_prime is None:
        sigma_prime = gamma * partition.k_blocks
    shards = make_shards(problem, partition, sigma_prime, gamma, solver_config, avg_start)
    return ThreadExecutor([BlockWorker(s) for s in shards], max_threads)
