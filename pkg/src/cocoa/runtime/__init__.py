"""Executors: an in-process thread pool and a TCP coordinator/worker runtime."""

from .protocol import FrameError
from .tcp import HandshakeError, TCPExecutor, serve_worker, tcp_executor
from .threads import Executor, ThreadExecutor, thread_executor
from .worker import BlockWorker, ExecutorError, Shard, WorkerReply, make_shards

__all__ = [
    "BlockWorker", "Executor", "ExecutorError", "FrameError", "HandshakeError", "Shard",
    "TCPExecutor", "ThreadExecutor", "WorkerReply", "make_shards", "serve_worker",
    "tcp_executor", "thread_executor",
]
