"""Coordinator/worker runtime over TCP, one connection per worker."""

from __future__ import annotations

import logging
import math
import os
import socket

import numpy as np

from ..data import ColumnMatrix, Partition, load_libsvm
from ..local_solvers import LocalSolverConfig
from ..problems import ProblemInstance, Regularizer, SeparableTerm, SmoothTerm, build_problem
from . import protocol as P
from .threads import Executor
from .worker import BlockWorker, ExecutorError, Shard, make_shards

log = logging.getLogger(__name__)

TIMEOUT_ENV = "COCOA_HANDSHAKE_TIMEOUT"
DEFAULT_TIMEOUT = 10.0


class HandshakeError(ExecutorError):
    pass


def handshake_timeout() -> float:
    raw = os.environ.get(TIMEOUT_ENV)
    return float(raw) if raw else DEFAULT_TIMEOUT


def parse_address(addr) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr[0], int(addr[1])
    host, _, port = str(addr).rpartition(":")
    if not host or not port:
        raise ValueError(f"address {addr!r} is not host:port")
    return host, int(port)


# --- shard (de)serialization -------------------------------------------------


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isinf(x)) else float(x)


def encode_shard(shard: Shard, data_spec: dict | None = None) -> bytes:
    sm, sep, loc = shard.smooth, shard.separable, shard.local
    header = {
        "worker_id": shard.worker_id, "n_blocks": shard.n_blocks,
        "sigma_prime": shard.sigma_prime, "gamma": shard.gamma, "avg_start": shard.avg_start,
        "n_rows": shard.columns.n_rows, "n_cols": shard.columns.n_cols,
        "local": {"passes_H": loc.passes_H, "rng_seed": loc.rng_seed, "shuffle": loc.shuffle},
        "smooth": {"kind": sm.kind, "l1": sm.l1, "l2": sm.l2},
        "separable": {"kind": sep.kind, "l1": sep.l1, "l2": sep.l2, "bound": _num(sep.bound),
                      "lam": _num(sep.lam), "eta": _num(sep.eta)},
        "data_spec": data_spec,
    }
    arrays = [("global_index", shard.global_index, "<i8")]
    if data_spec is None:
        c = shard.columns
        arrays += [("indptr", c.indptr, "<i8"), ("indices", c.indices, "<i8"), ("data", c.data, "<f8")]
        if sm.labels is not None:
            arrays.append(("smooth_labels", sm.labels, "<f8"))
    if sep.labels is not None:
        arrays.append(("separable_labels", sep.labels, "<f8"))
    return P.encode_assign(header, arrays)


def problem_from_spec(spec: dict, data_path: str) -> ProblemInstance:
    """Rebuild the coordinator's problem from a local copy of the data."""
    r = spec["reg"]
    reg = Regularizer(r["kind"], r["lam"], r.get("eta", 1.0), r.get("smoothing", 0.0))
    ds = load_libsvm(data_path, n_features=spec.get("n_features"))
    return build_problem(spec["loss"], reg, ds, spec.get("variant"), spec.get("bound"),
                         spec.get("normalize", False))


def decode_shard(payload: bytes, data_path: str | None = None) -> Shard:
    header, arrays = P.decode_assign(payload)
    gidx = arrays["global_index"].astype(np.int64)
    sm_h, sep_h = header["smooth"], header["separable"]
    if header.get("data_spec") is not None:
        if data_path is None:
            raise ValueError("ASSIGN asks for worker-side data but no data path was given")
        prob = problem_from_spec(header["data_spec"], data_path)
        cols = prob.matrix.select_columns(gidx)
        smooth_labels = prob.smooth.labels
    else:
        import scipy.sparse as sp

        mat = sp.csc_matrix((arrays["data"], arrays["indices"], arrays["indptr"]),
                            shape=(header["n_rows"], header["n_cols"]))
        cols = ColumnMatrix.from_scipy(mat)
        smooth_labels = arrays.get("smooth_labels")
    if cols.shape != (header["n_rows"], header["n_cols"]):
        raise ValueError(f"shard shape {cols.shape} does not match header")
    smooth = SmoothTerm(sm_h["kind"], smooth_labels, sm_h["l1"], sm_h["l2"])
    bound = sep_h["bound"]
    sep = SeparableTerm(sep_h["kind"], sep_h["l1"], sep_h["l2"], np.inf if bound is None else bound,
                        arrays.get("separable_labels"), sep_h["lam"], sep_h["eta"])
    loc = LocalSolverConfig(**header["local"])
    return Shard(header["worker_id"], cols, gidx, smooth, sep, header["n_blocks"],
                 header["sigma_prime"], header["gamma"], loc, header["avg_start"])


# --- worker side ------------------------------------------------------------


def _send_error(conn, message: str) -> None:
    try:
        P.send_frame(conn, P.ERROR, message.encode("utf-8", "replace"))
    except OSError:
        pass


def handle_connection(conn: socket.socket, data_path: str | None = None) -> str:
    """Serve one coordinator session; returns ``"done"``, ``"error"`` or ``"eof"``."""
    worker = None
    try:
        tag, payload, _ = P.read_frame(conn)
        if tag != P.HELLO:
            _send_error(conn, f"expected HELLO, got {P.TAGS[tag]}")
            return "error"
        version = P.decode_hello(payload)
        if version != P.VERSION:
            _send_error(conn, f"protocol version {version} not supported (worker speaks {P.VERSION})")
            return "error"
        P.send_frame(conn, P.HELLO, P.encode_hello())
        while True:
            tag, payload, _ = P.read_frame(conn)
            if tag == P.ASSIGN:
                if worker is not None:
                    _send_error(conn, "duplicate ASSIGN")
                    return "error"
                worker = BlockWorker(decode_shard(payload, data_path))
            elif tag == P.BROADCAST_V:
                if worker is None:
                    _send_error(conn, "BROADCAST_V before ASSIGN")
                    return "error"
                round_id, v = P.decode_broadcast(payload)
                rep = worker.step(round_id, v)
                P.send_frame(conn, P.RESULT_DV,
                             P.encode_result(round_id, rep.steps, rep.g_sum, rep.sub_value, rep.delta_v))
            elif tag == P.DONE:
                if worker is None:
                    P.send_frame(conn, P.DONE, P.encode_done_reply(np.zeros(0)))
                else:
                    P.send_frame(conn, P.DONE, P.encode_done_reply(worker.alpha, worker.averaged_alpha()))
                return "done"
            else:
                _send_error(conn, f"unexpected {P.TAGS[tag]} frame")
                return "error"
    except EOFError:
        return "eof"
    except Exception as err:  # noqa: BLE001  reported to the coordinator, then the connection closes
        log.warning("worker failure: %s", err)
        _send_error(conn, f"{type(err).__name__}: {err}")
        return "error"
    finally:
        try:
            conn.close()
        except OSError:
            pass


def serve_worker(listen_address, data_path: str | None = None, on_ready=None) -> str:
    """Listen, serve one coordinator session until DONE, then exit.

    ``on_ready`` is called with the bound ``(host, port)``; pass port 0 to
    let the OS pick one.
    """
    host, port = parse_address(listen_address)
    with socket.create_server((host, port)) as srv:
        if on_ready is not None:
            on_ready(srv.getsockname()[:2])
        conn, _ = srv.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return handle_connection(conn, data_path)


# --- coordinator side ---------------------------------------------------------


class TCPExecutor(Executor):
    def __init__(self, addresses, shards: list[Shard], data_spec: dict | None = None,
                 timeout: float | None = None, round_timeout: float | None = None, version: int = P.VERSION):
        if len(addresses) != len(shards):
            raise ValueError(f"{len(addresses)} addresses for {len(shards)} shards")
        self.K = len(shards)
        self.d = shards[0].columns.n_rows
        self.gamma = shards[0].gamma
        self.sigma_prime = shards[0].sigma_prime
        self.global_indices = [s.global_index for s in shards]
        self._socks: list[socket.socket | None] = [None] * self.K
        self._bytes = (0, 0)
        self._round = None
        timeout = handshake_timeout() if timeout is None else timeout
        try:
            for k, (addr, shard) in enumerate(zip(addresses, shards)):
                self._socks[k] = self._connect(k, parse_address(addr), shard, data_spec, timeout,
                                               round_timeout, version)
        except BaseException:
            self.shutdown()
            raise

    def _connect(self, k, addr, shard, data_spec, timeout, round_timeout, version):
        try:
            sock = socket.create_connection(addr, timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            P.send_frame(sock, P.HELLO, P.encode_hello(version))
            tag, payload, _ = P.read_frame(sock)
        except (OSError, EOFError, P.FrameError) as err:
            raise HandshakeError(f"worker {k} at {addr[0]}:{addr[1]}: handshake failed: {err}", [k]) from err
        if tag == P.ERROR:
            sock.close()
            raise HandshakeError(f"worker {k}: {payload.decode('utf-8', 'replace')}", [k])
        if tag != P.HELLO or P.decode_hello(payload) != version:
            sock.close()
            raise HandshakeError(f"worker {k}: protocol version mismatch", [k])
        try:
            P.send_frame(sock, P.ASSIGN, encode_shard(shard, data_spec))
        except OSError as err:
            raise HandshakeError(f"worker {k}: ASSIGN failed: {err}", [k]) from err
        sock.settimeout(round_timeout)
        return sock

    def broadcast(self, round_id: int, v) -> None:
        if self._round is not None:
            raise RuntimeError("collect() must follow every broadcast()")
        payload = P.encode_broadcast(round_id, v)
        down = 0
        for k, s in enumerate(self._socks):
            try:
                down += P.send_frame(s, P.BROADCAST_V, payload)
            except OSError as err:
                raise ExecutorError(f"worker {k} unreachable: {err}", [k]) from err
        self._round = (round_id, down)

    def collect(self):
        from .worker import WorkerReply

        if self._round is None:
            raise RuntimeError("collect() without broadcast()")
        (round_id, down), self._round = self._round, None
        replies, up = [], 0
        for k, s in enumerate(self._socks):
            try:
                tag, payload, n = P.read_frame(s)
            except (OSError, EOFError, P.FrameError) as err:
                raise ExecutorError(f"worker {k} lost in round {round_id}: {err}",
                                    list(range(k, self.K))) from err
            if tag == P.ERROR:
                raise ExecutorError(f"worker {k}: {payload.decode('utf-8', 'replace')}", [k])
            if tag != P.RESULT_DV:
                raise ExecutorError(f"worker {k}: unexpected {P.TAGS[tag]} frame", [k])
            rid, steps, g_sum, sub_value, dv = P.decode_result(payload)
            if rid != round_id:
                raise ExecutorError(f"worker {k} answered round {rid} during round {round_id}", [k])
            up += n
            replies.append(WorkerReply(k, rid, dv, steps, g_sum, sub_value))
        self._bytes = (down, up)
        return replies

    def finish(self):
        blocks, avgs = [], []
        for k, s in enumerate(self._socks):
            try:
                P.send_frame(s, P.DONE)
                tag, payload, _ = P.read_frame(s)
            except (OSError, EOFError, P.FrameError) as err:
                self.shutdown()
                raise ExecutorError(f"worker {k} lost at shutdown: {err}", [k]) from err
            if tag != P.DONE:
                self.shutdown()
                raise ExecutorError(f"worker {k}: expected DONE, got {P.TAGS[tag]}", [k])
            a, avg = P.decode_done_reply(payload)
            blocks.append(a)
            avgs.append(avg)
        self.shutdown()
        return blocks, (None if any(a is None for a in avgs) else avgs)

    def shutdown(self) -> None:
        for k, s in enumerate(self._socks):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass
                self._socks[k] = None


def tcp_executor(worker_addresses, problem: ProblemInstance, partition: Partition,
                 solver_config: LocalSolverConfig, sigma_prime: float | None = None, gamma: float = 1.0,
                 avg_start: int | None = None, data_spec: dict | None = None, **kw) -> TCPExecutor:
    if sigma_prime is None:
        sigma_prime = gamma * partition.k_blocks
    shards = make_shards(problem, partition, sigma_prime, gamma, solver_config, avg_start)
    return TCPExecutor(list(worker_addresses), shards, data_spec, **kw)
