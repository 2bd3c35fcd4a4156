"""Reference methods traced in the same schema as the engine.

* ``prox-gd``       proximal gradient on objective (A)
* ``minibatch-cd``  Jacobi coordinate updates on a sampled batch, scaled by beta/b
* ``admm``          consensus ADMM on objective (B), one copy of ``w`` per block
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import Partition
from .engine import NumericalFailure, RoundTrace, RunResult
from .local_solvers import LocalSolverConfig, run_local_solver
from .problems import ProblemInstance, gap_from_objectives, map_w, objective_A, objective_B
from .runtime import protocol
from .subproblem import SubproblemView

METHODS = ("prox-gd", "minibatch-cd", "admm")


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "prox-gd"
    max_rounds: int = 100
    step: float | None = None      # prox-gd; None = tau / lambda_max(A^T A)
    batch: int = 1                 # minibatch-cd b
    beta: float = 1.0              # minibatch-cd beta, in [1, b]
    rho: float = 1.0               # admm penalty
    inner_passes: int = 10         # admm block solve epochs
    varying_rho: bool = False
    seed: int = 0
    gap_tolerance: float | None = None
    trace_every: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline {self.method!r}; expected one of {METHODS}")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if self.batch < 1:
            raise ValueError("batch size must be at least 1")
        if not 1.0 <= self.beta <= self.batch:
            raise ValueError(f"beta must lie in [1, b={self.batch}]")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.inner_passes < 1 or self.max_rounds < 1 or self.trace_every < 1:
            raise ValueError("inner_passes, max_rounds and trace_every must be at least 1")


def _finite(x, what, round_id=0):
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"{what} became non-finite in round {round_id}", round_id)
    return x


def spectral_norm_sq(problem: ProblemInstance, iterations: int = 50, seed: int = 0) -> float:
    """``lambda_max(A^T A)`` by power iteration."""
    A = problem.matrix
    x = np.random.default_rng(seed).standard_normal(A.n_cols)
    lam = 0.0
    for _ in range(iterations):
        nrm = np.linalg.norm(x)
        if nrm == 0:
            return 0.0
        x = x / nrm
        y = A.rmatvec(A.matvec(x))
        lam = float(x @ y)
        x = y
    return lam


def default_step(problem: ProblemInstance, iterations: int = 50) -> float:
    lam = spectral_norm_sq(problem, iterations)
    return problem.tau / lam if lam > 0 else 1.0


# --- prox-gd ------------------------------------------------------------------


def prox_gd_round(problem: ProblemInstance, alpha, step: float, v=None, max_step: float | None = None):
    """``alpha <- prox_{step g}(alpha - step A^T grad f(A alpha))``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if step < 0:
        raise ValueError("step must be non-negative")
    if max_step is not None and step > max_step * (1 + 1e-12):
        warnings.warn(f"step {step:.3g} exceeds tau/||A||^2 = {max_step:.3g}; descent is not guaranteed",
                      RuntimeWarning, stacklevel=2)
    if step == 0:
        return alpha.copy()
    if v is None:
        v = problem.shared_vector(alpha)
    grad = problem.matrix.rmatvec(map_w(problem.smooth, v))
    return _finite(problem.separable.prox(alpha - step * grad, step), "prox-gd iterate")


# --- mini-batch coordinate descent ----------------------------------------------


def coordinate_targets(problem: ProblemInstance, alpha, idx, v=None, colsq=None) -> np.ndarray:
    """Closed-form single-coordinate minimizers at the current ``alpha`` (quadratic model of f)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    idx = np.asarray(idx, dtype=np.int64)
    if v is None:
        v = problem.shared_vector(alpha)
    w = map_w(problem.smooth, v)
    sub = problem.matrix.select_columns(idx)
    q = (sub.column_norms_sq() if colsq is None else colsq[idx]) / problem.tau
    r = q * alpha[idx] - sub.rmatvec(w)
    return problem.separable.take(idx).argmin_1d(q, r, alpha[idx])


def minibatch_cd_round(problem: ProblemInstance, alpha, b: int, beta: float, seed, v=None, colsq=None):
    """Jacobi update of ``b`` sampled coordinates, each scaled by ``beta/b``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    alpha = np.array(alpha, dtype=np.float64)
    n = alpha.size
    if not 1 <= b <= n:
        raise ValueError(f"batch size must lie in [1, n={n}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=b, replace=False))
    z = coordinate_targets(problem, alpha, idx, v, colsq)
    alpha[idx] += (beta / b) * (z - alpha[idx])
    return _finite(alpha, "mini-batch iterate")


# --- consensus ADMM -------------------------------------------------------------


@dataclass
class AdmmState:
    w: np.ndarray                 # consensus variable
    u: list                       # scaled dual variable per block
    alpha: np.ndarray             # block minimizers, warm starts for the next round
    rho: float
    round: int = 0
    primal_residual: float = math.nan
    dual_residual: float = math.nan
    w_blocks: list = field(default_factory=list)

    @classmethod
    def zeros(cls, problem: ProblemInstance, partition: Partition, rho: float) -> "AdmmState":
        d = problem.d
        return cls(np.zeros(d), [np.zeros(d) for _ in range(partition.k_blocks)], np.zeros(problem.n), rho)


def admm_block_solve(columns, separable, alpha0, lin, quad: float, passes: int, rng, colsq=None):
    """CD on ``sum g(a) + lin^T A a + (quad/2)||A a||^2`` from ``alpha0``; returns ``(a, A a)``."""
    a = np.array(alpha0, dtype=np.float64)
    av = columns.matvec(a)
    if columns.n_cols == 0:
        return a, av
    colsq = columns.column_norms_sq() if colsq is None else colsq
    order = np.concatenate([rng.permutation(columns.n_cols) for _ in range(passes)]).astype(np.int64)
    _kernels.cd_absolute(columns.indptr, columns.indices, columns.data, colsq, order, a, av,
                         np.ascontiguousarray(lin, dtype=np.float64), float(quad), separable.code,
                         np.ascontiguousarray(separable.label_array(columns.n_cols)),
                         separable.l1, separable.l2, separable.bound)
    return a, av


def admm_round(problem: ProblemInstance, partition: Partition, state: AdmmState, rho: float | None = None,
               inner_passes: int = 10, seed=0, varying_rho: bool = False, blocks=None) -> AdmmState:
    """One consensus round: block solves in dual form, prox step on ``f*``, dual update."""
    rho = state.rho if rho is None else float(rho)
    if not rho > 0:
        raise ValueError("rho must be positive")
    K = partition.k_blocks
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    alpha = state.alpha.copy()
    w_blocks = []
    for k in range(K):
        idx = partition.block(k)
        cols, sep = (blocks[k] if blocks is not None else
                     (problem.matrix.select_columns(idx), problem.separable.take(idx)))
        a, av = admm_block_solve(cols, sep, alpha[idx], state.w - state.u[k], 1.0 / rho, inner_passes, rng)
        alpha[idx] = a
        w_blocks.append(state.w - state.u[k] + av / rho)
    z = np.mean([wk + uk for wk, uk in zip(w_blocks, state.u)], axis=0)
    w = _finite(problem.smooth.prox_conjugate(z, 1.0 / (rho * K)), "ADMM consensus", state.round + 1)
    u = [uk + wk - w for uk, wk in zip(state.u, w_blocks)]
    r = math.sqrt(sum(float((wk - w) @ (wk - w)) for wk in w_blocks))
    s = rho * math.sqrt(K) * float(np.linalg.norm(w - state.w))
    if varying_rho:
        if r > 10.0 * s:
            rho, u = rho * 2.0, [uk / 2.0 for uk in u]
        elif s > 10.0 * r:
            rho, u = rho / 2.0, [uk * 2.0 for uk in u]
    return AdmmState(w, u, alpha, rho, state.round + 1, r, s, w_blocks)


def admm_equivalence_check(problem: ProblemInstance, view: SubproblemView, rho: float,
                           passes: int = 10_000, seed: int = 0):
    """Solve the ADMM block problem and the CoCoA subproblem for the same block.

    The ADMM dual variable is the one that makes the two problems coincide
    when ``rho = tau/sigma'``: ``u_k = (sigma'/tau) A_[k] alpha_[k]``.
    Returns ``(minimizer_admm, minimizer_cocoa, max_abs_diff)`` in absolute
    coordinates (``alpha + delta`` for CoCoA).
    """
    cols = view.local_columns
    u = view.scale * cols.matvec(view.alpha_block)
    a_admm, _ = admm_block_solve(cols, view.separable, view.alpha_block, view.w - u, 1.0 / rho, passes,
                                 np.random.default_rng(seed), view.colsq)
    res = run_local_solver(view, LocalSolverConfig(passes, seed))
    a_cocoa = view.alpha_block + res.delta_block
    diff = float(np.max(np.abs(a_admm - a_cocoa), initial=0.0))
    return a_admm, a_cocoa, diff


# --- runner ------------------------------------------------------------------------


def _row(problem, t, alpha, v, start, down, up):
    obj_a = objective_A(problem, alpha, v)
    rep = gap_from_objectives(obj_a, objective_B(problem, map_w(problem.smooth, v)))
    return RoundTrace(t, time.perf_counter() - start, obj_a, rep.objective_B, rep.gap, down + up, down, up)


def run_baseline(problem: ProblemInstance, partition: Partition, config: BaselineConfig) -> RunResult:
    """Run a baseline from zero, tracing gap and bytes like the engine.

    Every method moves one ``d``-vector per worker in each direction per
    round, which is what the byte columns charge.
    """
    K = partition.k_blocks
    down = K * protocol.broadcast_frame_size(problem.d)
    up = K * protocol.result_frame_size(problem.d)
    alpha = np.zeros(problem.n)
    v = np.zeros(problem.d)
    trace = []
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    colsq = problem.matrix.column_norms_sq()
    state = None
    step = max_step = None
    if config.method == "prox-gd":
        max_step = default_step(problem)
        step = config.step if config.step is not None else max_step
    elif config.method == "admm":
        state = AdmmState.zeros(problem, partition, config.rho)
        blocks = [(problem.matrix.select_columns(idx), problem.separable.take(idx)) for idx in partition.blocks()]
    stopped = False
    t = 0
    for t in range(1, config.max_rounds + 1):
        if config.method == "prox-gd":
            alpha = prox_gd_round(problem, alpha, step, v, max_step if t == 1 else None)
        elif config.method == "minibatch-cd":
            alpha = minibatch_cd_round(problem, alpha, config.batch, config.beta, rng, v, colsq)
        else:
            state = admm_round(problem, partition, state, None, config.inner_passes, rng,
                               config.varying_rho, blocks)
            alpha = state.alpha
        v = _finite(problem.shared_vector(alpha), "shared vector", t)
        if t % config.trace_every == 0 or t == config.max_rounds:
            trace.append(_row(problem, t, alpha, v, start, down, up))
            tol = config.gap_tolerance
            if tol is not None and not math.isinf(tol) and trace[-1].gap <= tol:
                stopped = True
                break
    return RunResult(alpha=alpha, v=v, trace=trace, rounds=t, stopped_on_gap=stopped)
