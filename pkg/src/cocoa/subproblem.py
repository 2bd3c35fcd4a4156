"""The data-local quadratic subproblem and its safety parameter.

For block ``k`` with shared vector ``v = A alpha`` and ``w = grad f(v)``::

    G_k(d) = f(v)/K + w^T A_[k] d + sigma'/(2 tau) ||A_[k] d||^2
             + sum_{i in P_k} g_i(alpha_i + d_i)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ColumnMatrix, ContractError, Partition
from .problems import ProblemInstance, SeparableTerm, map_w, objective_A

BLOCK_BOUND_SLACK = 1e-9


@dataclass
class SubproblemView:
    """Everything worker ``k`` needs to evaluate and minimize ``G_k``."""

    v: np.ndarray
    w: np.ndarray
    f_v: float
    local_columns: ColumnMatrix
    alpha_block: np.ndarray
    separable: SeparableTerm
    sigma_prime: float
    tau: float
    gamma: float = 1.0
    n_blocks: int = 1
    global_index: np.ndarray | None = None
    colsq: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.colsq is None:
            self.colsq = self.local_columns.column_norms_sq()
        if self.sigma_prime < self.gamma:
            raise ValueError(f"sigma'={self.sigma_prime} is below gamma={self.gamma}")

    @property
    def scale(self) -> float:
        """Quadratic coefficient sigma'/tau."""
        return self.sigma_prime / self.tau

    @property
    def n_local(self) -> int:
        return self.local_columns.n_cols

    def _local(self, delta) -> np.ndarray:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape == (self.n_local,):
            return delta
        if self.global_index is not None and delta.ndim == 1:
            mask = np.ones(delta.size, dtype=bool)
            mask[self.global_index] = False
            if np.any(delta[mask] != 0.0):
                raise ContractError("delta has support outside this block")
            return delta[self.global_index]
        raise ContractError(f"delta of shape {delta.shape} does not match block of size {self.n_local}")


def make_view(problem: ProblemInstance, partition: Partition, k: int, alpha, sigma_prime: float,
              gamma: float = 1.0, v=None) -> SubproblemView:
    alpha = np.asarray(alpha, dtype=np.float64)
    if v is None:
        v = problem.shared_vector(alpha)
    idx = partition.block(k)
    return SubproblemView(
        v=v, w=map_w(problem.smooth, v), f_v=problem.smooth.value(v),
        local_columns=problem.matrix.select_columns(idx), alpha_block=alpha[idx].copy(),
        separable=problem.separable.take(idx), sigma_prime=sigma_prime, tau=problem.tau,
        gamma=gamma, n_blocks=partition.k_blocks, global_index=idx,
    )


def make_views(problem, partition, alpha, sigma_prime, gamma=1.0) -> list[SubproblemView]:
    v = problem.shared_vector(np.asarray(alpha, dtype=np.float64))
    return [make_view(problem, partition, k, alpha, sigma_prime, gamma, v) for k in range(partition.k_blocks)]


def value_from_image(view: SubproblemView, delta_local, dv) -> float:
    """``G_k`` when ``dv = A_[k] delta`` is already known."""
    g = view.separable.total(view.alpha_block + delta_local)
    return view.f_v / view.n_blocks + float(view.w @ dv) + 0.5 * view.scale * float(dv @ dv) + g


def subproblem_value(view: SubproblemView, delta_block) -> float:
    delta = view._local(delta_block)
    return value_from_image(view, delta, view.local_columns.matvec(delta))


def safe_sigma_prime(gamma: float, k: int) -> float:
    """The always-valid choice ``sigma' = gamma K``."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if k < 1:
        raise ValueError("K must be at least 1")
    return gamma * k


def _range_basis(block: ColumnMatrix, rtol: float = 1e-10) -> np.ndarray:
    if block.n_cols == 0:
        return np.zeros((block.n_rows, 0))
    u, s, _ = np.linalg.svd(block.to_dense(), full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((block.n_rows, 0))
    return u[:, s > rtol * s[0]]


def estimate_sigma_min(matrix: ColumnMatrix, partition: Partition, gamma: float = 1.0,
                       iterations: int = 100, tol: float = 1e-8, seed: int = 0) -> dict:
    """Power-iteration estimate of ``sigma'_min``.

    The ratio ``||A a||^2 / sum_k ||A_[k] a_[k]||^2`` is maximized over the
    block images ``y_k = A_[k] a_[k]``; its maximum is the top eigenvalue of
    the sum of orthogonal projectors onto the block ranges, which is what the
    iteration runs on. Returns a JSON-ready record; the estimate is advisory
    and never substituted for sigma'.
    """
    if matrix.n_cols == 0 or matrix.n_rows == 0:
        raise ValueError("matrix is empty")
    bases = [_range_basis(matrix.select_columns(idx)) for idx in partition.blocks()]

    def apply(x):
        out = np.zeros_like(x)
        for q in bases:
            out += q @ (q.T @ x)
        return out

    rng = np.random.default_rng(seed)
    for _attempt in range(10):
        x = apply(rng.standard_normal(matrix.n_rows))
        nrm = np.linalg.norm(x)
        if nrm > 1e-12:
            break
    else:
        raise ArithmeticError("starting vectors stayed in the null space of every block")
    x /= nrm
    lam = 0.0
    it = 0
    for it in range(1, iterations + 1):
        y = apply(x)
        new = float(x @ y)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            raise ArithmeticError("iteration collapsed to zero")
        x = y / nrm
        done = abs(new - lam) <= tol * max(abs(new), 1e-300)
        lam = new
        if done:
            break
    k = partition.k_blocks
    return {"sigma_min_estimate": gamma * lam, "safe_bound": safe_sigma_prime(gamma, k),
            "K": k, "gamma": gamma, "iterations": it}


def lemma1_check(problem: ProblemInstance, partition: Partition, alpha, deltas, gamma: float,
                 sigma_prime: float) -> tuple[float, float, bool]:
    """Evaluate both sides of the block-separable upper bound.

    ``deltas`` is either one full-length vector (split by the partition) or a
    list of ``K`` full-length vectors each supported on its block.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if isinstance(deltas, np.ndarray) and deltas.ndim == 1:
        full = deltas
        blocks = []
        for k in range(partition.k_blocks):
            d = np.zeros_like(full)
            idx = partition.block(k)
            d[idx] = full[idx]
            blocks.append(d)
    else:
        blocks = [np.asarray(d, dtype=np.float64) for d in deltas]
    total = np.sum(blocks, axis=0)
    v = problem.shared_vector(alpha)
    obj = objective_A(problem, alpha, v)
    lhs = objective_A(problem, alpha + gamma * total)
    views = [make_view(problem, partition, k, alpha, sigma_prime, gamma, v) for k in range(partition.k_blocks)]
    rhs = (1.0 - gamma) * obj + gamma * sum(subproblem_value(view, d) for view, d in zip(views, blocks))
    holds = bool(lhs <= rhs + BLOCK_BOUND_SLACK) if np.isfinite(rhs) else True
    return lhs, rhs, holds
