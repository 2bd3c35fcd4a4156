"""Randomized coordinate descent on the local subproblem, and the Theta diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .subproblem import SubproblemView, value_from_image


@dataclass(frozen=True)
class LocalSolverConfig:
    passes_H: int = 1
    rng_seed: int = 0
    shuffle: bool = True  # epochs are permutations; False samples with replacement
    check_monotone: bool = False

    def __post_init__(self):
        if int(self.passes_H) < 1:
            raise ValueError("passes_H must be at least 1")


@dataclass
class LocalResult:
    delta_block: np.ndarray
    delta_v: np.ndarray
    steps_taken: int


def epoch_order(n_local: int, passes: int, rng: np.random.Generator, shuffle: bool = True) -> np.ndarray:
    if n_local == 0:
        return np.zeros(0, dtype=np.int64)
    if shuffle:
        return np.concatenate([rng.permutation(n_local) for _ in range(passes)]).astype(np.int64)
    return rng.integers(0, n_local, size=n_local * passes, dtype=np.int64)


def solver_rng(config: LocalSolverConfig, key=()) -> np.random.Generator:
    return np.random.default_rng([int(config.rng_seed), *(int(k) for k in key)])


def _run(view: SubproblemView, order: np.ndarray, delta: np.ndarray, dv: np.ndarray) -> int:
    cols = view.local_columns
    return _kernels.cd_epochs(
        cols.indptr, cols.indices, cols.data, view.colsq, order,
        view.alpha_block, delta, dv, view.w, view.scale, view.separable.code,
        np.ascontiguousarray(view.separable.label_array(view.n_local)),
        view.separable.l1, view.separable.l2, view.separable.bound,
    )


def coordinate_step(view: SubproblemView, i: int, delta: np.ndarray, dv: np.ndarray) -> float:
    """Exactly minimize ``G_k`` along local coordinate ``i``.

    ``delta`` and its image ``dv`` are updated in place; returns the new
    ``delta[i]``.
    """
    if not 0 <= i < view.n_local:
        raise IndexError(f"coordinate {i} is not in this block")
    _run(view, np.array([i], dtype=np.int64), delta, dv)
    return float(delta[i])


def run_local_solver(view: SubproblemView, config: LocalSolverConfig, key=(),
                     delta0: np.ndarray | None = None) -> LocalResult:
    """``passes_H`` epochs of coordinate descent from ``delta0`` (default zero).

    ``key`` is mixed into the seed (worker id, round) so that every run is
    reproducible bit for bit.
    """
    n = view.n_local
    delta = np.zeros(n) if delta0 is None else np.array(delta0, dtype=np.float64)
    dv = view.local_columns.matvec(delta) if delta0 is not None else np.zeros(view.v.size)
    order = epoch_order(n, int(config.passes_H), solver_rng(config, key), config.shuffle)
    if not config.check_monotone:
        steps = _run(view, order, delta, dv)
        return LocalResult(delta, dv, steps)
    prev = value_from_image(view, delta, dv)
    for i in order:
        _run(view, np.array([i], dtype=np.int64), delta, dv)
        cur = value_from_image(view, delta, dv)
        if cur > prev + 1e-12 * max(1.0, abs(prev)):
            raise AssertionError(f"local objective increased from {prev!r} to {cur!r}")
        prev = cur
    return LocalResult(delta, dv, int(order.size))


def measure_theta(view: SubproblemView, result: LocalResult, oracle_passes: int = 200,
                  config: LocalSolverConfig | None = None) -> float:
    """Empirical local accuracy: fraction of attainable decrease left unrealized.

    The optimum is approximated by an ``oracle_passes`` run from zero (or by
    ``result`` itself if that is better); 1 means no progress, 0 means solved.
    """
    config = config or LocalSolverConfig()
    oracle_cfg = LocalSolverConfig(oracle_passes, config.rng_seed + 7919, True)
    best = run_local_solver(view, oracle_cfg, key=(1,))
    g = value_from_image(view, result.delta_block, result.delta_v)
    g_star = min(value_from_image(view, best.delta_block, best.delta_v), g)
    g0 = value_from_image(view, np.zeros(view.n_local), np.zeros(view.v.size))
    den = g0 - g_star
    if not den >= 1e-14:
        return 0.0
    return float(min(1.0, max(0.0, (g - g_star) / den)))
