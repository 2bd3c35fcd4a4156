import warnings

import numpy as np
import pytest

import oracles
from conftest import dataset_from_dense
from cocoa.baselines import (AdmmState, BaselineConfig, admm_equivalence_check, admm_round, coordinate_targets,
                             default_step, minibatch_cd_round, prox_gd_round, run_baseline, spectral_norm_sq)
from cocoa.data import ColumnMatrix, Partition, partition_balanced
from cocoa.engine import EngineConfig, run_cocoa
from cocoa.harness import reference_optimum, synth_dataset
from cocoa.local_solvers import LocalSolverConfig, coordinate_step
from cocoa.problems import Regularizer, build_problem, objective_A
from cocoa.runtime import protocol
from cocoa.subproblem import make_view


def identity_lasso(lam=0.1):
    return build_problem("least-squares", Regularizer("l1", lam), dataset_from_dense(np.eye(2), [1, 1]))


def lasso(seed=0, rows=20, cols=30, lam=0.3):
    return build_problem("least-squares", Regularizer("l1", lam),
                         synth_dataset({"rows": rows, "cols": cols, "seed": seed}), normalize=True)


def en_dual(seed=0, rows=30, cols=10):
    return build_problem("least-squares", Regularizer("elastic-net", 0.5, 0.5),
                         synth_dataset({"rows": rows, "cols": cols, "seed": seed}), "dual", normalize=True)


# --- prox-gd ---------------------------------------------------------------------------


def test_prox_gd_identity_closed_form():
    p = identity_lasso()
    np.testing.assert_allclose(prox_gd_round(p, np.zeros(2), 1.0), oracles.soft_threshold(np.ones(2), 0.1))


def test_prox_gd_zero_step_and_fixed_point():
    p = lasso()
    a = np.random.default_rng(0).uniform(-0.1, 0.1, p.n)
    np.testing.assert_array_equal(prox_gd_round(p, a, 0.0), a)
    res = run_cocoa(p, partition_balanced(p.n, 1, 0), None,
                    EngineConfig(max_rounds=500, gap_tolerance=1e-13, local=LocalSolverConfig(20)))
    step = default_step(p)
    assert np.linalg.norm(prox_gd_round(p, res.alpha, step) - res.alpha) <= 1e-10


def test_prox_gd_step_warning():
    p = lasso()
    safe = default_step(p)
    with pytest.warns(RuntimeWarning):
        prox_gd_round(p, np.zeros(p.n), 2 * safe, max_step=safe)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        prox_gd_round(p, np.zeros(p.n), safe, max_step=safe)


def test_spectral_norm():
    p = lasso()
    A = p.matrix.to_dense()
    assert spectral_norm_sq(p, 200) == pytest.approx(np.linalg.norm(A, 2) ** 2, rel=1e-6)


# --- mini-batch CD ---------------------------------------------------------------------


def test_minibatch_single_coordinate_is_cd_step():
    p = lasso(1)
    rng = np.random.default_rng(3)
    alpha = rng.uniform(-0.2, 0.2, p.n)
    seed = 17
    i = int(np.random.default_rng(seed).choice(p.n, size=1, replace=False)[0])
    got = minibatch_cd_round(p, alpha, 1, 1.0, seed)
    view = make_view(p, partition_balanced(p.n, 1, 0), 0, alpha, 1.0)
    delta, dv = np.zeros(p.n), np.zeros(p.d)
    step = coordinate_step(view, i, delta, dv)
    expect = alpha.copy()
    expect[i] += step
    np.testing.assert_allclose(got, expect, atol=1e-15)


def test_minibatch_b1_matches_serial_cd_trajectory():
    p = lasso(2)
    A = p.matrix.to_dense()
    b, lam = p.smooth.labels, p.separable.l1
    rng_lib = np.random.default_rng(5)
    rng_ref = np.random.default_rng(5)
    a_lib = np.zeros(p.n)
    a_ref = np.zeros(p.n)
    for _ in range(200):
        a_lib = minibatch_cd_round(p, a_lib, 1, 1.0, rng_lib)
        i = int(rng_ref.choice(p.n, size=1, replace=False)[0])
        x = A[:, i]
        q = x @ x
        r = q * a_ref[i] - x @ (A @ a_ref - b)
        a_ref[i] = oracles.soft_threshold(r, lam) / q
        np.testing.assert_allclose(a_lib, a_ref, atol=1e-12)


def test_minibatch_full_jacobi_on_identity():
    p = identity_lasso()
    a = np.zeros(2)
    for t in range(60):  # beta/b = 1/2 halves the distance each round
        a = minibatch_cd_round(p, a, 2, 1.0, t)
    np.testing.assert_allclose(a, [0.9, 0.9], atol=1e-12)
    # with beta = b the decoupled coordinates are solved in one round
    np.testing.assert_allclose(minibatch_cd_round(p, np.zeros(2), 2, 2.0, 0), [0.9, 0.9])


def test_minibatch_aggressive_beta_diverges_on_duplicates():
    col = np.random.default_rng(0).standard_normal((6, 1))
    X = np.hstack([col] * 8)
    p = build_problem("least-squares", Regularizer("l1", 0.01),
                      dataset_from_dense(X, np.random.default_rng(1).standard_normal(6)))
    a = np.zeros(8)
    safe = minibatch_cd_round(p, a, 8, 1.0, 0)
    wild = minibatch_cd_round(p, a, 8, 8.0, 0)
    assert objective_A(p, safe) < objective_A(p, a)
    assert objective_A(p, wild) > objective_A(p, a)


def test_coordinate_targets_are_exact_minimizers():
    p = lasso(3)
    a = np.random.default_rng(0).uniform(-0.1, 0.1, p.n)
    z = coordinate_targets(p, a, np.arange(p.n))
    for i in range(0, p.n, 5):
        def h(t, i=i):
            b = a.copy()
            b[i] = t
            return objective_A(p, b)
        assert h(z[i]) <= min(h(z[i] + 1e-6), h(z[i] - 1e-6)) + 1e-14


# --- ADMM ------------------------------------------------------------------------------


def test_admm_single_block_matches_centralized_oracle():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((15, 6))
    y = rng.standard_normal(15)
    lam = 0.7
    p = build_problem("least-squares", Regularizer("l2", lam), dataset_from_dense(X, y), "dual")
    A = p.matrix.to_dense()                       # d x n, columns are training points
    part = partition_balanced(p.n, 1, 0)
    rho = 0.8
    state = AdmmState.zeros(p, part, rho)
    w = np.zeros(p.d)
    u = np.zeros(p.d)
    for t in range(15):
        state = admm_round(p, part, state, inner_passes=3000, seed=t)
        # block: argmin sum(a^2/2 - a y) + (w - u)^T A a + ||A a||^2 / (2 rho)
        alpha = np.linalg.solve(np.eye(p.n) + A.T @ A / rho, y - A.T @ (w - u))
        w1 = w - u + A @ alpha / rho
        w = (w1 + u) / (1 + lam / rho)            # prox of lam/2 ||w||^2 with step 1/rho
        u = u + w1 - w
        np.testing.assert_allclose(state.w, w, atol=1e-8)
        np.testing.assert_allclose(state.alpha, alpha, atol=1e-8)


def test_admm_fixed_point_and_reference():
    p = en_dual()
    part = partition_balanced(p.n, 3, 0)
    ref, _ = reference_optimum(p, 200, 1000)
    state = AdmmState.zeros(p, part, 1.0)
    for t in range(500):
        state = admm_round(p, part, state, inner_passes=50, seed=t)
    assert objective_A(p, state.alpha) == pytest.approx(ref, abs=1e-4)
    nxt = admm_round(p, part, state, inner_passes=50, seed=999)
    assert np.max(np.abs(nxt.w - state.w)) <= 1e-8


def test_admm_varying_rho_rescales_dual():
    p = en_dual(1)
    part = partition_balanced(p.n, 2, 0)
    state = AdmmState.zeros(p, part, 1e-3)
    nxt = admm_round(p, part, state, inner_passes=5, seed=0, varying_rho=True)
    assert nxt.rho != state.rho
    with pytest.raises(ValueError):
        admm_round(p, part, state, rho=0.0)


def _random_views(n_views, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for j in range(n_views):
        kind = j % 3
        if kind == 0:
            p = en_dual(j, 40, 8)
        elif kind == 1:
            ds = synth_dataset({"rows": 40, "cols": 8, "seed": j, "task": "classification"})
            p = build_problem("hinge", Regularizer("l2", 0.2), ds, normalize=True)
        else:
            p = build_problem("absdev", Regularizer("l2", 0.3), synth_dataset({"rows": 40, "cols": 8, "seed": j}),
                              normalize=True)
        K = int(rng.integers(2, 5))
        part = partition_balanced(p.n, K, j)
        alpha = np.zeros(p.n)
        k = int(rng.integers(K))
        from cocoa.local_solvers import run_local_solver
        v0 = make_view(p, part, k, alpha, float(K))
        alpha[part.block(k)] = run_local_solver(v0, LocalSolverConfig(1, j)).delta_block * rng.uniform(0.2, 1)
        out.append((p, make_view(p, part, k, alpha, float(K))))
    return out


def test_admm_equivalence_matched_and_mismatched():
    for p, view in _random_views(6):
        rho = view.tau / view.sigma_prime
        _, _, diff = admm_equivalence_check(p, view, rho, passes=3000)
        assert diff <= 1e-6
    p, view = _random_views(1)[0]
    _, _, diff = admm_equivalence_check(p, view, 2 * view.tau / view.sigma_prime, passes=3000)
    assert diff > 1e-3


def test_admm_equivalence_zero_block():
    p, view = _random_views(1)[0]
    zero = ColumnMatrix.from_dense(np.zeros((p.d, view.n_local)))
    from dataclasses import replace
    view0 = replace(view, local_columns=zero, colsq=None)
    view0.__post_init__()
    a, c, diff = admm_equivalence_check(p, view0, view0.tau / view0.sigma_prime, passes=5)
    # both reduce to the prox at alpha; alpha + delta may round by an ulp
    assert diff <= 1e-15
    np.testing.assert_allclose(a, view0.separable.argmin_1d(0.0, np.zeros(view0.n_local), view0.alpha_block), atol=1e-15)


# --- runner ------------------------------------------------------------------------------


@pytest.mark.parametrize("make, methods", [
    (en_dual, ["prox-gd", "minibatch-cd", "admm"]),
    (lambda: lasso(4, 25, 15, 0.2), ["prox-gd", "minibatch-cd", "admm"]),
])
def test_baselines_reach_cocoa_objective(make, methods):
    p = make()
    part = partition_balanced(p.n, 3, 0)
    ref = run_cocoa(p, part, None, EngineConfig(max_rounds=3000, gap_tolerance=1e-10, local=LocalSolverConfig(5)))
    target = ref.trace[-1].objective_A
    for m in methods:
        cfg = BaselineConfig(m, max_rounds=4000, batch=p.n if m == "minibatch-cd" else 1, gap_tolerance=1e-8,
                             inner_passes=20, trace_every=10)
        res = run_baseline(p, part, cfg)
        assert res.trace[-1].objective_A == pytest.approx(target, abs=1e-4), m
        assert res.trace[0].bytes_down == 3 * protocol.broadcast_frame_size(p.d)
        assert res.trace[0].bytes_up == 3 * protocol.result_frame_size(p.d)


@pytest.mark.parametrize("kw", [dict(method="nope"), dict(step=0.0), dict(batch=2, beta=3.0), dict(beta=0.5),
                                dict(rho=0.0), dict(max_rounds=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BaselineConfig(**kw)
