import numpy as np
import pytest

import oracles
from conftest import dataset_from_dense
from cocoa.data import ColumnMatrix, Partition, partition_balanced
from cocoa.engine import EngineConfig, run_cocoa
from cocoa.local_solvers import LocalSolverConfig, coordinate_step, measure_theta, run_local_solver
from cocoa.problems import Regularizer, SeparableTerm, build_problem
from cocoa.subproblem import SubproblemView, make_view, subproblem_value, value_from_image


def lasso(seed=0, rows=8, cols=12, lam=0.2):
    rng = np.random.default_rng(seed)
    return build_problem("least-squares", Regularizer("l1", lam),
                         dataset_from_dense(rng.standard_normal((rows, cols)), rng.standard_normal(rows)))


def hinge(seed=0, rows=12, cols=6, lam=0.1):
    rng = np.random.default_rng(seed)
    return build_problem("hinge", Regularizer("l2", lam),
                         dataset_from_dense(rng.standard_normal((rows, cols)), np.sign(rng.standard_normal(rows))))


def all_problems():
    rng = np.random.default_rng(4)
    X, y = rng.standard_normal((10, 7)), rng.standard_normal(10)
    return {
        "lasso": lasso(),
        "elastic-net": build_problem("least-squares", Regularizer("elastic-net", 0.3, 0.6), dataset_from_dense(X, y),
                                     "primal"),
        "ridge-dual": build_problem("least-squares", Regularizer("l2", 0.3), dataset_from_dense(X, y), "dual"),
        "hinge": hinge(),
        "absdev": build_problem("absdev", Regularizer("l2", 0.2), dataset_from_dense(X, y)),
        "logistic": build_problem("logistic", Regularizer("l1", 0.2), dataset_from_dense(X, np.sign(y))),
    }


def test_zero_column_pure_shrinkage():
    A = ColumnMatrix.from_dense(np.array([[0.0, 1.0], [0.0, 0.5]]))
    from cocoa.problems import SmoothTerm
    smooth = SmoothTerm.least_squares(np.array([1.0, 1.0]))
    v = A.matvec(np.array([0.7, 0.0]))
    view = SubproblemView(v=v, w=smooth.grad(v), f_v=smooth.value(v), local_columns=A,
                          alpha_block=np.array([0.7, 0.0]), separable=SeparableTerm.l1_bounded(0.1, 10.0),
                          sigma_prime=1.0, tau=1.0)
    delta, dv = np.zeros(2), np.zeros(2)
    assert coordinate_step(view, 0, delta, dv) == pytest.approx(-0.7)
    assert not dv.any()


def test_identity_lasso_one_epoch():
    p = build_problem("least-squares", Regularizer("l1", 0.1), dataset_from_dense(np.eye(2), [1, 1]))
    part = partition_balanced(2, 1, 0)
    view = make_view(p, part, 0, np.zeros(2), 1.0)
    res = run_local_solver(view, LocalSolverConfig(1, 0))
    np.testing.assert_allclose(res.delta_block, [0.9, 0.9], atol=1e-15)


def test_hinge_box_clip():
    y = np.array([1.0, -1.0])
    A = ColumnMatrix.from_dense(np.array([[1.0, 0.0], [0.0, 1.0]]))
    from cocoa.problems import SmoothTerm
    smooth = SmoothTerm.regularizer_conjugate(0.0, 1.0)
    sep = SeparableTerm.hinge_dual(y)
    alpha = np.array([0.5, 0.0])          # alpha_0 y_0 at the upper end 1/n
    v = A.matvec(alpha)
    view = SubproblemView(v=v, w=smooth.grad(v), f_v=smooth.value(v), local_columns=A, alpha_block=alpha,
                          separable=sep, sigma_prime=1.0, tau=1.0)
    # unconstrained minimizer along coordinate 0 is alpha_0 = 1, outside the box
    delta, dv = np.zeros(2), np.zeros(2)
    coordinate_step(view, 0, delta, dv)
    assert delta[0] == 0.0


def test_coordinate_step_matches_oracle():
    rng = np.random.default_rng(9)
    for name, p in all_problems().items():
        sep_all = p.separable
        part = partition_balanced(p.n, 2, 0)
        alpha = np.zeros(p.n)
        view0 = make_view(p, part, 0, alpha, 2.0)
        alpha[part.block(0)] = run_local_solver(view0, LocalSolverConfig(1, 3)).delta_block * 0.5
        view = make_view(p, part, 0, alpha, 2.0)
        A = view.local_columns.to_dense()
        for _ in range(10):
            i = int(rng.integers(view.n_local))
            delta = np.zeros(view.n_local)
            dv = np.zeros(p.d)
            j = int(rng.integers(view.n_local))
            if j != i:  # start from a non-zero state on another coordinate
                coordinate_step(view, j, delta, dv)
            before = delta.copy()
            got = coordinate_step(view, i, delta, dv)
            x = A[:, i]
            q = view.scale * float(x @ x)
            c = float(x @ (view.w + view.scale * (A @ before)))
            a_i = view.alpha_block[i]
            sep = view.separable.take([i])
            if q == 0:
                continue
            if sep.kind in ("elastic-net", "l2", "l1-bounded"):
                dg = oracles.dg_abs(sep.l1, sep.l2)
                lo, hi = -sep.bound if sep.bound < np.inf else -1e3, sep.bound if sep.bound < np.inf else 1e3
            elif sep.kind == "squared-dual":
                dg, lo, hi = (lambda z, b=sep.labels[0]: z - b), -1e3, 1e3
            elif sep.kind == "hinge-dual":
                dg = oracles.dg_linear(-sep.labels[0])
                lo, hi = (0.0, sep.bound) if sep.labels[0] > 0 else (-sep.bound, 0.0)
            else:
                dg, lo, hi = oracles.dg_linear(-sep.labels[0]), -sep.bound, sep.bound
            z = oracles.bisect_argmin(q, q * (a_i + before[i]) - c, dg, lo, hi)
            assert a_i + got == pytest.approx(z, abs=1e-8), name


def test_monotone_and_deterministic():
    for name, p in all_problems().items():
        part = partition_balanced(p.n, 2, 1)
        view = make_view(p, part, 1, np.zeros(p.n), 2.0)
        cfg = LocalSolverConfig(5, 42, check_monotone=True)
        a = run_local_solver(view, cfg)       # raises on any increase
        b = run_local_solver(view, LocalSolverConfig(5, 42))
        assert a.delta_block.tobytes() == b.delta_block.tobytes(), name
        assert a.delta_v.tobytes() == b.delta_v.tobytes(), name
        np.testing.assert_allclose(a.delta_v, view.local_columns.matvec(a.delta_block), atol=1e-10)
        assert a.steps_taken == 5 * view.n_local
        r = run_local_solver(view, LocalSolverConfig(5, 42, shuffle=False, check_monotone=True))
        assert r.steps_taken == 5 * view.n_local


def test_drift_after_epoch():
    p = lasso(3, 40, 60)
    part = partition_balanced(p.n, 1, 0)
    view = make_view(p, part, 0, np.zeros(p.n), 1.0)
    res = run_local_solver(view, LocalSolverConfig(1, 0))
    assert np.max(np.abs(res.delta_v - view.local_columns.matvec(res.delta_block))) <= 1e-9


def test_level_set_safety():
    p = lasso(5, 20, 30, lam=0.05)
    B = p.separable.bound
    res = run_cocoa(p, partition_balanced(p.n, 3, 0), None,
                    EngineConfig(max_rounds=40, local=LocalSolverConfig(3), keep_iterates=True))
    for a in res.iterates:
        assert np.max(np.abs(a)) <= B


def test_single_coordinate_exact():
    p = lasso(1, 6, 3)
    part = Partition.from_blocks([[0], [1], [2]], 3)
    view = make_view(p, part, 1, np.zeros(3), 3.0)
    res = run_local_solver(view, LocalSolverConfig(1, 0))
    assert measure_theta(view, res, 200) == 0.0


def test_theta_endpoints_and_monotone():
    p = lasso(2, 30, 40, lam=0.05)
    part = partition_balanced(p.n, 2, 0)
    view = make_view(p, part, 0, np.zeros(p.n), 2.0)
    oracle = run_local_solver(view, LocalSolverConfig(500, 1))
    assert measure_theta(view, oracle, 500) == pytest.approx(0.0, abs=1e-9)
    zero = type(oracle)(np.zeros(view.n_local), np.zeros(p.d), 0)
    assert measure_theta(view, zero, 500) == 1.0
    thetas = [measure_theta(view, run_local_solver(view, LocalSolverConfig(H, 0)), 500) for H in (1, 10)]
    assert thetas[1] <= thetas[0]


def test_value_from_image_consistent():
    p = hinge()
    part = partition_balanced(p.n, 2, 0)
    view = make_view(p, part, 0, np.zeros(p.n), 2.0)
    res = run_local_solver(view, LocalSolverConfig(3, 0))
    assert value_from_image(view, res.delta_block, res.delta_v) == pytest.approx(
        subproblem_value(view, res.delta_block), rel=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        LocalSolverConfig(0)
