import numpy as np
import pytest
import scipy.linalg as sla

from lqpkit.envs import double_integrator
from lqpkit.mpc import (InfeasibleMpcError, LinearTask, MpcConfig, closed_loop, condense,
                        condense_structure, lqr_gain, lyapunov_cost_to_go, min_uniform_slack,
                        mpc_control, prediction_matrices)
from lqpkit.qp import QpValidationError
from oracles import sample_invariant_states, sparse_mpc_oracle


def di_linear():
    return double_integrator().linear


def test_prediction_matrices_match_rollout(rng):
    task = di_linear()
    Abar, Bbar = prediction_matrices(task.A, task.B, 4)
    x0, u = rng.standard_normal(2), rng.standard_normal(4)
    x, xs = x0, []
    for k in range(4):
        x = task.A @ x + task.B @ u[k:k + 1]
        xs.append(x)
    assert Abar @ x0 + Bbar @ u == pytest.approx(np.concatenate(xs), abs=1e-12)


def stage_sum(task, cfg, x0, u):
    x, total = x0, 0.0
    for k in range(cfg.N):
        x = task.A @ x + task.B @ u[k:k + 1]
        total += x @ task.Q @ x + u[k] * task.R[0, 0] * u[k]
    return total + cfg.rho * x @ x


def test_condensed_objective_matches_stage_sum(rng):
    """u'Pu + 2q'u equals the horizon cost up to a u-independent constant."""
    task = di_linear()
    cfg = MpcConfig(3, rho=2.0)
    x0 = np.array([1.0, -0.5])
    qp = condense(task, cfg, x0)
    c0 = stage_sum(task, cfg, x0, np.zeros(3))
    for _ in range(5):
        u = rng.standard_normal(3)
        assert u @ qp.P @ u + 2 * qp.q @ u == pytest.approx(stage_sum(task, cfg, x0, u) - c0, rel=1e-10)


def test_condensed_constraints_match_bounds(rng):
    task = di_linear()
    cfg = MpcConfig(3)
    x0 = np.array([2.0, 0.3])
    qp = condense(task, cfg, x0)
    Abar, Bbar = prediction_matrices(task.A, task.B, 3)
    for _ in range(20):
        u = rng.uniform(-1, 1, 3)
        xs = (Abar @ x0 + Bbar @ u).reshape(3, 2)
        feas = np.all((xs <= 5) & (xs >= -5)) and np.all(np.abs(u) <= 0.5)
        assert feas == bool(np.all(qp.H @ u + qp.b >= 0))


def test_replace_last_stage():
    task = di_linear()
    T = np.diag([3.0, 7.0])
    a = condense_structure(task, MpcConfig(2, terminal=T, replace_last_stage=True))
    b = condense_structure(task, MpcConfig(2, terminal=T - task.Q))
    assert a.P == pytest.approx(b.P, abs=1e-12)


@pytest.mark.parametrize("N", [1, 2, 3])
def test_condensing_matches_sparse_oracle(N):
    task = di_linear()
    for x0 in sample_invariant_states(task, 20, seed=N):
        u_ref = sparse_mpc_oracle(task, N, x0)
        for solver in ("pdhg", "dual-active-set"):
            u = mpc_control(task, MpcConfig(N, solver=solver, tol=1e-10), x0)
            assert np.abs(u - u_ref).max() <= 1e-6


def test_infeasible_raises_or_softens():
    task = di_linear()
    x0 = np.array([4.9, 4.9])
    with pytest.raises(InfeasibleMpcError):
        mpc_control(task, MpcConfig(3), x0)
    u = mpc_control(task, MpcConfig(3), x0, on_infeasible="soft")
    assert u == pytest.approx([-0.5])


def test_min_uniform_slack():
    H = np.array([[1.0], [-1.0]])
    assert min_uniform_slack(H, np.array([-2.0, -2.0])) == pytest.approx(2.0)
    assert min_uniform_slack(H, np.array([1.0, 1.0])) == pytest.approx(0.0)


def test_lqr_gain_matches_scipy():
    task = di_linear()
    X = sla.solve_discrete_are(task.A, task.B, task.Q, task.R)
    K_ref = -np.linalg.solve(task.R + task.B.T @ X @ task.B, task.B.T @ X @ task.A)
    assert lqr_gain(task) == pytest.approx(K_ref, abs=1e-8)


def test_lyapunov_matches_scipy():
    task = di_linear()
    K = np.array([[-0.2, -1.28]])
    Ac = task.A + task.B @ K
    ref = sla.solve_discrete_lyapunov(Ac.T, task.Q + K.T @ task.R @ K)
    assert lyapunov_cost_to_go(task, K) == pytest.approx(ref, rel=1e-10)


def test_lyapunov_rejects_unstable():
    with pytest.raises(ValueError):
        lyapunov_cost_to_go(di_linear(), np.zeros((1, 2)))


def test_task_validation():
    with pytest.raises(QpValidationError):
        LinearTask(np.eye(2), np.zeros((2, 1)), np.eye(2), np.eye(1), -1, 1, -1, 1)
    with pytest.raises(QpValidationError):
        MpcConfig(0)


def test_closed_loop_shapes():
    xs, us = closed_loop(di_linear(), MpcConfig(2, solver="dual-active-set"), [1.0, 0.0], 5)
    assert xs.shape == (6, 2) and us.shape == (5, 1)
