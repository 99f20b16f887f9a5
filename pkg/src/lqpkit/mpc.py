"""Condensed linear MPC, receding-horizon control and LQR utilities.

The finite-horizon problem

    min  sum_{k=1..N} (x_k - r)' Q (x_k - r) + u_{k-1}' R u_{k-1}
    s.t. x_{k+1} = A x_k + B u_k,  x_min <= x_k <= x_max,  u_min <= u_k <= u_max

is condensed onto the stacked input sequence y = (u_0, ..., u_{N-1}) and
written as ``min 1/2 y'Py + q'y  s.t.  Hy + b >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .qp import (InfeasibleError, QpValidationError, SlackConfig, StandardQp,
                 slacken, solve_qp)


class InfeasibleMpcError(InfeasibleError):
    """The condensed MPC problem has no feasible input sequence."""


def _spd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12 * (1 + np.abs(M).max())):
        raise QpValidationError(f"{name} must be square and symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise QpValidationError(f"{name} must be positive definite") from None
    return M


@dataclass(frozen=True)
class LinearTask:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    r: np.ndarray | None = None
    name: str = "linear"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        n, m = B.shape
        if A.shape != (n, n):
            raise QpValidationError(f"A must be {n}x{n}, got {A.shape}")
        Q, R = _spd(self.Q, "Q"), _spd(self.R, "R")
        if Q.shape != (n, n) or R.shape != (m, m):
            raise QpValidationError("Q/R dimensions do not match (A, B)")
        vec = lambda v, k, nm: np.broadcast_to(np.asarray(v, dtype=float), (k,)).copy()
        x_min, x_max = vec(self.x_min, n, "x_min"), vec(self.x_max, n, "x_max")
        u_min, u_max = vec(self.u_min, m, "u_min"), vec(self.u_max, m, "u_max")
        if np.any(x_min >= x_max) or np.any(u_min >= u_max):
            raise QpValidationError("bounds must satisfy min < max componentwise")
        r = np.zeros(n) if self.r is None else vec(self.r, n, "r")
        for arr in (A, B, Q, R, r):
            if not np.all(np.isfinite(arr)):
                raise QpValidationError("task data must be finite")
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if np.linalg.matrix_rank(ctrb) < n:
            raise QpValidationError("(A, B) is not controllable")
        for k, v in dict(A=A, B=B, Q=Q, R=R, x_min=x_min, x_max=x_max,
                         u_min=u_min, u_max=u_max, r=r).items():
            object.__setattr__(self, k, v)

    @property
    def n_sys(self) -> int:
        return self.A.shape[0]

    @property
    def m_sys(self) -> int:
        return self.B.shape[1]

    def stage_cost(self, x, u, r=None):
        """l(x, u) = (x - r)'Q(x - r) + u'Ru, row-wise for batches."""
        r = self.r if r is None else r
        e = np.asarray(x) - r
        u = np.asarray(u)
        return np.einsum("...i,ij,...j->...", e, self.Q, e) + np.einsum("...i,ij,...j->...", u, self.R, u)

    def in_bounds(self, x, tol=0.0):
        x = np.asarray(x)
        return np.all((x >= self.x_min - tol) & (x <= self.x_max + tol), axis=-1)


@dataclass(frozen=True)
class MpcConfig:
    """Horizon and terminal cost of a condensed MPC.

    The terminal weight on x_N is ``rho * I + terminal``.  With
    ``replace_last_stage`` the terminal weight takes the place of the last
    stage's Q instead of being added to it.
    """
    N: int
    rho: float = 0.0
    terminal: np.ndarray | None = None
    replace_last_stage: bool = False
    tol: float = 1e-9
    max_iter: int = 100_000
    alpha: float = 0.9
    solver: str = "pdhg"  # or "dual-active-set"

    def __post_init__(self):
        if int(self.N) < 1:
            raise QpValidationError("horizon N must be >= 1")
        if self.rho < 0:
            raise QpValidationError("terminal weight rho must be nonnegative")
        if self.solver not in ("pdhg", "dual-active-set"):
            raise QpValidationError(f"unknown solver {self.solver!r}")

    def terminal_matrix(self, n):
        T = self.rho * np.eye(n)
        if self.terminal is not None:
            T = T + np.asarray(self.terminal, dtype=float)
        return T


def prediction_matrices(A, B, N):
    """Stacked free response and forced response of x_1..x_N."""
    n, m = B.shape
    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(A @ powers[-1])
    Abar = np.vstack(powers[1:])
    Bbar = np.zeros((N * n, N * m))
    for i in range(N):
        for j in range(i + 1):
            Bbar[i * n:(i + 1) * n, j * m:(j + 1) * m] = powers[i - j] @ B
    return Abar, Bbar


@dataclass(frozen=True)
class CondensedMpc:
    """Observation-independent part of a condensed MPC.

    q = Wx x0 + Wr r and b = e + Wbx x0, so a whole batch of initial states
    shares P and H.
    """
    P: np.ndarray
    H: np.ndarray
    Wx: np.ndarray
    Wr: np.ndarray
    e: np.ndarray
    Wbx: np.ndarray
    n_sys: int
    m_sys: int
    N: int

    def q(self, x0, r):
        return np.asarray(x0) @ self.Wx.T + np.asarray(r) @ self.Wr.T

    def b(self, x0):
        return self.e + np.asarray(x0) @ self.Wbx.T

    def qp(self, x0, r) -> StandardQp:
        return StandardQp(self.P, self.q(x0, r), self.H, self.b(x0))


def condense_structure(task: LinearTask, cfg: MpcConfig) -> CondensedMpc:
    n, m, N = task.n_sys, task.m_sys, int(cfg.N)
    Abar, Bbar = prediction_matrices(task.A, task.B, N)
    Qblocks = [task.Q] * N
    T = cfg.terminal_matrix(n)
    Qblocks[-1] = T if cfg.replace_last_stage else task.Q + T
    Qbar = sla.block_diag(*Qblocks)
    Rbar = sla.block_diag(*([task.R] * N))
    # per step: x <= x_max, -x <= -x_min, u <= u_max, -u <= -u_min
    Ck = np.vstack([np.eye(n), -np.eye(n), np.zeros((2 * m, n))])
    Dk = np.vstack([np.zeros((2 * n, m)), np.eye(m), -np.eye(m)])
    ek = np.concatenate([task.x_max, -task.x_min, task.u_max, -task.u_min])
    C = np.kron(np.eye(N), Ck)
    D = np.kron(np.eye(N), Dk)
    e = np.tile(ek, N)

    P = Bbar.T @ Qbar @ Bbar + Rbar
    P = 0.5 * (P + P.T)
    BQ = Bbar.T @ Qbar
    Wx = BQ @ Abar
    Wr = -BQ @ np.tile(np.eye(n), (N, 1))
    H = -C @ Bbar - D
    Wbx = -C @ Abar
    return CondensedMpc(P=P, H=H, Wx=Wx, Wr=Wr, e=e, Wbx=Wbx, n_sys=n, m_sys=m, N=N)


def condense(task: LinearTask, cfg: MpcConfig, x0, r=None) -> StandardQp:
    x0 = np.asarray(x0, dtype=float)
    r = task.r if r is None else np.asarray(r, dtype=float)
    if x0.shape != (task.n_sys,) or r.shape != (task.n_sys,):
        raise QpValidationError("x0 and r must be n_sys vectors")
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(r))):
        raise QpValidationError("x0 and r must be finite")
    return condense_structure(task, cfg).qp(x0, r)


def _solve_dense(qp: StandardQp):
    """Exact solve with the Goldfarb-Idnani dual active-set method."""
    import quadprog
    try:
        y = quadprog.solve_qp(np.array(qp.P), -qp.q, np.array(qp.H.T), -qp.b, 0)[0]
    except ValueError as exc:
        if "constraints are inconsistent" in str(exc):
            raise InfeasibleMpcError("condensed MPC problem is infeasible") from None
        raise
    return y


def min_uniform_slack(H, b):
    """Smallest eps >= 0 such that Hy + b + eps >= 0 has a solution (LP)."""
    from scipy.optimize import linprog
    m, n = H.shape
    cost = np.zeros(n + 1)
    cost[-1] = 1.0
    A_ub = np.hstack([-H, -np.ones((m, 1))])
    bounds = [(None, None)] * n + [(0, None)]
    res = linprog(cost, A_ub=A_ub, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"slack probe failed: {res.message}")
    return float(res.x[-1])


def solve_condensed(qp: StandardQp, cfg: MpcConfig, slack_rho: float = 100.0):
    """Return (y, slack) for a condensed MPC QP.

    ``slack`` is 0 when the problem is feasible.  Otherwise it is the
    smallest uniform constraint softening that makes the problem feasible,
    and ``y`` is the minimizer of the softened problem.
    """
    if cfg.solver == "dual-active-set":
        try:
            return _solve_dense(qp), 0.0
        except InfeasibleMpcError:
            y = _solve_dense(slacken(qp, SlackConfig(slack_rho)))
            return y[:-1], min_uniform_slack(qp.H, qp.b)
    # probing first spares a full max_iter run on infeasible problems
    eps = min_uniform_slack(qp.H, qp.b)
    if eps <= 1e-6:
        res = solve_qp(qp, alpha=cfg.alpha, beta=1.0, tol=cfg.tol, max_iter=cfg.max_iter)
        return res.y, 0.0
    soft = slacken(qp, SlackConfig(slack_rho))
    sres = solve_qp(soft, alpha=cfg.alpha, beta=1.0, tol=cfg.tol, max_iter=cfg.max_iter)
    return sres.y[:-1], eps


def mpc_control(task: LinearTask, cfg: MpcConfig, x0, r=None, on_infeasible: str = "raise"):
    """First input of the condensed MPC, clipped to the input bounds.

    ``on_infeasible="raise"`` raises :class:`InfeasibleMpcError` when slack
    probing shows that no feasible input sequence exists; ``"soft"`` applies
    the softened solution instead.
    """
    qp = condense(task, cfg, x0, r)
    y, eps = solve_condensed(qp, cfg)
    if eps > 1e-6 and on_infeasible == "raise":
        raise InfeasibleMpcError(f"condensed MPC infeasible (slack {eps:.3g})")
    return np.clip(y[:task.m_sys], task.u_min, task.u_max)


def closed_loop(task: LinearTask, cfg: MpcConfig, x0, steps: int, r=None,
                on_infeasible: str = "soft"):
    """Nominal receding-horizon simulation; returns states (steps+1, n) and inputs."""
    x = np.asarray(x0, dtype=float)
    xs, us = [x], []
    for _ in range(steps):
        u = mpc_control(task, cfg, x, r, on_infeasible=on_infeasible)
        x = task.A @ x + task.B @ u
        xs.append(x)
        us.append(u)
    return np.array(xs), np.array(us)


def qp_flops(n_qp, m_qp, iters):
    """Operation count of ``iters`` PDHG iterations plus recovery (dense model)."""
    per_iter = 2 * m_qp * m_qp + 6 * m_qp
    return int(iters * per_iter + 2 * n_qp * m_qp + 2 * n_qp * n_qp + n_qp)


def lqr_gain(task: LinearTask, tol: float = 1e-12, max_iter: int = 100_000):
    """Infinite-horizon LQR gain K (u = Kx) by Riccati fixed-point iteration."""
    A, B, Q, R = task.A, task.B, task.Q, task.R
    X = Q.copy()
    for _ in range(max_iter):
        BtX = B.T @ X
        K = -np.linalg.solve(R + BtX @ B, BtX @ A)
        Xn = Q + A.T @ X @ (A + B @ K)
        Xn = 0.5 * (Xn + Xn.T)
        if np.abs(Xn - X).max() <= tol * max(1.0, np.abs(Xn).max()):
            X = Xn
            break
        X = Xn
    else:
        raise RuntimeError("Riccati iteration did not converge")
    BtX = B.T @ X
    return -np.linalg.solve(R + BtX @ B, BtX @ A)


def lyapunov_cost_to_go(task: LinearTask, K, tol: float = 1e-14, max_terms: int = 1_000_000):
    """P_f solving Ac' P_f Ac - P_f + Q + K'RK = 0 with Ac = A + BK (series)."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Ac = task.A + task.B @ K
    if np.max(np.abs(np.linalg.eigvals(Ac))) >= 1.0:
        raise ValueError("A + BK is not Schur stable")
    W = task.Q + K.T @ task.R @ K
    Pf = np.zeros_like(W)
    term = W
    for _ in range(max_terms):
        Pf = Pf + term
        if np.abs(term).max() < tol:
            break
        term = Ac.T @ term @ Ac
    return 0.5 * (Pf + Pf.T)
