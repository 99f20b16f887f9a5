"""Controllers that plug into :func:`lqpkit.envs.evaluate`."""
from __future__ import annotations

import numpy as np

from .envs import Controller, Task
from .mpc import (InfeasibleMpcError, MpcConfig, condense_structure, min_uniform_slack,
                  qp_flops, solve_condensed)
from .policy import PolicyParams, flops, forward, materialize
from .qp import StandardQp


def dual_active_set_flops(n, m, iters):
    """Dense estimate of a dual active-set solve: one constraint sweep per iteration."""
    return int(2 * m * n + iters * (2 * m * n + 6 * n * n))


class MpcController(Controller):
    """Receding-horizon condensed MPC on the task's nominal model.

    ``solver="dual-active-set"`` solves each QP exactly with a
    Goldfarb-Idnani routine; ``"pdhg"`` iterates PDHG to ``cfg.tol``.
    A trial whose MPC problem is infeasible is reported with ok = False.
    """

    def __init__(self, task: Task, cfg: MpcConfig, name=None):
        self.task, self.cfg = task, cfg
        self.cm = condense_structure(task.linear, cfg)
        self.name = name or (f"mpc({cfg.N})" if cfg.rho == 0 and cfg.terminal is None
                             else f"mpc-t({cfg.N},{cfg.rho:g})")
        self.step_flops = []
        n = self.cm.P.shape[0]
        Lc = np.linalg.cholesky(self.cm.P)
        # quadprog expects R^-1 with P = R'R when factorized
        self._Rinv = np.linalg.inv(Lc.T)
        self._Ct = np.ascontiguousarray(self.cm.H.T)
        self._n = n

    def _split(self, obs):
        n = self.task.n_sys
        obs = np.atleast_2d(obs)
        x = obs[:, :n]
        r = obs[:, n:2 * n] if self.task.tracking else np.zeros_like(x)
        return x, r

    def act(self, obs):
        import quadprog
        x, r = self._split(obs)
        lin = self.task.linear
        k = x.shape[0]
        u = np.zeros((k, lin.m_sys))
        ok = np.ones(k, bool)
        Q = self.cm.q(x, r)
        Bv = self.cm.b(x)
        n, m = self.cm.P.shape[0], self.cm.H.shape[0]
        cond = 2 * n * (x.shape[1] + r.shape[1]) + 2 * m * x.shape[1]
        for j in range(k):
            if self.cfg.solver == "dual-active-set":
                try:
                    sol = quadprog.solve_qp(self._Rinv, -Q[j], self._Ct, -Bv[j], 0, True)
                except ValueError:
                    ok[j] = False
                    self.step_flops.append(cond + dual_active_set_flops(n, m, 0))
                    continue
                y, iters = sol[0], int(sol[3][0])
                self.step_flops.append(cond + dual_active_set_flops(n, m, iters))
            else:
                qp = StandardQp(self.cm.P, Q[j], self.cm.H, Bv[j])
                if min_uniform_slack(qp.H, qp.b) > 1e-6:
                    ok[j] = False
                    self.step_flops.append(cond)
                    continue
                from .qp import solve_qp
                res = solve_qp(qp, alpha=self.cfg.alpha, beta=1.0, tol=self.cfg.tol,
                               max_iter=self.cfg.max_iter)
                y = res.y
                self.step_flops.append(cond + qp_flops(n, m, res.iters))
            u[j] = np.clip(y[:lin.m_sys], lin.u_min, lin.u_max)
        return u, ok

    def flops_per_step(self):
        return float(np.median(self.step_flops)) if self.step_flops else 0.0


class LqpController(Controller):
    def __init__(self, task: Task, params: PolicyParams, name=None):
        if params.n_obs != task.n_obs:
            raise ValueError("policy observation size does not match the task")
        self.task, self.params = task, params
        self.family = materialize(params)[0]
        self.name = name or f"lqp({params.n_qp},{params.m_qp})"

    def act(self, obs):
        lin = self.task.linear
        u, _ = forward(self.params, np.atleast_2d(obs), lin.u_min, lin.u_max, family=self.family)
        return u, np.ones(u.shape[0], bool)

    def flops_per_step(self):
        return flops(self.params)

    def n_params(self):
        return self.params.n_params()


__all__ = ["MpcController", "LqpController", "InfeasibleMpcError", "solve_condensed"]
