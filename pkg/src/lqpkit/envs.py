"""Benchmark environments, seeded trial streams and evaluation metrics.

All environments are simulated as a batch of independent trials.  Trial i
of a given base seed always draws its initial state, reference, model
perturbation and process noise from four separate generators, so every
controller sees the same realizations.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .mpc import LinearTask
from .polytope import Polytope

STREAM_INIT, STREAM_REF, STREAM_PERTURB, STREAM_NOISE = range(4)
GRAVITY = 9.8


def stream(base_seed: int, trial: int, stream_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(trial), int(stream_id)]))


@dataclass(frozen=True)
class RewardConfig:
    rho_pen: float = 1e5
    rho_sta: float = 50.0
    c1: float = 0.05
    c2: float = 2.0

    def __post_init__(self):
        if self.rho_pen < 0 or self.rho_sta < 0 or not self.c1 > 0:
            raise ValueError("need rho_pen >= 0, rho_sta >= 0, c1 > 0")


def shaping(l, cfg: RewardConfig):
    return cfg.rho_sta * np.exp(-cfg.c1 * (np.asarray(l) - cfg.c2))


def shaped_reward(l, violated, cfg: RewardConfig):
    """-l - rho_pen * violated + rho_sta * exp(-c1 (l - c2))."""
    return -np.asarray(l) - cfg.rho_pen * np.asarray(violated, dtype=float) + shaping(l, cfg)


# -- tasks ------------------------------------------------------------------

@dataclass
class Task:
    """A benchmark task; ``linear`` holds the nominal (or linearized) model."""
    name: str
    linear: LinearTask
    length: int
    tracking: bool
    noise_cov: np.ndarray
    x0_low: np.ndarray
    x0_high: np.ndarray
    ref_low: np.ndarray | None = None
    ref_high: np.ndarray | None = None
    x0_set: Polytope | None = None
    nonlinear: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def n_sys(self):
        return self.linear.n_sys

    @property
    def m_sys(self):
        return self.linear.m_sys

    @property
    def n_obs(self):
        return self.n_sys * (2 if self.tracking else 1)

    def sample_x0(self, rng):
        if self.x0_set is None:
            return rng.uniform(self.x0_low, self.x0_high)
        return self.x0_set.sample(rng, 1, self.x0_low, self.x0_high)[0]

    def sample_ref(self, rng):
        if not self.tracking:
            return np.zeros(self.n_sys)
        return rng.uniform(self.ref_low, self.ref_high)

    def sample_perturbation(self, rng):
        """Per-episode model change; a dict of arrays."""
        return {"dA": np.zeros((self.n_sys, self.n_sys)), "dB": np.zeros((self.n_sys, self.m_sys))}

    def zero_perturbation(self):
        return {"dA": np.zeros((self.n_sys, self.n_sys)), "dB": np.zeros((self.n_sys, self.m_sys))}

    def dynamics(self, x, u, pert):
        """Batched next state without noise; pert holds stacked per-trial arrays."""
        A = self.linear.A + pert["dA"]
        B = self.linear.B + pert["dB"]
        return np.einsum("kij,kj->ki", A, x) + np.einsum("kij,kj->ki", B, u)


class DoubleIntegrator(Task):
    def sample_perturbation(self, rng):
        d = rng.uniform(-0.05, 0.05, size=4)
        return {"dA": np.array([[d[0], d[1]], [0.0, d[2]]]), "dB": np.array([[0.0], [d[3]]])}


class QuadrupleTank(Task):
    def sample_perturbation(self, rng):
        d = 0.002 * rng.uniform(-1.0, 1.0, size=6)
        dA = np.array([[d[0], 0, d[2], 0], [0, d[1], 0, d[3]], [0, 0, -d[0], 0], [0, 0, 0, -d[1]]])
        dB = np.array([[8.3 * d[4], 0], [0, 6.2 * d[5]], [0, 6.2 * d[5]], [3 * d[4], 0]])
        return {"dA": dA, "dB": dB}


CARTPOLE_NOMINAL = {"m_c": 1.0, "m_p": 0.1, "l": 0.55}


def cartpole_dynamics(state, force, dt=0.1, params=None):
    """Semi-implicit Euler step of the cart-pole, batched over rows.

    params: dict with m_c, m_p, l (scalars or per-row arrays).
    """
    p = CARTPOLE_NOMINAL if params is None else params
    mc, mp, l = (np.asarray(p[k], dtype=float) for k in ("m_c", "m_p", "l"))
    if np.any(mc <= 0) or np.any(mp <= 0) or np.any(l <= 0):
        raise ValueError("cart-pole parameters must be positive")
    s = np.atleast_2d(np.asarray(state, dtype=float))
    u = np.asarray(force, dtype=float).reshape(s.shape[0])
    px, v, th, w = s.T
    ct, st = np.cos(th), np.sin(th)
    m11, m12, m22 = mc + mp, mp * l * ct, mp * l * l
    r1 = u + mp * l * st * w * w
    r2 = mp * GRAVITY * l * st
    det = m11 * m22 - m12 * m12
    if np.any(np.abs(det) < 1e-12):
        raise ValueError("singular mass matrix")
    acc = (m22 * r1 - m12 * r2) / det
    alpha = (m11 * r2 - m12 * r1) / det
    v2 = v + dt * acc
    w2 = w + dt * alpha
    out = np.stack([px + dt * v2, v2, th + dt * w2, w2], axis=1)
    return out if np.ndim(state) > 1 else out[0]


def cartpole_linearize(dt=0.1, params=None):
    """Jacobians (A, B) of the discrete step at the upright equilibrium."""
    p = CARTPOLE_NOMINAL if params is None else params
    mc, mp, l = p["m_c"], p["m_p"], p["l"]
    # continuous accelerations at theta = 0: M [a; alpha] = [u; mp g l theta]
    det = (mc + mp) * mp * l * l - (mp * l) ** 2
    da_dth = -(mp * l) * (mp * GRAVITY * l) / det
    dal_dth = (mc + mp) * (mp * GRAVITY * l) / det
    da_du = mp * l * l / det
    dal_du = -(mp * l) / det
    Ac = np.zeros((4, 4))
    Bc = np.zeros((4, 1))
    Ac[1, 2], Ac[3, 2] = da_dth, dal_dth
    Bc[1, 0], Bc[3, 0] = da_du, dal_du
    # semi-implicit Euler: v' = v + dt f, p' = p + dt v'
    A = np.eye(4)
    B = np.zeros((4, 1))
    for pos, vel in ((0, 1), (2, 3)):
        A[vel] += dt * Ac[vel]
        B[vel] += dt * Bc[vel]
        A[pos, vel] += dt
        A[pos] += dt * dt * Ac[vel]
        B[pos] += dt * dt * Bc[vel]
    return A, B


class Cartpole(Task):
    def sample_perturbation(self, rng):
        return {"m_c": rng.uniform(0.7, 1.3), "m_p": rng.uniform(0.07, 0.13), "l": rng.uniform(0.4, 0.7)}

    def zero_perturbation(self):
        return dict(CARTPOLE_NOMINAL)

    def sample_ref(self, rng):
        return np.array([rng.uniform(-2.0, 2.0), 0.0, 0.0, 0.0])

    def dynamics(self, x, u, pert):
        return cartpole_dynamics(x, u[:, 0], 0.1, pert)


def double_integrator(x0_set: Polytope | None = None) -> Task:
    if x0_set is None:
        from .golden import invariant_set
        x0_set = invariant_set()
    lin = LinearTask(A=[[1, 1], [0, 1]], B=[[0], [1]], Q=np.eye(2), R=[[100.0]],
                     x_min=[-5, -5], x_max=[5, 5], u_min=[-0.5], u_max=[0.5], name="double_integrator")
    return DoubleIntegrator("double_integrator", lin, 100, False, np.full(2, 0.05),
                            np.array([-5.0, -5.0]), np.array([5.0, 5.0]), x0_set=x0_set)


def quadruple_tank() -> Task:
    A = [[0.98, 0, 0.04, 0], [0, 0.99, 0, 0.03], [0, 0, 0.96, 0], [0, 0, 0, 0.97]]
    B = [[0.83, 0], [0, 0.62], [0, 0.47], [0.3, 0]]
    lin = LinearTask(A=A, B=B, Q=np.eye(4), R=0.1 * np.eye(2), x_min=np.zeros(4),
                     x_max=np.full(4, 20.0), u_min=np.zeros(2), u_max=np.full(2, 8.0),
                     name="quadruple_tank")
    return QuadrupleTank("quadruple_tank", lin, 500, True, np.full(4, 0.1), np.zeros(4),
                         np.full(4, 16.0), ref_low=np.zeros(4), ref_high=np.full(4, 20.0))


def cartpole() -> Task:
    A, B = cartpole_linearize()
    big = 1e6  # velocities are unconstrained
    lin = LinearTask(A=A, B=B, Q=np.diag([1, 1e-4, 1, 1e-4]), R=[[1e-4]],
                     x_min=[-2, -big, -0.5, -big], x_max=[2, big, 0.5, big], u_min=[-10],
                     u_max=[10], name="cartpole")
    return Cartpole("cartpole", lin, 100, True, np.array([0, 0.1, 0, 0.1]),
                    np.array([-1.8, -1, -0.1, -0.1]), np.array([1.8, 1, 0.1, 0.1]), nonlinear=True)


TASKS = {"double_integrator": double_integrator, "quadruple_tank": quadruple_tank,
         "cartpole": cartpole}


def make_task(name: str) -> Task:
    try:
        return TASKS[name]()
    except KeyError:
        raise KeyError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def load_task_config(path) -> Task:
    """Linear task from a JSON file.

    Keys: name, A, B, Q, R, x_min, x_max, u_min, u_max, length, tracking,
    x0_low, x0_high, optional ref_low/ref_high and noise_cov (diagonal).
    """
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if cfg.get("base") in TASKS:
        task = make_task(cfg["base"])
        for k in ("length",):
            if k in cfg:
                setattr(task, k, int(cfg[k]))
        return task
    lin = LinearTask(A=cfg["A"], B=cfg["B"], Q=cfg["Q"], R=cfg["R"], x_min=cfg["x_min"],
                     x_max=cfg["x_max"], u_min=cfg["u_min"], u_max=cfg["u_max"],
                     name=cfg.get("name", "linear"))
    n = lin.n_sys
    tracking = bool(cfg.get("tracking", False))
    return Task(cfg.get("name", "linear"), lin, int(cfg["length"]), tracking,
                np.asarray(cfg.get("noise_cov", np.zeros(n)), dtype=float),
                np.asarray(cfg["x0_low"], dtype=float), np.asarray(cfg["x0_high"], dtype=float),
                ref_low=np.asarray(cfg["ref_low"], dtype=float) if tracking else None,
                ref_high=np.asarray(cfg["ref_high"], dtype=float) if tracking else None)


# -- batched episodes ---------------------------------------------------------

@dataclass
class EnvState:
    x: np.ndarray          # (k, n)
    r: np.ndarray          # (k, n)
    pert: dict             # stacked per-trial perturbation arrays
    noise: np.ndarray      # (k, length, n)
    t: np.ndarray          # (k,) steps taken
    done: np.ndarray       # (k,)
    trials: np.ndarray     # (k,) trial indices


def _stack_pert(perts):
    return {k: np.array([p[k] for p in perts]) for k in perts[0]}


def reset(task: Task, trials, base_seed: int, perturb: bool = False) -> EnvState:
    trials = np.atleast_1d(np.asarray(trials, dtype=np.int64))
    n = task.n_sys
    xs, rs, perts = [], [], []
    noise = np.zeros((len(trials), task.length, n))
    std = np.sqrt(task.noise_cov)
    for j, i in enumerate(trials):
        xs.append(task.sample_x0(stream(base_seed, i, STREAM_INIT)))
        rs.append(task.sample_ref(stream(base_seed, i, STREAM_REF)))
        if perturb:
            perts.append(task.sample_perturbation(stream(base_seed, i, STREAM_PERTURB)))
            noise[j] = stream(base_seed, i, STREAM_NOISE).normal(size=(task.length, n)) * std
        else:
            perts.append(task.zero_perturbation())
    return EnvState(x=np.array(xs), r=np.array(rs), pert=_stack_pert(perts), noise=noise,
                    t=np.zeros(len(trials), dtype=np.int64), done=np.zeros(len(trials), bool),
                    trials=trials)


def observe(task: Task, st: EnvState):
    return np.hstack([st.x, st.r]) if task.tracking else st.x.copy()


def step(task: Task, st: EnvState, action, reward_cfg: RewardConfig = RewardConfig()):
    """Advance all trials; returns (next_state, reward, done, info).

    Trials already done are left untouched (reward 0).
    """
    lin = task.linear
    u = np.clip(np.asarray(action, dtype=float).reshape(len(st.x), lin.m_sys), lin.u_min, lin.u_max)
    live = ~st.done
    x_next = task.dynamics(st.x, u, st.pert)
    tt = np.minimum(st.t, task.length - 1)
    x_next = x_next + st.noise[np.arange(len(st.x)), tt]
    l = lin.stage_cost(x_next, u, st.r)
    violated = ~lin.in_bounds(x_next)
    reward = np.where(live, shaped_reward(l, violated, reward_cfg), 0.0)
    t = st.t + live
    done = st.done | (live & (violated | (t >= task.length)))
    x = np.where(live[:, None], x_next, st.x)
    nxt = EnvState(x=x, r=st.r, pert=st.pert, noise=st.noise, t=t, done=done, trials=st.trials)
    info = {"cost": np.where(live, l, 0.0), "violated": live & violated, "u": u, "live": live}
    return nxt, reward, done, info


# -- controllers and metrics ---------------------------------------------------

class Controller:
    """Maps a batch of observations to inputs; ``ok`` flags a usable answer."""
    name = "controller"

    def act(self, obs):
        raise NotImplementedError

    def flops_per_step(self):
        return 0

    def n_params(self):
        return 0


class ZeroController(Controller):
    name = "zero"

    def __init__(self, m_sys):
        self.m_sys = m_sys

    def act(self, obs):
        k = np.atleast_2d(obs).shape[0]
        return np.zeros((k, self.m_sys)), np.ones(k, bool)


@dataclass
class MetricsReport:
    controller: str
    task: str
    fail_pct: float
    cost: float
    p_cost: float
    flops: float
    n_trials: int
    base_seed: int
    n_params: int = 0
    total_cost: float = 0.0
    lengths: np.ndarray = field(default=None, repr=False)

    COLUMNS = ("controller", "task", "fail_pct", "cost", "p_cost", "flops", "n_params",
               "n_trials", "base_seed", "total_cost")

    def row(self):
        return [self.controller, self.task, f"{self.fail_pct:.6g}", f"{self.cost:.6g}",
                f"{self.p_cost:.6g}", f"{self.flops:.6g}", self.n_params, self.n_trials,
                self.base_seed, f"{self.total_cost:.6g}"]


def write_metrics_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsReport.COLUMNS)
        for rep in reports:
            w.writerow(rep.row())


def write_trajectories_csv(traj, n_sys, m_sys, path):
    """traj: list of (trial, step, x, u, cost) tuples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "step"] + [f"x{i}" for i in range(n_sys)]
                   + [f"u{i}" for i in range(m_sys)] + ["cost"])
        for trial, k, x, u, c in traj:
            w.writerow([trial, k] + [f"{v:.17g}" for v in x] + [f"{v:.17g}" for v in u] + [f"{c:.17g}"])


def evaluate(controller: Controller, task: Task, n_trials: int, base_seed: int, perturb: bool = False,
             rho_pen: float = 1e5, x0=None, record: bool = False, chunk: int = 1000):
    """Run seeded episodes and compute Fail%, Cost and P-Cost.

    A controller that reports ``ok = False`` for a trial (no feasible input)
    ends that trial as a failure at that step.  ``x0`` overrides the initial
    state of every trial.  With ``record`` the second return value lists
    (trial, step, x, u, cost) rows, step 0 holding the initial state.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    total_cost, total_steps, n_fail, n_viol = 0.0, 0, 0, 0
    lengths = np.zeros(n_trials, dtype=np.int64)
    traj = []
    for start in range(0, n_trials, chunk):
        trials = np.arange(start, min(n_trials, start + chunk))
        st = reset(task, trials, base_seed, perturb)
        if x0 is not None:
            st.x[:] = np.asarray(x0, dtype=float)
        if record:
            for j, i in enumerate(trials):
                traj.append((int(i), 0, st.x[j].copy(), np.full(task.m_sys, np.nan), 0.0))
        failed = np.zeros(len(trials), bool)
        while not st.done.all():
            live = ~st.done
            u = np.zeros((len(trials), task.m_sys))
            ok = np.ones(len(trials), bool)
            u[live], ok[live] = controller.act(observe(task, st)[live])
            bad = live & ~ok
            if bad.any():
                # infeasible controller: the step counts, as a violation
                st.t[bad] += 1
                st.done[bad] = True
                failed[bad] = True
                n_viol += int(bad.sum())
            st, _, _, info = step(task, st, u)
            total_cost += float(info["cost"].sum())
            n_viol += int(info["violated"].sum())
            failed |= info["violated"]
            if record:
                for j in np.flatnonzero(info["live"]):
                    traj.append((int(trials[j]), int(st.t[j]), st.x[j].copy(), info["u"][j].copy(),
                                 float(info["cost"][j])))
        lengths[trials] = st.t
        total_steps += int(st.t.sum())
        n_fail += int(np.sum(st.t < task.length))
    cost = total_cost / total_steps
    rep = MetricsReport(controller=getattr(controller, "name", "controller"), task=task.name,
                        fail_pct=100.0 * n_fail / n_trials, cost=cost,
                        p_cost=(total_cost + rho_pen * n_viol) / total_steps,
                        flops=float(controller.flops_per_step()), n_trials=n_trials,
                        base_seed=base_seed, n_params=int(controller.n_params()),
                        total_cost=total_cost, lengths=lengths)
    return (rep, traj) if record else rep
