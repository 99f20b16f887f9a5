"""PPO training of QP policies and MLP baselines, in plain numpy.

Clipped surrogate, GAE, linearly annealed learning rates, a diagonal
Gaussian around the deterministic policy output, and the residual
regularizer rho_res * l_res for QP policies.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .blocks import FormatError, read_blocks, write_block
from .envs import (Controller, RewardConfig, Task, evaluate, observe, reset, step)
from .policy import (PolicyParams, backward, flops, forward, init_params, materialize,
                     residual_loss)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class TrainConfig:
    epochs: int = 500
    n_envs: int = 256
    horizon_length: int = 32          # batch = n_envs * horizon_length
    minibatch_size: int = 2048
    mini_epochs: int = 1
    ppo_clip: float = 0.2
    gamma: float = 0.99
    gae_tau: float = 0.95
    actor_lr: tuple = (5e-4, 1e-6)
    critic_lr: tuple = (1e-3, 2e-6)
    rho_res: float = 1e-3
    entropy_coef: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 1.0
    critic_hidden: tuple = (128, 64, 32)
    log_std_init_frac: float = 0.3
    rho_pen: float = 1e5
    rho_sta: float = 50.0
    c1: float = 0.05
    c2: float = 2.0
    perturb: bool = False
    eval_every: int = 50
    eval_trials: int = 100
    policy_init: str = "default"

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.gae_tau <= 1):
            raise ValueError("gamma and gae_tau must lie in (0, 1]")
        if not self.ppo_clip > 0:
            raise ValueError("ppo_clip must be positive")
        self.actor_lr = tuple(self.actor_lr)
        self.critic_lr = tuple(self.critic_lr)
        self.critic_hidden = tuple(self.critic_hidden)

    @property
    def batch_size(self):
        return self.n_envs * self.horizon_length

    @property
    def reward(self):
        return RewardConfig(self.rho_pen, self.rho_sta, self.c1, self.c2)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def lr(self, which, epoch):
        start, end = self.actor_lr if which == "actor" else self.critic_lr
        frac = epoch / max(1, self.epochs - 1)
        return start + (end - start) * min(frac, 1.0)


# -- networks ------------------------------------------------------------------

def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


class DenseNet:
    """Fully connected ELU network with a linear output layer."""

    def __init__(self, sizes, rng=None, out_scale=1.0):
        rng = np.random.default_rng(rng)
        self.sizes = tuple(int(s) for s in sizes)
        self.params = {}
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = np.sqrt(1.0 / a) * (out_scale if i == len(self.sizes) - 2 else 1.0)
            self.params[f"W{i}"] = rng.normal(0.0, scale, size=(b, a))
            self.params[f"b{i}"] = np.zeros(b)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x):
        h = np.atleast_2d(x)
        cache = [h]
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"].T + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                cache.append(z)
                h = elu(z)
            else:
                h = z
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, g_out):
        grads = {}
        g = g_out
        h_in = cache[0]
        for i in range(self.n_layers - 1, -1, -1):
            h_prev = h_in if i == 0 else elu(cache[i])
            grads[f"W{i}"] = g.T @ h_prev
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[f"W{i}"]) * elu_grad(cache[i])
        return grads

    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def flops(self):
        total = 0
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            total += 2 * a * b + b + (b if i < self.n_layers - 1 else 0)
        return total


class GaussianHead:
    """State-independent diagonal Gaussian around the policy output."""

    def __init__(self, log_std):
        self.log_std = np.array(log_std, dtype=float)

    @property
    def std(self):
        return np.exp(self.log_std)

    def sample(self, mean, rng):
        return mean + self.std * rng.standard_normal(mean.shape)

    def log_prob(self, a, mean):
        z = (a - mean) / self.std
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) - 0.5 * mean.shape[-1] * LOG_2PI

    def entropy(self):
        return float(np.sum(self.log_std) + 0.5 * self.log_std.size * (1.0 + LOG_2PI))


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grads(grads: dict, max_norm: float):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


# -- actors --------------------------------------------------------------------

class LqpActor:
    kind = "lqp"

    def __init__(self, params: PolicyParams):
        self.params = params
        self.family = materialize(params)[0]

    def refresh(self):
        self.family = materialize(self.params)[0]

    def mean(self, obs):
        _, tr = forward(self.params, obs, family=self.family)
        return tr.u_raw, tr

    def grads(self, cache, g_mean, rho_res):
        return backward(self.params, cache, g_mean, rho_res, family=self.family, through_clip=False)

    def res_loss(self, cache):
        return residual_loss(self.family, cache)

    def param_dict(self):
        return self.params.blocks()

    def apply(self, grads, opt, lr):
        blocks = {k: getattr(self.params, k) for k in grads}
        opt.step(blocks, grads, lr)
        self.params.L_P_raw = np.tril(self.params.L_P_raw)
        self.refresh()


class MlpActor:
    kind = "mlp"

    def __init__(self, net: DenseNet):
        self.net = net

    def mean(self, obs):
        return self.net.forward(obs)

    def grads(self, cache, g_mean, rho_res):
        return self.net.backward(cache, g_mean)

    def res_loss(self, cache):
        return 0.0

    def param_dict(self):
        return self.net.params

    def apply(self, grads, opt, lr):
        opt.step(self.net.params, grads, lr)


class ActorController(Controller):
    """Deterministic (mean) action of a trained actor."""

    def __init__(self, actor, task: Task, name=None):
        self.actor, self.task = actor, task
        self.name = name or actor.kind

    def act(self, obs):
        mean, _ = self.actor.mean(np.atleast_2d(obs))
        lin = self.task.linear
        return np.clip(mean, lin.u_min, lin.u_max), np.ones(mean.shape[0], bool)

    def flops_per_step(self):
        if self.actor.kind == "lqp":
            return flops(self.actor.params)
        return self.actor.net.flops()

    def n_params(self):
        if self.actor.kind == "lqp":
            return self.actor.params.n_params()
        return self.actor.net.n_params()


# -- rollouts and advantages ------------------------------------------------------

def obs_scale(task: Task):
    lin = task.linear
    s = np.minimum((lin.x_max - lin.x_min) / 2.0, 10.0)
    return np.concatenate([s, s]) if task.tracking else s


class VecEnv:
    """Auto-resetting batch of training episodes."""

    def __init__(self, task: Task, n_envs: int, seed: int, perturb=False, reward=RewardConfig()):
        self.task, self.n, self.seed, self.perturb, self.reward = task, n_envs, seed, perturb, reward
        self.next_trial = n_envs
        self.state = reset(task, np.arange(n_envs), seed, perturb)

    def obs(self):
        return observe(self.task, self.state)

    def step(self, action):
        st, rew, done, info = step(self.task, self.state, action, self.reward)
        term = info["violated"].copy()
        final_obs = observe(self.task, st)
        idx = np.flatnonzero(done)
        if idx.size:
            fresh = reset(self.task, np.arange(self.next_trial, self.next_trial + idx.size),
                          self.seed, self.perturb)
            self.next_trial += idx.size
            for k in ("x", "r", "noise", "t", "done", "trials"):
                getattr(st, k)[idx] = getattr(fresh, k)
            for k in st.pert:
                st.pert[k][idx] = fresh.pert[k]
        self.state = st
        return rew, done, term, final_obs, info


@dataclass
class Dataset:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray     # (T, n)
    dones: np.ndarray       # episode ended after this step
    terms: np.ndarray       # ended by violation
    values: np.ndarray      # (T, n)
    next_values: np.ndarray # V of the successor state (before any reset)
    mean_cost: float = 0.0

    def __len__(self):
        return self.obs.shape[0] * self.obs.shape[1]


class ValueNorm:
    """Running mean / std of return targets; the critic predicts normalized values."""

    def __init__(self):
        self.mean, self.var, self.count = 0.0, 1.0, 1e-4

    def update(self, x):
        x = np.asarray(x, dtype=float).ravel()
        bm, bv, bc = x.mean(), x.var(), x.size
        delta = bm - self.mean
        tot = self.count + bc
        self.mean = self.mean + delta * bc / tot
        self.var = (self.var * self.count + bv * bc + delta * delta * self.count * bc / tot) / tot
        self.count = tot

    @property
    def std(self):
        return float(np.sqrt(max(self.var, 1e-8)))

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


def collect_rollouts(actor, critic, head: GaussianHead, venv: VecEnv, horizon: int, rng,
                     vnorm: ValueNorm, scale):
    T, n = horizon, venv.n
    d, m = venv.task.n_obs, venv.task.m_sys
    obs = np.zeros((T, n, d))
    acts = np.zeros((T, n, m))
    logp = np.zeros((T, n))
    rew = np.zeros((T, n))
    dones = np.zeros((T, n), bool)
    terms = np.zeros((T, n), bool)
    vals = np.zeros((T, n))
    nvals = np.zeros((T, n))
    costs = []
    for t in range(T):
        o = venv.obs()
        mean, _ = actor.mean(o)
        a = head.sample(mean, rng)
        obs[t], acts[t], logp[t] = o, a, head.log_prob(a, mean)
        vals[t] = vnorm.denormalize(critic(o / scale)[:, 0])
        r, done, term, final_obs, info = venv.step(a)
        rew[t], dones[t], terms[t] = r, done, term
        nvals[t] = vnorm.denormalize(critic(final_obs / scale)[:, 0])
        costs.append(info["cost"].mean())
    return Dataset(obs, acts, logp, rew, dones, terms, vals, nvals, float(np.mean(costs)))


def gae_advantages(rewards, values, next_values, dones, terms, gamma, tau):
    """GAE over a (T, n) rollout.

    The successor value is bootstrapped unless the step ended by a
    violation; the recursion is cut at every episode end.
    """
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        boot = np.where(terms[t], 0.0, next_values[t])
        delta = rewards[t] + gamma * boot - values[t]
        last = delta + gamma * tau * (1.0 - dones[t]) * last
        adv[t] = last
    return adv, adv + values


def normalize_advantages(adv):
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_losses(logp_new, logp_old, adv, clip):
    """Clipped surrogate (to minimize) and its gradient w.r.t. logp_new."""
    ratio = np.exp(logp_new - logp_old)
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    loss = -np.mean(np.minimum(s1, s2))
    active = s1 <= s2   # unclipped branch carries the gradient
    g = -np.where(active, ratio * adv, 0.0) / len(adv)
    return loss, g, ratio


def ppo_update(actor, critic: DenseNet, head: GaussianHead, data: Dataset, adv, returns,
               cfg: TrainConfig, epoch, opt_a: Adam, opt_c: Adam, opt_h: Adam, rng,
               vnorm: ValueNorm, scale):
    n_tot = len(data)
    obs = data.obs.reshape(n_tot, -1)
    acts = data.actions.reshape(n_tot, -1)
    logp_old = data.logp.reshape(n_tot)
    adv = normalize_advantages(adv.reshape(n_tot))
    vnorm.update(returns)
    targets = vnorm.normalize(returns.reshape(n_tot))
    lr_a, lr_c = cfg.lr("actor", epoch), cfg.lr("critic", epoch)
    report = {"policy_loss": [], "value_loss": [], "res_loss": [], "ratio_dev": []}
    mb = min(cfg.minibatch_size, n_tot)
    for _ in range(cfg.mini_epochs):
        perm = rng.permutation(n_tot)
        for s in range(0, n_tot - mb + 1, mb):
            idx = perm[s:s + mb]
            mean, cache = actor.mean(obs[idx])
            std = head.std
            diff = acts[idx] - mean
            lp = head.log_prob(acts[idx], mean)
            loss, g_lp, ratio = ppo_losses(lp, logp_old[idx], adv[idx], cfg.ppo_clip)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite policy loss at epoch {epoch}")
            g_mean = g_lp[:, None] * diff / (std * std)
            g_logstd = np.sum(g_lp[:, None] * ((diff / std) ** 2 - 1.0), axis=0)
            g_logstd -= cfg.entropy_coef
            ga = actor.grads(cache, g_mean, cfg.rho_res)
            ga, _ = clip_grads(ga, cfg.max_grad_norm)
            actor.apply(ga, opt_a, lr_a)
            hp = {"log_std": head.log_std}
            opt_h.step(hp, {"log_std": g_logstd}, lr_a)
            head.log_std = hp["log_std"]

            v, vc = critic.forward(obs[idx] / scale)
            err = v[:, 0] - targets[idx]
            gc = critic.backward(vc, (2.0 * err / len(idx))[:, None])
            gc, _ = clip_grads(gc, cfg.max_grad_norm)
            opt_c.step(critic.params, gc, lr_c)
            report["policy_loss"].append(loss)
            report["value_loss"].append(float(np.mean(err * err)))
            report["res_loss"].append(actor.res_loss(cache))
            report["ratio_dev"].append(float(np.abs(ratio - 1).max()))
    return {k: float(np.mean(v)) for k, v in report.items()}


# -- training loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    actor: object
    head: GaussianHead
    critic: DenseNet
    log: list = field(default_factory=list)


def parse_arch(arch: str):
    """'lqp:4,24' -> ('lqp', (4, 24)); 'mlp:32' -> ('mlp', (32,))."""
    kind, _, dims = arch.partition(":")
    vals = tuple(int(v) for v in dims.split(",")) if dims else ()
    if kind == "lqp" and len(vals) == 2:
        return kind, vals
    if kind == "mlp" and len(vals) == 1:
        return kind, vals
    raise ValueError(f"bad architecture string {arch!r}")


def make_actor(task: Task, arch: str, rng, n_iter=10, alpha=1.0, rho_eps=10.0, init="default"):
    kind, dims = parse_arch(arch)
    if kind == "lqp":
        n_ref = task.n_sys if task.tracking else 0
        p = init_params(task.n_sys, task.m_sys, dims[0], dims[1], n_ref=n_ref, n_iter=n_iter,
                        alpha=alpha, rho_eps=rho_eps, rng=rng, init=init)
        return LqpActor(p)
    n = dims[0]
    return MlpActor(DenseNet([task.n_obs, 4 * n, 2 * n, n, task.m_sys], rng, out_scale=0.01))


def initial_state(task: Task, arch: str, cfg: TrainConfig, base_seed: int):
    """(rng, actor, head, critic) exactly as ``train`` starts from them."""
    rng = np.random.default_rng(np.random.SeedSequence([int(base_seed), 1234]))
    actor = make_actor(task, arch, rng, init=cfg.policy_init)
    lin = task.linear
    head = GaussianHead(np.log(cfg.log_std_init_frac * (lin.u_max - lin.u_min) / 2.0))
    critic = DenseNet([task.n_obs, *cfg.critic_hidden, 1], rng)
    return rng, actor, head, critic


def train(task: Task, arch: str, cfg: TrainConfig, base_seed: int, log_path=None, progress=None):
    rng, actor, head, critic = initial_state(task, arch, cfg, base_seed)
    result = TrainResult(actor, head, critic)
    if cfg.epochs == 0:
        return result
    scale = obs_scale(task)
    venv = VecEnv(task, cfg.n_envs, seed=int(base_seed) + 1_000_003, perturb=cfg.perturb,
                  reward=cfg.reward)
    opt_a = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt_c = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt_h = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    vnorm = ValueNorm()
    for epoch in range(cfg.epochs):
        data = collect_rollouts(actor, critic, head, venv, cfg.horizon_length, rng, vnorm, scale)
        adv, ret = gae_advantages(data.rewards, data.values, data.next_values, data.dones,
                                  data.terms, cfg.gamma, cfg.gae_tau)
        rep = ppo_update(actor, critic, head, data, adv, ret, cfg, epoch, opt_a, opt_c, opt_h,
                         rng, vnorm, scale)
        row = {"epoch": epoch, "mean_reward": float(data.rewards.mean()),
               "res_loss": rep["res_loss"], "eval_fail_pct": "", "eval_cost": ""}
        last = epoch == cfg.epochs - 1
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or last):
            ev = evaluate(ActorController(actor, task), task, cfg.eval_trials,
                          base_seed=int(base_seed) + 7, perturb=cfg.perturb, rho_pen=cfg.rho_pen)
            row["eval_fail_pct"], row["eval_cost"] = ev.fail_pct, ev.cost
        result.log.append(row)
        if progress is not None:
            progress(row)
    if log_path is not None:
        write_log(result.log, log_path)
    return result


LOG_COLUMNS = ("epoch", "mean_reward", "res_loss", "eval_fail_pct", "eval_cost")


def write_log(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in LOG_COLUMNS})


# -- MLP checkpoints ------------------------------------------------------------------

def mlp_dumps(net: DenseNet) -> str:
    lines = [f"MLPv1 {len(net.sizes)} " + " ".join(str(s) for s in net.sizes) + " elu"]
    for i in range(net.n_layers):
        write_block(lines, f"W{i}", net.params[f"W{i}"])
        write_block(lines, f"b{i}", net.params[f"b{i}"])
    return "\n".join(lines) + "\n"


def mlp_loads(text: str) -> DenseNet:
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) < 3 or head[0] != "MLPv1":
        raise FormatError("not an MLPv1 checkpoint")
    try:
        k = int(head[1])
        sizes = [int(v) for v in head[2:2 + k]]
    except ValueError:
        raise FormatError("bad MLPv1 header") from None
    if len(head) != 3 + k or head[-1] != "elu":
        raise FormatError("bad MLPv1 header")
    blk = read_blocks(lines, 1)
    net = DenseNet(sizes, rng=0)
    for i in range(net.n_layers):
        W, b = blk.get(f"W{i}"), blk.get(f"b{i}")
        if W is None or b is None or W.shape != net.params[f"W{i}"].shape or b.shape[1] != sizes[i + 1]:
            raise FormatError(f"layer {i} missing or misshaped")
        net.params[f"W{i}"] = W
        net.params[f"b{i}"] = b[0]
    return net


def save_mlp(net: DenseNet, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(mlp_dumps(net))


def load_mlp(path) -> DenseNet:
    with open(path, encoding="utf-8") as fh:
        return mlp_loads(fh.read())


__all__ = ["TrainConfig", "DenseNet", "GaussianHead", "Adam", "LqpActor", "MlpActor",
           "ActorController", "collect_rollouts", "gae_advantages", "ppo_update", "train",
           "mlp_dumps", "mlp_loads", "save_mlp", "load_mlp"]
