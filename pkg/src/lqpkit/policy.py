"""The learned QP controller.

Given an observation o (the state, followed by the reference for tracking
tasks) the policy forms

    min 1/2 y'Py + q'y   s.t.  Hy + b >= 0,   q = W_q o,  b = W_b o + b_b,

runs a fixed number of PDHG iterations from (0, 0), recovers y and applies
its first m_sys entries.  P = L L' with a softplus diagonal on L, and a
penalized scalar slack keeps the QP feasible for every parameter value.

Everything is batched over rows of ``obs``.  The backward pass is written
out by hand (reverse mode through the unrolled iterations).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.special import expit

from .blocks import FormatError, fmt, read_blocks, write_block
from .qp import PdhgOperator, QpValidationError, StandardQp, recovery_delta, solve_qp

BLOCKS = ("L_P_raw", "H", "W_q", "W_b", "b_b")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass
class PolicyParams:
    """Learnable tuple of the QP policy.

    In ``symmetric_mode`` the block ``H`` stores H_hat and the constraint set
    is -1 <= H_hat y <= 1, i.e. H = [H_hat; -H_hat], W_b = 0, b_b = 1 (those
    two blocks are then fixed).  ``rho_eps = 0`` means the stored matrices
    are used as they are, without appending a slack variable.
    """
    L_P_raw: np.ndarray
    H: np.ndarray
    W_q: np.ndarray
    W_b: np.ndarray
    b_b: np.ndarray
    n_sys: int
    m_sys: int
    n_ref: int = 0
    n_iter: int = 10
    alpha: float = 1.0
    rho_eps: float = 10.0
    symmetric_mode: bool = False

    def __post_init__(self):
        for k in BLOCKS:
            setattr(self, k, np.array(getattr(self, k), dtype=float))
        n = self.L_P_raw.shape[0]
        if self.L_P_raw.shape != (n, n):
            raise QpValidationError("L_P_raw must be square")
        if self.H.shape[1] != n or self.W_q.shape != (n, self.n_obs):
            raise QpValidationError("H / W_q dimensions do not match L_P_raw")
        m = self.m_qp
        if self.W_b.shape != (m, self.n_obs) or self.b_b.shape != (m,):
            raise QpValidationError("W_b / b_b dimensions do not match H")
        if self.m_sys > n:
            raise QpValidationError("m_sys cannot exceed n_qp")
        if self.rho_eps < 0 or self.n_iter < 0:
            raise QpValidationError("rho_eps and n_iter must be nonnegative")
        for k in BLOCKS:
            if not np.all(np.isfinite(getattr(self, k))):
                raise QpValidationError(f"parameter block {k} is not finite")

    @property
    def n_obs(self) -> int:
        return self.n_sys + self.n_ref

    @property
    def n_qp(self) -> int:
        return self.L_P_raw.shape[0]

    @property
    def m_qp(self) -> int:
        return 2 * self.H.shape[0] if self.symmetric_mode else self.H.shape[0]

    def blocks(self) -> dict:
        return {k: getattr(self, k) for k in BLOCKS}

    def copy(self, **changes) -> "PolicyParams":
        fields = {k: v.copy() for k, v in self.blocks().items()}
        fields.update(changes)
        return replace(self, **fields)

    def n_params(self) -> int:
        """Learnable entries: W_q, W_b, b_b, lower triangle of L_P and H."""
        n = self.n_qp
        count = self.W_q.size + n * (n + 1) // 2 + self.H.size
        if not self.symmetric_mode:
            count += self.W_b.size + self.b_b.size
        return count


def init_params(n_sys, m_sys, n_qp, m_qp, n_ref=0, n_iter=10, alpha=1.0, rho_eps=10.0,
                rng=None, symmetric_mode=False, init="default") -> PolicyParams:
    """Random initial parameters.

    ``init="default"``: H and W_b uniform in +-1/sqrt(fan_in), W_q small and
    b_b = 1, so the origin maps to y = 0 while the constraint set still
    moves with the observation.  ``"small"`` also shrinks W_b, which makes
    the initial QP nearly unconstrained (y = 0 is almost exactly optimal).
    """
    rng = np.random.default_rng(rng)
    d = n_sys + n_ref
    h_rows = m_qp // 2 if symmetric_mode else m_qp
    H = rng.uniform(-1.0, 1.0, size=(h_rows, n_qp)) / np.sqrt(n_qp)
    W_q = rng.uniform(-0.01, 0.01, size=(n_qp, d))
    if init == "default":
        W_b = rng.uniform(-1.0, 1.0, size=(m_qp, d)) / np.sqrt(d)
    elif init == "small":
        W_b = rng.uniform(-0.01, 0.01, size=(m_qp, d))
    else:
        raise ValueError(f"unknown init {init!r}")
    b_b = np.ones(m_qp)
    if symmetric_mode:
        W_b = np.zeros((m_qp, d))
    return PolicyParams(np.zeros((n_qp, n_qp)), H, W_q, W_b, b_b, n_sys=n_sys, m_sys=m_sys,
                        n_ref=n_ref, n_iter=n_iter, alpha=alpha, rho_eps=rho_eps,
                        symmetric_mode=symmetric_mode)


@dataclass(frozen=True)
class QpFamily:
    """Materialized QP family; q and b (and mu) are affine in the observation."""
    L: np.ndarray          # factor of P (slack row/col appended if any)
    P: np.ndarray
    H: np.ndarray
    Wq: np.ndarray
    Wb: np.ndarray
    bb: np.ndarray
    Pinv: np.ndarray
    F: np.ndarray
    M_mu: np.ndarray       # mu = obs @ M_mu.T + mu0
    mu0: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    delta: float
    slack: bool
    n_base: int            # n_qp before slack
    m_base: int

    def q(self, obs):
        return obs @ self.Wq.T

    def b(self, obs):
        return obs @ self.Wb.T + self.bb

    def standard_qp(self, obs) -> StandardQp:
        obs = np.asarray(obs, dtype=float)
        return StandardQp(self.P, self.q(obs), self.H, self.b(obs))


def _expanded(params: PolicyParams):
    """(L, H, W_b, b_b) with symmetric mode unfolded, before slack."""
    Lt = np.tril(params.L_P_raw, -1) + np.diag(softplus(np.diag(params.L_P_raw)))
    if params.symmetric_mode:
        H = np.vstack([params.H, -params.H])
        Wb = np.zeros((params.m_qp, params.n_obs))
        bb = np.ones(params.m_qp)
    else:
        H, Wb, bb = params.H, params.W_b, params.b_b
    return Lt, H, Wb, bb


def materialize(params: PolicyParams):
    """Return (family, operator) for the QP the policy actually runs."""
    Lt, H, Wb, bb = _expanded(params)
    n, m, d = params.n_qp, params.m_qp, params.n_obs
    Wq = params.W_q
    slack = params.rho_eps > 0
    if slack:
        Ls = np.zeros((n + 1, n + 1))
        Ls[:n, :n] = Lt
        Ls[n, n] = np.sqrt(2.0 * params.rho_eps)
        Hs = np.zeros((m + 1, n + 1))
        Hs[:m, :n] = H
        Hs[:, n] = 1.0
        Lt, H = Ls, Hs
        Wq = np.vstack([Wq, np.zeros((1, d))])
        Wb = np.vstack([Wb, np.zeros((1, d))])
        bb = np.append(bb, 0.0)
    P = Lt @ Lt.T
    nn, mm = P.shape[0], H.shape[0]
    Pinv = sla.cho_solve((Lt, True), np.eye(nn))
    Pinv = 0.5 * (Pinv + Pinv.T)
    PiHt = Pinv @ H.T
    S = H @ PiHt
    S = 0.5 * (S + S.T)
    F = sla.cho_solve(sla.cho_factor(np.eye(mm) + S, lower=True), np.eye(mm))
    F = 0.5 * (F + F.T)
    M_mu = F @ (PiHt.T @ Wq - Wb)
    mu0 = -F @ bb
    delta = recovery_delta(float(np.trace(S)), mm)
    if mm <= nn:
        G2 = sla.cho_solve(sla.cho_factor(S + delta * np.eye(mm), lower=True), PiHt.T).T
    else:
        G2 = sla.cho_solve(sla.cho_factor(H.T @ H + delta * P, lower=True), H.T)
    G1 = -Pinv + G2 @ PiHt.T
    fam = QpFamily(L=Lt, P=P, H=H, Wq=Wq, Wb=Wb, bb=bb, Pinv=Pinv, F=F, M_mu=M_mu, mu0=mu0,
                   G1=G1, G2=G2, delta=delta, slack=slack, n_base=n, m_base=m)
    op = PdhgOperator(F=F, mu=mu0, alpha=float(params.alpha), beta=1.0,
                      recovery_G1=G1, recovery_G2=G2, delta=delta)
    return fam, op


@dataclass
class ForwardTrace:
    obs: np.ndarray
    q: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    zs: list            # z^0 .. z^n_iter, each (k, m)
    lams: list
    masks: list         # pre-activation > 0 at steps 1..n_iter
    y: np.ndarray
    u_raw: np.ndarray
    u: np.ndarray
    clip_mask: np.ndarray
    single: bool = False
    n_iter: int = field(default=0)

    @property
    def z(self):
        return self.zs[-1]

    @property
    def lam(self):
        return self.lams[-1]


def forward(params: PolicyParams, obs, u_min=None, u_max=None, family=None):
    """Unrolled policy evaluation.  Returns (u0, trace); u0 clipped if bounds given."""
    fam = materialize(params)[0] if family is None else family
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    obs = np.atleast_2d(obs)
    if obs.shape[1] != params.n_obs:
        raise QpValidationError(f"observation must have {params.n_obs} entries")
    q, b = fam.q(obs), fam.b(obs)
    mu = obs @ fam.M_mu.T + fam.mu0
    k, m = obs.shape[0], fam.H.shape[0]
    a = float(params.alpha)
    z, lam = np.zeros((k, m)), np.zeros((k, m))
    zs, lams, masks = [z], [lam], []
    for _ in range(params.n_iter):
        lam_new = (z + lam) @ fam.F + mu
        s = z + a * lam - 2.0 * a * lam_new
        mask = s > 0
        z = np.where(mask, s, 0.0)
        lam = lam_new
        zs.append(z)
        lams.append(lam)
        masks.append(mask)
    y = q @ fam.G1.T + (z - b) @ fam.G2.T
    u_raw = y[:, :params.m_sys]
    lo = -np.inf if u_min is None else np.asarray(u_min, dtype=float)
    hi = np.inf if u_max is None else np.asarray(u_max, dtype=float)
    u = np.clip(u_raw, lo, hi)
    clip_mask = (u_raw >= lo) & (u_raw <= hi)
    tr = ForwardTrace(obs=obs, q=q, b=b, mu=mu, zs=zs, lams=lams, masks=masks, y=y,
                      u_raw=u_raw, u=u, clip_mask=clip_mask, single=single, n_iter=params.n_iter)
    return (u[0] if single else u), tr


def policy_residuals(family: QpFamily, trace: ForwardTrace):
    """Row-wise primal and dual residuals of the final iterate."""
    rp = trace.y @ family.H.T + trace.b - trace.z
    rd = trace.y @ family.P + trace.q - trace.lam @ family.H
    return rp, rd


def residual_loss(family: QpFamily, trace: ForwardTrace) -> float:
    """Batch mean of |r_prim|^2 + |r_dual|^2 at the last iterate."""
    rp, rd = policy_residuals(family, trace)
    if rp.shape[0] == 0:
        raise ValueError("empty batch")
    return float((np.sum(rp * rp) + np.sum(rd * rd)) / rp.shape[0])


def backward(params: PolicyParams, trace: ForwardTrace, grad_u0, residual_grad_scale: float = 0.0,
             family=None, through_clip: bool = True) -> dict:
    """Gradient of  sum(grad_u0 * u0) + residual_grad_scale * residual_loss.

    ``through_clip=False`` differentiates the unclipped output (used when the
    output is the mean of an exploration distribution).  Returns a dict of
    arrays keyed like :meth:`PolicyParams.blocks`.
    """
    fam = materialize(params)[0] if family is None else family
    if trace.n_iter != params.n_iter or trace.y.shape[1] != fam.P.shape[0]:
        raise ValueError("trace was not produced with these parameters")
    obs, q, b = trace.obs, trace.q, trace.b
    k = obs.shape[0]
    P, H, Pi, F = fam.P, fam.H, fam.Pinv, fam.F
    nn, mm = P.shape[0], H.shape[0]
    a = float(params.alpha)
    z, lam, y = trace.z, trace.lam, trace.y

    gy = np.zeros_like(y)
    gu = np.asarray(grad_u0, dtype=float).reshape(k, params.m_sys)
    if through_clip:
        gu = gu * trace.clip_mask
    gy[:, :params.m_sys] = gu
    gq = np.zeros_like(q)
    gb = np.zeros_like(b)
    gz = np.zeros_like(z)
    glam = np.zeros_like(lam)
    gP = np.zeros((nn, nn))
    gPi = np.zeros((nn, nn))
    gH = np.zeros((mm, nn))
    gF = np.zeros((mm, mm))

    if residual_grad_scale:
        rp, rd = policy_residuals(fam, trace)
        c = 2.0 * residual_grad_scale / k
        g_rp, g_rd = c * rp, c * rd
        gy += g_rp @ H + g_rd @ P
        gH += g_rp.T @ y - lam.T @ g_rd
        gb += g_rp
        gz -= g_rp
        gP += g_rd.T @ y
        gq += g_rd
        glam -= g_rd @ H.T

    # recovery: y = -q Pi + w G2', w = z - b + q Pi H'
    PiHt = Pi @ H.T
    w = z - b + q @ PiHt
    gq -= gy @ Pi
    gPi -= q.T @ gy
    g_delta = 0.0
    if mm <= nn:
        T = H @ PiHt + fam.delta * np.eye(mm)
        Ti = sla.cho_solve(sla.cho_factor(T, lower=True), np.eye(mm))
        a_ = w @ Ti
        g_a = gy @ PiHt
        gH += a_.T @ gy @ Pi
        gPi += (a_ @ H).T @ gy
        g_w = g_a @ Ti
        gT = -Ti @ (w.T @ g_a) @ Ti
        g_delta += np.trace(gT)
        gS = gT
    else:
        K = H.T @ H + fam.delta * P
        Ki = sla.cho_solve(sla.cho_factor(K, lower=True), np.eye(nn))
        v = w @ H
        g_v = gy @ Ki
        gK = -Ki @ (v.T @ gy) @ Ki
        g_w = g_v @ H.T
        gH += w.T @ g_v + H @ (gK + gK.T)
        g_delta += np.sum(gK * P)
        gP += fam.delta * gK
        gS = np.zeros((mm, mm))
    gz += g_w
    gb -= g_w
    gq += g_w @ PiHt.T
    gPi += q.T @ g_w @ H
    gH += g_w.T @ q @ Pi
    # delta = 1e-8 tr(S) / m (constant once floored)
    if 1e-8 * np.trace(H @ PiHt) / mm > 1e-12:
        gS = gS + (1e-8 / mm) * g_delta * np.eye(mm)

    # unrolled iterations, last to first
    gmu = np.zeros_like(trace.mu)
    for i in range(params.n_iter, 0, -1):
        gs = gz * trace.masks[i - 1]
        g_ln = glam - 2.0 * a * gs       # total gradient of lam^i
        zp, lp = trace.zs[i - 1], trace.lams[i - 1]
        gmu += g_ln
        gF += (zp + lp).T @ g_ln
        back = g_ln @ F
        gz = gs + back
        glam = a * gs + back

    # mu = (q Pi H' - b) F
    vmu = q @ PiHt - b
    gF += vmu.T @ gmu
    g_vmu = gmu @ F
    gq += g_vmu @ PiHt.T
    gPi += q.T @ g_vmu @ H
    gH += g_vmu.T @ q @ Pi
    gb -= g_vmu

    # F = (I + S)^-1, S = H Pi H'
    gS = gS - F @ gF @ F
    gH += (gS + gS.T) @ H @ Pi
    gPi += H.T @ gS @ H
    gP -= Pi @ gPi @ Pi

    # q = obs Wq', b = obs Wb' + bb
    gWq = gq.T @ obs
    gWb = gb.T @ obs
    gbb = gb.sum(axis=0)

    n, m = fam.n_base, fam.m_base
    gL = (gP + gP.T) @ fam.L
    gL = gL[:n, :n]
    gH = gH[:m, :n]
    gWq, gWb, gbb = gWq[:n], gWb[:m], gbb[:m]

    gLraw = np.tril(gL, -1)
    d = np.diag(params.L_P_raw)
    gLraw[np.diag_indices(n)] = np.diag(gL) * expit(d)
    out = {"L_P_raw": gLraw, "W_q": gWq}
    if params.symmetric_mode:
        h = params.H.shape[0]
        out["H"] = gH[:h] - gH[h:]
        out["W_b"] = np.zeros_like(params.W_b)
        out["b_b"] = np.zeros_like(params.b_b)
    else:
        out["H"], out["W_b"], out["b_b"] = gH, gWb, gbb
    return out


def solve_policy_qp(params: PolicyParams, obs, tol: float = 1e-10, alpha: float = 0.9,
                    max_iter: int = 200_000, family=None):
    """Run the policy's QP to convergence instead of n_iter steps (single obs)."""
    fam = materialize(params)[0] if family is None else family
    return solve_qp(fam.standard_qp(obs), alpha=alpha, beta=1.0, tol=tol, max_iter=max_iter)


def solve_policy_batch(params: PolicyParams, obs, tol: float = 1e-10, alpha: float = 0.9,
                       max_iter: int = 200_000, check_every: int = 20, family=None):
    """Batched run-to-convergence of the policy QP.

    Returns (y, z, lam, converged, iters).  Rows stop iterating once both
    residual norms are below ``tol``; ``iters`` is per row.
    """
    if not 0 < alpha < 1:
        raise QpValidationError("convergence mode requires 0 < alpha < 1")
    fam = materialize(params)[0] if family is None else family
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    k, m = obs.shape[0], fam.H.shape[0]
    q, b = fam.q(obs), fam.b(obs)
    mu = obs @ fam.M_mu.T + fam.mu0
    y_off = q @ fam.G1.T - b @ fam.G2.T
    F, H, P, G2 = fam.F, fam.H, fam.P, fam.G2

    def recover(z, rows):
        y = z @ G2.T + y_off[rows]
        return y + (z - b[rows] - y @ H.T) @ G2.T

    z, lam = np.zeros((k, m)), np.zeros((k, m))
    iters = np.full(k, max_iter)
    converged = np.zeros(k, bool)
    active = np.arange(k)
    za, la, mua = z, lam, mu
    i = 0
    while i < max_iter and active.size:
        steps = min(check_every, max_iter - i)
        for _ in range(steps):
            ln = (za + la) @ F + mua
            za = np.maximum(za + alpha * la - 2.0 * alpha * ln, 0.0)
            la = ln
        i += steps
        y = recover(za, active)
        rp = y @ H.T + b[active] - za
        rd = y @ P + q[active] - la @ H
        done = np.maximum(np.linalg.norm(rp, axis=1), np.linalg.norm(rd, axis=1)) <= tol
        z[active], lam[active] = za, la
        if done.any():
            converged[active[done]] = True
            iters[active[done]] = i
            keep = ~done
            active, za, la, mua = active[keep], za[keep], la[keep], mua[keep]
    y = recover(z, np.arange(k))
    return y, z, lam, converged, iters


def flops(params: PolicyParams) -> int:
    """Per-step operation count of the unrolled policy.

    Dense matvec (r x c) = 2rc, vector add / scale / ReLU = length.  Covers the
    affine maps for q, b and mu, n_iter iterations and the recovery of y.
    """
    n = params.n_qp + (1 if params.rho_eps > 0 else 0)
    m = params.m_qp + (1 if params.rho_eps > 0 else 0)
    d = params.n_obs
    maps = 2 * n * d + (2 * m * d + m) + (2 * m * d + m)
    per_iter = (m + 2 * m * m + m) + 4 * m + m
    recovery = m + 2 * n * m + 2 * n * n + n
    return int(maps + params.n_iter * per_iter + recovery)


def flops_per_iteration(params: PolicyParams) -> int:
    m = params.m_qp + (1 if params.rho_eps > 0 else 0)
    return 2 * m * m + 7 * m


def from_condensed(cm, n_ref: int = 0, n_iter: int = 5000, alpha: float = 0.9) -> PolicyParams:
    """Policy whose QP is exactly a condensed MPC (no slack)."""
    n_sys = cm.n_sys
    Lp = np.linalg.cholesky(cm.P)
    L_raw = np.tril(Lp, -1) + np.diag(softplus_inv(np.diag(Lp)))
    W_q = cm.Wx if n_ref == 0 else np.hstack([cm.Wx, cm.Wr])
    W_b = cm.Wbx if n_ref == 0 else np.hstack([cm.Wbx, np.zeros((cm.Wbx.shape[0], n_ref))])
    return PolicyParams(L_raw, cm.H, W_q, W_b, cm.e, n_sys=n_sys, m_sys=cm.m_sys, n_ref=n_ref,
                        n_iter=n_iter, alpha=alpha, rho_eps=0.0)


def from_matrices(P, H, W_q, W_b, b_b, n_sys, m_sys, n_ref=0, n_iter=10, alpha=1.0,
                  rho_eps=0.0, symmetric_mode=False) -> PolicyParams:
    P = np.asarray(P, dtype=float)
    Lp = np.linalg.cholesky(P)
    L_raw = np.tril(Lp, -1) + np.diag(softplus_inv(np.diag(Lp)))
    return PolicyParams(L_raw, H, W_q, W_b, b_b, n_sys=n_sys, m_sys=m_sys, n_ref=n_ref,
                        n_iter=n_iter, alpha=alpha, rho_eps=rho_eps, symmetric_mode=symmetric_mode)


# -- checkpoints ------------------------------------------------------------

def dumps(params: PolicyParams) -> str:
    head = (f"LQPv1 {params.n_qp} {params.m_qp} {params.n_sys} {params.n_ref} {params.n_iter} "
            f"{fmt(params.alpha)} {fmt(params.rho_eps)} {int(bool(params.symmetric_mode))}")
    lines = [head]
    write_block(lines, "m_sys", [[params.m_sys]])
    for k, v in params.blocks().items():
        write_block(lines, k, v)
    return "\n".join(lines) + "\n"


def loads(text: str) -> PolicyParams:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty checkpoint")
    head = lines[0].split()
    if len(head) != 9 or head[0] != "LQPv1":
        raise FormatError("not an LQPv1 checkpoint")
    try:
        n_qp, m_qp, n_sys, n_ref, n_iter = (int(v) for v in head[1:6])
        alpha, rho_eps = float(head[6]), float(head[7])
        sym = bool(int(head[8]))
    except ValueError:
        raise FormatError("bad LQPv1 header") from None
    blk = read_blocks(lines, 1)
    missing = [k for k in ("m_sys",) + BLOCKS if k not in blk]
    if missing:
        raise FormatError(f"missing blocks: {missing}")
    try:
        p = PolicyParams(blk["L_P_raw"], blk["H"], blk["W_q"], blk["W_b"], blk["b_b"][0],
                         n_sys=n_sys, m_sys=int(blk["m_sys"][0, 0]), n_ref=n_ref, n_iter=n_iter,
                         alpha=alpha, rho_eps=rho_eps, symmetric_mode=sym)
    except QpValidationError as exc:
        raise FormatError(str(exc)) from None
    if (p.n_qp, p.m_qp) != (n_qp, m_qp):
        raise FormatError("header dimensions disagree with blocks")
    return p


def save_checkpoint(params: PolicyParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(params))


def load_checkpoint(path) -> PolicyParams:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
