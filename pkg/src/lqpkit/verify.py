"""Certificate QCQPs for QP policies: assembly, sampling falsification, export.

The policy's inner QP is replaced by its KKT conditions, which turns the
feasibility and stability certificates into nonconvex QCQPs over named
variable blocks.  Global lower bounds (SDP / SOS) are left to external
solvers; here the problems are assembled, exported, and attacked by
sampling, which yields sound upper bounds and concrete counterexamples.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .blocks import FormatError, fmt
from .mpc import LinearTask
from .policy import PolicyParams, materialize, solve_policy_batch
from .polytope import Polytope, shrink

__all__ = ["Qcqp", "QuadForm", "Constraint", "StabilityConfig", "PreconditionError",
           "kkt_block", "assemble_feasibility", "assemble_stability", "linearize_policy",
           "sample_falsify", "FalsifyResult", "export_qcqp", "parse_qcqp", "dumps_qcqp",
           "loads_qcqp", "Polytope", "shrink"]


class PreconditionError(ValueError):
    """A certificate's hypothesis does not hold for the given parameters."""


# -- QCQP container ---------------------------------------------------------------

@dataclass
class QuadForm:
    """v' Q v + l' v + k with Q symmetric (sparse)."""
    Q: sp.csr_matrix
    l: np.ndarray
    k: float = 0.0

    @classmethod
    def zeros(cls, n):
        return cls(sp.csr_matrix((n, n)), np.zeros(n), 0.0)

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        return float(v @ (self.Q @ v) + self.l @ v + self.k)


@dataclass
class Constraint:
    kind: str                 # "EQ": form = 0, "GE": form >= 0
    form: QuadForm
    tag: str = ""

    def violation(self, v):
        val = self.form(v)
        return abs(val) if self.kind == "EQ" else max(0.0, -val)


@dataclass
class Qcqp:
    """minimize objective(v) subject to the constraint list."""
    names: dict                              # block name -> (start, size)
    objective: QuadForm = None
    constraints: list = field(default_factory=list)

    def __post_init__(self):
        if self.objective is None:
            self.objective = QuadForm.zeros(self.n_vars)

    @property
    def n_vars(self):
        return int(sum(s for _, s in self.names.values()))

    @property
    def n_cons(self):
        return len(self.constraints)

    def sel(self, name):
        """Selection matrix (size x n_vars) of a block."""
        start, size = self.names[name]
        S = np.zeros((size, self.n_vars))
        S[np.arange(size), start + np.arange(size)] = 1.0
        return S

    def block(self, v, name):
        start, size = self.names[name]
        return np.asarray(v)[start:start + size]

    def pack(self, **blocks):
        v = np.zeros(self.n_vars)
        for name, val in blocks.items():
            start, size = self.names[name]
            v[start:start + size] = val
        return v

    def form(self, Q=None, l=None, k=0.0):
        n = self.n_vars
        Qd = np.zeros((n, n)) if Q is None else np.asarray(Q, dtype=float)
        Qd = 0.5 * (Qd + Qd.T)
        return QuadForm(sp.csr_matrix(Qd), np.zeros(n) if l is None else np.asarray(l, float), float(k))

    def add_linear(self, kind, M, k, tag=""):
        """One constraint per row of M v + k."""
        M = np.atleast_2d(M)
        k = np.broadcast_to(np.asarray(k, dtype=float), (M.shape[0],))
        for i in range(M.shape[0]):
            self.constraints.append(Constraint(kind, self.form(None, M[i], k[i]), tag))

    def add(self, kind, Q=None, l=None, k=0.0, tag=""):
        self.constraints.append(Constraint(kind, self.form(Q, l, k), tag))

    def max_violation(self, v, tags=None):
        cons = [c for c in self.constraints if tags is None or c.tag in tags]
        return max((c.violation(v) for c in cons), default=0.0)

    def structural_hash(self):
        return hashlib.sha256(dumps_qcqp(self).encode("utf-8")).hexdigest()


# -- assembly ---------------------------------------------------------------------

def _task(task):
    return task.linear if hasattr(task, "linear") else task


def _family(params: PolicyParams):
    fam = materialize(params)[0]
    n_sys = params.n_sys
    # verification is about regulation to the origin: reference columns see r = 0
    return fam, fam.Wq[:, :n_sys], fam.Wb[:, :n_sys]


def _new_qcqp(params, extra=()):
    fam = materialize(params)[0]
    q = Qcqp({})
    q.names["x0"] = (0, params.n_sys)
    for name, size in extra:
        q.names[name] = (q.n_vars, size)
    q.names["y"] = (q.n_vars, fam.P.shape[0])
    q.names["mu"] = (q.n_vars, fam.H.shape[0])
    q.objective = QuadForm.zeros(q.n_vars)
    return q


def kkt_block(params: PolicyParams, qcqp: Qcqp | None = None) -> Qcqp:
    """Append the inner-QP KKT conditions over blocks x0, y, mu.

    Stationarity  P y + W_q x0 - H' mu = 0, primal feasibility
    H y + W_b x0 + b_b >= 0, mu >= 0 and the scalar complementarity
    mu'(H y + W_b x0 + b_b) = 0.  Uses the matrices the policy actually runs
    (slack included).
    """
    q = _new_qcqp(params) if qcqp is None else qcqp
    fam, Wq, Wb = _family(params)
    X, Y, M = q.sel("x0"), q.sel("y"), q.sel("mu")
    q.add_linear("EQ", fam.P @ Y + Wq @ X - fam.H.T @ M, 0.0, tag="stationarity")
    prim = fam.H @ Y + Wb @ X
    q.add_linear("GE", prim, fam.bb, tag="primal")
    q.add_linear("GE", M, 0.0, tag="dual")
    q.add("EQ", Q=M.T @ prim, l=M.T @ fam.bb, tag="complementarity")
    return q


def assemble_feasibility(params: PolicyParams, task, X0: Polytope) -> Qcqp:
    """QCQP whose nonnegative optimum certifies invariance of X0 in closed loop."""
    lin = _task(task)
    p = len(X0.c)
    q = _new_qcqp(params, extra=[("nu", p)])
    X, N, Y = q.sel("x0"), q.sel("nu"), q.sel("y")
    U = Y[:lin.m_sys]
    nxt = lin.A @ X + lin.B @ U
    q.objective = q.form(Q=-(N.T @ (X0.G @ nxt)), l=N.T @ X0.c)
    q.add_linear("GE", -X0.G @ X, X0.c, tag="x0-set")
    q.add_linear("GE", N, 0.0, tag="simplex")
    q.add_linear("EQ", np.ones(p) @ N, -1.0, tag="simplex")
    return kkt_block(params, q)


@dataclass
class StabilityConfig:
    P_f: np.ndarray
    epsilon: float | None = None      # default 1e-4 * lambda_min(Q)
    N: int = 0
    X_f: Polytope | None = None

    def __post_init__(self):
        self.P_f = np.asarray(self.P_f, dtype=float)
        if not np.allclose(self.P_f, self.P_f.T):
            raise ValueError("P_f must be symmetric")
        np.linalg.cholesky(self.P_f)
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.N < 0:
            raise ValueError("N must be nonnegative")
        if self.N > 0 and self.X_f is None:
            raise ValueError("a terminal set X_f is required when N > 0")

    def eps(self, lin: LinearTask):
        if self.epsilon is not None:
            return float(self.epsilon)
        return 1e-4 * float(np.linalg.eigvalsh(lin.Q).min())


def check_bb(params: PolicyParams):
    fam = materialize(params)[0]
    if fam.bb.min() < 0:
        raise PreconditionError(f"b_b-negative: min(b_b) = {fam.bb.min():.6g}; the stability "
                                "certificate needs b_b >= 0 so that the origin maps to u = 0")


def assemble_stability(params: PolicyParams, task, X0: Polytope, cfg: StabilityConfig) -> Qcqp:
    """QCQP for the Lyapunov decrease certificate.

    N = 0 emits  V_f(x0) - V_f(A x0 + B u0) - eps |x0|^2; N >= 1 adds the
    input sequence ubar_{0:N} of the baseline MPC and the terminal-set
    condition on x_{N+1}, expanded through the dynamics.
    """
    check_bb(params)
    lin = _task(task)
    eps = cfg.eps(lin)
    A, B, Qc, R, Pf = lin.A, lin.B, lin.Q, lin.R, cfg.P_f
    m = lin.m_sys
    extra = [] if cfg.N == 0 else [("ubar", (cfg.N + 1) * m)]
    q = _new_qcqp(params, extra=extra)
    X, Y = q.sel("x0"), q.sel("y")
    U0 = Y[:m]
    if cfg.N == 0:
        x1 = A @ X + B @ U0
        Qobj = X.T @ Pf @ X - x1.T @ Pf @ x1 - eps * X.T @ X
    else:
        Ub = q.sel("ubar")
        ub = [Ub[i * m:(i + 1) * m] for i in range(cfg.N + 1)]

        def cost(inputs):
            x, tot = X, 0.0
            for u in inputs:
                tot = tot + x.T @ Qc @ x + u.T @ R @ u
                x = A @ x + B @ u
            return tot + x.T @ Pf @ x, x

        J1, _ = cost(ub)
        J2, xN1 = cost([U0] + ub[1:])
        Qobj = J1 + X.T @ Qc @ X + U0.T @ R @ U0 - J2 - eps * X.T @ X
        q.add_linear("GE", -cfg.X_f.G @ xN1, cfg.X_f.c, tag="terminal-set")
    q.objective = q.form(Q=Qobj)
    q.add_linear("GE", -X0.G @ X, X0.c, tag="x0-set")
    return kkt_block(params, q)


# -- linearization and falsification ------------------------------------------------------

def _policy_obs(params, x):
    x = np.atleast_2d(x)
    if params.n_ref:
        x = np.hstack([x, np.zeros((x.shape[0], params.n_ref))])
    return x


def linearize_policy(params: PolicyParams, probe_states, tol=1e-10, alpha=0.9):
    """K_hat = [pi(x_1) .. pi(x_n)] [x_1 .. x_n]^-1 with the QP solved to convergence."""
    Xp = np.atleast_2d(np.asarray(probe_states, dtype=float))
    if Xp.shape != (params.n_sys, params.n_sys):
        raise ValueError(f"need {params.n_sys} probe states of length {params.n_sys}")
    if np.linalg.matrix_rank(Xp) < params.n_sys or np.linalg.cond(Xp) > 1e12:
        raise ValueError("probe states are linearly dependent")
    y, _, _, conv, _ = solve_policy_batch(params, _policy_obs(params, Xp), tol=tol, alpha=alpha)
    if not conv.all():
        raise RuntimeError("inner QP did not converge at a probe state")
    U = y[:, :params.m_sys].T          # columns pi(x_i)
    return U @ np.linalg.inv(Xp.T)


@dataclass
class FalsifyResult:
    min_value: float
    argmin_x0: np.ndarray
    counterexample: bool
    n_evaluated: int
    n_skipped: int
    status: str                        # "ok" or "warning"
    values: np.ndarray = None
    samples: np.ndarray = None
    y: np.ndarray = None
    mu: np.ndarray = None
    mu_fallbacks: int = 0


def sample_prefix(pol: Polytope, rng, n, lo, hi, chunk=4096, max_draws=10_000_000):
    """First n accepted points of a fixed-chunk rejection stream (prefix-stable in n)."""
    out, got, draws = [], 0, 0
    while got < n:
        if draws >= max_draws:
            raise RuntimeError("rejection sampling exceeded its draw budget")
        x = rng.uniform(lo, hi, size=(chunk, pol.dim))
        draws += chunk
        x = x[pol.contains(x)]
        out.append(x)
        got += len(x)
    return np.vstack(out)[:n] if out else np.zeros((0, pol.dim))


def reconstruct_multipliers(fam, obs, y, lam, tol=1e-8, active_tol=1e-7):
    """mu from the converged dual iterate, validated on stationarity.

    Rows whose stationarity residual exceeds ``tol`` fall back to a
    least-squares solve restricted to the active constraints.
    """
    q, b = fam.q(obs), fam.b(obs)
    grad = y @ fam.P + q
    scale = max(1.0, float(np.abs(grad).max()))
    bad = (np.linalg.norm(grad - lam @ fam.H, axis=1) > tol * scale) | (lam.min(axis=1) < -tol * scale)
    mu = np.maximum(lam, 0.0)
    for i in np.flatnonzero(bad):
        slack = fam.H @ y[i] + b[i]
        act = slack <= active_tol
        mu[i] = 0.0
        if act.any():
            sol = np.linalg.lstsq(fam.H[act].T, grad[i], rcond=None)[0]
            mu[i, act] = np.maximum(sol, 0.0)
    return mu, int(bad.sum())


def sample_falsify(kind: str, params: PolicyParams, task, X0: Polytope, cfg=None,
                   n_samples: int = 10_000, seed: int = 0, include_vertices: bool = True,
                   tol: float = 1e-10) -> FalsifyResult:
    """Sampled minimum of a certificate objective over X0 (an upper bound on its optimum).

    ``kind`` is "feasibility" (min next-state margin w.r.t. X0 itself) or
    "stability" (Lyapunov decrease, N = 0 only).  With ``include_vertices``
    the vertices of a 2-D X0 are evaluated as well.
    """
    lin = _task(task)
    if kind == "stability":
        if cfg is None or cfg.N != 0:
            raise NotImplementedError("sampled stability falsification covers N = 0 only; "
                                      "the general problem has an indefinite inner minimization")
        check_bb(params)
    elif kind != "feasibility":
        raise ValueError(f"unknown certificate kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 77]))
    lo, hi = X0.bounding_box()
    xs = sample_prefix(X0, rng, n_samples, lo, hi)
    if include_vertices and X0.dim == 2:
        xs = np.vstack([xs, X0.vertices()])
    fam = materialize(params)[0]
    obs = _policy_obs(params, xs)
    y, z, lam, conv, _ = solve_policy_batch(params, obs, tol=tol, family=fam)
    mu, n_fb = reconstruct_multipliers(fam, obs, y, lam)
    u = y[:, :lin.m_sys]
    nxt = xs @ lin.A.T + u @ lin.B.T
    if kind == "feasibility":
        vals = np.min(X0.c - nxt @ X0.G.T, axis=1)
    else:
        eps = cfg.eps(lin)
        Pf = cfg.P_f
        vals = (np.einsum("ki,ij,kj->k", xs, Pf, xs) - np.einsum("ki,ij,kj->k", nxt, Pf, nxt)
                - eps * np.sum(xs * xs, axis=1))
    vals = np.where(conv, vals, np.inf)
    skipped = int((~conv).sum())
    status = "ok"
    if skipped > 0.01 * len(xs):
        status = "warning"
        warnings.warn(f"{skipped} of {len(xs)} inner solves did not converge", RuntimeWarning)
    j = int(np.argmin(vals))
    mv = float(vals[j])
    return FalsifyResult(min_value=mv, argmin_x0=xs[j].copy(), counterexample=mv < -1e-7,
                         n_evaluated=len(xs) - skipped, n_skipped=skipped, status=status,
                         values=vals, samples=xs, y=y, mu=mu, mu_fallbacks=n_fb)


def certificate_point(qcqp: Qcqp, res: FalsifyResult, i: int, kind: str, X0: Polytope, task):
    """Full QCQP variable vector for sample i (nu picks the binding row)."""
    blocks = {"x0": res.samples[i], "y": res.y[i], "mu": res.mu[i]}
    if kind == "feasibility":
        lin = _task(task)
        nxt = lin.A @ res.samples[i] + lin.B @ res.y[i, :lin.m_sys]
        nu = np.zeros(len(X0.c))
        nu[int(np.argmin(X0.c - X0.G @ nxt))] = 1.0
        blocks["nu"] = nu
    return qcqp.pack(**blocks)


# -- QCQPv1 text format -------------------------------------------------------------

def _triples(Q):
    U = sp.triu(sp.csr_matrix(Q)).tocoo()
    keep = U.data != 0
    order = np.lexsort((U.col[keep], U.row[keep]))
    return U.row[keep][order], U.col[keep][order], U.data[keep][order]


def _form_lines(head, f: QuadForm):
    r, c, v = _triples(f.Q)
    li = np.flatnonzero(f.l)
    lines = [f"{head} {len(v)} {len(li)} {fmt(f.k)}"]
    lines += [f"{i} {j} {fmt(x)}" for i, j, x in zip(r, c, v)]
    lines += [f"{i} {fmt(f.l[i])}" for i in li]
    return lines


def dumps_qcqp(q: Qcqp) -> str:
    lines = [f"QCQPv1 {q.n_vars} {q.n_cons}", f"VARS {len(q.names)}"]
    for name, (start, size) in sorted(q.names.items(), key=lambda kv: kv[1][0]):
        lines.append(f"{name} {start} {size}")
    lines += _form_lines("OBJ", q.objective)
    for k, c in enumerate(q.constraints):
        lines += _form_lines(f"CON {k} {c.kind}", c.form)
    return "\n".join(lines) + "\n"


def _read_form(lines, pos, n, nq, nl, k):
    rows, cols, vals = [], [], []
    for _ in range(nq):
        i, j, v = lines[pos].split()
        i, j = int(i), int(j)
        if not (0 <= i <= j < n):
            raise FormatError(f"bad quadratic index on line {pos + 1}")
        rows.append(i)
        cols.append(j)
        vals.append(float(v))
        pos += 1
    l = np.zeros(n)
    for _ in range(nl):
        i, v = lines[pos].split()
        i = int(i)
        if not 0 <= i < n:
            raise FormatError(f"bad linear index on line {pos + 1}")
        l[i] = float(v)
        pos += 1
    r, c, v = np.array(rows, int), np.array(cols, int), np.array(vals, float)
    off = r != c
    Q = sp.coo_matrix((np.concatenate([v, v[off]]), (np.concatenate([r, c[off]]),
                                                      np.concatenate([c, r[off]]))),
                      shape=(n, n)).tocsr()
    return QuadForm(Q, l, float(k)), pos


def loads_qcqp(text: str) -> Qcqp:
    lines = text.splitlines()
    try:
        head = lines[0].split()
        if len(head) != 3 or head[0] != "QCQPv1":
            raise FormatError("not a QCQPv1 file")
        n, ncons = int(head[1]), int(head[2])
        vh = lines[1].split()
        if vh[0] != "VARS":
            raise FormatError("missing VARS block")
        names, pos = {}, 2
        for _ in range(int(vh[1])):
            name, start, size = lines[pos].split()
            names[name] = (int(start), int(size))
            pos += 1
        if sum(s for _, s in names.values()) != n:
            raise FormatError("variable blocks do not cover n_vars")
        oh = lines[pos].split()
        if oh[0] != "OBJ":
            raise FormatError("missing OBJ block")
        obj, pos = _read_form(lines, pos + 1, n, int(oh[1]), int(oh[2]), float(oh[3]))
        cons = []
        for k in range(ncons):
            ch = lines[pos].split()
            if ch[0] != "CON" or int(ch[1]) != k or ch[2] not in ("EQ", "GE"):
                raise FormatError(f"bad constraint header on line {pos + 1}")
            f, pos = _read_form(lines, pos + 1, n, int(ch[3]), int(ch[4]), float(ch[5]))
            cons.append(Constraint(ch[2], f))
        if any(s.strip() for s in lines[pos:]):
            raise FormatError("trailing content")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed QCQPv1 file: {exc}") from None
    return Qcqp(names, obj, cons)


def export_qcqp(q: Qcqp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_qcqp(q))


def parse_qcqp(path) -> Qcqp:
    with open(path, encoding="utf-8") as fh:
        return loads_qcqp(fh.read())
