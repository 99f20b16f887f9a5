"""Standard-form QP and the PDHG solver used throughout the package.

Problem form::

    minimize    1/2 y'Py + q'y
    subject to  Hy + b >= 0

The solver runs on the transformed primal ``z = Hy + b`` and a dual ``lam``;
the primal ``y`` is recovered in closed form from ``z``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

__all__ = [
    "StandardQp",
    "PdhgOperator",
    "PdhgState",
    "Residuals",
    "SlackConfig",
    "SolveResult",
    "QpValidationError",
    "NotPositiveDefiniteError",
    "InfeasibleError",
    "recovery_delta",
    "assemble_operator",
    "pdhg_step",
    "recover_primal",
    "residuals",
    "solve_qp",
    "suboptimality_bound",
    "slacken",
    "oracle_active_set",
]


class QpValidationError(ValueError):
    """Malformed QP data (shapes, non-finite entries, bad settings)."""


class NotPositiveDefiniteError(QpValidationError):
    """Cost matrix failed a Cholesky factorization."""


class InfeasibleError(RuntimeError):
    """No point satisfies the constraints."""


def _as_matrix(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise QpValidationError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _as_vector(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 1:
        raise QpValidationError(f"{name} must be 1-D, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class StandardQp:
    """A strictly convex QP ``min 1/2 y'Py + q'y  s.t.  Hy + b >= 0``."""

    P: np.ndarray
    q: np.ndarray
    H: np.ndarray
    b: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = _as_matrix(self.P, "P")
        q = _as_vector(self.q, "q")
        H = _as_matrix(self.H, "H")
        b = _as_vector(self.b, "b")
        n = P.shape[0]
        if P.shape != (n, n) or q.shape != (n,) or H.shape[1] != n or b.shape != (H.shape[0],):
            raise QpValidationError(
                f"inconsistent shapes P{P.shape} q{q.shape} H{H.shape} b{b.shape}"
            )
        for name, arr in (("P", P), ("q", q), ("H", H), ("b", b)):
            if not np.all(np.isfinite(arr)):
                raise QpValidationError(f"{name} has non-finite entries")
        if not np.allclose(P, P.T, rtol=1e-10, atol=1e-12):
            raise QpValidationError("P is not symmetric")
        P = 0.5 * (P + P.T)
        try:
            L = np.linalg.cholesky(P)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("P is not positive definite") from exc
        for name, arr in (("P", P), ("q", q), ("H", H), ("b", b), ("chol", L)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_qp(self) -> int:
        return self.P.shape[0]

    @property
    def m_qp(self) -> int:
        return self.H.shape[0]

    def objective(self, y):
        y = np.asarray(y, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", y, self.P, y) + y @ self.q

    def solve_P(self, rhs):
        """``P^{-1} rhs`` through the stored Cholesky factor."""
        return sla.cho_solve((self.chol, True), rhs)


@dataclass(frozen=True, eq=False)
class PdhgOperator:
    """Precomputed affine data of the PDHG iteration for one (P, H) pair.

    ``F = (I + beta H P^-1 H')^-1`` and ``mu = F (H P^-1 q - b)``.  The
    recovery matrices give ``y = G1 q + G2 (z - b)``.
    """

    F: np.ndarray
    mu: np.ndarray
    alpha: float
    beta: float
    recovery_G1: np.ndarray
    recovery_G2: np.ndarray
    delta: float


@dataclass(frozen=True, eq=False)
class PdhgState:
    z: np.ndarray
    lam: np.ndarray
    iter: int = 0

    @classmethod
    def zeros(cls, m_qp, batch=None):
        shape = (m_qp,) if batch is None else (batch, m_qp)
        return cls(np.zeros(shape), np.zeros(shape), 0)


@dataclass(frozen=True)
class Residuals:
    r_prim: np.ndarray
    r_dual: np.ndarray
    prim_norm: float
    dual_norm: float

    @property
    def max_norm(self) -> float:
        return max(self.prim_norm, self.dual_norm)


@dataclass(frozen=True)
class SlackConfig:
    rho_eps: float = 10.0

    def __post_init__(self):
        if not self.rho_eps > 0:
            raise QpValidationError("rho_eps must be positive")


@dataclass
class SolveResult:
    y: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    residuals: Residuals
    iters: int
    status: str  # "solved" | "max-iterations-exceeded"

    @property
    def converged(self) -> bool:
        return self.status == "solved"

    def __iter__(self):
        # allows ``y, z, lam, res, iters = solve_qp(...)``
        return iter((self.y, self.z, self.lam, self.residuals, self.iters))


def recovery_delta(HPinvHt_trace, m_qp):
    """Regularizer of the recovery inverse ``(H P^-1 H' + delta I)^-1``."""
    if m_qp == 0:
        return 1e-12
    return max(1e-8 * HPinvHt_trace / m_qp, 1e-12)


def _recovery_matrices(P, H, chol=None):
    """Return (G1, G2, delta) with G2 = P^-1 H' (H P^-1 H' + delta I)^-1.

    With more constraints than variables H P^-1 H' is rank deficient, so G2
    is evaluated through the equivalent ``(H'H + delta P)^-1 H'`` instead.
    """
    if chol is None:
        chol = np.linalg.cholesky(P)
    n, m = P.shape[0], H.shape[0]
    Pinv = sla.cho_solve((chol, True), np.eye(n))
    PinvHt = Pinv @ H.T
    S = H @ PinvHt
    S = 0.5 * (S + S.T)
    delta = recovery_delta(float(np.trace(S)), m)
    if m <= n:
        G2 = sla.cho_solve(sla.cho_factor(S + delta * np.eye(m), lower=True), PinvHt.T).T
    else:
        G2 = sla.cho_solve(sla.cho_factor(H.T @ H + delta * P, lower=True), H.T)
    G1 = -Pinv + G2 @ PinvHt.T
    return G1, G2, delta


def assemble_operator(qp: StandardQp, alpha: float = 1.0, beta: float = 1.0) -> PdhgOperator:
    if not (alpha > 0 and beta > 0):
        raise QpValidationError("alpha and beta must be positive")
    m = qp.m_qp
    PinvHt = qp.solve_P(qp.H.T)
    S = qp.H @ PinvHt
    S = 0.5 * (S + S.T)
    cf = sla.cho_factor(np.eye(m) + beta * S, lower=True)
    F = sla.cho_solve(cf, np.eye(m))
    F = 0.5 * (F + F.T)
    mu = F @ (PinvHt.T @ qp.q - qp.b)
    G1, G2, delta = _recovery_matrices(qp.P, qp.H, qp.chol)
    return PdhgOperator(F=F, mu=mu, alpha=float(alpha), beta=float(beta),
                        recovery_G1=G1, recovery_G2=G2, delta=delta)


def pdhg_step(op: PdhgOperator, s: PdhgState, mu=None) -> PdhgState:
    """One synchronous PDHG iteration.

    ``lam' = F (beta z + lam) + beta mu`` and
    ``z' = max(0, (I - 2 alpha beta F) z + alpha (I - 2F) lam - 2 alpha beta mu)``.
    The z-update is evaluated as ``max(0, z + alpha lam - 2 alpha lam')``,
    which is the same affine map with a single matrix product.

    Works row-wise on batches of shape (k, m); ``mu`` overrides ``op.mu``
    (used when mu varies per batch row).
    """
    mu = op.mu if mu is None else mu
    a, bt = op.alpha, op.beta
    lam_new = (bt * s.z + s.lam) @ op.F + bt * mu  # F symmetric
    z_new = np.maximum(s.z + a * s.lam - 2.0 * a * lam_new, 0.0)
    return PdhgState(z_new, lam_new, s.iter + 1)


def recover_primal(qp: StandardQp, op: PdhgOperator, z, refine: int = 0):
    """Minimizer of the cost subject to ``Hy + b = z`` (rows of a batch ok).

    The delta-regularized inverse leaves a bias of order delta; each
    ``refine`` step re-applies G2 to the remaining constraint mismatch and
    shrinks that bias by a factor of order delta again.
    """
    z = np.asarray(z)
    y = qp.q @ op.recovery_G1.T + (z - qp.b) @ op.recovery_G2.T
    for _ in range(refine):
        y = y + (z - qp.b - y @ qp.H.T) @ op.recovery_G2.T
    return y


def residuals(qp: StandardQp, y, z, lam) -> Residuals:
    """Primal and dual residuals of an iterate.

    ``lam`` is the dual iterate produced by :func:`pdhg_step`; its limit is
    the multiplier of ``Hy + b >= 0`` (nonnegative), so stationarity reads
    ``Py + q - H' lam = 0``.
    """
    r_prim = qp.H @ y + qp.b - z
    r_dual = qp.P @ y + qp.q - qp.H.T @ lam
    return Residuals(r_prim, r_dual, float(np.linalg.norm(r_prim)), float(np.linalg.norm(r_dual)))


def suboptimality_bound(qp: StandardQp, y, z, lam, y_star) -> float:
    """Right-hand side of ``p - p* <= |lam||r_prim| + |y - y*||r_dual|``."""
    res = residuals(qp, y, z, lam)
    return float(np.linalg.norm(lam) * res.prim_norm
                 + np.linalg.norm(np.asarray(y) - y_star) * res.dual_norm)


def solve_qp(qp: StandardQp, alpha: float = 0.9, beta: float = 1.0, tol: float = 1e-9,
             max_iter: int = 100_000, check_every: int = 1, callback=None) -> SolveResult:
    """Run PDHG from (0, 0) until both residual norms are below ``tol``.

    A run that hits ``max_iter`` is returned with status
    ``"max-iterations-exceeded"`` and the last residuals; it is not raised.
    ``callback(y, z, lam, i)`` is invoked after every iteration if given.
    """
    if not tol > 0:
        raise QpValidationError("tol must be positive")
    if not alpha * beta < 1:
        raise QpValidationError("solve_qp requires alpha * beta < 1")
    op = assemble_operator(qp, alpha, beta)
    F, mu, G1, G2 = op.F, op.mu, op.recovery_G1, op.recovery_G2
    P, H, q, b = qp.P, qp.H, qp.q, qp.b
    y_off = G1 @ q - G2 @ b

    def recover(z):
        y = G2 @ z + y_off
        return y + G2 @ (z - b - H @ y)

    z = np.zeros(qp.m_qp)
    lam = np.zeros(qp.m_qp)
    a2 = 2.0 * alpha
    status = "max-iterations-exceeded"
    i = 0
    res = None
    while i < max_iter:
        lam_new = F @ (beta * z + lam) + beta * mu
        z = np.maximum(z + alpha * lam - a2 * lam_new, 0.0)
        lam = lam_new
        i += 1
        if callback is not None or i % check_every == 0 or i == max_iter:
            y = recover(z)
            rp = H @ y + b - z
            rd = P @ y + q - H.T @ lam
            pn, dn = np.sqrt(rp @ rp), np.sqrt(rd @ rd)
            if callback is not None:
                callback(y, z, lam, i)
            if pn <= tol and dn <= tol:
                status = "solved"
                res = Residuals(rp, rd, float(pn), float(dn))
                break
    y = recover(z)
    if res is None:
        res = residuals(qp, y, z, lam)
    return SolveResult(y=y, z=z, lam=lam, residuals=res, iters=i, status=status)


def slacken(qp: StandardQp, cfg: SlackConfig) -> StandardQp:
    """Add a penalized scalar slack so the QP is feasible for any (H, b)."""
    n, m = qp.n_qp, qp.m_qp
    P = np.zeros((n + 1, n + 1))
    P[:n, :n] = qp.P
    P[n, n] = 2.0 * cfg.rho_eps
    H = np.zeros((m + 1, n + 1))
    H[:m, :n] = qp.H
    H[:, n] = 1.0
    return StandardQp(P, np.append(qp.q, 0.0), H, np.append(qp.b, 0.0))


def oracle_active_set(qp: StandardQp, tol: float = 1e-9, max_m: int = 20):
    """Exact solution by enumerating candidate active sets.

    Subsets are visited by increasing size, so the first KKT-valid candidate
    is also the one with the smallest active set.  Returns ``(y, mu)`` with
    ``mu`` the multipliers of ``Hy + b >= 0`` (zero off the active set),
    i.e. ``Py + q - H' mu = 0``.
    """
    n, m = qp.n_qp, qp.m_qp
    if m > max_m:
        raise QpValidationError(f"enumeration limited to m_qp <= {max_m}")
    P, q, H, b = qp.P, qp.q, qp.H, qp.b
    scale = 1.0 + np.abs(b).max(initial=0.0)
    any_feasible = False
    for k in range(m + 1):
        subsets = np.array(list(itertools.combinations(range(m), k)), dtype=int)
        subsets = subsets.reshape(len(subsets), k)
        K = np.zeros((len(subsets), n + k, n + k))
        rhs = np.zeros((len(subsets), n + k))
        K[:, :n, :n] = P
        rhs[:, :n] = -q
        if k:
            HA = H[subsets]  # (s, k, n)
            K[:, :n, n:] = -HA.transpose(0, 2, 1)
            K[:, n:, :n] = HA
            rhs[:, n:] = -b[subsets]
        ok = np.linalg.cond(K) < 1e12
        if not ok.any():
            continue
        sol = np.linalg.solve(K[ok], rhs[ok][..., None])[..., 0]
        ys, mus = sol[:, :n], sol[:, n:]
        feas = np.all(ys @ H.T + b >= -tol * scale, axis=1)
        any_feasible |= bool(feas.any())
        dual = np.all(mus >= -tol * (1.0 + np.abs(mus).max(initial=0.0)), axis=1)
        valid = np.flatnonzero(feas & dual)
        if valid.size:
            j = valid[0]
            mu = np.zeros(m)
            mu[subsets[ok][j]] = mus[j]
            return ys[j], mu
    raise InfeasibleError("no candidate active set is primal feasible")
