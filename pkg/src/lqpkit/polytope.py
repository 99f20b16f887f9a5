"""H-representation polytopes {x | Gx <= c}."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog


@dataclass(frozen=True)
class Polytope:
    G: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if G.shape[0] != c.shape[0]:
            raise ValueError("G and c must have the same number of rows")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "c", c)

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        return np.all(x @ self.G.T <= self.c + tol, axis=-1)

    def chebyshev(self):
        """(center, radius) of the largest inscribed ball; radius < 0 if empty."""
        norms = np.linalg.norm(self.G, axis=1)
        n = self.dim
        cost = np.zeros(n + 1)
        cost[-1] = -1.0
        A = np.hstack([self.G, norms[:, None]])
        res = linprog(cost, A_ub=A, b_ub=self.c, bounds=[(None, None)] * n + [(None, None)],
                      method="highs")
        if res.status == 3:  # unbounded
            return res.x[:n] if res.x is not None else np.zeros(n), np.inf
        if res.status != 0:
            return np.full(n, np.nan), -np.inf
        return res.x[:n], float(res.x[-1])

    def is_empty(self) -> bool:
        return self.chebyshev()[1] < 0

    def bounding_box(self):
        """Axis-aligned bounds by 2n LPs."""
        n = self.dim
        lo, hi = np.zeros(n), np.zeros(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            for sign, out in ((1.0, lo), (-1.0, hi)):
                res = linprog(sign * e, A_ub=self.G, b_ub=self.c, bounds=[(None, None)] * n,
                              method="highs")
                if res.status != 0:
                    raise ValueError("polytope is empty or unbounded")
                out[i] = res.x[i]
        return lo, hi

    def vertices(self, tol=1e-9):
        """Vertices of a 2-D polytope, counterclockwise."""
        if self.dim != 2:
            raise NotImplementedError("vertex enumeration is implemented for 2-D only")
        pts = []
        p = len(self.c)
        for i in range(p):
            for j in range(i + 1, p):
                M = self.G[[i, j]]
                if abs(np.linalg.det(M)) < 1e-12:
                    continue
                v = np.linalg.solve(M, self.c[[i, j]])
                if np.all(self.G @ v <= self.c + tol):
                    pts.append(v)
        if not pts:
            return np.zeros((0, 2))
        pts = np.unique(np.round(np.array(pts), 12), axis=0)
        ctr = pts.mean(axis=0)
        ang = np.arctan2(pts[:, 1] - ctr[1], pts[:, 0] - ctr[0])
        return pts[np.argsort(ang)]

    def sample(self, rng, k, lo=None, hi=None, max_draws=100_000):
        """Uniform samples by rejection from the bounding box."""
        if lo is None or hi is None:
            lo, hi = self.bounding_box()
        out = np.zeros((k, self.dim))
        got, draws = 0, 0
        while got < k:
            batch = max(16, 2 * (k - got))
            if draws + batch > max_draws:
                raise RuntimeError("rejection sampling exceeded its draw budget")
            x = rng.uniform(lo, hi, size=(batch, self.dim))
            draws += batch
            x = x[self.contains(x)][:k - got]
            out[got:got + len(x)] = x
            got += len(x)
        return out


def from_vertices(vertices) -> Polytope:
    """Polytope with unit outward normals from a counterclockwise or clockwise 2-D vertex loop."""
    V = np.asarray(vertices, dtype=float)
    ctr = V.mean(axis=0)
    G, c = [], []
    for i in range(len(V)):
        p, q = V[i], V[(i + 1) % len(V)]
        d = q - p
        nrm = np.array([d[1], -d[0]])
        nrm /= np.linalg.norm(nrm)
        if nrm @ (ctr - p) > 0:
            nrm = -nrm
        G.append(nrm)
        c.append(nrm @ p)
    return Polytope(np.array(G), np.array(c))


def shrink(pol: Polytope, margin: float, check_empty: bool = False):
    """{x | Gx <= c - margin}; with ``check_empty`` returns (polytope, empty_flag)."""
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    out = Polytope(pol.G.copy(), pol.c - margin)
    if check_empty:
        return out, out.is_empty()
    return out
