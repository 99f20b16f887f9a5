"""Read-only reference data for the double-integrator QP policy."""
from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np

from .blocks import read_blocks
from .policy import PolicyParams, from_matrices
from .polytope import Polytope, from_vertices

GOLDEN_FILE = "golden_di.txt"
GOLDEN_SHA256 = "e061fc5bb9a8cdfee4ef206e758f464ec8c87daae31cc554fdb7770e40ae4af4"
PROBES = np.array([[0.1, 0.0], [0.0, 0.1]])


class ChecksumError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def _raw() -> dict:
    import hashlib
    data = resources.files("lqpkit").joinpath("data").joinpath(GOLDEN_FILE).read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    if digest != GOLDEN_SHA256:
        raise ChecksumError(f"{GOLDEN_FILE} checksum mismatch ({digest})")
    blocks = read_blocks(data.decode("utf-8").splitlines())
    for v in blocks.values():
        v.setflags(write=False)
    return blocks


def golden_blocks() -> dict:
    return {k: v.copy() for k, v in _raw().items()}


def golden_params(n_iter: int = 10, alpha: float = 1.0) -> PolicyParams:
    """The printed policy: -1 <= H_hat y <= 1, q = W_q x, stored P used as is."""
    g = _raw()
    h = g["H_hat"].shape[0]
    return from_matrices(g["P"], g["H_hat"], g["W_q"], np.zeros((2 * h, 2)), np.ones(2 * h),
                         n_sys=2, m_sys=1, n_ref=0, n_iter=n_iter, alpha=alpha, rho_eps=0.0,
                         symmetric_mode=True)


def printed_invariant_set() -> Polytope:
    """(G_hat, c_hat) at printed (two-decimal) precision."""
    g = _raw()
    return Polytope(g["G_hat"], g["c_hat"][:, 0])


def invariant_set() -> Polytope:
    """Invariant set rebuilt from its exact vertex coordinates."""
    return from_vertices(_raw()["mci_vertices"])
