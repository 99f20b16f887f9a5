import numpy as np
import pytest

from lqpkit.qp import StandardQp

ACCEPTANCE_RESULTS = {}


def random_spd(rng, n, cond=20.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.geomspace(1.0, cond, n)
    return (Q * ev) @ Q.T


def random_feasible_qp(rng, n, m, margin=0.5):
    """Strictly convex QP with a strictly feasible point y0 (Hy0 + b >= margin)."""
    P = random_spd(rng, n)
    q = rng.standard_normal(n) * 2.0
    H = rng.standard_normal((m, n))
    y0 = rng.standard_normal(n)
    b = -H @ y0 + margin + rng.uniform(0.0, 1.0, m)
    return StandardQp(P, q, H, b)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
