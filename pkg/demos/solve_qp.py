"""Solve a small random QP with PDHG and compare against active-set enumeration."""
import numpy as np

from lqpkit.qp import StandardQp, oracle_active_set, solve_qp


def main(seed=0):
    rng = np.random.default_rng(seed)
    n, m = 4, 8
    M = rng.standard_normal((n, n))
    P = M @ M.T + n * np.eye(n)
    H = rng.standard_normal((m, n))
    qp = StandardQp(P, 10 * rng.standard_normal(n), H, rng.uniform(0.5, 1.5, m))

    res = solve_qp(qp, alpha=0.9, tol=1e-10)
    y_star, mu_star = oracle_active_set(qp)
    print(f"status {res.status} after {res.iters} iterations")
    print("y      ", np.round(res.y, 6))
    print("oracle ", np.round(y_star, 6))
    print("active ", np.flatnonzero(mu_star > 0))
    print(f"max |y - y*| = {np.abs(res.y - y_star).max():.2e}")


if __name__ == "__main__":
    main()
