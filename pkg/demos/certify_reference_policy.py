"""Linearize the bundled double-integrator QP policy and falsify its certificates."""
import numpy as np

from lqpkit.envs import double_integrator
from lqpkit.golden import PROBES, golden_params, invariant_set
from lqpkit.mpc import lyapunov_cost_to_go
from lqpkit.verify import (StabilityConfig, assemble_feasibility, linearize_policy,
                           sample_falsify, shrink)


def main(n_samples=10_000):
    task = double_integrator()
    params = golden_params()
    X0 = shrink(invariant_set(), 0.2)

    K = linearize_policy(params, PROBES)
    Pf = lyapunov_cost_to_go(task.linear, K)
    print("K_hat", np.round(K, 5))
    print("P_f\n", np.round(Pf, 3))

    q = assemble_feasibility(params, task, X0)
    print(f"feasibility QCQP: {q.n_vars} variables, {q.n_cons} constraints")
    feas = sample_falsify("feasibility", params, task, X0, n_samples=n_samples)
    print(f"feasibility: sampled min {feas.min_value:.5f} at {np.round(feas.argmin_x0, 4)}")
    stab = sample_falsify("stability", params, task, X0, StabilityConfig(Pf), n_samples=n_samples)
    print(f"stability:   sampled min {stab.min_value:.5f} at {np.round(stab.argmin_x0, 4)}")


if __name__ == "__main__":
    main()
