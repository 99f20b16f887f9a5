"""Regenerate the committed format fixtures: ``python3 tests/make_fixtures.py``."""
from pathlib import Path

from lqpkit.envs import double_integrator
from lqpkit.golden import PROBES, golden_params, invariant_set
from lqpkit.mpc import lyapunov_cost_to_go
from lqpkit.policy import init_params, save_checkpoint
from lqpkit.polytope import from_vertices, shrink
from lqpkit.ppo import DenseNet, save_mlp
from lqpkit.verify import (StabilityConfig, assemble_feasibility, assemble_stability, export_qcqp,
                           linearize_policy)

HERE = Path(__file__).parent / "fixtures"


def main():
    HERE.mkdir(exist_ok=True)
    di = double_integrator()
    g = golden_params()
    save_checkpoint(g, HERE / "golden.lqp")
    save_checkpoint(init_params(2, 1, 4, 24, rng=0), HERE / "di_4x24.lqp")
    save_checkpoint(init_params(4, 2, 4, 24, n_ref=4, rng=1), HERE / "tank_4x24.lqp")
    save_checkpoint(init_params(2, 1, 3, 8, rng=2, symmetric_mode=True, rho_eps=0.0),
                    HERE / "symmetric_3x8.lqp")
    save_mlp(DenseNet([2, 128, 64, 32, 1], rng=3), HERE / "di_32.mlp")
    save_mlp(DenseNet([8, 16, 8, 4, 2], rng=4), HERE / "tank_4.mlp")
    X0 = shrink(invariant_set(), 0.2)
    K = linearize_policy(g, PROBES)
    Pf = lyapunov_cost_to_go(di.linear, K)
    export_qcqp(assemble_feasibility(g, di, X0), HERE / "golden_feasibility.qcqp")
    export_qcqp(assemble_stability(g, di, X0, StabilityConfig(Pf)), HERE / "golden_stability.qcqp")
    Xf = from_vertices([[-1, -1], [1, -1], [1, 1], [-1, 1]])
    export_qcqp(assemble_stability(g, di, X0, StabilityConfig(Pf, N=2, X_f=Xf)),
                HERE / "golden_stability_n2.qcqp")


if __name__ == "__main__":
    main()
