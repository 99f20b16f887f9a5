"""Short-horizon MPC on the double integrator, with and without a terminal weight.

From x0 = (-4, 2.1) the plain 3-step controller brakes too late and leaves the
box |x1| <= 5; weighting the terminal velocity keeps it inside.
"""
import numpy as np

from lqpkit.envs import double_integrator
from lqpkit.mpc import MpcConfig, closed_loop


def run(cfg, x0, steps=120):
    lin = double_integrator().linear
    xs, us = closed_loop(lin, cfg, x0, steps)
    cost = sum(lin.stage_cost(x, u) for x, u in zip(xs[1:], us))
    return xs, cost


def main():
    x0 = np.array([-4.0, 2.1])
    plain, _ = run(MpcConfig(3, solver="dual-active-set"), x0)
    print(f"MPC(3): peak position {plain[:, 0].max():.3f}",
          "(violates x_max = 5)" if plain[:, 0].max() > 5 else "")
    T = np.diag([0.0, 50.0])
    cfg = MpcConfig(3, terminal=T, replace_last_stage=True, solver="dual-active-set")
    xs, cost = run(cfg, x0)
    print(f"MPC-T(3): peak position {xs[:, 0].max():.3f}, cumulative cost {cost:.1f}, "
          f"final state {np.round(xs[-1], 4)}")


if __name__ == "__main__":
    main()
