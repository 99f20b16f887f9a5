"""A few PPO epochs on the double integrator, then a seeded evaluation.

Use ``--epochs 500`` for the full desk-scale run (a few minutes on one core).
"""
import argparse

from lqpkit.envs import double_integrator, evaluate
from lqpkit.ppo import ActorController, TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--arch", default="lqp:4,24")
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    task = double_integrator()
    cfg = TrainConfig(epochs=args.epochs, eval_every=10, eval_trials=100)

    def show(row):
        if row["eval_fail_pct"] != "":
            print(f"epoch {row['epoch']:4d}  reward {row['mean_reward']:9.3f}  "
                  f"l_res {row['res_loss']:.3e}  fail% {row['eval_fail_pct']:.1f}")

    res = train(task, args.arch, cfg, args.seed, progress=show)
    rep = evaluate(ActorController(res.actor, task), task, 1000, base_seed=2024)
    print(f"{args.arch}: Fail% {rep.fail_pct:.1f}  Cost {rep.cost:.3f}  FLOPs {rep.flops:.0f}")


if __name__ == "__main__":
    main()
