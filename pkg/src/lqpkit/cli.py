"""Command-line front end: ``lqpkit {train,eval,verify,bench}``.

Exit codes: 0 success, 1 counterexample or failed run, 2 usage error,
3 unreadable checkpoint or data file, 4 violated certificate precondition.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .blocks import FormatError, read_blocks
from .envs import (TASKS, ZeroController, evaluate, load_task_config, make_task, write_metrics_csv,
                   write_trajectories_csv)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_PARSE, EXIT_PRECONDITION = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def default_seed():
    val = os.environ.get("LQPKIT_SEED")
    if val is None:
        return 0
    try:
        return int(val)
    except ValueError:
        raise CliError(f"LQPKIT_SEED must be an integer, got {val!r}", EXIT_USAGE) from None


def _floats(text):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise CliError(f"expected comma separated numbers, got {text!r}", EXIT_USAGE) from None


def _matrix(text):
    """'a,b;c,d' -> 2x2 array."""
    rows = [_floats(r) for r in text.split(";")]
    if len({len(r) for r in rows}) != 1:
        raise CliError(f"ragged matrix {text!r}", EXIT_USAGE)
    return np.array(rows)


def _task(args):
    if getattr(args, "task_config", None):
        try:
            task = load_task_config(args.task_config)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot load task config: {exc}", EXIT_PARSE) from None
    elif args.task:
        try:
            task = make_task(args.task)
        except KeyError:
            raise CliError(f"unknown task {args.task!r}; choose from {sorted(TASKS)}",
                           EXIT_USAGE) from None
    else:
        raise CliError("one of --task or --task-config is required", EXIT_USAGE)
    if getattr(args, "noise_free", False):
        task = dataclasses.replace(task, noise_cov=np.zeros_like(task.noise_cov))
    if getattr(args, "length", None):
        task = dataclasses.replace(task, length=int(args.length))
    return task


def load_any_checkpoint(path):
    """PolicyParams for LQPv1 files, a DenseNet for MLPv1 files."""
    from .policy import loads
    from .ppo import mlp_loads
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}", EXIT_PARSE) from None
    head = text.split(None, 1)[0] if text.strip() else ""
    try:
        if head == "LQPv1":
            return loads(text)
        if head == "MLPv1":
            return mlp_loads(text)
        raise FormatError("unknown checkpoint header")
    except (FormatError, ValueError) as exc:
        raise CliError(f"cannot parse checkpoint {path}: {exc}", EXIT_PARSE) from None


def make_controller(desc: str, task):
    """Controller from 'zero', 'mpc:N[,rho][,tcost=W@i][,solver=S]', 'lqp:PATH' or 'mlp:PATH'."""
    from .controllers import LqpController, MpcController
    from .mpc import MpcConfig
    from .policy import PolicyParams
    from .ppo import ActorController, MlpActor
    kind, _, rest = desc.partition(":")
    if kind == "zero" and not rest:
        return ZeroController(task.m_sys)
    if kind == "mpc":
        parts = [p for p in rest.split(",") if p]
        if not parts:
            raise CliError(f"bad controller {desc!r}", EXIT_USAGE)
        try:
            N = int(parts[0])
            rho, terminal, solver, label = 0.0, None, "dual-active-set", None
            for p in parts[1:]:
                if p.startswith("tcost="):
                    w, _, idx = p[6:].partition("@")
                    i = int(idx) - 1 if idx else None
                    terminal = np.zeros((task.n_sys, task.n_sys))
                    if i is None:
                        terminal += float(w) * np.eye(task.n_sys)
                    else:
                        terminal[i, i] = float(w)
                    label = f"mpc-t({N},{p[6:]})"
                elif p.startswith("solver="):
                    solver = p[7:]
                else:
                    rho = float(p)
            cfg = MpcConfig(N, rho=rho, terminal=terminal, replace_last_stage=terminal is not None,
                            solver=solver)
        except (ValueError, IndexError) as exc:
            raise CliError(f"bad controller {desc!r}: {exc}", EXIT_USAGE) from None
        return MpcController(task, cfg, name=label)
    if kind in ("lqp", "mlp") and rest:
        obj = load_any_checkpoint(rest)
        if kind == "lqp":
            if not isinstance(obj, PolicyParams):
                raise CliError(f"{rest} is not an LQPv1 checkpoint", EXIT_PARSE)
            try:
                return LqpController(task, obj)
            except ValueError as exc:
                raise CliError(str(exc), EXIT_USAGE) from None
        if isinstance(obj, PolicyParams):
            raise CliError(f"{rest} is not an MLPv1 checkpoint", EXIT_PARSE)
        if obj.sizes[0] != task.n_obs or obj.sizes[-1] != task.m_sys:
            raise CliError("MLP input/output sizes do not match the task", EXIT_USAGE)
        return ActorController(MlpActor(obj), task, name=f"mlp({obj.sizes[-2]})")
    raise CliError(f"bad controller {desc!r}", EXIT_USAGE)


# -- commands ------------------------------------------------------------------------

def cmd_train(args):
    from .policy import save_checkpoint
    from .ppo import TrainConfig, save_mlp, train, write_log
    task = _task(args)
    fields = dict(args.train or {})
    for key in ("epochs", "n_envs", "horizon_length", "minibatch_size", "eval_trials", "eval_every"):
        val = getattr(args, key, None)
        if val is not None:
            fields[key] = val
    if args.perturb:
        fields["perturb"] = True
    try:
        cfg = TrainConfig(**fields)
    except TypeError as exc:
        raise CliError(f"bad training config: {exc}", EXIT_USAGE) from None
    out = Path(args.out or f"{task.name}_{args.arch.replace(':', '_').replace(',', 'x')}.ckpt")
    log = Path(args.log or str(out) + ".log.csv")

    def report(row):
        if row["eval_fail_pct"] != "":
            print(f"epoch {row['epoch']}: reward {row['mean_reward']:.4g} "
                  f"res {row['res_loss']:.4g} fail% {row['eval_fail_pct']:.4g}", flush=True)

    try:
        res = train(task, args.arch, cfg, args.seed, log_path=log,
                    progress=None if args.quiet else report)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    if res.actor.kind == "lqp":
        save_checkpoint(res.actor.params, out)
    else:
        save_mlp(res.actor.net, out)
    if not res.log:
        write_log([], log)
    print(f"checkpoint: {out}\nlog: {log}")
    return EXIT_OK


def cmd_eval(args):
    task = _task(args)
    ctrl = make_controller(args.controller, task)
    x0 = _floats(args.x0) if args.x0 else None
    if x0 is not None and x0.shape != (task.n_sys,):
        raise CliError(f"--x0 needs {task.n_sys} values", EXIT_USAGE)
    rep, traj = evaluate(ctrl, task, args.trials, args.seed, perturb=args.perturb, x0=x0, record=True)
    if args.out:
        write_metrics_csv([rep], args.out)
    if args.traj:
        write_trajectories_csv(traj, task.n_sys, task.m_sys, args.traj)
    w = csv.writer(sys.stdout)
    w.writerow(rep.COLUMNS)
    w.writerow(rep.row())
    return EXIT_OK


def cmd_bench(args):
    task = _task(args)
    reports = []
    for desc in args.controllers:
        ctrl = make_controller(desc, task)
        reports.append(evaluate(ctrl, task, args.trials, args.seed, perturb=args.perturb))
    if args.out:
        write_metrics_csv(reports, args.out)
    w = csv.writer(sys.stdout)
    w.writerow(reports[0].COLUMNS)
    for rep in reports:
        w.writerow(rep.row())
    return EXIT_OK


def _load_polytope(path):
    from .polytope import Polytope
    try:
        blocks = read_blocks(Path(path).read_text(encoding="utf-8").splitlines())
        return Polytope(blocks["G"], blocks["c"].reshape(-1))
    except (OSError, KeyError, FormatError, ValueError) as exc:
        raise CliError(f"cannot read polytope {path}: {exc}", EXIT_PARSE) from None


def cmd_verify(args):
    from . import golden
    from .mpc import lyapunov_cost_to_go
    from .policy import PolicyParams
    from .verify import (PreconditionError, StabilityConfig, assemble_feasibility,
                         assemble_stability, check_bb, export_qcqp, linearize_policy, parse_qcqp,
                         dumps_qcqp, sample_falsify, shrink)
    task = _task(args)
    if args.checkpoint:
        params = load_any_checkpoint(args.checkpoint)
        if not isinstance(params, PolicyParams):
            raise CliError("verification needs an LQPv1 checkpoint", EXIT_PARSE)
    else:
        params = golden.golden_params()
    if params.n_sys != task.n_sys:
        raise CliError("checkpoint does not match the task", EXIT_USAGE)
    if args.polytope:
        base = _load_polytope(args.polytope)
    elif args.printed_polytope:
        base = golden.printed_invariant_set()
    else:
        base = golden.invariant_set()
    X0, empty = shrink(base, args.margin, check_empty=True)
    if empty:
        raise CliError(f"shrinking by {args.margin} leaves an empty set", EXIT_USAGE)

    probes = _matrix(args.probes) if args.probes else 0.1 * np.eye(task.n_sys)
    K = linearize_policy(params, probes)
    print("K_hat:", np.array2string(K, precision=4))
    if args.pf:
        Pf = _matrix(args.pf)
    else:
        try:
            Pf = lyapunov_cost_to_go(task.linear, K)
        except ValueError as exc:
            Pf = None
            print(f"P_f: unavailable ({exc})")
    if Pf is not None:
        print("P_f:", np.array2string(Pf, precision=4).replace("\n", ""))

    feas_q = assemble_feasibility(params, task, X0)
    exports = []
    export_dir = Path(args.export_dir) if args.export_dir else None
    if export_dir:
        export_dir.mkdir(parents=True, exist_ok=True)
        export_qcqp(feas_q, export_dir / "feasibility.qcqp")
        exports.append((export_dir / "feasibility.qcqp", feas_q))
    stab_cfg = None if Pf is None else StabilityConfig(Pf, epsilon=args.epsilon)
    precondition = None
    try:
        check_bb(params)
    except PreconditionError as exc:
        precondition = exc
    if stab_cfg is not None and precondition is None and export_dir:
        stab_q = assemble_stability(params, task, X0, stab_cfg)
        export_qcqp(stab_q, export_dir / "stability.qcqp")
        exports.append((export_dir / "stability.qcqp", stab_q))
    for path, q in exports:
        same = dumps_qcqp(parse_qcqp(path)) == dumps_qcqp(q)
        print(f"exported {path} ({q.n_vars} vars, {q.n_cons} constraints, round-trip "
              f"{'ok' if same else 'MISMATCH'})")
        if not same:
            return EXIT_FAIL
    if args.export_only:
        return EXIT_OK

    status = EXIT_OK
    fr = sample_falsify("feasibility", params, task, X0, n_samples=args.samples, seed=args.seed)
    print(f"feasibility: min_value={fr.min_value:.6g} argmin_x0={_vec(fr.argmin_x0)} "
          f"counterexample={'yes' if fr.counterexample else 'no'} skipped={fr.n_skipped}")
    if fr.counterexample:
        print(f"counterexample x0={_vec(fr.argmin_x0)}")
        status = EXIT_FAIL
    if precondition is not None:
        print(f"stability: precondition failed: {precondition}", file=sys.stderr)
        return EXIT_PRECONDITION
    if stab_cfg is None:
        return EXIT_FAIL
    sr = sample_falsify("stability", params, task, X0, stab_cfg, n_samples=args.samples,
                        seed=args.seed)
    print(f"stability: min_value={sr.min_value:.6g} argmin_x0={_vec(sr.argmin_x0)} "
          f"counterexample={'yes' if sr.counterexample else 'no'} skipped={sr.n_skipped}")
    if sr.counterexample:
        status = EXIT_FAIL
    return status


def _vec(v):
    return "(" + ", ".join(f"{x:.6g}" for x in v) + ")"


# -- parser ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lqpkit", description="Learned QP controllers toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, task_required=True):
        sp.add_argument("--config", help="JSON file whose keys act as option defaults")
        g = sp.add_mutually_exclusive_group(required=False)
        g.add_argument("--task", choices=sorted(TASKS))
        g.add_argument("--task-config", help="JSON task definition")
        sp.add_argument("--seed", type=int, default=None, help="base seed (default: $LQPKIT_SEED or 0)")
        sp.set_defaults(task_required=task_required)

    t = sub.add_parser("train", help="train a policy with PPO")
    common(t)
    t.add_argument("--arch", required=True, help="lqp:N_QP,M_QP or mlp:N")
    t.add_argument("--epochs", type=int)
    t.add_argument("--n-envs", dest="n_envs", type=int)
    t.add_argument("--horizon", dest="horizon_length", type=int)
    t.add_argument("--minibatch", dest="minibatch_size", type=int)
    t.add_argument("--eval-trials", dest="eval_trials", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--perturb", action="store_true")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="training log CSV")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train, train=None)

    e = sub.add_parser("eval", help="evaluate one controller")
    common(e)
    e.add_argument("--controller", required=True)
    e.add_argument("--trials", type=int, default=1000)
    e.add_argument("--x0", help="fixed initial state, comma separated")
    e.add_argument("--length", type=int, help="override the episode length")
    e.add_argument("--noise-free", action="store_true")
    e.add_argument("--perturb", action="store_true")
    e.add_argument("--out", help="metrics CSV")
    e.add_argument("--traj", help="per-step trajectory CSV")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="evaluate several controllers on shared seeds")
    common(b)
    b.add_argument("--controllers", nargs="+", required=True)
    b.add_argument("--trials", type=int, default=1000)
    b.add_argument("--perturb", action="store_true")
    b.add_argument("--out", help="metrics CSV")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="assemble, export and falsify certificates")
    common(v)
    v.add_argument("--checkpoint", help="LQPv1 checkpoint (default: bundled reference policy)")
    v.add_argument("--polytope", help="block file with G and c (default: bundled invariant set)")
    v.add_argument("--printed-polytope", action="store_true",
                   help="use the two-decimal invariant set instead of the exact one")
    v.add_argument("--margin", type=float, default=0.2)
    v.add_argument("--samples", type=int, default=10_000)
    v.add_argument("--probes", help="probe states as rows, e.g. '0.1,0;0,0.1'")
    v.add_argument("--pf", help="terminal cost matrix, e.g. '5.64,12.59;12.59,58.40'")
    v.add_argument("--epsilon", type=float)
    v.add_argument("--export-dir")
    v.add_argument("--export-only", action="store_true")
    v.set_defaults(func=cmd_verify)
    return p


def _apply_config(parser, argv):
    """Re-parse with --config values as defaults so explicit flags still win."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config {args.config}: {exc}", EXIT_PARSE) from None
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object", EXIT_USAGE)
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions} | {"train"}
    unknown = set(cfg) - known
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_USAGE)
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.seed is None:
            args.seed = default_seed()
        if args.task_required and not (args.task or args.task_config):
            print(f"lqpkit {args.command}: error: one of --task or --task-config is required",
                  file=sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except CliError as exc:
        print(f"lqpkit: error: {exc}", file=sys.stderr)
        return exc.code
    except FormatError as exc:
        print(f"lqpkit: error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
