"""Command-line entry points.

Subcommands: ``train``, ``evaluate``, ``compare``, ``gradcheck``,
``project``.  Exit codes: 0 on success, 1 for validation errors (bad
config, bad shapes, infeasible inputs), 2 for runtime or numeric failures.
Relative ``--out`` paths resolve under ``$EVBALANCE_OUTPUT_ROOT`` when that
variable is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from . import evaluation, trainer
from .errors import ValidationError
from .nets import gradcheck_suite
from .projection import (Box, HPolytope, SimplexProduct, dykstra_project,
                         lp_vertex_argmax, project_box, project_simplex)

OUTPUT_ROOT_ENV = "EVBALANCE_OUTPUT_ROOT"


def _resolve_out(path):
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _bool_flag(text):
    lowered = str(text).lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _csv_floats(text):
    return np.array([float(x) for x in text.split(",")])


def _csv_ints(text):
    return tuple(int(x) for x in text.split(","))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="evbalance",
        description="Robust fleet-balancing MARL: train, evaluate, inspect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train policies on a scenario")
    p_train.add_argument("--config", required=True, help="run-config YAML")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--baseline", type=_bool_flag, default=None,
                         help="disable the adversary (non-robust mode)")
    p_train.add_argument("--out", default=None, help="output directory")
    p_train.add_argument("--quiet", action="store_true")

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint under noise")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--scenario", required=True)
    p_eval.add_argument("--noise", type=float, default=1.0)
    p_eval.add_argument("--seeds", type=_csv_ints, default=(1, 2, 3, 4, 5))
    p_eval.add_argument("--beta", type=float, default=1.0)
    p_eval.add_argument("--out", default=None, help="report JSON path")

    p_cmp = sub.add_parser("compare", help="compare two evaluation reports")
    p_cmp.add_argument("--a", required=True, help="candidate report JSON")
    p_cmp.add_argument("--b", required=True, help="reference report JSON")
    p_cmp.add_argument("--name-a", default="A")
    p_cmp.add_argument("--name-b", default="B")
    p_cmp.add_argument("--out", default=None, help="comparison CSV path")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient sweep")
    p_grad.add_argument("--cases", type=int, default=100)
    p_grad.add_argument("--seed", type=int, default=0)

    p_proj = sub.add_parser("project", help="project a vector onto a domain")
    p_proj.add_argument("--vector", type=_csv_floats, required=True)
    p_proj.add_argument("--domain", choices=("simplex", "box", "simplex-product"),
                        required=True)
    p_proj.add_argument("--blocks", type=_csv_ints, default=None,
                        help="block lengths for simplex-product")
    p_proj.add_argument("--lower", type=_csv_floats, default=None)
    p_proj.add_argument("--upper", type=_csv_floats, default=None)
    p_proj.add_argument("--dykstra", action="store_true",
                        help="solve via Dykstra on the H-representation")
    p_proj.add_argument("--tol", type=float, default=1e-8)
    p_proj.add_argument("--gradient", type=_csv_floats, default=None,
                        help="also report the vertex maximizing this objective")
    return parser


def cmd_train(args):
    cfg = cfgmod.parse_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.baseline is not None:
        cfg.baseline = args.baseline
    if args.out is not None:
        cfg.out_dir = args.out
    out_dir = _resolve_out(cfg.out_dir)
    scenario = cfgmod.parse_scenario(cfg.scenario)
    cfgmod.write_effective_config(cfg, out_dir)
    started = time.time()
    reporter = None
    if not args.quiet:
        def reporter(m):
            print(f"episode {m.episode:4d}  reward {m.mean_reward:9.4f}  "
                  f"u_c {m.mean_u_c:9.4f}  u_s {m.mean_u_s:9.4f}")
    ts = trainer.train(cfg, scenario, out_dir=out_dir, progress=reporter)
    print(f"trained {cfg.episodes} episodes in {time.time() - started:.1f}s; "
          f"metrics and checkpoints in {out_dir}")
    return 0


def cmd_evaluate(args):
    scenario = cfgmod.parse_scenario(args.scenario)
    report = evaluation.evaluate(args.checkpoint, scenario,
                                 noise_sigma=args.noise, seeds=args.seeds,
                                 beta=args.beta)
    text = report.to_json()
    if args.out:
        out = _resolve_out(args.out)
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
        with open(out, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")
        print(f"wrote {out}")
    else:
        print(text)
    return 0


def cmd_compare(args):
    with open(args.a, "r", encoding="utf-8") as handle:
        report_a = evaluation.EvalReport.from_json(handle.read())
    with open(args.b, "r", encoding="utf-8") as handle:
        report_b = evaluation.EvalReport.from_json(handle.read())
    rows = evaluation.compare(report_a, report_b)
    print(evaluation.comparison_table(rows, args.name_a, args.name_b))
    if args.out:
        out = _resolve_out(args.out)
        with open(out, "w", encoding="utf-8", newline="") as handle:
            handle.write(evaluation.comparison_csv(rows))
        print(f"wrote {out}")
    return 0


def cmd_gradcheck(args):
    started = time.time()
    worst = gradcheck_suite(cases=args.cases, seed=args.seed)
    elapsed = time.time() - started
    print(f"max relative gradient error over {args.cases} cases: {worst:.3e} "
          f"({elapsed:.1f}s)")
    if worst > 1e-4:
        print("FAIL: exceeds 1e-4")
        return 2
    print("PASS")
    return 0


def cmd_project(args):
    vec = args.vector
    if args.domain == "simplex":
        domain = SimplexProduct((vec.size,))
    elif args.domain == "simplex-product":
        if args.blocks is None:
            raise ValidationError("--blocks is required for simplex-product")
        domain = SimplexProduct(args.blocks)
    else:
        if args.lower is None or args.upper is None:
            raise ValidationError("--lower and --upper are required for box")
        domain = Box(lower=args.lower, upper=args.upper)
    poly = domain.as_hpolytope()
    if args.dykstra:
        projected = dykstra_project(vec, poly, tol=args.tol)
    elif isinstance(domain, Box):
        projected = project_box(vec, domain)
    else:
        projected = domain.project(vec)
    print("input:     ", np.array2string(vec, precision=8))
    print("projection:", np.array2string(projected, precision=8))
    print(f"residual:   {poly.residual(projected):.3e}")
    print(f"distance:   {np.linalg.norm(projected - vec):.8f}")
    if args.gradient is not None:
        vertex = lp_vertex_argmax(args.gradient, domain)
        print("lp vertex: ", np.array2string(np.asarray(vertex), precision=8))
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "project": cmd_project,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
