"""``fm3d`` command line: plan, train, eval, gradcheck, ratio."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import parse_config
from .data import load_csv, load_idx
from .errors import FM3DError
from .filtermap import FilterMapSpec, map_dims, param_ratio
from .netdesc import parse_net_description, plan_description
from .nn import grad_check
from .planner import render_plan_report
from .train import build_from_config, evaluate_checkpoint, load_datasets, train

GRADCHECK_BATCH = 4


def _triple(text):
    parts = tuple(int(p) for p in text.replace("x", ",").split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three integers, got {text!r}")
    return parts


def _emit(text, out=None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_plan(args):
    plan = plan_description(parse_net_description(args.net))
    _emit(render_plan_report(plan, args.format), args.out)
    return 0


def _config(args):
    config = parse_config(args.config)
    return config.with_overrides(grad_mode=args.grad_mode, seed=args.seed,
                                 output_dir=Path(args.out) if args.out else None,
                                 variant=getattr(args, "variant", None),
                                 epochs=getattr(args, "epochs", None))


def cmd_train(args):
    config = _config(args)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    result = train(config, resume=args.resume, log=log)
    summary = {
        "variant": config.variant,
        "grad_mode": config.grad_mode,
        "params": result.model.param_count(),
        "planned_params": result.plan.total_planned,
        "baseline_params": result.plan.total_baseline,
        "final": result.metrics[-1] if result.metrics else None,
        "checkpoint": str(result.checkpoint_path),
    }
    print(json.dumps(summary))
    return 0


def cmd_eval(args):
    if len(args.data) == 2:
        dataset = load_idx(*args.data)
    elif len(args.data) == 1:
        dataset = load_csv(args.data[0], args.channels)
    else:
        raise SystemExit("eval takes <images.idx> <labels.idx> or one <data.csv>")
    acc, loss = evaluate_checkpoint(args.checkpoint, dataset)
    if args.format == "structured":
        print(json.dumps({"accuracy": acc, "mean_loss": loss, "n": len(dataset)}))
    else:
        print(f"accuracy {acc:.6f}  mean_loss {loss:.6f}  n {len(dataset)}")
    return 0


def cmd_gradcheck(args):
    config = _config(args).with_overrides(precision="double")
    desc, model, plan, _ = build_from_config(config, dtype=np.float64)
    train_set, _ = load_datasets(config, desc.input_shape)
    x = train_set.images[:GRADCHECK_BATCH]
    y = train_set.labels[:GRADCHECK_BATCH]
    report = grad_check(model, x, y, epsilon=args.epsilon, threshold=args.threshold,
                        scale_average=config.grad_mode == "average")
    rec = {"grad_mode": config.grad_mode, "max_rel_err": report.max_rel_err,
           "worst_index": list(map(str, report.worst_index)), "checked": report.checked,
           "passed": report.passed}
    if args.format == "structured":
        print(json.dumps(rec))
    else:
        print(f"gradcheck ({config.grad_mode} mode, {report.checked} coordinates): "
              f"max rel err {report.max_rel_err:.3e} at {report.worst_index} -> "
              f"{'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def cmd_ratio(args):
    s1, s2, c = args.filter
    spec = FilterMapSpec.build(s1, s2, c, args.grid, args.strides)
    ratio = param_ratio(spec)
    dims = map_dims(spec)
    if args.format == "structured":
        print(json.dumps({"map_dims": list(dims), "ratio": f"{ratio.numerator}/{ratio.denominator}",
                          "filters": spec.num_filters}))
    else:
        print(f"map {dims[0]}x{dims[1]}x{dims[2]}  filters {spec.num_filters}  "
              f"ratio {ratio.numerator}/{ratio.denominator}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fm3d", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fm3d {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fmt=True):
        if fmt:
            p.add_argument("--format", choices=("text", "structured"), default="text")

    p = sub.add_parser("plan", help="plan a network description and report parameter counts")
    p.add_argument("net")
    p.add_argument("--out", help="write the report to this file instead of stdout")
    common(p)
    p.set_defaults(func=cmd_plan)

    for name, func, helptext in (("train", cmd_train, "train a network from a run config"),
                                 ("gradcheck", cmd_gradcheck,
                                  "finite-difference check of the run's network")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config")
        p.add_argument("--grad-mode", choices=("sum", "average"))
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--variant", choices=("fm", "baseline"))
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--resume", help="checkpoint to continue from")
            p.add_argument("--quiet", action="store_true")
        else:
            p.add_argument("--epsilon", type=float, default=1e-5)
            p.add_argument("--threshold", type=float, default=1e-5)
            common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on IDX or CSV data")
    p.add_argument("checkpoint")
    p.add_argument("data", nargs="+")
    p.add_argument("--channels", type=int, default=1, help="channels per CSV row")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ratio", help="parameter ratio of one filter-map layer")
    p.add_argument("--filter", type=_triple, required=True, metavar="S1,S2,C")
    p.add_argument("--grid", type=_triple, required=True, metavar="K1,K2,K3")
    p.add_argument("--strides", type=_triple, required=True, metavar="X,Y,Z")
    common(p)
    p.set_defaults(func=cmd_ratio)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FM3DError as exc:
        print(f"fm3d {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
