"""Command line entry point: ``rcdistill {eval,loss,gradcheck,demo}``.

Results go to stdout, diagnostics to stderr.  Exit codes: 0 success, 1 usage,
2 bad data or files, 3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import config as cfg
from . import gradcheck, tensor
from .depth_loss import EmptySupervisionError, NonFiniteLossError, total_loss, urdl
from .losses import feature_l1_pyramid, inter_depth_distill_loss, structure_distill_loss
from .metrics import EmptyValidSetError, aggregate, evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("rcdistill")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- eval ---------------------------------------------------------------------------


def cmd_eval(args, conf: cfg.Config) -> int:
    if len(args.files) % 2:
        raise UsageError("eval expects PRED GT pairs")
    pairs = [(tensor.load(p), tensor.load(g)) for p, g in zip(args.files[::2], args.files[1::2])]
    caps = [args.cap] if args.cap is not None else list(conf.caps)
    blocks = []
    for cap in caps:
        reports = []
        for pred, gt in pairs:
            try:
                reports.append(evaluate(pred, gt, cap))
            except EmptyValidSetError:
                if len(pairs) == 1:
                    raise
        if not reports:
            raise EmptyValidSetError(f"empty valid set: no ground truth in (0, {cap}]")
        blocks.append(aggregate(reports).format())
    print("\n\n".join(blocks))
    return EXIT_OK


# --- loss ---------------------------------------------------------------------------


def _load_all(paths) -> list:
    return [tensor.load(p) for p in paths]


def _level_paths(out: str, n: int, tag: str = "") -> list[Path]:
    """``grad.rcdt`` -> ``grad[.tag].1.rcdt`` ... ``grad[.tag].n.rcdt``."""
    path = Path(out)
    stem = path.name[: -len(path.suffix)] if path.suffix else path.name
    return [path.with_name(f"{stem}{tag}.{i}{path.suffix}") for i in range(1, n + 1)]


def _write_grads(out: str, grads: dict) -> None:
    """Write each gradient entry; pyramids become one file per level.

    A lone entry keeps the plain name; entries of a combined objective are
    tagged with their component, except the prediction gradient.
    """
    single = len(grads) == 1
    for key, value in grads.items():
        component = key.split(".", 1)[0]
        tag = "" if single else f".{component}"
        if isinstance(value, list):
            for path, g in zip(_level_paths(out, len(value), tag), value):
                tensor.save(path, g)
        elif single or key == "depth.pred":
            tensor.save(out, value)
        else:
            path = Path(out)
            tensor.save(path.with_name(f"{path.stem}{tag}{path.suffix}"), value)
        log.info("wrote gradient %s", key)


def _pair(args, name: str):
    student = getattr(args, f"{name}_student")
    teacher = getattr(args, f"{name}_teacher")
    if not student or not teacher:
        return None
    return _load_all(student), _load_all(teacher)


def cmd_loss(args, conf: cfg.Config) -> int:
    kind = args.kind
    if kind in ("urdl", "total"):
        if not (args.pred and args.dense and args.sparse):
            raise UsageError(f"loss {kind} needs --pred, --dense and --sparse")
        pred, dense, sparse = tensor.load(args.pred), tensor.load(args.dense), tensor.load(args.sparse)
        depth = urdl(pred, dense, sparse, conf.beta, conf.detach_u)
        if kind == "urdl":
            result = depth
        else:
            gamma = conf.loss_weights()
            parts = {}
            makers = {
                "kd_i": ("camera", feature_l1_pyramid),
                "kd_r": ("radar", feature_l1_pyramid),
                "kd_dec": ("decoder", structure_distill_loss),
                "kd_d": ("inter", lambda s, t: inter_depth_distill_loss(s, t, conf.beta, conf.detach_u)),
            }
            for (key, (name, fn)), g in zip(makers.items(), gamma.as_tuple()):
                pair = _pair(args, name)
                if g == 0:
                    parts[key] = None
                    continue
                if pair is None:
                    raise UsageError(f"gamma for {key} is {g}; pass --{name}-student and --{name}-teacher or set it to 0")
                parts[key] = fn(*pair)
            result = total_loss(depth, parts["kd_i"], parts["kd_r"], parts["kd_dec"], parts["kd_d"], gamma)
    else:
        if not (args.student and args.teacher):
            raise UsageError(f"loss {kind} needs --student and --teacher files")
        student, teacher = _load_all(args.student), _load_all(args.teacher)
        if kind == "feat":
            result = feature_l1_pyramid(student, teacher)
        elif kind == "struct":
            result = structure_distill_loss(student, teacher)
        else:
            result = inter_depth_distill_loss(student, teacher, conf.beta, conf.detach_u)
    print(repr(float(result.value)))
    if args.grad:
        _write_grads(args.grad, result.grads)
    return EXIT_OK


# --- gradcheck ----------------------------------------------------------------------


def cmd_gradcheck(args, conf: cfg.Config) -> int:
    names = gradcheck.op_names()
    if args.op != "all" and args.op not in names:
        raise UsageError(f"unknown op {args.op!r}; choose from: all, {', '.join(names)}")
    ops = names if args.op == "all" else [args.op]
    reports = []
    print(f"{'op':<20} {'max_rel':>10} {'max_abs':>10} {'points':>8} {'tol':>8}  status")
    for op in ops:
        report = gradcheck.check(op, seed=args.seed)
        reports.append(report)
        print(report.row(), flush=True)
    if args.records:
        with open(args.records, "w", encoding="utf-8") as fh:
            for report in reports:
                fh.write("\t".join(f"{k}={v!r}" for k, v in report.as_dict().items()) + "\n")
    failed = [r.op for r in reports if not r.passed]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


# --- demo ---------------------------------------------------------------------------


def _kd_flags(text: str) -> tuple[bool, ...]:
    if text == "on":
        return (True,) * 4
    if text == "off":
        return (False,) * 4
    if len(text) == 4 and set(text) <= {"0", "1"}:
        return tuple(c == "1" for c in text)
    raise UsageError(f"--kd takes on, off or four 0/1 digits (kd_i kd_r kd_dec kd_d), got {text!r}")


def cmd_demo(args, conf: cfg.Config) -> int:
    from .toy import DivergenceError, ablation_grid, train

    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides.get("steps", 1) < 1:
        raise UsageError("--steps must be >= 1")
    base = conf.train_config(**overrides)
    try:
        if args.grid:
            for flags, report in ablation_grid(base):
                bits = "".join("1" if f else "0" for f in flags)
                print(f"kd={bits}\tmae={report.mae!r}\trmse={report.rmse!r}\tabsrel={report.absrel!r}")
            return EXIT_OK
        history = train(replace(base, kd_enabled=_kd_flags(args.kd)))
    except DivergenceError as err:
        log.error("%s", err)
        return EXIT_VERIFY
    if args.out:
        Path(args.out).write_text(history.to_text(), encoding="utf-8")
        log.info("wrote %d history records to %s", len(history.records), args.out)
    print(history.final.format())
    return EXIT_OK


# --- wiring -------------------------------------------------------------------------


def _add_pyramid_pair(p, name: str, help_name: str):
    p.add_argument(f"--{name}-student", nargs="+", metavar="FILE", help=f"student {help_name} levels")
    p.add_argument(f"--{name}-teacher", nargs="+", metavar="FILE", help=f"teacher {help_name} levels")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key = value config file")
    common.add_argument("--beta", type=float, help="uncertainty scale")
    common.add_argument("--gamma", type=float, nargs=4, metavar=("G1", "G2", "G3", "G4"), help="distillation weights")
    common.add_argument("--detach-u", action=argparse.BooleanOptionalAction, default=None, help="treat uncertainty weights as constants")
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true", help="more diagnostics on stderr")

    parser = _Parser(prog="rcdistill", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("eval", parents=[common], help="depth metrics of predictions against ground truth")
    p.add_argument("files", nargs="+", metavar="PRED GT", help="one or more prediction/ground-truth .rcdt pairs")
    p.add_argument("--cap", type=float, help="evaluation distance cap in meters (default: every configured cap)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss", parents=[common], help="a loss value and optionally its gradient")
    p.add_argument("kind", choices=("urdl", "feat", "struct", "interdepth", "total"))
    p.add_argument("--pred", help="predicted depth (urdl, total)")
    p.add_argument("--dense", help="dense ground truth (urdl, total)")
    p.add_argument("--sparse", help="sparse ground truth (urdl, total)")
    p.add_argument("--student", nargs="+", metavar="FILE", help="student levels (feat, struct, interdepth)")
    p.add_argument("--teacher", nargs="+", metavar="FILE", help="teacher levels (feat, struct, interdepth)")
    _add_pyramid_pair(p, "camera", "camera feature")
    _add_pyramid_pair(p, "radar", "radar feature")
    _add_pyramid_pair(p, "decoder", "decoder feature")
    _add_pyramid_pair(p, "inter", "intermediate depth")
    p.add_argument("--grad", metavar="OUT.rcdt", help="write the gradient here (per-level files for pyramids)")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic gradients against finite differences")
    p.add_argument("--op", default="all", help="operation name or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--records", metavar="FILE", help="also write one key=value record per op")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("demo", parents=[common], help="train the toy student with or without distillation")
    p.add_argument("--kd", default="on", help="on, off, or four 0/1 digits for kd_i kd_r kd_dec kd_d")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="FILE", help="write the per-step history here")
    p.add_argument("--grid", action="store_true", help="run all 16 on/off combinations instead")
    p.set_defaults(func=cmd_demo)
    return parser


def resolve_config(args) -> cfg.Config:
    conf = cfg.load(args.config) if args.config else cfg.Config()
    values = {}
    if args.beta is not None:
        values["beta"] = args.beta
    if args.gamma is not None:
        values.update(gamma1=args.gamma[0], gamma2=args.gamma[1], gamma3=args.gamma[2], gamma4=args.gamma[3])
    if args.detach_u is not None:
        values["detach_u"] = args.detach_u
    return conf.updated(**values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as stop:  # --help or a usage error already reported
        return stop.code if isinstance(stop.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        conf = resolve_config(args)
        if args.print_config:
            sys.stdout.write(conf.dumps())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args, conf)
    except UsageError as err:
        print(f"rcdistill: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"rcdistill: error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (cfg.ConfigError, tensor.TensorFormatError, EmptyValidSetError, EmptySupervisionError, NonFiniteLossError) as err:
        print(f"rcdistill: error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as err:
        print(f"rcdistill: error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
