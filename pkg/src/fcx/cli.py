"""``fcx`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _shape(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return h, w


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="JSON config file; flags override its values")


def build_parser() -> _Parser:
    parser = _Parser(prog="fcx", description="Synthetic AFNO forecasting pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--grid", type=_shape, metavar="HxW")
    p.add_argument("--kappa", type=float)

    p = sub.add_parser("stats", help="recompute normalization statistics of a dataset")
    _common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("worker", help="serve training samples over TCP")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--listen", default="127.0.0.1:7070")
    p.add_argument("--crop", type=_shape, metavar="HxW")

    p = sub.add_parser("pretrain", help="single-step pretraining")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--workers", help="comma-separated host:port list")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("finetune", help="multi-step curriculum fine-tuning")
    _common(p)
    p.add_argument("--init", required=True, help="pretrained checkpoint directory")
    p.add_argument("--data")
    p.add_argument("--workers")
    p.add_argument("--max-steps", type=int, help="maximum rollout horizon of the curriculum")
    p.add_argument("--steps-per-increment", type=int)

    p = sub.add_parser("eval", help="score an autoregressive rollout")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rollout", type=int, default=1)
    p.add_argument("--n-ic", type=int, default=32)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a tiny model")
    _common(p)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("ablate", help="multi-seed ablation")
    _common(p)
    p.add_argument("--spec", required=True)
    return parser


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")


def _run_config(args):
    from .pretrain import RunConfig

    d = _load_json(args.config) if args.config else {}
    d.pop("curriculum", None)
    try:
        cfg = RunConfig.from_json(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if getattr(args, "data", None):
        over["data"] = args.data
    if getattr(args, "workers", None):
        over["workers"] = [w for w in args.workers.split(",") if w]
    cfg = replace(cfg, **over)
    if not cfg.data:
        raise UsageError("no dataset: pass --data or set \"data\" in the config")
    return cfg


def cmd_gen_data(args) -> int:
    from .synthdata import DatasetMeta, generate_dataset

    d = _load_json(args.config) if args.config else {}
    meta = DatasetMeta.from_json(d) if d else DatasetMeta()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.timesteps is not None:
        over["n_timesteps"] = args.timesteps
    if args.grid is not None:
        over["grid"] = args.grid
    if args.kappa is not None:
        over["kappa"] = args.kappa
    meta = replace(meta, **over)
    meta.validate()
    out = args.out or "data"
    info = generate_dataset(meta, out)
    print(f"wrote {meta.n_timesteps} frames to {out} digest={info['digest']}")
    return EXIT_OK


def cmd_stats(args) -> int:
    from .synthdata import Dataset, compute_stats, stats_json

    ds = Dataset(args.data)
    text = stats_json(compute_stats(ds, ds.train_range))
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_worker(args) -> int:
    from .shardnet import worker_serve

    try:
        worker_serve(args.data, args.listen, args.crop,
                     ready=lambda addr: print(f"listening on {addr[0]}:{addr[1]}", flush=True))
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .pretrain import pretrain

    cfg = _run_config(args)
    if args.max_steps is not None:
        cfg = replace(cfg, max_steps=args.max_steps)
    res = pretrain(cfg)
    print(f"checkpoint {res.checkpoint} final loss {res.losses[-1] if res.losses else float('nan'):.6g}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .finetune import CurriculumConfig, curriculum_finetune

    d = _load_json(args.config) if args.config else {}
    cur = CurriculumConfig(**d.get("curriculum", {}))
    cfg = _run_config(args)
    if args.out is None and not args.config:
        cfg = replace(cfg, out="runs/finetune")
    over = {}
    if args.max_steps is not None:
        over["max_time_steps"] = args.max_steps
    if args.steps_per_increment is not None:
        over["steps_per_increment"] = args.steps_per_increment
    cur = replace(cur, **over)
    res = curriculum_finetune(cfg, cur, args.init)
    print(f"checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalrep import evaluate_rollout
    from .synthdata import Dataset

    out = args.out or "report.csv"
    rep = evaluate_rollout(args.ckpt, Dataset(args.data), args.rollout, args.n_ic, out_csv=out)
    for k in rep.steps:
        print(f"step {k}: avg rmse {rep.avg(k):.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .afno import ArchConfig
    from .pretrain import TINY_ARCH, grad_check

    arch = ArchConfig.from_json(_load_json(args.config)) if args.config else ArchConfig(**TINY_ARCH)
    report = grad_check(arch, tol=args.tol, seed=args.seed or 0)
    text = "\n".join(report.lines())
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    from .ablate import AblationSpec, run_ablation

    try:
        spec = AblationSpec.from_json(_load_json(args.spec))
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))
    if args.seed is not None:
        spec.seeds = [args.seed]
    res = run_ablation(spec, args.out or "results")
    print(json.dumps(res.verdicts, indent=1, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "stats": cmd_stats, "worker": cmd_worker, "pretrain": cmd_pretrain,
    "finetune": cmd_finetune, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "fcx: error: a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every failure maps to the runtime exit code
        logging.getLogger("fcx").debug("command failed", exc_info=True)
        print(f"fcx: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
