"""The defscan command line.

Subcommands: train, eval, gradcheck, bench-scan, scan-viz.  Failures exit
nonzero after printing a single line whose prefix is a machine-parseable
error code (E_CONFIG, E_INPUT, E_FORMAT, E_DIM, E_DIVERGED, E_INTERNAL).
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace

from .bench import bench_scan
from .checkpoint import load_checkpoint, load_into_model
from .config import load_config, parse_config
from .data import synth_dataset
from .errors import DefscanError
from .gradcheck import SCOPES, run_gradcheck
from .model import build_model
from .train import evaluate, run_training


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defscan")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic data per a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's output dir")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", default="all", choices=SCOPES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force-lattice", action="store_true",
                   help="pin offsets to lattice lines to demonstrate skipping")

    p = sub.add_parser("bench-scan", help="scan-strategy ablation grids")
    p.add_argument("--config", required=True)

    p = sub.add_parser("scan-viz", help="render scan paths as P6 images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="path to a P6 file or synth:<idx>")
    p.add_argument("--out", required=True)
    return parser


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    started = time.monotonic()
    result = run_training(cfg, log=print)
    print(f"steps={result.steps_run} final_loss={result.final_loss:.4f} "
          f"final_batch_acc={result.final_train_acc:.3f}")
    print(f"metrics={result.metrics_path}")
    print(f"checkpoint={result.checkpoint_path}")
    print(f"elapsed_s={time.monotonic() - started:.1f}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    config_text, tensors = load_checkpoint(args.ckpt)
    ckpt_cfg = parse_config(config_text)
    model = build_model(cfg.model, seed=ckpt_cfg.train.seed)
    load_into_model(model, tensors)
    eval_set = synth_dataset(cfg.data.kind, cfg.data.eval_n, cfg.data.seed + 1)
    loss, acc = evaluate(model, eval_set)
    print(f"eval_loss={loss!r} eval_acc={acc!r} n={len(eval_set)}")
    return 0


def _cmd_gradcheck(args) -> int:
    results, ok = run_gradcheck(args.scope, seed=args.seed,
                                force_lattice=args.force_lattice)
    for r in results:
        print(r.line())
    print(f"gradcheck scope={args.scope} {'OK' if ok else 'FAILED'}")
    return 0 if ok else 1


def _cmd_bench(args) -> int:
    cfg = load_config(args.config)
    path = bench_scan(cfg, log=print)
    print(f"bench={path}")
    return 0


def _cmd_scan_viz(args) -> int:
    from .viz import scan_viz
    for path in scan_viz(args.ckpt, args.image, args.out):
        print(f"wrote={path}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "bench-scan": _cmd_bench,
    "scan-viz": _cmd_scan_viz,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DefscanError as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"E_INPUT: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
