"""Command-line entry point.

Subcommands: gen-data, train, infer, eval, ablate, gradcheck. Options
live in a flat dotted-key JSON config overridable by flags (flags win);
the resolved config is written into every run's output directory.

Exit codes: 0 success, 2 usage/config, 3 data, 4 numeric failure.
"""

import argparse
import sys

from . import config as C
from .errors import (ConfigError, DataError, GraphError, NumericDomainError,
                     ParameterError, SeamcamError)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_config_flag(parser):
    parser.add_argument("--config", help="JSON file with dotted config keys")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="seamcam",
        description="Consistency-regularized class activation maps on "
                    "synthetic shapes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    _add_config_flag(p)
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("train", help="train a model")
    _add_config_flag(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--mode", choices=["baseline", "er", "seam"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--keep-fraction", type=float)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--resume", action="store_true", default=None)
    p.add_argument("--rescale-rate", type=float)
    p.add_argument("--rotation-deg", type=float)
    p.add_argument("--translation-px", type=int)
    p.add_argument("--hflip", action="store_true", default=None)

    p = sub.add_parser("infer", help="export fused CAMs and pseudo-labels")
    _add_config_flag(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--scales")
    p.add_argument("--flip", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--use-pcm", type=int)

    p = sub.add_parser("eval", help="threshold sweep, metrics, equivariance error")
    _add_config_flag(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--scales")
    p.add_argument("--flip", type=int)
    p.add_argument("--alpha-grid")
    p.add_argument("--eq-scales")
    p.add_argument("--use-pcm", type=int)
    p.add_argument("--per-scale", type=int)

    p = sub.add_parser("ablate", help="aggregate eval runs into one table")
    _add_config_flag(p)
    p.add_argument("--runs", help="comma-separated eval output directories")
    p.add_argument("--out")

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every op and the full graph")
    p.add_argument("--skip-end-to-end", action="store_true")
    return parser


def _overrides(args, mapping):
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr)
        if value is not None:
            out[key] = value
    return out


def _cmd_gen_data(args):
    from .data import generate_dataset
    cfg = C.resolve(C.GEN_DATA_DEFAULTS, args.config, _overrides(args, {
        "n": "gen.n", "size": "gen.size", "seed": "gen.seed", "out": "gen.out"}))
    manifest = generate_dataset(int(cfg["gen.n"]), int(cfg["gen.size"]),
                                int(cfg["gen.seed"]), C.require(cfg, "gen.out"))
    print(f"wrote {manifest.count} samples to {cfg['gen.out']}")
    return 0


def _cmd_train(args):
    from .runner import run_training
    cfg = C.resolve(C.TRAIN_DEFAULTS, args.config, _overrides(args, {
        "data": "train.data", "out": "train.out", "mode": "train.mode",
        "steps": "train.steps", "batch_size": "train.batch_size",
        "lr": "train.lr_init", "seed": "train.seed",
        "keep_fraction": "train.keep_fraction",
        "checkpoint_interval": "train.checkpoint_interval",
        "resume": "train.resume", "rescale_rate": "transform.rescale_rate",
        "rotation_deg": "transform.rotation_deg",
        "translation_px": "transform.translation_px", "hflip": "transform.hflip"}))
    _, steps = run_training(cfg)
    print(f"trained {steps} steps; artifacts in {cfg['train.out']}")
    return 0


def _cmd_infer(args):
    from .runner import run_inference
    cfg = C.resolve(C.INFER_DEFAULTS, args.config, _overrides(args, {
        "checkpoint": "infer.checkpoint", "data": "infer.data", "out": "infer.out",
        "scales": "infer.scales", "flip": "infer.flip", "alpha": "infer.alpha",
        "use_pcm": "infer.use_pcm"}))
    out_dir = run_inference(cfg)
    print(f"inference artifacts in {out_dir}")
    return 0


def _cmd_eval(args):
    from .runner import run_evaluation
    cfg = C.resolve(C.EVAL_DEFAULTS, args.config, _overrides(args, {
        "checkpoint": "eval.checkpoint", "data": "eval.data", "out": "eval.out",
        "scales": "eval.scales", "flip": "eval.flip", "alpha_grid": "eval.alpha_grid",
        "eq_scales": "eval.eq_scales", "use_pcm": "eval.use_pcm",
        "per_scale": "eval.per_scale"}))
    report = run_evaluation(cfg)
    sys.stdout.write(report.to_text())
    return 0


def _cmd_ablate(args):
    from .runner import run_ablation
    cfg = C.resolve(C.ABLATE_DEFAULTS, args.config, _overrides(args, {
        "runs": "ablate.runs", "out": "ablate.out"}))
    table = run_ablation(cfg)
    sys.stdout.write(table)
    return 0


def _cmd_gradcheck(args):
    from .gradcheck import END_TO_END_TOL, PER_OP_TOL, run_all
    results = run_all(end_to_end=not args.skip_end_to_end)
    worst_name = max(results, key=results.get)
    failed = False
    for name, err in results.items():
        tol = END_TO_END_TOL if name == "end_to_end" else PER_OP_TOL
        status = "PASS" if err < tol else "FAIL"
        failed |= status == "FAIL"
        print(f"{name:28s} {err:12.3e}  {status}")
    print(f"worst: {worst_name} ({results[worst_name]:.3e})")
    return EXIT_NUMERIC if failed else 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "infer": _cmd_infer,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericDomainError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SeamcamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
