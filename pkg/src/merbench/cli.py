"""Command-line entry point: ``merbench <command> [options]``.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 data error (missing or malformed inputs), 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .attack import AttackError
from .container import FormatError
from .datapipe import IngestionError, ValidationError
from .models import ConfigError
from .training import NumericalError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4

log = logging.getLogger("merbench")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config (applied on top of the preset)")
    common.add_argument("--preset", choices=sorted(pipeline.PRESETS), default=None,
                        help="starting point for the config (default: full-scale settings)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--seeds", type=int, metavar="N", help="number of random initializations")
    common.add_argument("--variant", choices=["a2e", "a2b2e", "a2m2e"], help="restrict to one model variant")
    common.add_argument("--adversarial", action="store_true", help="select the adversarially trained variant")
    common.add_argument("--workers", type=int, default=1, metavar="N", help="parallel training processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="merbench",
                                     description="Adversarial robustness of music emotion regressors.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="build the spectrogram cache")
    synth = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus into the cache")
    synth.add_argument("--n", type=int, help="number of synthetic clips")
    sub.add_parser("train", parents=[common], help="train all seeds of the selected variant(s)")
    sub.add_parser("attack", parents=[common], help="attack the test split with every trained run")
    sub.add_parser("report", parents=[common], help="write the report bundle")
    sub.add_parser("run", parents=[common], help="prepare, train, attack and report in one go")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    return parser


def resolve_config(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.load_config(args.config, args.preset)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        cfg = replace(cfg, train=replace(cfg.train, n_seeds=args.seeds))
    if args.variant:
        label = ("a" if args.adversarial else "") + args.variant.upper()
        if label not in pipeline.ALL_VARIANTS:
            raise ConfigError(f"{args.variant.upper()} has no adversarially trained counterpart")
        cfg = replace(cfg, variants=(label,))
    elif args.adversarial:
        cfg = replace(cfg, variants=tuple(v for v in cfg.variants if v.startswith("a")))
    if getattr(args, "n", None) is not None:
        cfg = replace(cfg, data=replace(cfg.data, kind="synthetic", n=args.n))
    return cfg


def _gradcheck(args) -> int:
    from .gradcheck import run_suite, summarize

    seeds = range(args.seeds if args.seeds is not None else 10)
    results = run_suite(seeds=seeds, log=log.info)
    table = summarize(results)
    width = max(len(k) for k in table)
    print(f"{'case':<{width}}  max rel. err  checked  excluded  result")
    for case, row in table.items():
        print(f"{case:<{width}}  {row['max_rel_error']:12.3e}  {row['checked']:7d}  {row['excluded']:8d}  "
              f"{'pass' if row['passed'] else 'FAIL'}")
    ok = all(row["passed"] for row in table.values())
    print("gradient check:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def dispatch(args) -> int:
    if args.command == "gradcheck":
        return _gradcheck(args)
    cfg = resolve_config(args)
    pipeline.save_effective_config(cfg)
    variant = args.variant
    if args.command in ("prepare", "synth"):
        manifest, did_work = pipeline.cmd_prepare(cfg)
        print(f"{manifest}: {'written' if did_work else 'already complete'}")
    elif args.command == "train":
        for art in pipeline.cmd_train(cfg, variant, args.adversarial, args.workers):
            print(f"{art.variant} seed {art.seed}: best epoch {art.best_epoch}, val loss {art.best_val_loss:.5f}")
    elif args.command == "attack":
        for (label, seed), side in pipeline.cmd_attack(cfg, variant, args.adversarial).items():
            print(f"{label} seed {seed}: {side['iterations_run']} iterations ({side['stop_reason']})")
    elif args.command in ("report", "run"):
        report = pipeline.cmd_run(cfg, args.workers) if args.command == "run" else pipeline.cmd_report(cfg)
        print((Path(cfg.out) / "report" / "table1.md").read_text(), end="")
        if report["gaps"]:
            print(json.dumps(report["gaps"], indent=1))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, FormatError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, AttackError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
