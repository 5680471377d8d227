"""Command-line entry point: ``dualnda <command> --run-dir DIR [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as C
from . import pipeline as P
from .errors import ConfigError, DualNdaError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _seed_args(p):
    p.add_argument("--seed", type=int, default=None, help="training seed (default: train.seed)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualnda", description="Continuous conditional GAN training with "
                                 "dual negative data augmentation, at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--run-dir", required=True, help="directory holding all artifacts of one experiment")
        p.add_argument("--config", default=None, help="YAML file merged over the defaults")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. train.steps=500 (repeatable)")
        return p

    add("make-data", "render the synthetic corpus or import an image folder")
    add("fit-niqe", "fit the NIQE reference model on the training corpus")
    _seed_args(add("train-baseline", "train the vicinal baseline (keeps the warm-start checkpoint)"))
    p = add("build-negatives", "build the Type II pool from the final baseline generator")
    _seed_args(p)
    p.add_argument("--mode", choices=("integer", "continuous"), default=None)
    p.add_argument("--q2", type=float, default=None)
    p.add_argument("--per-label", type=int, default=None, help="images generated per distinct label (integer mode)")
    p.add_argument("--M", type=int, default=None, help="images generated in total (continuous mode)")
    _seed_args(add("train-dualnda", "resume from the warm-start checkpoint with Dual-NDA switched on"))
    for name, help_ in (("sample", "sample a fake set at the evaluation centers"),
                        ("eval", "compute SFID, NIQE, Diversity and Label Score per center")):
        p = add(name, help_)
        _seed_args(p)
        p.add_argument("--phase", default="dualnda", help="trained phase to use (baseline, dualnda, ...)")
    p = add("ablate", "run the q1, q2, lambda-sum and negative-type ablation grids")
    p.add_argument("--axis", action="append", choices=P.AXES, default=None, help="restrict to one axis (repeatable)")
    add("report", "rebuild figure-shaped CSVs from existing evaluation reports")
    return ap


def run(args) -> None:
    snapshot = Path(args.run_dir) / "config.yaml"
    if args.config is None and snapshot.exists():
        # later commands inherit the resolved config of the run directory
        cfg = C.load_config(snapshot, args.overrides, expand_preset=False)
    else:
        cfg = C.load_config(args.config, args.overrides)
    run = P.Run(args.run_dir, cfg)
    run.write_snapshot()
    cmd = args.command
    if cmd == "make-data":
        ds = P.make_data(run)
        print(f"dataset: {len(ds)} images, shape {ds.shape} -> {run.dataset_path}")
    elif cmd == "fit-niqe":
        P.fit_niqe(run)
        print(f"NIQE model -> {run.root / 'niqe.bin'}")
    elif cmd == "train-baseline":
        print(f"baseline -> {P.train_baseline(run, args.seed)}")
    elif cmd == "build-negatives":
        path = P.build_negatives(run, args.seed, q2=args.q2, mode=args.mode, m=args.M, per_label=args.per_label)
        print(f"Type II pool -> {path}")
    elif cmd == "train-dualnda":
        print(f"dual-nda -> {P.train_dualnda(run, args.seed)}")
    elif cmd == "sample":
        print(f"fakes -> {P.sample_phase(run, args.phase, args.seed)}")
    elif cmd == "eval":
        rep = P.evaluate_phase(run, args.phase, args.seed)
        for m, (mean, sd) in rep.aggregate().items():
            print(f"{m:12s} {mean:10.4f} +- {sd:.4f}")
    elif cmd == "ablate":
        for axis, path in P.ablate(run, args.axis).items():
            print(f"{axis}: {path}")
    elif cmd == "report":
        for path in P.report(run):
            print(path)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DualNdaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
