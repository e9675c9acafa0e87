"""``uapsga`` command line: train, attack, eval, sweep, demo-vanishing."""

from __future__ import annotations

import argparse
import sys

from . import experiments
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = {
    "train": experiments.cmd_train,
    "attack": experiments.cmd_attack,
    "eval": experiments.cmd_eval,
    "sweep": experiments.cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uapsga", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__doc__.splitlines()[0])
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
        p.add_argument("--force", action="store_true", help="overwrite an existing run")
    p = sub.add_parser("demo-vanishing", help="sign-then-sum vs. sum-then-sign on two toy gradients")
    p.add_argument("--out", help="also write vanishing.csv here")
    return parser


def _summary(manifest) -> str:
    lines = [f"{manifest.command}: config {manifest.config_hash}, {len(manifest.artifacts)} artifacts, "
             f"{manifest.wall_time:.1f} s"]
    for run in manifest.runs:
        if "fooling_ratios" in run:
            frs = " ".join(f"{k}={v:.4f}" for k, v in run["fooling_ratios"].items())
            lines.append(f"  {run['variant']} seed {run['seed']}: {frs}")
        elif "arch" in run:
            lines.append(f"  {run['arch']}: eval accuracy {run['eval_accuracy']:.4f}")
        elif "model" in run:
            lines.append(f"  {run['model']}: fooling ratio {run['fooling_ratio']:.4f}")
    return "\n".join(lines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "demo-vanishing":
            print(experiments.cmd_demo_vanishing(args.out).format())
            return EXIT_OK
        cfg = experiments.load_config(args.config).with_overrides(seed=args.seed, out=args.out)
        manifest = COMMANDS[args.command](cfg, force=args.force)
        print(_summary(manifest))
        return EXIT_OK
    except (ConfigError, UsageError) as exc:
        code, err = EXIT_CONFIG, exc
    except (DataError, FormatError, ShapeError) as exc:
        code, err = EXIT_DATA, exc
    except NumericError as exc:
        code, err = EXIT_NUMERIC, exc
    print(f"uapsga {args.command}: error: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
