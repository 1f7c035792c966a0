"""Command-line surface: run experiments, validate configs, reconstruct grids."""

import argparse
import json
import sys

from .harness import ConfigError, load_config, reconstruct, run


def _add_common(parser):
    parser.add_argument("--config", required=True, help="path to the experiment JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the root seed")
    parser.add_argument("--trials", type=int, default=None, help="override the trial count")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--jobs", type=int, default=None, help="worker pool size")
    parser.add_argument("--mode", choices=["full-kl", "jensen"], default=None,
                        help="override the adjoint forcing mode")


def _overrides(args):
    out = {}
    for key in ("seed", "trials", "out", "jobs", "mode"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="kle3",
        description="Ergodic exploration from equilibrium: benchmark experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "execute an experiment config"),
                           ("reconstruct", "emit trajectory-statistics grids"),
                           ("validate", "check a config file and exit")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as err:
        print(str(err), file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return 2

    if args.command == "validate":
        print("ok")
        return 0
    if args.command == "reconstruct":
        summary = reconstruct(cfg)
        print(json.dumps({"files": summary["files"]}, indent=2))
        return 0
    summary, status = run(cfg)
    methods = summary.get("methods", {})
    for m, e in methods.items():
        print(f"{m}: " + ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                   for k, v in e.items()))
    return status


if __name__ == "__main__":
    sys.exit(main())
