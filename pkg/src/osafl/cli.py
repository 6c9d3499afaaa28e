"""Command-line entry point: ``osafl run | presets | validate``.

Exit status is 0 on success, 2 on a configuration error and 1 on any
other failure. ``OSAFL_LOG_LEVEL`` (e.g. ``DEBUG``) sets log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from osafl import exp_harness
from osafl.exp_harness import ConfigError
from osafl.fl_protocols import PROTOCOLS

LOG_ENV = "OSAFL_LOG_LEVEL"


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osafl", description="Score-aided federated learning simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="TOML config file")
    src.add_argument("--preset", help="named preset (see `presets list`)")
    run.add_argument("--protocol", choices=PROTOCOLS, help="run only this protocol")
    run.add_argument("--seed", type=int, help="first seed (overrides the config)")
    run.add_argument("--trials", type=int, help="number of seeds")
    run.add_argument("--workers", type=int, help="client worker threads")
    run.add_argument("--out", help="output directory (overrides the config)")

    presets = sub.add_parser("presets", help="list or print bundled presets")
    psub = presets.add_subparsers(dest="action", required=True)
    psub.add_parser("list")
    show = psub.add_parser("show")
    show.add_argument("name")

    validate = sub.add_parser("validate", help="check a config without running it")
    validate.add_argument("--config", required=True)
    return parser


def _load(args) -> exp_harness.ExperimentConfig:
    cfg = exp_harness.load_config(args.config) if args.config else exp_harness.load_preset(args.preset)
    overrides = {}
    if args.protocol:
        overrides["protocols"] = (args.protocol,)
    for key in ("seed", "trials", "workers"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.out:
        overrides["out_dir"] = args.out
    if overrides:
        try:
            cfg = dataclasses.replace(cfg, **overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "presets":
            if args.action == "list":
                print("\n".join(exp_harness.preset_names()))
            else:
                sys.stdout.write(exp_harness.preset_text(args.name))
            return 0
        if args.command == "validate":
            cfg = exp_harness.load_config(args.config)
            print(f"ok: {cfg.name} ({', '.join(cfg.protocols)}; T={cfg.rounds}, U={cfg.clients})")
            return 0
        cfg = _load(args)
        out = exp_harness.run_to_dir(cfg)
        print(f"wrote metrics to {out}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
