"""Command-line entry point.

::

    shiftlab run <config.json | preset> [--out report.csv] [--trials N] [--seed S] [--workers W] [--timing]
    shiftlab preset [name]
    shiftlab validate <config.json>

Exit codes: 0 on success, 1 for an invalid configuration, 2 when at least
one trial recorded a method error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError
from .harness import failed, load_config, preset_names, preset_text, report_text, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _resolve(source: str, **overrides):
    """A config path, or the name of a shipped preset, with CLI overrides applied."""
    if Path(source).is_file():
        raw = Path(source).read_text()
    elif source in preset_names():
        raw = preset_text(source)
    else:
        raise ConfigError(f"no such config file or preset: {source}", "<file>")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "<root>") from exc
    if isinstance(doc, dict):
        doc.update({k: v for k, v in overrides.items() if v is not None})
    return load_config(doc)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shiftlab", description="Distribution-shift learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write a CSV report")
    run.add_argument("config", help="JSON config file or preset name")
    run.add_argument("--out", help="report path (default: stdout)")
    run.add_argument("--trials", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--timing", action="store_true", help="record wall time per method (reports stop being reproducible)")

    pre = sub.add_parser("preset", help="print a shipped preset, or list them")
    pre.add_argument("name", nargs="?")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "preset":
            if args.name is None:
                print("\n".join(preset_names()))
            else:
                sys.stdout.write(preset_text(args.name))
            return EXIT_OK
        if args.command == "validate":
            cfg = _resolve(args.config)
            print(f"ok: {', '.join(cfg.methods)} on {cfg.data.generator}, {cfg.trials} trial(s)")
            return EXIT_OK
        cfg = _resolve(args.config, trials=args.trials, seed=args.seed, workers=args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    reports = run_experiment(cfg, timing=args.timing)
    text = report_text(reports)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if failed(reports):
        bad = sorted({r.metric for r in reports if r.trial >= 0 and "/error:" in r.metric})
        print(f"errors in some trials: {', '.join(bad)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
