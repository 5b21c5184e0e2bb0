"""Command-line entry point.

    eidsim init   [--seed N] [--config PATH|default] [--transcript PATH] [--report PATH] [--state DIR]
    eidsim auth   ... --state DIR
    eidsim attack {sniff,relay,relay-personalize} ...
    eidsim replay --transcript PATH [--scenario NAME] [--seed N] [--config ...]

Exit codes: 0 ok, 1 config/IO error, 2 protocol failure, 3 security assertion
failure or replay mismatch.
"""

from __future__ import annotations

import argparse
import logging
import pickle
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .scenarios import EXIT_CONFIG, EXIT_OK, EXIT_SECURITY, SCENARIOS, run_scenario
from .transport import read_transcript
from .world import World

STATE_FILE = "world.pickle"
STORE_FILE = "untrusted_store.bin"

log = logging.getLogger("eidsim")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="scenario seed (u64); defaults to the config's seed")
    p.add_argument("--config", default="default", help="TOML config path, or 'default'")
    p.add_argument("--transcript", type=Path, default=None, help="JSONL transcript path")
    p.add_argument("--report", type=Path, default=None, help="JSON report path")
    p.add_argument("--state", type=Path, default=None, help="directory persisting the world between runs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eidsim", description="mobile eID architecture simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("init", help="run device initialization"))
    _common(sub.add_parser("auth", help="run an online authentication"))
    attack = sub.add_parser("attack", help="run an adversary scenario")
    attack.add_argument("which", choices=["sniff", "relay", "relay-personalize"])
    _common(attack)
    replay = sub.add_parser("replay", help="re-run a scenario and byte-compare its transcript")
    _common(replay)
    replay.add_argument("--scenario", choices=SCENARIOS, default="init")
    return parser


def _load_world(args, config, seed):
    if args.state is None:
        return None, None
    args.state.mkdir(parents=True, exist_ok=True)
    store = args.state / STORE_FILE
    path = args.state / STATE_FILE
    if path.exists():
        world = World.load(path)
        world.store.path = store
        return world, store
    return None, store


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        config = load_config(args.config)
        seed = config.seed if args.seed is None else args.seed
        if not 0 <= seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "replay":
        return _replay(args, config, seed)

    scenario = args.which if args.command == "attack" else args.command
    try:
        world, store = _load_world(args, config, seed)
    except (OSError, pickle.UnpicklingError, TypeError, EOFError) as exc:
        print(f"cannot load state: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = run_scenario(scenario, config, seed, world, store)
    report = result.report
    try:
        if args.transcript is not None:
            args.transcript.write_bytes(result.transcript)
            report.transcript = str(args.transcript)
        if args.report is not None:
            args.report.write_text(report.to_json())
        if args.state is not None:
            result.world.save(args.state / STATE_FILE)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{scenario}: {report.status} ({report.verdict})")
    return report.exit_code


def _replay(args, config, seed) -> int:
    if args.transcript is None:
        print("replay needs --transcript", file=sys.stderr)
        return EXIT_CONFIG
    try:
        read_transcript(args.transcript)
        recorded = args.transcript.read_bytes()
    except (OSError, ValueError) as exc:
        print(f"cannot read transcript: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = run_scenario(args.scenario, config, seed)
    if args.report is not None:
        args.report.write_text(result.report.to_json())
    if result.transcript != recorded:
        print("replay: transcript mismatch")
        return EXIT_SECURITY
    print("replay: identical")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
