"""Command-line interface: run one configuration, sweep a matrix, or verify files.

Exit codes: 0 success, 2 verification failure, 3 configuration error.
The PARASINK_SEED environment variable overrides the profile seed.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .bench import (
    BenchSettings,
    OutputScenario,
    ProcessingConfig,
    desk_profile,
    run_config,
    sweep,
    verify_container_file,
)
from .codec import FlushPolicy
from .errors import ConfigurationError, ParasinkError, ValidationError, VerificationError
from .events import Tier, load_profile

EXIT_OK = 0
EXIT_VERIFICATION = 2
EXIT_CONFIG = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="reco-aod-mini", help="reco-aod-mini or aod-mini")
    p.add_argument("--profile", default=None, help="workload profile file (flat key=value)")
    p.add_argument("--events", type=int, default=None, help="override events_total")
    p.add_argument("--seed", type=int, default=None, help="override profile seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--level", type=int, default=6, help="codec level (0-9)")
    p.add_argument("--flush-every", type=int, default=8, help="basket flush cadence in events")
    p.add_argument("--sample-ms", type=float, default=20.0, help="stall monitor period")
    p.add_argument(
        "--merger-buffers",
        default=None,
        help="per-tier buffer counts for config 3 as RECO,AOD,MINIAOD (default 6,6,3)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="parasink", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[], help="run one processing configuration")
    _add_common(p_run)
    p_run.add_argument("--config", type=int, required=True, help="processing configuration 1-4")
    p_run.add_argument("--threads", type=int, required=True)

    p_sweep = sub.add_parser("sweep", help="run a config x threads matrix")
    _add_common(p_sweep)
    p_sweep.add_argument("--configs", default="1,2,3,4", help="comma list of config ids")
    p_sweep.add_argument("--threads", required=True, help="comma list of thread counts")

    p_verify = sub.add_parser("verify", help="verify container files in a directory")
    p_verify.add_argument("--dir", required=True)
    p_verify.add_argument("--expect", type=int, required=True, help="expected event count per file")
    return parser


def _settings(args) -> BenchSettings:
    return BenchSettings(
        flush_policy=FlushPolicy(flush_every_n_events=args.flush_every),
        codec_level=args.level,
        sample_period_ms=args.sample_ms,
    )


def _profile(args):
    if args.profile:
        profile = load_profile(args.profile)
    else:
        profile = desk_profile(codec_level=args.level)
    if args.events is not None:
        profile = profile.with_overrides(events_total=args.events)
    seed = args.seed
    env_seed = os.environ.get("PARASINK_SEED")
    if env_seed is not None:
        seed = int(env_seed)
    if seed is not None:
        profile = profile.with_overrides(seed=seed)
    return profile


def _merger_buffers(args):
    if args.merger_buffers is None:
        return None
    parts = [int(x) for x in args.merger_buffers.split(",")]
    if len(parts) != 3:
        raise ConfigurationError("--merger-buffers expects three integers: RECO,AOD,MINIAOD")
    return {Tier.RECO: parts[0], Tier.AOD: parts[1], Tier.MINIAOD: parts[2]}


def _cmd_run(args) -> int:
    scenario = OutputScenario.from_name(args.scenario)
    config = ProcessingConfig.from_id(args.config, _merger_buffers(args))
    profile = _profile(args)
    result = run_config(scenario, config, profile, args.threads, args.out, _settings(args))
    row = result.row
    print(
        f"config {row.config_id} scenario {row.scenario} threads {row.n_threads}: "
        f"{row.wall_time_s:.2f}s wall, {row.events_per_s:.1f} events/s, "
        f"stall fraction {row.stall_fraction:.3f}"
    )
    for tier, path in sorted(result.output_files.items(), key=lambda kv: kv[0].value):
        print(f"  {tier.value}: {path}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    scenario = OutputScenario.from_name(args.scenario)
    buffers = _merger_buffers(args)
    configs = [ProcessingConfig.from_id(int(c), buffers) for c in args.configs.split(",") if c.strip()]
    threads = [int(t) for t in args.threads.split(",") if t.strip()]
    if not configs or not threads:
        raise ConfigurationError("sweep needs at least one config and one thread count")
    profile = _profile(args)
    rows = sweep(scenario, configs, threads, profile, args.out, _settings(args))
    print(f"wrote {Path(args.out) / 'scaling.csv'} and scaling.svg")
    failures = [r for r in rows if r.error]
    for row in rows:
        status = f"ERROR: {row.error}" if row.error else f"{row.events_per_s:.1f} events/s"
        print(f"  config {row.config_id} @ {row.n_threads} threads: {status}")
    return EXIT_VERIFICATION if failures else EXIT_OK


def _cmd_verify(args) -> int:
    directory = Path(args.dir)
    files = sorted(directory.glob("*.psnk"))
    if not files:
        raise ConfigurationError(f"no .psnk files found in {directory}")
    all_ok = True
    for path in files:
        check = verify_container_file(path, args.expect)
        print(check.describe())
        all_ok = all_ok and check.ok
    return EXIT_OK if all_ok else EXIT_VERIFICATION


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        return _cmd_verify(args)
    except VerificationError as exc:
        print(f"verification failed:\n{exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except (ConfigurationError, ValidationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParasinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
