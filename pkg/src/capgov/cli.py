"""Operator entry point.

Verbs:
  run               execute the experiment protocol, write logs/metrics/tables
  calibrate         grid-search the declared free constants against targets
  tables            re-emit tables from a saved metrics summary
  replay            recompute metrics from an audit log; verify against the
                    run-time record
  serve             long-running governance endpoint for the live console
  validate-registry parse and validate a registry document

Exit codes: 0 success, 2 configuration error, 3 runtime abort/verification
failure, 4 bind failure.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
import time
from pathlib import Path

from . import harness
from .audit import CorruptLog, read_audit_file
from .harness import (
    VARIANTS,
    CalibrationInfeasible,
    HarnessError,
    RunConfig,
    load_config_file,
    run_experiment,
)
from .metrics import IncompleteRun, compute_metrics
from .registry import RegistryError, dump_registry, load_registry_file
from .tables import emit_tables

DEFAULT_CONFIG_ENV = "CAPGOV_CONFIG"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_BIND = 4


def _default_config_path() -> str:
    env = os.environ.get(DEFAULT_CONFIG_ENV)
    if env:
        return env
    import importlib.resources

    return str(importlib.resources.files("capgov").joinpath("data/default_config.yaml"))


def _load_config(args) -> RunConfig:
    path = args.config or _default_config_path()
    config = load_config_file(path)
    if getattr(args, "variants", None):
        unknown = [v for v in args.variants if v not in VARIANTS]
        if unknown:
            raise HarnessError(f"unknown variants: {unknown}")
        config.variants = list(args.variants)
    if getattr(args, "seeds", None):
        config.seeds = [int(s) for s in args.seeds]
    if getattr(args, "trials", None):
        config.trials_per_seed = int(args.trials)
    if getattr(args, "registry", None):
        config.registry_path = args.registry
    if getattr(args, "profile_latency", False):
        config.profile_latency = True
    return config


def cmd_run(args) -> int:
    try:
        config = _load_config(args)
    except (OSError, HarnessError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    audit_dir = Path(args.audit_out) if args.audit_out else None
    try:
        result = run_experiment(config, audit_dir=audit_dir)
    except (HarnessError, RegistryError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    summary = {
        "config": config.to_dict(),
        "cells": [report.to_dict() for report in result.cells.values()],
        "t_tests": [
            {"metric": t.metric, "t": t.t, "p": t.p, "seeds": t.seeds} for t in result.t_tests
        ],
        "latency": result.latency,
    }
    if audit_dir is not None:
        audit_dir.mkdir(parents=True, exist_ok=True)
        (audit_dir / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        for (variant, seed), report in result.cells.items():
            (audit_dir / f"{variant}_{seed}.metrics.json").write_text(
                json.dumps(report.to_dict(), indent=2, sort_keys=True)
            )
    if args.emit_tables:
        emit_tables(result, args.emit_tables)
        print(f"tables written to {args.emit_tables}")

    for variant in config.variants:
        parts = []
        for metric in ("uair", "frr", "rvdr", "ucr", "rsr", "rbsr", "mrt", "rpc", "block_rate"):
            agg = result.aggregate(variant, metric)
            if agg is not None:
                parts.append(f"{metric}={agg[0]:.3f}±{agg[1]:.3f}")
        print(f"{variant}: " + "  ".join(parts))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    try:
        config = _load_config(args)
    except (OSError, HarnessError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        fitted, report = harness.calibrate(
            config, trials=args.trials or 300, tolerance=args.tolerance
        )
    except CalibrationInfeasible as exc:
        print(f"calibration infeasible: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        import yaml

        config.calibration = fitted
        Path(args.out).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
        print(f"fitted config written to {args.out}")
    return EXIT_OK


def cmd_tables(args) -> int:
    # Tables are derived from a fresh run at the recorded config; the
    # metrics.json summary pins config and seeds, making this reproducible.
    try:
        doc = json.loads(Path(args.metrics).read_text())
        config = RunConfig.from_dict(doc["config"])
    except (OSError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = run_experiment(config)
    emit_tables(result, args.out)
    print(f"tables written to {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        header, events = read_audit_file(args.audit)
    except CorruptLog as exc:
        print(f"corrupt log: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    tick_seconds = header.get("tick_seconds", 0.05)
    try:
        report = compute_metrics(
            events, variant=header.get("variant", ""), seed=header.get("seed", 0), tick_seconds=tick_seconds
        )
    except IncompleteRun as exc:
        print(f"corrupt log: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    recomputed = report.to_dict()
    print(json.dumps(recomputed, indent=2, sort_keys=True))

    sibling = Path(args.audit).with_suffix("").name + ".metrics.json"
    recorded_path = Path(args.audit).parent / sibling
    if recorded_path.exists():
        recorded = json.loads(recorded_path.read_text())
        if recorded != json.loads(json.dumps(recomputed)):
            print("MISMATCH: replayed metrics differ from run-time record", file=sys.stderr)
            return EXIT_RUNTIME
        print("replay matches run-time record")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .live import LiveRuntime

    try:
        config = _load_config(args)
    except (OSError, HarnessError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    host, _, port = args.override_bind.partition(":")
    runtime = LiveRuntime(config, ticket_timeout=args.ticket_timeout)
    try:
        addr = runtime.start(host or "127.0.0.1", int(port or "8787"))
    except Exception as exc:
        print(f"bind failure: {exc}", file=sys.stderr)
        return EXIT_BIND
    print(f"console protocol on {addr[0]}:{addr[1]}; Ctrl-C for clean shutdown")
    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    try:
        while not stop.is_set():
            time.sleep(0.2)
    finally:
        runtime.shutdown()
        print("shutdown complete; all sessions driven to terminal states")
    return EXIT_OK


def cmd_validate_registry(args) -> int:
    try:
        reg = load_registry_file(args.registry)
    except (RegistryError, OSError) as exc:
        print(f"invalid registry: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(
        f"registry ok: {len(reg.capabilities)} capabilities, {len(reg.profiles)} profiles, "
        f"{sum(len(ps.rules) for ps in reg.policy_sets.values())} policy rules"
    )
    if args.dump:
        print(dump_registry(reg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capgov", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run the experiment protocol")
    p.add_argument("--config", help="run config file (default: packaged protocol)")
    p.add_argument("--variants", nargs="+", help="subset of method variants")
    p.add_argument("--seeds", nargs="+", help="subset of seeds")
    p.add_argument("--trials", type=int, help="trials per seed")
    p.add_argument("--registry", help="registry document path")
    p.add_argument("--audit-out", help="directory for audit logs + metrics")
    p.add_argument("--emit-tables", help="directory for result tables")
    p.add_argument("--profile-latency", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("calibrate", help="fit calibration constants")
    p.add_argument("--config", help="run config file")
    p.add_argument("--trials", type=int, help="probe trials per grid point")
    p.add_argument("--tolerance", type=float, help="max acceptable residual")
    p.add_argument("--out", help="write fitted config here")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("tables", help="emit tables for a saved metrics summary")
    p.add_argument("--metrics", required=True, help="metrics.json from a run")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_tables)

    p = sub.add_parser("replay", help="recompute metrics from an audit log")
    p.add_argument("--audit", required=True, help="audit log file")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("serve", help="serve the live override endpoint")
    p.add_argument("--config", help="run config file")
    p.add_argument("--live-override", action="store_true", required=True)
    p.add_argument("--override-bind", default="127.0.0.1:8787")
    p.add_argument("--ticket-timeout", type=float, default=300.0)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("validate-registry", help="validate a registry document")
    p.add_argument("--registry", required=True)
    p.add_argument("--dump", action="store_true", help="print the normalized document")
    p.set_defaults(fn=cmd_validate_registry)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
