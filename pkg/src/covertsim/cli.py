"""covertsim command line.

Exit status: 0 on success, 2 for invalid input (config, plan, trace or
argument errors), 3 for failures while running. A detected channel is a
result, reported in the output, and never changes the exit status.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import __version__
from .attackchan import (
    BitMessage, BurstSpec, ChannelClosed, calibrate_threshold, decode, encode, parse_message,
    preamble_bits,
)
from .calibration import CalibrationError, fit_config
from .configio import apply_overrides, config_from_dict, config_to_dict, save_config
from .harness import (
    ExperimentPlan, PlanError, TraceFormatError, ingest_trace, load_plan_result, report, run_plan,
)
from .simkernel import (
    ConfigError, export_trace_csv, default_config, run_simulation, trace_to_json, validate_config,
)
from .timestats import DigestMismatch, assess, summarize, summary_table

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
OUT_ENV = "COVERTSIM_OUT"

log = logging.getLogger("covertsim")


class InvalidInput(Exception):
    pass


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or "."
    return Path(out)


def _load_config_dict(path) -> dict:
    if path is None:
        return config_to_dict(default_config())
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise InvalidInput(f"{path}: config must be a mapping")
    return data


def _config_from_args(args):
    data = _load_config_dict(args.config)
    apply_overrides(data, args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    return validate_config(config_from_dict(data))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_trace(trace, out: Path, stem: str, fmt: str) -> Path:
    if fmt == "json":
        path = out / f"{stem}.json"
        _write_json(path, trace_to_json(trace))
        return path
    return export_trace_csv(trace, out / f"{stem}.csv")


def cmd_run(args) -> int:
    config = _config_from_args(args)
    out = _out_dir(args)
    attack = None
    message = None
    if args.message is not None:
        bits = parse_message(args.message)
        message = BitMessage(bits, args.frames_per_bit, args.preamble_len)
        attack = encode(message, BurstSpec(args.burst_kind, args.burst_count))
    trace, events = run_simulation(config, attack)
    trace.metadata["overrides"] = list(args.set or [])
    stem = "attack" if attack is not None else "baseline"
    path = _write_trace(trace, out, stem, args.format)
    save_config(config, out / "config.yaml")
    if message is not None:
        _write_json(out / "ground_truth.json", {
            "bits": message.bits, "frames_per_bit": message.frames_per_bit,
            "preamble_len": message.preamble_len,
            "burst": {"kind": args.burst_kind, "count": args.burst_count},
            "trace": path.name, "message": args.message,
        })
    for a in events.audits:
        log.warning("audit: board %s %s: %s", a.board, a.kind, a.message)
    s = summarize(trace.delta_ticks)
    print(f"wrote {path} ({s.n} samples, mean {s.mean:.1f} ticks, variance {s.variance:.1f})")
    return EXIT_OK


def _load_traces(spec: str) -> list:
    p = Path(spec)
    files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
    if not files:
        raise InvalidInput(f"no trace CSV files under {spec}")
    return [ingest_trace(f) for f in files]


def cmd_assess(args) -> int:
    with_traces = _load_traces(args.with_dir)
    without_traces = _load_traces(args.without_dir)
    verdict = assess(with_traces, without_traces, args.alpha)
    print(summary_table(verdict))
    out = _out_dir(args)
    _write_json(out / "verdict.json", verdict.to_dict())
    return EXIT_OK


def cmd_decode(args) -> int:
    trace = ingest_trace(args.trace)
    truth_path = Path(args.truth) if args.truth else Path(args.trace).with_name("ground_truth.json")
    truth = json.loads(truth_path.read_text()) if truth_path.exists() else None
    fpb = args.frames_per_bit or (truth or {}).get("frames_per_bit", 1)
    preamble_len = args.preamble_len if args.preamble_len is not None else (truth or {}).get("preamble_len", 0)
    closed = False
    threshold = args.threshold
    if threshold is None:
        if preamble_len == 0:
            raise InvalidInput("no --threshold and no preamble to calibrate one")
        try:
            threshold = calibrate_threshold(trace, preamble_bits(preamble_len), fpb)
        except ChannelClosed as exc:
            closed = True
            log.warning("channel closed at calibration: %s", exc)
            threshold = float(trace.delta_ticks.mean())
    result = decode(trace, threshold, fpb, (truth or {}).get("bits"), preamble_len)
    record = result.to_dict()
    record["channel_closed_at_calibration"] = closed
    _write_json(_out_dir(args) / "decode.json", record)
    print("".join(map(str, result.decoded_bits)))
    if result.ber is not None:
        print(f"ber={result.ber:.4f} threshold={result.threshold_ticks:.1f}")
    return EXIT_OK


def _parse_meta(items) -> dict:
    meta = {}
    for item in items or []:
        if "=" not in item:
            raise InvalidInput(f"--meta expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        meta[k] = yaml.safe_load(v)
    return meta


def cmd_ingest(args) -> int:
    trace = ingest_trace(args.path, _parse_meta(args.meta))
    out = _out_dir(args)
    path = _write_trace(trace, out, Path(args.path).stem + ".ingested", args.format)
    s = summarize(trace.delta_ticks)
    print(f"wrote {path} ({s.n} samples, mean {s.mean:.1f}, variance {s.variance})")
    return EXIT_OK


def _plan_from_args(args) -> ExperimentPlan:
    data = ExperimentPlan().to_dict()
    if args.config:
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(loaded, dict):
            raise InvalidInput(f"{args.config}: plan must be a mapping")
        data.update(loaded)
    apply_overrides(data, args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    return ExperimentPlan.from_dict(data)


def cmd_plan(args) -> int:
    plan = _plan_from_args(args)
    out = _out_dir(args)
    result = run_plan(plan, out, jobs=args.jobs)
    report(result, out)
    feasible = sum(1 for p in result.points if p.verdict is not None and p.verdict.feasible)
    print(f"{len(result.points)} grid points, {result.simulated} runs simulated, "
          f"{feasible} feasible channel(s); report at {out / 'report.md'}")
    if result.partial:
        print("plan is partial: some runs failed", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args)
    if not (out / "plan.json").exists():
        raise InvalidInput(f"{out} holds no plan.json")
    print(report(load_plan_result(out), out), end="")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    reference = ingest_trace(args.reference)
    template = _config_from_args(args)
    fit = fit_config(reference, template)
    out = _out_dir(args)
    path = save_config(fit.config, out / "calibrated.yaml")
    print(f"base_switch_cost={fit.config.base_switch_cost} ns jitter={fit.config.jitter.kind}"
          f"/{fit.config.jitter.magnitude} ns")
    print(f"reference mean={fit.reference_mean:.6g} var={fit.reference_variance:.6g}; "
          f"simulated mean={fit.simulated_mean:.6g} var={fit.simulated_variance:.6g} "
          f"(errors {fit.mean_error:.2%}, {fit.variance_error:.2%})")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covertsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help="SimConfig YAML file (default: four-board testbed)"):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or .)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("run", help="simulate one configuration")
    common(sp)
    sp.add_argument("--message", help="bits to transmit: 0x-hex, 0b-binary or a 0/1 string")
    sp.add_argument("--frames-per-bit", type=int, default=1)
    sp.add_argument("--preamble-len", type=int, default=16)
    sp.add_argument("--burst-kind", default="vmmu_config")
    sp.add_argument("--burst-count", type=int, default=50)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("plan", help="run an experiment campaign and write its report")
    common(sp, "plan YAML file (default: the 36-point grid)")
    sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("assess", help="t-test traces with vs without attack")
    sp.add_argument("--with", dest="with_dir", required=True, help="directory or CSV of attack traces")
    sp.add_argument("--without", dest="without_dir", required=True, help="directory or CSV of baseline traces")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_assess)

    sp = sub.add_parser("decode", help="recover bits from an attack trace")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--truth", help="ground_truth.json (default: next to the trace)")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--frames-per-bit", type=int)
    sp.add_argument("--preamble-len", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("ingest", help="import an external trace")
    sp.add_argument("path")
    sp.add_argument("--meta", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("report", help="regenerate report.md from a results directory")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("calibrate", help="fit switch cost and jitter to a reference trace")
    common(sp)
    sp.add_argument("--reference", required=True)
    sp.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for field_path, msg in exc.errors:
            print(f"error: {field_path}: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (InvalidInput, PlanError, TraceFormatError, DigestMismatch, CalibrationError,
            ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
