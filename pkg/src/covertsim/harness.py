"""Experiment campaigns: grid expansion, resumable execution, trace ingest and reports.

Results directory layout::

    plan.json            plan parameters, digest and the run-key -> trace-digest map
    traces/<digest>.csv  one file per run, plus a <digest>.json metadata sidecar
    verdicts.csv         one row per grid point
    report.md            findings
    histograms/*.csv     plot-ready histogram data per grid point
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import yaml

from . import __version__
from .attackchan import AttackPlan, BurstSpec
from .configio import config_from_dict, config_to_dict, parse_duration
from .simkernel import (
    MS, SECOND, US, SimConfig, TimingTrace, VirtualBoardSpec, export_trace_csv,
    default_config, run_simulation, sidecar_path, validate_config,
)
from .timestats import DEFAULT_ALPHA, AttackVerdict, assess, summarize

log = logging.getLogger(__name__)

MAX_RUNS = 100_000
REQUIRED_TRACE_METADATA = ("config_digest", "attack", "counter_freq")


class PlanError(ValueError):
    pass


class TraceFormatError(ValueError):
    pass


class GridPoint(NamedTuple):
    switch_duration: int
    tick_frequency: int
    benign_boards: int
    speed_exponent: int

    @property
    def label(self) -> str:
        return (f"sw{format_duration(self.switch_duration)}_tick{self.tick_frequency}"
                f"_b{self.benign_boards}_N{self.speed_exponent}")


class RunDescriptor(NamedTuple):
    point: GridPoint
    attack: bool
    repetition: int
    seed: int


def format_duration(ns: int) -> str:
    for unit, size in (("s", SECOND), ("ms", MS), ("us", US)):
        if ns >= size and ns % size == 0:
            return f"{ns // size}{unit}"
    return f"{ns}ns"


@dataclass
class ExperimentPlan:
    switch_durations: tuple = (10 * MS, 10 * US, 1 * US)
    tick_frequencies: tuple = (10, 1000)
    benign_board_counts: tuple = (1, 50)
    speed_exponents: tuple = (0, 1, 2)
    repetitions: int = 3
    sim_duration: int = 15 * 60 * SECOND
    template: SimConfig = field(default_factory=default_config)
    seed: int = 0
    alpha: float = DEFAULT_ALPHA
    burst: BurstSpec = field(default_factory=BurstSpec)

    @property
    def grid_size(self) -> int:
        return (len(set(self.switch_durations)) * len(set(self.tick_frequencies))
                * len(set(self.benign_board_counts)) * len(set(self.speed_exponents)))

    def to_dict(self) -> dict:
        return {
            "switch_durations": sorted(set(self.switch_durations)),
            "tick_frequencies": sorted(set(self.tick_frequencies)),
            "benign_board_counts": sorted(set(self.benign_board_counts)),
            "speed_exponents": sorted(set(self.speed_exponents)),
            "repetitions": self.repetitions,
            "sim_duration": self.sim_duration,
            "seed": self.seed,
            "alpha": self.alpha,
            "burst": {"kind": self.burst.kind, "count": self.burst.count},
            "template": config_to_dict(self.template),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise PlanError(f"unknown plan keys: {sorted(unknown)}")
        kw = {}
        if "switch_durations" in d:
            kw["switch_durations"] = tuple(parse_duration(v) for v in d["switch_durations"])
        for key in ("tick_frequencies", "benign_board_counts", "speed_exponents"):
            if key in d:
                kw[key] = tuple(int(v) for v in d[key])
        for key in ("repetitions", "seed"):
            if key in d:
                kw[key] = int(d[key])
        if "sim_duration" in d:
            kw["sim_duration"] = parse_duration(d["sim_duration"])
        if "alpha" in d:
            kw["alpha"] = float(d["alpha"])
        if "burst" in d:
            kw["burst"] = BurstSpec(**d["burst"])
        if "template" in d:
            kw["template"] = config_from_dict(d["template"])
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_plan(path) -> ExperimentPlan:
    return ExperimentPlan.from_dict(yaml.safe_load(Path(path).read_text()) or {})


def save_plan(plan: ExperimentPlan, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(plan.to_dict(), sort_keys=False))
    return path


def split_seed(master: int, point: GridPoint, attack: bool, repetition: int) -> int:
    """64-bit run seed: first 8 bytes of SHA-256 over the master seed and run coordinates."""
    key = f"{master}|{point.switch_duration}|{point.tick_frequency}|{point.benign_boards}|" \
          f"{point.speed_exponent}|{int(attack)}|{repetition}"
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


def grid_points(plan: ExperimentPlan) -> list:
    for name in ("switch_durations", "tick_frequencies", "benign_board_counts", "speed_exponents"):
        if not getattr(plan, name):
            raise PlanError(f"{name} is empty")
    return [GridPoint(*p) for p in itertools.product(
        sorted(set(plan.switch_durations)), sorted(set(plan.tick_frequencies)),
        sorted(set(plan.benign_board_counts)), sorted(set(plan.speed_exponents)))]


def expand_plan(plan: ExperimentPlan) -> list:
    if plan.repetitions < 1:
        raise PlanError("repetitions must be >= 1")
    total = plan.grid_size * 2 * plan.repetitions
    if total > MAX_RUNS:
        raise PlanError(f"plan expands to {total} runs (limit {MAX_RUNS})")
    runs = []
    for point in grid_points(plan):
        for rep in range(plan.repetitions):
            for attack in (False, True):
                runs.append(RunDescriptor(point, attack, rep, split_seed(plan.seed, point, attack, rep)))
    return runs


def point_config(plan: ExperimentPlan, point: GridPoint, seed: int = 0) -> SimConfig:
    """Template system with the grid point's benign-board count and parameters applied."""
    tpl = plan.template
    by_role = {b.role: b for b in tpl.boards}
    proto_benign = by_role.get("benign", VirtualBoardSpec(0, "benign"))
    boards = []
    for i in range(point.benign_boards):
        boards.append(replace(proto_benign, id=i))
    next_id = point.benign_boards
    for role in ("sender", "receiver", "io"):
        if role in by_role:
            boards.append(replace(by_role[role], id=next_id))
            next_id += 1
    return replace(
        tpl, boards=boards, enforced_switch_duration=point.switch_duration,
        tick_frequency=point.tick_frequency, speed_exponent=point.speed_exponent,
        sim_duration=plan.sim_duration, seed=seed, major_frame=None, slice_starts=None,
    )


def run_key(plan: ExperimentPlan, desc: RunDescriptor) -> str:
    cfg = config_to_dict(point_config(plan, desc.point, desc.seed))
    payload = {"config": cfg, "attack": desc.attack,
               "burst": [plan.burst.kind, plan.burst.count] if desc.attack else None}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:24]


def _execute(plan: ExperimentPlan, desc: RunDescriptor):
    t0 = time.perf_counter()
    cfg = point_config(plan, desc.point, desc.seed)
    attack = AttackPlan.continuous(plan.burst) if desc.attack else None
    trace, _ = run_simulation(cfg, attack, record_events=False)
    trace.metadata["repetition"] = desc.repetition
    return trace, time.perf_counter() - t0


@dataclass
class PointResult:
    point: GridPoint
    with_attack: list = field(default_factory=list)
    without_attack: list = field(default_factory=list)
    verdict: Optional[AttackVerdict] = None
    runtime: float = 0.0
    errors: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.verdict is not None and not self.errors


@dataclass
class PlanResult:
    plan: ExperimentPlan
    points: list
    plan_digest: str
    version: str = __version__
    traces: dict = field(default_factory=dict)
    simulated: int = 0

    @property
    def partial(self) -> bool:
        return any(not p.complete for p in self.points)

    def verdict_for(self, point: GridPoint) -> Optional[AttackVerdict]:
        for p in self.points:
            if p.point == point:
                return p.verdict
        return None


class _Store:
    """Single writer for a results directory."""

    def __init__(self, out_dir, plan: ExperimentPlan):
        self.root = Path(out_dir)
        (self.root / "traces").mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "plan.json"
        self.plan = plan
        self.runs: dict = {}
        self.runtimes: dict = {}
        if self.manifest_path.exists():
            old = json.loads(self.manifest_path.read_text())
            if old.get("plan_digest") == plan.digest():
                self.runs = old.get("runs", {})
                self.runtimes = old.get("runtimes", {})
        self._flush()

    def _flush(self):
        doc = {
            "plan_digest": self.plan.digest(),
            "version": __version__,
            "plan": self.plan.to_dict(),
            "runs": self.runs,
            "runtimes": self.runtimes,
        }
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
        os.replace(tmp, self.manifest_path)

    def trace_path(self, digest: str) -> Path:
        return self.root / "traces" / f"{digest}.csv"

    def load(self, key: str) -> Optional[TimingTrace]:
        digest = self.runs.get(key)
        if digest is None or not self.trace_path(digest).exists():
            return None
        trace = ingest_trace(self.trace_path(digest))
        if trace.digest() != digest:
            log.warning("trace %s fails its digest check; rerunning", digest)
            return None
        return trace

    def save(self, key: str, trace: TimingTrace, runtime: float) -> str:
        digest = trace.digest()
        export_trace_csv(trace, self.trace_path(digest))
        self.runs[key] = digest
        self.runtimes[key] = runtime
        self._flush()
        return digest


def run_plan(plan: ExperimentPlan, out_dir=None, jobs: Optional[int] = None) -> PlanResult:
    """Execute every run of the plan and assess each grid point.

    With ``out_dir`` set, traces and the manifest are written as runs finish
    and runs already present (by digest) are not simulated again.
    """
    runs = expand_plan(plan)
    for point in grid_points(plan):
        validate_config(point_config(plan, point))
    store = _Store(out_dir, plan) if out_dir is not None else None
    traces: dict = {}
    run_digest: dict = {}
    runtimes: dict = {}
    failures: dict = {}
    todo = []
    for desc in runs:
        key = run_key(plan, desc)
        cached = store.load(key) if store else None
        if cached is not None:
            d = cached.digest()
            traces[d] = cached
            run_digest[desc] = d
            runtimes[desc] = store.runtimes.get(key, 0.0)
        else:
            todo.append((desc, key))

    def record(desc, key, trace, runtime):
        d = store.save(key, trace, runtime) if store else trace.digest()
        traces[d] = trace
        run_digest[desc] = d
        runtimes[desc] = runtime

    jobs = jobs or os.cpu_count() or 1
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_execute, plan, desc): (desc, key) for desc, key in todo}
            for fut in as_completed(futures):
                desc, key = futures[fut]
                try:
                    trace, runtime = fut.result()
                except Exception as exc:  # a failed run must not stop the campaign
                    failures[desc] = repr(exc)
                    log.error("run %s failed: %r", desc, exc)
                    continue
                record(desc, key, trace, runtime)
    else:
        for desc, key in todo:
            try:
                trace, runtime = _execute(plan, desc)
            except Exception as exc:
                failures[desc] = repr(exc)
                log.error("run %s failed: %r", desc, exc)
                continue
            record(desc, key, trace, runtime)

    points = []
    for point in grid_points(plan):
        pr = PointResult(point)
        for rep in range(plan.repetitions):
            for attack in (False, True):
                desc = RunDescriptor(point, attack, rep, split_seed(plan.seed, point, attack, rep))
                if desc in failures:
                    pr.errors.append(failures[desc])
                    continue
                (pr.with_attack if attack else pr.without_attack).append(run_digest[desc])
                pr.runtime += runtimes[desc]
        if not pr.errors:
            pr.verdict = assess([traces[d] for d in pr.with_attack],
                                [traces[d] for d in pr.without_attack], plan.alpha)
        points.append(pr)
    result = PlanResult(plan, points, plan.digest(), traces=traces, simulated=len(todo) - len(failures))
    if out_dir is not None:
        write_verdicts(result, Path(out_dir) / "verdicts.csv")
    return result


def load_plan_result(out_dir) -> PlanResult:
    """Rebuild a PlanResult from a results directory without simulating."""
    out_dir = Path(out_dir)
    doc = json.loads((out_dir / "plan.json").read_text())
    plan = ExperimentPlan.from_dict(doc["plan"])
    store = _Store.__new__(_Store)
    store.root, store.runs, store.runtimes = out_dir, doc.get("runs", {}), doc.get("runtimes", {})
    traces, points = {}, []
    for point in grid_points(plan):
        pr = PointResult(point)
        for rep in range(plan.repetitions):
            for attack in (False, True):
                desc = RunDescriptor(point, attack, rep, split_seed(plan.seed, point, attack, rep))
                key = run_key(plan, desc)
                trace = store.load(key)
                if trace is None:
                    pr.errors.append(f"missing run rep={rep} attack={attack}")
                    continue
                traces[trace.digest()] = trace
                (pr.with_attack if attack else pr.without_attack).append(trace.digest())
                pr.runtime += store.runtimes.get(key, 0.0)
        if not pr.errors:
            pr.verdict = assess([traces[d] for d in pr.with_attack],
                                [traces[d] for d in pr.without_attack], plan.alpha)
        points.append(pr)
    return PlanResult(plan, points, doc.get("plan_digest", plan.digest()),
                      version=doc.get("version", __version__), traces=traces)


VERDICT_COLUMNS = [
    "switch_duration_ns", "tick_frequency", "benign_boards", "speed_exponent", "feasible",
    "reproducible", "min_p_value", "max_p_value", "mean_shift_ticks", "config_digest",
    "with_traces", "without_traces", "runtime_s", "complete",
]


def write_verdicts(result: PlanResult, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VERDICT_COLUMNS)
        for pr in result.points:
            v = pr.verdict
            w.writerow([
                pr.point.switch_duration, pr.point.tick_frequency, pr.point.benign_boards,
                pr.point.speed_exponent,
                "" if v is None else int(v.feasible),
                "" if v is None else int(v.reproducible),
                "" if v is None else repr(v.min_p_value),
                "" if v is None else repr(max(t.p_value for t in v.tests)),
                "" if v is None else repr(v.mean_shift_ticks),
                "" if v is None else v.config_digest,
                ";".join(pr.with_attack), ";".join(pr.without_attack),
                f"{pr.runtime:.3f}", int(pr.complete),
            ])
    return path


# --- trace ingest ---------------------------------------------------------------

def ingest_trace(path, metadata: Optional[dict] = None) -> TimingTrace:
    """Load a trace CSV (``frame_index,delta_ticks``) or a raw counter-value list.

    Metadata comes from the ``.json`` sidecar if present, updated with
    ``metadata``; the fields in REQUIRED_TRACE_METADATA must be present.
    """
    path = Path(path)
    meta: dict = {}
    side = sidecar_path(path)
    if side.exists() and side != path:
        meta.update(json.loads(side.read_text()))
    if metadata:
        meta.update(metadata)
    missing = [k for k in REQUIRED_TRACE_METADATA if k not in meta]
    if missing:
        raise TraceFormatError(f"{path}: missing metadata fields: {', '.join(missing)}")

    lines = path.read_text().splitlines()
    body = [(i + 1, ln.strip()) for i, ln in enumerate(lines) if ln.strip() and not ln.lstrip().startswith("#")]
    if not body:
        raise TraceFormatError(f"{path}: no samples")
    frames, deltas = [], []
    if body[0][1].replace(" ", "") == "frame_index,delta_ticks":
        for lineno, ln in body[1:]:
            try:
                f, d = (int(x) for x in ln.split(","))
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: expected 'frame_index,delta_ticks', got {ln!r}")
            if d <= 0:
                raise TraceFormatError(f"{path}:{lineno}: delta_ticks must be > 0")
            if frames and f <= frames[-1]:
                raise TraceFormatError(f"{path}:{lineno}: frame_index not increasing")
            frames.append(f)
            deltas.append(d)
    else:
        prev = None
        for k, (lineno, ln) in enumerate(body):
            try:
                v = int(ln)
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: not an integer counter value: {ln!r}")
            if prev is not None:
                if v <= prev:
                    raise TraceFormatError(f"{path}:{lineno}: non-monotone timestamp {v} after {prev}")
                frames.append(k)
                deltas.append(v - prev)
            prev = v
        meta.setdefault("start_offset", int(body[0][1]))
    meta["counter_freq"] = int(meta["counter_freq"])
    meta["attack"] = _as_bool(meta["attack"])
    return TimingTrace(np.asarray(frames, dtype=np.int64), np.asarray(deltas, dtype=np.int64), meta)


def _as_bool(v) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes", "on")
    return bool(v)


# --- report ---------------------------------------------------------------------

def padding_violations(result: PlanResult) -> list:
    """Grid points infeasible at padding p yet feasible at a larger tested padding."""
    bad = []
    by_rest: dict = {}
    for pr in result.points:
        if pr.verdict is None:
            continue
        rest = pr.point._replace(switch_duration=0)
        by_rest.setdefault(rest, []).append((pr.point.switch_duration, pr.verdict.feasible))
    for rest, items in by_rest.items():
        items.sort()
        for i, (p, feasible) in enumerate(items):
            if not feasible and any(f for q, f in items[i + 1:]):
                bad.append(rest._replace(switch_duration=p))
    return bad


def recommended_padding(result: PlanResult) -> Optional[int]:
    """Smallest tested switch duration at which no grid point (at it or above) is feasible."""
    durations = sorted({pr.point.switch_duration for pr in result.points})
    for d in durations:
        above = [pr for pr in result.points if pr.point.switch_duration >= d and pr.verdict is not None]
        if above and not any(pr.verdict.feasible for pr in above):
            return d
    return None


def write_histograms(result: PlanResult, pr: PointResult, path, bins: int = 40) -> Path:
    with_x = np.concatenate([result.traces[d].delta_ticks for d in pr.with_attack]) if pr.with_attack else np.empty(0, np.int64)
    without_x = np.concatenate([result.traces[d].delta_ticks for d in pr.without_attack]) if pr.without_attack else np.empty(0, np.int64)
    pooled = np.concatenate([with_x, without_x])
    edges = np.histogram_bin_edges(pooled.astype(np.float64), bins=bins) if pooled.size else np.array([0.0, 1.0])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "bin_left", "bin_right", "count"])
        for name, x in (("without_attack", without_x), ("with_attack", with_x)):
            if x.size == 0:
                continue
            s = summarize(x, bins=edges)
            for lo, hi, c in zip(s.bin_edges[:-1], s.bin_edges[1:], s.counts):
                w.writerow([name, repr(lo), repr(hi), c])
    return Path(path)


def report(result: PlanResult, out_dir=None) -> str:
    """Markdown findings; with ``out_dir`` also writes report.md and histogram CSVs."""
    plan = result.plan
    lines = [
        "# Timing covert channel assessment",
        "",
        f"- plan digest: `{result.plan_digest}`",
        f"- toolkit version: {result.version}",
        f"- grid points: {len(result.points)}, repetitions: {plan.repetitions}, alpha: {plan.alpha}",
        f"- simulated duration per run: {plan.sim_duration / SECOND:g} s",
        "",
    ]
    incomplete = [pr for pr in result.points if not pr.complete]
    if incomplete:
        lines += ["**Partial results:** the following grid points are incomplete.", ""]
        lines += [f"- INCOMPLETE {pr.point.label}: {'; '.join(pr.errors) or 'no verdict'}" for pr in incomplete]
        lines.append("")
    lines += [
        "| switch duration | tick freq (1/s) | benign boards | N | feasible | reproducible | min p | mean shift (ticks) |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for pr in result.points:
        v = pr.verdict
        pt = pr.point
        if v is None:
            cells = ["INCOMPLETE", "", "", ""]
        else:
            cells = ["**yes**" if v.feasible else "no", "yes" if v.reproducible else "no",
                     f"{v.min_p_value:.3g}", f"{v.mean_shift_ticks:.1f}"]
        lines.append(f"| {format_duration(pt.switch_duration)} | {pt.tick_frequency} | {pt.benign_boards} "
                     f"| {pt.speed_exponent} | " + " | ".join(cells) + " |")
    lines.append("")
    feasible = [pr for pr in result.points if pr.verdict is not None and pr.verdict.feasible]
    if feasible:
        lines += ["## Feasible channels", ""]
        lines += [f"- {pr.point.label}" for pr in feasible]
        lines.append("")
        rec = recommended_padding(result)
        lines.append("## Mitigation")
        lines.append("")
        if rec is not None:
            lines.append(f"Recommendation: enforce a context switch duration of at least "
                         f"{format_duration(rec)} (the smallest tested value at which no channel was detected).")
        else:
            lines.append("Recommendation: no tested switch duration closes every channel; "
                         "test longer enforced switch durations.")
        lines.append("")
    else:
        lines += ["## Result", "", "No timing covert channel detected in any complete grid point.", ""]
    bad = padding_violations(result)
    if bad:
        lines += ["## Warnings", ""]
        lines += [f"- verdict not monotone in switch duration at {p.label}" for p in bad]
        lines.append("")
    lines.append("p-values are per-repetition and not corrected for multiple comparisons across the grid.")
    text = "\n".join(lines) + "\n"
    if out_dir is not None:
        out_dir = Path(out_dir)
        hist_dir = out_dir / "histograms"
        hist_dir.mkdir(parents=True, exist_ok=True)
        for pr in result.points:
            if pr.with_attack or pr.without_attack:
                write_histograms(result, pr, hist_dir / f"{pr.point.label}.csv")
        (out_dir / "report.md").write_text(text)
    return text
