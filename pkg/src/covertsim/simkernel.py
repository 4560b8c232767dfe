"""Discrete-event model of a separation-kernel CPU scheduler.

A fixed list of virtual boards is scheduled cyclically. Every slice is
followed by a context switch whose *perceived* duration is clamped from below
by the enforced switch duration. The receiver board timestamps each of its
switch-ins with a time-base counter; the resulting deltas form a
:class:`TimingTrace`.

All clock arithmetic is integer nanoseconds. Counter values are integer ticks.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

MS = 1_000_000
US = 1_000
SECOND = 1_000_000_000

ROLES = ("benign", "sender", "receiver", "io")
HYPERCALL_KINDS = ("vmmu_config", "ipc_send", "event_log", "irq_config")
JITTER_KINDS = ("none", "uniform", "truncated-normal")

MIN_MAJOR_FRAMES = 30


class ConfigError(ValueError):
    """Raised by :func:`validate_config`; ``errors`` holds (field, message) pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.errors))


@dataclass(frozen=True)
class HypercallCost:
    base_cost: int
    cache_flush_penalty: int = 0
    critical_section: int = 0

    @property
    def stall(self) -> int:
        return self.cache_flush_penalty + self.critical_section


def default_hypercall_costs() -> dict[str, HypercallCost]:
    return {
        "vmmu_config": HypercallCost(25 * US, 15 * US, 10 * US),
        "ipc_send": HypercallCost(2 * US, 0, 1 * US),
        "event_log": HypercallCost(1 * US, 0, 500),
        "irq_config": HypercallCost(1500, 0, 1 * US),
    }


@dataclass
class HypercallModel:
    costs: dict[str, HypercallCost] = field(default_factory=default_hypercall_costs)

    def __getitem__(self, kind: str) -> HypercallCost:
        return self.costs[kind]

    @property
    def max_critical_section(self) -> int:
        return max((c.critical_section for c in self.costs.values()), default=0)

    @property
    def max_cache_flush_penalty(self) -> int:
        return max((c.cache_flush_penalty for c in self.costs.values()), default=0)

    def validate(self) -> list[tuple[str, str]]:
        errors = []
        for kind in HYPERCALL_KINDS:
            if kind not in self.costs:
                errors.append((f"hypercalls.{kind}", "missing hypercall kind"))
        for kind, c in self.costs.items():
            for name in ("base_cost", "cache_flush_penalty", "critical_section"):
                if getattr(c, name) < 0:
                    errors.append((f"hypercalls.{kind}.{name}", "must be >= 0"))
        if "vmmu_config" in self.costs:
            heavy = self.costs["vmmu_config"].stall
            for kind, c in self.costs.items():
                if kind != "vmmu_config" and c.stall > heavy:
                    errors.append(
                        (f"hypercalls.{kind}", "vmmu_config must dominate flush + critical section")
                    )
        return errors


@dataclass
class JitterModel:
    """Non-negative per-switch noise, drawn in nanoseconds before speed scaling.

    ``truncated-normal`` draws N(magnitude/2, magnitude/4) truncated to
    [0, magnitude]; ``uniform`` draws U{0..magnitude}. Independently, with
    probability ``tail_probability`` a U{0..tail_magnitude} outlier is added.
    """

    kind: str = "truncated-normal"
    magnitude: int = 2 * US
    tail_probability: float = 0.005
    tail_magnitude: int = 4 * US

    @property
    def max_draw(self) -> int:
        if self.kind == "none":
            return 0
        return self.magnitude + (self.tail_magnitude if self.tail_probability > 0 else 0)

    def validate(self) -> list[tuple[str, str]]:
        errors = []
        if self.kind not in JITTER_KINDS:
            errors.append(("jitter.kind", f"must be one of {JITTER_KINDS}"))
        if self.magnitude < 0:
            errors.append(("jitter.magnitude", "must be >= 0"))
        if self.tail_magnitude < 0:
            errors.append(("jitter.tail_magnitude", "must be >= 0"))
        if not 0.0 <= self.tail_probability <= 1.0:
            errors.append(("jitter.tail_probability", "must be in [0, 1]"))
        return errors

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "none":
            return np.zeros(size, dtype=np.int64)
        m = self.magnitude
        if self.kind == "uniform":
            core = rng.integers(0, m + 1, size=size, dtype=np.int64)
        else:
            core = _truncated_normal(rng, m, size)
        if self.tail_probability > 0 and self.tail_magnitude > 0:
            hit = rng.random(size) < self.tail_probability
            extra = rng.integers(0, self.tail_magnitude + 1, size=size, dtype=np.int64)
            core = core + np.where(hit, extra, 0)
        return core

    def moments(self) -> tuple[float, float]:
        """Exact mean and variance of one draw (continuous approximation of the core)."""
        if self.kind == "none":
            return 0.0, 0.0
        m = float(self.magnitude)
        if self.kind == "uniform":
            mean_c, var_c = m / 2, ((m + 1) ** 2 - 1) / 12
        else:
            mean_c, var_c = m / 2, (m / 4) ** 2 * _TN_VAR_FACTOR
        p, t = self.tail_probability, float(self.tail_magnitude)
        if p > 0 and t > 0:
            ex, ex2 = t / 2, t * (2 * t + 1) / 6
            mean_t, var_t = p * ex, p * ex2 - (p * ex) ** 2
        else:
            mean_t = var_t = 0.0
        return mean_c + mean_t, var_c + var_t


# variance of a standard normal truncated to [-2, 2]
_TN_VAR_FACTOR = 1 - 4 * math.exp(-2) / math.sqrt(2 * math.pi) / math.erf(2 / math.sqrt(2))


def _truncated_normal(rng: np.random.Generator, magnitude: int, size: int) -> np.ndarray:
    out = np.empty(0, dtype=np.float64)
    mu, sigma = magnitude / 2, magnitude / 4
    while out.size < size:
        x = rng.normal(mu, sigma, size=2 * (size - out.size) + 8)
        out = np.concatenate([out, x[(x >= 0) & (x <= magnitude)]])
    return np.rint(out[:size]).astype(np.int64)


@dataclass
class VirtualBoardSpec:
    id: int
    role: str = "benign"
    time_slice: int = 100 * MS
    tse_offset: int = 1 * MS
    authorized_hypercalls: frozenset = frozenset(HYPERCALL_KINDS)
    # per-board override of the enforced duration of this board's switch-out
    enforced_switch_duration: Optional[int] = None

    def __post_init__(self):
        self.authorized_hypercalls = frozenset(self.authorized_hypercalls)


@dataclass
class SimConfig:
    boards: list[VirtualBoardSpec] = field(default_factory=list)
    speed_exponent: int = 0
    counter_freq: int = 1_500_000_000
    tick_frequency: int = 10
    enforced_switch_duration: int = 10 * US
    base_switch_cost: int = 4 * US
    # kernel bookkeeping per guest timer tick delivered during the outgoing slice
    tick_cost: int = 5
    # second-order stall hidden per extra ns of instruction time when N > 0
    stall_absorption: int = 25 * US
    hypercalls: HypercallModel = field(default_factory=HypercallModel)
    jitter: JitterModel = field(default_factory=JitterModel)
    seed: int = 0
    sim_duration: int = 15 * 60 * SECOND
    # derived by validate_config
    major_frame: Optional[int] = field(default=None, compare=False)
    slice_starts: Optional[tuple] = field(default=None, compare=False)

    @property
    def scale(self) -> int:
        return 1 << self.speed_exponent

    def board_role(self, role: str) -> Optional[VirtualBoardSpec]:
        for b in self.boards:
            if b.role == role:
                return b
        return None

    def enforced_for(self, board: VirtualBoardSpec) -> int:
        if board.enforced_switch_duration is not None:
            return board.enforced_switch_duration
        return self.enforced_switch_duration

    def tick_bookkeeping(self, board: VirtualBoardSpec) -> int:
        return board.time_slice * self.tick_frequency // SECOND * self.tick_cost

    def nominal_switch_cost(self, board: VirtualBoardSpec) -> int:
        return (self.base_switch_cost + self.tick_bookkeeping(board)) * self.scale


def default_config(**overrides) -> SimConfig:
    """Four boards (benign, sender, receiver, I/O), 100 ms slices, 15 minutes."""
    boards = [
        VirtualBoardSpec(0, "benign"),
        VirtualBoardSpec(1, "sender", authorized_hypercalls={"vmmu_config", "ipc_send"}),
        VirtualBoardSpec(2, "receiver", authorized_hypercalls={"ipc_send"}),
        VirtualBoardSpec(3, "io", authorized_hypercalls={"ipc_send", "event_log"}),
    ]
    return SimConfig(boards=boards, **overrides)


def stall_cost(stall: int, speed_exponent: int, absorption: int) -> int:
    """Speed-scaled cost of cache-refill and critical-section stalls.

    At N=0 the stall is paid in full. A slower instruction clock overlaps the
    stall with execution: ``absorption * (2^N - 1)`` ns of it disappear before
    the remainder is scaled like any other kernel cost. ``absorption=0`` makes
    stalls scale exactly like the base cost.
    """
    scale = 1 << speed_exponent
    return max(0, stall - absorption * (scale - 1)) * scale


def worst_case_switch_cost(config: SimConfig) -> int:
    """Upper bound of the actual cost of any switch, with or without an attack."""
    hc = config.hypercalls
    stall = hc.max_critical_section + hc.max_cache_flush_penalty
    worst = 0
    for b in config.boards:
        cost = (config.base_switch_cost + config.tick_bookkeeping(b) + config.jitter.max_draw) * config.scale
        worst = max(worst, cost)
    return worst + stall_cost(stall, config.speed_exponent, config.stall_absorption)


def validate_config(config: SimConfig) -> SimConfig:
    errors: list[tuple[str, str]] = []
    if not config.boards:
        raise ConfigError([("boards", "schedule empty")])
    ids = [b.id for b in config.boards]
    if len(set(ids)) != len(ids):
        errors.append(("boards", "board ids must be unique"))
    for i, b in enumerate(config.boards):
        if b.role not in ROLES:
            errors.append((f"boards[{i}].role", f"must be one of {ROLES}"))
        if b.time_slice <= 0:
            errors.append((f"boards[{i}].time_slice", "time_slice must be > 0"))
        if b.tse_offset <= 0:
            errors.append((f"boards[{i}].tse_offset", "tse_offset must be > 0"))
        elif b.tse_offset >= b.time_slice:
            errors.append((f"boards[{i}].tse_offset", "tse_offset must be < time_slice"))
        unknown = set(b.authorized_hypercalls) - set(HYPERCALL_KINDS)
        if unknown:
            errors.append((f"boards[{i}].authorized_hypercalls", f"unknown kinds {sorted(unknown)}"))
        if b.enforced_switch_duration is not None and b.enforced_switch_duration < 0:
            errors.append((f"boards[{i}].enforced_switch_duration", "must be >= 0"))
    roles = [b.role for b in config.boards]
    for role in ("sender", "receiver"):
        if roles.count(role) > 1:
            errors.append(("boards", f"at most one {role} board allowed"))
    if roles.count("io") > 1:
        errors.append(("boards", "at most one io board allowed"))
    if config.speed_exponent < 0:
        errors.append(("speed_exponent", "must be >= 0"))
    if config.counter_freq <= 0:
        errors.append(("counter_freq", "must be > 0"))
    if config.tick_frequency < 0:
        errors.append(("tick_frequency", "must be >= 0"))
    for name in ("enforced_switch_duration", "base_switch_cost", "tick_cost", "stall_absorption"):
        if getattr(config, name) < 0:
            errors.append((name, "must be >= 0"))
    if not 0 <= config.seed < 2**64:
        errors.append(("seed", "must be a 64-bit unsigned integer"))
    errors += config.hypercalls.validate()
    errors += config.jitter.validate()
    if errors:
        raise ConfigError(errors)

    starts, t = [], 0
    for b in config.boards:
        starts.append(t)
        t += b.time_slice + max(config.enforced_for(b), config.nominal_switch_cost(b))
    major = t
    if config.sim_duration < MIN_MAJOR_FRAMES * major:
        raise ConfigError(
            [("sim_duration", f"duration too short: {config.sim_duration} ns holds fewer than "
                              f"{MIN_MAJOR_FRAMES} major frames of {major} ns")]
        )
    return replace(config, major_frame=major, slice_starts=tuple(starts))


@dataclass(frozen=True)
class MinorFrame:
    board_id: int
    start: int
    slice_end: int
    switch_end: int


@dataclass(frozen=True)
class Schedule:
    frames: tuple
    major_frame: int


def build_schedule(config: SimConfig) -> Schedule:
    """Nominal minor-frame boundaries within one major frame (no jitter, no attack)."""
    frames, t = [], 0
    for b in config.boards:
        end = t + b.time_slice
        switch_end = end + max(config.enforced_for(b), config.nominal_switch_cost(b))
        frames.append(MinorFrame(b.id, t, end, switch_end))
        t = switch_end
    return Schedule(tuple(frames), t)


def ticks_at(time_ns: int, counter_freq: int, speed_exponent: int = 0) -> int:
    """Time-base counter value after ``time_ns`` of virtual time."""
    return time_ns * counter_freq // (SECOND << speed_exponent)


@dataclass
class SimState:
    config: SimConfig
    now: int = 0


def read_counter(state: SimState) -> int:
    c = state.config
    return ticks_at(state.now, c.counter_freq, c.speed_exponent)


@dataclass(frozen=True)
class SwitchEvent:
    frame_index: int
    outgoing_board: int
    incoming_board: int
    actual_cost: int
    perceived_cost: int
    counter_at_switch_in: int
    enforced: int


@dataclass(frozen=True)
class AuditEvent:
    time: int
    board: int
    kind: str
    message: str


@dataclass
class EventLog:
    switches: list = field(default_factory=list)
    audits: list = field(default_factory=list)
    interrupts: dict = field(default_factory=lambda: {"tse": 0, "tsb": 0, "tick": 0})
    residency: int = 0
    perceived_total: int = 0
    elapsed: int = 0
    dropped_calls: int = 0


@dataclass
class TimingTrace:
    frame_index: np.ndarray
    delta_ticks: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        self.delta_ticks = np.asarray(self.delta_ticks, dtype=np.int64)
        if self.frame_index.shape != self.delta_ticks.shape:
            raise ValueError("frame_index and delta_ticks differ in length")

    def __len__(self) -> int:
        return int(self.delta_ticks.size)

    @property
    def attack(self) -> bool:
        return bool(self.metadata.get("attack", False))

    @property
    def config_digest(self) -> Optional[str]:
        return self.metadata.get("config_digest")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.frame_index.astype("<i8").tobytes())
        h.update(self.delta_ticks.astype("<i8").tobytes())
        h.update(json.dumps(self.metadata, sort_keys=True, default=str).encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, TimingTrace):
            return NotImplemented
        return (
            np.array_equal(self.frame_index, other.frame_index)
            and np.array_equal(self.delta_ticks, other.delta_ticks)
            and self.metadata == other.metadata
        )


def config_digest(config: SimConfig) -> str:
    """Digest of everything that defines the system except the seed."""
    from .configio import config_to_dict

    d = config_to_dict(config)
    d.pop("seed", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _action_for(attack, activation: int):
    if attack is None:
        return None
    return attack.action_for(activation)


def run_simulation(config: SimConfig, attack=None, record_events: bool = True):
    """Run the cyclic schedule for ``sim_duration`` ns of virtual time.

    ``attack`` is any object with ``action_for(activation) -> action or None``
    (see :class:`covertsim.attackchan.AttackPlan`); an action carries a
    hypercall ``kind`` and a ``count`` issued from the sender's Time-Slice-End
    handler. Returns ``(TimingTrace, EventLog)``.
    """
    config = validate_config(config) if config.major_frame is None else config
    if attack is not None and (config.board_role("sender") is None or config.board_role("receiver") is None):
        raise ConfigError([("boards", "attack requires one sender and one receiver board")])

    rng = np.random.Generator(np.random.PCG64(config.seed))
    boards = config.boards
    nb = len(boards)
    n = config.speed_exponent
    scale = config.scale
    freq = config.counter_freq
    hc = config.hypercalls
    enforced = [config.enforced_for(b) for b in boards]
    fixed_cost = [config.base_switch_cost + config.tick_bookkeeping(b) for b in boards]
    ticks_per_slice = [b.time_slice * config.tick_frequency // SECOND for b in boards]

    roles = [b.role for b in boards]
    s_pos = roles.index("sender") if "sender" in roles else None
    r_pos = roles.index("receiver") if "receiver" in roles else None

    log = EventLog()
    stamps: list[int] = []
    stamp_frames: list[int] = []
    t = 0
    prev_counter = -1
    frame = 0
    i = 0
    jitter = config.jitter.draw(rng, nb)
    while t <= config.sim_duration:
        board = boards[i]
        counter = t * freq // (SECOND << n)
        if i == r_pos:
            log.interrupts["tsb"] += 1
            stamps.append(counter)
            stamp_frames.append(frame)
        log.interrupts["tick"] += ticks_per_slice[i]
        slice_end = t + board.time_slice
        stall = 0
        if i == s_pos:
            log.interrupts["tse"] += 1
            action = _action_for(attack, frame)
            if action is not None and action.count > 0:
                stall = _burst(config, board, action, slice_end, log)
        actual = (fixed_cost[i] + int(jitter[i])) * scale + stall_cost(stall, n, config.stall_absorption)
        perceived = max(actual, enforced[i])
        log.residency += board.time_slice
        log.perceived_total += perceived
        t = slice_end + perceived
        i += 1
        if i == nb:
            i = 0
            frame += 1
            jitter = config.jitter.draw(rng, nb)
        if record_events:
            c_in = t * freq // (SECOND << n)
            if c_in <= prev_counter:
                raise AssertionError("counter not strictly increasing")
            prev_counter = c_in
            log.switches.append(
                SwitchEvent(frame if i else frame - 1, board.id, boards[i].id, actual, perceived, c_in, enforced[i - 1 if i else nb - 1])
            )
    log.elapsed = t

    stamps_arr = np.asarray(stamps, dtype=np.int64)
    deltas = np.diff(stamps_arr)
    offset = None
    if s_pos is not None and r_pos is not None:
        offset = (attack.start_activation if attack is not None else 1) + (0 if s_pos < r_pos else 1)
    meta = {
        "config_digest": config_digest(config),
        "attack": attack is not None,
        "seed": config.seed,
        "counter_freq": config.counter_freq,
        "speed_exponent": config.speed_exponent,
        "start_offset": int(stamps_arr[0]) if stamps_arr.size else 0,
        "attack_frame_offset": offset,
    }
    trace = TimingTrace(np.asarray(stamp_frames[1:], dtype=np.int64), deltas, meta)
    return trace, log


def _burst(config: SimConfig, board: VirtualBoardSpec, action, slice_end: int, log: EventLog) -> int:
    """Issue a hypercall burst from the TSE handler; return the stall it leaves for the switch."""
    tse = slice_end - board.tse_offset
    if action.kind not in board.authorized_hypercalls:
        log.audits.append(AuditEvent(tse, board.id, action.kind, "unauthorized hypercall denied"))
        return 0
    cost = config.hypercalls[action.kind]
    duration = cost.base_cost * config.scale
    window = board.tse_offset
    if duration == 0:
        started, in_flight = action.count, False
    else:
        started = min(action.count, -(-window // duration))
        in_flight = action.count * duration > window
    log.dropped_calls += action.count - started
    stall = cost.cache_flush_penalty if started else 0
    if in_flight:
        stall += cost.critical_section
    return stall


def export_trace_csv(trace: TimingTrace, path) -> Path:
    """Write ``frame_index,delta_ticks`` CSV plus a ``.json`` metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "delta_ticks"])
        w.writerows(zip(trace.frame_index.tolist(), trace.delta_ticks.tolist()))
    sidecar_path(path).write_text(json.dumps(trace.metadata, indent=2, sort_keys=True) + "\n")
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def trace_to_json(trace: TimingTrace) -> dict[str, Any]:
    return {
        "metadata": trace.metadata,
        "samples": [[int(f), int(d)] for f, d in zip(trace.frame_index, trace.delta_ticks)],
    }


def trace_from_json(obj: dict) -> TimingTrace:
    samples = obj.get("samples", [])
    frames = [s[0] for s in samples]
    deltas = [s[1] for s in samples]
    return TimingTrace(np.asarray(frames, dtype=np.int64), np.asarray(deltas, dtype=np.int64), obj.get("metadata", {}))

