"""Binary covert channel over context-switch delays.

The sender bursts hypercalls from its Time-Slice-End handler to signal a 1
and stays idle for a 0. The receiver compares each time-between-switch-ins
sample against a threshold trained on a known alternating preamble.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .simkernel import TimingTrace

DEFAULT_BURST_KIND = "vmmu_config"
DEFAULT_BURST_COUNT = 50


class ChannelClosed(ValueError):
    """Preamble clusters are not separable: nothing can be decoded."""


@dataclass(frozen=True)
class BurstSpec:
    kind: str = DEFAULT_BURST_KIND
    count: int = DEFAULT_BURST_COUNT


@dataclass
class BitMessage:
    bits: list
    frames_per_bit: int = 1
    preamble_len: int = 0

    def __post_init__(self):
        self.bits = [int(b) for b in self.bits]
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("bits must be 0 or 1")
        if self.frames_per_bit < 1:
            raise ValueError("frames_per_bit must be >= 1")
        if self.preamble_len < 0:
            raise ValueError("preamble_len must be >= 0")

    @property
    def preamble(self) -> list:
        return preamble_bits(self.preamble_len)

    @property
    def line_bits(self) -> list:
        return self.preamble + self.bits


def preamble_bits(n: int) -> list:
    return [1 - (i % 2) for i in range(n)]


@dataclass
class AttackPlan:
    """Per sender-activation burst schedule.

    ``actions[i]`` is a :class:`BurstSpec` or ``None`` (idle) for sender
    activation ``start_activation + i``. Activation 0 is left untouched so
    that every action lands inside a measured receiver interval. A cyclic
    plan repeats forever (continuous stress).
    """

    actions: list
    start_activation: int = 1
    cyclic: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    def action_for(self, activation: int) -> Optional[BurstSpec]:
        i = activation - self.start_activation
        if i < 0:
            return None
        if self.cyclic:
            i %= len(self.actions)
        elif i >= len(self.actions):
            return None
        return self.actions[i]

    @classmethod
    def continuous(cls, burst: BurstSpec = BurstSpec()) -> "AttackPlan":
        return cls([burst], start_activation=0, cyclic=True)


def encode(message: BitMessage, burst: BurstSpec = BurstSpec()) -> AttackPlan:
    actions = []
    for bit in message.line_bits:
        actions.extend([burst if bit else None] * message.frames_per_bit)
    if not actions:
        raise ValueError("zero-length attack plan")
    return AttackPlan(actions)


def aligned_deltas(trace: TimingTrace, frame_offset: Optional[int] = None) -> np.ndarray:
    """Deltas starting at the sample that covers plan action 0.

    ``frame_offset`` is the receiver frame index of that sample; by default it
    is taken from the trace metadata (``attack_frame_offset``) and otherwise
    the first sample is used.
    """
    if frame_offset is None:
        frame_offset = trace.metadata.get("attack_frame_offset")
    if frame_offset is None or len(trace) == 0:
        return trace.delta_ticks
    idx = np.searchsorted(trace.frame_index, frame_offset)
    return trace.delta_ticks[idx:]


def calibrate_threshold(trace: TimingTrace, preamble: Sequence[int], frames_per_bit: int = 1,
                        frame_offset: Optional[int] = None, z: float = 3.0) -> float:
    """Midpoint between the preamble-1 and preamble-0 mean deltas.

    Raises :class:`ChannelClosed` when the means differ by no more than ``z``
    standard errors (or less than one tick).
    """
    deltas = aligned_deltas(trace, frame_offset)
    need = len(preamble) * frames_per_bit
    if len(deltas) < need:
        raise ValueError(f"trace has {len(deltas)} samples, preamble needs {need}")
    labels = np.repeat(np.asarray(preamble, dtype=int), frames_per_bit)
    x = deltas[:need].astype(np.float64)
    ones, zeros = x[labels == 1], x[labels == 0]
    if ones.size == 0 or zeros.size == 0:
        raise ValueError("preamble must contain both symbols")
    m1, m0 = ones.mean(), zeros.mean()
    se = math.sqrt((ones.var(ddof=1) / ones.size if ones.size > 1 else 0.0)
                   + (zeros.var(ddof=1) / zeros.size if zeros.size > 1 else 0.0))
    if abs(m1 - m0) <= max(1.0, z * se):
        raise ChannelClosed(f"preamble means indistinguishable ({m1:.1f} vs {m0:.1f} ticks)")
    return (m1 + m0) / 2


@dataclass
class DecodeResult:
    decoded_bits: list
    threshold_ticks: float
    per_bit_confidence: list
    ber: Optional[float] = None
    partial: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def decode(trace: TimingTrace, threshold_ticks: float, frames_per_bit: int = 1,
           ground_truth: Optional[Sequence[int]] = None, preamble_len: int = 0,
           frame_offset: Optional[int] = None, n_bits: Optional[int] = None) -> DecodeResult:
    """Majority vote of ``delta > threshold`` over each bit's frames.

    Bits after ``preamble_len`` are returned; ``n_bits`` defaults to the
    ground-truth length, or to as many whole bits as the trace holds.
    """
    deltas = aligned_deltas(trace, frame_offset)
    start = preamble_len * frames_per_bit
    body = deltas[start:]
    available = len(body) // frames_per_bit
    if n_bits is None:
        n_bits = len(ground_truth) if ground_truth is not None else available
    partial = available < n_bits
    n = min(n_bits, available)
    bits, margins = [], []
    for k in range(n):
        chunk = body[k * frames_per_bit:(k + 1) * frames_per_bit].astype(np.float64)
        votes = int(np.count_nonzero(chunk > threshold_ticks))
        if 2 * votes == len(chunk):
            bit = int(chunk.mean() > threshold_ticks)
        else:
            bit = int(2 * votes > len(chunk))
        bits.append(bit)
        margins.append(float(abs(chunk.mean() - threshold_ticks)))
    ber = None
    if ground_truth is not None:
        truth = [int(b) for b in ground_truth]
        errors = sum(b != t for b, t in zip(bits, truth)) + (len(truth) - n)
        ber = errors / len(truth) if truth else 0.0
    return DecodeResult(bits, float(threshold_ticks), margins, ber, partial)


def parse_message(text: str) -> list:
    """Bits from ``0x``-prefixed hex, ``0b``-prefixed binary, or a bare 0/1 string."""
    s = text.strip().replace("_", "")
    if s.lower().startswith("0x"):
        digits = s[2:]
        if not digits or not re.fullmatch(r"[0-9a-fA-F]+", digits):
            raise ValueError(f"bad hex message: {text!r}")
        return [int(b) for b in bin(int(digits, 16))[2:].zfill(4 * len(digits))]
    if s.lower().startswith("0b"):
        s = s[2:]
    if not s or set(s) - {"0", "1"}:
        raise ValueError(f"bad binary message: {text!r}")
    return [int(c) for c in s]

