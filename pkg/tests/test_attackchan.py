import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covertsim.attackchan import (
    AttackPlan, BitMessage, BurstSpec, ChannelClosed, aligned_deltas, calibrate_threshold, decode,
    encode, parse_message, preamble_bits,
)
from covertsim.simkernel import JitterModel, TimingTrace, run_simulation
from scenarios import CLOSED, OPEN, PREAMBLE, channel_config, random_bits, transmit

B = BurstSpec()


def hand_trace(deltas, **meta):
    return TimingTrace(np.arange(1, len(deltas) + 1), np.asarray(deltas, dtype=np.int64), meta)


# --- encode ------------------------------------------------------------------------

def test_encode_direct_mapping():
    assert encode(BitMessage([1, 0, 1]), B).actions == [B, None, B]


def test_encode_preamble_only():
    assert encode(BitMessage([], preamble_len=4), B).actions == [B, None, B, None]


def test_encode_repetition():
    assert encode(BitMessage([1], frames_per_bit=3), B).actions == [B, B, B]


def test_encode_zero_length():
    with pytest.raises(ValueError, match="zero-length"):
        encode(BitMessage([]))


def test_message_validation():
    with pytest.raises(ValueError):
        BitMessage([2])
    with pytest.raises(ValueError):
        BitMessage([1], frames_per_bit=0)


def test_plan_lookup():
    plan = AttackPlan([B, None])
    assert [plan.action_for(i) for i in range(4)] == [None, B, None, None]
    cyc = AttackPlan.continuous()
    assert all(cyc.action_for(i) == B for i in range(5))


def test_preamble_bits_alternate():
    assert preamble_bits(5) == [1, 0, 1, 0, 1]


@pytest.mark.parametrize("text,bits", [
    ("0xA", [1, 0, 1, 0]), ("0b011", [0, 1, 1]), ("1_0", [1, 0]), ("0x0F", [0, 0, 0, 0, 1, 1, 1, 1]),
])
def test_parse_message(text, bits):
    assert parse_message(text) == bits


@pytest.mark.parametrize("text", ["0x", "0xZZ", "abc", ""])
def test_parse_message_rejects(text):
    with pytest.raises(ValueError):
        parse_message(text)


# --- threshold / decode ------------------------------------------------------------

def test_threshold_midpoint():
    assert calibrate_threshold(hand_trace([1000, 900]), [1, 0]) == 950


def test_threshold_equal_means_closed():
    with pytest.raises(ChannelClosed):
        calibrate_threshold(hand_trace([1000, 1000, 1000, 1000]), [1, 0, 1, 0])


def test_threshold_respects_frame_offset():
    t = hand_trace([5, 5, 1000, 900], attack_frame_offset=3)
    assert list(aligned_deltas(t)) == [1000, 900]
    assert calibrate_threshold(t, [1, 0]) == 950


def test_decode_threshold_comparison():
    r = decode(hand_trace([1000, 900, 1000]), 950, 1)
    assert r.decoded_bits == [1, 0, 1] and r.ber is None and not r.partial


def test_decode_majority_and_ber():
    r = decode(hand_trace([1000, 900, 1000, 900, 900, 1000]), 950, 3, ground_truth=[1, 1])
    assert r.decoded_bits == [1, 0]
    assert r.ber == 0.5
    json.loads(r.to_json())


def test_decode_partial_trace():
    r = decode(hand_trace([1000, 900]), 950, 1, ground_truth=[1, 0, 1, 1])
    assert r.partial and r.decoded_bits == [1, 0] and r.ber == 0.5


def test_calibrated_threshold_between_cluster_means():
    config = channel_config(OPEN, seed=4)
    trace, _ = run_simulation(config, encode(BitMessage([], preamble_len=PREAMBLE)), record_events=False)
    thr = calibrate_threshold(trace, preamble_bits(PREAMBLE))
    d = aligned_deltas(trace)[:PREAMBLE]
    assert d[1::2].mean() < thr < d[0::2].mean()


# --- end to end --------------------------------------------------------------------

def test_open_channel_64_bits():
    result, closed = transmit(OPEN, parse_message("0xDEADBEEFCAFEF00D"), seed=1)
    assert not closed
    assert result.ber <= 0.05


def test_closed_channel_is_coin_flip():
    result, closed = transmit(CLOSED, random_bits(1000, 7), seed=2)
    assert closed
    assert abs(result.ber - 0.5) <= 0.05


@settings(max_examples=15, deadline=None)
@given(bits=st.lists(st.integers(0, 1), min_size=1, max_size=40), fpb=st.integers(1, 3),
       seed=st.integers(0, 2**32))
def test_round_trip_without_jitter(bits, fpb, seed):
    result, closed = transmit(OPEN, bits, seed, fpb, jitter=JitterModel("none", 0, 0.0, 0))
    assert not closed
    assert result.decoded_bits == bits


def test_shift_monotone_in_burst_count():
    shifts = []
    for count in (1, 10, 40, 50, 200):
        config = channel_config(OPEN, seed=3, jitter=JitterModel("none", 0, 0.0, 0))
        base, _ = run_simulation(config, record_events=False)
        atk, _ = run_simulation(config, AttackPlan.continuous(BurstSpec("vmmu_config", count)),
                                record_events=False)
        shifts.append(float((atk.delta_ticks - base.delta_ticks).mean()))
    assert shifts == sorted(shifts) and shifts[-1] > shifts[0]
