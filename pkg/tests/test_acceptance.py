"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line in the summary."""
from dataclasses import replace

import numpy as np

from covertsim.attackchan import BitMessage, BurstSpec, encode
from covertsim.calibration import fit_config
from covertsim.harness import ExperimentPlan, ingest_trace, padding_violations, run_plan
from covertsim.simkernel import (
    MS, US, JitterModel, export_trace_csv, default_config, run_simulation, worst_case_switch_cost,
)
from covertsim.timestats import permutation_test, welch_t_test
from scenarios import CLOSED, OPEN, null_rejection_rate, oracle_pairs, random_bits, transmit
from test_calibration import physical_reference

BUDGET_S = 30 * 60


def test_criterion_1_feasibility_pattern(default_plan_run, criterion):
    result, _, elapsed = default_plan_run
    wrong = []
    for pr in result.points:
        expected = pr.point.speed_exponent == 0 and pr.point.switch_duration in (10 * US, 1 * US)
        # feasible means every one of the three repetitions rejects
        unanimous = len(pr.verdict.tests) == 3 and pr.verdict.feasible == all(t.reject for t in pr.verdict.tests)
        if pr.verdict.feasible != expected or not unanimous:
            wrong.append(pr.point.label)
    ok = not wrong and not result.partial and elapsed < BUDGET_S
    n_feasible = sum(pr.verdict.feasible for pr in result.points)
    criterion(1, ok, f"{n_feasible}/36 feasible, mismatched={wrong}, wall clock {elapsed:.1f}s (budget {BUDGET_S}s)")
    assert ok


def _masking_case(rng):
    n = int(rng.integers(0, 3))
    kind = ["none", "uniform", "truncated-normal"][int(rng.integers(0, 3))]
    jitter = JitterModel(kind, int(rng.integers(0, 5 * US)), float(rng.choice([0.0, 0.005, 0.1])),
                         int(rng.integers(0, 10 * US)))
    c = default_config(speed_exponent=n, jitter=jitter, seed=int(rng.integers(0, 2**63)),
                       base_switch_cost=int(rng.integers(0, 10 * US)),
                       tick_frequency=int(rng.choice([10, 1000])))
    for b in c.boards:
        b.time_slice = 10 * MS
    padding = worst_case_switch_cost(c) + int(rng.integers(0, 5 * US))
    c = replace(c, enforced_switch_duration=padding)
    c = replace(c, sim_duration=60 * 4 * (10 * MS + padding))
    bits = rng.integers(0, 2, int(rng.integers(1, 50))).tolist()
    burst = BurstSpec(str(rng.choice(["vmmu_config", "ipc_send"])), int(rng.integers(1, 300)))
    return c, encode(BitMessage(bits, int(rng.integers(1, 3)), 4), burst)


def test_criterion_2_full_masking(criterion):
    rng = np.random.Generator(np.random.PCG64(2024))
    identical = jitter_free = p_one = 0
    cases = 100
    for _ in range(cases):
        c, plan = _masking_case(rng)
        base, _ = run_simulation(c, record_events=False)
        atk, _ = run_simulation(c, plan, record_events=False)
        same = np.array_equal(base.delta_ticks, atk.delta_ticks)
        identical += same
        if c.jitter.kind == "none":
            jitter_free += 1
            p_one += welch_t_test(atk.delta_ticks, base.delta_ticks).p_value == 1.0
    ok = identical == cases and jitter_free > 0 and p_one == jitter_free
    criterion(2, ok, f"{identical}/{cases} traces bitwise identical; p = 1 in {p_one}/{jitter_free} jitter-free cases")
    assert ok


def test_criterion_3_statistical_engine(criterion):
    gaps = [abs(welch_t_test(a, b).p_value - permutation_test(a, b, 20_000, seed=i))
            for i, (a, b) in enumerate(oracle_pairs(20))]
    rate = null_rejection_rate(600)
    d = welch_t_test([7, 7, 7, 7], [7, 7, 7, 7])
    degenerate = d.p_value == 1.0 and d.t_statistic == 0.0
    ok = max(gaps) <= 0.02 and 0.03 <= rate <= 0.07 and degenerate
    criterion(3, ok, f"max |dp| vs permutation {max(gaps):.4f} over 20 pairs; null rejection {rate:.3f} "
                     f"over 600 trials; constants p={d.p_value} t={d.t_statistic}")
    assert ok


def test_criterion_4_end_to_end_channel(criterion):
    open_res, _ = transmit(OPEN, random_bits(64, 11), seed=12)
    closed_res, closed = transmit(CLOSED, random_bits(1000, 13), seed=14)
    ok = open_res.ber <= 0.05 and abs(closed_res.ber - 0.5) <= 0.05
    criterion(4, ok, f"open channel BER {open_res.ber:.4f} (64 bits); closed channel BER {closed_res.ber:.4f} "
                     f"(1000 bits, closed at calibration: {closed})")
    assert ok


def test_criterion_5_reproducibility(tmp_path, criterion):
    plan = ExperimentPlan(seed=77)
    a = run_plan(plan, tmp_path / "a", jobs=4)
    b = run_plan(plan, tmp_path / "b", jobs=4)
    same_digests = sorted(a.traces) == sorted(b.traces)
    same_verdicts = [p.verdict.to_dict() for p in a.points] == [p.verdict.to_dict() for p in b.points]
    same_files = (tmp_path / "a" / "verdicts.csv").read_text().splitlines()[0] == \
        (tmp_path / "b" / "verdicts.csv").read_text().splitlines()[0]
    lossless = 0
    for digest, trace in a.traces.items():
        back = ingest_trace(export_trace_csv(trace, tmp_path / "rt" / f"{digest}.csv"))
        lossless += back == trace and back.digest() == digest
    ok = same_digests and same_verdicts and same_files and lossless == len(a.traces)
    criterion(5, ok, f"{len(a.traces)} trace digests identical: {same_digests}; verdicts identical: "
                     f"{same_verdicts}; lossless round trips {lossless}/{len(a.traces)}")
    assert ok


def test_criterion_6_calibration(criterion):
    truth = default_config(enforced_switch_duration=1 * US, seed=606)
    ref, _ = run_simulation(truth, record_events=False)
    template = replace(truth, base_switch_cost=500, seed=1,
                       jitter=replace(truth.jitter, magnitude=9 * US, tail_magnitude=18 * US))
    fit = fit_config(ref, template)
    base_err = abs(fit.config.base_switch_cost - truth.base_switch_cost) / truth.base_switch_cost
    jit_err = abs(fit.config.jitter.magnitude - truth.jitter.magnitude) / truth.jitter.magnitude
    phys = fit_config(physical_reference(), default_config(speed_exponent=1, enforced_switch_duration=1 * US))
    ok = base_err <= 0.05 and jit_err <= 0.05 and phys.mean_error <= 0.05
    criterion(6, ok, f"self-fit errors base {base_err:.2%}, jitter {jit_err:.2%}; physical-scale "
                     f"reference mean {phys.reference_mean:.4g} reproduced within {phys.mean_error:.2e}")
    assert ok


def test_criterion_7_padding_monotone(default_plan_run, criterion):
    result, _, _ = default_plan_run
    bad = padding_violations(result)
    ok = not bad
    criterion(7, ok, f"{len(bad)} padding-monotonicity violations over {len(result.points)} grid points")
    assert ok
