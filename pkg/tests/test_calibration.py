from dataclasses import replace

import numpy as np
import pytest

from covertsim.calibration import CalibrationError, fit_config
from covertsim.simkernel import MS, US, JitterModel, TimingTrace, default_config, run_simulation


def reference(deltas, freq=1_500_000_000):
    d = np.asarray(deltas, dtype=np.int64)
    return TimingTrace(np.arange(1, d.size + 1), d,
                       {"counter_freq": freq, "config_digest": "ref", "attack": False})


def physical_reference(n=2000, seed=1):
    rng = np.random.Generator(np.random.PCG64(seed))
    return reference(np.rint(rng.normal(3.6e8, 3e4, n)))


def test_self_calibration_round_trip():
    truth = default_config(enforced_switch_duration=1 * US, seed=21)
    ref, _ = run_simulation(truth, record_events=False)
    template = replace(truth, base_switch_cost=1 * US,
                       jitter=replace(truth.jitter, magnitude=7 * US, tail_magnitude=14 * US), seed=5)
    fit = fit_config(ref, template)
    assert fit.config.base_switch_cost == pytest.approx(truth.base_switch_cost, rel=0.05)
    assert fit.config.jitter.magnitude == pytest.approx(truth.jitter.magnitude, rel=0.05)
    assert fit.mean_error < 0.05 and fit.variance_error < 0.05


def test_constant_reference_fits_no_jitter():
    fit = fit_config(reference([600_060_000] * 100), default_config(enforced_switch_duration=0))
    assert fit.config.jitter.kind == "none"
    assert fit.mean_error < 1e-6 and fit.variance_error == 0


def test_physical_scale_reference():
    template = default_config(speed_exponent=1, enforced_switch_duration=1 * US)
    fit = fit_config(physical_reference(), template)
    assert fit.mean_error <= 0.05
    assert fit.variance_error <= 0.05


def test_reference_below_model_floor():
    with pytest.raises(CalibrationError, match="below the model floor"):
        fit_config(physical_reference(), default_config(enforced_switch_duration=1 * US))


def test_masking_padding_diagnostic():
    truth = default_config(enforced_switch_duration=1 * US, jitter=JitterModel("none", 0, 0.0, 0))
    ref, _ = run_simulation(truth, record_events=False)
    with pytest.raises(CalibrationError, match="clamp"):
        fit_config(ref, replace(truth, enforced_switch_duration=10 * MS))


def test_too_short_reference():
    with pytest.raises(CalibrationError):
        fit_config(reference([5]), default_config())
