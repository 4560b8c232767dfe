"""Moment-matching fit of switch cost and jitter magnitude to a reference trace."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .simkernel import SECOND, JitterModel, SimConfig, TimingTrace, run_simulation, validate_config
from .timestats import moments

# deltas of a noise-free schedule still alternate between floor/ceil of the
# true period, so a variance up to this many tick^2 carries no jitter signal
QUANTIZATION_FLOOR = 0.25
DEFAULT_TAIL_RATIO = 2.0
_UNIT = 1_000_000


class CalibrationError(ValueError):
    pass


@dataclass
class FitReport:
    config: SimConfig
    reference_mean: float
    reference_variance: float
    simulated_mean: float
    simulated_variance: float

    @property
    def mean_error(self) -> float:
        return abs(self.simulated_mean - self.reference_mean) / self.reference_mean

    @property
    def variance_error(self) -> float:
        if self.reference_variance <= QUANTIZATION_FLOOR:
            return 0.0 if self.simulated_variance <= QUANTIZATION_FLOOR else math.inf
        return abs(self.simulated_variance - self.reference_variance) / self.reference_variance


def _jitter_shape(template: JitterModel) -> JitterModel:
    """Jitter of magnitude _UNIT with the template's kind, tail probability and tail ratio."""
    kind = template.kind if template.kind != "none" else "truncated-normal"
    if template.magnitude > 0 and template.kind != "none":
        ratio = template.tail_magnitude / template.magnitude
    else:
        ratio = DEFAULT_TAIL_RATIO
    return JitterModel(kind, _UNIT, template.tail_probability, int(round(ratio * _UNIT)))


def fit_config(reference: TimingTrace, template: SimConfig, verify: bool = True,
               verify_scale: int = 20) -> FitReport:
    """Fit ``base_switch_cost`` and ``jitter.magnitude`` of ``template`` to ``reference``.

    The reference's ``counter_freq`` metadata replaces the template's. The
    fit assumes the enforced switch duration does not mask the switches.
    The verification run lasts ``verify_scale`` times the template duration
    so its own sampling noise stays well below the 5% acceptance band.
    """
    freq = int(reference.metadata.get("counter_freq", template.counter_freq))
    cfg = validate_config(replace(template, counter_freq=freq, major_frame=None, slice_starts=None))
    if len(reference) < 2:
        raise CalibrationError("reference trace needs at least two samples")
    mean_t, var_t = moments(reference.delta_ticks)
    ns_per_tick = SECOND * cfg.scale / freq
    mean_ns = mean_t * ns_per_tick
    nboards = len(cfg.boards)
    slices = sum(b.time_slice for b in cfg.boards)
    bookkeeping = sum(cfg.tick_bookkeeping(b) for b in cfg.boards)

    shape = _jitter_shape(cfg.jitter)
    var_unit = shape.moments()[1] / _UNIT ** 2
    if var_t <= QUANTIZATION_FLOOR:
        magnitude = 0
        jitter = replace(cfg.jitter, kind="none", magnitude=0, tail_magnitude=0)
    else:
        var_switch = var_t * ns_per_tick ** 2 / (nboards * cfg.scale ** 2)
        magnitude = int(round(math.sqrt(var_switch / var_unit)))
        jitter = JitterModel(shape.kind, magnitude, shape.tail_probability,
                             int(round(magnitude * shape.tail_magnitude / _UNIT)))
    mean_jitter = jitter.moments()[0]
    per_switch = (mean_ns - slices) / (nboards * cfg.scale)
    base = per_switch - bookkeeping / nboards - mean_jitter
    if base < 0:
        raise CalibrationError(
            f"reference mean {mean_t:.6g} ticks is below the model floor: the schedule alone "
            f"takes {(slices + bookkeeping * cfg.scale) / ns_per_tick:.6g} ticks per major frame"
        )
    fitted = replace(cfg, base_switch_cost=int(round(base)), jitter=jitter, major_frame=None, slice_starts=None)
    lowest = fitted.base_switch_cost * fitted.scale
    masked = [b.id for b in fitted.boards if fitted.enforced_for(b) > lowest]
    if masked:
        raise CalibrationError(
            f"enforced switch duration exceeds the fitted switch cost ({lowest} ns) on boards {masked}; "
            "the clamp hides the switch-cost distribution. Fit with a smaller enforced_switch_duration."
        )
    sim_mean, sim_var = float("nan"), float("nan")
    if verify:
        long_run = replace(fitted, sim_duration=fitted.sim_duration * verify_scale)
        trace, _ = run_simulation(long_run, record_events=False)
        sim_mean, sim_var = moments(trace.delta_ticks)
    return FitReport(fitted, mean_t, var_t, sim_mean, sim_var)
