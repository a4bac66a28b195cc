"""Closed-loop resonance tracking.

The demodulated lock-in output is zero at the centre of a line and changes
sign across it, so it serves as the error signal of a feedback loop that
moves the microwave frequency in fixed quanta.  The applied frequency then
follows the line, and its excursion converts directly to a field change.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np

from . import rng as rngmod
from .analysis import field_from_shift
from .errors import InvalidInputError
from .nv_core import EnsembleParams, apply_drive, reference_environment, resonance_frequencies
from .signal_chain import DetectionConfig, MwDriveConfig, NoiseConfig, _Engine

DEFAULT_TARGET = (3, 1, 0)  # orientation, branch, hyperfine index


@dataclass(frozen=True)
class TrackerConfig:
    """Loop settings.

    ``error_deadband=None`` derives the deadband from the slope probed at
    acquisition: half a frequency quantum expressed in volts.
    ``initial_f_c=None`` starts on the target line centre at t = 0.
    """

    step_quantum: float = 250.0
    t_int_per_iter: float = 1e-3
    error_deadband: float = None
    drive: MwDriveConfig = field(default_factory=lambda: MwDriveConfig(f_mod=1e3, f_depth=40e3, P_MW=58e-6))
    initial_f_c: float = None
    target: tuple = DEFAULT_TARGET
    lock_loss_linewidths: float = 3.0

    def __post_init__(self):
        if not self.step_quantum > 0:
            raise InvalidInputError("step_quantum must be positive")
        if not self.t_int_per_iter > 0:
            raise InvalidInputError("t_int_per_iter must be positive")
        if self.error_deadband is not None and self.error_deadband < 0:
            raise InvalidInputError("error_deadband must be non-negative")


@dataclass(frozen=True)
class Phase:
    label: str
    start: float
    end: float
    level_from: float
    level_to: float
    ramp: float

    def level(self, t):
        """Linear ramp from ``level_from`` to ``level_to`` over ``ramp`` s, then flat."""
        if self.ramp <= 0:
            return np.full_like(t, self.level_to)
        frac = np.clip((t - self.start) / self.ramp, 0.0, 1.0)
        return self.level_from + frac * (self.level_to - self.level_from)


class Scenario:
    """Time-dependent field change built from consecutive labelled phases.

    Calling the instance maps a time array to the field change (T) along the
    tracked axis.  Before the first phase the field is ``phases[0].level_from``
    and after the last it holds the final level.
    """

    def __init__(self, phases, name="custom"):
        phases = list(phases)
        if not phases:
            raise InvalidInputError("a scenario needs at least one phase")
        for a, b in zip(phases, phases[1:]):
            if not math.isclose(a.end, b.start, abs_tol=1e-12):
                raise InvalidInputError("phases must be contiguous")
        if any(p.end <= p.start for p in phases):
            raise InvalidInputError("phases must have positive duration")
        self.phases = tuple(phases)
        self.name = name

    @classmethod
    def from_segments(cls, segments, name="custom", start_level=0.0):
        """Build from ``(label, duration, end_level, ramp_time)`` tuples."""
        phases, t, level = [], 0.0, start_level
        for label, duration, end_level, ramp in segments:
            if ramp > duration:
                raise InvalidInputError(f"ramp of phase {label!r} is longer than the phase")
            phases.append(Phase(label, t, t + duration, level, end_level, ramp))
            t += duration
            level = end_level
        return cls(phases, name)

    @classmethod
    def from_samples(cls, t, level, name="samples"):
        """Piecewise-linear scenario through ``(t, level)`` samples."""
        t = np.asarray(t, dtype=float)
        level = np.asarray(level, dtype=float)
        if t.ndim != 1 or t.shape != level.shape or t.size < 2 or np.any(np.diff(t) <= 0):
            raise InvalidInputError("scenario samples need increasing times and matching levels")
        phases = [Phase(f"segment{i}", t[i], t[i + 1], level[i], level[i + 1], t[i + 1] - t[i])
                  for i in range(t.size - 1)]
        return cls(phases, name)

    @property
    def duration(self):
        return self.phases[-1].end

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.full_like(t, self.phases[0].level_from)
        for p in self.phases:
            sel = t >= p.start
            out = np.where(sel, p.level(t), out)
        return out

    def label_at(self, t):
        t = np.asarray(t, dtype=float)
        starts = np.array([p.start for p in self.phases])
        idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(self.phases) - 1)
        return np.array([self.phases[i].label for i in np.atleast_1d(idx)])


def elevator_scenario(move=40e-9, doors=12e-9, ground_doors=-12e-9):
    """Field profile of an elevator ride next to the sensor.

    Levels are illustrative, tens of nanotesla: the car departs, stops with
    its doors opening, waits, closes, returns and opens again at the ground.
    """
    return Scenario.from_segments([
        ("ground", 3.0, 0.0, 0.0),
        ("up-move", 8.0, move, 8.0),
        ("doors-open", 2.0, move + doors, 0.5),
        ("wait", 6.0, move + doors, 0.0),
        ("doors-close", 2.0, move, 0.5),
        ("down-move", 8.0, 0.0, 8.0),
        ("doors-open", 4.0, ground_doors, 0.5),
    ], name="elevator")


def step_scenario(level, t_step=0.05, duration=0.2):
    return Scenario.from_segments([("before", t_step, 0.0, 0.0), ("after", duration - t_step, level, 0.0)], name="step")


def constant_scenario(duration=1.0, level=0.0):
    return Scenario.from_segments([("constant", duration, level, 0.0)], name="constant", start_level=level)


@dataclass(frozen=True)
class TrackLog:
    """Per-iteration record; ``delta_B`` is always derived from ``f_c``."""

    timestamps: np.ndarray
    f_c: np.ndarray
    delta_B: np.ndarray
    S_demod: np.ndarray
    true_delta_B: np.ndarray
    lock_lost: np.ndarray
    phase: np.ndarray
    deadband: float
    slope_sign: int
    meta: dict = field(default_factory=dict)


def target_line(lines, target=DEFAULT_TARGET):
    o, b, k = target
    for line in lines:
        if line.orientation_index == o and line.branch == b and line.hyperfine_index == k:
            return line
    raise InvalidInputError(f"no line with orientation {o}, branch {b}, hyperfine index {k}")


def track(scenario, cfg=None, env=None, det=None, noise=None, params=None, b1_factor=1.0, sample_rate=None):
    """Run the bang-bang frequency lock over ``scenario``.

    Parameters
    ----------
    scenario : Scenario or callable
        Field change (T) against time along the tracked NV axis; must carry
        a ``duration`` attribute.
    cfg : TrackerConfig
    env : MagneticEnvironment, optional
        Static environment; its ``test_field`` is replaced by the scenario
        and, unless set, its ``test_axis`` by the tracked NV axis.

    Notes
    -----
    The slope sign is probed once at start-up with two lock-in readings a
    quarter linewidth either side of the initial frequency.  Each iteration
    then integrates one window at the current frequency and, if the reading
    is outside the deadband, moves one quantum toward the zero crossing.
    """
    cfg = cfg or TrackerConfig()
    det = det or DetectionConfig()
    noise = noise or NoiseConfig()
    params = params or EnsembleParams()
    env = env or reference_environment()
    axis = env.test_axis if env.test_axis is not None else params.axes[cfg.target[0]]
    run_env = replace(env, test_field=scenario, test_axis=tuple(np.asarray(axis, dtype=float)))
    static_env = replace(env, test_field=None)

    lines = apply_drive(resonance_frequencies(static_env, params), params, cfg.drive.P_MW)
    line = target_line(lines, cfg.target)
    proj0 = float(params.axes[line.orientation_index] @ env.b0)
    gain = float(params.axes[line.orientation_index] @ run_env.axis)
    gamma = params.constants.gamma_NV

    def true_center(t):
        db = np.asarray(scenario(t), dtype=float)
        return line.center + line.branch * gamma * (np.abs(proj0 + db * gain) - abs(proj0))

    f0 = cfg.initial_f_c if cfg.initial_f_c is not None else float(true_center(np.array([0.0]))[0])
    eng = _Engine(cfg.drive.tuned(f0), lines, run_env, det, noise, cfg.t_int_per_iter, sample_rate, params, b1_factor)
    t_win = eng.t_int
    n_iter = int(math.floor(scenario.duration / t_win + 1e-9))
    if n_iter < 1:
        raise InvalidInputError("scenario is shorter than one iteration")

    # slope probe in a field-free copy so acquisition does not see the scenario
    probe = _Engine(cfg.drive.tuned(f0), lines, static_env, det, replace(noise, shot_noise_on=False, laser_rin=0.0),
                    cfg.t_int_per_iter, sample_rate, params, b1_factor)
    half = line.linewidth / 4
    s_lo, s_hi = probe.run(np.array([f0 - half, f0 + half]), np.zeros(2), rngmod.TRACKER, stream_id=1, threads=1)
    secant = (s_hi - s_lo) / (2 * half)
    if secant == 0:
        raise InvalidInputError("no slope at the initial frequency; start closer to the line")
    slope_sign = 1 if secant > 0 else -1
    deadband = cfg.error_deadband if cfg.error_deadband is not None else abs(secant) * cfg.step_quantum / 2

    ts = np.arange(n_iter) * t_win
    fc_log = np.empty(n_iter)
    s_log = np.empty(n_iter)
    steps = 0
    for i in range(n_iter):
        fc = f0 + steps * cfg.step_quantum
        t, v = eng.voltages(np.array([fc]), ts[i : i + 1], np.array([i]), rngmod.TRACKER)
        s = float(eng.demod(t, v)[0])
        fc_log[i] = fc
        s_log[i] = s
        if abs(s) > deadband:
            steps += -int(np.sign(s)) * slope_sign

    mid = ts + 0.5 * t_win
    truth = np.asarray(scenario(mid), dtype=float)
    lost = np.abs(fc_log - true_center(mid)) > cfg.lock_loss_linewidths * line.linewidth
    labels = scenario.label_at(mid) if hasattr(scenario, "label_at") else np.full(n_iter, "")
    meta = {"target": cfg.target, "line_center": line.center, "linewidth": line.linewidth,
            "t_int": t_win, "scenario": getattr(scenario, "name", "custom")}
    return TrackLog(ts, fc_log, field_from_shift(fc_log - fc_log[0], gamma), s_log, truth, lost, labels,
                    float(deadband), slope_sign, meta)


def phase_transition_errors(log, scenario, step_quantum=250.0, gamma=None):
    """Tracking error at the end of every phase, in tracker steps.

    For each phase the inferred field change (last sample of the phase
    minus last sample of the previous one) is compared with the true one.
    Returns a list of ``(label, true_change, inferred_change, error_steps)``.
    """
    gamma = gamma or EnsembleParams().constants.gamma_NV
    quantum_field = step_quantum / gamma
    t = log.timestamps + log.meta.get("t_int", 0.0) / 2
    out = []
    prev_true = prev_inf = 0.0
    for p in scenario.phases:
        sel = np.nonzero((t >= p.start) & (t < p.end))[0]
        if sel.size == 0:
            continue
        j = sel[-1]
        true_c = float(log.true_delta_B[j]) - prev_true
        inf_c = float(log.delta_B[j]) - prev_inf
        err = abs(float(log.delta_B[j]) - float(log.true_delta_B[j])) / quantum_field
        out.append((p.label, true_c, inf_c, err))
        prev_true, prev_inf = float(log.true_delta_B[j]), float(log.delta_B[j])
    return out
