import numpy as np
import pytest

from nvlab import tracker as tk
from nvlab.analysis import field_from_shift
from nvlab.errors import InvalidInputError
from nvlab.nv_core import PhysicalConstants
from nvlab.signal_chain import NoiseConfig

GAMMA = PhysicalConstants().gamma_NV
QUANTUM_FIELD = 250.0 / GAMMA


def test_config_invariants():
    with pytest.raises(InvalidInputError):
        tk.TrackerConfig(step_quantum=0.0)
    with pytest.raises(InvalidInputError):
        tk.TrackerConfig(error_deadband=-1.0)
    cfg = tk.TrackerConfig()
    assert (cfg.drive.f_mod, cfg.drive.f_depth, cfg.drive.P_MW) == (1e3, 40e3, 58e-6)


def test_constant_field_stays_put():
    log = tk.track(tk.constant_scenario(0.2))
    assert np.all(log.f_c == log.f_c[0])
    assert np.all(log.delta_B == 0.0)
    assert not log.lock_lost.any()


def test_step_settles_one_quantum():
    log = tk.track(tk.step_scenario(8.92e-9))
    offsets = log.f_c - log.f_c[0]
    assert set(np.unique(offsets)) == {0.0, 250.0}
    assert offsets[-1] == 250.0
    assert np.count_nonzero(np.diff(log.f_c)) == 1
    assert field_from_shift(250.0) == pytest.approx(8.92e-9, abs=0.01e-9)


def test_negative_step_moves_down():
    log = tk.track(tk.step_scenario(-2 * 8.92e-9))
    assert log.f_c[-1] - log.f_c[0] == -500.0


def test_slow_ramp_tracked_within_one_quantum():
    ramp = tk.Scenario.from_segments([("ramp", 10.0, 100e-9, 10.0)])
    log = tk.track(ramp)
    assert np.max(np.abs(log.delta_B - log.true_delta_B)) <= QUANTUM_FIELD


def test_log_invariants():
    log = tk.track(tk.step_scenario(30e-9, duration=0.3), noise=NoiseConfig(seed=4, shot_noise_on=True))
    steps = (log.f_c - log.f_c[0]) / 250.0
    assert np.array_equal(steps, np.round(steps))
    assert np.array_equal(log.delta_B, field_from_shift(log.f_c - log.f_c[0]))
    assert np.all(np.diff(log.timestamps) > 0)


def test_deterministic():
    noise = NoiseConfig(seed=9, shot_noise_on=True, laser_rin=1e-6)
    a = tk.track(tk.step_scenario(20e-9), noise=noise)
    b = tk.track(tk.step_scenario(20e-9), noise=noise)
    assert np.array_equal(a.f_c, b.f_c) and np.array_equal(a.S_demod, b.S_demod)


def test_lock_loss_flagged():
    # a jump of many linewidths cannot be followed one quantum per millisecond
    jump = tk.step_scenario(50e-6, t_step=0.02, duration=0.05)
    log = tk.track(jump)
    assert log.lock_lost[-1]
    assert not log.lock_lost[0]


def test_static_lock_after_settling_with_offset_start():
    cfg = tk.TrackerConfig(initial_f_c=None)
    line = tk.track(tk.constant_scenario(0.01), cfg).meta["line_center"]
    start = line + 2000.0
    log = tk.track(tk.constant_scenario(0.1), tk.TrackerConfig(initial_f_c=start))
    settled = log.f_c[20:]
    assert np.all(np.abs(settled - line) <= 250.0)


def test_elevator_scenario_shape():
    sc = tk.elevator_scenario()
    assert sc(np.array([0.0]))[0] == 0.0
    starts = [p.start for p in sc.phases]
    assert starts == sorted(starts)
    assert [p.label for p in sc.phases] == ["ground", "up-move", "doors-open", "wait", "doors-close",
                                            "down-move", "doors-open"]
    assert 10e-9 <= np.max(np.abs(sc(np.linspace(0, sc.duration, 1000)))) <= 100e-9
    assert list(sc.label_at(np.array([0.5, 5.0]))) == ["ground", "up-move"]


def test_scenario_validation():
    with pytest.raises(InvalidInputError):
        tk.Scenario([])
    with pytest.raises(InvalidInputError):
        tk.Scenario.from_segments([("a", 1.0, 0.0, 2.0)])
    with pytest.raises(InvalidInputError):
        tk.Scenario.from_samples([0.0, 0.0], [0.0, 1.0])
    s = tk.Scenario.from_samples([0.0, 1.0, 2.0], [0.0, 2e-9, 0.0])
    assert s(np.array([0.5, 1.5]))[0] == pytest.approx(1e-9)
    assert s(np.array([0.5, 1.5]))[1] == pytest.approx(1e-9)


def test_phase_transition_errors_on_step():
    sc = tk.step_scenario(2 * 8.92e-9, duration=0.2)
    log = tk.track(sc)
    errs = tk.phase_transition_errors(log, sc)
    assert [e[0] for e in errs] == ["before", "after"]
    assert all(e[3] <= 2 for e in errs)
