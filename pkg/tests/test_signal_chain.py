import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvlab import analysis as an
from nvlab import nv_core as nv
from nvlab import signal_chain as sc
from nvlab.errors import InvalidInputError
from nvlab.experiments import group_zero_crossings

P = nv.EnsembleParams()
E_CHARGE = P.constants.e_charge
FLAT = sc.DetectionConfig(apply_response=False, nv_lowpass_rate=None)


def single_line(center=2.9e9, width=80e3, contrast=4e-3):
    return [nv.ResonanceLine(center, width, contrast, 0, 0, 1)]


def single_tone(**kw):
    return sc.MwDriveConfig(hfs_on=False, **kw)


# -- drive -------------------------------------------------------------------

def test_instantaneous_frequency():
    cfg = sc.MwDriveConfig(f_LO=2.87e9, f_BB=10e6, f_mod=1e3, f_depth=40e3)
    assert cfg.f_c == 2.88e9
    t = np.linspace(0, 2e-3, 101)
    assert np.all(sc.instantaneous_frequency(replace(cfg, f_depth=0.0), t) == cfg.f_c)
    assert sc.instantaneous_frequency(cfg, 1 / (4 * cfg.f_mod)) == pytest.approx(cfg.f_c + cfg.f_depth, rel=1e-15)
    one_period = np.arange(1000) / 1000 / cfg.f_mod
    assert np.mean(sc.instantaneous_frequency(cfg, one_period)) == pytest.approx(cfg.f_c, rel=1e-9)
    with pytest.raises(InvalidInputError):
        sc.instantaneous_frequency(cfg, -1.0)


def test_drive_invariants():
    with pytest.raises(InvalidInputError):
        sc.MwDriveConfig(f_depth=-1.0)
    with pytest.raises(InvalidInputError):
        sc.MwDriveConfig(f_mod=0.0)
    with pytest.raises(InvalidInputError):
        sc.MwDriveConfig(tone_weights=(0.5, 0.5, 0.5))
    sc.MwDriveConfig(hfs_on=False, tone_weights=(0.5, 0.5, 0.5))


def test_detection_invariants():
    with pytest.raises(InvalidInputError):
        sc.DetectionConfig(hp_cutoff=200e3)
    with pytest.raises(InvalidInputError):
        sc.DetectionConfig(G=0.0)


# -- log amplifier -----------------------------------------------------------

def test_log_amp_balanced_is_zero():
    assert sc.log_amp_output(1e-3, 0.0, 1e-3, sc.DetectionConfig()) == 0.0


def test_log_amp_exact_vs_small_signal():
    det = sc.DetectionConfig()
    exact = sc.log_amp_output(1e-3, 10e-6, 1e-3, det)
    approx = sc.log_amp_small_signal(1e-3, 10e-6, det)
    assert exact == pytest.approx(20.66 * 0.375 * math.log10(1.01), rel=1e-12)
    assert exact == pytest.approx(33.48e-3, abs=0.01e-3)
    assert approx == pytest.approx(33.65e-3, abs=0.01e-3)
    assert abs(exact - approx) / approx < 0.01


def test_log_amp_rejects_nonpositive_current():
    det = sc.DetectionConfig()
    with pytest.raises(InvalidInputError):
        sc.log_amp_output(1e-3, -2e-3, 1e-3, det)
    with pytest.raises(InvalidInputError):
        sc.log_amp_output(1e-3, 0.0, 0.0, det)


def test_plateau_reading_after_response_calibration():
    # 1 uA tone on 1 mA: the small-signal model gives 6.73 mV peak-to-peak,
    # the measured plateau is 5.25 mV; calibrate and read it back through the chain
    det = sc.DetectionConfig(I_sig_dc=1e-3, I_ref_dc=1e-3)
    f, fs = 10e3, 1e6
    assert 2 * sc.log_amp_small_signal(1e-3, 1e-6, det) == pytest.approx(6.73e-3, abs=0.01e-3)
    det = replace(det, response_scale=sc.response_calibration(5.25e-3, 1e-6, 1e-3, f, det))
    t = np.arange(1000) / fs
    v = sc.amplifier_response(sc.log_amp_output(1e-3, 1e-6 * np.sin(2 * math.pi * f * t), 1e-3, det), det, fs)
    phase = float(np.angle(sc.band_transfer(f, det)))
    assert sc.demodulate(v, f, 1e-3, fs, phase=phase) == pytest.approx(5.25e-3, rel=1e-3)


# -- frequency response --------------------------------------------------------

def test_chain_corners():
    det = sc.DetectionConfig(nv_lowpass_rate=None)
    f = np.logspace(np.log10(1e3), np.log10(50e3), 200)
    top = sc.chain_frequency_response(f, det).max()
    # midway in 1-50 kHz, on either a linear or a log axis
    for mid in (25.5e3, math.sqrt(50e6)):
        assert sc.chain_frequency_response(mid, det) / top > 0.97
    assert sc.chain_frequency_response(430.0, det) / top == pytest.approx(1 / math.sqrt(2), rel=5e-3)
    assert sc.chain_frequency_response(103e3, det) / top == pytest.approx(1 / math.sqrt(2), rel=5e-3)


def test_nv_lowpass_corner():
    det = sc.DetectionConfig(apply_response=False)
    corner = det.nv_lowpass_rate / (2 * math.pi)
    assert sc.chain_frequency_response(corner, det) == pytest.approx(1 / math.sqrt(2), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 1e6))
def test_chain_gain_in_unit_interval(f):
    g = sc.chain_frequency_response(f, sc.DetectionConfig())
    assert 0 < g <= 1


def test_chain_rejects_nonpositive_frequency():
    with pytest.raises(InvalidInputError):
        sc.chain_frequency_response(0.0, sc.DetectionConfig())


# -- synthesis -------------------------------------------------------------------

def test_constant_output_off_resonance():
    det = sc.DetectionConfig(I_sig_dc=50e-6, I_ref_dc=40e-6)
    tr = sc.synthesize_timetrace(single_tone(f_LO=2.0e9, f_depth=0.0), single_line(), nv.MagneticEnvironment(),
                                 det, sc.NoiseConfig(), 10e-3)
    # the nearest line tail sits 900 MHz away, ~1e-11 relative
    assert np.allclose(tr.v, det.G * det.K * math.log10(50 / 40), rtol=1e-9, atol=0)
    assert tr.v.size == 1000 and tr.sample_rate == 100e3


def test_sine_modulation_fundamental_matches_small_signal():
    # a shallow line probed on its flank with small depth gives a pure sine in I_sig
    ln = single_line(contrast=1e-3)
    f_c = ln[0].center - 40e3
    drive = single_tone(f_LO=f_c, f_mod=1e3, f_depth=1e3)
    tr = sc.synthesize_timetrace(drive, ln, nv.MagneticEnvironment(), FLAT, sc.NoiseConfig(), 10e-3)
    dF = nv.lorentzian_derivative(f_c, ln[0], -ln[0].contrast) * drive.f_depth
    F0 = 1 - nv.lorentzian(f_c, ln[0], ln[0].contrast)
    expected_pp = 2 * abs(sc.log_amp_small_signal(FLAT.I_sig_dc * F0, FLAT.I_sig_dc * dF, FLAT))
    got = sc.demodulate(tr.v, drive.f_mod, 10e-3, tr.sample_rate)
    assert abs(got) == pytest.approx(expected_pp, rel=0.01)


def test_shot_noise_variance():
    det = FLAT
    noise = sc.NoiseConfig(seed=7, shot_noise_on=True)
    tr = sc.synthesize_timetrace(single_tone(f_LO=2.0e9, f_depth=0.0), single_line(), nv.MagneticEnvironment(),
                                 det, noise, 10.0)
    assert tr.v.size == 10**6
    # per-diode current variance e I fs, i.e. 2 e I B with B = fs / 2
    rel_var = E_CHARGE * tr.sample_rate * (1 / det.I_sig_dc + 1 / det.I_ref_dc)
    assert np.var(tr.v) == pytest.approx(det.log_gain**2 * rel_var, rel=0.05)


def test_ideal_cmrr_cancels_laser_noise():
    noisy = sc.NoiseConfig(seed=3, laser_rin=1e-4)
    drive = single_tone(f_LO=2.0e9, f_depth=0.0)
    ideal = replace(FLAT, cmrr_db=math.inf)
    tr = sc.synthesize_timetrace(drive, single_line(), nv.MagneticEnvironment(), ideal, noisy, 10e-3)
    quiet = sc.synthesize_timetrace(drive, single_line(), nv.MagneticEnvironment(), ideal, sc.NoiseConfig(), 10e-3)
    assert np.allclose(tr.v, quiet.v, rtol=0, atol=1e-15)
    leaky = sc.synthesize_timetrace(drive, single_line(), nv.MagneticEnvironment(), FLAT, noisy, 1.0)
    # residual is the leaked log of the common fluctuation
    expected = FLAT.log_gain * FLAT.cm_leak * noisy.laser_rin * math.sqrt(leaky.sample_rate / 2)
    assert np.std(leaky.v) == pytest.approx(expected, rel=0.02)


def test_cmrr_invariance_of_signal():
    # the common-mode path leaves the noiseless signal untouched for any CMRR
    ln = single_line()
    drive = single_tone(f_LO=ln[0].center - 30e3)
    a = sc.synthesize_timetrace(drive, ln, nv.MagneticEnvironment(), sc.DetectionConfig(cmrr_db=20), sc.NoiseConfig(), 5e-3)
    b = sc.synthesize_timetrace(drive, ln, nv.MagneticEnvironment(), sc.DetectionConfig(cmrr_db=80), sc.NoiseConfig(), 5e-3)
    assert np.array_equal(a.v, b.v)


def test_synthesis_preconditions():
    with pytest.raises(InvalidInputError):
        sc.synthesize_timetrace(single_tone(), single_line(), nv.MagneticEnvironment(), FLAT, sc.NoiseConfig(),
                                10e-3, sample_rate=20e3)
    with pytest.raises(InvalidInputError):
        sc.synthesize_timetrace(single_tone(), single_line(), nv.MagneticEnvironment(), FLAT, sc.NoiseConfig(), 0.5e-3)


def test_timetrace_deterministic():
    noise = sc.NoiseConfig(seed=11, shot_noise_on=True, laser_rin=1e-5)
    ln = single_line()
    drive = single_tone(f_LO=ln[0].center)
    a = sc.synthesize_timetrace(drive, ln, nv.MagneticEnvironment(), sc.DetectionConfig(), noise, 5e-3)
    b = sc.synthesize_timetrace(drive, ln, nv.MagneticEnvironment(), sc.DetectionConfig(), noise, 5e-3)
    c = sc.synthesize_timetrace(drive, ln, nv.MagneticEnvironment(), sc.DetectionConfig(), replace(noise, seed=12), 5e-3)
    assert np.array_equal(a.v, b.v)
    assert not np.array_equal(a.v, c.v)


# -- demodulation --------------------------------------------------------------

def test_demodulate_sine():
    fs, f = 100e3, 1e3
    t = np.arange(2000) / fs
    assert sc.demodulate(0.3 + 0.01 * np.sin(2 * math.pi * f * t), f, 20e-3, fs) == pytest.approx(0.02, rel=1e-12)
    assert sc.demodulate(-0.01 * np.sin(2 * math.pi * f * t), f, 20e-3, fs) == pytest.approx(-0.02, rel=1e-12)
    # quadrature content adds in magnitude only
    assert sc.demodulate(0.01 * np.cos(2 * math.pi * f * t), f, 20e-3, fs, phase=0.3) > 0


def test_demodulate_rejects_short_series():
    with pytest.raises(InvalidInputError):
        sc.demodulate(np.zeros(50), 1e3, 20e-3, 100e3)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100).filter(lambda a: abs(a) > 1e-6), st.floats(0, 2 * math.pi))
def test_demodulate_linear(a, phase):
    fs, f = 50e3, 1e3
    t = np.arange(1000) / fs
    x = np.sin(2 * math.pi * f * t + phase) + 0.2 * np.sin(4 * math.pi * f * t)
    base = sc.demodulate(x, f, 20e-3, fs)
    assert sc.demodulate(a * x, f, 20e-3, fs) == pytest.approx(a * base, rel=1e-9, abs=1e-12)


def _sweep(grid, drive, lines, det=FLAT, noise=None, t_int=10e-3):
    return sc.sweep_spectrum(grid, drive, lines, nv.MagneticEnvironment(), det, noise or sc.NoiseConfig(), t_int)


def test_demod_zero_at_line_center_and_odd():
    ln = single_line()
    x0 = ln[0].center
    for det in (FLAT, sc.DetectionConfig()):
        grid = x0 + np.arange(-100e3, 100e3 + 1, 5e3)
        tr = _sweep(grid, single_tone(), ln, det)
        mid = grid.size // 2
        assert abs(tr.values[mid]) < 1e-9 * np.max(np.abs(tr.values))
        assert np.allclose(tr.values, -tr.values[::-1], atol=1e-9 * np.max(np.abs(tr.values)))
        assert tr.values[mid - 5] > 0 > tr.values[mid + 5]


def test_small_depth_is_derivative():
    ln = single_line()
    width = ln[0].linewidth
    # the cubic term of the expansion is -1.5 (2 f_depth / width)^2 at the
    # centre: 1.5 % at width/20, 0.4 % at width/40
    drive = single_tone(f_depth=width / 40)
    grid = ln[0].center + np.arange(-60e3, 45e3, 5e3)
    tr = _sweep(grid, drive, ln)
    F = 1 - nv.lorentzian(grid, ln[0], ln[0].contrast)
    dF = -nv.lorentzian_derivative(grid, ln[0], ln[0].contrast)
    dVdf = FLAT.log_gain * dF / F
    # positive on the low-frequency flank, so S = -2 f_depth dV/df
    sel = np.abs(dVdf) > 0.05 * np.max(np.abs(dVdf))
    assert np.allclose(tr.values[sel], -2 * drive.f_depth * dVdf[sel], rtol=0.01)


def test_width_over_twenty_derivative_sup_norm():
    ln = single_line()
    drive = single_tone(f_depth=ln[0].linewidth / 20)
    grid = ln[0].center + np.arange(-400e3, 400e3 + 1, 1e3)
    tr = _sweep(grid, drive, ln)
    F = 1 - nv.lorentzian(grid, ln[0], ln[0].contrast)
    oracle = 2 * drive.f_depth * FLAT.log_gain * nv.lorentzian_derivative(grid, ln[0], ln[0].contrast) / F
    assert np.max(np.abs(tr.values - oracle)) < 0.01 * np.max(np.abs(oracle))


@settings(max_examples=20, deadline=None)
@given(st.floats(1e3, 8e3), st.floats(1.5, 4.0))
def test_depth_scaling_in_linear_regime(depth, factor):
    ln = single_line()
    grid = ln[0].center + np.array([-30e3, 25e3])
    a = _sweep(grid, single_tone(f_depth=depth / factor), ln).values
    b = _sweep(grid, single_tone(f_depth=depth), ln).values
    assert np.allclose(b, factor * a, rtol=0.02)


def test_sweep_validation():
    with pytest.raises(InvalidInputError):
        _sweep(np.array([1.0, 0.0]), single_tone(), single_line())
    with pytest.raises(InvalidInputError):
        _sweep(np.array([0.0, 1.0, 3.0]), single_tone(), single_line())


def test_sweep_independent_of_threads_and_order():
    ln = single_line()
    grid = ln[0].center + np.arange(-50e3, 50e3 + 1, 10e3)
    noise = sc.NoiseConfig(seed=5, shot_noise_on=True)
    a = _sweep(grid, single_tone(), ln, sc.DetectionConfig(), noise).values
    b = sc.sweep_spectrum(grid, single_tone(), ln, nv.MagneticEnvironment(), sc.DetectionConfig(), noise, 10e-3,
                          threads=4).values
    assert np.array_equal(a, b)
    # the same point with a different grid start is drawn from the same stream
    c = _sweep(grid[:3], single_tone(), ln, sc.DetectionConfig(), noise).values
    assert np.array_equal(a[:3], c)


def test_traces_are_immutable():
    tr = _sweep(np.array([2.9e9, 2.9e9 + 1e3]), single_tone(), single_line())
    with pytest.raises(ValueError):
        tr.values[0] = 1.0
    with pytest.raises(InvalidInputError):
        sc.DemodTrace(np.array([1.0, 1.0]), np.zeros(2))
    with pytest.raises(InvalidInputError):
        sc.DemodTrace(np.array([1.0, 2.0]), np.array([0.0, np.nan]))


# -- zero crossings --------------------------------------------------------------

@pytest.fixture(scope="module")
def wide_depth_sweep():
    drive = sc.MwDriveConfig(f_mod=5e3, f_depth=100e3, P_MW=0.91e-3)
    lines = nv.apply_drive(nv.resonance_frequencies(nv.reference_environment(), P), P, drive.P_MW)
    grid = np.arange(2.836e9, 2.904e9 + 1, 4e3)
    tr = sc.sweep_spectrum(grid, drive, lines, nv.reference_environment(), sc.DetectionConfig(), sc.NoiseConfig(),
                           200e-3, params=P)
    return tr, lines, drive


def test_five_crossings_per_resolved_group(wide_depth_sweep):
    tr, lines, drive = wide_depth_sweep
    groups = group_zero_crossings(tr, lines, P.constants.f_HFS, drive.f_depth)
    resolved = {k: g for k, g in groups.items() if g["resolved"]}
    assert len(resolved) == 6
    assert all(g["crossings"] == 5 for g in resolved.values())


def test_zero_projection_orientation_overlaps(wide_depth_sweep):
    tr, lines, drive = wide_depth_sweep
    groups = group_zero_crossings(tr, lines, P.constants.f_HFS, drive.f_depth)
    assert not groups["o1+"]["resolved"] and not groups["o1-"]["resolved"]
    # outermost three-tone replicas of the two branches, plus a margin short of
    # the neighbouring orientation's replicas
    centers = [ln.center for ln in lines if ln.orientation_index == 1]
    lo = min(centers) - P.constants.f_HFS - 200e3
    hi = max(centers) + P.constants.f_HFS + 200e3
    sel = (tr.axis >= lo) & (tr.axis <= hi)
    # two interleaved five-crossing patterns
    assert an.count_zero_crossings(tr.values[sel]) == 10


# -- integration ---------------------------------------------------------------

def test_integrate_zero_trace():
    tr = sc.DemodTrace(np.arange(10.0), np.zeros(10), {"drive": sc.MwDriveConfig(), "f_step": 1.0})
    assert np.all(sc.integrate_demod(tr).values == 0)


def test_integrate_rejects_zero_depth_and_missing_meta():
    tr = sc.DemodTrace(np.arange(10.0), np.zeros(10), {"drive": sc.MwDriveConfig(f_depth=0.0), "f_step": 1.0})
    with pytest.raises(InvalidInputError):
        sc.integrate_demod(tr)
    with pytest.raises(InvalidInputError):
        sc.integrate_demod(sc.DemodTrace(np.arange(10.0), np.zeros(10)))


def test_integration_round_trip():
    ln = single_line()
    drive = single_tone(f_depth=ln[0].linewidth / 20)
    step = 1e3
    grid = ln[0].center + np.arange(-600e3, 600e3 + 1, step)
    spec = sc.integrate_demod(_sweep(grid, drive, ln))
    # S_demod = -2 f_depth dV/df, so the integral is the negative output profile
    V = FLAT.log_gain * np.log(1 - nv.lorentzian(grid, ln[0], ln[0].contrast))
    expected = -(V - V[0])
    err = np.max(np.abs(spec.values - expected))
    assert err < 0.02 * np.max(np.abs(expected))


def test_integrated_fit_with_matched_line_parameters(matched_optimum):
    fit = matched_optimum["fit"]
    assert fit.linewidth == pytest.approx(81.8e3, abs=2.4e3)
    assert fit.contrast_C == pytest.approx(0.0043, abs=0.0001)
    assert fit.center_x0 == pytest.approx(matched_optimum["center"], abs=500)
