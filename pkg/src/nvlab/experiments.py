"""Experiment runners behind the command-line subcommands.

Each runner takes a :class:`~nvlab.config.RunConfig` and returns a
:class:`Result` holding the tables to write, headline metrics and a short
text summary.  Nothing here touches the file system except reading an
input trace for the Allan analysis.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np

from . import analysis as an
from .errors import ConfigError, InvalidInputError
from .hardware import TestFieldWaveform
from .io import read_csv
from .nv_core import apply_drive, resonance_frequencies
from .signal_chain import (
    DemodTrace,
    Spectrum,
    calibrate_rin,
    demod_timetrace,
    integrate_demod,
    sweep_spectrum,
)
from .tracker import (
    Scenario,
    TrackerConfig,
    constant_scenario,
    elevator_scenario,
    phase_transition_errors,
    step_scenario,
    target_line,
    track,
)


@dataclass
class Result:
    tables: list = field(default_factory=list)  # (filename, schema, columns)
    metrics: dict = field(default_factory=dict)
    summary: str = ""


# -- shared helpers --------------------------------------------------------

def driven_lines(cfg, p_mw, env=None):
    params = cfg.params()
    env = env or cfg.environment()
    return apply_drive(resonance_frequencies(replace(env, test_field=None), params), params, p_mw)


def _target(cfg, lines, section):
    t = cfg.sections[section]["target"]
    if len(t) != 3:
        raise ConfigError("target must be [orientation, branch, hyperfine]", field=f"{section}.target")
    try:
        return target_line(lines, tuple(int(v) for v in t))
    except InvalidInputError as exc:
        raise ConfigError(str(exc), field=f"{section}.target") from None


def model_slope(cfg, drive, lines, center, t_int, span=60e3, step=1e3):
    """Noiseless slope fit around ``center``; the reference for calibration."""
    quiet = replace(cfg.noise(), shot_noise_on=False, laser_rin=0.0, drift_random_walk=0.0, mains_amplitude=0.0)
    grid = center + np.arange(-span / 2, span / 2 + step / 2, step)
    tr = sweep_spectrum(grid, drive, lines, cfg.environment(), cfg.detection(), quiet, t_int,
                        params=cfg.params(), b1_factor=cfg.b1(), threads=1)
    return an.fit_slope(tr)


def calibrated_noise(cfg, drive, lines, center, t_int):
    """Noise settings, with laser noise set to meet a requested target.

    ``noise.target_eta`` (T/sqrt(Hz)) fixes the slope-method sensitivity and
    ``noise.target_sigma_field`` (T) the per-window field scatter; both are
    converted to an S_demod scatter through the noiseless slope.
    """
    noise = cfg.noise()
    ns = cfg.sections["noise"]
    if not (ns["target_eta"] or ns["target_sigma_field"]):
        return noise, None
    gamma = cfg.constants().gamma_NV
    ref = model_slope(cfg, drive, lines, center, t_int)
    if ns["target_eta"]:
        sigma_v = ns["target_eta"] * gamma * abs(ref.slope_m) / math.sqrt(t_int)
        model = ref.residuum_sigma
    else:
        sigma_v = ns["target_sigma_field"] * gamma * abs(ref.slope_m)
        model = 0.0
    rin = calibrate_rin(sigma_v, cfg.detection(), noise, drive.f_mod, t_int, cfg.params(), model_sigma=model)
    return replace(noise, laser_rin=rin), {"laser_rin": rin, "target_sigma_V": sigma_v, "model_slope": ref.slope_m}


def _slice(trace, lo, hi, cls):
    sel = (trace.axis >= lo) & (trace.axis <= hi)
    return cls(trace.axis[sel], trace.values[sel], dict(trace.meta))


def group_zero_crossings(trace, lines, f_HFS, f_depth):
    """Descending crossings inside each (orientation, branch) group window.

    With three-tone driving a group shows apparent dips at up to
    ``2 f_HFS`` from its centre, so the window reaches that far plus one
    linewidth (or the modulation depth).  A group is resolved when its
    window overlaps no other group's window.
    """
    windows = {}
    for o in range(4):
        for b in (-1, 1):
            grp = [ln for ln in lines if ln.orientation_index == o and ln.branch == b]
            c = float(np.mean([ln.center for ln in grp]))
            half = 2 * f_HFS + max(f_depth, max(ln.linewidth for ln in grp))
            windows[f"o{o}{'+' if b > 0 else '-'}"] = (c - half, c + half)
    out = {}
    for key, (lo, hi) in windows.items():
        sel = (trace.axis >= lo) & (trace.axis <= hi)
        n = an.count_zero_crossings(trace.values[sel]) if np.count_nonzero(sel) > 2 else 0
        resolved = all(hi < lo2 or lo > hi2 for k2, (lo2, hi2) in windows.items() if k2 != key)
        out[key] = {"crossings": n, "resolved": resolved}
    return out


# -- odmr sweep --------------------------------------------------------------

def run_odmr_sweep(cfg):
    sw = cfg.sections["sweep"]
    drive = cfg.drive()
    lines = driven_lines(cfg, drive.P_MW)
    line = _target(cfg, lines, "sweep")
    if not sw["f_step"] > 0 or not sw["f_stop"] > sw["f_start"]:
        raise ConfigError("need f_start < f_stop and f_step > 0", field="sweep")
    noise, cal = calibrated_noise(cfg, drive, lines, line.center, sw["t_int"])
    grid = sw["f_start"] + sw["f_step"] * np.arange(int(math.floor((sw["f_stop"] - sw["f_start"]) / sw["f_step"] + 1e-9)) + 1)
    trace = sweep_spectrum(grid, drive, lines, cfg.environment(), cfg.detection(), noise, sw["t_int"],
                           params=cfg.params(), b1_factor=cfg.b1())
    spec = integrate_demod(trace)
    m = {"n_points": int(grid.size), "zero_crossings_total": an.count_zero_crossings(trace.values),
         "zero_crossings_by_group": group_zero_crossings(trace, lines, cfg.constants().f_HFS, drive.f_depth),
         "target_center": line.center, "model_linewidth": line.linewidth}
    if cal:
        m["noise_calibration"] = cal
    lf = an.fit_lorentzian(_slice(spec, line.center - sw["fit_span"] / 2, line.center + sw["fit_span"] / 2, Spectrum))
    m.update(linewidth=lf.linewidth, contrast=lf.contrast_C, center=lf.center_x0, amplitude=lf.amplitude_A)
    sub = _slice(trace, line.center - sw["slope_span"] / 2, line.center + sw["slope_span"] / 2, DemodTrace)
    sf = an.fit_slope(sub)
    eta = an.sensitivity(sf.residuum_sigma, sf.slope_m, trace.meta["t_int"], cfg.constants().gamma_NV)
    m.update(slope_m=sf.slope_m, sigma=sf.residuum_sigma, zero_crossing=sf.zero_crossing, eta_B=eta.eta_B)
    tables = [
        ("odmr_demod.csv", "demod_trace", [("f_c", "Hz", trace.axis), ("S_demod", "V", trace.values)]),
        ("odmr_integ.csv", "spectrum", [("f_c", "Hz", spec.axis), ("S_integ", "V", spec.values)]),
    ]
    summary = (f"ODMR sweep of {grid.size} points; fitted linewidth {lf.linewidth / 1e3:.2f} kHz, "
               f"contrast {100 * lf.contrast_C:.3f} %, slope {sf.slope_m:.4g} V/Hz, "
               f"sensitivity {eta.eta_B * 1e12:.1f} pT/sqrt(Hz)")
    return Result(tables, m, summary)


# -- parameter sweep -------------------------------------------------------

_UNITS = {"f_depth": "Hz", "P_MW": "W", "t_int": "s", "f_mod": "Hz"}


def run_param_sweep(cfg):
    ps = cfg.sections["param_sweep"]
    name = ps["parameter"]
    base = cfg.drive()
    gamma = cfg.constants().gamma_NV
    rows = {k: [] for k in ("value", "slope_m", "sigma", "linewidth", "contrast", "eta_B")}
    base_lines = driven_lines(cfg, base.P_MW)
    base_line = _target(cfg, base_lines, "param_sweep")
    noise, cal = calibrated_noise(cfg, base, base_lines, base_line.center, ps["t_int"])
    for j, v in enumerate(ps["values"]):
        v = float(v)
        t_int = v if name == "t_int" else ps["t_int"]
        drive = base if name == "t_int" else replace(base, **{name: v})
        lines = driven_lines(cfg, drive.P_MW)
        line = _target(cfg, lines, "param_sweep")
        common = dict(params=cfg.params(), b1_factor=cfg.b1())
        g1 = line.center + np.arange(-ps["slope_span"] / 2, ps["slope_span"] / 2 + ps["slope_step"] / 2, ps["slope_step"])
        tr = sweep_spectrum(g1, drive, lines, cfg.environment(), cfg.detection(), noise, t_int, stream_id=2 * j, **common)
        sf = an.fit_slope(tr)
        g2 = line.center + np.arange(-ps["line_span"] / 2, ps["line_span"] / 2 + ps["line_step"] / 2, ps["line_step"])
        sp = integrate_demod(sweep_spectrum(g2, drive, lines, cfg.environment(), cfg.detection(), noise, t_int,
                                            stream_id=2 * j + 1, **common))
        lf = an.fit_lorentzian(sp)
        eta = an.sensitivity(sf.residuum_sigma, sf.slope_m, tr.meta["t_int"], gamma).eta_B
        for k, val in zip(rows, (v, sf.slope_m, sf.residuum_sigma, lf.linewidth, lf.contrast_C, eta)):
            rows[k].append(val)
    arr = {k: np.asarray(v) for k, v in rows.items()}
    mm = an.moving_mean(arr["eta_B"], 3) if arr["eta_B"].size else arr["eta_B"]
    best = int(np.argmin(arr["eta_B"]))
    steepest = int(np.argmax(np.abs(arr["slope_m"])))
    cols = [(name, _UNITS[name], arr["value"]), ("slope_m", "V/Hz", arr["slope_m"]), ("sigma", "V", arr["sigma"]),
            ("linewidth", "Hz", arr["linewidth"]), ("contrast", "1", arr["contrast"]),
            ("eta_B", "T/sqrt(Hz)", arr["eta_B"]), ("eta_B_mean3", "T/sqrt(Hz)", mm)]
    m = {"parameter": name, "best_value": arr["value"][best], "best_eta_B": arr["eta_B"][best],
         "max_slope_value": arr["value"][steepest], "max_slope": arr["slope_m"][steepest]}
    if cal:
        m["noise_calibration"] = cal
    summary = (f"Swept {name} over {arr['value'].size} values; best sensitivity "
               f"{arr['eta_B'][best] * 1e12:.1f} pT/sqrt(Hz) at {name} = {arr['value'][best]:.4g} {_UNITS[name]}")
    return Result([("param_sweep.csv", "param_sweep", cols)], m, summary)


# -- test-field trace ------------------------------------------------------

def level_labels(waveform, t0, t_int):
    """Level index per window, -1 for windows that straddle an edge."""
    start = waveform.level_index(t0)
    end = waveform.level_index(t0 + t_int * (1 - 1e-9))
    # a window can also contain a full half period when t_int is long
    straddle = (start != end) | (t_int * waveform.frequency >= 0.5)
    return np.where(straddle, -1, start)


def run_testfield_trace(cfg):
    tf = cfg.sections["testfield"]
    params = cfg.params()
    wave = TestFieldWaveform(tf["frequency"], tf["amplitude"], tf["axis_index"])
    axis = tuple(params.axes[wave.axis_index])
    lines = driven_lines(cfg, cfg.drive().P_MW)
    line = _target(cfg, lines, "testfield")
    noise, cal = calibrated_noise(cfg, cfg.drive(), lines, line.center, tf["t_int"])
    # park on the observed zero crossing, which neighbouring lines pull off the bare centre
    ref = model_slope(cfg, cfg.drive(), lines, line.center, tf["t_int"])
    drive = cfg.drive().tuned(ref.zero_crossing)
    env = cfg.environment(test_field=wave, test_axis=axis)
    trace = demod_timetrace(int(tf["n_windows"]), drive, lines, env, cfg.detection(), noise, tf["t_int"],
                            params=params, b1_factor=cfg.b1())
    t_int = trace.meta["t_int"]
    slope = ref.slope_m
    gamma = cfg.constants().gamma_NV
    field_t = an.shift_from_reading(trace.values, ref, gamma)
    labels = level_labels(wave, trace.axis, t_int)
    rep = an.histogram_sensitivity(trace.values, t_int, slope, gamma, labels=labels)
    hi = field_t[labels == 0]
    lo = field_t[labels == 1]
    sep = float(hi.mean() - lo.mean()) if hi.size and lo.size else 0.0
    m = {"slope_m": slope, "sigma_field": rep.inputs["sigma_field"], "eta_B": rep.eta_B,
         "level_separation": sep, "n_used": rep.diagnostics["n"], "bimodality": rep.diagnostics["bimodality"]}
    if cal:
        m["noise_calibration"] = cal
    cols = [("t", "s", trace.axis), ("S_demod", "V", trace.values), ("B", "T", field_t), ("level", "1", labels)]
    summary = (f"Test-field trace of {trace.axis.size} windows; level separation {sep * 1e9:.2f} nT, "
               f"sigma {rep.inputs['sigma_field'] * 1e9:.3f} nT, sensitivity {rep.eta_B * 1e12:.1f} pT/sqrt(Hz)")
    return Result([("testfield_trace.csv", "timetrace", cols)], m, summary)


# -- Allan deviation ---------------------------------------------------------

def loglog_slope(taus, sigma, lo, hi):
    sel = (taus >= lo * (1 - 1e-9)) & (taus <= hi * (1 + 1e-9)) & (sigma > 0)
    if np.count_nonzero(sel) < 2:
        return float("nan")
    return float(np.polyfit(np.log(taus[sel]), np.log(sigma[sel]), 1)[0])


def run_allan(cfg):
    al = cfg.sections["allan"]
    gamma = cfg.constants().gamma_NV
    tables = []
    if al["input"]:
        tab = read_csv(al["input"])
        names = [al["column"]] if al["column"] else ["B", "delta_B", "S_demod", "sigma_A"]
        y = None
        for n in names:
            if n in tab.columns:
                y, unit, col = tab.column(n), tab.units[n], n
                break
        if y is None:
            raise ConfigError(f"input has none of the columns {names}", field="allan.column")
        period = al["sample_period"]
        if not period:
            if "t" not in tab.columns:
                raise ConfigError("set allan.sample_period or provide a t column", field="allan.sample_period")
            t = tab.column("t")
            if t.size < 2:
                raise ConfigError("input trace needs at least two rows", field="allan.input")
            period = float(np.median(np.diff(t)))
        slope = al["slope_m"] or None
        if unit == "V" and slope is None:
            raise ConfigError("a voltage trace needs allan.slope_m", field="allan.slope_m")
        if unit != "V":
            slope = None
        units = "T" if slope is not None else (unit or "1")
        source = f"{al['input']}:{col}"
    else:
        lines = driven_lines(cfg, cfg.drive().P_MW)
        line = _target(cfg, lines, "allan")
        noise, _ = calibrated_noise(cfg, cfg.drive(), lines, line.center, al["t_int"])
        ref = model_slope(cfg, cfg.drive(), lines, line.center, al["t_int"])
        drive = cfg.drive().tuned(ref.zero_crossing)
        tr = demod_timetrace(int(al["n_windows"]), drive, lines, cfg.environment(), cfg.detection(), noise,
                             al["t_int"], params=cfg.params(), b1_factor=cfg.b1())
        period = tr.meta["t_int"]
        slope = al["slope_m"] or ref.slope_m
        y = tr.values
        tables.append(("allan_trace.csv", "timetrace", [("t", "s", tr.axis), ("S_demod", "V", tr.values),
                                                        ("B", "T", an.to_field(tr.values, slope, gamma))]))
        source = "simulated"
        units = "T"
    taus = an.log_spaced_taus(period, y.size, int(al["per_decade"]))
    plain = an.allan_deviation(y, period, taus, slope_m=slope, gamma=gamma)
    half = an.allan_deviation(y, period, taus, half_factor=True, slope_m=slope, gamma=gamma)
    plain, half = replace(plain, units=units), replace(half, units=units)
    tables.append(("allan.csv", "allan", [("tau", "s", plain.taus), ("sigma_A", plain.units, plain.sigma_A),
                                          ("sigma_A_half", half.units, half.sigma_A)]))
    i = int(np.argmin(plain.sigma_A)) if plain.sigma_A.size else 0
    m = {"source": source, "sample_period": period, "slope_m": slope, "units": plain.units,
         "tau_at_min": plain.taus[i] if plain.taus.size else None,
         "sigma_min": plain.sigma_A[i] if plain.sigma_A.size else None,
         "loglog_slope_1ms_100ms": loglog_slope(plain.taus, plain.sigma_A, 1e-3, 100e-3),
         "rejected_taus": plain.rejected}
    summary = (f"Allan deviation over {plain.taus.size} averaging times from {source}; minimum "
               f"{m['sigma_min']:.4g} {plain.units} at tau = {m['tau_at_min']:.4g} s")
    return Result(tables, m, summary)


# -- limits ------------------------------------------------------------------

def run_limits(cfg):
    lim = cfg.sections["limits"]
    missing = [k for k in ("linewidth", "contrast") if k not in lim]
    if "photon_rate" not in lim and not ("u_shunt" in lim and "r_shunt" in lim):
        missing.append("photon_rate (or u_shunt and r_shunt)")
    if missing:
        raise ConfigError("missing inputs: " + ", ".join(missing), field="limits")
    c = cfg.constants()
    m = {}
    if "u_shunt" in lim and "r_shunt" in lim:
        m["photon_rate_from_shunt"] = an.photon_rate(lim["u_shunt"], lim["r_shunt"], c.e_charge)
    rate = lim.get("photon_rate", m.get("photon_rate_from_shunt"))
    m["photon_rate"] = rate
    m["shot_noise_limit"] = an.shot_noise_limit(lim["linewidth"], lim["contrast"], rate, c)
    text = f"photon rate {rate:.4g} Hz; shot-noise limit {m['shot_noise_limit'] * 1e12:.2f} pT/sqrt(Hz)"
    if "measured_eta" in lim:
        m["ratio_measured_to_limit"] = lim["measured_eta"] / m["shot_noise_limit"]
        text += f"; measured sensitivity is {m['ratio_measured_to_limit']:.2f} times the limit"
    return Result([], m, text)


# -- tracking ----------------------------------------------------------------

def scenario_from_config(tk):
    name = tk["scenario"]
    if name == "elevator":
        return elevator_scenario()
    if name == "step":
        return step_scenario(tk["step_level"], duration=tk["duration"])
    if name == "constant":
        return constant_scenario(tk["duration"])
    tab = read_csv(name)
    return Scenario.from_samples(tab.column("t"), tab.column("delta_B", "B", "true_delta_B"), name="file")


def run_track(cfg):
    tk = cfg.sections["track"]
    scen = scenario_from_config(tk)
    tcfg = TrackerConfig(step_quantum=tk["step_quantum"], t_int_per_iter=tk["t_int_per_iter"],
                         error_deadband=tk.get("error_deadband"), drive=cfg.drive(),
                         target=tuple(int(v) for v in tk["target"]),
                         lock_loss_linewidths=tk["lock_loss_linewidths"])
    log = track(scen, tcfg, cfg.environment(), cfg.detection(), cfg.noise(), cfg.params(), cfg.b1())
    steps = np.rint((log.f_c - log.f_c[0]) / tcfg.step_quantum).astype(int)
    m = {"scenario": scen.name, "iterations": int(log.f_c.size), "net_steps": int(steps[-1]),
         "step_changes": int(np.count_nonzero(np.diff(steps))), "lock_lost_samples": int(np.count_nonzero(log.lock_lost)),
         "max_error_steps": float(np.max(np.abs(log.delta_B - log.true_delta_B)) /
                                  (tcfg.step_quantum / cfg.constants().gamma_NV)),
         "deadband": log.deadband, "slope_sign": log.slope_sign}
    m["transitions"] = [{"phase": p, "true_change": a, "inferred_change": b, "error_steps": e}
                        for p, a, b, e in phase_transition_errors(log, scen, tcfg.step_quantum, cfg.constants().gamma_NV)]
    cols = [("t", "s", log.timestamps), ("f_c", "Hz", log.f_c), ("delta_B", "T", log.delta_B),
            ("S_demod", "V", log.S_demod), ("true_delta_B", "T", log.true_delta_B),
            ("lock_lost", "1", log.lock_lost), ("phase", "label", log.phase)]
    summary = (f"Tracked {scen.name} scenario for {log.f_c.size} iterations; {m['step_changes']} frequency steps, "
               f"largest error {m['max_error_steps']:.2f} steps, lock lost in {m['lock_lost_samples']} samples")
    return Result([("track.csv", "tracklog", cols)], m, summary)


RUNNERS = {
    "odmr-sweep": run_odmr_sweep,
    "param-sweep": run_param_sweep,
    "testfield-trace": run_testfield_trace,
    "allan": run_allan,
    "limits": run_limits,
    "track": run_track,
}
