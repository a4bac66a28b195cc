"""Time-domain simulation of the detection path.

A frequency-modulated microwave drive sweeps the instantaneous frequency
across the ODMR lines, the resulting fluorescence modulation reaches a
logarithmic balanced amplifier, and a digital lock-in recovers the signal
at the modulation frequency.  Records always span an integer number of
modulation periods, so filters are applied in the periodic steady state by
multiplying the record's spectrum with the complex transfer function.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import math
import os

import numpy as np

from . import rng as rngmod
from .errors import InvalidInputError
from .nv_core import EnsembleParams, LineSet, contrast_budget, cw_spectrum, tone_plan

LN10 = math.log(10.0)
_CHUNK_SAMPLES = 1 << 21


@dataclass(frozen=True)
class MwDriveConfig:
    f_LO: float = 2.87e9
    f_BB: float = 0.0
    f_mod: float = 1e3
    f_depth: float = 40e3
    P_MW: float = 58e-6
    hfs_on: bool = True
    tone_weights: tuple = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        if self.f_depth < 0:
            raise InvalidInputError("f_depth must be non-negative")
        if not self.f_mod > 0:
            raise InvalidInputError("f_mod must be positive")
        if self.P_MW < 0:
            raise InvalidInputError("P_MW must be non-negative")
        w = np.asarray(self.tone_weights, dtype=float)
        if w.shape != (3,) or np.any(w < 0):
            raise InvalidInputError("tone_weights must be three non-negative numbers")
        if self.hfs_on and not math.isclose(w.sum(), 1.0, rel_tol=1e-9):
            raise InvalidInputError("tone_weights must sum to 1 when hfs_on")

    @property
    def f_c(self):
        return self.f_LO + self.f_BB

    def tuned(self, f_c):
        """Copy with the baseband retuned so the mean frequency is ``f_c``."""
        return replace(self, f_BB=f_c - self.f_LO)


@dataclass(frozen=True)
class DetectionConfig:
    """Photodetection and amplifier settings.

    ``apply_response=False`` bypasses the amplifier band response (high- and
    low-pass); ``nv_lowpass_rate=None`` removes the slow-pumping low-pass on
    the fluorescence.  ``response_scale`` multiplies the AC output and is the
    hook for calibrating against a measured plateau.
    """

    G: float = 20.66
    K: float = 0.375
    I_sig_dc: float = 40e-6
    I_ref_dc: float = 40e-6
    R_670: float = 0.54
    R_522: float = 0.40
    hp_cutoff: float = 430.0
    lp_cutoff: float = 103e3
    cmrr_db: float = 40.0
    nv_lowpass_rate: float = 31.78e3
    apply_response: bool = True
    response_scale: float = 1.0

    def __post_init__(self):
        for name in ("G", "K", "I_sig_dc", "I_ref_dc", "hp_cutoff", "lp_cutoff", "response_scale"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if not self.hp_cutoff < self.lp_cutoff:
            raise InvalidInputError("hp_cutoff must be below lp_cutoff")
        if self.cmrr_db < 0:
            raise InvalidInputError("cmrr_db must be non-negative")
        if self.nv_lowpass_rate is not None and not self.nv_lowpass_rate > 0:
            raise InvalidInputError("nv_lowpass_rate must be positive or None")

    @property
    def log_gain(self):
        """Small-signal volts per unit relative current change, G*K/ln 10."""
        return self.G * self.K / LN10

    @property
    def cm_leak(self):
        return 10.0 ** (-self.cmrr_db / 20.0)


@dataclass(frozen=True)
class NoiseConfig:
    seed: int = 0
    shot_noise_on: bool = False
    laser_rin: float = 0.0
    drift_random_walk: float = 0.0
    mains_amplitude: float = 0.0
    mains_frequency: float = 50.0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInputError("seed must be an unsigned 64-bit integer")
        for name in ("laser_rin", "drift_random_walk", "mains_amplitude"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        if not self.mains_frequency > 0:
            raise InvalidInputError("mains_frequency must be positive")

    @property
    def is_quiet(self):
        return not self.shot_noise_on and self.laser_rin == 0


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DemodTrace:
    """S_demod samples against swept f_c (Hz) or time (s)."""

    axis: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "axis", _frozen(self.axis))
        object.__setattr__(self, "values", _frozen(self.values))
        if self.axis.shape != self.values.shape or self.axis.ndim != 1:
            raise InvalidInputError("axis and values must be 1-D arrays of equal length")
        if self.axis.size > 1 and not np.all(np.diff(self.axis) > 0):
            raise InvalidInputError("axis must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("values must be finite")


@dataclass(frozen=True)
class Spectrum:
    """Integrated demodulated signal S_integ (V) against f_c (Hz)."""

    axis: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "axis", _frozen(self.axis))
        object.__setattr__(self, "values", _frozen(self.values))


@dataclass(frozen=True)
class Timetrace:
    t: np.ndarray
    v: np.ndarray
    sample_rate: float


def instantaneous_frequency(cfg, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise InvalidInputError("time must be non-negative")
    return cfg.f_c + cfg.f_depth * np.sin(2 * math.pi * cfg.f_mod * t)


def log_amp_output(I_sig, dI_sig, I_ref, det):
    """V_out = G K log10((I_sig + dI_sig) / I_ref)."""
    num = np.asarray(I_sig, dtype=float) + np.asarray(dI_sig, dtype=float)
    I_ref = np.asarray(I_ref, dtype=float)
    if np.any(num <= 0) or np.any(I_ref <= 0):
        raise InvalidInputError("photocurrents must be positive")
    return det.G * det.K * np.log10(num / I_ref)


def log_amp_small_signal(I_sig, dI_sig, det):
    """First-order change of V_out for a current step dI_sig on I_sig."""
    if np.any(np.asarray(I_sig) <= 0):
        raise InvalidInputError("photocurrents must be positive")
    return det.log_gain * np.asarray(dI_sig, dtype=float) / np.asarray(I_sig, dtype=float)


def band_transfer(f, det):
    """Complex amplifier response: first-order high-pass times low-pass."""
    f = np.asarray(f, dtype=float)
    if not det.apply_response:
        return np.ones_like(f, dtype=complex)
    hp = (1j * f / det.hp_cutoff) / (1 + 1j * f / det.hp_cutoff)
    lp = 1 / (1 + 1j * f / det.lp_cutoff)
    return hp * lp


def nv_transfer(f, det):
    """Slow optical repumping seen as a first-order low-pass at Gamma_P / 2pi."""
    f = np.asarray(f, dtype=float)
    if det.nv_lowpass_rate is None:
        return np.ones_like(f, dtype=complex)
    return 1 / (1 + 1j * f / (det.nv_lowpass_rate / (2 * math.pi)))


def chain_transfer(f, det):
    return band_transfer(f, det) * nv_transfer(f, det)


def chain_frequency_response(f, det):
    """|gain| of the full chain at modulation frequency ``f``."""
    if np.any(np.asarray(f) <= 0):
        raise InvalidInputError("frequency must be positive")
    g = np.abs(chain_transfer(f, det))
    return float(g) if np.ndim(g) == 0 else g


def lockin_phase(det, f_mod):
    """Reference phase that makes S_demod positive below a fluorescence dip.

    The lock-in is auto-phased against the chain delay at ``f_mod``; the
    extra pi flips the sign so the low-frequency flank reads positive.
    """
    return math.pi + float(np.angle(chain_transfer(f_mod, det) * det.response_scale))


def _snap(f_mod, t_int, sample_rate):
    if sample_rate is None:
        sample_rate = 100.0 * f_mod
    per_period = int(round(sample_rate / f_mod))
    if per_period < 50:
        raise InvalidInputError("sample_rate must be at least 50 * f_mod")
    n_periods = int(math.floor(t_int * f_mod + 1e-9))
    if n_periods < 1:
        raise InvalidInputError("t_int must span at least one modulation period")
    return per_period * f_mod, per_period, n_periods


def _apply_transfer(x, H):
    """Filter the AC part of each row of ``x`` in the periodic steady state."""
    mean = x.mean(axis=-1, keepdims=True)
    spec = np.fft.rfft(x - mean, axis=-1)
    return mean + np.fft.irfft(spec * H, n=x.shape[-1], axis=-1)


def amplifier_response(v, det, sample_rate):
    """Band response and ``response_scale`` applied to the AC part of ``v``.

    ``v`` holds whole modulation periods along its last axis; the mean is
    passed unchanged.
    """
    v = np.asarray(v, dtype=float)
    if det.apply_response:
        freqs = np.fft.rfftfreq(v.shape[-1], 1.0 / sample_rate)
        v = _apply_transfer(v, band_transfer(freqs, det))
    if det.response_scale != 1.0:
        mean = v.mean(axis=-1, keepdims=True)
        v = mean + det.response_scale * (v - mean)
    return v


def response_calibration(measured_pp, dI, I_dc, f, det):
    """``response_scale`` that makes a tone of amplitude ``dI`` on ``I_dc``
    at frequency ``f`` read ``measured_pp`` volts peak-to-peak."""
    predicted = 2 * log_amp_small_signal(I_dc, dI, det) * abs(complex(band_transfer(f, det)))
    if not predicted > 0:
        raise InvalidInputError("predicted amplitude must be positive")
    return measured_pp / predicted


class _Engine:
    """Window-level simulator shared by every public entry point."""

    def __init__(self, drive, lines, env, det, noise, t_int, sample_rate=None, params=None, b1_factor=1.0):
        self.drive = drive
        self.det = det
        self.noise = noise
        self.env = env
        self.params = params if params is not None else EnsembleParams()
        self.b1 = b1_factor
        self.lines = lines if isinstance(lines, LineSet) else LineSet(lines)
        if contrast_budget(self.lines, drive, b1_factor, self.params.constants.f_HFS) >= 1.0:
            raise InvalidInputError("summed contrast exceeds the realizable fluorescence budget")
        tone_plan(drive, self.params.constants.f_HFS)
        self.fs, self.n_per, self.n_periods = _snap(drive.f_mod, t_int, sample_rate)
        self.n = self.n_per * self.n_periods
        self.t_int = self.n_periods / drive.f_mod
        self.gamma = self.params.constants.gamma_NV
        axes = self.params.axes
        self.proj0 = axes @ env.b0
        self.axis_gain = axes @ env.axis
        self.static_env = env.test_field is None and noise.mains_amplitude == 0
        self.phase = lockin_phase(det, drive.f_mod)
        self._drift = {}

    # -- field ------------------------------------------------------------
    def drift(self, indices, role, stream_id):
        if self.noise.drift_random_walk == 0:
            return np.zeros(len(indices))
        top = int(np.max(indices)) + 1
        path = self._drift.get((role, stream_id))
        if path is None or len(path) < top:
            g = rngmod.stream(self.noise.seed, rngmod.DRIFT_PATH, (role << 20) | stream_id)
            steps = g.standard_normal(top) * self.noise.drift_random_walk * math.sqrt(self.t_int)
            path = self._drift[(role, stream_id)] = np.cumsum(steps)
        return path[np.asarray(indices)]

    def field_offset(self, t, drift):
        """Scalar field along the environment axis, shape of ``t``."""
        b = self.env.extra_field(t) + drift[:, None]
        if self.noise.mains_amplitude:
            b = b + self.noise.mains_amplitude * np.sin(2 * math.pi * self.noise.mains_frequency * t)
        return b

    def _shifts(self, db):
        if db is None:
            return None
        ls = self.lines
        proj0, gain, gamma = self.proj0, self.axis_gain, self.gamma

        def shift(j):
            o = ls.orientation[j]
            return ls.branch[j] * gamma * (np.abs(proj0[o] + db * gain[o]) - abs(proj0[o]))

        return shift

    # -- signal -----------------------------------------------------------
    def fluorescence(self, f_c, t, db):
        f = f_c[:, None] + self.drive.f_depth * np.sin(2 * math.pi * self.drive.f_mod * t)
        F = cw_spectrum(f, self.lines, self.drive, self.b1, self.params.constants.f_HFS, self._shifts(db))
        if self.det.nv_lowpass_rate is not None:
            freqs = np.fft.rfftfreq(F.shape[-1], 1.0 / self.fs)
            F = _apply_transfer(F, nv_transfer(freqs, self.det))
        return F

    def detect(self, F, gens):
        """Photocurrents, noise and the log amplifier for rows of ``F``."""
        det, noise = self.det, self.noise
        I_sig = det.I_sig_dc * F
        I_ref = np.full_like(F, det.I_ref_dc)
        common = None
        if not noise.is_quiet:
            I_sig = I_sig.copy()
            common = np.zeros_like(F)
            for row, g in enumerate(gens):
                if noise.laser_rin:
                    common[row] = g.standard_normal(F.shape[1]) * noise.laser_rin * math.sqrt(self.fs / 2)
                I_sig[row] *= 1 + common[row]
                I_ref[row] *= 1 + common[row]
                if noise.shot_noise_on:
                    e = self.params.constants.e_charge
                    I_sig[row] += g.standard_normal(F.shape[1]) * np.sqrt(e * np.abs(I_sig[row]) * self.fs)
                    I_ref[row] += g.standard_normal(F.shape[1]) * np.sqrt(e * np.abs(I_ref[row]) * self.fs)
        v = log_amp_output(I_sig, 0.0, I_ref, det)
        if common is not None and noise.laser_rin:
            v = v + det.G * det.K * det.cm_leak * np.log10(1 + common)
        return amplifier_response(v, det, self.fs)

    def voltages(self, f_c, t0, indices, role, stream_id=0, full=False):
        """Output voltage rows for windows starting at ``t0``.

        Returns (t, v).  When the record is noiseless and the field static
        within each window only one modulation period is simulated, unless
        ``full`` is set.
        """
        f_c = np.asarray(f_c, dtype=float)
        t0 = np.asarray(t0, dtype=float)
        k = np.arange(self.n) / self.fs
        t = t0[:, None] + k[None, :]
        drift = self.drift(indices, role, stream_id)
        db = None
        periodic = self.static_env
        if not self.static_env or self.noise.drift_random_walk:
            db = self.field_offset(t, drift)
            if np.all(np.ptp(db, axis=1) == 0):
                db = db[:, :1]
            else:
                periodic = False
        if periodic:
            tp = t[:, : self.n_per]
            F = self.fluorescence(f_c, tp, db)
            F = np.tile(F, (1, self.n_periods))
        else:
            F = self.fluorescence(f_c, t, db)
        if self.noise.is_quiet and periodic and not full:
            v = self.detect(F[:, : self.n_per], [])
            return t[:, : self.n_per], v
        gens = [rngmod.stream(self.noise.seed, role, (stream_id << 32) | int(i)) for i in indices]
        return t, self.detect(F, gens)

    def demod(self, t, v):
        ref = 2 * math.pi * self.drive.f_mod * t + self.phase
        X = np.mean(v * np.sin(ref), axis=-1)
        Y = np.mean(v * np.cos(ref), axis=-1)
        return np.sign(X) * 4.0 * np.hypot(X, Y)

    def run(self, f_c, t0, role, stream_id=0, threads=None):
        """S_demod for every window, evaluated as a deterministic parallel map."""
        f_c = np.atleast_1d(np.asarray(f_c, dtype=float))
        t0 = np.broadcast_to(np.asarray(t0, dtype=float), f_c.shape)
        idx = np.arange(f_c.size)
        self.drift(idx if idx.size else [0], role, stream_id)
        per_chunk = max(1, _CHUNK_SAMPLES // self.n)
        chunks = [idx[i : i + per_chunk] for i in range(0, idx.size, per_chunk)]

        def work(sel):
            t, v = self.voltages(f_c[sel], t0[sel], sel, role, stream_id)
            return self.demod(t, v)

        workers = _thread_count(threads)
        if workers <= 1 or len(chunks) <= 1:
            parts = [work(c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(work, chunks))
        return np.concatenate(parts) if parts else np.zeros(0)


def _thread_count(threads):
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("NVLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidInputError(f"NVLAB_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def synthesize_timetrace(cfg, lines, env, det, noise, t_int, sample_rate=None, *, params=None, t0=0.0, window_index=0, b1_factor=1.0):
    """Sampled output voltage of one acquisition window.

    Deterministic for a fixed ``noise.seed`` and ``window_index``.
    """
    eng = _Engine(cfg, lines, env, det, noise, t_int, sample_rate, params, b1_factor)
    t, v = eng.voltages(np.array([cfg.f_c]), np.array([t0]), np.array([window_index]), rngmod.TRACE_WINDOW, full=True)
    return Timetrace(t=t[0], v=v[0], sample_rate=eng.fs)


def demodulate(series, f_mod, t_int, sample_rate, phase=0.0, t0=0.0):
    """Signed peak-to-peak amplitude of the ``f_mod`` component of ``series``.

    X and Y are averages of the series against unit sine and cosine
    references over the whole number of periods inside ``t_int``;
    S_demod = sign(X) * 4 * sqrt(X^2 + Y^2).
    """
    v = np.asarray(series, dtype=float)
    per = sample_rate / f_mod
    n_periods = min(int(math.floor(t_int * f_mod + 1e-9)), int(math.floor(v.size / per + 1e-9)))
    if n_periods < 1:
        raise InvalidInputError("series must span at least one modulation period")
    n = int(round(n_periods * per))
    t = t0 + np.arange(n) / sample_rate
    ref = 2 * math.pi * f_mod * t + phase
    X = np.mean(v[:n] * np.sin(ref))
    Y = np.mean(v[:n] * np.cos(ref))
    return float(np.sign(X) * 4.0 * math.hypot(X, Y))


def _meta(drive, det, noise, t_int, f_step=None, **extra):
    meta = {"drive": drive, "detection": det, "noise": noise, "t_int": t_int}
    if f_step is not None:
        meta["f_step"] = f_step
    meta.update(extra)
    return meta


def sweep_spectrum(grid, drive, lines, env, det, noise, t_int, sample_rate=None, *, params=None, b1_factor=1.0,
                   threads=None, stream_id=0):
    """Demodulated spectrum: one lock-in reading per mean frequency in ``grid``.

    Point ``i`` dwells during [i t_int, (i+1) t_int) and draws its noise from
    stream (seed, stream_id, i), so the result does not depend on evaluation
    order.  Different ``stream_id`` values give independent noise.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or not np.all(np.diff(grid) > 0):
        raise InvalidInputError("grid must be strictly increasing with at least two points")
    steps = np.diff(grid)
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-6):
        raise InvalidInputError("grid must have a uniform step")
    eng = _Engine(drive, lines, env, det, noise, t_int, sample_rate, params, b1_factor)
    t0 = np.arange(grid.size) * eng.t_int
    values = eng.run(grid, t0, rngmod.SWEEP_POINT, stream_id=stream_id, threads=threads)
    return DemodTrace(grid, values, _meta(drive, det, noise, eng.t_int, float(steps[0]), sample_rate=eng.fs))


def demod_timetrace(n_windows, drive, lines, env, det, noise, t_int, sample_rate=None, *, params=None, b1_factor=1.0, threads=None, stream_id=0):
    """S_demod recorded at a fixed f_c for ``n_windows`` consecutive windows."""
    if n_windows < 1:
        raise InvalidInputError("need at least one window")
    eng = _Engine(drive, lines, env, det, noise, t_int, sample_rate, params, b1_factor)
    t0 = np.arange(n_windows) * eng.t_int
    f_c = np.full(n_windows, drive.f_c)
    values = eng.run(f_c, t0, rngmod.TRACE_WINDOW, stream_id=stream_id, threads=threads)
    return DemodTrace(t0, values, _meta(drive, det, noise, eng.t_int, sample_rate=eng.fs, f_c=drive.f_c))


def integrate_demod(trace):
    """S_integ: running integral of S_demod * f_step / (2 f_depth).

    Midpoint accumulation (half weight on the current sample) keeps the
    integrated line centred on the swept grid.
    """
    drive = trace.meta.get("drive")
    f_step = trace.meta.get("f_step")
    if drive is None or f_step is None:
        raise InvalidInputError("trace metadata must carry the drive and the frequency step")
    if drive.f_depth == 0:
        raise InvalidInputError("f_depth must be nonzero to integrate")
    steps = np.diff(trace.axis)
    if steps.size and not np.allclose(steps, f_step, rtol=1e-6):
        raise InvalidInputError("trace must have a uniform frequency step")
    values = (np.cumsum(trace.values) - 0.5 * trace.values) * f_step / (2 * drive.f_depth)
    return Spectrum(trace.axis, values, dict(trace.meta))


def output_noise_density(det, noise, params=None):
    """White noise density (V/sqrt(Hz), one-sided) at the log-amp output.

    Shot noise of both diodes plus the common-mode laser noise that leaks
    through the finite CMRR; evaluated at the dc operating point.
    """
    e = (params or EnsembleParams()).constants.e_charge
    rel = 0.0
    if noise.shot_noise_on:
        rel += 2 * e / det.I_sig_dc + 2 * e / det.I_ref_dc
    rel += (det.cm_leak * noise.laser_rin) ** 2
    return det.log_gain * math.sqrt(rel)


def demod_noise_sigma(det, noise, f_mod, t_int, params=None):
    """Predicted standard deviation of S_demod away from the zero crossing."""
    S = output_noise_density(det, noise, params) * abs(band_transfer(f_mod, det)) * det.response_scale
    return 2.0 * S / math.sqrt(t_int)


def calibrate_rin(target_sigma, det, noise, f_mod, t_int, params=None, model_sigma=0.0):
    """Laser RIN that makes the S_demod scatter equal ``target_sigma``.

    ``model_sigma`` is scatter already present without noise (for example a
    polynomial misfit) and is removed in quadrature.  Shot noise, if enabled,
    is kept and the remainder assigned to the common-mode laser noise.
    """
    if det.cm_leak == 0:
        raise InvalidInputError("laser noise cannot reach the output with infinite CMRR")
    need = target_sigma**2 - model_sigma**2
    if need <= 0:
        raise InvalidInputError("target scatter is below the noiseless model scatter")
    gain = abs(band_transfer(f_mod, det)) * det.response_scale
    density = math.sqrt(need) * math.sqrt(t_int) / 2.0 / gain
    shot = output_noise_density(det, replace(noise, laser_rin=0.0), params)
    rest = density**2 - shot**2
    if rest <= 0:
        raise InvalidInputError("shot noise alone already exceeds the target scatter")
    return math.sqrt(rest) / (det.log_gain * det.cm_leak)
