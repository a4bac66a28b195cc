"""Closed-form NV-ensemble spin physics.

Resonance positions follow the linear Zeeman picture: each of the four
<111> orientations contributes an m_s = +1 and an m_s = -1 branch, and each
branch is split into three 14N hyperfine lines.  Frequencies are in Hz,
fields in tesla, times in seconds throughout.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np

from .errors import InvalidInputError

#: P_F for a Lorentzian profile
LORENTZIAN_SHAPE_FACTOR = 4.0 / (3.0 * math.sqrt(3.0))

#: measured low-power plateau of the linewidth, kept for comparison with the
#: value the linewidth model gives at zero Rabi frequency
PLATEAU_LINEWIDTH = 76.47e3

SMALL_FIELD_LIMIT = 10e-3


def _nv_axes():
    axes = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    return axes / math.sqrt(3.0)


@dataclass(frozen=True)
class PhysicalConstants:
    D_gs: float = 2.87e9
    beta_T: float = -75.0e3
    gamma_NV: float = 28.024e9
    f_HFS: float = 2.16e6
    e_charge: float = 1.602176634e-19
    mu_0: float = 4e-7 * math.pi
    P_F: float = LORENTZIAN_SHAPE_FACTOR

    def __post_init__(self):
        for name in ("D_gs", "gamma_NV", "f_HFS", "e_charge", "mu_0", "P_F"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if not self.beta_T < 0:
            raise InvalidInputError("beta_T must be negative")


@dataclass(frozen=True)
class EnsembleParams:
    """Diamond and NV-ensemble parameters.

    ``T2_star`` is set so that gamma2*/pi equals the 68.67 kHz inhomogeneous
    term of the linewidth fit.  ``power_term_ref`` and ``power_ref`` pin the
    Rabi-frequency calibration: the power-broadening term of the linewidth
    model equals ``power_term_ref`` at ``power_ref`` watts.  The default
    ``contrast_scale`` is chosen so a Lorentzian fit of the integrated
    spectrum at 40 kHz depth and 58 uW reads 0.43 % contrast.
    """

    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    orientations: tuple = field(default_factory=lambda: tuple(map(tuple, _nv_axes())))
    T1: float = 5.89e-3
    T2: float = 96.49e-6
    T2_star: float = 1.0 / (math.pi * 68.67e3)
    contrast_scale: float = 1.996e-3
    sigma_abs: float = 0.31e-16 * 1e-4
    E_ph: float = 2.38 * 1.602176634e-19
    optical_intensity: float = 390.19e4
    power_term_ref: float = 86.6e3
    power_ref: float = 1e-3

    def __post_init__(self):
        axes = np.asarray(self.orientations, dtype=float)
        if axes.shape != (4, 3):
            raise InvalidInputError("orientations must be four 3-vectors")
        if not np.allclose(np.linalg.norm(axes, axis=1), 1.0, atol=1e-9):
            raise InvalidInputError("orientations must be unit vectors")
        cosines = np.abs(axes @ axes.T)[~np.eye(4, dtype=bool)]
        if not np.allclose(cosines, 1.0 / 3.0, atol=1e-6):
            raise InvalidInputError("orientations must be <111> axes (pairwise |cos| = 1/3)")
        if not self.T1 >= self.T2 >= self.T2_star > 0:
            raise InvalidInputError("require T1 >= T2 >= T2_star > 0")
        if not 0 < self.contrast_scale < 1:
            raise InvalidInputError("contrast_scale must lie in (0, 1)")
        for name in ("sigma_abs", "E_ph", "power_term_ref", "power_ref"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.optical_intensity < 0:
            raise InvalidInputError("optical_intensity must be non-negative")

    @property
    def axes(self):
        return np.asarray(self.orientations, dtype=float)


@dataclass(frozen=True)
class MagneticEnvironment:
    """Static offset field plus an optional scalar field along ``test_axis``.

    ``test_field`` is any callable mapping a time array (s) to a field array
    (T).  ``test_axis`` defaults to the direction of ``B0_vector``.
    """

    B0_vector: tuple = (0.0, 0.0, 0.0)
    delta_T: float = 0.0
    test_field: object = None
    test_axis: tuple = None

    def __post_init__(self):
        b0 = np.asarray(self.B0_vector, dtype=float)
        if b0.shape != (3,) or not np.all(np.isfinite(b0)):
            raise InvalidInputError("B0_vector must be a finite 3-vector")
        if np.linalg.norm(b0) >= SMALL_FIELD_LIMIT:
            raise InvalidInputError(
                f"|B0| = {np.linalg.norm(b0):.3g} T is outside the small-field regime (< 10 mT)"
            )
        if self.test_axis is not None:
            axis = np.asarray(self.test_axis, dtype=float)
            if axis.shape != (3,) or not np.linalg.norm(axis) > 0:
                raise InvalidInputError("test_axis must be a nonzero 3-vector")

    @property
    def b0(self):
        return np.asarray(self.B0_vector, dtype=float)

    @property
    def axis(self):
        if self.test_axis is not None:
            a = np.asarray(self.test_axis, dtype=float)
        else:
            a = self.b0
            if not np.linalg.norm(a) > 0:
                a = np.array([0.0, 0.0, 1.0])
        return a / np.linalg.norm(a)

    def extra_field(self, t):
        """Scalar field along ``axis`` at times ``t`` (zeros when unset)."""
        t = np.asarray(t, dtype=float)
        if self.test_field is None:
            return np.zeros_like(t)
        return np.broadcast_to(np.asarray(self.test_field(t), dtype=float), t.shape)


#: offset-field direction used for the reference setup; resolves all four axes,
#: with orientation 3 carrying the largest and orientation 1 a near-zero projection
REFERENCE_B0_DIRECTION = (-0.263, -0.809, 0.526)
REFERENCE_B0_MAGNITUDE = 1.07e-3


def reference_environment(delta_T=0.0, test_field=None, test_axis=None):
    """1.07 mT offset field along ``REFERENCE_B0_DIRECTION``."""
    d = np.asarray(REFERENCE_B0_DIRECTION, dtype=float)
    d = d / np.linalg.norm(d)
    return MagneticEnvironment(
        B0_vector=tuple(REFERENCE_B0_MAGNITUDE * d),
        delta_T=delta_T,
        test_field=test_field,
        test_axis=test_axis,
    )


@dataclass(frozen=True)
class ResonanceLine:
    center: float
    linewidth: float
    contrast: float
    orientation_index: int
    hyperfine_index: int
    branch: int

    def __post_init__(self):
        if not self.linewidth > 0:
            raise InvalidInputError("linewidth must be positive")
        if not 0 <= self.contrast < 1:
            raise InvalidInputError("contrast must lie in [0, 1)")
        if self.orientation_index not in (0, 1, 2, 3):
            raise InvalidInputError("orientation_index must be 0..3")
        if self.hyperfine_index not in (-1, 0, 1):
            raise InvalidInputError("hyperfine_index must be -1, 0 or +1")
        if self.branch not in (-1, 1):
            raise InvalidInputError("branch must be +1 or -1")


def effective_rates(params, pumping_rate):
    """Return (gamma1_eff, gamma2_eff) in 1/s."""
    gamma1 = 1.0 / params.T1 + pumping_rate
    gamma2 = 1.0 / params.T2 + pumping_rate / 2.0
    return gamma1, gamma2


def pumping_rate(I_opt, params):
    """Optical pumping rate sigma * I / E_ph in 1/s (``I_opt`` in W/m^2)."""
    if I_opt < 0:
        raise InvalidInputError("optical intensity must be non-negative")
    return params.sigma_abs * I_opt / params.E_ph


def power_broadened_linewidth(rabi, params, pumping_rate):
    """FWHM (Hz) of the ensemble line for Rabi frequency ``rabi`` (rad/s)."""
    rabi = np.asarray(rabi, dtype=float)
    if np.any(rabi < 0) or pumping_rate < 0:
        raise InvalidInputError("Rabi frequency and pumping rate must be non-negative")
    gamma1, gamma2 = effective_rates(params, pumping_rate)
    inhomogeneous = 1.0 / (params.T2_star * math.pi)
    power = np.sqrt((gamma2 / math.pi) ** 2 + 4.0 * gamma1 / gamma2 * (rabi / (2 * math.pi)) ** 2)
    out = inhomogeneous + power
    return float(out) if out.ndim == 0 else out


def power_term(rabi, params, pumping_rate):
    """The power-dependent square-root term of the linewidth model alone."""
    return power_broadened_linewidth(rabi, params, pumping_rate) - 1.0 / (params.T2_star * math.pi)


def rabi_per_sqrt_watt(params, pumping_rate):
    """Calibration constant k in Omega_R = k * sqrt(P_MW).

    Chosen so the power term equals ``params.power_term_ref`` at
    ``params.power_ref``.
    """
    gamma1, gamma2 = effective_rates(params, pumping_rate)
    floor = gamma2 / math.pi
    if params.power_term_ref <= floor:
        raise InvalidInputError("reference power term is below the zero-power floor")
    rabi_hz_sq = (params.power_term_ref**2 - floor**2) * gamma2 / (4.0 * gamma1)
    return 2 * math.pi * math.sqrt(rabi_hz_sq / params.power_ref)


def rabi_frequency(p_mw, params, pumping_rate):
    if p_mw < 0:
        raise InvalidInputError("microwave power must be non-negative")
    return rabi_per_sqrt_watt(params, pumping_rate) * math.sqrt(p_mw)


def saturation(rabi, params, pumping_rate):
    """Drive saturation parameter Omega^2 / (gamma1_eff * gamma2_eff)."""
    gamma1, gamma2 = effective_rates(params, pumping_rate)
    return rabi**2 / (gamma1 * gamma2)


def linewidth_readings(params, pumping_rate):
    """The inhomogeneous-linewidth figures side by side.

    ``fit_term`` is gamma2*/pi from the linewidth fit, ``zero_power`` is the
    full model evaluated at Omega_R = 0 and ``plateau`` the measured
    low-power plateau.  They are not reconciled here.
    """
    return {
        "fit_term": 1.0 / (params.T2_star * math.pi),
        "zero_power": power_broadened_linewidth(0.0, params, pumping_rate),
        "plateau": PLATEAU_LINEWIDTH,
    }


def lorentzian(x, line, amplitude):
    """A * (dnu/2)^2 / ((x - x0)^2 + (dnu/2)^2)."""
    if not line.linewidth > 0:
        raise InvalidInputError("linewidth must be positive")
    return _lorentz(np.asarray(x, dtype=float), line.center, line.linewidth) * amplitude


def lorentzian_derivative(x, line, amplitude):
    """d/dx of :func:`lorentzian`; extrema at x0 +- dnu/(2*sqrt(3))."""
    if not line.linewidth > 0:
        raise InvalidInputError("linewidth must be positive")
    hw = line.linewidth / 2.0
    dx = np.asarray(x, dtype=float) - line.center
    return -2.0 * amplitude * hw**2 * dx / (dx**2 + hw**2) ** 2


def _lorentz(x, x0, width):
    hw2 = (0.5 * width) ** 2
    return hw2 / ((x - x0) ** 2 + hw2)


def resonance_frequencies(env, params, linewidth=None, contrast=None):
    """All 24 ODMR lines (4 orientations x 2 branches x 3 hyperfine), sorted.

    Lines get the zero-power linewidth and ``params.contrast_scale`` unless
    overridden; use :func:`apply_drive` for power-dependent values.
    Degenerate lines are kept separately so their contrasts add.
    """
    c = params.constants
    if linewidth is None:
        linewidth = power_broadened_linewidth(
            0.0, params, pumping_rate(params.optical_intensity, params)
        )
    if contrast is None:
        contrast = params.contrast_scale
    projections = np.abs(params.axes @ env.b0)
    base = c.D_gs + c.beta_T * env.delta_T
    lines = []
    for o, proj in enumerate(projections):
        for branch in (1, -1):
            for k in (-1, 0, 1):
                center = base + branch * c.gamma_NV * proj + k * c.f_HFS
                lines.append(ResonanceLine(center, linewidth, contrast, o, k, branch))
    lines.sort(key=lambda ln: (ln.center, ln.orientation_index, ln.branch, ln.hyperfine_index))
    return lines


def apply_drive(lines, params, p_mw):
    """Return lines re-parameterized for a total microwave power ``p_mw`` (W).

    Width comes from the linewidth model with Omega_R = k sqrt(P); contrast is
    ``params.contrast_scale * s / (1 + s)`` with the saturation parameter s of
    the same two-level model.
    """
    gp = pumping_rate(params.optical_intensity, params)
    rabi = rabi_frequency(p_mw, params, gp)
    width = power_broadened_linewidth(rabi, params, gp)
    s = saturation(rabi, params, gp)
    contrast = params.contrast_scale * s / (1.0 + s)
    return [replace(ln, linewidth=width, contrast=contrast) for ln in lines]


def tone_plan(drive, f_HFS):
    """(offsets, amplitudes) of the microwave tones.

    With the three-tone drive the weights are power fractions; each tone's
    contrast scales with the square root of its share (contrast follows B1),
    normalized so balanced tones each match a single-tone drive.
    """
    if not drive.hfs_on:
        return np.array([0.0]), np.array([1.0])
    w = np.asarray(drive.tone_weights, dtype=float)
    if w.shape != (3,) or np.any(w < 0):
        raise InvalidInputError("tone weights must be three non-negative numbers")
    if not math.isclose(w.sum(), 1.0, rel_tol=1e-9):
        raise InvalidInputError("tone weights must sum to 1")
    return np.array([-f_HFS, 0.0, f_HFS]), np.sqrt(3.0 * w)


def hfs_gain(tone_weights):
    """Central-dip depth of the three-tone drive relative to a single tone."""
    w = np.asarray(tone_weights, dtype=float)
    w = w / w.sum()
    return float(np.sum(np.sqrt(3.0 * w)))


class LineSet:
    """Array view of a list of lines for vectorized evaluation."""

    def __init__(self, lines):
        self.lines = list(lines)
        self.center = np.array([ln.center for ln in self.lines], dtype=float)
        self.width = np.array([ln.linewidth for ln in self.lines], dtype=float)
        self.contrast = np.array([ln.contrast for ln in self.lines], dtype=float)
        self.orientation = np.array([ln.orientation_index for ln in self.lines], dtype=int)
        self.branch = np.array([ln.branch for ln in self.lines], dtype=float)

    def __len__(self):
        return len(self.lines)


def contrast_budget(lines, drive, b1_factor=1.0, f_HFS=PhysicalConstants.f_HFS):
    lines = lines if isinstance(lines, LineSet) else LineSet(lines)
    _, amps = tone_plan(drive, f_HFS)
    return float(lines.contrast.sum() * amps.sum() * b1_factor)


def cw_spectrum(freq, lines, drive, b1_factor=1.0, f_HFS=PhysicalConstants.f_HFS, shifts=None):
    """Relative fluorescence F(f), 1 off resonance.

    ``shifts`` is an optional callable ``shifts(j)`` returning the center
    offset of line ``j`` (broadcastable to ``freq``) for time-dependent fields.
    """
    if b1_factor < 0:
        raise InvalidInputError("b1_factor must be non-negative")
    ls = lines if isinstance(lines, LineSet) else LineSet(lines)
    offsets, amps = tone_plan(drive, f_HFS)
    if contrast_budget(ls, drive, b1_factor, f_HFS) >= 1.0:
        raise InvalidInputError("summed contrast exceeds the realizable fluorescence budget")
    freq = np.asarray(freq, dtype=float)
    dip = np.zeros_like(freq)
    for j in range(len(ls)):
        x0 = ls.center[j] if shifts is None else ls.center[j] + shifts(j)
        for off, amp in zip(offsets, amps):
            if amp == 0:
                continue
            dip += (ls.contrast[j] * amp * b1_factor) * _lorentz(freq + off, x0, ls.width[j])
    return 1.0 - dip
