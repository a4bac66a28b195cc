"""Measurement pipeline: slope and noise extraction from demodulated spectra,
Lorentzian line fits, sensitivity estimates, Allan deviation, the
photon shot-noise limit and frequency-to-field conversion."""

from dataclasses import dataclass, field
import math
import warnings

import numpy as np
from numpy.polynomial import Polynomial
from scipy.optimize import least_squares
from scipy.stats import kurtosis, skew

from .errors import FitError, InvalidInputError, NoZeroCrossingError
from .nv_core import PhysicalConstants

LN10 = math.log(10.0)
SLOPE_DEGREE = 6
_GAMMA = PhysicalConstants().gamma_NV


@dataclass(frozen=True)
class SlopeFit:
    coefficients: np.ndarray  # power basis in (f - zero_crossing), V/Hz^n
    slope_m: float
    zero_crossing: float
    residuum_sigma: float
    residuals: np.ndarray


@dataclass(frozen=True)
class LineFit:
    amplitude_A: float
    linewidth: float
    center_x0: float
    contrast_C: float
    baseline: float
    covariance: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SensitivityReport:
    eta_B: float
    method: str
    inputs: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AllanSeries:
    """Allan deviation against averaging time.

    ``convention`` is ``"as-written"`` (mean squared difference of
    consecutive bin means, no 1/2) or ``"half-factor"`` (the conventional
    Allan variance).  ``rejected`` maps each unusable tau to the reason.
    """

    taus: np.ndarray
    sigma_A: np.ndarray
    convention: str = "as-written"
    units: str = "V"
    rejected: dict = field(default_factory=dict)


def _series(x, name="series"):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} must be finite")
    return x


# -- slope ---------------------------------------------------------------

def fit_slope(trace, degree=SLOPE_DEGREE):
    """Polynomial fit of a demodulated spectrum around its zero crossing.

    Parameters
    ----------
    trace : DemodTrace
        S_demod against f_c; must have at least 20 points and change sign.
    degree : int
        Polynomial degree, six by default.

    Returns
    -------
    SlopeFit
        ``slope_m`` is the derivative at the real root closest to the
        middle of the window.  ``residuum_sigma`` is the residual standard
        deviation with ``degree + 1`` degrees of freedom removed, which is
        unbiased for white noise.
    """
    x = _series(trace.axis, "axis")
    y = _series(trace.values, "values")
    if x.size < 20:
        raise InvalidInputError("need at least 20 points for the slope fit")
    if x.size <= degree + 1:
        raise InvalidInputError("need more points than polynomial coefficients")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise NoZeroCrossingError("S_demod does not change sign inside the window")
    p = Polynomial.fit(x, y, degree)
    mid = 0.5 * (x[0] + x[-1])
    roots = p.roots()
    real = roots[np.abs(roots.imag) <= 1e-9 * max(1.0, np.max(np.abs(roots)))].real
    real = real[(real >= x[0]) & (real <= x[-1])]
    if real.size == 0:
        raise NoZeroCrossingError("fitted polynomial has no real root inside the window")
    x0 = float(real[np.argmin(np.abs(real - mid))])
    slope = float(p.deriv()(x0))
    residuals = y - p(x)
    dof = x.size - (degree + 1)
    sigma = float(math.sqrt(np.sum(residuals**2) / dof))
    # Taylor coefficients about the crossing carry physical units
    coef = np.array([p.deriv(k)(x0) / math.factorial(k) if k else p(x0) for k in range(degree + 1)])
    coef.setflags(write=False)
    residuals.setflags(write=False)
    return SlopeFit(coef, slope, x0, sigma, residuals)


# -- Lorentzian ------------------------------------------------------------

def _lorentz(x, x0, width):
    h = 0.5 * width
    return h * h / ((x - x0) ** 2 + h * h)


def _initial_guess(x, y):
    """Extremum, half-height span and depth; works for dips and peaks."""
    n_edge = max(2, x.size // 20)
    base = float(np.median(np.concatenate([y[:n_edge], y[-n_edge:]])))
    dev = y - base
    i = int(np.argmax(np.abs(dev)))
    amp = float(dev[i])
    half = np.abs(dev) >= 0.5 * abs(amp)
    lo = i
    while lo > 0 and half[lo - 1]:
        lo -= 1
    hi = i
    while hi < x.size - 1 and half[hi + 1]:
        hi += 1
    width = max(x[hi] - x[lo], 2 * (x[1] - x[0]))
    return base, amp, float(x[i]), float(width)


def _log_gain_of(spectrum, log_gain):
    if log_gain is not None:
        return float(log_gain)
    det = spectrum.meta.get("detection") if spectrum.meta else None
    if det is None:
        raise InvalidInputError("give log_gain or a spectrum whose metadata carries the detection settings")
    from .signal_chain import chain_frequency_response

    drive = spectrum.meta.get("drive")
    gain = det.log_gain * det.response_scale
    if drive is not None:
        gain *= chain_frequency_response(drive.f_mod, det)
    return gain


def fit_lorentzian(spectrum, baseline=None, log_gain=None, max_nfev=2000):
    """Least-squares fit of ``baseline + A * L(x; x0, width)``.

    Parameters
    ----------
    spectrum : Spectrum
        Integrated demodulated signal (or any sampled line) covering a few
        linewidths on each side of the feature.
    baseline : float, optional
        Fixed background level.  Fitted when omitted.
    log_gain : float, optional
        Volts per unit relative fluorescence change.  Defaults to the
        small-signal log-amplifier gain times the chain response at the
        modulation frequency, read from the spectrum metadata.

    Returns
    -------
    LineFit
        ``contrast_C = |A| / log_gain``; the covariance is the scaled
        inverse Gauss-Newton Hessian in the order (A, width, x0[, baseline]).
    """
    x = _series(spectrum.axis, "axis")
    y = _series(spectrum.values, "values")
    if x.size < 8:
        raise InvalidInputError("need at least 8 points for a line fit")
    # work in a shifted, scaled frame so the fit is translation-equivariant
    xc = 0.5 * (x[0] + x[-1])
    xs = max(x[-1] - x[0], 1e-300)
    u = (x - xc) / xs
    ys = float(np.max(np.abs(y - np.median(y)))) or 1.0
    v = y / ys
    b0, a0, u0, w0 = _initial_guess(u, v)
    fixed = baseline is not None
    bfix = baseline / ys if fixed else None

    def model(p):
        b = bfix if fixed else p[3]
        return b + p[0] * _lorentz(u, p[2], p[1])

    def resid(p):
        return model(p) - v

    p0 = [a0, w0, u0] + ([] if fixed else [b0])
    lo = [-np.inf, 1e-9, u[0]] + ([] if fixed else [-np.inf])
    hi = [np.inf, np.inf, u[-1]] + ([] if fixed else [np.inf])
    sol = least_squares(resid, p0, bounds=(lo, hi), max_nfev=max_nfev, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    diag = {"status": int(sol.status), "nfev": int(sol.nfev), "message": sol.message, "initial": p0}
    if sol.status <= 0 or not np.all(np.isfinite(sol.x)):
        raise FitError("Lorentzian fit did not converge", diag)
    a, w, x0 = sol.x[:3]
    dof = max(u.size - len(p0), 1)
    s2 = float(np.sum(sol.fun**2) / dof)
    try:
        cov_u = np.linalg.inv(sol.jac.T @ sol.jac) * s2
    except np.linalg.LinAlgError:
        cov_u = np.full((len(p0), len(p0)), np.nan)
    scale = np.array([ys, xs, xs] + ([] if fixed else [ys]))
    cov = cov_u * np.outer(scale, scale)
    A = float(a * ys)
    gain = _log_gain_of(spectrum, log_gain)
    C = abs(A) / gain
    if not 0 <= C < 1:
        raise FitError(f"fitted contrast {C:g} is outside [0, 1)", diag)
    b = float(baseline if fixed else sol.x[3] * ys)
    return LineFit(A, float(w * xs), float(x0 * xs + xc), float(C), b, cov, diag)


# -- sensitivity ---------------------------------------------------------

def sensitivity(sigma, slope_m, t_int, gamma=_GAMMA):
    """eta_B = sigma / (gamma |m|) * sqrt(t_int), in T/sqrt(Hz)."""
    if slope_m == 0 or not math.isfinite(slope_m):
        raise InvalidInputError("slope must be finite and nonzero")
    if not t_int > 0:
        raise InvalidInputError("t_int must be positive")
    if sigma < 0:
        raise InvalidInputError("sigma must be non-negative")
    eta = sigma / (gamma * abs(slope_m)) * math.sqrt(t_int)
    return SensitivityReport(eta, "slope-based", {"sigma": sigma, "slope_m": slope_m, "t_int": t_int, "gamma": gamma})


def to_field(values, slope_m, gamma=_GAMMA):
    """Convert S_demod readings (V) into field offsets (T) via the slope.

    Near the crossing S = m (f_c - x0), so a line shift d gives S = -m d and
    the returned value is the shift -S / m expressed in tesla.
    """
    if slope_m == 0:
        raise InvalidInputError("slope must be nonzero")
    return -np.asarray(values, dtype=float) / (slope_m * gamma)


def shift_from_reading(values, fit, gamma=None, iterations=30):
    """Invert the fitted polynomial: line shift (Hz, or T with ``gamma``).

    The reading at the tuned frequency is ``p(x0 - d)`` for a line moved by
    ``d``; Newton steps on the Taylor coefficients recover ``d`` beyond the
    linear range of :func:`to_field`.
    """
    s = np.asarray(values, dtype=float)
    c = np.asarray(fit.coefficients, dtype=float)
    poly = np.polynomial.Polynomial(c - np.r_[c[0], np.zeros(c.size - 1)])  # zero at the crossing
    dpoly = poly.deriv()
    u = s / fit.slope_m
    for _ in range(iterations):
        u = u - (poly(u) - s) / dpoly(u)
    d = -u
    return d / gamma if gamma else d


def bimodality_coefficient(x):
    """Sarle's coefficient; values above 5/9 hint at more than one mode."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return 0.0
    g = skew(x, bias=False)
    k = kurtosis(x, bias=False)
    return float((g * g + 1) / (k + 3 * (n - 1) ** 2 / ((n - 2) * (n - 3))))


def _centered(x):
    # a constant segment is exactly zero; its float mean need not be
    return np.zeros_like(x) if x.size and np.ptp(x) == 0 else x - x.mean()


def histogram_sensitivity(trace, t_int, slope_m=None, gamma=_GAMMA, labels=None):
    """Sensitivity from the spread of a time trace at constant field.

    Parameters
    ----------
    trace : array_like
        S_demod samples in volts, or field samples in tesla when
        ``slope_m`` is None.
    labels : array_like of int, optional
        Segment label per sample.  Each segment's mean is removed before
        pooling and samples labelled -1 are dropped, so a square-wave trace
        can be analysed level by level.

    Notes
    -----
    The Gaussian is fitted by maximum likelihood (mean and the 1/N
    standard deviation), which needs no binning.
    """
    x = _series(trace, "trace")
    if not t_int > 0:
        raise InvalidInputError("t_int must be positive")
    if slope_m is not None:
        x = to_field(x, slope_m, gamma)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != x.shape:
            raise InvalidInputError("labels must match the trace length")
        keep = labels >= 0
        x, labels = x[keep], labels[keep]
        pooled = np.empty_like(x)
        for lab in np.unique(labels):
            sel = labels == lab
            pooled[sel] = _centered(x[sel])
        x = pooled
    else:
        x = _centered(x)
    if x.size < 2:
        raise InvalidInputError("need at least two samples")
    sigma = float(np.std(x))
    bc = bimodality_coefficient(x)
    diag = {"bimodality": bc, "n": int(x.size)}
    if bc > 5 / 9 and x.size >= 50:
        diag["multimodal"] = True
        warnings.warn("trace histogram looks multimodal; is the field constant?", RuntimeWarning, stacklevel=2)
    return SensitivityReport(sigma * math.sqrt(t_int), "histogram-based",
                             {"sigma_field": sigma, "t_int": t_int, "slope_m": slope_m, "gamma": gamma}, diag)


# -- Allan deviation -----------------------------------------------------

def allan_deviation(series, sample_period, taus, half_factor=False, slope_m=None, gamma=_GAMMA):
    """Allan deviation from non-overlapping consecutive bin means.

    ``sigma_A(tau)^2`` is the mean of ``(ybar_{n+1} - ybar_n)^2`` over all
    adjacent pairs of bins of length ``tau``.  With ``half_factor`` the
    result is divided by sqrt(2).  A ``slope_m`` converts volts to tesla.
    Taus that are not whole multiples of the sample period or leave fewer
    than two bins are skipped and listed in ``rejected``.
    """
    y = _series(series)
    if not sample_period > 0:
        raise InvalidInputError("sample_period must be positive")
    if slope_m is not None:
        y = to_field(y, slope_m, gamma)
    out_t, out_s, rejected = [], [], {}
    for tau in np.atleast_1d(np.asarray(taus, dtype=float)):
        n = tau / sample_period
        m = int(round(n))
        if m < 1 or abs(n - m) > 1e-6 * max(1.0, n):
            rejected[float(tau)] = "not a whole multiple of the sample period"
            continue
        nb = y.size // m
        if nb < 2:
            rejected[float(tau)] = "trace shorter than two intervals"
            continue
        means = y[: nb * m].reshape(nb, m).mean(axis=1)
        var = float(np.mean(np.diff(means) ** 2))
        if half_factor:
            var *= 0.5
        out_t.append(m * sample_period)
        out_s.append(math.sqrt(var))
    order = np.argsort(out_t)
    return AllanSeries(np.asarray(out_t)[order], np.asarray(out_s)[order],
                       "half-factor" if half_factor else "as-written",
                       "T" if slope_m is not None else "V", rejected)


def log_spaced_taus(sample_period, n_samples, per_decade=10, min_bins=2):
    """Whole-sample averaging times spaced roughly evenly on a log axis."""
    top = n_samples // min_bins
    if top < 1:
        return np.zeros(0)
    m = np.unique(np.round(np.logspace(0, math.log10(top), max(2, int(per_decade * math.log10(top)) + 1))).astype(int))
    return m * sample_period


# -- closed forms --------------------------------------------------------

def shot_noise_limit(linewidth, contrast, photon_rate, constants=None):
    """Photon shot-noise limited sensitivity in T/sqrt(Hz)."""
    c = constants or PhysicalConstants()
    if not (linewidth > 0 and contrast > 0 and photon_rate > 0):
        raise InvalidInputError("linewidth, contrast and photon rate must be positive")
    return c.P_F / c.gamma_NV * linewidth / contrast / math.sqrt(photon_rate)


def photon_rate(u_shunt, r_shunt, e_charge=None):
    """Detected photon rate from the voltage across a photodiode shunt."""
    if not r_shunt > 0:
        raise InvalidInputError("r_shunt must be positive")
    if u_shunt < 0:
        raise InvalidInputError("u_shunt must be non-negative")
    e = e_charge if e_charge is not None else PhysicalConstants().e_charge
    return u_shunt / (r_shunt * e)


def field_from_shift(df, gamma=_GAMMA):
    """Field change (T) that moves a line by ``df`` Hz; keeps the sign."""
    return np.asarray(df, dtype=float) / gamma if np.ndim(df) else float(df) / gamma


# -- spectrum utilities --------------------------------------------------

def count_zero_crossings(values, threshold=None, rel_threshold=0.05):
    """Number of + to - crossings of a demodulated spectrum.

    Each resonance gives one descending crossing at its center.  A crossing
    counts only once the signal has been above ``+threshold`` and then
    falls below ``-threshold``, so ripple in the flat gaps is ignored.
    The default threshold is ``rel_threshold`` times the largest |value|.
    """
    y = _series(values, "values")
    if threshold is None:
        threshold = rel_threshold * float(np.max(np.abs(y))) if y.size else 0.0
    count = 0
    armed = False
    for val in y:
        if val > threshold:
            armed = True
        elif val < -threshold and armed:
            count += 1
            armed = False
    return count


def moving_mean(values, width=3):
    """Centered moving mean; the ends average over the points available."""
    y = _series(values, "values")
    if width < 1 or width % 2 == 0:
        raise InvalidInputError("width must be a positive odd integer")
    h = width // 2
    c = np.concatenate([[0.0], np.cumsum(y)])
    idx = np.arange(y.size)
    lo = np.maximum(idx - h, 0)
    hi = np.minimum(idx + h + 1, y.size)
    return (c[hi] - c[lo]) / (hi - lo)
