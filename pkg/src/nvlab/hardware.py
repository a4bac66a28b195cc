"""Analytic models of the microwave resonator, the Helmholtz offset coil and
the square-wave test-field source."""

from dataclasses import dataclass
import math

import numpy as np
from scipy.optimize import least_squares

from .errors import FitError, InvalidInputError

MU_0 = 4e-7 * math.pi
HELMHOLTZ_FACTOR = 8.0 / math.sqrt(125.0)
MIN_SEGMENTS = 360


@dataclass(frozen=True)
class ResonatorModel:
    """Single-port reflection resonator.

    Parameters
    ----------
    Q0 : float
        Unloaded quality factor.
    beta_c : float
        Coupling coefficient; 1 is critical coupling.
    f_res : float
        Resonance frequency in Hz.
    """

    Q0: float
    beta_c: float
    f_res: float

    def __post_init__(self):
        if not self.Q0 > 0:
            raise InvalidInputError("Q0 must be positive")
        if not self.beta_c >= 0:
            raise InvalidInputError("beta_c must be non-negative")
        if not self.f_res > 0:
            raise InvalidInputError("f_res must be positive")


@dataclass(frozen=True)
class CoilModel:
    turns_N: int
    radius_r: float
    wire_resistance_R: float = 1.0

    def __post_init__(self):
        if int(self.turns_N) != self.turns_N or self.turns_N <= 0:
            raise InvalidInputError("turns_N must be a positive integer")
        if not self.radius_r > 0:
            raise InvalidInputError("radius_r must be positive")
        if not self.wire_resistance_R > 0:
            raise InvalidInputError("wire_resistance_R must be positive")


@dataclass(frozen=True)
class TestFieldWaveform:
    """Square-wave field along one NV axis.

    The waveform toggles between ``+amplitude_field/2`` and
    ``-amplitude_field/2``, so the two levels are ``amplitude_field`` apart.
    Calling the instance with a time array returns the field in tesla.
    """

    frequency: float
    amplitude_field: float
    axis_index: int = 3
    shape: str = "square"

    def __post_init__(self):
        if self.shape != "square":
            raise InvalidInputError("only square test fields are supported")
        if not self.frequency > 0:
            raise InvalidInputError("frequency must be positive")
        if not self.amplitude_field >= 0:
            raise InvalidInputError("amplitude_field must be non-negative")
        if self.axis_index not in (0, 1, 2, 3):
            raise InvalidInputError("axis_index must be 0..3")

    def __call__(self, t):
        phase = np.mod(np.asarray(t, dtype=float) * self.frequency, 1.0)
        return np.where(phase < 0.5, 0.5, -0.5) * self.amplitude_field

    def level_index(self, t):
        """0 for the high half-period, 1 for the low one."""
        phase = np.mod(np.asarray(t, dtype=float) * self.frequency, 1.0)
        return (phase >= 0.5).astype(int)


def _detuning(f, res):
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise InvalidInputError("frequency must be positive")
    return 2 * res.Q0 * (f / res.f_res - res.f_res / f)


def reflection_coefficient(f, res):
    xi = _detuning(f, res)
    return (1 - res.beta_c - 1j * xi) / (1 + res.beta_c - 1j * xi)


def reflection_s11(f, res):
    """|S11|^2 in dB; -inf exactly at critical coupling on resonance."""
    g2 = np.abs(reflection_coefficient(f, res)) ** 2
    with np.errstate(divide="ignore"):
        out = 10 * np.log10(g2)
    return out if np.ndim(out) else float(out)


def resonator_bandwidth(res):
    """Loaded bandwidth (1 + beta) f_res / Q0 in Hz."""
    return (1 + res.beta_c) * res.f_res / res.Q0


def b1_factor(s11_db):
    """Fraction of incident amplitude absorbed by the resonator.

    Returns ``sqrt(1 - 10**(s11_db/10))``; the ODMR contrast scales with it.
    """
    s = np.asarray(s11_db, dtype=float)
    if np.any(s > 0) or np.any(np.isnan(s)):
        raise InvalidInputError("s11_db must be <= 0 dB")
    out = np.sqrt(1 - 10 ** (s / 10))
    return out if np.ndim(out) else float(out)


def fit_resonator(f, s11_db, guess=None, overcoupled=False):
    """Least-squares fit of (Q0, beta_c, f_res) to a measured S11 curve in dB.

    |S11| alone cannot tell beta from 1/beta (both give the same dip and
    loaded Q), so the branch is picked by ``overcoupled``.  Critically
    coupled dips (-inf) cannot be fit in dB, so points below -60 dB are
    clipped there on both sides of the residual.
    """
    f = np.asarray(f, dtype=float)
    y = np.asarray(s11_db, dtype=float)
    if f.shape != y.shape or f.size < 4:
        raise InvalidInputError("need at least four (f, s11) pairs of equal length")
    y = np.maximum(y, -60.0)
    if guess is None:
        i = int(np.argmin(y))
        f0 = f[i]
        depth = 10 ** (y[i] / 20)  # |Gamma| at resonance
        beta0 = (1 - depth) / (1 + depth)
        if overcoupled:
            beta0 = 1 / max(beta0, 1e-6)
        half = y[i] / 2
        inside = f[y <= half]
        fwhm = max(inside.max() - inside.min(), f[1] - f[0]) if inside.size else (f[-1] - f[0]) / 4
        q0 = (1 + beta0) * f0 / fwhm
        guess = (q0, beta0, f0)

    q_g, b_g, f_g = (float(v) for v in guess)
    bw = (1 + b_g) * f_g / q_g

    # unknowns are log Q0, beta and the centre offset in bandwidth units
    def resid(p):
        model = ResonatorModel(math.exp(p[0]), abs(p[1]), f_g + p[2] * bw)
        return np.maximum(reflection_s11(f, model), -60.0) - y

    lo, hi = ([-np.inf, 1.0, -np.inf], [np.inf, np.inf, np.inf]) if overcoupled \
        else ([-np.inf, 0.0, -np.inf], [np.inf, 1.0, np.inf])
    x0 = [math.log(q_g), min(max(b_g, lo[1] + 1e-9), hi[1] - 1e-9), 0.0]
    sol = least_squares(resid, x0, bounds=(lo, hi), xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not sol.success:
        raise FitError("resonator fit did not converge", {"message": sol.message})
    return ResonatorModel(math.exp(sol.x[0]), abs(sol.x[1]), f_g + sol.x[2] * bw)


def helmholtz_center_field(coil, current=None, voltage=None):
    """On-axis field at the midpoint of an ideal Helmholtz pair (T).

    Exactly one of ``current`` (A) or ``voltage`` (V, divided by the winding
    resistance) must be given.
    """
    if (current is None) == (voltage is None):
        raise InvalidInputError("give exactly one of current or voltage")
    i = current if current is not None else voltage / coil.wire_resistance_R
    if not math.isfinite(i):
        raise InvalidInputError("drive must be finite")
    return HELMHOLTZ_FACTOR * MU_0 * coil.turns_N * i / coil.radius_r


def field_at_point(coil, point, current, segments=720):
    """Biot-Savart field of two coaxial loops at z = +-r/2 (T).

    Each loop is split into ``segments`` straight elements; the coil axis is z
    and the pair is centred at the origin.
    """
    if segments < MIN_SEGMENTS:
        raise InvalidInputError(f"segments must be >= {MIN_SEGMENTS}")
    p = np.asarray(point, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise InvalidInputError("point must be a finite 3-vector")
    r = coil.radius_r
    phi = np.linspace(0, 2 * math.pi, segments + 1)
    ring = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    total = np.zeros(3)
    for z in (-r / 2, r / 2):
        if abs(p[2] - z) < 1e-6 * r and abs(math.hypot(p[0], p[1]) - r) < 1e-6 * r:
            raise InvalidInputError("point lies on a loop wire")
        pts = np.column_stack([ring, np.full(segments + 1, z)])
        dl = np.diff(pts, axis=0)
        mid = 0.5 * (pts[1:] + pts[:-1])
        rel = p - mid
        dist = np.linalg.norm(rel, axis=1)
        if np.min(dist) < 1e-6 * r:
            raise InvalidInputError("point lies on a loop wire")
        total += np.sum(np.cross(dl, rel) / dist[:, None] ** 3, axis=0)
    return MU_0 * coil.turns_N * current / (4 * math.pi) * total
