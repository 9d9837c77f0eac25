"""Atomic response of a single trapped ion.

Covers the physics a side interrogation needs: thermally dephased Rabi
dynamics on the clock transition (on and off resonance), Fourier-limited
linewidth of the probe pulse, Poisson photon-count detection with threshold
classification, and the slow stochastic processes of collision-induced dark
states and permanent ion loss.

The thermal model treats the ion as an incoherent mixture of Fock states n
with geometric weights p_n = nbar^n / (nbar + 1)^(n + 1). Each Fock state
drives a two-level Rabi flop at the carrier frequency
Omega_n = Omega_0 (1 - eta^2 (n + 1/2)), the first-order Lamb-Dicke
correction, and detuning enters through the generalized Rabi formula.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from clocksim.config import DETECTION_THRESHOLD


class IonState(enum.IntEnum):
    """Coarse state of one trapped ion between interrogations."""

    BRIGHT = 0
    DARK = 1
    LOST = 2


@dataclass(frozen=True)
class ThermalState:
    """Thermal motional state entering the dephasing model.

    nbar : mean phonon occupation
    eta : Lamb-Dicke parameter, in [0, 1)
    n_max : Fock-space truncation; defaults to max(ceil(50 * nbar), 200),
        which keeps the neglected tail mass below 1e-9 for nbar <= 40
    """

    nbar: float
    eta: float
    n_max: int = None

    def __post_init__(self):
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must be in [0, 1), got {self.eta}")
        if self.nbar < 0:
            raise ValueError(f"nbar must be >= 0, got {self.nbar}")
        if self.n_max is None:
            object.__setattr__(self, "n_max", max(math.ceil(50 * self.nbar), 200))


@dataclass(frozen=True)
class ProbeContext:
    """One interrogation pulse as the atom sees it.

    detuning : Hz, probe frequency minus the true atomic resonance
        (including any per-site shift and oscillator error)
    duration : s
    rabi_freq : angular carrier Rabi frequency (rad/s)
    """

    detuning: float
    duration: float
    rabi_freq: float

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("duration must be >= 0")


@dataclass(frozen=True)
class DetectionSample:
    """Photon counts of one detection window and their classification."""

    counts: int
    classified_bright: bool


def lamb_dicke(species):
    """Lamb-Dicke parameter eta = (1/lambda) sqrt(h / (2 m f_sec)).

    Uses the axial secular frequency; the single-mode treatment is a
    conservative bound since the probe projects partially onto all modes.
    """
    return (
        math.sqrt(species.planck / (2.0 * species.mass * species.secular_frequency))
        / species.clock_wavelength
    )


def thermal_weights(nbar, n_max):
    """Geometric Fock-state weights p_n = nbar^n / (nbar + 1)^(n + 1)."""
    n = np.arange(n_max + 1)
    if nbar == 0:
        w = np.zeros(n_max + 1)
        w[0] = 1.0
        return w
    # Log space keeps large n stable.
    log_r = math.log(nbar) - math.log1p(nbar)
    return np.exp(n * log_r - math.log1p(nbar))


def _shelving_many(detunings_hz, duration, rabi_freq, thermal, contrast_a, bias_c):
    """Vectorized thermal shelving probability over an array of detunings."""
    det = np.atleast_1d(np.asarray(detunings_hz, dtype=float))
    if duration == 0.0:
        return np.full(det.shape, bias_c)
    n = np.arange(thermal.n_max + 1)
    p_n = thermal_weights(thermal.nbar, thermal.n_max)
    omega_n = rabi_freq * (1.0 - thermal.eta**2 * (n + 0.5))
    delta = 2.0 * math.pi * det
    w_sq = omega_n[None, :] ** 2 + delta[:, None] ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(w_sq > 0.0, omega_n[None, :] ** 2 / w_sq, 0.0)
        flop = 1.0 - np.cos(np.sqrt(w_sq) * duration)
    p = bias_c + 0.5 * contrast_a * (frac * flop) @ p_n
    return np.clip(p, 0.0, 1.0)


def shelving_probability(ctx, thermal, contrast_a, bias_c):
    """Probability that one probe pulse shelves the ion.

    Evaluates the truncated Fock sum

        p = c + (A/2) sum_n p_n (Omega_n^2 / (Omega_n^2 + Delta^2))
                          (1 - cos(sqrt(Omega_n^2 + Delta^2) t))

    with Delta = 2 pi * detuning, clamped to [0, 1]. The lineshape is even
    in the detuning and decays to the bias c far off resonance.
    """
    return float(
        _shelving_many(
            ctx.detuning, ctx.duration, ctx.rabi_freq, thermal, contrast_a, bias_c
        )[0]
    )


def closed_form_onres(t, contrast_a, rabi_freq, nbar, bias_c, eta):
    """On-resonance shelving probability in closed form.

    The geometric series over Fock states sums exactly to

        S = exp(i (Omega_0 t - phi/2)) / ((nbar + 1) - nbar exp(-i phi)),
        p = c + (A/2) (1 - Re S),    phi = Omega_0 eta^2 t.

    Rationalizing the denominator gives the equivalent real form with
    denominator (nbar + 1) - 2 nbar cos(phi) + nbar^2 / (nbar + 1); the
    quadratic last term is required for p(0) = c to hold (see the variant
    kept for regression checks). Accepts scalar or array t.
    """
    t = np.asarray(t, dtype=float)
    phi = rabi_freq * eta**2 * t
    s = np.exp(1j * (rabi_freq * t - 0.5 * phi)) / ((nbar + 1.0) - nbar * np.exp(-1j * phi))
    p = np.clip(bias_c + 0.5 * contrast_a * (1.0 - s.real), 0.0, 1.0)
    return float(p) if p.ndim == 0 else p


def _onres_linear_denominator_variant(t, contrast_a, rabi_freq, nbar, bias_c, eta):
    """Defective rationalized closed form with a linear last term.

    Identical to the rationalized form of ``closed_form_onres`` except that
    the denominator ends in nbar / (nbar + 1) instead of
    nbar^2 / (nbar + 1). Kept only so tests can demonstrate that this
    variant fails the t = 0 limit (p(0) != c) for nbar not in {0, 1} while
    the corrected form passes. Not clamped, so the defect stays visible.
    """
    t = np.asarray(t, dtype=float)
    phi = rabi_freq * eta**2 * t
    numerator = np.exp(1j * (rabi_freq * t - 0.5 * phi)) * (
        1.0 - (nbar / (nbar + 1.0)) * np.exp(1j * phi)
    )
    denominator = (nbar + 1.0) - 2.0 * nbar * np.cos(phi) + nbar / (nbar + 1.0)
    p = bias_c + 0.5 * contrast_a * (1.0 - numerator.real / denominator)
    return float(p) if p.ndim == 0 else p


@lru_cache(maxsize=1)
def _halfmax_root():
    # Half maximum of the resonant pi-pulse lineshape (Omega^2/W^2) sin^2(W t / 2)
    # occurs where sin(u)/u = sqrt(2)/pi with u = W t / 2.
    return brentq(lambda u: math.sin(u) / u - math.sqrt(2.0) / math.pi, math.pi / 2, math.pi)


def fourier_fwhm(probe_time):
    """Fourier-limited FWHM in Hz of a resonant pi pulse of the given length.

    Solves the half-maximum condition of the two-level Rabi lineshape at
    runtime; the result is approximately 0.799 / probe_time.
    """
    if probe_time <= 0:
        raise ValueError("probe_time must be > 0")
    u = _halfmax_root()
    return math.sqrt(4.0 * u**2 - math.pi**2) / (math.pi * probe_time)


def simulate_detection(is_bright, site, detect_time, rng, threshold=DETECTION_THRESHOLD):
    """Draw one detection window and classify it.

    Counts are Poisson with rate bright_rate + dark_rate for a fluorescing
    ion and dark_rate otherwise; the read is classified bright when the
    count reaches the threshold.
    """
    if detect_time <= 0:
        raise ValueError("detect_time must be > 0")
    rate = site.bright_rate + site.dark_rate if is_bright else site.dark_rate
    counts = int(rng.poisson(rate * detect_time))
    return DetectionSample(counts=counts, classified_bright=counts >= threshold)


def evolve_ion(state, dt, sim, rng, lifetime_scale=1.0):
    """Evolve one ion's coarse state over dt seconds.

    Three competing exponential processes act: permanent loss at
    1 / ion_lifetime (from any state, absorbing), bright-to-dark collisions
    at dark_event_rate, and dark-to-bright recovery at dark_recovery_rate.
    The walk is exact: it draws successive event times until dt is
    exhausted, so arbitrarily long dt keeps the correct distribution.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    state = IonState(state)
    if dt == 0 or state is IonState.LOST:
        return state
    loss_rate = 0.0
    if math.isfinite(sim.ion_lifetime):
        loss_rate = 1.0 / (sim.ion_lifetime * lifetime_scale)
    t = 0.0
    while True:
        flip_rate = sim.dark_event_rate if state is IonState.BRIGHT else sim.dark_recovery_rate
        total = loss_rate + flip_rate
        if total == 0.0:
            return state
        t += rng.exponential(1.0 / total)
        if t >= dt:
            return state
        if rng.random() < loss_rate / total:
            return IonState.LOST
        state = IonState.DARK if state is IonState.BRIGHT else IonState.BRIGHT
