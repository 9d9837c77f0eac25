"""Statistical analysis of clock runs.

Provides the overlapping Allan deviation with white-FM confidence
intervals, extraction of single-integrator instability from the interleaved
frequency difference, the projection-noise instability law, weighted
nonlinear fitting of thermally dephased Rabi flops, and per-site
first-order frequency-shift diagnostics computed from the servo's report
stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lombscargle

from clocksim.atom import closed_form_onres


class InsufficientData(Exception):
    """Not enough samples to estimate any requested averaging time."""


class FitFailure(Exception):
    """A fit did not converge or the data carry no usable signal."""


class BoundsHit(Exception):
    """The best fit pinned a parameter at a physical bound."""


@dataclass(frozen=True)
class FrequencySeries:
    """Time-aligned correction traces of the two interleaved integrators.

    sample_period : s between consecutive samples (one clock cycle)
    df1, df2 : Hz, total frequency displacement of each integrator
    reference_frequency : Hz, converts displacements to fractional units
    """

    sample_period: float
    df1: np.ndarray
    df2: np.ndarray
    reference_frequency: float

    def __post_init__(self):
        object.__setattr__(self, "df1", np.asarray(self.df1, dtype=float))
        object.__setattr__(self, "df2", np.asarray(self.df2, dtype=float))
        if len(self.df1) != len(self.df2):
            raise ValueError("df1 and df2 must have equal lengths")
        if self.sample_period <= 0:
            raise ValueError("sample_period must be > 0")
        if self.reference_frequency <= 0:
            raise ValueError("reference_frequency must be > 0")

    def __len__(self):
        return len(self.df1)


@dataclass(frozen=True)
class AdevCurve:
    """Allan deviation estimates per averaging time.

    taus are strictly increasing; n_pairs counts the overlapping estimator
    terms behind each point. dropped_taus lists requested taus the input
    was too short for. fitted_a, when present, is the coefficient of an
    a / sqrt(tau) fit.
    """

    taus: np.ndarray
    sigmas: np.ndarray
    sigma_errs: np.ndarray
    n_pairs: np.ndarray
    dropped_taus: tuple = ()
    fitted_a: float = None

    def __post_init__(self):
        if np.any(np.diff(self.taus) <= 0):
            raise ValueError("taus must be strictly increasing")
        if len(self.taus) and np.min(self.n_pairs) < 1:
            raise ValueError("each point needs at least one estimator pair")

    def __iter__(self):
        return iter(zip(self.taus, self.sigmas, self.sigma_errs, self.n_pairs))

    def __len__(self):
        return len(self.taus)


def _white_fm_edf(n_samples, m):
    """Equivalent degrees of freedom of the overlapping estimator, white FM."""
    if n_samples <= 2:
        return 1.0
    edf = (3.0 * (n_samples - 1) / (2.0 * m) - 2.0 * (n_samples - 2) / n_samples) * (
        4.0 * m**2
    ) / (4.0 * m**2 + 5.0)
    return max(edf, 1.0)


def overlapping_adev(y, sample_period, taus):
    """Overlapping Allan deviation of a fractional-frequency sequence.

    Each requested tau is rounded to an integer multiple m of the sample
    period; taus the series cannot support (fewer than one estimator pair)
    are dropped and reported in ``dropped_taus``. The one-sigma estimate
    uncertainty comes from the white-FM equivalent-degrees-of-freedom
    approximation.

    Raises
    ------
    InsufficientData
        when no requested tau is computable.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    cum = np.concatenate(([0.0], np.cumsum(y)))
    out_taus, out_sigmas, out_errs, out_pairs = [], [], [], []
    dropped = []
    seen_m = set()
    for tau in sorted(taus):
        m = int(round(tau / sample_period))
        if m < 1 or n - 2 * m < 0:
            dropped.append(tau)
            continue
        if m in seen_m:
            continue
        seen_m.add(m)
        d = cum[2 * m :] - 2.0 * cum[m : n - m + 1] + cum[: n - 2 * m + 1]
        pairs = len(d)
        avar = np.sum(d * d) / (2.0 * m**2 * pairs)
        sigma = math.sqrt(avar)
        edf = _white_fm_edf(n, m)
        out_taus.append(m * sample_period)
        out_sigmas.append(sigma)
        out_errs.append(sigma / math.sqrt(2.0 * edf))
        out_pairs.append(pairs)
    if not out_taus:
        raise InsufficientData(f"series of {n} samples supports none of the requested taus")
    return AdevCurve(
        taus=np.asarray(out_taus),
        sigmas=np.asarray(out_sigmas),
        sigma_errs=np.asarray(out_errs),
        n_pairs=np.asarray(out_pairs, dtype=int),
        dropped_taus=tuple(dropped),
    )


def default_taus(n_samples, sample_period, per_decade=4):
    """Log-spaced averaging times supported by a series of given length."""
    m_max = n_samples // 2
    if m_max < 1:
        return [sample_period]
    grid = np.unique(
        np.round(
            np.logspace(0.0, math.log10(m_max), num=max(int(math.log10(m_max) * per_decade) + 1, 1))
        ).astype(int)
    )
    return [m * sample_period for m in grid if m >= 1]


def fit_inverse_sqrt(curve, min_pairs=10):
    """Least-squares coefficient a of sigma(tau) = a / sqrt(tau).

    Fitted in log space with the slope fixed at -1/2, using only points
    backed by at least ``min_pairs`` estimator pairs.
    """
    mask = curve.n_pairs >= min_pairs
    if not np.any(mask):
        raise InsufficientData(f"no tau has >= {min_pairs} estimator pairs")
    usable = curve.sigmas[mask] > 0
    if not np.any(usable):
        return 0.0
    logs = np.log(curve.sigmas[mask][usable]) + 0.5 * np.log(curve.taus[mask][usable])
    return float(np.exp(np.mean(logs)))


def single_integrator_instability(series, taus=None, min_pairs_for_fit=10):
    """Single-integrator fractional instability from the interleaved pair.

    Computes y(t) = (df1 - df2) / reference_frequency, takes its
    overlapping Allan deviation, and divides by sqrt(2): the two
    integrators are statistically independent estimates of the same
    oscillator, so the difference carries twice the single-integrator
    variance. The returned curve includes the a / sqrt(tau) coefficient
    fitted over adequately supported taus.
    """
    y = (series.df1 - series.df2) / series.reference_frequency
    if taus is None:
        taus = default_taus(len(y), series.sample_period)
    curve = overlapping_adev(y, series.sample_period, taus)
    sigmas = curve.sigmas / math.sqrt(2.0)
    errs = curve.sigma_errs / math.sqrt(2.0)
    scaled = AdevCurve(
        taus=curve.taus,
        sigmas=sigmas,
        sigma_errs=errs,
        n_pairs=curve.n_pairs,
        dropped_taus=curve.dropped_taus,
    )
    try:
        a = fit_inverse_sqrt(scaled, min_pairs=min_pairs_for_fit)
    except InsufficientData:
        a = None
    return AdevCurve(
        taus=scaled.taus,
        sigmas=scaled.sigmas,
        sigma_errs=scaled.sigma_errs,
        n_pairs=scaled.n_pairs,
        dropped_taus=scaled.dropped_taus,
        fitted_a=a,
    )


def qpn_instability(nu, contrast, probe_time, cycle_time, n_ions, tau):
    """Projection-noise-limited fractional instability of one integrator.

    sigma(tau) = 1 / (2 pi nu C T_probe) * sqrt(T_cycle / (N tau)).
    """
    if min(nu, contrast, probe_time, cycle_time, n_ions, tau) <= 0:
        raise ValueError("all arguments must be positive")
    return (
        1.0
        / (2.0 * math.pi * nu * contrast * probe_time)
        * math.sqrt(cycle_time / (n_ions * tau))
    )


@dataclass(frozen=True)
class RabiFitResult:
    """Fitted thermally dephased Rabi flop parameters with uncertainties.

    rabi_freq is angular (rad/s), matching SiteModel. chi2_dof is the
    weighted residual chi-square per degree of freedom.
    """

    contrast_a: float
    rabi_freq: float
    nbar: float
    bias_c: float
    contrast_a_err: float
    rabi_freq_err: float
    nbar_err: float
    bias_c_err: float
    chi2_dof: float


_NBAR_MAX = 500.0


def _rabi_omega_candidates(t, p):
    """Angular frequency guesses from the dominant spectral peak."""
    t = np.asarray(t, dtype=float)
    centered = p - np.mean(p)
    diffs = np.diff(np.sort(t))
    span = t.max() - t.min()
    if span <= 0:
        return []
    if np.allclose(diffs, diffs[0], rtol=1e-6, atol=0.0):
        dt = diffs[0]
        spectrum = np.abs(np.fft.rfft(centered))
        freqs = np.fft.rfftfreq(len(t), dt)
        if len(spectrum) < 2:
            return []
        k = 1 + int(np.argmax(spectrum[1:]))
        peak = 2.0 * math.pi * freqs[k]
    else:
        omegas = np.linspace(2.0 * math.pi * 0.5 / span, math.pi / np.min(diffs), 512)
        power = lombscargle(t, centered, omegas)
        peak = float(omegas[np.argmax(power)])
    if peak <= 0:
        return []
    return [peak]


def fit_rabi(data, eta, n_starts_nbar=(1.0, 10.0, 25.0, 40.0)):
    """Weighted least-squares fit of an on-resonance thermal Rabi flop.

    Parameters
    ----------
    data : sequence of (t, p_hat, n_trials) rows, or a 3-column array
    eta : Lamb-Dicke parameter, held fixed during the fit

    The model is ``closed_form_onres``; weights are binomial,
    sigma_i^2 = p (1 - p) / n with p floored at 1 / (2 n) so empty bins do
    not produce infinite weight. Multi-start covers the spectral peak of
    the data crossed with several thermal occupations, which keeps the fit
    off local minima of the strongly dephased flops.

    Raises
    ------
    FitFailure
        if the data show no oscillation contrast above shot noise, or no
        start converges.
    BoundsHit
        if the best fit pins the contrast or the Rabi frequency at a
        bound, which signals a spurious result rather than a measurement.
    """
    rows = np.asarray(data, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != 3:
        raise ValueError("data must be rows of (t, p_hat, n_trials)")
    t, p, n = rows[:, 0], rows[:, 1], rows[:, 2]
    if np.any(n < 1):
        raise ValueError("n_trials must be >= 1")

    p_w = np.clip(p, 1.0 / (2.0 * n), 1.0 - 1.0 / (2.0 * n))
    sigma = np.sqrt(p_w * (1.0 - p_w) / n)

    contrast = float(p.max() - p.min())
    if contrast < 5.0 * float(np.median(sigma)):
        raise FitFailure(
            f"data contrast {contrast:.4f} is below 5x the shot noise {np.median(sigma):.4f}"
        )

    def residuals(x):
        a, omega, nbar, c = x
        return (closed_form_onres(t, a, omega, nbar, c, eta) - p) / sigma

    omega_obs = _rabi_omega_candidates(t, p)
    if not omega_obs:
        raise FitFailure("could not locate a spectral peak to seed the fit")

    a0 = min(max(contrast, 0.05), 1.0)
    c0 = min(max(float(p.min()), 0.0), 0.9)
    lower = np.array([0.0, 1e-6, 0.0, 0.0])
    upper = np.array([1.0, np.inf, _NBAR_MAX, 1.0])

    best = None
    for base in omega_obs:
        for nbar0 in n_starts_nbar:
            # The observed oscillation sits near the thermally weighted
            # carrier, below the bare Rabi frequency; undo that shift.
            scale = 1.0 - eta**2 * (nbar0 + 0.5)
            omega0 = base / scale if scale > 0.1 else base
            x0 = np.clip(
                np.array([a0, omega0, nbar0, c0]), lower + 1e-9, np.minimum(upper, 1e12)
            )
            try:
                res = least_squares(residuals, x0, bounds=(lower, upper), max_nfev=2000)
            except ValueError:
                continue
            if not res.success:
                continue
            if best is None or res.cost < best.cost:
                best = res
    if best is None:
        raise FitFailure("no start converged")

    a, omega, nbar, c = best.x
    pinned = []
    if a <= lower[0] + 1e-9:
        pinned.append("contrast_a at 0")
    if omega <= lower[1] * (1.0 + 1e-6):
        pinned.append("rabi_freq at lower bound")
    if nbar >= _NBAR_MAX * (1.0 - 1e-9):
        pinned.append(f"nbar at {_NBAR_MAX}")
    if pinned:
        raise BoundsHit("; ".join(pinned))

    jac = best.jac
    dof = len(t) - 4
    chi2_dof = float(2.0 * best.cost / dof) if dof > 0 else float("nan")
    try:
        cov = np.linalg.inv(jac.T @ jac)
        errs = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        errs = np.full(4, float("nan"))

    return RabiFitResult(
        contrast_a=float(a),
        rabi_freq=float(omega),
        nbar=float(nbar),
        bias_c=float(c),
        contrast_a_err=float(errs[0]),
        rabi_freq_err=float(errs[1]),
        nbar_err=float(errs[2]),
        bias_c_err=float(errs[3]),
        chi2_dof=chi2_dof,
    )


@dataclass(frozen=True)
class ShiftSample:
    """First-order frequency shift of one site in one reporting period.

    present_key is the sorted tuple of sites occupied during the period;
    samples are only emitted for periods whose presence flags match the
    preceding period, so transitions do not contaminate the groups.
    """

    period_index: int
    site: int
    present_key: tuple
    shift_hz: float


def first_order_shifts(reports, servo):
    """Per-site first-order shifts from a report stream.

    For every reporting period j with stable presence flags and every
    present site, computes

        shift = gain1 * (s_R - s_L) * fwhm

    from that site's integrator-1 side sums. Under a perfect lock with no
    per-site shifts these average to zero; a site whose transition sits
    away from the ensemble lock point shows a proportional nonzero mean.
    """
    samples = []
    prev_key = None
    for rpt in reports:
        key = tuple(sorted(site for site, here in rpt.present.items() if here))
        if key == prev_key:
            for site in key:
                per_integrator = rpt.per_site_sums[site]
                s_r, s_l = per_integrator[1]
                shift = servo.gain1 * servo.fwhm * (s_r - s_l)
                samples.append(
                    ShiftSample(
                        period_index=rpt.period_index,
                        site=site,
                        present_key=key,
                        shift_hz=shift,
                    )
                )
        prev_key = key
    return samples


def group_shift_samples(samples):
    """Group shift samples by (site, present_key) and summarize.

    Returns a list of dicts sorted by site then occupancy pattern, each
    with the group mean, standard error, sample count, and the
    significance z = mean / sem (nan when fewer than two samples).
    """
    groups = {}
    for s in samples:
        groups.setdefault((s.site, s.present_key), []).append(s.shift_hz)
    out = []
    for (site, key), values in sorted(groups.items()):
        arr = np.asarray(values)
        n = len(arr)
        mean = float(np.mean(arr))
        if n >= 2:
            sem = float(np.std(arr, ddof=1) / math.sqrt(n))
        else:
            sem = float("nan")
        z = mean / sem if sem and sem > 0 else float("nan")
        out.append(
            {
                "site": site,
                "present": list(key),
                "mean_hz": mean,
                "sem_hz": sem,
                "n": n,
                "z": z,
            }
        )
    return out
