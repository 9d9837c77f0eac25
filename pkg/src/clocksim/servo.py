"""Interleaved two-integrator clock servo.

One clock cycle interrogates both sides of the line for each of two
statistically independent integrators (four side interrogations). Probes
within a cycle use the corrections computed at the cycle boundary; at the
end of the cycle each integrator folds its side imbalance in integer
arithmetic:

    I2 += I1 (pre-update value), then I1 += sum_sites(n_R - n_L)

and steers by Delta_f = (gain1 * I1 + gain2 * I2) * fwhm.

Sign convention: the R probe sits half a linewidth below the servo's
inferred center and L half a linewidth above it. n_side = 1 records a
bright (unshelved) read. When the true line sits above the inferred center
the below-center probe is further detuned, stays bright more often, and the
positive imbalance raises the correction toward the line: negative
feedback.

Presence tracking keeps, per site, a rolling window of max(n_R, n_L) over
recent side pairs; a site whose window mean falls below the threshold is
reported lost at the next report boundary and handed to the ensemble
manager. A dark ion that recovers within the window is never flagged.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import stats

from clocksim.analysis import FitFailure, FrequencySeries
from clocksim.atom import (
    IonState,
    ThermalState,
    _shelving_many,
    lamb_dicke,
)
from clocksim.config import DETECTION_THRESHOLD, validate_config
from clocksim.oscillator import LocalOscillator
from clocksim.shuttle import ShuttleManager
from clocksim.streams import substream


# Plain ints for the interrogation loop; IonState attribute lookups are
# measurable at millions of side interrogations per run.
_BRIGHT = int(IonState.BRIGHT)
_DARK = int(IonState.DARK)
_LOST = int(IonState.LOST)


def detection_click_probability(bright_rate, dark_rate, detect_time, fluorescing):
    """Probability that a photon-count read reaches the bright threshold.

    The counter is Poisson; a read classifies bright when the count
    reaches DETECTION_THRESHOLD. Sampling a uniform against this
    probability is distributionally identical to sampling the counts,
    which keeps the interrogation loop at one draw per read.
    """
    rate = (bright_rate + dark_rate) if fluorescing else dark_rate
    return float(stats.poisson.sf(DETECTION_THRESHOLD - 1, rate * detect_time))


class AllIonsLostTimeout(Exception):
    """The ensemble stayed empty longer than the interlock allows."""

    def __init__(self, t):
        self.t = t
        super().__init__(f"no occupied site for longer than the interlock at t = {t:.3f} s")


@dataclass(frozen=True)
class IntegratorState:
    """Exact integer accumulators of one servo integrator."""

    i1: int
    i2: int
    integrator_id: int


def update_integrator(state, imbalance):
    """Fold one cycle's imbalance into an integrator.

    The second-order accumulator receives the pre-update first-order value,
    then the first-order accumulator absorbs the imbalance. All integer.
    """
    imbalance = int(imbalance)
    return IntegratorState(
        i1=state.i1 + imbalance,
        i2=state.i2 + state.i1,
        integrator_id=state.integrator_id,
    )


def frequency_displacement(state, servo):
    """Total correction in Hz: (gain1 * I1 + gain2 * I2) * fwhm."""
    return (servo.gain1 * state.i1 + servo.gain2 * state.i2) * servo.fwhm


@dataclass(frozen=True)
class SideOutcome:
    """One side interrogation across the ensemble.

    per_site_n maps site -> 1 (bright), 0 (dark), or None when the site
    was empty or shuttling. applied_detuning_hz is the synthesizer setting
    relative to nominal: correction plus the half-width probe offset.
    """

    side: str
    integrator_id: int
    timestamp: float
    per_site_n: dict
    applied_detuning_hz: float


@dataclass(frozen=True)
class ReportRecord:
    """Per-reporting-period summary emitted every report_period cycles.

    per_site_sums maps site -> {integrator_id: (s_R, s_L)} with integer
    side sums over the period. present marks sites that were probeable for
    the whole period and not flagged lost at its boundary.
    """

    period_index: int
    per_site_sums: dict
    present: dict
    df1: float
    df2: float
    timestamp: float


class PresenceTracker:
    """Rolling per-site bright-outcome window deciding site loss."""

    def __init__(self, n_sites, window, threshold):
        self.window = int(window)
        self.threshold = float(threshold)
        self._buf = {site: deque(maxlen=self.window) for site in range(1, n_sites + 1)}

    def push(self, site, value):
        self._buf[site].append(int(value))

    def reset(self, site):
        self._buf[site].clear()

    def rolling_mean(self, site):
        buf = self._buf[site]
        if not buf:
            return 1.0  # nothing observed yet; presume present
        return sum(buf) / len(buf)

    def is_lost(self, site):
        return self.rolling_mean(site) < self.threshold

    def update(self, pair_outcomes):
        """Ingest one side-pair outcome per site; return flagged sites.

        pair_outcomes maps site -> max(n_R, n_L) for one integrator's
        completed pair.
        """
        for site, value in pair_outcomes.items():
            self.push(site, value)
        return {site for site in pair_outcomes if self.is_lost(site)}


class _SiteTables:
    """Per-site lineshape lookup tables for the servo hot path.

    Tabulates the thermal shelving probability on a uniform grid of
    absolute detunings covering [0, 4 * fwhm] and interpolates linearly
    (error at the grid density is ~1e-7). Beyond the grid the tail value
    is used; the lineshape is flat at the bias level out there.
    """

    GRID_N = 4096

    def __init__(self, config, probe_rabi, eta):
        servo = config.servo
        self.grid_max = 4.0 * servo.fwhm
        self._inv_dx = (self.GRID_N - 1) / self.grid_max
        grid = np.linspace(0.0, self.grid_max, self.GRID_N)
        rows = []
        for site, omega in zip(config.sites, probe_rabi):
            thermal = ThermalState(nbar=site.nbar, eta=eta)
            rows.append(
                _shelving_many(grid, servo.probe_time, omega, thermal, site.contrast_A, site.bias_c)
            )
        self.table = np.asarray(rows)

    def eval(self, site_rows, abs_detuning):
        x = np.minimum(abs_detuning * self._inv_dx, self.GRID_N - 1.000001)
        i = x.astype(np.int64)
        frac = x - i
        t = self.table
        return t[site_rows, i] * (1.0 - frac) + t[site_rows, i + 1] * frac

    def eval_for(self, site_rows):
        """Interpolator specialized to a fixed subset of sites."""
        flat = self.table[site_rows].ravel()
        offsets = np.arange(len(site_rows)) * self.GRID_N
        inv_dx = self._inv_dx
        top = self.GRID_N - 1.000001

        def eval_(abs_detuning):
            x = np.minimum(abs_detuning * inv_dx, top)
            i = x.astype(np.int64) + offsets
            frac = x % 1.0
            return flat[i] * (1.0 - frac) + flat[i + 1] * frac

        return eval_


_TABLE_CACHE = {}


def _site_tables(config, probe_rabi, eta):
    key = (
        tuple(config.sites),
        config.servo.fwhm,
        config.servo.probe_time,
        tuple(probe_rabi),
        eta,
    )
    tables = _TABLE_CACHE.get(key)
    if tables is None:
        tables = _SiteTables(config, probe_rabi, eta)
        if len(_TABLE_CACHE) > 32:
            _TABLE_CACHE.clear()
        _TABLE_CACHE[key] = tables
    return tables


def probe_rabi_frequencies(config):
    """Angular probe Rabi frequency per site during clock operation.

    The probe laser power is set so the ensemble-average site sees an
    exact pi pulse over the probe time; per-site coupling spread relative
    to that mean is preserved. This keeps the interrogation linewidth at
    the Fourier limit regardless of the characterization flop frequency.
    """
    rabi = np.array([s.rabi_freq for s in config.sites])
    return (math.pi / config.servo.probe_time) * rabi / rabi.mean()


def _probe_vector(
    probe_pos,
    df,
    lo_err,
    site_offsets,
    states,
    prep_errors,
    p_click_fluor,
    p_click_dark,
    rng_shelving,
    rng_detection,
    p_eval,
):
    """Sample one side for a vector of occupied sites.

    Returns the integer bright outcomes n for each site. ``p_eval`` maps
    an array of absolute detunings to shelving probabilities;
    p_click_fluor and p_click_dark are the per-site threshold-crossing
    probabilities of the photon counter.
    """
    line_pos = lo_err + site_offsets - df
    detuning = probe_pos - line_pos
    p_shelve = p_eval(np.abs(detuning))
    u = rng_shelving.random(len(states))
    bright_state = states == _BRIGHT
    shelved = bright_state & (u < p_shelve * (1.0 - prep_errors))
    fluorescing = bright_state & ~shelved
    p_click = np.where(fluorescing, p_click_fluor, p_click_dark)
    v = rng_detection.random(len(states))
    return (v < p_click).astype(np.int64)


def probe_side(integrator_id, side, df, view, lo, t, config, rng_shelving, rng_detection):
    """Interrogate every occupied, settled site on one side of the line.

    Parameters
    ----------
    integrator_id : 1 or 2, the integrator this side belongs to
    side : "R" (probe below the inferred center) or "L" (above)
    df : Hz, the integrator's current total correction
    view : mapping site_id -> IonState for probeable sites, or None for
        sites that are empty or shuttling
    lo : LocalOscillator
    t : s, interrogation time (also selects the oscillator grid step)
    config : ValidatedConfig

    Uses the exact thermal sum for the lineshape; the run loop uses the
    same sampling chain against precomputed tables.
    """
    servo = config.servo
    probe_pos = -0.5 * servo.fwhm if side == "R" else 0.5 * servo.fwhm
    eta = lamb_dicke(config.species)
    probe_rabi = probe_rabi_frequencies(config)
    lo_err = lo.offset_at(int(round(t / servo.side_time)), t)

    occupied = [site for site in sorted(view) if view[site] is not None]
    per_site_n = {site: None for site in sorted(view)}
    if occupied:
        idx = np.array([site - 1 for site in occupied])
        sites = [config.sites[i] for i in idx]

        def exact_eval(abs_det):
            out = np.empty(len(abs_det))
            for row, (site, ad) in enumerate(zip(sites, abs_det)):
                thermal = ThermalState(nbar=site.nbar, eta=eta)
                out[row] = _shelving_many(
                    ad, servo.probe_time, probe_rabi[idx[row]], thermal,
                    site.contrast_A, site.bias_c,
                )[0]
            return out

        n = _probe_vector(
            probe_pos,
            df,
            lo_err,
            np.array([s.site_offset for s in sites]),
            np.array([int(view[site]) for site in occupied]),
            np.array([s.prep_error for s in sites]),
            np.array(
                [
                    detection_click_probability(
                        s.bright_rate, s.dark_rate, servo.detect_time, True
                    )
                    for s in sites
                ]
            ),
            np.array(
                [
                    detection_click_probability(
                        s.bright_rate, s.dark_rate, servo.detect_time, False
                    )
                    for s in sites
                ]
            ),
            rng_shelving,
            rng_detection,
            exact_eval,
        )
        for site, value in zip(occupied, n):
            per_site_n[site] = int(value)

    return SideOutcome(
        side=side,
        integrator_id=integrator_id,
        timestamp=t,
        per_site_n=per_site_n,
        applied_detuning_hz=df + probe_pos,
    )


@dataclass
class RunResult:
    """Everything a finished run produced.

    series : FrequencySeries sampled once per cycle (post-update)
    reports : list of ReportRecord
    sides : list of SideOutcome when collected, else None
    shuttle_events : list of shuttle/loader event dicts
    final_integrators : (IntegratorState, IntegratorState)
    occupancy : dict with all_sites_fraction (physical), mean_occupied,
        and believed_all_fraction
    n_cycles : int
    config : ValidatedConfig
    """

    series: FrequencySeries
    reports: list
    sides: list
    shuttle_events: list
    final_integrators: tuple
    occupancy: dict
    n_cycles: int
    config: object


def _parse_side_order(side_order):
    out = []
    for token in side_order:
        out.append((token[0], int(token[1])))
    return out


def run_clock(
    config,
    manager=None,
    duration=None,
    *,
    collect_sides=False,
    side_sink=None,
    report_sink=None,
):
    """Run the interleaved clock protocol for the given simulated duration.

    Executes every clock cycle whose start time lies before ``duration``:
    interrogates the configured side order, evolves ion loss and dark
    states, updates both integrators at cycle boundaries, emits a
    ReportRecord every report_period cycles, and forwards presence
    verdicts to the ensemble manager, which shuttles and reloads.

    Deterministic for a fixed configuration: every stochastic process
    draws from its own named substream of the master seed.

    Raises
    ------
    AllIonsLostTimeout
        when no site is believed occupied for longer than
        sim.interlock_timeout.
    """
    cfg = validate_config(config)
    servo = cfg.servo
    sim = cfg.sim
    if duration is None:
        duration = sim.duration
    n_sites = sim.n_sites
    t_cycle = cfg.cycle_time
    order = _parse_side_order(servo.side_order)
    n_cycles = max(int(math.ceil(duration / t_cycle - 1e-9)), 0)

    lo = LocalOscillator(
        sim.lo_noise, sim.seed, servo.side_time, ref_frequency=cfg.species.clock_frequency
    )
    rng_shelving = substream(sim.seed, "shelving")
    rng_detection = substream(sim.seed, "detection")
    rng_loss = substream(sim.seed, "loss")
    if manager is None:
        manager = ShuttleManager(cfg, substream(sim.seed, "loader"))

    eta = lamb_dicke(cfg.species)
    probe_rabi = probe_rabi_frequencies(cfg)
    tables = _site_tables(cfg, tuple(probe_rabi), eta)

    site_offsets_all = np.array([s.site_offset for s in cfg.sites])
    prep_all = np.array([s.prep_error for s in cfg.sites])
    click_fluor_all = np.array(
        [
            detection_click_probability(s.bright_rate, s.dark_rate, servo.detect_time, True)
            for s in cfg.sites
        ]
    )
    click_dark_all = np.array(
        [
            detection_click_probability(s.bright_rate, s.dark_rate, servo.detect_time, False)
            for s in cfg.sites
        ]
    )
    # Single-event transition probabilities per side interval. Two events
    # within one 6 ms side are ~1e-8 likely; the exact walk lives in
    # evolve_ion for coarse steps.
    dt = servo.side_time
    loss_scale = np.array([s.lifetime_scale for s in cfg.sites])
    if math.isfinite(sim.ion_lifetime):
        p_loss_all = 1.0 - np.exp(-dt / (sim.ion_lifetime * loss_scale))
    else:
        p_loss_all = np.zeros(n_sites)
    p_dark = 1.0 - math.exp(-dt * sim.dark_event_rate)
    p_recover = 1.0 - math.exp(-dt * sim.dark_recovery_rate)

    tracker = PresenceTracker(n_sites, servo.presence_window, servo.presence_threshold)
    integrators = [IntegratorState(0, 0, 1), IntegratorState(0, 0, 2)]

    df1_series = []
    df2_series = []
    reports = []
    sides = [] if collect_sides else None

    period_sums = np.zeros((2, n_sites, 2), dtype=np.int64)  # ig, site, (R, L)
    period_probes = np.zeros(n_sites, dtype=np.int64)
    period_index = 0
    sides_per_cycle = len(order)
    probes_per_period = sides_per_cycle * servo.report_period

    last_ion = {site: None for site in range(1, n_sites + 1)}
    empty_since = None
    cycles_all_present = 0
    cycles_believed_all = 0
    occupied_cycle_sum = 0

    # Per-site arrays for the currently probeable set, rebuilt only when
    # the set changes; ion states live in `states` between sync points.
    cur_key = object()
    k_occ = 0
    idx = np.empty(0, dtype=np.int64)
    ions = []
    states = np.empty(0, dtype=np.int64)
    site_offsets = preps = clicks_f = clicks_d = p_loss = None
    p_eval = None
    half_fwhm = 0.5 * servo.fwhm
    want_sides = collect_sides or side_sink is not None

    def sync_states():
        # Ions the manager discarded since the last sync stay discarded.
        for ion, st in zip(ions, states):
            if ion in manager.ion_state:
                manager.ion_state[ion] = IonState(int(st))

    for cycle in range(n_cycles):
        t0 = cycle * t_cycle
        manager.advance(t0)

        probeable = manager.probeable_sites()
        key = tuple(probeable)
        if key != cur_key:
            sync_states()
            cur_key = key
            k_occ = len(probeable)
            idx = np.array([site - 1 for site, _ion in probeable], dtype=np.int64)
            ions = [ion for _site, ion in probeable]
            states = np.array([int(manager.ion_state[ion]) for ion in ions], dtype=np.int64)
            site_offsets = site_offsets_all[idx]
            preps = prep_all[idx]
            clicks_f = click_fluor_all[idx]
            clicks_d = click_dark_all[idx]
            p_loss = p_loss_all[idx]
            p_eval = tables.eval_for(idx)
            for site, ion in probeable:
                if last_ion[site] != ion:
                    tracker.reset(site)
                    last_ion[site] = ion

        if k_occ:
            empty_since = None
        elif empty_since is None:
            empty_since = t0
        if empty_since is not None and (t0 + t_cycle) - empty_since > sim.interlock_timeout:
            sync_states()
            raise AllIonsLostTimeout(t0 + t_cycle)

        df = (
            frequency_displacement(integrators[0], servo),
            frequency_displacement(integrators[1], servo),
        )
        imbalance = [0, 0]
        pair_r = [None, None]
        pair_l = [None, None]

        for slot, (side, ig) in enumerate(order):
            k = cycle * sides_per_cycle + slot
            t = k * servo.side_time

            # Loss and dark-state evolution over this side interval.
            if k_occ:
                u = rng_loss.random(k_occ)
                alive = states != _LOST
                to_lost = alive & (u < p_loss)
                bright_mask = states == _BRIGHT
                flip = (
                    alive
                    & ~to_lost
                    & (u < p_loss + np.where(bright_mask, p_dark, p_recover))
                )
                if to_lost.any():
                    states[to_lost] = _LOST
                if flip.any():
                    states[flip] = np.where(bright_mask[flip], _DARK, _BRIGHT)

            probe_pos = -half_fwhm if side == "R" else half_fwhm
            lo_err = lo.offset_at(k, t)
            if k_occ:
                n = _probe_vector(
                    probe_pos,
                    df[ig - 1],
                    lo_err,
                    site_offsets,
                    states,
                    preps,
                    clicks_f,
                    clicks_d,
                    rng_shelving,
                    rng_detection,
                    p_eval,
                )
                total = int(n.sum())
                if side == "R":
                    period_sums[ig - 1, idx, 0] += n
                    pair_r[ig - 1] = n
                    imbalance[ig - 1] += total
                else:
                    period_sums[ig - 1, idx, 1] += n
                    pair_l[ig - 1] = n
                    imbalance[ig - 1] -= total
                period_probes[idx] += 1
            else:
                n = None

            if want_sides:
                per_site_n = {site: None for site in range(1, n_sites + 1)}
                if n is not None:
                    for site_i, value in zip(idx, n):
                        per_site_n[int(site_i) + 1] = int(value)
                outcome = SideOutcome(
                    side=side,
                    integrator_id=ig,
                    timestamp=t,
                    per_site_n=per_site_n,
                    applied_detuning_hz=df[ig - 1] + probe_pos,
                )
                if collect_sides:
                    sides.append(outcome)
                if side_sink is not None:
                    side_sink(outcome)

        for ig in (1, 2):
            if pair_r[ig - 1] is not None and pair_l[ig - 1] is not None:
                pair = np.maximum(pair_r[ig - 1], pair_l[ig - 1])
                for site_i, value in zip(idx, pair):
                    tracker.push(int(site_i) + 1, int(value))

        integrators[0] = update_integrator(integrators[0], imbalance[0])
        integrators[1] = update_integrator(integrators[1], imbalance[1])
        df1_series.append(frequency_displacement(integrators[0], servo))
        df2_series.append(frequency_displacement(integrators[1], servo))

        phys = k_occ - int(np.count_nonzero(states == _LOST))
        occupied_cycle_sum += phys
        if phys == n_sites:
            cycles_all_present += 1
        if k_occ == n_sites:
            cycles_believed_all += 1

        if (cycle + 1) % servo.report_period == 0:
            period_index += 1
            t_report = (cycle + 1) * t_cycle
            probeable_now = {site for site, _ion in probeable}
            lost = {site for site in probeable_now if tracker.is_lost(site)}
            present = {
                site: (
                    site in probeable_now
                    and site not in lost
                    and period_probes[site - 1] == probes_per_period
                )
                for site in range(1, n_sites + 1)
            }
            per_site_sums = {
                site: {
                    1: (int(period_sums[0, site - 1, 0]), int(period_sums[0, site - 1, 1])),
                    2: (int(period_sums[1, site - 1, 0]), int(period_sums[1, site - 1, 1])),
                }
                for site in range(1, n_sites + 1)
            }
            record = ReportRecord(
                period_index=period_index,
                per_site_sums=per_site_sums,
                present=present,
                df1=df1_series[-1],
                df2=df2_series[-1],
                timestamp=t_report,
            )
            reports.append(record)
            if report_sink is not None:
                report_sink(record)
            period_sums[:] = 0
            period_probes[:] = 0
            if lost:
                sync_states()
                for site in lost:
                    tracker.reset(site)
                manager.report_losses(t_report, lost)
                cur_key = object()  # force an array rebuild next cycle

    sync_states()

    series = FrequencySeries(
        sample_period=t_cycle,
        df1=np.asarray(df1_series),
        df2=np.asarray(df2_series),
        reference_frequency=cfg.species.clock_frequency,
    )
    occupancy = {
        "all_sites_fraction": cycles_all_present / n_cycles if n_cycles else 0.0,
        "believed_all_fraction": cycles_believed_all / n_cycles if n_cycles else 0.0,
        "mean_occupied": occupied_cycle_sum / n_cycles if n_cycles else 0.0,
    }
    return RunResult(
        series=series,
        reports=reports,
        sides=sides,
        shuttle_events=manager.events,
        final_integrators=(integrators[0], integrators[1]),
        occupancy=occupancy,
        n_cycles=n_cycles,
        config=cfg,
    )


def prescan_fwhm(config, site_id, rng=None, n_points=61, shots_per_point=2000):
    """Measure the spectroscopic FWHM of one site by a detuning scan.

    Scans the probe over +/- 3 / probe_time around the line, samples the
    shelving outcome shots_per_point times per detuning, and returns the
    width between the interpolated half-maximum crossings. With a cold,
    bright ion the result sits at the Fourier limit of the probe pulse.

    Raises
    ------
    FitFailure
        when the scanned contrast is below five times the shot noise.
    """
    cfg = validate_config(config)
    servo = cfg.servo
    site = cfg.site(site_id)
    if rng is None:
        rng = substream(cfg.sim.seed, "shelving")
    eta = lamb_dicke(cfg.species)
    probe_rabi = probe_rabi_frequencies(cfg)[site_id - 1]
    thermal = ThermalState(nbar=site.nbar, eta=eta)

    span = 3.0 / servo.probe_time
    detunings = np.linspace(-span, span, n_points)
    p_true = _shelving_many(
        detunings, servo.probe_time, probe_rabi, thermal, site.contrast_A, site.bias_c
    )
    p_hat = rng.binomial(shots_per_point, p_true) / shots_per_point

    baseline = 0.5 * (np.mean(p_hat[:3]) + np.mean(p_hat[-3:]))
    peak_idx = int(np.argmax(p_hat))
    peak = float(p_hat[peak_idx])
    contrast = peak - baseline
    shot = math.sqrt(max(peak * (1.0 - peak), 1.0 / (4.0 * shots_per_point)) / shots_per_point)
    if contrast < 5.0 * shot:
        raise FitFailure(
            f"scan contrast {contrast:.4f} below 5x shot noise {shot:.4f}; no usable peak"
        )

    half = baseline + 0.5 * contrast

    def crossing(direction):
        i = peak_idx
        while 0 <= i < n_points and p_hat[i] >= half:
            i += direction
        if i < 0 or i >= n_points:
            raise FitFailure("half-maximum crossing outside the scanned span")
        inner = i - direction
        frac = (p_hat[inner] - half) / (p_hat[inner] - p_hat[i])
        return detunings[inner] + frac * (detunings[i] - detunings[inner])

    return float(crossing(+1) - crossing(-1))
