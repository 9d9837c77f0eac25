"""Configuration and shared domain types.

All knobs of the simulator live in four frozen dataclasses (species, per-site
response, servo, simulation) that are validated together into a sealed
``ValidatedConfig``. Validation collects every violated invariant instead of
stopping at the first, derives the clock frequency from the wavelength when
it is not given, and is idempotent. Configurations round-trip through a TOML
file with SI units throughout; unknown keys are rejected so that typos fail
loudly instead of silently running defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

try:
    import tomllib
except ImportError:
    import tomli as tomllib

from scipy.constants import c as SPEED_OF_LIGHT
from scipy.constants import h as PLANCK

# Default photon-count threshold separating dark from bright reads.
DETECTION_THRESHOLD = 2

# One clock cycle probes each integrator on both sides of the line.
DEFAULT_SIDE_ORDER = ("R1", "L1", "R2", "L2")


class InvariantViolation(Exception):
    """A configuration violated one or more invariants.

    The ``violations`` attribute holds (field_name, reason) pairs for every
    failed check, not just the first one.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = ", ".join(f"{name}: {reason}" for name, reason in self.violations)
        super().__init__(f"invalid configuration: {lines}")


@dataclass(frozen=True)
class SpeciesParams:
    """Physical constants of the ion and trap.

    mass : kg
    clock_wavelength : m
    clock_frequency : Hz, derived from the wavelength when None
    secular_frequency : Hz, axial secular frequency setting the Lamb-Dicke
        parameter
    planck : J s
    """

    mass: float
    clock_wavelength: float
    secular_frequency: float
    clock_frequency: float | None = None
    planck: float = PLANCK


@dataclass(frozen=True)
class SiteModel:
    """Per-site atomic response and detection parameters.

    site_id : ordinal position, 1..n_sites (the loading site is 0)
    contrast_A : peak shelving contrast, in (0, 1]
    rabi_freq : angular carrier Rabi frequency (rad/s) of the
        characterization flop for this site
    nbar : mean thermal phonon occupation
    bias_c : shelving probability at t = 0, in [0, 1)
    site_offset : Hz, true per-site shift of the clock transition
    bright_rate : counts/s of a fluorescing ion
    dark_rate : counts/s of background on a dark ion
    lifetime_scale : multiplier on the configured ion lifetime for this site
    prep_error : probability that state preparation fails and the probe
        leaves the ion unshelved regardless of detuning
    """

    site_id: int
    contrast_A: float
    rabi_freq: float
    nbar: float
    bias_c: float
    bright_rate: float
    dark_rate: float
    site_offset: float = 0.0
    lifetime_scale: float = 1.0
    prep_error: float = 0.0


@dataclass(frozen=True)
class ServoConfig:
    """Gains, probe geometry, and cadence of the interleaved servo.

    gain1, gain2 : dimensionless first and second order integrator gains
    fwhm : Hz, spectroscopic full width at half maximum used for probe
        placement and frequency scaling
    probe_time : s, clock interrogation pulse length
    side_time : s, full duration of one side interrogation including
        cooling, preparation, probe, and detection
    detect_time : s, fluorescence detection window
    report_period : clock cycles between emitted reports
    presence_window : side-pairs retained by the presence tracker
    presence_threshold : rolling-mean bound below which a site is flagged
        lost, in (0, 1)
    side_order : permutation of ("R1", "L1", "R2", "L2") giving the probe
        schedule within one clock cycle
    """

    gain1: float
    gain2: float
    fwhm: float
    probe_time: float
    side_time: float
    detect_time: float
    report_period: int
    presence_window: int = 8
    presence_threshold: float = 0.25
    side_order: tuple = DEFAULT_SIDE_ORDER


@dataclass(frozen=True)
class NoiseSpec:
    """Local oscillator noise model.

    white_fm : fractional-frequency white noise, quoted as the Allan
        deviation at 1 s
    random_walk_fm : fractional-frequency random walk, Allan deviation
        coefficient at 1 s
    linear_drift : Hz/s, absolute deterministic drift
    deterministic_offset : Hz, absolute static offset
    """

    white_fm: float = 0.0
    random_walk_fm: float = 0.0
    linear_drift: float = 0.0
    deterministic_offset: float = 0.0


@dataclass(frozen=True)
class SimulationConfig:
    """Run length, stochastic process rates, and ensemble geometry.

    seed : master seed; every stochastic process derives its own stream
    duration : s of simulated time
    ion_lifetime : s, mean of the exponential permanent-loss time
        (math.inf disables loss)
    dark_event_rate : 1/s, rate of collisions that push a bright ion into
        a dark, unprobeable state
    dark_recovery_rate : 1/s, rate at which a dark ion returns
    load_latency_mean : s, mean of the exponential loading latency
    shuttle_step_time : s taken by one simultaneous move group
    n_sites : number of clock sites (the loading site is extra)
    interlock_timeout : s without any occupied site before the run aborts
    """

    seed: int
    duration: float
    ion_lifetime: float
    dark_event_rate: float
    dark_recovery_rate: float
    load_latency_mean: float
    shuttle_step_time: float
    lo_noise: NoiseSpec
    n_sites: int
    interlock_timeout: float = 60.0


@dataclass(frozen=True)
class ValidatedConfig:
    """A sealed, internally consistent configuration.

    Instances are only produced by ``validate_config`` and are immutable,
    so they can be shared freely across consumers and replayed exactly.
    """

    species: SpeciesParams
    sites: tuple
    servo: ServoConfig
    sim: SimulationConfig

    def site(self, site_id):
        """Return the SiteModel with the given ordinal."""
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise KeyError(f"no site with id {site_id}")

    @property
    def cycle_time(self):
        """Duration of one clock cycle (four side interrogations)."""
        return len(self.servo.side_order) * self.servo.side_time


def _check(violations, ok, name, reason):
    if not ok:
        violations.append((name, reason))


def validate_config(species, sites=None, servo=None, sim=None):
    """Validate the four configuration groups into a ValidatedConfig.

    Passing an existing ValidatedConfig returns it unchanged, which makes
    validation idempotent. The clock frequency is derived from the
    wavelength when absent; when both are given they must agree within 1%.

    Raises
    ------
    InvariantViolation
        listing every violated invariant as (field, reason) pairs.
    """
    if isinstance(species, ValidatedConfig):
        if not (sites is None and servo is None and sim is None):
            raise TypeError("pass either a ValidatedConfig or all four groups")
        return species

    v = []

    # Species
    _check(v, species.mass > 0, "species.mass", "must be > 0")
    _check(v, species.clock_wavelength > 0, "species.clock_wavelength", "must be > 0")
    _check(v, species.secular_frequency > 0, "species.secular_frequency", "must be > 0")
    _check(v, species.planck > 0, "species.planck", "must be > 0")
    nu = species.clock_frequency
    if species.clock_wavelength > 0:
        nu_derived = SPEED_OF_LIGHT / species.clock_wavelength
        if nu is None:
            nu = nu_derived
        else:
            _check(
                v,
                abs(nu - nu_derived) <= 0.01 * nu_derived,
                "species.clock_frequency",
                "disagrees with c/clock_wavelength by more than 1%",
            )
    species = dataclasses.replace(species, clock_frequency=nu)

    # Sites
    if not sites:
        v.append(("sites", "at least one site is required"))
    site_ids = [s.site_id for s in sites] if sites else []
    _check(v, len(set(site_ids)) == len(site_ids), "sites", "site_id values must be unique")
    for s in sites or ():
        tag = f"sites[{s.site_id}]"
        _check(v, s.site_id >= 1, f"{tag}.site_id", "clock sites are numbered from 1")
        _check(v, 0 < s.contrast_A <= 1, f"{tag}.contrast_A", "must be in (0, 1]")
        _check(v, 0 <= s.bias_c < 1, f"{tag}.bias_c", "must be in [0, 1)")
        _check(v, s.bias_c + s.contrast_A <= 1 + 1e-12, f"{tag}.bias_c", "bias_c + contrast_A must be <= 1")
        _check(v, s.rabi_freq > 0, f"{tag}.rabi_freq", "must be > 0")
        _check(v, s.nbar >= 0, f"{tag}.nbar", "must be >= 0")
        _check(v, s.dark_rate >= 0, f"{tag}.dark_rate", "must be >= 0")
        _check(v, s.bright_rate > s.dark_rate, f"{tag}.bright_rate", "must exceed dark_rate")
        _check(v, math.isfinite(s.site_offset), f"{tag}.site_offset", "must be finite")
        _check(v, s.lifetime_scale > 0, f"{tag}.lifetime_scale", "must be > 0")
        _check(v, 0 <= s.prep_error < 1, f"{tag}.prep_error", "must be in [0, 1)")

    # Servo
    _check(v, 0 < servo.gain2 < servo.gain1 < 1, "servo.gain1", "need 0 < gain2 < gain1 < 1")
    _check(v, servo.fwhm > 0, "servo.fwhm", "must be > 0")
    _check(v, servo.probe_time > 0, "servo.probe_time", "must be > 0")
    _check(v, servo.detect_time > 0, "servo.detect_time", "must be > 0")
    _check(
        v,
        servo.side_time >= servo.probe_time + servo.detect_time,
        "servo.side_time",
        "must cover probe_time + detect_time",
    )
    _check(
        v,
        isinstance(servo.report_period, int) and servo.report_period >= 1,
        "servo.report_period",
        "must be an integer >= 1",
    )
    _check(
        v,
        isinstance(servo.presence_window, int) and servo.presence_window >= 1,
        "servo.presence_window",
        "must be an integer >= 1",
    )
    _check(v, 0 < servo.presence_threshold < 1, "servo.presence_threshold", "must be in (0, 1)")
    _check(
        v,
        tuple(sorted(servo.side_order)) == tuple(sorted(DEFAULT_SIDE_ORDER)),
        "servo.side_order",
        f"must be a permutation of {DEFAULT_SIDE_ORDER}",
    )
    if servo.side_order != tuple(servo.side_order):
        servo = dataclasses.replace(servo, side_order=tuple(servo.side_order))

    # Simulation
    _check(
        v,
        isinstance(sim.seed, int) and sim.seed >= 0,
        "sim.seed",
        "must be a non-negative integer",
    )
    _check(v, sim.duration >= 0, "sim.duration", "must be >= 0")
    _check(v, sim.ion_lifetime > 0, "sim.ion_lifetime", "must be > 0 (inf disables loss)")
    _check(v, sim.dark_event_rate >= 0, "sim.dark_event_rate", "must be >= 0")
    _check(v, sim.dark_recovery_rate >= 0, "sim.dark_recovery_rate", "must be >= 0")
    _check(v, sim.load_latency_mean >= 0, "sim.load_latency_mean", "must be >= 0")
    _check(v, sim.shuttle_step_time >= 0, "sim.shuttle_step_time", "must be >= 0")
    _check(v, isinstance(sim.n_sites, int) and sim.n_sites >= 1, "sim.n_sites", "must be an integer >= 1")
    _check(v, sim.interlock_timeout > 0, "sim.interlock_timeout", "must be > 0")
    noise = sim.lo_noise
    _check(v, noise.white_fm >= 0, "sim.lo_noise.white_fm", "must be >= 0")
    _check(v, noise.random_walk_fm >= 0, "sim.lo_noise.random_walk_fm", "must be >= 0")

    if sites and len(sites) != sim.n_sites:
        v.append(("sim.n_sites", f"{sim.n_sites} does not match {len(sites)} site entries"))
    if sites and sorted(site_ids) != list(range(1, len(sites) + 1)):
        v.append(("sites", "site_id values must cover 1..n_sites"))

    if v:
        raise InvariantViolation(v)

    ordered = tuple(sorted(sites, key=lambda s: s.site_id))
    return ValidatedConfig(species=species, sites=ordered, servo=servo, sim=sim)


def reference_preset(seed=12345, duration=60.0):
    """Return the validated reference configuration of the simulator.

    The timing set is anchored to the quantities the modeled system is
    known by: 5.875 ms side interrogations, reports every 20 cycles
    (0.47 s), 3 ms detection, a four-site ensemble with the measured
    per-site flop parameters, one minute ion lifetime, and loading within
    tens of seconds. The probe time is chosen so that the projection-noise
    law for this timing set evaluates to 2.30e-14 at one second of
    averaging, and the line width is the Fourier limit of that probe time.
    gain1 * fwhm = 0.8 Hz sets one first-order correction quantum; with
    these sites the closed loop then settles a frequency step in roughly
    five seconds.
    """
    from clocksim.atom import fourier_fwhm

    species = SpeciesParams(
        mass=2.8385e-25,
        clock_wavelength=435.5e-9,
        secular_frequency=1.02e6,
    )
    nu = SPEED_OF_LIGHT / species.clock_wavelength

    side_time = 5.875e-3
    t_cycle = 4.0 * side_time
    n_sites = 4
    contrast = 0.8
    qpn_at_1s = 2.30e-14
    probe_time = math.sqrt(t_cycle / n_sites) / (2.0 * math.pi * nu * contrast * qpn_at_1s)
    fwhm = fourier_fwhm(probe_time)

    servo = ServoConfig(
        gain1=0.8 / fwhm,
        gain2=1.0e-6,
        fwhm=fwhm,
        probe_time=probe_time,
        side_time=side_time,
        detect_time=3.0e-3,
        report_period=20,
        presence_window=8,
        presence_threshold=0.25,
    )

    def site(site_id, A, f_rabi_hz, nbar, c):
        return SiteModel(
            site_id=site_id,
            contrast_A=A,
            rabi_freq=2.0 * math.pi * f_rabi_hz,
            nbar=nbar,
            bias_c=c,
            bright_rate=2500.0,
            dark_rate=100.0,
        )

    sites = (
        site(1, 0.80, 5002.0, 28.0, 0.09),
        site(2, 0.78, 4920.0, 25.0, 0.09),
        site(3, 0.85, 5005.0, 37.0, 0.10),
        site(4, 0.86, 4689.0, 31.0, 0.08),
    )

    sim = SimulationConfig(
        seed=seed,
        duration=duration,
        ion_lifetime=60.0,
        dark_event_rate=1.0 / 300.0,
        dark_recovery_rate=1.0 / 5.0,
        load_latency_mean=10.0,
        shuttle_step_time=0.5,
        lo_noise=NoiseSpec(
            white_fm=1.0e-14,
            random_walk_fm=2.0e-16,
            linear_drift=0.02,
            deterministic_offset=0.0,
        ),
        n_sites=n_sites,
    )

    return validate_config(species, sites, servo, sim)


# TOML serialization ---------------------------------------------------------

_SPECIES_KEYS = {"mass", "clock_wavelength", "secular_frequency", "clock_frequency", "planck"}
_SITE_KEYS = {
    "site_id",
    "contrast_A",
    "rabi_freq",
    "nbar",
    "bias_c",
    "bright_rate",
    "dark_rate",
    "site_offset",
    "lifetime_scale",
    "prep_error",
}
_SERVO_KEYS = {
    "gain1",
    "gain2",
    "fwhm",
    "probe_time",
    "side_time",
    "detect_time",
    "report_period",
    "presence_window",
    "presence_threshold",
    "side_order",
}
_SIM_KEYS = {
    "seed",
    "duration",
    "ion_lifetime",
    "dark_event_rate",
    "dark_recovery_rate",
    "load_latency_mean",
    "shuttle_step_time",
    "n_sites",
    "interlock_timeout",
}
_NOISE_KEYS = {"white_fm", "random_walk_fm", "linear_drift", "deterministic_offset"}


def _reject_unknown(mapping, allowed, section, violations):
    for key in mapping:
        if key not in allowed:
            violations.append((f"{section}.{key}", "unknown key"))


def _coerce_lifetime(value):
    # TOML has no infinity literal in common writer styles; accept the string.
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return math.inf
        raise ValueError(f"bad ion_lifetime value {value!r}")
    return float(value)


def load_config(path):
    """Read, parse, and validate a TOML configuration file.

    Sections: [species], [servo], [simulation] (with nested
    [simulation.lo_noise]) and one [[sites]] table per site. Unknown keys
    anywhere raise InvariantViolation.
    """
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)

    violations = []
    for section in raw:
        if section not in ("species", "servo", "simulation", "sites"):
            violations.append((section, "unknown section"))
    species_raw = raw.get("species", {})
    servo_raw = raw.get("servo", {})
    sim_raw = dict(raw.get("simulation", {}))
    noise_raw = sim_raw.pop("lo_noise", {})
    sites_raw = raw.get("sites", [])
    if not isinstance(sites_raw, list):
        raise InvariantViolation([("sites", "must be an array of tables ([[sites]])")])
    for name, section in (("species", species_raw), ("servo", servo_raw), ("simulation", sim_raw)):
        if not isinstance(section, dict):
            raise InvariantViolation([(name, "must be a table")])

    _reject_unknown(species_raw, _SPECIES_KEYS, "species", violations)
    _reject_unknown(servo_raw, _SERVO_KEYS, "servo", violations)
    _reject_unknown(sim_raw, _SIM_KEYS, "simulation", violations)
    _reject_unknown(noise_raw, _NOISE_KEYS, "simulation.lo_noise", violations)
    for i, site_raw in enumerate(sites_raw):
        _reject_unknown(site_raw, _SITE_KEYS, f"sites[{i}]", violations)
    if violations:
        raise InvariantViolation(violations)

    missing = []
    for section, keys, present in (
        ("species", ("mass", "clock_wavelength", "secular_frequency"), species_raw),
        ("servo", ("gain1", "gain2", "fwhm", "probe_time", "side_time", "detect_time", "report_period"), servo_raw),
        (
            "simulation",
            (
                "seed",
                "duration",
                "ion_lifetime",
                "dark_event_rate",
                "dark_recovery_rate",
                "load_latency_mean",
                "shuttle_step_time",
                "n_sites",
            ),
            sim_raw,
        ),
    ):
        for key in keys:
            if key not in present:
                missing.append((f"{section}.{key}", "required key missing"))
    for i, site_raw in enumerate(sites_raw):
        for key in ("site_id", "contrast_A", "rabi_freq", "nbar", "bias_c", "bright_rate", "dark_rate"):
            if key not in site_raw:
                missing.append((f"sites[{i}].{key}", "required key missing"))
    if missing:
        raise InvariantViolation(missing)

    species = SpeciesParams(
        mass=float(species_raw["mass"]),
        clock_wavelength=float(species_raw["clock_wavelength"]),
        secular_frequency=float(species_raw["secular_frequency"]),
        clock_frequency=(
            float(species_raw["clock_frequency"]) if "clock_frequency" in species_raw else None
        ),
        planck=float(species_raw.get("planck", PLANCK)),
    )
    sites = tuple(
        SiteModel(
            site_id=int(s["site_id"]),
            contrast_A=float(s["contrast_A"]),
            rabi_freq=float(s["rabi_freq"]),
            nbar=float(s["nbar"]),
            bias_c=float(s["bias_c"]),
            bright_rate=float(s["bright_rate"]),
            dark_rate=float(s["dark_rate"]),
            site_offset=float(s.get("site_offset", 0.0)),
            lifetime_scale=float(s.get("lifetime_scale", 1.0)),
            prep_error=float(s.get("prep_error", 0.0)),
        )
        for s in sites_raw
    )
    servo = ServoConfig(
        gain1=float(servo_raw["gain1"]),
        gain2=float(servo_raw["gain2"]),
        fwhm=float(servo_raw["fwhm"]),
        probe_time=float(servo_raw["probe_time"]),
        side_time=float(servo_raw["side_time"]),
        detect_time=float(servo_raw["detect_time"]),
        report_period=int(servo_raw["report_period"]),
        presence_window=int(servo_raw.get("presence_window", 8)),
        presence_threshold=float(servo_raw.get("presence_threshold", 0.25)),
        side_order=tuple(servo_raw.get("side_order", DEFAULT_SIDE_ORDER)),
    )
    try:
        lifetime = _coerce_lifetime(sim_raw["ion_lifetime"])
    except ValueError as exc:
        raise InvariantViolation([("simulation.ion_lifetime", str(exc))]) from exc
    sim = SimulationConfig(
        seed=int(sim_raw["seed"]),
        duration=float(sim_raw["duration"]),
        ion_lifetime=lifetime,
        dark_event_rate=float(sim_raw["dark_event_rate"]),
        dark_recovery_rate=float(sim_raw["dark_recovery_rate"]),
        load_latency_mean=float(sim_raw["load_latency_mean"]),
        shuttle_step_time=float(sim_raw["shuttle_step_time"]),
        lo_noise=NoiseSpec(
            white_fm=float(noise_raw.get("white_fm", 0.0)),
            random_walk_fm=float(noise_raw.get("random_walk_fm", 0.0)),
            linear_drift=float(noise_raw.get("linear_drift", 0.0)),
            deterministic_offset=float(noise_raw.get("deterministic_offset", 0.0)),
        ),
        n_sites=int(sim_raw["n_sites"]),
        interlock_timeout=float(sim_raw.get("interlock_timeout", 60.0)),
    )
    return validate_config(species, sites, servo, sim)


def config_to_dict(cfg):
    """Nested plain-dict form of a ValidatedConfig, suitable for JSON."""
    def scrub(value):
        if isinstance(value, float) and math.isinf(value):
            return "inf"
        return value

    species = {k: scrub(v) for k, v in dataclasses.asdict(cfg.species).items()}
    servo = dataclasses.asdict(cfg.servo)
    servo["side_order"] = list(servo["side_order"])
    sim = {k: scrub(v) for k, v in dataclasses.asdict(cfg.sim).items()}
    sim["lo_noise"] = dataclasses.asdict(cfg.sim.lo_noise)
    sites = [dataclasses.asdict(s) for s in cfg.sites]
    return {"species": species, "servo": servo, "simulation": sim, "sites": sites}


def config_hash(cfg):
    """Stable SHA-256 of the canonical JSON form of a configuration."""
    payload = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _toml_scalar(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value):
            return '"inf"'
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def dump_toml(cfg):
    """Render a ValidatedConfig as TOML text that load_config accepts."""
    d = config_to_dict(cfg)
    lines = []
    lines.append("[species]")
    for k, v in d["species"].items():
        lines.append(f"{k} = {_toml_scalar(v)}")
    lines.append("")
    lines.append("[servo]")
    for k, v in d["servo"].items():
        lines.append(f"{k} = {_toml_scalar(v)}")
    lines.append("")
    lines.append("[simulation]")
    for k, v in d["simulation"].items():
        if k == "lo_noise":
            continue
        lines.append(f"{k} = {_toml_scalar(v)}")
    lines.append("")
    lines.append("[simulation.lo_noise]")
    for k, v in d["simulation"]["lo_noise"].items():
        lines.append(f"{k} = {_toml_scalar(v)}")
    for site in d["sites"]:
        lines.append("")
        lines.append("[[sites]]")
        for k, v in site.items():
            lines.append(f"{k} = {_toml_scalar(v)}")
    return "\n".join(lines) + "\n"
