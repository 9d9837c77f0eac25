"""Simulator and analysis toolkit for a multi-ion optical clock.

The package models a single-species ion clock in which several ions sit in
separate trap sites and one laser interrogates them through an interleaved
pair of digital servos. It covers the physics of thermally dephased Rabi
interrogation, state detection, ion loss and reloading with shuttling, the
local oscillator noise budget, and the statistical analysis used to judge
clock performance (Allan deviation, quantum projection noise, lineshape
fits, and per-site frequency shifts).
"""

from clocksim.config import (
    InvariantViolation,
    NoiseSpec,
    ServoConfig,
    SimulationConfig,
    SiteModel,
    SpeciesParams,
    ValidatedConfig,
    config_hash,
    load_config,
    reference_preset,
    validate_config,
)
from clocksim.atom import (
    DetectionSample,
    IonState,
    ProbeContext,
    ThermalState,
    closed_form_onres,
    evolve_ion,
    fourier_fwhm,
    lamb_dicke,
    shelving_probability,
    simulate_detection,
)
from clocksim.oscillator import LocalOscillator, lo_offset
from clocksim.servo import (
    AllIonsLostTimeout,
    IntegratorState,
    PresenceTracker,
    ReportRecord,
    RunResult,
    SideOutcome,
    frequency_displacement,
    prescan_fwhm,
    probe_side,
    run_clock,
    update_integrator,
)
from clocksim.shuttle import (
    LoaderState,
    MovePlan,
    Occupancy,
    ShuttleManager,
    plan_refill,
    scenario_catalog,
)
from clocksim.analysis import (
    AdevCurve,
    FrequencySeries,
    InsufficientData,
    RabiFitResult,
    ShiftSample,
    first_order_shifts,
    fit_rabi,
    overlapping_adev,
    qpn_instability,
    single_integrator_instability,
)

__version__ = "0.1.0"

__all__ = [
    "AdevCurve",
    "AllIonsLostTimeout",
    "DetectionSample",
    "FrequencySeries",
    "InsufficientData",
    "IntegratorState",
    "InvariantViolation",
    "IonState",
    "LoaderState",
    "LocalOscillator",
    "MovePlan",
    "NoiseSpec",
    "Occupancy",
    "PresenceTracker",
    "ProbeContext",
    "RabiFitResult",
    "ReportRecord",
    "RunResult",
    "ServoConfig",
    "ShiftSample",
    "ShuttleManager",
    "SideOutcome",
    "SimulationConfig",
    "SiteModel",
    "SpeciesParams",
    "ThermalState",
    "ValidatedConfig",
    "closed_form_onres",
    "config_hash",
    "evolve_ion",
    "first_order_shifts",
    "fit_rabi",
    "fourier_fwhm",
    "frequency_displacement",
    "lamb_dicke",
    "lo_offset",
    "load_config",
    "overlapping_adev",
    "plan_refill",
    "prescan_fwhm",
    "probe_side",
    "qpn_instability",
    "reference_preset",
    "run_clock",
    "scenario_catalog",
    "shelving_probability",
    "simulate_detection",
    "single_integrator_instability",
    "update_integrator",
    "validate_config",
]
