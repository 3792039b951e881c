from .sim.model import SystemModel, PulseSchedule, drive_amplitude_for_photons
from .sim.lindblad import StateTrajectory, evolve
from .sim.correlation import CorrelationGrid, two_time_correlator
from .analysis.spectrum import PowerSpectrum, fit_triplet, power_spectrum, simulate_spectrum
from .analysis.energetics import EnergyLedger, energy_balance
from .scenarios import ScenarioFactory, get_scenario, run_scenario

__all__ = [
    "SystemModel",
    "PulseSchedule",
    "drive_amplitude_for_photons",
    "StateTrajectory",
    "evolve",
    "CorrelationGrid",
    "two_time_correlator",
    "PowerSpectrum",
    "fit_triplet",
    "power_spectrum",
    "simulate_spectrum",
    "EnergyLedger",
    "energy_balance",
    "ScenarioFactory",
    "get_scenario",
    "run_scenario",
]
