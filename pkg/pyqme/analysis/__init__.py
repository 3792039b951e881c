from .fitcore import FitModel, FitResult, least_squares
from .spectrum import PowerSpectrum, LorentzianTriplet, power_spectrum, fit_triplet, simulate_spectrum
from .calibration import CalibrationCurve, rabi_calibration, ramsey_photon_calibration
from .energetics import EnergyLedger, energy_balance, emitted_photons

__all__ = [
    "FitModel",
    "FitResult",
    "least_squares",
    "PowerSpectrum",
    "LorentzianTriplet",
    "power_spectrum",
    "fit_triplet",
    "simulate_spectrum",
    "CalibrationCurve",
    "rabi_calibration",
    "ramsey_photon_calibration",
    "EnergyLedger",
    "energy_balance",
    "emitted_photons",
]
