from .hilbert import HilbertSpec, DensityMatrix, Operator, product_state, rotation
from .model import PulseSchedule, SystemModel, drive_amplitude_for_photons
from .lindblad import StateTrajectory, evolve, propagate, liouvillian
from .correlation import CorrelationGrid, two_time_correlator

__all__ = [
    "HilbertSpec",
    "DensityMatrix",
    "Operator",
    "product_state",
    "rotation",
    "PulseSchedule",
    "SystemModel",
    "drive_amplitude_for_photons",
    "StateTrajectory",
    "evolve",
    "propagate",
    "liouvillian",
    "CorrelationGrid",
    "two_time_correlator",
]
