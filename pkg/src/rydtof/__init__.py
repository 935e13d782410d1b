"""Position- and state-resolved field-ionization time-of-flight toolkit for cold Rydberg atoms."""

from .constants import CONSTANTS, PhysicalConstants
from .core import (
    FlightCalibration,
    RydbergState,
    WidthModel,
    analytic_tof,
    classical_ionization_field,
    combined_width,
    dipole_displacement,
    hop_time,
    position_from_tof,
    thermal_displacement,
    tof_slope,
)

__version__ = "0.1.0"

__all__ = [
    "CONSTANTS",
    "PhysicalConstants",
    "FlightCalibration",
    "RydbergState",
    "WidthModel",
    "analytic_tof",
    "classical_ionization_field",
    "combined_width",
    "dipole_displacement",
    "hop_time",
    "position_from_tof",
    "thermal_displacement",
    "tof_slope",
]
