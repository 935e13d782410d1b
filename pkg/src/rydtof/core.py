"""Closed-form physics: hopping time, classical ionization field, flight-time model.

Conventions
-----------
All quantities are SI. The flight-time model uses a signed effective field
``E`` and offset ``V0`` so that the electron kinetic energy at the entrance of
the drift tube, in eV, is ``U(x) = E*x + V0``. Peak widths are 2-sigma widths
of ``A*exp(-(x - x0)**2 / (2*sigma**2))`` throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import CONSTANTS, PhysicalConstants
from .errors import DomainError, InvalidArgument

#: additive flight-time offset for the parts of the path outside the tube
DEFAULT_T_OFFSET = 13e-9


@dataclass(frozen=True)
class RydbergState:
    n: int
    l_label: str = "d"
    quantum_defect: float = 0.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise InvalidArgument(f"principal quantum number must be an integer >= 1, got {self.n!r}")
        if self.quantum_defect < 0:
            raise InvalidArgument("quantum defect must be >= 0")
        if self.n_eff <= 0:
            raise InvalidArgument(f"effective quantum number must be > 0, got {self.n_eff}")

    @property
    def n_eff(self) -> float:
        return self.n - self.quantum_defect

    def __str__(self):
        return f"{self.n}{self.l_label}"


@dataclass(frozen=True)
class FlightCalibration:
    """Parameters of the drift-tube flight-time model.

    Attributes
    ----------
    L : float
        Drift tube length [m].
    E : float
        Effective field [V/m], signed.
    V0 : float
        Tube kinetic energy of an electron starting at ``x = 0`` [eV].
    t_offset : float
        Energy-independent time added for the flight outside the tube [s].
    """

    L: float = 0.40
    E: float = 5020.0
    V0: float = 0.5
    t_offset: float = 0.0

    def __post_init__(self):
        if not self.L > 0:
            raise InvalidArgument("flight tube length must be positive")
        if self.t_offset < 0:
            raise InvalidArgument("t_offset must be >= 0")
        if self.E == 0:
            raise InvalidArgument("effective field must be nonzero")

    def energy(self, x):
        """Tube kinetic energy ``E*x + V0`` [eV] at position(s) ``x``."""
        return self.E * np.asarray(x, dtype=float) + self.V0

    def valid(self, x) -> np.ndarray:
        return self.energy(x) > 0


@dataclass(frozen=True)
class WidthModel:
    """Production-volume width ``w`` [m] and instrumental time width ``tau`` [s], both 2-sigma."""

    w: float
    tau: float
    w_err: float = float("nan")
    tau_err: float = float("nan")

    def __post_init__(self):
        if self.w < 0 or self.tau < 0:
            raise InvalidArgument("widths must be non-negative")


def _scalar_or_array(value):
    return value.item() if isinstance(value, np.ndarray) and value.ndim == 0 else value


def hop_time(n: int, d: float, const: PhysicalConstants = CONSTANTS) -> float:
    """Back-and-forth excitation hopping time between two Rydberg atoms.

    Parameters
    ----------
    n : int
        Principal quantum number.
    d : float
        Interatomic distance [m].

    Returns
    -------
    float
        ``9*pi*d**3/n**4`` in atomic units, converted to seconds.
    """
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    if d < 0:
        raise InvalidArgument(f"distance must be >= 0, got {d}")
    d_au = d / const.a0
    return 9.0 * math.pi * d_au**3 / float(n) ** 4 * const.au_time


def classical_ionization_field(state: RydbergState, const: PhysicalConstants = CONSTANTS) -> float:
    """Classical saddle-point ionization field ``1/(16 n*^4)`` a.u., in V/m."""
    n_eff = state.n_eff
    if n_eff <= 0:
        raise InvalidArgument("effective quantum number must be positive")
    return const.au_field / (16.0 * n_eff**4)


def analytic_tof(x, cal: FlightCalibration, const: PhysicalConstants = CONSTANTS):
    """Arrival time [s] of an electron released at ``x``; vectorised over ``x``."""
    U = cal.energy(x)
    if np.any(~(U > 0)):
        raise DomainError("E*x + V0 must be > 0: electron cannot enter the flight tube")
    t = cal.L * np.sqrt(const.m_e / (2.0 * const.e * U)) + cal.t_offset
    return _scalar_or_array(t)


def energy_from_tof(t, cal: FlightCalibration, const: PhysicalConstants = CONSTANTS):
    """Tube kinetic energy [eV] that reproduces arrival time ``t``."""
    dt = np.asarray(t, dtype=float) - cal.t_offset
    if np.any(~(dt > 0)):
        raise DomainError("arrival time must exceed t_offset")
    return _scalar_or_array(cal.L**2 * const.m_e / (2.0 * const.e * dt**2))


def position_from_tof(t, cal: FlightCalibration, const: PhysicalConstants = CONSTANTS):
    """Inverse of :func:`analytic_tof`."""
    U = energy_from_tof(t, cal, const)
    return _scalar_or_array((np.asarray(U) - cal.V0) / cal.E)


def tof_slope(t, cal: FlightCalibration, const: PhysicalConstants = CONSTANTS):
    """|dx/dt| [m/s] of the inverse flight-time map at arrival time ``t``."""
    dt = np.asarray(t, dtype=float) - cal.t_offset
    if np.any(~(dt > 0)):
        raise DomainError("arrival time must exceed t_offset")
    return _scalar_or_array(const.m_e * cal.L**2 / (const.e * abs(cal.E) * dt**3))


def combined_width(slope, model: WidthModel):
    """Position-domain width from spatial and timing broadening added in quadrature."""
    slope = np.asarray(slope, dtype=float)
    if np.any(slope < 0):
        raise InvalidArgument("slope must be >= 0")
    return _scalar_or_array(np.hypot(model.w, slope * model.tau))


def mean_thermal_speed(T: float, mass: float, const: PhysicalConstants = CONSTANTS) -> float:
    """Maxwell-Boltzmann mean 3-D speed ``sqrt(8 k T / (pi m))``."""
    if T < 0 or mass <= 0:
        raise InvalidArgument("temperature must be >= 0 and mass > 0")
    return math.sqrt(8.0 * const.k_B * T / (math.pi * mass))


def thermal_displacement(T: float, mass: float, duration: float,
                         const: PhysicalConstants = CONSTANTS) -> float:
    if duration < 0:
        raise InvalidArgument("duration must be >= 0")
    return mean_thermal_speed(T, mass, const) * duration


def max_stark_dipole(n: int, const: PhysicalConstants = CONSTANTS) -> float:
    """Largest permanent dipole of the hydrogenic Stark manifold, ``(3/2) n^2 e a0``."""
    return 1.5 * n**2 * const.au_dipole


def dipole_displacement(dipole: float, gradient: float, mass: float, duration: float) -> float:
    """Displacement under the constant force ``dipole * gradient`` starting from rest."""
    if min(dipole, gradient, duration) < 0 or mass <= 0:
        raise InvalidArgument("dipole, gradient and duration must be >= 0, mass > 0")
    return 0.5 * dipole * gradient / mass * duration**2
