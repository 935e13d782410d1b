"""CODATA constants used throughout the package (values frozen from scipy.constants)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from scipy import constants as _sc

_pc = _sc.physical_constants

# 85Rb atomic mass in unified atomic mass units (AME2020)
RB85_MASS_U = 84.911789738


@dataclass(frozen=True)
class PhysicalConstants:
    m_e: float = _sc.m_e
    e: float = _sc.e
    k_B: float = _sc.k
    a0: float = _pc["Bohr radius"][0]
    au_time: float = _pc["atomic unit of time"][0]
    au_field: float = _pc["atomic unit of electric field"][0]
    au_dipole: float = _pc["atomic unit of electric dipole mom."][0]
    m_Rb85: float = RB85_MASS_U * _pc["atomic mass constant"][0]

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"constant {name} must be positive, got {value!r}")

    def as_header(self) -> list[str]:
        """Lines of ``key = value`` suitable for report headers."""
        return [f"const.{k} = {v!r}" for k, v in asdict(self).items()]


CONSTANTS = PhysicalConstants()
