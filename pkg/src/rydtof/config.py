"""Run configuration: flat ``key = value`` text with dotted section prefixes.

Example::

    # comments start with '#'
    geometry.plate_gap_m = 0.025
    detector.tau_s = 20e-9
    seed = 7

Values are parsed by the type of the key's default; ``none`` clears an
optional value. Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FlightCalibration, RydbergState
from .errors import ConfigError, RydTofError
from .fieldsolver import ApparatusGeometry, SolverOptions
from .pulses import load_waveform
from .synth import MODES, DetectorModel, SeriesConfig

_OPT_FLOAT = "float|none"

# key -> (type, default)
SCHEMA: dict[str, tuple] = {
    "geometry.parallel_plates": (bool, False),
    "geometry.plate_gap_m": (float, 0.025),
    "geometry.plate_diameter_m": (float, 0.055),
    "geometry.hole_diameter_m": (float, 0.014),
    "geometry.plate_thickness_m": (float, 0.0015),
    "geometry.tube_length_m": (float, 0.40),
    "geometry.tube_gap_m": (float, 0.0085),
    "geometry.tube_radius_m": (float, 0.010),
    "geometry.tube_wall_m": (float, 0.0015),
    "geometry.total_flight_m": (float, 0.45),
    "geometry.source_position_m": (float, 0.0125),
    "geometry.outer_radius_m": (_OPT_FLOAT, None),
    "geometry.outer_boundary": (str, "grounded"),
    "geometry.margin_m": (float, 0.02),
    "geometry.include_tube": (bool, True),
    "geometry.tube_end_grids": (bool, True),
    "geometry.V_P1": (float, -115.0),
    "geometry.V_P2": (float, 10.0),
    "geometry.V_tube": (float, -48.0),
    "geometry.V_mesh": (float, 90.0),
    "solver.grid_spacing_m": (float, 5e-4),
    "solver.tolerance": (float, 1e-7),
    "solver.omega": (float, 1.9),
    "solver.max_iter": (int, 50000),
    "waveform.source": (str, "ramp_pulse"),
    "ensemble.n_atoms": (int, 20000),
    "ensemble.temperature_K": (float, 300e-6),
    "ensemble.lens_start_m": (float, 0.0),
    "ensemble.lens_step_m": (float, 20e-6),
    "ensemble.lens_count": (int, 16),
    "ensemble.laser_diameter_m": (float, 23e-6),
    "ensemble.two_photon": (bool, True),
    "ensemble.drift_time_s": (float, 0.0),
    "ensemble.state1_n": (int, 54),
    "ensemble.state0_n": (int, 53),
    "ensemble.contamination": (float, 0.015),
    "ensemble.selectivity_atoms": (int, 100000),
    "detector.tau_s": (float, 20e-9),
    "detector.transmission": (float, 0.95),
    "detector.bin_width_s": (float, 4e-9),
    "detector.rolloff_energy_eV": (_OPT_FLOAT, None),
    "detector.rolloff_scale_eV": (float, 0.1),
    "detector.mode": (str, "poisson"),
    "flight.L_m": (float, 0.40),
    "flight.E_V_per_m": (float, 5020.0),
    "flight.V0_V": (float, 0.5),
    "flight.t_offset_s": (float, 13e-9),
    "calibration.offset": (str, "fixed"),
    "calibration.t_offset_s": (float, 13e-9),
    "calibration.resolution_threshold_m": (float, 20e-6),
    "seed": (int, 0),
    "output": (str, "out"),
}

# where results go, not what they are; excluded from the digest
_PLACEMENT = {"output"}

# production-volume width 21 um (2-sigma) from a two-photon focus
PRESETS = {
    "paper": {"ensemble.laser_diameter_m": 21e-6 * math.sqrt(2.0)},
}


def _parse(key: str, text: str):
    kind, _ = SCHEMA[key]
    t = text.strip()
    try:
        if kind == _OPT_FLOAT:
            return None if t.lower() == "none" else float(t)
        if kind is bool:
            if t.lower() in ("true", "yes", "1", "on"):
                return True
            if t.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(t)
        if kind is int:
            return int(t)
        if kind is float:
            return float(t)
        return t
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: d for k, (_, d) in SCHEMA.items()})

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
        return cls.defaults().updated(PRESETS[name])

    def updated(self, changes: dict) -> "RunConfig":
        unknown = set(changes) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        return RunConfig({**self.values, **changes})

    def __getitem__(self, key: str):
        return self.values[key]

    def text(self, include_output: bool = True) -> str:
        keys = [k for k in SCHEMA if include_output or k not in _PLACEMENT]
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in keys)

    def digest(self) -> str:
        return hashlib.sha256(self.text(include_output=False).encode()).hexdigest()[:16]

    # --- domain objects -------------------------------------------------------

    def geometry(self) -> ApparatusGeometry:
        v = self.values
        volts = {"P1": v["geometry.V_P1"], "P2": v["geometry.V_P2"], "tube": v["geometry.V_tube"],
                 "mesh": v["geometry.V_mesh"]}
        common = dict(plate_thickness=v["geometry.plate_thickness_m"], tube_length=v["geometry.tube_length_m"],
                      tube_gap=v["geometry.tube_gap_m"], tube_radius=v["geometry.tube_radius_m"],
                      tube_wall=v["geometry.tube_wall_m"], total_flight=v["geometry.total_flight_m"],
                      margin=v["geometry.margin_m"], include_tube=v["geometry.include_tube"],
                      tube_end_grids=v["geometry.tube_end_grids"])
        if v["geometry.parallel_plates"]:
            g = ApparatusGeometry.parallel_plates(volts["P1"], volts["P2"], v["geometry.plate_gap_m"],
                                                  plate_diameter=v["geometry.plate_diameter_m"], **common)
            return g.with_voltages(tube=volts["tube"], mesh=volts["mesh"])
        return ApparatusGeometry(plate_gap=v["geometry.plate_gap_m"], plate_diameter=v["geometry.plate_diameter_m"],
                                 hole_diameter=v["geometry.hole_diameter_m"],
                                 source_position=v["geometry.source_position_m"], voltages=volts,
                                 outer_radius=v["geometry.outer_radius_m"],
                                 outer_boundary=v["geometry.outer_boundary"], **common)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(omega=self["solver.omega"], max_iter=self["solver.max_iter"])

    def flight(self) -> FlightCalibration:
        return FlightCalibration(L=self["flight.L_m"], E=self["flight.E_V_per_m"], V0=self["flight.V0_V"],
                                 t_offset=self["flight.t_offset_s"])

    def detector(self) -> DetectorModel:
        return DetectorModel(tau=self["detector.tau_s"], transmission=self["detector.transmission"],
                             bin_width=self["detector.bin_width_s"],
                             rolloff_energy=self["detector.rolloff_energy_eV"],
                             rolloff_scale=self["detector.rolloff_scale_eV"])

    def series_config(self) -> SeriesConfig:
        return SeriesConfig(cal=self.flight(), detector=self.detector(), diameter=self["ensemble.laser_diameter_m"],
                            two_photon=self["ensemble.two_photon"], temperature=self["ensemble.temperature_K"],
                            n_atoms=self["ensemble.n_atoms"], drift_time=self["ensemble.drift_time_s"],
                            mode=self["detector.mode"], state=str(self.states()[0]))

    def lens_positions(self) -> list[float]:
        n = self["ensemble.lens_count"]
        x0, dx = self["ensemble.lens_start_m"], self["ensemble.lens_step_m"]
        # round to 1 pm so positions print cleanly and are exact across runs
        return [round(x0 + i * dx, 12) for i in range(n)]

    def states(self) -> tuple[RydbergState, RydbergState]:
        return RydbergState(self["ensemble.state1_n"]), RydbergState(self["ensemble.state0_n"])

    def validate(self) -> "RunConfig":
        """Build every domain object once so bad values fail before any computation."""
        v = self.values
        if v["detector.mode"] not in MODES:
            raise ConfigError(f"detector.mode must be one of {MODES}")
        if v["calibration.offset"] not in ("fixed", "fitted"):
            raise ConfigError("calibration.offset must be 'fixed' or 'fitted'")
        for key in ("ensemble.n_atoms", "ensemble.selectivity_atoms", "solver.max_iter"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0")
        if v["ensemble.lens_count"] < 2:
            raise ConfigError("ensemble.lens_count must be >= 2")
        if not 0 <= v["ensemble.contamination"] <= 1:
            raise ConfigError("ensemble.contamination must lie in [0, 1]")
        if not v["solver.grid_spacing_m"] > 0 or not v["solver.tolerance"] > 0:
            raise ConfigError("solver grid spacing and tolerance must be > 0")
        try:
            self.geometry()
            self.solver_options()
            self.series_config()
            self.states()
            self.waveform()
            if not np.all(self.flight().valid(np.array(self.lens_positions()))):
                raise ConfigError("flight.E_V_per_m and flight.V0_V give non-positive energy at some lens position")
        except ConfigError:
            raise
        except (RydTofError, ValueError, OSError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def waveform(self):
        return load_waveform(self["waveform.source"])


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in changes:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        changes[key] = _parse(key, value)
    return (base or RunConfig.defaults()).updated(changes)


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the preset, then the file, then explicit overrides; validated."""
    cfg = RunConfig.preset(preset) if preset else RunConfig.defaults()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text, cfg)
    if overrides:
        cfg = cfg.updated(overrides)
    return cfg.validate()

