"""Axisymmetric electrostatics of the spectrometer and 1-D electron flight on axis.

The potential is relaxed on a uniform (z, r) grid with red-black successive
over-relaxation. Electrodes are rectangles in the (z, r) half plane held at
fixed voltage; the far end of the domain is the detector mesh (a full
electrode plane), the near end is a zero-gradient boundary and the outer
radius is either a grounded cylinder or zero-gradient.

Flight times are computed on the r = 0 slice of the solution. Inside every
grid cell the potential is linear, so the acceleration is constant and the
motion is propagated exactly cell by cell.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .constants import CONSTANTS, PhysicalConstants
from .core import FlightCalibration
from .errors import ConvergenceError, ElectronReflected, GeometryError, InvalidArgument

logger = logging.getLogger(__name__)

DEFAULT_VOLTAGES = {"P1": -115.0, "P2": 10.0, "tube": -48.0, "mesh": 90.0}


@dataclass(frozen=True)
class Electrode:
    name: str
    z_min: float
    z_max: float
    r_min: float
    r_max: float
    voltage: float


@dataclass(frozen=True)
class ApparatusGeometry:
    """Plates, drift tube and detector mesh along a common axis.

    The axis origin is the inner face of plate P1; electrons travel towards
    positive z. The atom cloud sits at ``source_position`` between the plates
    and the detector mesh lies ``total_flight`` beyond it. All lengths in m.
    """

    plate_gap: float = 0.025
    plate_diameter: float = 0.055
    hole_diameter: float = 0.014
    plate_thickness: float = 0.0015
    tube_length: float = 0.40
    tube_gap: float = 0.0085
    tube_radius: float = 0.010
    tube_wall: float = 0.0015
    total_flight: float = 0.45
    source_position: float = 0.0125
    voltages: dict = field(default_factory=lambda: dict(DEFAULT_VOLTAGES))
    outer_radius: float | None = None
    outer_boundary: str = "grounded"
    margin: float = 0.02
    include_tube: bool = True
    tube_end_grids: bool = True

    def __post_init__(self):
        lengths = dict(plate_gap=self.plate_gap, plate_diameter=self.plate_diameter,
                       plate_thickness=self.plate_thickness, tube_length=self.tube_length,
                       tube_radius=self.tube_radius, tube_wall=self.tube_wall,
                       total_flight=self.total_flight, margin=self.margin)
        for name, value in lengths.items():
            if not value > 0:
                raise GeometryError(f"{name} must be > 0, got {value!r}")
        if not 0 <= self.hole_diameter < self.plate_diameter:
            raise GeometryError("hole diameter must lie in [0, plate diameter)")
        if self.tube_gap < 0:
            raise GeometryError("tube_gap must be >= 0")
        if not self.tube_length < self.total_flight:
            raise GeometryError("tube_length must be shorter than total_flight")
        if not 0 < self.source_position < self.plate_gap:
            raise GeometryError("source must lie between the plates")
        if self.outer_boundary not in ("grounded", "neumann"):
            raise GeometryError(f"unknown outer boundary {self.outer_boundary!r}")
        if self.r_outer < self.plate_diameter / 2 - 1e-12:
            raise GeometryError("outer radius smaller than the plates")
        if self.include_tube and self.tube_radius + self.tube_wall >= self.r_outer:
            raise GeometryError("drift tube does not fit inside the outer boundary")
        missing = {"P1", "P2", "tube", "mesh"} - set(self.voltages)
        if missing:
            raise GeometryError(f"missing electrode voltages: {sorted(missing)}")
        if self.include_tube and self.tube_end >= self.detector_z:
            raise GeometryError("drift tube overlaps the detector mesh")

    @classmethod
    def parallel_plates(cls, v1: float = -115.0, v2: float = 10.0, gap: float = 0.025, **kw):
        """Hole-free plates spanning the whole domain radius with a zero-gradient rim."""
        volts = dict(DEFAULT_VOLTAGES, P1=v1, P2=v2)
        kw.setdefault("plate_diameter", 0.055)
        return cls(plate_gap=gap, hole_diameter=0.0, voltages=volts, outer_boundary="neumann",
                   outer_radius=kw["plate_diameter"] / 2, source_position=gap / 2, **kw)

    @property
    def r_outer(self) -> float:
        return self.outer_radius if self.outer_radius is not None else 1.5 * self.plate_diameter

    @property
    def tube_start(self) -> float:
        return self.plate_gap + self.plate_thickness + self.tube_gap

    @property
    def tube_end(self) -> float:
        return self.tube_start + self.tube_length

    @property
    def detector_z(self) -> float:
        return self.source_position + self.total_flight

    @property
    def mesh_position(self) -> float:
        return self.detector_z

    def electrodes(self) -> list[Electrode]:
        v = self.voltages
        hole, rp, t = self.hole_diameter / 2, self.plate_diameter / 2, self.plate_thickness
        out = [
            Electrode("P1", -t, 0.0, hole, rp, v["P1"]),
            Electrode("P2", self.plate_gap, self.plate_gap + t, hole, rp, v["P2"]),
        ]
        if self.include_tube:
            out.append(Electrode("tube", self.tube_start, self.tube_end,
                                 self.tube_radius, self.tube_radius + self.tube_wall, v["tube"]))
            if self.tube_end_grids:
                # grids across both apertures keep the tube interior field-free
                out.append(Electrode("tube", self.tube_start, self.tube_start, 0.0, self.tube_radius, v["tube"]))
                out.append(Electrode("tube", self.tube_end, self.tube_end, 0.0, self.tube_radius, v["tube"]))
        out.append(Electrode("mesh", self.detector_z, self.detector_z, 0.0, self.r_outer, v["mesh"]))
        return out

    def with_voltages(self, **volts) -> "ApparatusGeometry":
        return replace(self, voltages=dict(self.voltages, **volts))

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=repr)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class PotentialProfile:
    """On-axis potential ``V(z)`` on a uniform grid plus provenance metadata."""

    z: np.ndarray
    V: np.ndarray
    metadata: dict = field(default_factory=dict)
    grid2d: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        if self.z.ndim != 1 or self.z.shape != self.V.shape or self.z.size < 2:
            raise InvalidArgument("profile needs matching 1-D z and V arrays with >= 2 points")
        dz = np.diff(self.z)
        if np.any(dz <= 0):
            raise InvalidArgument("profile grid must be strictly increasing")
        if np.max(np.abs(dz - dz.mean())) > 1e-12 * max(1.0, np.max(np.abs(self.z))) + 1e-12 * dz.mean():
            raise InvalidArgument("profile grid must be uniform")
        if not np.all(np.isfinite(self.V)):
            raise InvalidArgument("profile potential must be finite")
        self.metadata.setdefault("grid_spacing", float(dz.mean()))
        self.metadata.setdefault("detector_z", float(self.z[-1]))

    @property
    def spacing(self) -> float:
        return float(self.metadata["grid_spacing"])

    def __call__(self, z):
        return np.interp(z, self.z, self.V)

    def field(self, z):
        """Axial field ``-dV/dz`` of the piecewise-linear potential [V/m]."""
        z = np.asarray(z, dtype=float)
        k = np.clip(np.searchsorted(self.z, z, side="right") - 1, 0, self.z.size - 2)
        return -(self.V[k + 1] - self.V[k]) / (self.z[k + 1] - self.z[k])

    @property
    def tube_potential(self) -> float:
        if "tube_potential" in self.metadata:
            return float(self.metadata["tube_potential"])
        raise InvalidArgument("profile carries no tube potential")


# --- relaxation -------------------------------------------------------------


def _cover(coords, lo, hi, eps):
    """Nodes inside [lo, hi]; a sheet thinner than one cell snaps to its nearest node."""
    m = (coords >= lo - eps) & (coords <= hi + eps)
    if not m.any() and coords[0] - eps <= 0.5 * (lo + hi) <= coords[-1] + eps:
        m[np.argmin(np.abs(coords - 0.5 * (lo + hi)))] = True
    return m


class _Grid:
    def __init__(self, geometry: ApparatusGeometry, h: float):
        self.geometry, self.h = geometry, h
        k0 = math.ceil((geometry.plate_thickness + geometry.margin) / h - 1e-9)
        k1 = int(round(geometry.detector_z / h))
        self.iz = np.arange(-k0, k1 + 1)
        self.z = self.iz * h
        self.nr = int(round(geometry.r_outer / h)) + 1
        self.r = np.arange(self.nr) * h
        nz = self.z.size
        self.fixed = np.zeros((nz, self.nr), dtype=bool)
        self.value = np.zeros((nz, self.nr))
        self.masks = {}
        eps = 1e-9 * h
        for el in geometry.electrodes():
            if el.name == "mesh":
                mz = np.zeros(nz, dtype=bool)
                mz[-1] = True
                m = np.broadcast_to(mz[:, None], (nz, self.nr)).copy()
            else:
                mz = _cover(self.z, el.z_min, el.z_max, eps)
                mr = _cover(self.r, el.r_min, el.r_max, eps)
                extent = max(el.z_max - el.z_min, el.r_max - el.r_min)
                if extent < 3 * h - eps:
                    raise GeometryError(f"electrode {el.name} spans fewer than 3 cells at {h:g} m")
                m = mz[:, None] & mr[None, :]
            self.masks[el.name] = self.masks.get(el.name, False) | m
            self.fixed |= m
            self.value[m] = el.voltage
        if geometry.outer_boundary == "grounded":
            rim = np.zeros_like(self.fixed)
            rim[:-1, -1] = True
            self.fixed |= rim
            self.value[rim] = 0.0
            self.masks["outer"] = rim

        j = np.arange(self.nr, dtype=float)
        with np.errstate(divide="ignore"):
            self.crp = np.where(j == 0, 4.0 / 6.0, (1 + 0.5 / j) / 4)
            self.crm = np.where(j == 0, 0.0, (1 - 0.5 / j) / 4)
        self.cz = np.where(j == 0, 1.0 / 6.0, 0.25)
        parity = (np.add.outer(np.arange(nz), np.arange(self.nr)) % 2).astype(bool)
        free = ~self.fixed
        self.colors = [(free & ~parity).astype(float), (free & parity).astype(float)]

    def stencil(self, V, out, buf):
        """Gauss-Seidel target of every node (axisymmetric 5-point stencil)."""
        zp, zm, rp, rm = buf
        zp[:-1] = V[1:]
        zp[-1] = V[-2]
        zm[1:] = V[:-1]
        zm[0] = V[1]
        rp[:, :-1] = V[:, 1:]
        rp[:, -1] = V[:, -2]
        rm[:, 1:] = V[:, :-1]
        rm[:, 0] = V[:, 1]
        np.add(zp, zm, out=out)
        out *= self.cz
        out += self.crp * rp
        out += self.crm * rm
        return out


@dataclass(frozen=True)
class SolverOptions:
    omega: float = 1.9
    max_iter: int = 50000
    coarse_to_fine: bool = True

    def __post_init__(self):
        if not 0 < self.omega < 2:
            raise InvalidArgument("over-relaxation factor must lie in (0, 2)")


def _relax(grid: _Grid, V: np.ndarray, tol_abs: float, opts: SolverOptions) -> tuple[int, float]:
    buf = [np.empty_like(V) for _ in range(4)]
    gs = np.empty_like(V)
    d = np.empty_like(V)
    for it in range(1, opts.max_iter + 1):
        upd = 0.0
        for color in grid.colors:
            grid.stencil(V, gs, buf)
            np.subtract(gs, V, out=d)
            d *= opts.omega
            d *= color
            V += d
            upd = max(upd, float(np.max(np.abs(d))))
        if upd < tol_abs:
            return it, upd
    raise ConvergenceError(f"SOR did not converge in {opts.max_iter} iterations (last update {upd:.3g} V)")


def _coarse_start(geometry, h, tolerance, opts, grid):
    """Interpolated solution from a grid twice as coarse, or None if that grid is invalid."""
    if not opts.coarse_to_fine or grid.nr < 24:
        return None
    try:
        coarse = _Grid(geometry, 2 * h)
    except GeometryError:
        return None
    Vc, _, _ = _solve_grid(geometry, coarse, tolerance, opts)
    interp = RegularGridInterpolator((coarse.z, coarse.r), Vc, bounds_error=False, fill_value=None)
    zz, rr = np.meshgrid(np.clip(grid.z, coarse.z[0], coarse.z[-1]),
                         np.clip(grid.r, 0, coarse.r[-1]), indexing="ij")
    return interp(np.stack([zz, rr], axis=-1))


def _solve_grid(geometry, grid, tolerance, opts):
    span = float(np.ptp(list(geometry.voltages.values()) + [0.0])) if geometry.outer_boundary == "grounded" \
        else float(np.ptp([el.voltage for el in geometry.electrodes()]))
    V = _coarse_start(geometry, grid.h, tolerance, opts, grid)
    if V is None:
        V = np.full_like(grid.value, float(np.mean(grid.value[grid.fixed])))
    V[grid.fixed] = grid.value[grid.fixed]
    if span == 0.0:
        return V, 0, 0.0
    iters, _ = _relax(grid, V, tolerance * span, opts)
    return V, iters, span


def solve_potential(geometry: ApparatusGeometry, grid_spacing: float = 5e-4, tolerance: float = 1e-7,
                    options: SolverOptions = SolverOptions()) -> PotentialProfile:
    """Relax the axisymmetric Laplace equation and return the on-axis potential.

    Parameters
    ----------
    geometry : ApparatusGeometry
    grid_spacing : float
        Uniform spacing in z and r [m].
    tolerance : float
        Convergence when the largest update in one sweep is below
        ``tolerance * voltage span``.

    Returns
    -------
    PotentialProfile
        r = 0 slice from the near domain edge to the detector mesh; the full
        (z, r) solution is kept in ``grid2d``.
    """
    if not grid_spacing > 0 or not tolerance > 0:
        raise InvalidArgument("grid_spacing and tolerance must be positive")
    grid = _Grid(geometry, grid_spacing)
    V, iters, span = _solve_grid(geometry, grid, tolerance, options)
    gs = grid.stencil(V, np.empty_like(V), [np.empty_like(V) for _ in range(4)])
    free = ~grid.fixed
    residual = float(np.max(np.abs(gs - V)[free])) / span if span and free.any() else 0.0
    logger.debug("SOR converged: %d iterations, residual %.3g", iters, residual)
    g = geometry
    meta = {
        "geometry_hash": g.digest(),
        "grid_spacing": grid_spacing,
        "residual": residual,
        "iterations": iters,
        "tolerance": tolerance,
        "omega": options.omega,
        "detector_z": float(grid.z[-1]),
        "source_window": (0.0, g.plate_gap),
        "source_position": g.source_position,
        "tube_potential": g.voltages["tube"],
        "tube_start": g.tube_start,
        "tube_end": g.tube_end,
    }
    meta.update({f"V_{k}": float(v) for k, v in g.voltages.items()})
    return PotentialProfile(grid.z.copy(), V[:, 0].copy(), meta, grid2d=V)


def unit_profiles(geometry: ApparatusGeometry, grid_spacing: float = 5e-4, tolerance: float = 1e-7,
                  options: SolverOptions = SolverOptions()) -> dict[str, PotentialProfile]:
    """One profile per electrode held at 1 V with every other electrode at 0 V.

    Any voltage configuration is the linear superposition of these solutions
    (the outer boundary is homogeneous).
    """
    out = {}
    for name in geometry.voltages:
        volts = {k: (1.0 if k == name else 0.0) for k in geometry.voltages}
        out[name] = solve_potential(replace(geometry, voltages=volts), grid_spacing, tolerance, options)
    return out


# --- flight -----------------------------------------------------------------


@dataclass(frozen=True)
class FlightTrace:
    t: np.ndarray
    z: np.ndarray
    v: np.ndarray


def integrate_flight(x0: float, profile: PotentialProfile, U0_extra: float = 0.0,
                     detector_z: float | None = None,
                     const: PhysicalConstants = CONSTANTS) -> tuple[float, FlightTrace]:
    """Time for an electron released at ``x0`` to reach the detector plane.

    The electron starts with kinetic energy ``U0_extra`` [J] directed towards
    the detector. Within each grid cell of the piecewise-linear potential
    the acceleration is constant, so the cell transit time is
    ``2*dz/(v_in + v_out)`` with speeds from energy conservation.

    Raises
    ------
    ElectronReflected
        If the kinetic energy reaches zero before the detector; carries the
        turning point.
    """
    if U0_extra < 0:
        raise InvalidArgument("initial kinetic energy must be >= 0")
    z_det = profile.metadata["detector_z"] if detector_z is None else detector_z
    if not profile.z[0] <= x0 < z_det <= profile.z[-1]:
        raise InvalidArgument(f"start {x0!r} and detector {z_det!r} must lie inside the profile, start first")
    inner = profile.z[(profile.z > x0) & (profile.z < z_det)]
    zs = np.concatenate(([x0], inner, [z_det]))
    Vs = profile(zs)
    v2 = 2.0 * U0_extra / const.m_e + 2.0 * const.e / const.m_e * (Vs - Vs[0])
    v2[0] = 2.0 * U0_extra / const.m_e
    bad = np.nonzero(v2[1:] <= 0)[0]
    if bad.size:
        k = bad[0] + 1
        # potential is linear between zs[k-1] and zs[k]; solve for zero kinetic energy
        V_turn = Vs[0] - U0_extra / const.e
        dV = Vs[k] - Vs[k - 1]
        frac = 0.0 if dV == 0 else np.clip((V_turn - Vs[k - 1]) / dV, 0.0, 1.0)
        raise ElectronReflected(float(zs[k - 1] + frac * (zs[k] - zs[k - 1])))
    v = np.sqrt(v2)
    dt = 2.0 * np.diff(zs) / (v[:-1] + v[1:])
    t = np.concatenate(([0.0], np.cumsum(dt)))
    return float(t[-1]), FlightTrace(t, zs, v)


def start_for_energy(profile: PotentialProfile, U: float,
                     const: PhysicalConstants = CONSTANTS) -> tuple[float, float]:
    """Start position and extra kinetic energy giving tube energy ``U`` [J].

    Looks for the point in the source window whose potential lies ``U/e``
    below the tube potential. Without such a point the electron starts at the
    end of the window nearest the tube with the missing energy as kinetic
    energy.
    """
    lo, hi = profile.metadata.get("source_window", (profile.z[0], profile.z[0]))
    target = profile.tube_potential - U / const.e
    sel = (profile.z >= lo) & (profile.z <= hi)
    zw, Vw = profile.z[sel], profile.V[sel]
    if zw.size >= 2:
        s = Vw - target
        cross = np.nonzero((s[:-1] <= 0) & (s[1:] > 0))[0]
        if cross.size:
            k = cross[-1]
            frac = -s[k] / (s[k + 1] - s[k])
            return float(zw[k] + frac * (zw[k + 1] - zw[k])), 0.0
    x0 = float(hi)
    extra = U - const.e * (profile.tube_potential - float(profile(x0)))
    if extra < -1e-12 * abs(U):
        raise InvalidArgument(f"no start position in the source window reaches tube energy {U / const.e:.4g} eV")
    return x0, max(extra, 0.0)


def fit_offset(profile: PotentialProfile, cal: FlightCalibration, energies,
               full_output: bool = False, const: PhysicalConstants = CONSTANTS):
    """Least-squares constant offset between numeric and drift-tube-only flight times.

    Parameters
    ----------
    energies : sequence of float
        Tube kinetic energies [J]; at least three.

    Returns
    -------
    float or (float, ndarray)
        The offset [s]; with ``full_output`` also the per-energy residuals.
    """
    energies = np.asarray(energies, dtype=float)
    if energies.size < 3:
        raise InvalidArgument("need at least three energies")
    diffs = []
    for U in energies:
        x0, extra = start_for_energy(profile, U, const)
        t_num, _ = integrate_flight(x0, profile, extra, const=const)
        t_tube = cal.L * math.sqrt(const.m_e / (2.0 * U))
        diffs.append(t_num - t_tube)
    diffs = np.asarray(diffs)
    offset = float(diffs.mean())
    return (offset, diffs - offset) if full_output else offset


# --- CSV --------------------------------------------------------------------


def _header_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def write_profile_csv(path, profile: PotentialProfile) -> None:
    lines = [f"# {k} = {json.dumps(v)}" for k, v in sorted(profile.metadata.items())]
    lines.append("z_m,V_volts")
    lines += [f"{z!r},{v!r}" for z, v in zip(profile.z.tolist(), profile.V.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_profile_csv(path) -> PotentialProfile:
    meta, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = _header_value(value.strip())
        elif line and not line.startswith("z_m"):
            z, v = line.split(",")
            rows.append((float(z), float(v)))
    if "source_window" in meta:
        meta["source_window"] = tuple(meta["source_window"])
    arr = np.array(rows)
    return PotentialProfile(arr[:, 0], arr[:, 1], meta)
