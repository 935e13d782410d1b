"""Synthetic time-of-flight spectra.

Atoms are drawn from a Gaussian production volume, mapped to arrival times
through the flight-time model (or a tabulated numeric flight), smeared by the
instrumental response and histogrammed. Three count modes exist:

``"events"``
    every electron is followed individually: jittered, kept with probability
    ``transmission * efficiency(U)`` and binned (integer counts).
``"expected"``
    every electron contributes its kept probability mass to each bin through
    the Gaussian CDF; no noise.
``"poisson"``
    Poisson draw on the ``"expected"`` histogram.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtr

from .constants import CONSTANTS, PhysicalConstants
from .core import FlightCalibration, analytic_tof
from .errors import ElectronReflected, InvalidArgument
from .fieldsolver import PotentialProfile, integrate_flight
from .pulses import EventTable
from .rng import block_rng, map_blocks

MODES = ("events", "expected", "poisson")


@dataclass(frozen=True)
class ProductionVolume:
    """Laser focus producing the Rydberg atoms.

    ``diameter`` is the 1/e intensity diameter [m]. With two-photon
    excitation the excitation probability goes as intensity squared, so the
    2-sigma width of the atom distribution is ``diameter / sqrt(2)``.
    """

    center: float
    diameter: float = 23e-6
    two_photon: bool = True

    def __post_init__(self):
        if not self.diameter > 0:
            raise InvalidArgument("laser diameter must be > 0")

    @property
    def width(self) -> float:
        return self.diameter / math.sqrt(2.0) if self.two_photon else self.diameter

    @classmethod
    def for_width(cls, center: float, width: float, two_photon: bool = True) -> "ProductionVolume":
        return cls(center, width * math.sqrt(2.0) if two_photon else width, two_photon)


@dataclass(frozen=True)
class DetectorModel:
    """Instrumental response and binning.

    Parameters
    ----------
    tau : float
        2-sigma Gaussian timing jitter [s].
    transmission : float
        Mesh transmission.
    bin_width : float
        Histogram bin width [s].
    rolloff_energy : float or None
        Midpoint [eV] of a logistic low-energy efficiency roll-off; ``None``
        keeps the efficiency flat at 1.
    rolloff_scale : float
        Logistic width [eV].
    """

    tau: float = 20e-9
    transmission: float = 0.95
    bin_width: float = 4e-9
    rolloff_energy: float | None = None
    rolloff_scale: float = 0.1

    def __post_init__(self):
        if self.tau < 0:
            raise InvalidArgument("tau must be >= 0")
        if not 0 <= self.transmission <= 1:
            raise InvalidArgument("transmission must lie in [0, 1]")
        if not self.bin_width > 0:
            raise InvalidArgument("bin width must be > 0")
        if not self.rolloff_scale > 0:
            raise InvalidArgument("roll-off scale must be > 0")

    def efficiency(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=float)
        if self.rolloff_energy is None:
            return np.ones_like(U)
        return 1.0 / (1.0 + np.exp(-(U - self.rolloff_energy) / self.rolloff_scale))


@dataclass
class TofSpectrum:
    """Histogram with uniform bin ``edges`` [s] and non-negative ``counts``."""

    edges: np.ndarray
    counts: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.counts = np.asarray(self.counts)
        if self.edges.ndim != 1 or self.edges.size < 2 or self.counts.shape != (self.edges.size - 1,):
            raise InvalidArgument("need n+1 edges for n bins")
        d = np.diff(self.edges)
        if np.any(d <= 0) or np.ptp(d) > 1e-6 * d.mean():
            raise InvalidArgument("bin edges must be strictly increasing and uniform")
        if np.any(self.counts < 0):
            raise InvalidArgument("counts must be >= 0")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def bin_width(self) -> float:
        return float((self.edges[-1] - self.edges[0]) / (self.edges.size - 1))

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def x_L(self) -> float:
        return float(self.metadata["x_L_m"])


def sample_ensemble(vol: ProductionVolume, T: float, n_atoms: int, rng_seed: int,
                    mass: float = CONSTANTS.m_Rb85, workers: int | None = None,
                    const: PhysicalConstants = CONSTANTS, key: tuple = ()) -> tuple[np.ndarray, np.ndarray]:
    """Axial positions [m] and 3-D Maxwell-Boltzmann velocities [m/s], shape (n,) and (n, 3)."""
    if n_atoms < 0:
        raise InvalidArgument("n_atoms must be >= 0")
    if T < 0:
        raise InvalidArgument("temperature must be >= 0")
    sx = vol.width / 2.0
    sv = math.sqrt(const.k_B * T / mass)

    def draw(rng, s, e):
        g = rng.standard_normal((e - s, 4))
        return vol.center + sx * g[:, 0], sv * g[:, 1:]

    parts = map_blocks(draw, n_atoms, rng_seed, "ensemble", *key, workers=workers)
    if not parts:
        return np.zeros(0), np.zeros((0, 3))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


class _NumericFlight:
    """Arrival time versus start position, tabulated with the numeric integrator."""

    def __init__(self, profile: PotentialProfile, lo: float, hi: float, const: PhysicalConstants,
                 n_nodes: int = 64):
        self.profile = profile
        self.const = const
        xs = np.linspace(lo, hi, n_nodes) if hi > lo else np.array([lo])
        ts = []
        for x in xs:
            try:
                ts.append(integrate_flight(float(x), profile, const=const)[0])
            except ElectronReflected:
                ts.append(np.nan)
        self.xs, self.ts = xs, np.array(ts)
        ok = ~np.isnan(self.ts)
        self._interp = PchipInterpolator(xs[ok], self.ts[ok], extrapolate=False) if ok.sum() >= 2 else None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self._interp is None:
            out = np.full(x.shape, np.nan)
            if self.xs.size == 1 and not np.isnan(self.ts[0]):
                out[x == self.xs[0]] = self.ts[0]
            return out
        return self._interp(x)

    def energy(self, x):
        return self.profile.tube_potential - self.profile(np.asarray(x, dtype=float))


def _flight_times(x, cal: FlightCalibration | None, profile: PotentialProfile | None, const):
    """Arrival times and tube energies [eV]; NaN where the electron cannot arrive."""
    x = np.asarray(x, dtype=float)
    if profile is not None:
        if x.size == 0:
            return np.zeros(0), np.zeros(0)
        flight = _NumericFlight(profile, float(x.min()), float(x.max()), const)
        return flight(x), flight.energy(x)
    U = cal.energy(x)
    t = np.full(x.shape, np.nan)
    ok = U > 0
    if ok.any():
        t[ok] = analytic_tof(x[ok], cal, const)
    return t, U


def time_window(t_lo: float, t_hi: float, bin_width: float, margin: float) -> np.ndarray:
    """Bin edges on the global grid ``k * bin_width`` covering ``[t_lo - margin, t_hi + margin]``."""
    k0 = math.floor((t_lo - margin) / bin_width)
    k1 = math.ceil((t_hi + margin) / bin_width)
    return np.arange(k0, max(k1, k0 + 1) + 1) * bin_width


def _histogram(t_mean, sigma, weight, edges, mode, rng):
    if mode == "events":
        keep = rng.random(t_mean.size) < weight
        t = t_mean[keep] + sigma * rng.standard_normal(int(keep.sum()))
        return np.histogram(t, edges)[0].astype(np.int64)
    if sigma == 0:
        # every electron lands exactly at its mean time
        k = np.searchsorted(edges, t_mean, side="right") - 1
        inside = (k >= 0) & (k < edges.size - 1)
        return np.bincount(k[inside], weights=weight[inside], minlength=edges.size - 1)
    out = np.zeros(edges.size - 1)
    for chunk in range(0, t_mean.size, 512):
        tm, wt = t_mean[chunk:chunk + 512], weight[chunk:chunk + 512]
        cdf = ndtr((edges[None, :] - tm[:, None]) / sigma)
        out += wt @ np.diff(cdf, axis=1)
    return out


def synthesize_spectrum(source, cal: FlightCalibration | None = None, det: DetectorModel = DetectorModel(),
                        rng_seed: int = 0, *, profile: PotentialProfile | None = None, mode: str = "poisson",
                        edges=None, velocities=None, drift_time: float = 0.0, tube_potential: float = -48.0,
                        metadata: dict | None = None, workers: int | None = None,
                        const: PhysicalConstants = CONSTANTS, key: tuple = ()) -> TofSpectrum:
    """Histogram of electron arrival times.

    Parameters
    ----------
    source : array_like or EventTable
        Atom positions [m] in the coordinate of ``cal`` (or of ``profile``),
        or ionization events. For events the arrival time is the release time
        plus the drift-tube flight at energy ``tube_potential - V_release``.
    cal, profile
        Flight model: closed form, or the numeric integrator on ``profile``
        (oracle mode). One of them is required.
    velocities : array_like, optional
        Atom velocities, shape (n, 3); atoms move along axis 0 for
        ``drift_time`` before ionization.
    edges : array_like, optional
        Bin edges; chosen around the arrivals when omitted.

    Electrons that cannot reach the detector (non-positive energy, reflection)
    are dropped and tallied in ``metadata["dropped"]``.
    """
    if mode not in MODES:
        raise InvalidArgument(f"mode must be one of {MODES}")
    if cal is None and profile is None:
        raise InvalidArgument("need a flight calibration or a potential profile")
    if isinstance(source, EventTable):
        if cal is None:
            raise InvalidArgument("event sources need a calibration for the tube length and offset")
        ok = ~np.isnan(source.release_time)
        U = np.where(ok, tube_potential - source.release_potential, np.nan)
        t_mean = np.full(len(source), np.nan)
        good = ok & (U > 0)
        t_mean[good] = source.release_time[good] + cal.L * np.sqrt(const.m_e / (2.0 * const.e * U[good])) \
            + cal.t_offset
        n_source = int(np.count_nonzero(ok))
    else:
        x = np.array(source, dtype=float, ndmin=1)
        if velocities is not None and drift_time:
            x = x + np.asarray(velocities, dtype=float)[:, 0] * drift_time
        t_mean, U = _flight_times(x, cal, profile, const)
        n_source = x.size
    good = ~np.isnan(t_mean)
    dropped = int(n_source - good.sum())
    t_mean, U = t_mean[good], U[good]
    weight = det.transmission * det.efficiency(U)
    sigma = det.tau / 2.0

    if edges is None:
        if t_mean.size:
            edges = time_window(float(t_mean.min()), float(t_mean.max()), det.bin_width, 4 * sigma + 5 * det.bin_width)
        else:
            edges = np.array([0.0, det.bin_width])
    edges = np.asarray(edges, dtype=float)

    def block(rng, s, e):
        return _histogram(t_mean[s:e], sigma, weight[s:e], edges, "events" if mode == "events" else "expected", rng)

    parts = map_blocks(block, t_mean.size, rng_seed, "arrivals", *key, workers=workers)
    counts = np.zeros(edges.size - 1, dtype=np.int64 if mode == "events" else float)
    for p in parts:  # fixed reduction order
        counts = counts + p
    if mode == "poisson":
        counts = block_rng(rng_seed, "noise", 0, *key).poisson(counts)
    meta = {"state": "", "seed": int(rng_seed), "polarity": 1, "mode": mode, "dropped": dropped,
            "counts_kind": "float" if mode == "expected" else "int"}
    meta.update(metadata or {})
    return TofSpectrum(edges, counts, meta)


@dataclass(frozen=True)
class SeriesConfig:
    """Apparatus and ensemble settings shared by every spectrum of a series."""

    cal: FlightCalibration = FlightCalibration(t_offset=13e-9)
    detector: DetectorModel = DetectorModel()
    diameter: float = 23e-6
    two_photon: bool = True
    temperature: float = 300e-6
    n_atoms: int = 20000
    drift_time: float = 0.0
    mode: str = "poisson"
    state: str = "54d"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def synthesize_series(lens_positions, config: SeriesConfig = SeriesConfig(), rng_seed: int = 0,
                      workers: int | None = None) -> list[TofSpectrum]:
    """One spectrum per lens position, all on the same bin grid."""
    lens_positions = [float(x) for x in lens_positions]
    if len(lens_positions) < 2:
        raise InvalidArgument("a series needs at least two lens positions")
    cal, det = config.cal, config.detector
    half = config.diameter * 3.0
    t_ends = analytic_tof(np.array([min(lens_positions) - half, max(lens_positions) + half]), cal)
    edges = time_window(float(t_ends.min()), float(t_ends.max()), det.bin_width, 2 * det.tau + 5 * det.bin_width)
    out = []
    for x_L in lens_positions:
        # the stream key depends on the position, so equal positions give equal spectra
        key = (zlib.crc32(repr(x_L).encode()),)
        vol = ProductionVolume(x_L, config.diameter, config.two_photon)
        pos, vel = sample_ensemble(vol, config.temperature, config.n_atoms, rng_seed, workers=workers, key=key)
        meta = {"x_L_m": x_L, "state": config.state, "config_hash": config.digest()}
        out.append(synthesize_spectrum(pos, cal, det, rng_seed, mode=config.mode, edges=edges, velocities=vel,
                                       drift_time=config.drift_time, metadata=meta, workers=workers, key=key))
    return out


def rebin(spec: TofSpectrum, factor: int) -> TofSpectrum:
    """Sum ``factor`` adjacent bins; trailing bins that do not fill a group are dropped."""
    if factor < 1:
        raise InvalidArgument("rebin factor must be >= 1")
    n = (spec.counts.size // factor) * factor
    counts = spec.counts[:n].reshape(-1, factor).sum(axis=1)
    return TofSpectrum(spec.edges[:n + 1:factor], counts, dict(spec.metadata))


def from_trace(edges, signal, negate: bool = True, metadata: dict | None = None) -> TofSpectrum:
    """Wrap a raw detector trace, flipping the sign of negative-going pulses."""
    signal = np.asarray(signal, dtype=float)
    counts = np.clip(-signal if negate else signal, 0.0, None)
    meta = {"polarity": -1 if negate else 1, "counts_kind": "float"}
    meta.update(metadata or {})
    return TofSpectrum(edges, counts, meta)


# --- CSV --------------------------------------------------------------------


def write_spectrum_csv(path, spec: TofSpectrum) -> None:
    meta = dict(spec.metadata)
    meta["t_end"] = float(spec.edges[-1])
    meta.setdefault("counts_kind", "int" if np.issubdtype(spec.counts.dtype, np.integer) else "float")
    lines = [f"# {k} = {json.dumps(v)}" for k, v in sorted(meta.items())]
    lines.append("t_s,counts")
    fmt = (lambda c: str(int(c))) if meta["counts_kind"] == "int" else repr
    lines += [f"{t!r},{fmt(c)}" for t, c in zip(spec.edges[:-1].tolist(), spec.counts.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_spectrum_csv(path) -> TofSpectrum:
    meta, t, c = {}, [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition("=")
            meta[k.strip()] = json.loads(v.strip())
        elif line and line != "t_s,counts":
            a, b = line.split(",")
            t.append(float(a))
            c.append(b)
    if "t_end" not in meta:
        raise InvalidArgument(f"{path}: missing t_end header")
    counts = np.array([int(v) for v in c], dtype=np.int64) if meta.get("counts_kind") == "int" \
        else np.array([float(v) for v in c])
    edges = np.array(t + [meta.pop("t_end")])
    return TofSpectrum(edges, counts, meta)


def write_series(directory, spectra: list[TofSpectrum], stem: str = "spectrum") -> Path:
    """Write each spectrum plus a manifest listing the files in order; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, spec in enumerate(spectra):
        name = f"{stem}_{i:03d}.csv"
        write_spectrum_csv(directory / name, spec)
        names.append(name)
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(names) + "\n")
    return manifest


def read_series(manifest) -> list[TofSpectrum]:
    manifest = Path(manifest)
    names = [s.strip() for s in manifest.read_text().splitlines() if s.strip() and not s.startswith("#")]
    if not names:
        raise InvalidArgument(f"{manifest}: empty manifest")
    return [read_spectrum_csv(manifest.parent / n) for n in names]
