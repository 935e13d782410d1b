"""Plate-voltage pulse sequences and state-selective field ionization of an ensemble.

Time zero is the start of the fast pulse on P2. Field values returned here
are ``dV/dz`` along the spectrometer axis (positive when electrons are pushed
towards the detector), in V/m.

Peak classes
------------
``pre``        released during the slow ramp, before the fast pulse
``a``          released by the fast pulse while its field is still rising
``b``          released by the fast pulse near its peak field
``c``          survived the fast pulse, released by the final ramp
``unionized``  never reached threshold inside the window
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .core import RydbergState, classical_ionization_field
from .errors import InvalidArgument
from .fieldsolver import ApparatusGeometry, PotentialProfile
from .rng import map_blocks

CLASSES = ("pre", "a", "b", "c", "unionized")


@dataclass(frozen=True)
class Segment:
    t_start: float
    t_end: float
    V_start: float
    V_end: float

    def at(self, t):
        frac = (np.asarray(t, dtype=float) - self.t_start) / (self.t_end - self.t_start)
        return self.V_start + (self.V_end - self.V_start) * frac


@dataclass(frozen=True)
class VoltageWaveform:
    """Piecewise-linear voltage per electrode, plus named time markers.

    ``markers["pulse"]`` bounds the fast pulse and is used to classify
    ionization events.
    """

    segments: dict
    markers: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.segments:
            raise InvalidArgument("waveform needs at least one electrode")
        for name, segs in self.segments.items():
            if not segs:
                raise InvalidArgument(f"electrode {name} has no segments")
            for s in segs:
                if not s.t_end > s.t_start:
                    raise InvalidArgument(f"{name}: segment end must follow its start")
            for s0, s1 in zip(segs, segs[1:]):
                if s1.t_start != s0.t_end:
                    raise InvalidArgument(f"{name}: segments must be contiguous and ordered")

    @property
    def window(self) -> tuple[float, float]:
        lo = max(segs[0].t_start for segs in self.segments.values())
        hi = min(segs[-1].t_end for segs in self.segments.values())
        return lo, hi

    def breakpoints(self) -> np.ndarray:
        lo, hi = self.window
        ts = {lo, hi}
        for segs in self.segments.values():
            ts.update(s.t_start for s in segs)
            ts.update(s.t_end for s in segs)
        ts = np.array(sorted(ts))
        return ts[(ts >= lo) & (ts <= hi)]

    def _segment_index(self, segs, t):
        starts = np.array([s.t_start for s in segs])
        return np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(segs) - 1)

    def __call__(self, t) -> dict:
        """Voltages of every electrode at time(s) ``t``."""
        t_arr = np.asarray(t, dtype=float)
        lo, hi = self.window
        if np.any((t_arr < lo) | (t_arr > hi)):
            raise InvalidArgument(f"time outside waveform window [{lo:g}, {hi:g}] s")
        out = {}
        for name, segs in self.segments.items():
            k = self._segment_index(segs, t_arr)
            t0 = np.array([s.t_start for s in segs])[k]
            t1 = np.array([s.t_end for s in segs])[k]
            v0 = np.array([s.V_start for s in segs])[k]
            v1 = np.array([s.V_end for s in segs])[k]
            val = v0 + (v1 - v0) * (t_arr - t0) / (t1 - t0)
            out[name] = val.item() if val.ndim == 0 else val
        return out

    def interval_voltages(self):
        """Voltages at both ends of every interval between consecutive breakpoints.

        Evaluated on the segment active inside the interval, so voltage steps
        at a breakpoint are represented by the two adjoining intervals.
        """
        tb = self.breakpoints()
        ta, te = tb[:-1], tb[1:]
        mid = 0.5 * (ta + te)
        va, ve = {}, {}
        for name, segs in self.segments.items():
            k = self._segment_index(segs, mid)
            va[name] = np.array([segs[i].at(t) for i, t in zip(k, ta)])
            ve[name] = np.array([segs[i].at(t) for i, t in zip(k, te)])
        return ta, te, va, ve


def ramp_pulse_waveform(ramp: float = 1.2e-6, plateau: float = 1.3e-6, pulse_delay: float = 0.6e-6,
                  v_ramp: float = -115.0, v_final: float = -230.0, v_pulse: float = 10.0,
                  pulse_width: float = 30e-9, rise: float = 10e-9) -> VoltageWaveform:
    """Slow ramp on P1, fast pulse on P2 during the plateau, final ramp on P1.

    The pulse width is taken at half amplitude with equal rise and fall times.
    """
    t_ramp = -pulse_delay - ramp
    t_plat = -pulse_delay
    t_final = t_plat + plateau
    t_end = t_final + ramp
    # half-amplitude points sit mid-edge, so the fall starts one width after the rise starts
    fall_start = pulse_width
    p1 = [Segment(t_ramp, t_plat, 0.0, v_ramp), Segment(t_plat, t_final, v_ramp, v_ramp),
          Segment(t_final, t_end, v_ramp, v_final)]
    p2 = [Segment(t_ramp, 0.0, 0.0, 0.0), Segment(0.0, rise, 0.0, v_pulse),
          Segment(rise, fall_start, v_pulse, v_pulse), Segment(fall_start, fall_start + rise, v_pulse, 0.0),
          Segment(fall_start + rise, t_end, 0.0, 0.0)]
    return VoltageWaveform({"P1": p1, "P2": p2},
                           {"pulse": (0.0, fall_start + rise), "final_ramp": (t_final, t_end)})


PRESETS = {"ramp_pulse": ramp_pulse_waveform}


def write_waveform_csv(path, w: VoltageWaveform) -> None:
    buf = io.StringIO()
    for name, (t0, t1) in sorted(w.markers.items()):
        buf.write(f"# marker.{name} = {t0!r},{t1!r}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["electrode", "t_start", "t_end", "V_start", "V_end"])
    for name, segs in w.segments.items():
        for s in segs:
            writer.writerow([name, repr(s.t_start), repr(s.t_end), repr(s.V_start), repr(s.V_end)])
    Path(path).write_text(buf.getvalue())


def read_waveform_csv(path) -> VoltageWaveform:
    markers, segments = {}, {}
    lines = Path(path).read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("# marker."):
            key, _, val = line[len("# marker."):].partition("=")
            a, b = val.split(",")
            markers[key.strip()] = (float(a), float(b))
        elif line and not line.startswith("#"):
            body.append(line)
    for row in csv.DictReader(body):
        segments.setdefault(row["electrode"], []).append(
            Segment(float(row["t_start"]), float(row["t_end"]), float(row["V_start"]), float(row["V_end"])))
    return VoltageWaveform(segments, markers)


def load_waveform(spec: str) -> VoltageWaveform:
    """A preset name or a CSV path."""
    if spec in PRESETS:
        return PRESETS[spec]()
    return read_waveform_csv(spec)


# --- fields -----------------------------------------------------------------


@dataclass
class FieldModel:
    """Maps electrode voltages to the axial field and potential at the atoms.

    With ``units`` (unit-voltage profiles from the field solver) both follow
    by superposition; otherwise the ideal parallel-plate closed form is used.
    Electrodes missing from a waveform keep their static geometry voltage.
    """

    geometry: ApparatusGeometry = field(default_factory=ApparatusGeometry)
    units: dict | None = None
    strict: bool = False

    def __post_init__(self):
        if self.strict and self.units is None:
            raise InvalidArgument("strict field model needs solved unit profiles")

    def _volts(self, volts: dict, name: str):
        return volts[name] if name in volts else self.geometry.voltages[name]

    def field(self, volts: dict, z=None):
        z = self.geometry.source_position if z is None else z
        if self.units is None:
            return (np.asarray(self._volts(volts, "P2")) - self._volts(volts, "P1")) / self.geometry.plate_gap
        total = 0.0
        for name, prof in self.units.items():
            total = total - np.asarray(self._volts(volts, name)) * prof.field(z)
        return total

    def potential(self, volts: dict, z):
        if self.units is None:
            v1, v2 = np.asarray(self._volts(volts, "P1")), np.asarray(self._volts(volts, "P2"))
            return v1 + (v2 - v1) * np.asarray(z) / self.geometry.plate_gap
        return sum(np.asarray(self._volts(volts, n)) * prof(z) for n, prof in self.units.items())


def field_at(w: VoltageWaveform, t, model: FieldModel | None = None, z=None):
    """Axial field [V/m] at the atom position at time(s) ``t``."""
    model = FieldModel() if model is None else model
    return model.field(w(t), z)


@dataclass(frozen=True)
class FieldHistory:
    """|field| at the atom position as a polyline in time."""

    t: np.ndarray
    F: np.ndarray

    @classmethod
    def build(cls, w: VoltageWaveform, model: FieldModel, z=None) -> "FieldHistory":
        ta, te, va, ve = w.interval_voltages()
        fa, fe = np.asarray(model.field(va, z), float), np.asarray(model.field(ve, z), float)
        ts, fs = [], []
        for t0, t1, f0, f1 in zip(ta, te, fa, fe):
            if f0 * f1 < 0:
                tz = t0 + (t1 - t0) * f0 / (f0 - f1)
                ts += [t0, tz, tz, t1]
                fs += [abs(f0), 0.0, 0.0, abs(f1)]
            else:
                ts += [t0, t1]
                fs += [abs(f0), abs(f1)]
        return cls(np.array(ts), np.array(fs))

    def first_crossing(self, thresholds) -> np.ndarray:
        """Earliest time with |F| >= threshold; NaN if never reached."""
        thr = np.asarray(thresholds, dtype=float)
        # polyline points come in (start, end) pairs per piece
        a, b = self.F[0::2], self.F[1::2]
        ta, tb = self.t[0::2], self.t[1::2]
        reach = np.maximum.accumulate(np.maximum(a, b))
        k = np.searchsorted(reach, thr, side="left")
        out = np.full(thr.shape, np.nan)
        ok = k < reach.size
        kk = k[ok]
        fa, fb, t0, t1 = a[kk], b[kk], ta[kk], tb[kk]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(fa >= thr[ok], 0.0, (thr[ok] - fa) / (fb - fa))
        out[ok] = t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0)
        return out

    def max_between(self, t0: float, t1: float, inclusive_end: bool = True) -> float:
        sel = (self.t >= t0) & ((self.t <= t1) if inclusive_end else (self.t < t1))
        vals = list(self.F[sel])
        vals += list(np.interp([t0, t1], self.t, self.F)) if self.t[0] <= t0 <= self.t[-1] else []
        return float(max(vals)) if vals else 0.0


# --- threshold model --------------------------------------------------------


@dataclass(frozen=True)
class Branch:
    """One group of Stark states: population fraction and Gaussian threshold field."""

    label: str
    fraction: float
    mean_field: float
    sigma_field: float

    def __post_init__(self):
        if self.fraction < 0 or self.mean_field <= 0 or self.sigma_field < 0:
            raise InvalidArgument(f"invalid branch {self}")


# (label, fraction, threshold mean as multiple of the classical field, relative spread)
DEFAULT_BRANCHES = {
    54: [("blue", 0.25, 1.245, 0.005), ("red", 0.30, 1.300, 0.004), ("red_deep", 0.45, 1.59, 0.035)],
    53: [("blue", 0.25, 1.300, 0.005), ("red", 0.30, 1.340, 0.004), ("red_deep", 0.45, 1.56, 0.035)],
}


@dataclass(frozen=True)
class StarkBranchModel:
    """Branch lists per principal quantum number."""

    branches: dict

    def __post_init__(self):
        for n, brs in self.branches.items():
            total = sum(b.fraction for b in brs)
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                raise InvalidArgument(f"branch fractions for n={n} sum to {total}, not 1")

    @classmethod
    def default(cls, states=(RydbergState(54), RydbergState(53))) -> "StarkBranchModel":
        out = {}
        for st in states:
            table = DEFAULT_BRANCHES.get(st.n, DEFAULT_BRANCHES[54])
            f_cl = classical_ionization_field(st)
            out[st.n] = [Branch(lbl, frac, mult * f_cl, rel * mult * f_cl) for lbl, frac, mult, rel in table]
        return cls(out)

    def labels(self) -> list[str]:
        seen = []
        for brs in self.branches.values():
            seen += [b.label for b in brs if b.label not in seen]
        return seen

    def __getitem__(self, n: int) -> list[Branch]:
        try:
            return self.branches[n]
        except KeyError:
            raise InvalidArgument(f"no branch model for n={n}") from None


@dataclass(frozen=True)
class PulseClassifier:
    """Epoch boundaries and field levels that separate the peak classes."""

    pulse: tuple
    f_pre: float
    f_peak: float
    b_split: float = 0.5

    @classmethod
    def build(cls, w: VoltageWaveform, history: FieldHistory, b_split: float = 0.5) -> "PulseClassifier":
        if "pulse" not in w.markers:
            raise InvalidArgument("waveform has no 'pulse' marker")
        t0, t1 = w.markers["pulse"]
        f_pre = history.max_between(history.t[0], t0, inclusive_end=True)
        return cls((t0, t1), f_pre, history.max_between(t0, t1), b_split)

    @property
    def f_split(self) -> float:
        return self.f_pre + self.b_split * (self.f_peak - self.f_pre)

    def classify(self, t_release, threshold) -> np.ndarray:
        t0, t1 = self.pulse
        out = np.full(np.shape(t_release), "unionized", dtype=object)
        ok = ~np.isnan(t_release)
        out[ok & (t_release < t0)] = "pre"
        during = ok & (t_release >= t0) & (t_release <= t1)
        out[during & (threshold < self.f_split)] = "a"
        out[during & (threshold >= self.f_split)] = "b"
        out[ok & (t_release > t1)] = "c"
        return out

    def expected_fractions(self, branches: list[Branch], f_max: float) -> dict:
        """Class probabilities for one state from the Gaussian threshold CDFs."""

        def cdf(x, b):
            if b.sigma_field == 0:
                return float(b.mean_field <= x)
            return float(ndtr((x - b.mean_field) / b.sigma_field))

        lo_b = max(self.f_split, self.f_pre)
        res = dict.fromkeys(CLASSES, 0.0)
        for b in branches:
            p_pre, p_split, p_peak = cdf(self.f_pre, b), cdf(lo_b, b), cdf(self.f_peak, b)
            p_max = cdf(f_max, b)
            res["pre"] += b.fraction * p_pre
            res["a"] += b.fraction * max(p_split - p_pre, 0.0)
            res["b"] += b.fraction * max(p_peak - max(p_split, p_pre), 0.0)
            res["c"] += b.fraction * max(p_max - p_peak, 0.0)
            res["unionized"] += b.fraction * (1.0 - max(p_max, p_peak))
        return res


# --- ensemble and events ----------------------------------------------------


@dataclass(frozen=True)
class Ensemble:
    """Atoms with their Rydberg state (principal quantum number) and axial position [m]."""

    n: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        if self.n.shape != self.position.shape:
            raise InvalidArgument("state and position arrays must match")

    def __len__(self):
        return self.n.size

    @property
    def atom_id(self) -> np.ndarray:
        return np.arange(self.n.size)


def prepare_ensemble(positions, state: RydbergState, contamination: float = 0.0,
                     contaminant: RydbergState | None = None, spurious_b_fraction: float | None = None,
                     rng_seed: int = 0) -> Ensemble:
    """Assign a Rydberg state to every atom, mixing in laser-linewidth contamination.

    ``contamination`` is the spurious fraction of this ensemble's signal that
    shows up as class-b events, the way it is quoted experimentally. Atoms
    are switched to ``contaminant`` with probability
    ``contamination / spurious_b_fraction``, where ``spurious_b_fraction`` is
    the class-b yield of the contaminant state.
    """
    positions = np.asarray(positions, dtype=float)
    n = np.full(positions.shape, state.n, dtype=np.int64)
    if contamination < 0 or contamination > 1:
        raise InvalidArgument("contamination must lie in [0, 1]")
    if contamination > 0:
        if contaminant is None or not spurious_b_fraction:
            raise InvalidArgument("contamination needs a contaminant state and its class-b yield")
        p = contamination / spurious_b_fraction
        if p > 1:
            raise InvalidArgument(f"contamination {contamination} exceeds the contaminant class-b yield")

        def draw(rng, s, e):
            return rng.random(e - s) < p

        flip = np.concatenate(map_blocks(draw, positions.size, rng_seed, "contamination")) \
            if positions.size else np.zeros(0, bool)
        n[flip] = contaminant.n
    return Ensemble(n, positions)


@dataclass(frozen=True)
class IonizationEvent:
    atom_id: int
    release_time: float
    release_position: float
    release_potential: float
    branch: str
    peak_class: str


@dataclass
class EventTable:
    """Column store of ionization events, one row per atom, ordered by atom id."""

    atom_id: np.ndarray
    n: np.ndarray
    release_time: np.ndarray
    release_position: np.ndarray
    release_potential: np.ndarray
    threshold: np.ndarray
    branch: np.ndarray
    peak_class: np.ndarray

    def __len__(self):
        return self.atom_id.size

    def __iter__(self):
        for i in range(len(self)):
            yield IonizationEvent(int(self.atom_id[i]), float(self.release_time[i]),
                                  float(self.release_position[i]), float(self.release_potential[i]),
                                  str(self.branch[i]), str(self.peak_class[i]))

    def counts(self) -> dict:
        return {c: int(np.count_nonzero(self.peak_class == c)) for c in CLASSES}

    def select(self, mask) -> "EventTable":
        return EventTable(*(getattr(self, f)[mask] for f in self.__dataclass_fields__))


def ionization_events(ensemble: Ensemble, w: VoltageWaveform, model: StarkBranchModel, rng_seed: int,
                      fields: FieldModel | None = None, b_split: float = 0.5,
                      workers: int | None = None) -> EventTable:
    """Draw a Stark branch and threshold for every atom and find its release.

    The release time is the first instant the field at the atom reaches the
    drawn threshold. The release potential (which sets the electron energy)
    is the potential at the atom's position at that instant.
    """
    fields = FieldModel() if fields is None else fields
    history = FieldHistory.build(w, fields)
    classifier = PulseClassifier.build(w, history, b_split)
    labels = model.labels()
    n_atoms = len(ensemble)

    def draw(rng, s, e):
        ns = ensemble.n[s:e]
        u = rng.random(e - s)
        g = rng.standard_normal(e - s)
        branch = np.zeros(e - s, dtype=np.int64)
        thr = np.empty(e - s)
        for nval in np.unique(ns):
            sel = ns == nval
            brs = model[int(nval)]
            cum = np.cumsum([b.fraction for b in brs])
            k = np.minimum(np.searchsorted(cum, u[sel], side="right"), len(brs) - 1)
            mu = np.array([b.mean_field for b in brs])[k]
            sig = np.array([b.sigma_field for b in brs])[k]
            thr[sel] = np.maximum(mu + sig * g[sel], np.finfo(float).tiny)
            branch[sel] = np.array([labels.index(b.label) for b in brs])[k]
        return branch, thr

    parts = map_blocks(draw, n_atoms, rng_seed, "thresholds", workers=workers)
    branch = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.int64)
    thr = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    t_rel = history.first_crossing(thr)
    pot = np.full(n_atoms, np.nan)
    ok = ~np.isnan(t_rel)
    if ok.any():
        pot[ok] = fields.potential(w(t_rel[ok]), ensemble.position[ok])
    return EventTable(ensemble.atom_id, ensemble.n.copy(), t_rel, ensemble.position.copy(), pot, thr,
                      np.array(labels, dtype=object)[branch], classifier.classify(t_rel, thr))


def expected_class_fractions(state: RydbergState, w: VoltageWaveform, model: StarkBranchModel,
                             fields: FieldModel | None = None, b_split: float = 0.5) -> dict:
    fields = FieldModel() if fields is None else fields
    history = FieldHistory.build(w, fields)
    classifier = PulseClassifier.build(w, history, b_split)
    return classifier.expected_fractions(model[state.n], float(history.F.max()))


def selectivity(events_state1: EventTable, events_state0: EventTable) -> float:
    """Ratio of class-b counts, genuine over spurious.

    Returns ``inf`` when the spurious count is zero and ``nan`` when the
    genuine count is zero (undefined).
    """
    b1 = int(np.count_nonzero(events_state1.peak_class == "b"))
    b0 = int(np.count_nonzero(events_state0.peak_class == "b"))
    return ratio_from_counts(b1, b0)


def ratio_from_counts(b1: int, b0: int) -> float:
    if b1 == 0:
        return float("nan")
    if b0 == 0:
        return float("inf")
    return b1 / b0


def class_fraction(events: EventTable, cls: str = "b") -> float:
    """Share of the detected signal (all ionized atoms) in one peak class."""
    ionized = np.count_nonzero(events.peak_class != "unionized")
    return float(np.count_nonzero(events.peak_class == cls) / ionized) if ionized else float("nan")


def release_energy(events: EventTable, tube_potential: float) -> np.ndarray:
    """Kinetic energy [eV] at the drift-tube entrance: ``V_tube - V_release``."""
    return tube_potential - events.release_potential
