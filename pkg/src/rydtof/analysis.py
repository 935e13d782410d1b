"""Peak finding, Gaussian fits, flight-time calibration and resolution analysis.

Peaks are fitted in the time domain and mapped to position afterwards; the
position width is the time width times ``|dx/dt|`` at the fitted center.
All widths are 2-sigma.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import minimize
from scipy.signal import find_peaks, peak_widths
from scipy.special import ndtr

from .core import (
    DEFAULT_T_OFFSET,
    FlightCalibration,
    WidthModel,
    analytic_tof,
    energy_from_tof,
    position_from_tof,
    tof_slope,
)
from .errors import (
    DegenerateFit,
    DomainError,
    IllConditioned,
    InvalidArgument,
    NoPeakFound,
    NonConvergence,
    Underdetermined,
)
from .lm import fit_with_restarts, levenberg_marquardt
from .rng import worker_count
from .synth import TofSpectrum

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class PeakGuess:
    center: float
    width: float
    amplitude: float


@dataclass
class GaussianPeak:
    """Fitted ``amplitude*exp(-(t-center)**2/(2*s**2)) + baseline`` with ``width = 2*s``.

    The amplitude is the peak height of the continuous density, in counts per bin.

    ``covariance`` is ordered (amplitude, center, s, baseline) in SI units.
    Position-domain fields stay NaN until :func:`map_to_position`.
    """

    center: float
    width: float
    amplitude: float
    baseline: float
    center_err: float
    width_err: float
    residual_norm: float
    chi2_red: float
    covariance: np.ndarray
    iterations: int = 0
    x_L: float = math.nan
    x_center: float = math.nan
    x_width: float = math.nan
    x_center_err: float = math.nan
    x_width_err: float = math.nan


def detect_peaks(spec: TofSpectrum, k: float = 5.0, smooth_bins: float = 1.0) -> list[PeakGuess]:
    """Local maxima above ``median + k * MAD`` of a lightly smoothed spectrum.

    A maximum must also stand ``k`` Poisson standard deviations above its
    surroundings (prominence), which suppresses counting-noise wiggles on
    top of a real peak. Guesses are returned in time order.
    """
    y = np.asarray(spec.counts, dtype=float)
    if y.size == 0:
        raise NoPeakFound("empty spectrum")
    ys = gaussian_filter1d(y, smooth_bins, mode="nearest") if smooth_bins > 0 else y
    med = float(np.median(ys))
    mad = float(np.median(np.abs(ys - med)))
    spread = MAD_TO_SIGMA * mad if mad > 0 else math.sqrt(max(med, 1.0))
    floor = med + k * spread
    idx, props = find_peaks(ys, height=floor, prominence=max(k * spread, 1e-300))
    if idx.size:
        # Gaussian smoothing of white noise shrinks its std by (2 sqrt(pi) s)^-1/2
        gain = (2.0 * math.sqrt(math.pi) * smooth_bins) ** -0.5 if smooth_bins > 0 else 1.0
        idx = idx[props["prominences"] >= k * gain * np.sqrt(np.maximum(ys[idx], 1.0))]
    if idx.size == 0:
        raise NoPeakFound(f"no maximum above the noise floor {floor:.4g}")
    fwhm = peak_widths(ys, idx, rel_height=0.5)[0]
    bw = spec.bin_width
    c = spec.centers
    return [PeakGuess(float(c[i]), float(2 * max(f, 1.0) * FWHM_TO_SIGMA * bw), float(ys[i] - med))
            for i, f in zip(idx, fwhm)]


_SQRT2PI = math.sqrt(2.0 * math.pi)


def _gauss_model(p, lo, hi):
    """Gaussian of peak height ``A`` integrated over bins ``[lo, hi]`` on the fit axis."""
    A, mu, s, b = p
    zp, zm = (hi - mu) / s, (lo - mu) / s
    D = ndtr(zp) - ndtr(zm)
    return A * _SQRT2PI * s * D + b, (zp, zm, D)


def _gauss_res(p, lo, hi, y, sy):
    return (_gauss_model(p, lo, hi)[0] - y) / sy


def _gauss_jac(p, lo, hi, y, sy):
    A, mu, s, b = p
    _, (zp, zm, D) = _gauss_model(p, lo, hi)
    fp, fm = np.exp(-0.5 * zp * zp) / _SQRT2PI, np.exp(-0.5 * zm * zm) / _SQRT2PI
    J = np.column_stack([_SQRT2PI * s * D, -A * _SQRT2PI * (fp - fm),
                         A * _SQRT2PI * (D - (zp * fp - zm * fm)), np.ones_like(lo)])
    return J / sy[:, None]


class _FitAxis:
    """Map between arrival time and the dimensionless axis the Gaussian lives on.

    Without an offset the axis is time in bins from ``tg``. With an offset it
    is ``(t - t_offset)**-2`` (proportional to release energy, hence affine in
    position), scaled to read in bins near ``tg``.
    """

    def __init__(self, tg: float, bw: float, t_offset: float | None):
        self.tg, self.bw, self.t_off = tg, bw, t_offset
        if t_offset is not None:
            self.a = tg - t_offset
            if self.a <= 0:
                raise DomainError("peak guess earlier than the flight-time offset")

    def valid(self, t):
        return np.ones_like(t, dtype=bool) if self.t_off is None else t > self.t_off

    def u(self, t):
        if self.t_off is None:
            return (t - self.tg) / self.bw
        return (1.0 - (self.a / (t - self.t_off)) ** 2) * self.a / (2.0 * self.bw)

    def _r(self, u):
        r = 1.0 - 2.0 * self.bw * u / self.a
        if r <= 0:
            raise DegenerateFit("fitted center lies beyond the energy axis")
        return r

    def t(self, u):
        """Time at ``u``, ``dt/du`` and ``d2t/du2``."""
        if self.t_off is None:
            return self.tg + u * self.bw, self.bw, 0.0
        r = self._r(u)
        return (self.t_off + self.a / math.sqrt(r), self.bw * r ** -1.5,
                3.0 * self.bw ** 2 * r ** -2.5 / self.a)


def fit_gaussian(spec: TofSpectrum, guess: PeakGuess, window: float = 3.0, max_iter: int = 200,
                 t_offset: float | None = None) -> GaussianPeak:
    """Weighted least-squares Gaussian plus constant baseline around ``guess``.

    The model integrates the Gaussian over each bin, so widths carry no
    binning bias. With ``t_offset`` given, the Gaussian is taken in
    ``(t - t_offset)**-2`` instead of ``t``: a Gaussian source in position
    then fits exactly despite the skew of the time map. The reported center
    is the time of the Gaussian's maximum and the width is ``2*sigma``
    mapped by the local ``dt/du``.

    The fit uses bins within ``window`` guessed (2-sigma) widths of the
    guessed center. Weights are ``sqrt(max(y, 1))`` on a first pass and the
    square root of that pass's model on the final one. The covariance
    is scaled by the reduced chi-square and expressed in
    ``(amplitude, center, sigma_t, baseline)``.

    Raises
    ------
    DegenerateFit
        If the fitted sigma is below one bin.
    NonConvergence
        If the optimizer fails from the guess and from the jittered restarts.
    """
    if not spec.edges[0] <= guess.center <= spec.edges[-1]:
        raise InvalidArgument("guess lies outside the spectrum")
    bw = spec.bin_width
    axis = _FitAxis(float(guess.center), bw, t_offset)
    edges = np.asarray(spec.edges, dtype=float)
    t = spec.centers
    sel = (np.abs(t - guess.center) <= window * max(guess.width, 2 * bw)) & axis.valid(edges[:-1])
    if np.count_nonzero(sel) < 6:
        raise DegenerateFit("fewer than six bins in the fit window")
    lo, hi = axis.u(edges[:-1][sel]), axis.u(edges[1:][sel])
    y = np.asarray(spec.counts, dtype=float)[sel]
    sy = np.sqrt(np.maximum(y, 1.0))
    base0 = float(min(y[0], y[-1]))
    p0 = [max(guess.amplitude, float(y.max()) - base0, 1e-12), 0.0, max(guess.width / 2.0 / bw, 1.0), base0]
    res = fit_with_restarts(_gauss_res, _gauss_jac, p0, (lo, hi, y, sy), max_iter=max_iter)
    # refit with model-based weights; observed-count weights pull widths low
    sy = np.sqrt(np.maximum(_gauss_model(res.x, lo, hi)[0], 1.0))
    res = fit_with_restarts(_gauss_res, _gauss_jac, res.x, (lo, hi, y, sy), max_iter=max_iter)
    A, mu, s, b = res.x
    s = abs(s)
    if s < 1.0:
        raise DegenerateFit(f"fitted sigma {s:.3g} bins is below one bin")
    tc, g, dg = axis.t(mu)
    dof = lo.size - 4
    chi2 = 2.0 * res.cost
    cov = res.covariance(scale=False) * (chi2 / dof if dof > 0 else np.nan)
    G = np.array([[1.0, 0, 0, 0], [0, g, 0, 0], [0, s * dg, g, 0], [0, 0, 0, 1.0]])
    cov = G @ cov @ G.T
    return GaussianPeak(center=float(tc), width=float(2.0 * s * g), amplitude=float(A), baseline=float(b),
                        center_err=float(math.sqrt(max(cov[1, 1], 0.0))),
                        width_err=float(2.0 * math.sqrt(max(cov[2, 2], 0.0))),
                        residual_norm=float(math.sqrt(chi2)), chi2_red=chi2 / dof if dof > 0 else math.nan,
                        covariance=cov, iterations=res.iterations,
                        x_L=float(spec.metadata.get("x_L_m", math.nan)))


def map_to_position(peak: GaussianPeak, cal: FlightCalibration) -> GaussianPeak:
    """Fill the position-domain fields using the exact Jacobian ``|dx/dt|``."""
    slope = tof_slope(peak.center, cal)
    return replace(peak, x_center=float(position_from_tof(peak.center, cal)), x_width=float(slope * peak.width),
                   x_center_err=float(slope * peak.center_err), x_width_err=float(slope * peak.width_err))


def fit_spectrum(spec: TofSpectrum, **kw) -> GaussianPeak:
    """Fit the strongest peak of a spectrum; keywords go to :func:`fit_gaussian`."""
    guesses = detect_peaks(spec)
    return fit_gaussian(spec, max(guesses, key=lambda g: g.amplitude), **kw)


def fit_series(series: list, workers: int | None = None, t_offset: float | None = None) -> list[GaussianPeak]:
    """Fit every spectrum; independent fits may run in a thread pool."""
    fit = partial(fit_spectrum, t_offset=t_offset)
    nw = worker_count(workers)
    if nw > 1 and len(series) > 1:
        with ThreadPoolExecutor(nw) as pool:
            return list(pool.map(fit, series))
    return [fit(s) for s in series]


# --- calibration ------------------------------------------------------------


@dataclass(frozen=True)
class LinearityResult:
    slope: float
    intercept: float
    rms: float
    slope_err: float
    intercept_err: float
    n: int

    @property
    def deviation(self) -> float:
        return self.slope - 1.0


@dataclass
class CalibrationResult:
    cal: FlightCalibration
    E_err: float
    V0_err: float
    t_offset_err: float
    offset_source: str
    peaks: list
    x_L: np.ndarray
    x_tof: np.ndarray
    covariance: np.ndarray
    iterations: int
    width_model: WidthModel | None = None
    linearity: LinearityResult | None = None
    resolution: "ResolutionReport | None" = None
    inputs: dict = field(default_factory=dict)

    @property
    def residuals(self) -> np.ndarray:
        return self.x_tof - self.x_L

    @property
    def residual_rms(self) -> float:
        return float(np.sqrt(np.mean(self.residuals**2)))


def _pos_res(p, t, x, L, t_off_fixed, scale):
    E, V0 = p[0] * scale[0], p[1] * scale[1]
    t_off = p[2] * scale[2] if p.size == 3 else t_off_fixed
    cal_t = t - t_off
    K = _K(L)
    return ((K / cal_t**2 - V0) / E - x) / 1e-6


def _pos_jac(p, t, x, L, t_off_fixed, scale):
    E, V0 = p[0] * scale[0], p[1] * scale[1]
    t_off = p[2] * scale[2] if p.size == 3 else t_off_fixed
    dt = t - t_off
    K = _K(L)
    xm = (K / dt**2 - V0) / E
    cols = [-xm / E * scale[0], -np.ones_like(t) / E * scale[1]]
    if p.size == 3:
        cols.append(2.0 * K / (E * dt**3) * scale[2])
    return np.column_stack(cols) / 1e-6


def _K(L: float) -> float:
    """``L^2 m_e / (2 e)``: tube energy [eV] times the squared drift time."""
    return float(energy_from_tof(1.0, FlightCalibration(L=L)))


def _fit_centers(peaks, x, L, offset_source, t_offset):
    """Least-squares ``(E, V0[, t_offset])`` from peak centers; returns values, covariance, iterations."""
    t = np.array([p.center for p in peaks])
    # linear start: tube energy is affine in position
    if np.any(t <= t_offset):
        raise DomainError("peak earlier than the flight-time offset")
    U = _K(L) / (t - t_offset) ** 2
    E0, V00 = np.polyfit(x, U, 1)
    scale = np.array([1e3, 1.0, 1e-9])
    p0 = [E0 / scale[0], V00]
    if offset_source == "fitted":
        p0.append(t_offset / scale[2])
    res = fit_with_restarts(_pos_res, _pos_jac, p0, (t, x, L, t_offset, scale))
    k = res.x.size
    return res.x * scale[:k], res.covariance() * np.outer(scale[:k], scale[:k]), res.iterations


def calibrate(series: list, step: float | None = None, offset_source: str = "fixed",
              t_offset: float = DEFAULT_T_OFFSET, L: float = 0.40, lens_positions=None,
              workers: int | None = None) -> CalibrationResult:
    """Fit the flight-time model to the peak centers of a lens-position series.

    Minimises the squared differences between the positions inferred from
    the fitted arrival times and the lens positions over ``(E, V0)``, plus
    ``t_offset`` when ``offset_source == "fitted"``. Lens positions come from
    ``lens_positions``, else from each spectrum's ``x_L_m`` metadata, else
    from ``i * step``.

    A free origin for the lens scale is not fitted: it is exactly degenerate
    with ``V0`` (only ``V0 + E*x0`` enters), so the recorded lens positions
    fix it.
    """
    if offset_source not in ("fixed", "fitted"):
        raise InvalidArgument("offset_source must be 'fixed' or 'fitted'")
    if len(series) < 4:
        raise Underdetermined(f"calibration needs at least 4 spectra, got {len(series)}")
    if lens_positions is not None:
        x = np.asarray(lens_positions, dtype=float)
    elif all("x_L_m" in s.metadata for s in series):
        x = np.array([s.x_L for s in series])
    elif step is not None:
        x = np.arange(len(series)) * float(step)
    else:
        raise InvalidArgument("lens positions unknown: give lens_positions, step, or x_L_m metadata")
    if x.size != len(series):
        raise InvalidArgument("one lens position per spectrum is required")
    if np.unique(x).size < 4:
        raise Underdetermined("need at least 4 distinct lens positions")

    peaks = fit_series(series, workers, t_offset)
    pfit, cov, iters = _fit_centers(peaks, x, L, offset_source, t_offset)
    if offset_source == "fitted":
        # peak shapes depend weakly on the offset; refit them until it settles
        for _ in range(5):
            prev = pfit[2]
            if not prev > 0:
                break
            peaks = fit_series(series, workers, float(prev))
            pfit, cov, iters = _fit_centers(peaks, x, L, offset_source, t_offset)
            if abs(pfit[2] - prev) <= 1e-14:
                break
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    t_off = float(pfit[2]) if offset_source == "fitted" else t_offset
    if t_off < 0:
        raise NonConvergence(f"fitted offset {t_off:.3g} s is negative")
    cal = FlightCalibration(L=L, E=float(pfit[0]), V0=float(pfit[1]), t_offset=t_off)
    mapped = [replace(map_to_position(p, cal), x_L=float(xi)) for p, xi in zip(peaks, x)]
    return CalibrationResult(cal=cal, E_err=float(err[0]), V0_err=float(err[1]),
                             t_offset_err=float(err[2]) if offset_source == "fitted" else 0.0,
                             offset_source=offset_source, peaks=mapped, x_L=x,
                             x_tof=np.array([p.x_center for p in mapped]), covariance=cov,
                             iterations=iters)


def apply_calibration(series: list, cal: FlightCalibration, offset_source: str = "fixed",
                      lens_positions=None, workers: int | None = None) -> CalibrationResult:
    """Fit the peaks and map them through an existing calibration (no refit)."""
    x = np.asarray(lens_positions if lens_positions is not None else [s.x_L for s in series], dtype=float)
    peaks = [replace(map_to_position(p, cal), x_L=float(xi)) for p, xi in zip(fit_series(series, workers, cal.t_offset), x)]
    return CalibrationResult(cal=cal, E_err=math.nan, V0_err=math.nan, t_offset_err=math.nan,
                             offset_source=offset_source, peaks=peaks, x_L=x,
                             x_tof=np.array([p.x_center for p in peaks]), covariance=np.full((2, 2), np.nan),
                             iterations=0)


# --- widths -----------------------------------------------------------------


def _width_res(p, s2, dx, sig):
    return (np.sqrt(p[0] + s2 * p[1]) - dx) / sig


def _width_jac(p, s2, dx, sig):
    d = np.sqrt(p[0] + s2 * p[1])
    return np.column_stack([0.5 / d, 0.5 * s2 / d]) / sig[:, None]


def _root_err(v: float, var: float) -> float:
    """Uncertainty of ``sqrt(v)`` from that of ``v``; finite at ``v = 0``."""
    v = max(v, 0.0)
    return math.sqrt(v + math.sqrt(max(var, 0.0))) - math.sqrt(v)


def decompose_width(widths, slopes=None, errors=None, min_leverage: float = 0.10) -> WidthModel:
    """Split position widths into production-volume and timing parts.

    Fits ``dx_i = sqrt(w**2 + slope_i**2 * tau**2)``. The fit runs in the
    squared widths ``(w**2, tau**2)``, where the model is smooth through
    ``tau = 0``; uncertainties follow from the covariance of those.

    Parameters
    ----------
    widths : CalibrationResult or array_like
        A calibration result (widths and slopes taken from its peaks) or the
        position widths [m].
    slopes : array_like, optional
        ``|dx/dt|`` [m/s] per width; required with plain widths.
    errors : array_like, optional
        Width uncertainties used as weights.

    Raises
    ------
    IllConditioned
        If all slopes lie within ``min_leverage`` of each other.
    """
    if isinstance(widths, CalibrationResult):
        res = widths
        widths = np.array([p.x_width for p in res.peaks])
        slopes = np.array([tof_slope(p.center, res.cal) for p in res.peaks])
        errors = np.array([p.x_width_err for p in res.peaks])
    dx = np.asarray(widths, dtype=float)
    if slopes is None:
        raise InvalidArgument("slopes are required")
    s = np.asarray(slopes, dtype=float)
    if dx.size < 3 or s.size != dx.size:
        raise Underdetermined("need at least 3 widths with matching slopes")
    if s.max() <= (1.0 + min_leverage) * s.min():
        raise IllConditioned("slopes too similar to separate spatial and timing widths")
    sig = np.ones_like(dx)
    if errors is not None:
        e = np.asarray(errors, dtype=float)
        if e.shape == dx.shape and np.all(np.isfinite(e)) and np.all(e > 0):
            sig = e
    s2 = s * s
    # dual start: linear regression of dx^2 on slope^2
    A = np.column_stack([np.ones_like(s2), s2]) / (2 * dx * sig)[:, None]
    a0, b0 = np.linalg.lstsq(A, dx**2 / (2 * dx * sig), rcond=None)[0]
    p0 = [a0 if a0 > 0 else 0.5 * dx.min() ** 2, b0 if b0 > 0 else 0.0]
    try:
        fit = levenberg_marquardt(_width_res, _width_jac, p0, (s2, dx, sig))
        p, cost, J = fit.x, fit.cost, fit.jac
    except NonConvergence:
        obj = lambda q: float(np.sum(_width_res(q, s2, dx, sig) ** 2)) if q[0] + s2.min() * q[1] > 0 else np.inf
        nm = minimize(obj, p0, method="Nelder-Mead", options={"xatol": 1e-30, "fatol": 1e-30, "maxiter": 4000})
        if not nm.success:
            raise NonConvergence(f"width fit failed: {nm.message}")
        p, cost = nm.x, 0.5 * nm.fun
        J = _width_jac(p, s2, dx, sig)
    dof = dx.size - 2
    cov = np.linalg.pinv(J.T @ J)
    if errors is None or np.all(sig == 1.0):
        cov = cov * (2 * cost / dof if dof > 0 else np.nan)
    else:
        cov = cov * max(2 * cost / dof, 1.0) if dof > 0 else cov
    w2, tau2 = float(p[0]), float(p[1])
    return WidthModel(w=math.sqrt(max(w2, 0.0)), tau=math.sqrt(max(tau2, 0.0)),
                      w_err=_root_err(w2, cov[0, 0]), tau_err=_root_err(tau2, cov[1, 1]))


# --- resolution and linearity -------------------------------------------------


@dataclass
class ResolutionReport:
    x: np.ndarray
    sigma_x: np.ndarray
    threshold: float
    run: tuple
    floor: float

    @property
    def minimum(self) -> float:
        return float(self.sigma_x.min())

    @property
    def maximum(self) -> float:
        return float(self.sigma_x.max())

    @property
    def run_length(self) -> float:
        return float(self.run[1] - self.run[0]) if self.run else 0.0

    @property
    def slow_end(self) -> float:
        """Resolution at the end of the range with the smallest ``|dx/dt|``."""
        return float(self.sigma_x[0] if self.sigma_x[0] <= self.sigma_x[-1] else self.sigma_x[-1])


def resolution_report(cal: FlightCalibration, tau: float, x_range=(0.0, 300e-6), n: int = 301,
                      threshold: float = 20e-6, floor: float = 6e-6) -> ResolutionReport:
    """Timing-limited resolution ``|dx/dt| * tau`` across a range of release positions.

    ``run`` is the longest contiguous stretch with resolution below
    ``threshold``, its ends located by linear interpolation between samples.
    ``floor`` is only carried along for the report.
    """
    lo, hi = map(float, x_range)
    if not hi > lo or n < 2:
        raise InvalidArgument("need a non-empty range and at least 2 samples")
    if tau < 0:
        raise InvalidArgument("tau must be >= 0")
    x = np.linspace(lo, hi, n)
    if not np.all(cal.valid(x)):
        raise DomainError("range extends outside the validity domain of the calibration")
    sx = tof_slope(analytic_tof(x, cal), cal) * tau
    below = sx < threshold
    run, best = None, -1.0
    i = 0
    while i < n:
        if not below[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and below[j + 1]:
            j += 1
        a = x[i] if i == 0 else _cross(x[i - 1], x[i], sx[i - 1], sx[i], threshold)
        b = x[j] if j == n - 1 else _cross(x[j], x[j + 1], sx[j], sx[j + 1], threshold)
        if b - a > best:
            run, best = (float(a), float(b)), b - a
        i = j + 1
    return ResolutionReport(x, sx, threshold, run, floor)


def _cross(x0, x1, y0, y1, level):
    return x0 + (level - y0) / (y1 - y0) * (x1 - x0)


def linearity(x_L, x_tof) -> LinearityResult:
    """Ordinary least-squares line ``x_tof = slope * x_L + intercept``."""
    x = np.asarray(x_L, dtype=float)
    y = np.asarray(x_tof, dtype=float)
    if x.size < 3 or y.size != x.size:
        raise Underdetermined("linearity needs at least 3 matching points")
    xm = x.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if not sxx > 0:
        raise DegenerateFit("all lens positions are identical")
    slope = float(np.sum((x - xm) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * xm)
    r = y - (slope * x + intercept)
    s2 = float(r @ r) / (x.size - 2) if x.size > 2 else math.nan
    return LinearityResult(slope, intercept, float(np.sqrt(np.mean(r**2))), math.sqrt(s2 / sxx),
                           math.sqrt(s2 * (1.0 / x.size + xm**2 / sxx)), int(x.size))


def analyze(result: CalibrationResult, x_range=None, threshold: float = 20e-6) -> CalibrationResult:
    """Attach width decomposition, linearity and resolution to a calibration."""
    wm = decompose_width(result)
    lin = linearity(result.x_L, result.x_tof)
    if x_range is None:
        x_range = (float(result.x_L.min()), float(result.x_L.max()))
    res = resolution_report(result.cal, wm.tau, x_range, threshold=threshold)
    return replace(result, width_model=wm, linearity=lin, resolution=res)


# --- output -----------------------------------------------------------------


def write_peaks_csv(path, result: CalibrationResult) -> None:
    cols = ["x_L_m", "t_center_s", "t_center_err_s", "t_width_s", "t_width_err_s", "amplitude", "baseline",
            "chi2_red", "x_tof_m", "x_center_err_m", "x_width_m", "x_width_err_m", "slope_m_per_s"]
    lines = [",".join(cols)]
    for p in result.peaks:
        vals = [p.x_L, p.center, p.center_err, p.width, p.width_err, p.amplitude, p.baseline, p.chi2_red,
                p.x_center, p.x_center_err, p.x_width, p.x_width_err, float(tof_slope(p.center, result.cal))]
        lines.append(",".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def write_resolution_csv(path, report: ResolutionReport) -> None:
    lines = ["x_m,sigma_x_m"] + [f"{a!r},{b!r}" for a, b in zip(report.x.tolist(), report.sigma_x.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def write_linearity_csv(path, result: CalibrationResult) -> None:
    lines = ["x_L_m,x_tof_m,x_tof_err_m"]
    lines += [f"{p.x_L!r},{p.x_center!r},{p.x_center_err!r}" for p in result.peaks]
    Path(path).write_text("\n".join(lines) + "\n")


def _pm(value: float, err: float, digits: int) -> str:
    """``value +- err``, or just the value when the error is unknown."""
    text = f"{value:.{digits}f}"
    return text + f" +- {err:.{digits}f}" if math.isfinite(err) else text


def format_report(result: CalibrationResult, extra: dict | None = None) -> str:
    """Human-readable summary; values in lab units."""
    c = result.cal
    um = 1e6
    fixed = result.offset_source == "fixed"
    out = [f"offset_source = {result.offset_source}",
           f"t_offset_ns = {_pm(c.t_offset * 1e9, math.nan if fixed else result.t_offset_err * 1e9, 4)}"
           + (" (fixed)" if fixed else " (fitted)"),
           f"E_V_per_cm = {_pm(c.E / 100, result.E_err / 100, 4)}",
           f"V0_V = {_pm(c.V0, result.V0_err, 5)}",
           f"L_m = {c.L}",
           f"spectra = {len(result.peaks)}",
           f"center_residual_rms_um = {result.residual_rms * um:.4f}"]
    if result.width_model is not None:
        wm = result.width_model
        out += [f"w_um = {_pm(wm.w * um, wm.w_err * um, 3)}",
                f"tau_ns = {_pm(wm.tau * 1e9, wm.tau_err * 1e9, 3)}"]
    if result.linearity is not None:
        lin = result.linearity
        out += [f"linearity_slope = {_pm(lin.slope, lin.slope_err, 5)}",
                f"linearity_intercept_um = {lin.intercept * um:.4f}",
                f"linearity_rms_um = {lin.rms * um:.4f}"]
    if result.resolution is not None:
        r = result.resolution
        run = f"{r.run[0] * um:.2f}..{r.run[1] * um:.2f}" if r.run else "none"
        out += [f"resolution_min_um = {r.minimum * um:.3f}",
                f"resolution_max_um = {r.maximum * um:.3f}",
                f"resolution_slow_end_um = {r.slow_end * um:.3f}",
                f"resolution_floor_um = {r.floor * um:.3f} (quoted floor, not enforced)",
                f"below_{r.threshold * um:g}um_range_um = {run} (length {r.run_length * um:.2f})"]
    for k, v in (extra or {}).items():
        out.append(f"{k} = {v}")
    if result.inputs:
        out.append(f"inputs = {json.dumps(result.inputs, sort_keys=True)}")
    return "\n".join(out) + "\n"
