import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rydtof.core import FlightCalibration, RydbergState, WidthModel, analytic_tof, combined_width, tof_slope
from rydtof.errors import InvalidArgument
from rydtof.fieldsolver import PotentialProfile, integrate_flight
from rydtof.pulses import StarkBranchModel, ramp_pulse_waveform, ionization_events, prepare_ensemble
from rydtof.synth import (
    DetectorModel,
    ProductionVolume,
    SeriesConfig,
    TofSpectrum,
    from_trace,
    read_series,
    read_spectrum_csv,
    rebin,
    sample_ensemble,
    synthesize_series,
    synthesize_spectrum,
    write_series,
    write_spectrum_csv,
)

CAL = FlightCalibration(E=5020.0, V0=0.5, t_offset=13e-9)
LENS = [i * 20e-6 for i in range(16)]


def _moments(spec: TofSpectrum):
    t, c = spec.centers, spec.counts.astype(float)
    m = (c * t).sum() / c.sum()
    var = (c * (t - m) ** 2).sum() / c.sum() - spec.bin_width**2 / 12  # Sheppard correction
    return m, 2 * math.sqrt(var)


def _fitted_width(spec: TofSpectrum) -> float:
    """2-sigma time width from a plain Gaussian fit (scipy, independent of the package fitter)."""
    from scipy.optimize import curve_fit
    t, c = spec.centers * 1e9, spec.counts
    p, _ = curve_fit(lambda t, A, m, s: A * np.exp(-(t - m) ** 2 / (2 * s**2)), t, c,
                     p0=[c.max(), t[c.argmax()], 20.0])
    return 2 * abs(p[2]) * 1e-9


# --- ensemble ---------------------------------------------------------------


def test_zero_size_zero_temperature():
    pos, vel = sample_ensemble(ProductionVolume(1e-4, 1e-300), 0.0, 1000, 3)
    assert np.all(pos == 1e-4)
    assert np.all(vel == 0.0)


def test_sample_mean_within_clt_bound():
    vol = ProductionVolume(50e-6)
    pos, _ = sample_ensemble(vol, 300e-6, 100000, 8)
    sigma = vol.width / 2
    assert abs(pos.mean() - 50e-6) < 3 * sigma / math.sqrt(pos.size)


def test_sample_width_for_target_config():
    pos, _ = sample_ensemble(ProductionVolume(0.0, 23e-6 * 21 / 16.3), 0.0, 100000, 5)
    assert 2 * pos.std() == pytest.approx(21e-6, rel=0.02)
    pos, _ = sample_ensemble(ProductionVolume(0.0), 0.0, 100000, 5)
    assert 2 * pos.std() == pytest.approx(23e-6 / math.sqrt(2), rel=0.02)


def test_velocity_distribution_is_thermal():
    from rydtof.constants import CONSTANTS as C
    from rydtof.core import mean_thermal_speed
    _, vel = sample_ensemble(ProductionVolume(0.0), 300e-6, 100000, 2)
    speed = np.linalg.norm(vel, axis=1)
    assert speed.mean() == pytest.approx(mean_thermal_speed(300e-6, C.m_Rb85), rel=0.01)


def test_volume_validation():
    with pytest.raises(InvalidArgument):
        ProductionVolume(0.0, 0.0)
    assert ProductionVolume(0.0, 23e-6, two_photon=False).width == 23e-6
    assert ProductionVolume.for_width(0.0, 21e-6).width == pytest.approx(21e-6, rel=1e-15)


@pytest.mark.parametrize("kw", [dict(tau=-1.0), dict(transmission=1.5), dict(bin_width=0.0)])
def test_detector_validation(kw):
    with pytest.raises(InvalidArgument):
        DetectorModel(**kw)


@given(st.floats(0.0, 5.0), st.floats(0.01, 2.0), st.floats(0.01, 1.0))
def test_efficiency_bounded(U, mid, scale):
    e = DetectorModel(rolloff_energy=mid, rolloff_scale=scale).efficiency(U)
    assert 0.0 <= e <= 1.0


# --- single spectra ---------------------------------------------------------


def test_single_position_no_jitter_lands_in_one_bin():
    det = DetectorModel(tau=0.0)
    spec = synthesize_spectrum(np.full(500, 1e-4), CAL, det, mode="expected")
    nz = np.nonzero(spec.counts)[0]
    assert nz.size == 1
    t = analytic_tof(1e-4, CAL)
    assert spec.edges[nz[0]] <= t < spec.edges[nz[0] + 1]
    assert spec.counts[nz[0]] == pytest.approx(500 * 0.95, rel=1e-12)


def test_expected_mode_normalization():
    det = DetectorModel(rolloff_energy=1.0, rolloff_scale=0.2)
    pos, _ = sample_ensemble(ProductionVolume(100e-6, 100e-6), 0.0, 5000, 1)
    spec = synthesize_spectrum(pos, CAL, det, mode="expected")
    expect = pos.size * det.transmission * det.efficiency(CAL.energy(pos)).mean()
    assert spec.total == pytest.approx(expect, rel=1e-6)


def test_rebinning_conserves_counts():
    pos, _ = sample_ensemble(ProductionVolume(100e-6), 0.0, 3000, 1)
    spec = synthesize_spectrum(pos, CAL, DetectorModel(), mode="expected")
    n = spec.counts.size - spec.counts.size % 4
    coarse = rebin(spec, 4)
    assert coarse.total == pytest.approx(spec.counts[:n].sum(), rel=1e-9)
    assert coarse.bin_width == pytest.approx(4 * spec.bin_width, rel=1e-12)


def test_fast_end_position_width():
    det = DetectorModel(tau=20e-9, bin_width=1e-9)
    x = 300e-6
    pos, _ = sample_ensemble(ProductionVolume.for_width(x, 21e-6), 0.0, 40000, 9)
    spec = synthesize_spectrum(pos, CAL, det, mode="expected")
    t, wt = _moments(spec)
    wx = wt * tof_slope(t, CAL)
    oracle = combined_width(tof_slope(analytic_tof(x, CAL), CAL), WidthModel(21e-6, 20e-9))
    assert 39e-6 <= oracle <= 40e-6
    assert wx == pytest.approx(oracle, rel=0.03)


def test_time_width_follows_slope_without_jitter():
    det = DetectorModel(tau=0.0, bin_width=1e-9)
    for x in LENS[::3]:
        pos, _ = sample_ensemble(ProductionVolume.for_width(x, 21e-6), 0.0, 40000, 4)
        wt = _fitted_width(synthesize_spectrum(pos, CAL, det, mode="expected"))
        assert wt == pytest.approx(21e-6 / tof_slope(analytic_tof(x, CAL), CAL), rel=0.03)


def test_time_widths_grow_while_position_widths_shrink():
    cfg = SeriesConfig(cal=CAL, diameter=21e-6 * math.sqrt(2), mode="expected",
                       detector=DetectorModel(bin_width=1e-9))
    series = synthesize_series(LENS[::5], cfg, 0)
    m = [_moments(s) for s in series]
    t = np.array([a for a, _ in m])
    wt = np.array([b for _, b in m])
    wx = wt * tof_slope(t, CAL)
    order = np.argsort(t)
    assert np.all(np.diff(wt[order]) > 0)
    assert np.all(np.diff(wx[order]) < 0)


def test_events_mode_counts():
    pos = np.full(20000, 100e-6)
    spec = synthesize_spectrum(pos, CAL, DetectorModel(), 3, mode="events")
    assert spec.counts.dtype.kind == "i"
    p = 0.95
    assert abs(spec.total - 20000 * p) < 5 * math.sqrt(20000 * p * (1 - p))


def test_poisson_mode_mean():
    pos = np.full(20000, 100e-6)
    noisy = synthesize_spectrum(pos, CAL, DetectorModel(), 3, mode="poisson")
    exact = synthesize_spectrum(pos, CAL, DetectorModel(), 3, mode="expected")
    assert np.array_equal(noisy.edges, exact.edges)
    assert abs(noisy.total - exact.total) < 5 * math.sqrt(exact.total)


def test_unreachable_electrons_are_tallied():
    pos = np.array([1e-4, -2e-4, -1e-3])  # the last two have U <= 0
    spec = synthesize_spectrum(pos, CAL, DetectorModel(tau=0.0), mode="expected")
    assert spec.metadata["dropped"] == 2
    assert spec.total == pytest.approx(0.95, rel=1e-12)


def test_invalid_mode_and_missing_model():
    with pytest.raises(InvalidArgument):
        synthesize_spectrum([0.0], CAL, mode="magic")
    with pytest.raises(InvalidArgument):
        synthesize_spectrum([0.0])


def test_numeric_flight_oracle_mode():
    """Integrator-based arrival agrees with the uniform-field closed form."""
    E, gap, L, h = 5000.0, 0.01, 0.40, 1e-4
    z = np.arange(int(round((gap + L) / h)) + 1) * h
    V = np.where(z < gap, -48.0 - E * (gap - z), -48.0)
    prof = PotentialProfile(z, V, {"tube_potential": -48.0, "source_window": (0.0, gap), "detector_z": float(z[-1])})
    x = gap - 1.0 / E  # 1 eV
    spec = synthesize_spectrum(np.full(10, x), profile=prof, det=DetectorModel(tau=0.0, bin_width=1e-10),
                               mode="expected")
    t_num = integrate_flight(x, prof)[0]
    from rydtof.constants import CONSTANTS as C
    t_closed = math.sqrt(2 * (gap - x) * C.m_e / (C.e * E)) + L * math.sqrt(C.m_e / (2 * C.e))
    k = np.nonzero(spec.counts)[0]
    assert k.size == 1
    assert spec.edges[k[0]] <= t_num < spec.edges[k[0] + 1]
    assert t_num == pytest.approx(t_closed, rel=1e-4)


def test_event_source_orders_classes():
    w = ramp_pulse_waveform()
    ev = ionization_events(prepare_ensemble(np.full(5000, 0.0132), RydbergState(54)), w,
                           StarkBranchModel.default(), 1)
    cal = FlightCalibration(L=0.40, t_offset=13e-9)
    means = {}
    for cls in "abc":
        spec = synthesize_spectrum(ev.select(ev.peak_class == cls), cal, DetectorModel(tau=0.0), mode="expected")
        means[cls] = _moments(spec)[0]
        assert spec.total == pytest.approx(0.95 * np.count_nonzero(ev.peak_class == cls), rel=1e-9)
    assert means["a"] < means["b"] < means["c"]


def test_trace_polarity():
    edges = np.arange(5) * 1e-9
    spec = from_trace(edges, [-1.0, -3.0, 0.5, -2.0])
    assert np.array_equal(spec.counts, [1.0, 3.0, 0.0, 2.0])
    assert spec.metadata["polarity"] == -1


def test_spectrum_rejects_bad_edges():
    with pytest.raises(InvalidArgument):
        TofSpectrum([0.0, 1.0, 3.0], [1, 1])
    with pytest.raises(InvalidArgument):
        TofSpectrum([0.0, 1.0], [-1])


# --- series -----------------------------------------------------------------


def test_identical_positions_identical_spectra():
    s = synthesize_series([1e-4, 1e-4], SeriesConfig(cal=CAL, n_atoms=2000), 7)
    assert np.array_equal(s[0].counts, s[1].counts)


def test_series_ordering_and_metadata():
    cfg = SeriesConfig(cal=CAL, n_atoms=2000)
    series = synthesize_series(LENS, cfg, 1)
    assert [s.x_L for s in series] == LENS
    centers = [_moments(s)[0] for s in series]
    assert np.all(np.diff(centers) < 0)
    assert len({s.metadata["config_hash"] for s in series}) == 1
    assert all(np.array_equal(s.edges, series[0].edges) for s in series)


def test_series_needs_two_positions():
    with pytest.raises(InvalidArgument):
        synthesize_series([0.0], SeriesConfig(cal=CAL))


@pytest.mark.parametrize("mode", ["events", "poisson", "expected"])
def test_deterministic_across_workers(tmp_path, mode):
    cfg = SeriesConfig(cal=CAL, n_atoms=20000, mode=mode)
    a = write_series(tmp_path / "a", synthesize_series(LENS[:3], cfg, 5, workers=1))
    b = write_series(tmp_path / "b", synthesize_series(LENS[:3], cfg, 5, workers=4))
    for name in a.read_text().split():
        assert (a.parent / name).read_bytes() == (b.parent / name).read_bytes()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["events", "expected"]))
def test_csv_roundtrip_bit_exact(tmp_path_factory, seed, mode):
    tmp = tmp_path_factory.mktemp("csv")
    spec = synthesize_spectrum(np.linspace(0, 3e-4, 300), CAL, DetectorModel(), seed, mode=mode,
                               metadata={"x_L_m": 1.2345e-4})
    write_spectrum_csv(tmp / "s.csv", spec)
    back = read_spectrum_csv(tmp / "s.csv")
    assert np.array_equal(back.edges, spec.edges)
    assert np.array_equal(back.counts, spec.counts)
    assert back.counts.dtype.kind == spec.counts.dtype.kind
    assert back.metadata == spec.metadata
    write_spectrum_csv(tmp / "t.csv", back)
    assert (tmp / "t.csv").read_bytes() == (tmp / "s.csv").read_bytes()


def test_series_manifest_roundtrip(tmp_path):
    series = synthesize_series(LENS[:4], SeriesConfig(cal=CAL, n_atoms=1000), 2)
    manifest = write_series(tmp_path, series)
    back = read_series(manifest)
    assert [s.x_L for s in back] == LENS[:4]
    assert all(np.array_equal(a.counts, b.counts) for a, b in zip(series, back))
