import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rydtof import CONSTANTS
from rydtof.core import (
    FlightCalibration,
    RydbergState,
    WidthModel,
    analytic_tof,
    classical_ionization_field,
    combined_width,
    dipole_displacement,
    energy_from_tof,
    hop_time,
    max_stark_dipole,
    mean_thermal_speed,
    position_from_tof,
    thermal_displacement,
    tof_slope,
)
from rydtof.errors import DomainError, InvalidArgument

UM = 1e-6
NS = 1e-9

# frozen values from plain CODATA arithmetic (t = L/sqrt(2eU/m_e), slope = m_e L^2/(e E t^3)),
# computed outside the code under test
T_05EV = 9.537823744486114e-07
SLOPE_05EV = 208.85601641166497
SLOPE_2EV = 1670.8481312933197


def test_hop_time_reference_value():
    assert hop_time(60, 20 * UM) == pytest.approx(2.8e-6, rel=0.02)
    assert hop_time(60, 20 * UM) == pytest.approx(2.8489778324852218e-06, rel=1e-12)


def test_hop_time_scaling():
    assert hop_time(60, 0.0) == 0.0
    assert hop_time(60, 40 * UM) == pytest.approx(8 * hop_time(60, 20 * UM), rel=1e-14)
    assert hop_time(30, 20 * UM) == pytest.approx(16 * hop_time(60, 20 * UM), rel=1e-14)


@pytest.mark.parametrize("n,d", [(0, 1e-6), (60, -1e-6)])
def test_hop_time_rejects(n, d):
    with pytest.raises(InvalidArgument):
        hop_time(n, d)


def test_classical_field():
    f54 = classical_ionization_field(RydbergState(54))
    f53 = classical_ionization_field(RydbergState(53))
    assert f54 / 100 == pytest.approx(37.80, rel=1e-3)
    assert f53 / 100 == pytest.approx(40.73, rel=1e-3)
    assert f53 / f54 == pytest.approx((54 / 53) ** 4, rel=1e-14)


def test_quantum_defect_shifts_field():
    bare = classical_ionization_field(RydbergState(54))
    rb = classical_ionization_field(RydbergState(54, "d", 1.35))
    assert rb / bare == pytest.approx((54 / 52.65) ** 4, rel=1e-14)


@pytest.mark.parametrize("kwargs", [dict(n=0), dict(n=3, quantum_defect=3.0), dict(n=5, quantum_defect=-1)])
def test_rydberg_state_invalid(kwargs):
    with pytest.raises(InvalidArgument):
        RydbergState(**kwargs)


def test_analytic_tof_half_ev():
    cal = FlightCalibration(L=0.40, E=5020.0, V0=0.5)
    assert analytic_tof(0.0, cal) == pytest.approx(T_05EV, rel=1e-12)
    assert analytic_tof(0.0, cal) == pytest.approx(0.954e-6, rel=5e-3)
    cal2 = FlightCalibration(L=0.40, E=5020.0, V0=2.0)
    assert analytic_tof(0.0, cal2) == pytest.approx(T_05EV / 2, rel=1e-14)


def test_analytic_tof_domain():
    cal = FlightCalibration(E=5020.0, V0=0.5)
    with pytest.raises(DomainError):
        analytic_tof(-0.5 / 5020.0, cal)
    with pytest.raises(DomainError):
        analytic_tof(-1.0, cal)
    assert analytic_tof(-0.5 / 5020.0 + 1e-12, cal) > 1e-5


def test_position_from_tof_examples():
    cal = FlightCalibration(L=0.40, E=5020.0, V0=0.5, t_offset=13 * NS)
    assert position_from_tof(T_05EV + 13 * NS, cal) == pytest.approx(0.0, abs=1 * UM)
    with pytest.raises(DomainError):
        position_from_tof(13 * NS, cal)


def test_tof_slope_examples():
    cal = FlightCalibration(L=0.40, E=5020.0, V0=0.5)
    assert tof_slope(T_05EV, cal) == pytest.approx(SLOPE_05EV, rel=1e-10)
    assert tof_slope(T_05EV, cal) == pytest.approx(209.0, rel=0.01)
    assert tof_slope(T_05EV / 2, cal) == pytest.approx(1.67e3, rel=0.01)
    assert tof_slope(T_05EV / 2, cal) == pytest.approx(8 * SLOPE_05EV, rel=1e-12)
    neg = FlightCalibration(L=0.40, E=-5020.0, V0=0.5)
    assert tof_slope(T_05EV, neg) == tof_slope(T_05EV, cal)


def test_combined_width_examples():
    assert combined_width(1234.0, WidthModel(w=21 * UM, tau=0.0)) == 21 * UM
    assert combined_width(0.0, WidthModel(w=21 * UM, tau=20 * NS)) == 21 * UM
    assert combined_width(1670.0, WidthModel(w=21 * UM, tau=20 * NS)) == pytest.approx(39.4 * UM, rel=0.01)
    with pytest.raises(InvalidArgument):
        combined_width(-1.0, WidthModel(1e-6, 1e-9))


def test_thermal_displacement():
    v = mean_thermal_speed(300e-6, CONSTANTS.m_Rb85)
    assert v == pytest.approx(0.2735040611493392, rel=1e-9)
    assert thermal_displacement(300e-6, CONSTANTS.m_Rb85, 1e-6) == pytest.approx(0.27 * UM, rel=0.05)
    assert thermal_displacement(300e-6, CONSTANTS.m_Rb85, 3.3e-6) == pytest.approx(0.9 * UM, rel=0.05)
    assert thermal_displacement(0.0, CONSTANTS.m_Rb85, 5e-6) == 0.0
    with pytest.raises(InvalidArgument):
        thermal_displacement(-1.0, CONSTANTS.m_Rb85, 1e-6)


def test_dipole_displacement():
    d = max_stark_dipole(54)
    assert d == pytest.approx(3.70843187330052e-26, rel=1e-12)
    gradient = 20 * 1e4  # 20 V/cm^2
    slow_ramp = dipole_displacement(d, gradient, CONSTANTS.m_Rb85, 1.2e-6)
    assert slow_ramp == pytest.approx(3.787352292402225e-08, rel=1e-9)
    assert slow_ramp <= 0.06 * UM
    # whole ramp + plateau: constant-force value exceeds the 0.06 um bound
    assert dipole_displacement(d, gradient, CONSTANTS.m_Rb85, 2.5e-6) == pytest.approx(1.6438160991329105e-07, rel=1e-9)
    assert dipole_displacement(0.0, gradient, CONSTANTS.m_Rb85, 2.5e-6) == 0.0
    assert dipole_displacement(d, gradient, CONSTANTS.m_Rb85, 2.4e-6) == pytest.approx(4 * slow_ramp, rel=1e-14)
    with pytest.raises(InvalidArgument):
        dipole_displacement(-d, gradient, CONSTANTS.m_Rb85, 1e-6)


# --- properties -------------------------------------------------------------

cals = st.builds(
    FlightCalibration,
    L=st.floats(0.05, 1.0),
    E=st.one_of(st.floats(100.0, 2e4), st.floats(-2e4, -100.0)),
    V0=st.floats(0.1, 5.0),
    t_offset=st.floats(0.0, 50e-9),
)


@settings(max_examples=200, deadline=None)
@given(cal=cals, frac=st.floats(-0.9, 3.0))
def test_inverse_roundtrip(cal, frac):
    x = frac * cal.V0 / cal.E
    t = analytic_tof(x, cal)
    x_back = position_from_tof(t, cal)
    scale = max(abs(x), cal.V0 / abs(cal.E))
    assert abs(x_back - x) <= 1e-10 * scale


@settings(max_examples=200, deadline=None)
@given(cal=cals, u1=st.floats(0.05, 10.0), u2=st.floats(0.05, 10.0))
def test_tof_strictly_decreasing_in_energy(cal, u1, u2):
    # energies closer than float resolution of the x round trip are not ordered
    assume(abs(u1 - u2) > 1e-9 * max(u1, u2))
    x1, x2 = (u1 - cal.V0) / cal.E, (u2 - cal.V0) / cal.E
    t1, t2 = analytic_tof(x1, cal), analytic_tof(x2, cal)
    assert (t1 > t2) == (u1 < u2)


def test_slope_matches_finite_difference():
    rng = np.random.default_rng(7)
    for _ in range(100):
        cal = FlightCalibration(L=rng.uniform(0.1, 0.8), E=rng.choice([-1, 1]) * rng.uniform(1e3, 1e4),
                                V0=rng.uniform(0.3, 3.0), t_offset=rng.uniform(0, 30e-9))
        U = rng.uniform(0.3, 4.0)
        t = cal.L * math.sqrt(CONSTANTS.m_e / (2 * CONSTANTS.e * U)) + cal.t_offset
        h = 1e-5 * (t - cal.t_offset)
        fd = (position_from_tof(t + h, cal) - position_from_tof(t - h, cal)) / (2 * h)
        assert abs(fd) == pytest.approx(tof_slope(t, cal), rel=1e-6)


@settings(max_examples=300, deadline=None)
@given(slope=st.floats(0, 1e4), w=st.floats(0, 1e-4), tau=st.floats(0, 1e-7))
def test_combined_width_bounds(slope, w, tau):
    cw = combined_width(slope, WidthModel(w, tau))
    assert cw >= max(w, slope * tau) * (1 - 1e-15)
    assert cw <= (w + slope * tau) * (1 + 1e-15)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 200), d=st.floats(0, 1e-3))
def test_scaling_laws(n, d):
    assert hop_time(n, 2 * d) == pytest.approx(8 * hop_time(n, d), rel=1e-13, abs=0)
    f1 = classical_ionization_field(RydbergState(n))
    f2 = classical_ionization_field(RydbergState(2 * n))
    assert f1 / f2 == pytest.approx(16.0, rel=1e-13)


def test_purity_bit_identical():
    cal = FlightCalibration(E=-4900.0, V0=1.1, t_offset=13e-9)
    xs = np.linspace(-1e-4, 1e-4, 17)
    a = analytic_tof(xs, cal)
    b = analytic_tof(xs, cal)
    assert np.array_equal(a, b)
    assert np.array_equal(energy_from_tof(a, cal), energy_from_tof(b, cal))
