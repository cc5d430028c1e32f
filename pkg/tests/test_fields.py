import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from orcamem import chebyshev, fields
from orcamem.errors import ConfigError, DomainError

TELECOM, D2, TRANSFER = 1529.3, 780.241, 792.7


def test_counterpropagating_transfer_reverses_the_grating():
    wv = fields.wavevectors(TELECOM, D2, TRANSFER)
    assert abs(wv.k_gs) == pytest.approx(3.95e6, rel=2e-3)
    assert wv.k_gd == pytest.approx(-3.98e6, rel=2e-3)
    assert wv.k_gs * wv.k_gd < 0 and wv.rephasing
    assert wv.ratio == pytest.approx(1.0095, abs=1e-4)
    for k, lam in zip((wv.k_s, wv.k_c, wv.k_t), (TELECOM, D2, TRANSFER)):
        assert abs(k) == pytest.approx(2 * math.pi / (lam * 1e-9), rel=1e-15)


def test_transfer_along_control_gives_no_rephasing():
    wv = fields.wavevectors(TELECOM, D2, TRANSFER, directions=(-1, 1, 1))
    assert wv.k_gd * wv.k_gs > 0
    assert not wv.rephasing


def test_equal_wavelengths_counterpropagating_cancel():
    wv = fields.wavevectors(800.0, 800.0, directions=(-1, 1, 1))
    assert wv.k_gs == 0.0


def test_missing_transfer_wavelength():
    wv = fields.wavevectors(TELECOM, D2)
    with pytest.raises(ConfigError):
        _ = wv.k_gd
    assert not wv.rephasing


@settings(max_examples=50, deadline=None)
@given(ls=st.floats(300, 2000), lc=st.floats(300, 2000), lt=st.floats(300, 2000))
def test_flipping_transfer_direction_flips_its_contribution(ls, lc, lt):
    a = fields.wavevectors(ls, lc, lt, directions=(-1, 1, -1))
    b = fields.wavevectors(ls, lc, lt, directions=(-1, 1, 1))
    assert a.k_t == -b.k_t
    assert a.k_gd - a.k_gs == pytest.approx(-(b.k_gd - b.k_gs), rel=1e-12)


def test_wavevector_errors():
    with pytest.raises(DomainError):
        fields.wavevectors(-1.0, D2)
    with pytest.raises(DomainError):
        fields.wavevectors(TELECOM, D2, TRANSFER, directions=(1, 1))
    with pytest.raises(DomainError):
        fields.wavevectors(TELECOM, D2, directions=(2, 1))


def _pulse(area=math.pi, fwhm=330.0, chirp=0.0, pol="sigma+"):
    return fields.PulseEnvelope("transfer", 5.0, fwhm, fields.area_to_peak(area, fwhm), chirp_rate=chirp,
                                polarization=pol)


@settings(max_examples=200, deadline=None)
@given(area=st.floats(0, 4 * math.pi), fwhm=st.floats(100, 1000))
def test_area_round_trip(area, fwhm):
    p = fields.PulseEnvelope("control", 0.0, fwhm, fields.area_to_peak(area, fwhm))
    assert fields.pulse_area(p) == pytest.approx(area, rel=1e-12, abs=1e-300)


def test_area_linearity_and_zero():
    assert fields.area_to_peak(0.0, 330) == 0.0
    assert fields.area_to_peak(math.pi / 2, 330) == pytest.approx(fields.area_to_peak(math.pi, 330) / 2)
    p = _pulse()
    double = fields.PulseEnvelope("transfer", 5.0, 330.0, 2 * p.peak_rabi)
    assert fields.pulse_area(double) == pytest.approx(2 * fields.pulse_area(p))


def test_area_matches_numerical_integral():
    p = _pulse(area=1.3, fwhm=250.0)
    t = np.linspace(0, 10, 200001)
    integral = trapezoid(np.abs(fields.envelope(p, t)), t * 1e-9)
    assert integral == pytest.approx(1.3, rel=1e-9)


def test_envelope_peak_and_half_maximum():
    p = _pulse()
    assert fields.envelope(p, 5.0) == pytest.approx(p.peak_rabi)
    for t in (5.0 - 0.165, 5.0 + 0.165):
        assert abs(fields.envelope(p, t)) == pytest.approx(abs(p.peak_rabi) / 2, rel=1e-12)


def test_chirp_phase():
    assert np.all(np.isreal(fields.envelope(_pulse(), np.linspace(4, 6, 11))))
    p = _pulse(chirp=2e9)
    v = complex(fields.envelope(p, 5.1))
    assert np.angle(v) == pytest.approx(math.pi * 2e9 * 1e-9 * 0.01)


def test_rabi_at_projects_polarization():
    p = _pulse(pol="H")
    r = fields.rabi_at(p, 5.0)
    assert np.linalg.norm(r) == pytest.approx(abs(p.peak_rabi))
    assert r[1] == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
                min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_polarization_vectors_have_unit_norm(vec):
    assert np.linalg.norm(fields.polarization_vector(vec)) == pytest.approx(1.0)
    p = fields.PulseEnvelope("signal", 0.0, 330.0, 1.0, polarization=tuple(vec))
    assert np.linalg.norm(p.pol) == pytest.approx(1.0)


@pytest.mark.parametrize("name", sorted(fields.NAMED_POLARIZATIONS))
def test_named_polarizations_are_unit(name):
    assert np.linalg.norm(fields.polarization_vector(name)) == pytest.approx(1.0)


def test_envelope_validation():
    with pytest.raises(ConfigError):
        fields.PulseEnvelope("control", 0.0, 330.0, 1.0, shape="square")
    with pytest.raises(DomainError):
        fields.PulseEnvelope("control", 0.0, 0.0, 1.0)
    with pytest.raises(ConfigError):
        fields.PulseEnvelope("pump", 0.0, 330.0, 1.0)
    with pytest.raises(ConfigError):
        fields.polarization_vector("circular")
    with pytest.raises(ConfigError):
        fields.polarization_vector((0, 0, 0))
    with pytest.raises(DomainError):
        fields.area_to_peak(1.0, 0.0)


# ---------------------------------------------------------------------------
# Chebyshev collocation


@pytest.mark.parametrize("n", [4, 8, 16])
def test_differentiation_exact_for_polynomials(n):
    z = chebyshev.nodes(n)
    D = chebyshev.diff_matrix(n)
    for p in range(n):
        assert D @ z**p == pytest.approx(p * z ** max(p - 1, 0) if p else 0 * z, abs=1e-9)


@pytest.mark.parametrize("n", [4, 9, 16])
def test_quadrature_exact_for_polynomials(n):
    w = chebyshev.quad_weights(n)
    z = chebyshev.nodes(n)
    for p in range(n):
        assert w @ z**p == pytest.approx(1 / (p + 1), rel=1e-12)


def test_boundary_solver_matches_fine_march():
    # dE/dz = m E + s(z), E(0) = 1, with a smooth source; the reference is a
    # 10^4-step trapezoid march with an integrating factor.
    n, m = 16, -0.7 + 0.3j
    P_in, P_src = chebyshev.boundary_solver(n, np.array([[m]]))
    z = chebyshev.nodes(n)

    def source(x):
        return np.sin(2 * x) + 0.5j * x**2

    E = P_in @ np.array([1.0]) + P_src @ source(z[1:])
    zz = np.linspace(0, 1, 10001)
    f = np.exp(-m * zz) * source(zz)
    cum = np.concatenate(([0], np.cumsum((f[1:] + f[:-1]) / 2 * np.diff(zz))))
    ref = np.exp(m * zz) * (1 + cum)
    assert E[-1] == pytest.approx(ref[-1], rel=1e-6)
    assert np.interp(z, zz, ref.real) == pytest.approx(E.real, abs=1e-6)
