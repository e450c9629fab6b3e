import numpy as np
import pytest
from hypothesis import given, strategies as st

from nvstrain.errors import InvalidParameterError
from nvstrain.spectrum import (
    COUNTS,
    LineShapeParams,
    OdmrSpectrum,
    apply_shot_noise,
    cw_spectrum,
    dip_area,
    expand_hyperfine,
    lorentzian_dip,
    pair_lines,
)
from nvstrain.spin_model import SpinParameters, hyperfine_resolved_pairs, transition_frequencies_approx


def local_minima(v):
    return int(np.sum((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])))


def test_lorentzian_reference_points():
    p = LineShapeParams(2.87, 0.5, 0.02)
    assert lorentzian_dip(2.87, p) == pytest.approx(0.02)
    assert lorentzian_dip(2.87 + 0.5e-3, p) == pytest.approx(0.01)
    assert lorentzian_dip(2.87 - 0.5e-3, p) == pytest.approx(0.01)
    assert lorentzian_dip(1e6, p) < 1e-20


def test_line_shape_validation():
    with pytest.raises(InvalidParameterError):
        LineShapeParams(2.87, 0.0, 0.1)
    with pytest.raises(InvalidParameterError):
        LineShapeParams(2.87, 0.5, 1.0)


def test_spectrum_validation():
    f = np.linspace(2.86, 2.88, 20)
    with pytest.raises(InvalidParameterError):
        OdmrSpectrum(f[::-1], np.ones(20))
    with pytest.raises(InvalidParameterError):
        OdmrSpectrum(f[:5], np.ones(5))
    with pytest.raises(InvalidParameterError):
        OdmrSpectrum(f, np.full(20, 1.2))
    with pytest.raises(InvalidParameterError):
        OdmrSpectrum(f, -np.ones(20), COUNTS)


def test_single_line_minimum_at_center():
    f = np.linspace(2.86, 2.88, 201)
    s = cw_spectrum(f, [LineShapeParams(2.8713, 0.5, 0.03)])
    assert abs(f[np.argmin(s.values)] - 2.8713) <= 0.5 * (f[1] - f[0])


@given(st.floats(2.862, 2.878), st.floats(0.1, 2.0))
def test_single_line_minimum_location_property(center, hwhm):
    f = np.linspace(2.85, 2.89, 401)
    s = cw_spectrum(f, [LineShapeParams(center, hwhm, 0.05)])
    assert abs(f[np.argmin(s.values)] - center) <= 0.5 * (f[1] - f[0]) + 1e-12


def test_strain_pair_gives_double_dip():
    f = np.linspace(2.86, 2.885, 251)
    pair = transition_frequencies_approx(SpinParameters.from_strain(6e-4, 1.8e-4))
    s = cw_spectrum(f, pair_lines(pair, 0.5, 0.02))
    assert local_minima(s.values) == 2
    mins = f[1:-1][(s.values[1:-1] < s.values[:-2]) & (s.values[1:-1] < s.values[2:])]
    assert mins[1] - mins[0] == pytest.approx(2 * 3.708e-3, abs=2e-4)


def test_hyperfine_triplet_area_preserved():
    lines = [LineShapeParams(2.868, 0.3, 0.02), LineShapeParams(2.872, 0.4, 0.01)]
    expanded = expand_hyperfine(lines, 2.16)
    assert len(expanded) == 6
    assert dip_area(expanded) == pytest.approx(dip_area(lines), rel=1e-9)
    # numerical integral on a grid wide enough that tail truncation is < 1e-3
    f = np.linspace(2.0, 3.7, 1_700_001)
    plain = np.trapezoid(1 - cw_spectrum(f, lines).values, f)
    split = np.trapezoid(1 - cw_spectrum(f, lines, hyperfine=2.16).values, f)
    assert split == pytest.approx(plain, rel=1e-6)
    assert plain == pytest.approx(dip_area(lines), rel=1e-3)


def test_zero_field_reference_structure():
    # 14N projections as an effective axial field: outer m_I = +/-1 lines coincide
    f = np.linspace(2.864, 2.876, 1201)
    for e_perp, expect in ((0.0, 3), (0.4, 4)):
        lines = []
        for pair, w in hyperfine_resolved_pairs(SpinParameters(e_x=e_perp)):
            lines += pair_lines(pair, 0.15, 0.03 * w)
        assert local_minima(cw_spectrum(f, lines).values) == expect


def test_shot_noise_deterministic():
    s = cw_spectrum(np.linspace(2.86, 2.88, 64), [LineShapeParams(2.87, 0.5, 0.02)])
    a, b = apply_shot_noise(s, 1000, 7), apply_shot_noise(s, 1000, 7)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.unit == COUNTS
    with pytest.raises(InvalidParameterError):
        apply_shot_noise(s, 0, 1)


def test_shot_noise_large_count_limit():
    s = cw_spectrum(np.linspace(2.86, 2.88, 64), [LineShapeParams(2.87, 0.5, 0.2)])
    n = apply_shot_noise(s, 1e7, 3)
    np.testing.assert_allclose(n.values / 1e7, s.values, rtol=1e-3)


def test_shot_noise_moments():
    flat = OdmrSpectrum(np.linspace(2.86, 2.88, 1000), np.ones(1000))
    n = apply_shot_noise(flat, 100, 5)
    assert abs(n.values.mean() - 100) < 5 * 10 / np.sqrt(1000)


def test_shot_noise_variance_equals_mean():
    s = cw_spectrum(np.linspace(2.86, 2.88, 16), [LineShapeParams(2.87, 0.5, 0.3)])
    draws = np.stack([apply_shot_noise(s, 50, k).values for k in range(10_000)])
    np.testing.assert_allclose(draws.var(axis=0, ddof=1), draws.mean(axis=0), rtol=0.1)
