import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from nvstrain.errors import InvalidEnsembleError, InvalidParameterError
from nvstrain.spin_model import (
    DEFAULT_CONSTANTS as C,
    NV_AXES,
    OrientationClass,
    PhysicalConstants,
    Regime,
    ResonancePair,
    SpinParameters,
    build_hamiltonian,
    classify_regime,
    ensemble_resonances,
    high_field_resonances,
    hyperfine_resolved_pairs,
    nv_orientations,
    observed_strain_components,
    project_to_nv_frame,
    transition_frequencies_approx,
    transition_frequencies_exact,
)

GAMMA = 2.8031e-3  # GHz/G


def test_constants_defaults():
    assert C.axial_susceptibility == 9.38
    assert C.transverse_susceptibility == 20.6
    assert C.d_gs_splitting == 2.87
    with pytest.raises(InvalidParameterError):
        PhysicalConstants(hyperfine_splitting=0.0)


def test_spin_parameters_reject_nonfinite():
    with pytest.raises(InvalidParameterError):
        SpinParameters(e_x=float("nan"))
    with pytest.raises(InvalidParameterError):
        SpinParameters(b_field=(0, 0, float("inf")))


def test_hamiltonian_zero_field():
    h = build_hamiltonian(SpinParameters())
    np.testing.assert_allclose(h, np.diag([2.87, 0, 2.87]), atol=1e-15)


def test_hamiltonian_axial_strain():
    # 6e-4 axial strain * 9.38 GHz = 5.628 MHz
    p = SpinParameters.from_strain(6e-4, 0.0)
    assert p.e_z == pytest.approx(5.628, abs=1e-12)
    h = build_hamiltonian(p)
    np.testing.assert_allclose(h, np.diag([2.875628, 0, 2.875628]), atol=1e-12)


def test_hamiltonian_axial_field():
    h = build_hamiltonian(SpinParameters(b_field=(0, 0, 10.0)))
    np.testing.assert_allclose(np.diag(h).real, [2.87 + 10 * GAMMA, 0, 2.87 - 10 * GAMMA], atol=1e-15)
    assert (h[0, 0] - h[2, 2]).real == pytest.approx(2 * GAMMA * 10, abs=1e-15)
    np.testing.assert_allclose(h - np.diag(np.diag(h)), 0, atol=1e-15)


def test_hamiltonian_transverse_strain_block():
    # zero-field +/-1 block is [[D, -Ex - i Ey], [-Ex + i Ey, D]]
    h = build_hamiltonian(SpinParameters(e_x=3.0, e_y=4.0))
    assert h[0, 2] == pytest.approx(-3e-3 - 4e-3j)
    assert h[2, 0] == pytest.approx(-3e-3 + 4e-3j)


@given(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50),
    st.tuples(st.floats(-300, 300), st.floats(-300, 300), st.floats(-300, 300)),
)
def test_hamiltonian_hermitian_and_trace(ex, ey, ez, b):
    p = SpinParameters(e_x=ex, e_y=ey, e_z=ez, b_field=b)
    h = build_hamiltonian(p)
    np.testing.assert_allclose(h, h.conj().T, atol=1e-12)
    assert np.trace(h).real == pytest.approx(2 * (2.87 + ez * 1e-3), abs=1e-12)


def test_exact_degenerate():
    r = transition_frequencies_exact(SpinParameters())
    assert r.omega_plus == pytest.approx(2.87, abs=1e-12)
    assert r.omega_minus == pytest.approx(2.87, abs=1e-12)


def test_exact_matches_closed_form_at_zero_field():
    p = SpinParameters(e_x=1.0, e_z=0.7)
    ex, ap = transition_frequencies_exact(p), transition_frequencies_approx(p)
    assert ex.omega_plus == pytest.approx(2.87 + 0.7e-3 + 1e-3, abs=1e-12)
    assert ex.omega_minus == pytest.approx(2.87 + 0.7e-3 - 1e-3, abs=1e-12)
    assert abs(ex.omega_plus - ap.omega_plus) < 1e-12


def test_exact_transverse_field_second_order():
    # Oracle: for E = 0, B_z = 0 the problem reduces to a 2x2 block coupling
    # |0> and (|+1>+|-1>)/sqrt2 with element b = gamma*B_perp; |+1>-|-1> stays at D.
    d, b = 2.87, GAMMA * 100.0
    lam0 = 0.5 * (d - math.sqrt(d * d + 4 * b * b))
    expect_plus = 0.5 * (d + math.sqrt(d * d + 4 * b * b)) - lam0
    expect_minus = d - lam0
    r = transition_frequencies_exact(SpinParameters(b_field=(100.0, 0, 0)))
    assert r.omega_plus == pytest.approx(expect_plus, abs=1e-12)
    assert r.omega_minus == pytest.approx(expect_minus, abs=1e-12)
    # second-order perturbation: shifts b^2/D and 2 b^2/D
    assert r.omega_minus - d == pytest.approx(b * b / d, rel=2e-2)
    assert r.omega_plus - d == pytest.approx(2 * b * b / d, rel=2e-2)


def test_approx_examples():
    r = transition_frequencies_approx(SpinParameters(b_field=(0, 0, 10.0)))
    assert r.splitting == pytest.approx(0.056062, abs=1e-12)
    r = transition_frequencies_approx(SpinParameters.from_strain(6e-4, 1.8e-4))
    assert r.center == pytest.approx(2.875628, abs=1e-12)
    assert r.splitting == pytest.approx(2 * 3.708e-3, abs=1e-12)


def test_approx_vs_exact_second_order_bound():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        ex, ey, ez = rng.uniform(-50, 50, 3)
        bperp, phi = rng.uniform(0, 1), rng.uniform(0, 2 * math.pi)
        bz = rng.uniform(-200, 200)
        p = SpinParameters(e_x=ex, e_y=ey, e_z=ez,
                           b_field=(bperp * math.cos(phi), bperp * math.sin(phi), bz))
        # second-order shift is set by the gap to the lower +/-1 level, which
        # strain and B_z pull below D
        gap = 2.87 + ez * 1e-3 - math.hypot(math.hypot(ex, ey) * 1e-3, GAMMA * bz)
        bound = 2 * (GAMMA * bperp) ** 2 / gap
        ex_r, ap_r = transition_frequencies_exact(p), transition_frequencies_approx(p)
        assert abs(ex_r.omega_plus - ap_r.omega_plus) <= bound + 1e-12
        assert abs(ex_r.omega_minus - ap_r.omega_minus) <= bound + 1e-12


def test_classify_regime():
    assert classify_regime(SpinParameters(e_x=1.0, b_field=(0, 0, 100.0)), 10) is Regime.HIGH_FIELD
    assert classify_regime(SpinParameters(e_x=1.0), 10) is Regime.LOW_FIELD
    bz = 1.0 / 2.8031
    assert classify_regime(SpinParameters(e_x=1.0, b_field=(0, 0, bz)), 10) is Regime.INTERMEDIATE
    with pytest.raises(InvalidParameterError):
        classify_regime(SpinParameters(), 1.0)


def test_project_to_nv_frame():
    o = OrientationClass(0, NV_AXES[0])
    b_par = 100 * np.asarray(NV_AXES[0])
    assert project_to_nv_frame(b_par, o) == pytest.approx((100.0, 0.0), abs=1e-9)
    perp = np.cross(NV_AXES[0], [0, 0, 1.0])
    perp *= 50 / np.linalg.norm(perp)
    assert project_to_nv_frame(perp, o) == pytest.approx((0.0, 50.0), abs=1e-9)
    assert project_to_nv_frame((100, 0, 0), o)[0] == pytest.approx(57.735026919, abs=1e-8)


def test_orientation_axis_must_be_unit():
    with pytest.raises(InvalidParameterError):
        OrientationClass(0, (1.0, 1.0, 1.0))


def test_high_field_lines_along_111():
    lines = high_field_resonances(100 * np.asarray(NV_AXES[0]), nv_orientations(), C)
    assert lines.n_distinct == 2
    upper = sorted(ln.upper for ln in lines.lines)
    assert upper[-1] == pytest.approx(2.87 + GAMMA * 100, abs=1e-12)
    assert upper[0] == pytest.approx(2.87 + GAMMA * 100 / 3, abs=1e-12)
    assert sum(ln.merged for ln in lines.lines) == 3


def test_high_field_zero_field_single_line():
    lines = high_field_resonances((0, 0, 0), nv_orientations(), C)
    assert lines.n_distinct == 1
    assert all(ln.upper == pytest.approx(2.87) for ln in lines.lines)


def test_high_field_three_populated_classes():
    classes = nv_orientations((1 / 3, 1 / 3, 1 / 3, 0))[:3]
    b = 100 * np.array([0.8, 0.5, 0.33]) / np.linalg.norm([0.8, 0.5, 0.33])
    assert high_field_resonances(b, classes, C).n_distinct == 3


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_high_field_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    b = rng.normal(size=3) * 80
    rot = Rotation.random(random_state=seed)
    base = high_field_resonances(b, nv_orientations(), C)
    axes = rot.apply(np.asarray(NV_AXES))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    rotated = [OrientationClass(i, tuple(a)) for i, a in enumerate(axes)]
    moved = high_field_resonances(rot.apply(b), rotated, C)
    for a, m in zip(base.lines, moved.lines):
        assert a.upper == pytest.approx(m.upper, abs=1e-12)
    assert base.n_distinct == moved.n_distinct


def _member(frac, **kw):
    return OrientationClass(0, NV_AXES[0], frac), SpinParameters(**kw)


def test_ensemble_single_and_degenerate():
    p = SpinParameters(e_x=2.0, e_z=1.0)
    assert ensemble_resonances([_member(1.0, e_x=2.0, e_z=1.0)]) == transition_frequencies_approx(p)
    r = ensemble_resonances([_member(0.5, e_x=2.0, e_z=1.0), _member(0.5, e_x=2.0, e_z=1.0)])
    assert r.omega_plus == pytest.approx(transition_frequencies_approx(p).omega_plus, abs=1e-15)


def test_ensemble_half_strained_halves_splitting():
    x = 3.0  # MHz
    r = ensemble_resonances([_member(0.5), _member(0.5, e_x=x)])
    assert r.splitting == pytest.approx(x * 1e-3, abs=1e-15)
    _, e_perp = observed_strain_components(r)
    assert e_perp == pytest.approx(x / 2, abs=1e-9)


def test_ensemble_bad_fractions():
    with pytest.raises(InvalidEnsembleError):
        ensemble_resonances([_member(0.5), _member(0.4)])


def test_observed_components():
    assert observed_strain_components(ResonancePair(2.87, 2.87)) == (0.0, 0.0)
    r = ResonancePair(2.87 + 5.628e-3 + 3.708e-3, 2.87 + 5.628e-3 - 3.708e-3)
    ez, ep = observed_strain_components(r)
    assert ez == pytest.approx(5.628, abs=1e-9)
    assert ep == pytest.approx(3.708, abs=1e-9)


@given(st.floats(-50, 50), st.floats(0, 50))
def test_observed_round_trip(ez, eperp):
    r = transition_frequencies_approx(SpinParameters(e_x=eperp, e_z=ez))
    got = observed_strain_components(r)
    assert got[0] == pytest.approx(ez, abs=1e-9)
    assert got[1] == pytest.approx(eperp, abs=1e-9)


def test_hyperfine_pairs_zero_field():
    pairs = hyperfine_resolved_pairs(SpinParameters(e_x=0.4))
    (r_m, _), (r_0, _), (r_p, _) = pairs
    assert r_m == r_p
    assert r_0.splitting == pytest.approx(0.8e-3, abs=1e-15)
    assert r_p.splitting == pytest.approx(2 * math.hypot(0.4e-3, 2.16e-3), abs=1e-15)
    assert sum(w for _, w in pairs) == pytest.approx(1.0)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50), st.floats(-200, 200))
def test_approx_exact_without_transverse_field(ex, ey, ez, bz):
    p = SpinParameters(e_x=ex, e_y=ey, e_z=ez, b_field=(0, 0, bz))
    a, e = transition_frequencies_approx(p), transition_frequencies_exact(p)
    assert abs(a.omega_plus - e.omega_plus) < 1e-9
    assert abs(a.omega_minus - e.omega_minus) < 1e-9
