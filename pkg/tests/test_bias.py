"""
Goal: Bias potentials hit their knots, stay smooth, and their analytic gradients
match finite differences.
"""

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from cphlab.models.errors import DomainError
from cphlab.models.schemas import SiteSpec
from cphlab.models.units import LN10, kt
from cphlab.services.bias import (
    CalibrationPolynomial,
    DoubleWellSpline,
    PhOffset,
    SitePotential,
    confining_wall,
    eval_total_bias,
    eval_vdw,
    eval_vmm,
    eval_vph,
)

H = 1e-6


def _fd(fn, x):
    return (fn(x + H) - fn(x - H)) / (2 * H)


def _off_knots(x, breakpoints):
    # central differences straddling a knot see the jump in curvature
    return min(abs(x - b) for b in breakpoints) > 1e-3


def test_spline_passes_through_knots():
    sp = DoubleWellSpline(barrier_height=6.0, well1_depth=2.0)
    v, g = eval_vdw(sp, np.array([0.0, 0.5, 1.0]))
    assert v == pytest.approx([0.0, 1.0 + 6.0, 2.0])
    assert g == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)


def test_spline_walls_rise_above_wells():
    sp = DoubleWellSpline(wall_height=30.0)
    v, _ = eval_vdw(sp, np.array([-0.15, 1.15]))
    # the quartic wall adds a little beyond 1.1
    assert v[0] >= 30.0 and v[1] >= 30.0
    assert v[0] == pytest.approx(30.0 + 1e6 * 0.05**4)


def test_spline_rejects_misordered_wells():
    with pytest.raises(ValidationError):
        DoubleWellSpline(well0_center=0.6, well1_center=1.0)


def test_with_centers_moves_minimum():
    sp = DoubleWellSpline().with_centers(0.05, 0.95)
    lam = np.linspace(-0.1, 0.45, 2001)
    v, _ = eval_vdw(sp, lam)
    assert lam[np.argmin(v)] == pytest.approx(0.05, abs=1e-3)


@settings(max_examples=60, deadline=None)
@given(
    lam=st.floats(min_value=-0.14, max_value=1.14),
    barrier=st.floats(min_value=0.0, max_value=20.0),
    depth=st.floats(min_value=-10.0, max_value=10.0),
)
def test_vdw_gradient_matches_finite_difference(lam, barrier, depth):
    sp = DoubleWellSpline(barrier_height=barrier, well1_depth=depth)
    assume(_off_knots(lam, sp.breakpoints))
    g = float(eval_vdw(sp, lam)[1])
    fd = float(_fd(lambda x: eval_vdw(sp, x)[0], lam))
    assert abs(g - fd) <= 1e-5 * max(1.0, abs(g))


def test_wall_is_zero_inside_and_quartic_outside():
    v, g = confining_wall(np.array([0.0, 1.1, 1.2, -0.2]), 1.0e6)
    assert v[:2] == pytest.approx([0.0, 0.0])
    assert v[2] == pytest.approx(1e6 * 0.1**4)
    assert g[3] == pytest.approx(-4e6 * 0.1**3)


def test_vph_is_linear():
    off = PhOffset(pka_ref=4.0, pH=3.0)
    v, g = eval_vph(off, np.array([0.0, 1.0]))
    assert v[0] == 0.0
    assert v[1] == pytest.approx(LN10 * kt(300.0))
    assert g[0] == g[1]


def test_vmm_domain_and_value():
    c = np.zeros((3, 3))
    c[1, 0] = 2.0
    c[1, 1] = 3.0
    poly = CalibrationPolynomial.from_array(c)
    v, gp, gt = eval_vmm(poly, 0.5, 0.5)
    assert float(v) == pytest.approx(2.0 * 0.5 + 3.0 * 0.25)
    assert float(gp) == pytest.approx(2.0 + 3.0 * 0.5)
    assert float(gt) == pytest.approx(3.0 * 0.5)
    with pytest.raises(DomainError):
        eval_vmm(poly, 1.2, 0.0)


def test_polynomial_shape_is_validated():
    with pytest.raises(ValidationError):
        CalibrationPolynomial(degree_p=2, degree_t=2, coeffs=[[0.0, 0.0]])


@settings(max_examples=40, deadline=None)
@given(
    lp=st.floats(min_value=-0.14, max_value=1.14),
    lt=st.floats(min_value=-0.14, max_value=1.14),
)
def test_tautomeric_bias_gradients(lp, lt):
    spec = SiteSpec(id="HIS", pka=6.3816, pka_delta=6.53, pka_eps=6.92)
    c = np.zeros((3, 3))
    c[2, 1] = -4.0
    c[1, 2] = 1.5
    site = SitePotential.from_spec(spec, CalibrationPolynomial.from_array(c))
    assume(_off_knots(lp, site.spline_p.breakpoints) and _off_knots(lt, site.spline_t_prot.breakpoints))
    _, gp, gt = eval_total_bias(site, 6.0, lp, lt)
    fd_p = _fd(lambda x: eval_total_bias(site, 6.0, x, lt)[0], lp)
    fd_t = _fd(lambda x: eval_total_bias(site, 6.0, lp, x)[0], lt)
    assert abs(float(gp) - float(fd_p)) <= 1e-5 * max(1.0, abs(float(gp)))
    assert abs(float(gt) - float(fd_t)) <= 1e-5 * max(1.0, abs(float(gt)))


def test_non_tautomeric_site_ignores_lambda_t():
    site = SitePotential.from_spec(SiteSpec(id="GLU", pka=4.25))
    e0, _, gt0 = eval_total_bias(site, 4.0, 0.3, 0.0)
    e1, _, gt1 = eval_total_bias(site, 4.0, 0.3, 0.9)
    assert float(e0) == float(e1)
    assert float(gt0) == float(gt1) == 0.0
