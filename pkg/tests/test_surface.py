from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from lawson.errors import FitAmbiguous, ReconstructionError
from lawson.phase_plane import shoot_heteroclinic
from lawson.surface import (area_weight, asymptotic_fit, cone_deviation, cone_profile,
                            geometric_data, minimality_residual, profile, profile_to_csv,
                            reconstruct_profile)


@pytest.fixture(scope="module")
def sigma_plus_44():
    return profile((4, 4), "sigma_plus")


def test_arc_length_and_normalisation(sigma_minus_44):
    inv = sigma_minus_44.check_invariants()
    assert inv["arc_length_defect"] < 1e-8
    assert inv["min_r_defect"] < 1e-6
    assert inv["min_a"] > 0 and inv["min_b"] > 0
    assert inv["beta_positive"]


def test_tip_lies_on_axis(sigma_minus_44, sigma_plus_44):
    # at s = 0 the curve meets an axis; positivity holds for s > 0
    assert sigma_minus_44.b[0] == 0.0 and sigma_minus_44.a[0] == pytest.approx(1.0)
    assert sigma_plus_44.a[0] == 0.0 and sigma_plus_44.b[0] == pytest.approx(1.0)


def test_support_sign_constant(sigma_minus_44, sigma_plus_44):
    inv_m = sigma_minus_44.check_invariants()
    inv_p = sigma_plus_44.check_invariants()
    assert inv_m["support_sign_constant"] and inv_p["support_sign_constant"]
    # v_+ = a b' - a' b > 0 on Sigma^-, i.e. -a b' + b a' < 0
    assert inv_m["support_sign"] == -1
    assert inv_p["support_sign"] == 1


@pytest.mark.xfail(strict=True, reason="contradicts v_+ = a b' - a' b > 0, which is its negative")
def test_support_positive_on_sigma_minus_as_listed(sigma_minus_44):
    s = sigma_minus_44.support[1:]
    assert np.all(s > 0)


def test_asymptotic_to_cone(sigma_minus_44):
    p = sigma_minus_44
    assert p.a[-1] / p.b[-1] == pytest.approx(1.0, abs=1e-4)


def test_cone_asymptotics_of_curvature(sigma_minus_44):
    p = sigma_minus_44
    s = p.s_grid[-1]
    assert p.beta_s[-1] * s**2 == pytest.approx(6.0, rel=0.02)
    assert p.alpha_s[-1] * s == pytest.approx(6.0, rel=0.02)


def test_cone_ray():
    c = cone_profile((4, 4), s_max=20.0)
    assert minimality_residual(c) < 1e-8
    s = c.s_grid[1:]
    assert np.allclose(c.beta_s[1:] * s**2, 6.0, atol=1e-12)
    assert np.allclose(c.a[1:] / c.b[1:], 1.0)


def test_minimality_residual_and_refinement():
    res = [minimality_residual(profile((4, 4), "sigma_minus", h=h, s_max=20.0))
           for h in (2e-2, 1e-2, 5e-3)]
    assert res[1] < 1e-5
    orders = np.log(np.array(res[:-1]) / np.array(res[1:])) / np.log(2)
    assert orders.min() >= 2.0


def test_swapped_axes_without_swapping_dims_is_not_minimal():
    p = profile((3, 5), "sigma_minus", s_max=20.0)
    bad = dataclasses.replace(p, a=p.b, b=p.a, a_prime=p.b_prime, b_prime=p.a_prime)
    assert minimality_residual(bad) > 0.1


def test_reflection_symmetry():
    p = profile((3, 5), "sigma_minus", s_max=50.0)
    q = profile((5, 3), "sigma_plus", s_max=50.0)
    assert np.max(np.abs(p.a - q.b)) < 1e-8
    assert np.max(np.abs(p.b - q.a)) < 1e-8
    assert p.swapped().dims.as_tuple() == (5, 3)


def test_beta_symmetric_under_reflection(sigma_minus_44, sigma_plus_44):
    assert np.max(np.abs(sigma_minus_44.beta_s - sigma_plus_44.beta_s)) < 1e-10


def test_geometric_data_matches_stored(sigma_minus_44):
    alpha, beta = geometric_data(sigma_minus_44)
    i = slice(5, -5)
    assert np.allclose(beta[i], sigma_minus_44.beta_s[i], rtol=1e-6)
    assert np.allclose(alpha[i], sigma_minus_44.alpha_s[i], rtol=1e-6)


def test_tip_curvature(sigma_minus_44):
    assert sigma_minus_44.beta_s[0] == pytest.approx(5.25, abs=1e-10)
    assert sigma_minus_44.beta_s.max() == sigma_minus_44.beta_s[0]


def test_asymptotic_fit_power_law():
    s = np.linspace(50, 100, 200)
    fit = asymptotic_fit(5 * s**-3.0, s, [-3.0])
    assert fit.gamma_fit == pytest.approx(-3.0, abs=1e-3)
    assert fit.c_fit == pytest.approx(5.0, rel=1e-6)


def test_asymptotic_fit_ambiguous():
    s = np.linspace(50, 100, 200)
    with pytest.raises(FitAmbiguous):
        asymptotic_fit(s**-2.5, s, [-2.0, -3.0])


def test_cone_deviation_exponent(sigma_minus_44):
    fit = asymptotic_fit(cone_deviation(sigma_minus_44), sigma_minus_44.s_grid, [-2.0, -3.0])
    assert fit.matched in (-2.0, -3.0)


def test_area_weight(sigma_minus_44):
    p = sigma_minus_44
    assert np.allclose(area_weight(p), p.a**3 * p.b**3)


def test_resample_beyond_range_raises(sigma_minus_44):
    with pytest.raises(ReconstructionError):
        sigma_minus_44.resample([0.0, 1e12])


def test_reconstruct_from_orbit():
    o = shoot_heteroclinic((4, 4), "sigma_minus")
    p = reconstruct_profile(o, (4, 4), s_max=10.0)
    assert minimality_residual(p) < 1e-5


def test_profile_csv(tmp_path, sigma_minus_44):
    profile_to_csv(sigma_minus_44, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "s,a,b,ap,bp,alpha,beta"
    assert len(lines) == sigma_minus_44.s_grid.size + 1
