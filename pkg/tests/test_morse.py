from __future__ import annotations

import math

import numpy as np
import pytest

from lawson import acceptance
from lawson.errors import PositiveValue, SubcriticalLambda, SupportError
from lawson.morse import (bilinear_form, cone_eigendata, form_ratio, infinite_energy_slope,
                          lambda_critical, lifted_rayleigh, morse_report, quadratic_form,
                          scan_lifted, scan_negativity, sigma_tilde,
                          write_report)
from lawson.morse import test_function as make_test_function
from lawson.surface import cone_profile
from lawson.toda import A_STAR


@pytest.fixture(scope="module")
def p50():
    return acceptance._profile((4, 4), "sigma_minus", 50.0)


@pytest.fixture(scope="module")
def deep_field():
    return acceptance._field(0.05, s_max=1e8)


@pytest.fixture(scope="module")
def st005(p50):
    return sigma_tilde(0.05, p50, A_STAR)["sigma_tilde"]


# cone eigenfunctions

def test_alpha_value():
    assert cone_eigendata(7, 10.0).alpha_lambda == pytest.approx(59.75, abs=1e-12)


def test_critical_lambda_rejected():
    assert lambda_critical(7) == pytest.approx(1 / 24)
    with pytest.raises(SubcriticalLambda):
        cone_eigendata(7, 1 / 24)
    with pytest.raises(SubcriticalLambda):
        cone_eigendata(7, 0.0)


def test_eigenfunctions_at_zero():
    e = cone_eigendata(7, 10.0)
    assert e.v_plus(0.0) == 1.0 and e.v_minus(0.0) == 0.0


def test_eigenfunction_residual():
    e = cone_eigendata(7, 10.0)
    t = np.linspace(0, 5, 400)
    assert np.max(np.abs(e.residual(t, "plus"))) < 1e-10
    assert np.max(np.abs(e.residual(t, "minus"))) < 1e-10


def test_zeros():
    e = cone_eigendata(7, 18.0)
    z = e.zeros(6)
    assert np.all(np.diff(z) > 0)
    assert np.max(np.abs(e.v_plus(z))) < 1e-12
    assert z[0] == pytest.approx(math.pi / (2 * math.sqrt(e.alpha_lambda)))


def test_test_function_support():
    tf = make_test_function(7, 20.0, 10)
    e = tf.eig
    assert tf.support == pytest.approx((math.exp(e.zero(10)), math.exp(e.zero(11))))
    assert tf.values[0] == 0.0 and tf.values[-1] == 0.0
    assert tf(np.array([tf.support[0] / 2, tf.support[1] * 2])) == pytest.approx([0.0, 0.0])


# quadratic form

def test_zero_function(p50):
    s = np.linspace(1.0, 40.0, 401)
    assert quadratic_form(p50, 20.0, np.zeros_like(s), s_grid=s) == 0.0


def test_support_error(p50):
    s = np.linspace(1.0, 40.0, 401)
    with pytest.raises(SupportError):
        quadratic_form(p50, 20.0, np.ones_like(s), s_grid=s)


def test_exact_cone_identity():
    tf = make_test_function(7, 20.0, 3)
    c = cone_profile((4, 4), tf.s)
    Q = quadratic_form(c, 20.0, tf)
    A2 = form_ratio(c, 20.0, 3)["A2_mass"]
    assert Q == pytest.approx(-2 * A2, rel=1e-10)


def test_ratio_trend(p50):
    ratios = [form_ratio(p50, 20.0, k)["ratio_to_limit"] for k in (10, 20, 40)]
    assert ratios[0] < ratios[1] < ratios[2] + 1e-12
    assert abs(ratios[-1] - 1) < 0.1


def test_negativity_scan(p50):
    for sigma in (10.0, 20.0, 40.0):
        sc = scan_negativity(p50, sigma, (10, 15, 20, 30, 40))
        assert sc["k0"] is not None
        assert all(r["Q_value"] < -r["A2_mass"] for r in sc["rows"]
                   if r["k_index"] >= sc["k0"])


def test_disjoint_supports_decouple(p50):
    a, b = make_test_function(7, 20.0, 10), make_test_function(7, 20.0, 12)
    off = bilinear_form(p50, 20.0, a, b)
    assert abs(off) < 1e-12
    same = bilinear_form(p50, 20.0, a, a)
    assert same == pytest.approx(quadratic_form(p50, 20.0, a), rel=1e-3)


def test_infinite_energy_grows_like_log():
    out = infinite_energy_slope((4, 4), 20.0, [1e2, 1e3, 1e4, 1e5, 1e6])
    assert out["slope"] > 0
    assert out["slope_spread"] < 0.1


# sigma~

def test_sigma_tilde(p50):
    a = sigma_tilde(0.05, p50, A_STAR)
    b = sigma_tilde(0.025, p50, A_STAR)
    assert a["beta_bar"] == pytest.approx(float(np.max(p50.beta_s)))
    assert a["argmax_s"] == 0.0
    assert b["sigma_tilde"] > a["sigma_tilde"] > 0
    assert a["monotone_margin"] >= 0


# lifted form

def test_lifted_negative(deep_field, p50, st005):
    r = lifted_rayleigh(deep_field, p50, st005, 15)
    assert r["lifted_value_scaled"] < 0
    assert r["resolved"]
    # independent route: the reduced one-dimensional prediction
    assert r["lifted_value_scaled"] == pytest.approx(r["reduced_prediction"], rel=0.2)


def test_two_disjoint_lifted_functions(deep_field, p50, st005):
    r15 = lifted_rayleigh(deep_field, p50, st005, 15)
    r25 = lifted_rayleigh(deep_field, p50, st005, 25)
    assert r15["support"][1] <= r25["support"][0]
    assert r15["lifted_value_scaled"] < 0 and r25["lifted_value_scaled"] < 0


def test_lifted_scan_finds_k_bar(deep_field, p50, st005):
    out = scan_lifted(deep_field, p50, st005, (2, 5, 10))
    assert out["k_bar"] is not None


def test_lifted_without_cutoff_fails_support(deep_field, p50, st005):
    with pytest.raises(SupportError):
        lifted_rayleigh(deep_field, p50, st005, 15, cutoff="none")


def test_lifted_support_beyond_stack(field_005, p50, st005):
    with pytest.raises(SupportError):
        lifted_rayleigh(field_005, p50, st005, 25)


def test_fiber_cutoff_gradient_dominates(deep_field, p50, st005):
    # the fiber cutoff costs O(e^{-L/2}) energy, far above the O(eps^2) gain
    with pytest.raises(PositiveValue):
        lifted_rayleigh(deep_field, p50, st005, 15, cutoff="chi3")


def test_report(tmp_path, p50):
    rep = morse_report(form_ratio(p50, 20.0, 20))
    assert set(rep) == {"sigma", "k_index", "Q_value", "ratio_to_limit",
                        "lifted_value_scaled", "margin"}
    write_report(rep, tmp_path / "m.json")
    assert (tmp_path / "m.json").exists()
