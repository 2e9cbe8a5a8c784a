from __future__ import annotations

import math

import numpy as np
import pytest

from lawson.errors import InvalidDimensions, NotAnEquilibrium
from lawson.phase_plane import (DimensionPair, EquilibriumKind, PhasePoint, divergence,
                                equilibria, equilibria_to_json, linearize, orbit_to_csv,
                                shoot_heteroclinic, vector_field)

SQ2 = math.sqrt(2)


def test_dimension_pair_derived():
    d = DimensionPair(4, 4)
    assert d.N == 7
    assert d.alpha_bar == pytest.approx(math.pi / 4)
    assert (d.gamma_plus, d.gamma_minus) == pytest.approx((-2.0, -3.0))


@pytest.mark.parametrize("m,n", [(2, 3), (3, 4), (1, 8), (2.5, 6)])
def test_dimension_pair_rejects(m, n):
    with pytest.raises(InvalidDimensions):
        DimensionPair(m, n)


def test_vector_field_examples():
    assert vector_field((4, 4), (math.pi / 4, math.pi / 4)) == pytest.approx((0, 0), abs=1e-15)
    du, dv = vector_field((4, 4), (math.pi / 4, 0.0))
    assert du == pytest.approx(SQ2 / 4, abs=1e-12)
    assert dv == pytest.approx(-3 * SQ2 / 2, abs=1e-12)
    assert vector_field((2, 6), (math.pi / 2, math.pi / 2)) == pytest.approx((0, 1), abs=1e-15)


def test_divergence_examples():
    assert divergence((4, 4), (math.pi / 4, math.pi / 4)) == pytest.approx(3.5, abs=1e-12)
    for d in [(4, 4), (2, 6), (5, 3)]:
        assert divergence(d, (math.pi / 2, math.pi / 2)) == pytest.approx(0, abs=1e-15)


def test_divergence_sign_on_rectangles():
    u = np.linspace(0.01, math.pi / 2 - 0.01, 60)
    U, V = np.meshgrid(u, u)
    assert np.all(divergence((4, 4), (U, V)) > 0)
    V2 = np.linspace(-math.pi + 0.01, -math.pi / 2 - 0.01, 60)
    U, V = np.meshgrid(u, V2)
    assert np.all(divergence((4, 4), (U, V)) < 0)


def test_x1_sign_pattern():
    g = np.linspace(0.02, math.pi / 2 - 0.02, 80)
    U, V = np.meshgrid(g, np.linspace(-math.pi + 0.02, math.pi - 0.02, 160))
    X1, _ = vector_field((3, 5), (U, V))
    inside = (U - math.pi < V) & (V < U)
    far = np.abs(np.sin(U - V)) > 1e-6
    assert np.all((X1 > 0)[far] == inside[far])


@pytest.mark.parametrize("dims", [(4, 4), (3, 5), (2, 6), (6, 2), (5, 5)])
def test_equilibria_vanish_and_classify(dims):
    eqs = equilibria(dims)
    assert [e.name for e in eqs] == [f"p{i}" for i in range(1, 8)]
    for e in eqs:
        assert np.hypot(*vector_field(dims, e.location)) < 1e-12
    kinds = {e.name: e.kind for e in eqs}
    assert all(kinds[f"p{i}"] == EquilibriumKind.saddle for i in range(1, 6))
    assert kinds["p6"] == EquilibriumKind.unstable_node
    assert kinds["p7"] == EquilibriumKind.stable_node


def test_equilibria_closed_forms():
    eqs = {e.name: e.location for e in equilibria((3, 5))}
    a = math.atan(math.sqrt(2))
    assert (eqs["p6"].u, eqs["p6"].v) == pytest.approx((a, a), abs=1e-14)
    assert (eqs["p7"].u, eqs["p7"].v) == pytest.approx((a, a - math.pi), abs=1e-14)


def test_p6_spectrum_closed_form():
    e = {x.name: x for x in equilibria((4, 4))}
    vals, _ = linearize((4, 4), e["p6"])
    assert sorted(vals.real) == pytest.approx([1.5, 2.0], abs=1e-10)


def test_p1_spectrum_is_one_and_minus_n_minus_one():
    # the pair (1, -(n-1)) is carried by p1 = (0, -pi/2)
    e = {x.name: x for x in equilibria((2, 6))}
    vals, _ = linearize((2, 6), e["p1"])
    assert sorted(vals.real) == pytest.approx([-5.0, 1.0], abs=1e-12)


@pytest.mark.xfail(strict=True, reason="p2 carries (n-1, -1); (1, -(n-1)) belongs to p1")
@pytest.mark.parametrize("dims,expected", [((4, 4), [-3.0, 1.0]), ((2, 6), [-5.0, 1.0])])
def test_p2_spectrum_as_listed(dims, expected):
    e = {x.name: x for x in equilibria(dims)}
    vals, _ = linearize(dims, e["p2"])
    assert sorted(vals.real) == pytest.approx(expected, abs=1e-10)


def test_p2_spectrum_from_jacobian():
    for dims in [(4, 4), (2, 6), (3, 5)]:
        e = {x.name: x for x in equilibria(dims)}
        vals, _ = linearize(dims, e["p2"])
        assert sorted(vals.real) == pytest.approx([-1.0, dims[1] - 1.0], abs=1e-12)


def test_p6_eigenvectors_are_eigenvectors():
    from lawson.phase_plane import jacobian
    e = {x.name: x for x in equilibria((4, 4))}
    vals, vecs = linearize((4, 4), e["p6"])
    J = jacobian((4, 4), e["p6"].location)
    for lam, v in zip(vals, np.asarray(vecs).T):
        assert np.allclose(J @ v, lam * v, atol=1e-12)


@pytest.mark.xfail(strict=True, reason="listed xi_1 slope -0.6 is not an eigenvector of the Jacobian at p6")
def test_p6_xi1_as_listed():
    e = {x.name: x for x in equilibria((4, 4))}
    _, vecs = linearize((4, 4), e["p6"])
    slopes = [v[1] / v[0] for v in np.asarray(vecs).T]
    assert any(abs(s + 0.6) < 1e-10 for s in slopes)


def test_linearize_rejects_non_equilibrium():
    with pytest.raises(NotAnEquilibrium):
        linearize((4, 4), PhasePoint(0.3, 0.2))


@pytest.mark.parametrize("branch,target,sign", [("sigma_minus", (math.pi / 2, 0.0), 1),
                                                ("sigma_plus", (0.0, math.pi / 2), -1)])
def test_heteroclinic_44(branch, target, sign):
    o = shoot_heteroclinic((4, 4), branch)
    assert o.monotone_u_sign == sign
    assert o.u_monotone
    assert math.hypot(o.u[-1] - target[0], o.v[-1] - target[1]) < 1e-8
    assert (o.u[0], o.v[0]) == pytest.approx((math.pi / 4, math.pi / 4), abs=1e-6)


def test_heteroclinic_26_converges():
    o = shoot_heteroclinic((2, 6), "sigma_minus")
    assert o.endpoint_distance < 1e-8
    assert o.target.name == "p4"


def test_heteroclinic_26_leaves_node_along_slow_direction():
    # the orbit first moves to u < alpha_bar, then turns towards p4
    o = shoot_heteroclinic((2, 6), "sigma_minus")
    dip = o.u.min() - o.origin.location.u
    assert -1e-4 < dip < -1e-5
    dip_other = shoot_heteroclinic((2, 6), "sigma_minus", offset=1e-4).u.min() - o.origin.location.u
    assert dip_other == pytest.approx(dip, rel=0.05)


def test_orbit_satisfies_ode():
    o = shoot_heteroclinic((3, 5), "sigma_plus")
    assert o.ode_defect() < 1e-6


def test_integrator_self_consistency():
    a = shoot_heteroclinic((4, 4), "sigma_minus", rtol=1e-12)
    b = shoot_heteroclinic((4, 4), "sigma_minus", rtol=1e-13)
    assert abs(a.u[-1] - b.u[-1]) + abs(a.v[-1] - b.v[-1]) < 10 * 1e-8


def test_exports(tmp_path):
    o = shoot_heteroclinic((4, 4), "sigma_minus")
    orbit_to_csv(o, tmp_path / "o.csv")
    head = (tmp_path / "o.csv").read_text().splitlines()[0]
    assert head == "t,u,v"
    js = equilibria_to_json(equilibria((4, 4)))
    import json
    data = json.loads(js)
    assert len(data) == 7 and {"location", "kind", "eigenvalues", "eigenvectors"} <= set(data[0])
