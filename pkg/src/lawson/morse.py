"""Negative directions of the Jacobi operator and of the Allen-Cahn
linearization.

Cone eigenfunctions v(t) = e^{-(N-2)t/2} cos(sqrt(alpha) t) in t = log s are
cut at consecutive zeros to give compactly supported test functions
w_{sigma,k}.  Their quadratic form on Sigma is compared with the cone value
-2 int |A|^2 w^2, and the functions are lifted to the layered Allen-Cahn
approximation through the fiber profile v*'.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import simpson

from .allen_cahn import (C_STAR, LayeredField, _sphere_area, chi, chi_prime, fiber_halfwidth,
                         v_star_prime, v_star_second)
from .errors import PositiveValue, SubcriticalLambda, SupportError
from .surface import ProfileCurve, area_weight, cone_profile
from .toda import A_STAR, lambert_w

__all__ = [
    "ConeEigenData",
    "TestFunction",
    "cone_eigendata",
    "lambda_critical",
    "test_function",
    "quadratic_form",
    "bilinear_form",
    "form_ratio",
    "scan_negativity",
    "infinite_energy_slope",
    "sigma_tilde",
    "lifted_rayleigh",
    "CUTOFFS",
    "morse_report",
    "reduced_prediction",
    "scan_lifted",
]

SUPPORT_TOL = 1e-12
PRECISION_FLOOR = 1e-15


@dataclass(frozen=True)
class ConeEigenData:
    N: int
    lam: float
    alpha_lambda: float

    @property
    def omega(self) -> float:
        return math.sqrt(self.alpha_lambda)

    @property
    def decay(self) -> float:
        return (self.N - 2) / 2

    def v_plus(self, t, nu: int = 0):
        return self._v(t, nu, np.cos, lambda x: -np.sin(x))

    def v_minus(self, t, nu: int = 0):
        return self._v(t, nu, np.sin, np.cos)

    def _v(self, t, nu, f, fp):
        t = np.asarray(t, float)
        g, w = self.decay, self.omega
        e = np.exp(-g * t)
        if nu == 0:
            return e * f(w * t)
        if nu == 1:
            return e * (-g * f(w * t) + w * fp(w * t))
        if nu == 2:
            # f'' = -f for both cos and sin
            return e * ((g * g - w * w) * f(w * t) - 2 * g * w * fp(w * t))
        raise ValueError(nu)

    def residual(self, t, which: str = "plus") -> np.ndarray:
        """v'' + (N-2) v' + (N-1)(1+lambda) v."""
        v = self.v_plus if which == "plus" else self.v_minus
        return v(t, 2) + (self.N - 2) * v(t, 1) + (self.N - 1) * (1 + self.lam) * v(t)

    def zeros(self, count: int, start: int = 0) -> np.ndarray:
        """Zeros t_k = pi (1 + 2k) / (2 sqrt(alpha)) of v_plus."""
        k = np.arange(start, start + count)
        return math.pi * (1 + 2 * k) / (2 * self.omega)

    def zero(self, k: int) -> float:
        return math.pi * (1 + 2 * k) / (2 * self.omega)


def lambda_critical(N: int) -> float:
    """The lambda at which alpha(lambda) = 0."""
    return ((N - 2) ** 2 / 4) / (N - 1) - 1


def cone_eigendata(N: int, lam: float) -> ConeEigenData:
    alpha = -((N - 2) / 2) ** 2 + (N - 1) * (1 + lam)
    if not alpha > 0:
        raise SubcriticalLambda("alpha(lambda) must be positive", N=N, lam=lam, alpha=alpha)
    return ConeEigenData(N=N, lam=float(lam), alpha_lambda=float(alpha))


@dataclass
class TestFunction:
    sigma: float
    k_index: int
    s: np.ndarray
    values: np.ndarray
    derivative: np.ndarray
    eig: ConeEigenData
    __test__ = False  # not a pytest class

    @property
    def support(self) -> tuple[float, float]:
        return float(self.s[0]), float(self.s[-1])

    def __call__(self, s, nu: int = 0) -> np.ndarray:
        """w_{sigma,k}(s) (nu = 0) or its derivative, zero off the support."""
        s = np.asarray(s, float)
        lo, hi = self.support
        inside = (s >= lo) & (s <= hi)
        u = np.log(np.where(inside, s, 1.0))
        if nu == 0:
            out = self.eig.v_plus(u)
        elif nu == 1:
            out = self.eig.v_plus(u, 1) / np.where(inside, s, 1.0)
        else:
            raise ValueError(nu)
        return np.where(inside, out, 0.0)


def test_function(N: int, sigma: float, k_index: int, *, n: int = 801) -> TestFunction:
    """w_{sigma,k}(s) = v_sigma(log s) on [e^{t_k}, e^{t_{k+1}}], lambda = sigma - 2."""
    eig = cone_eigendata(N, sigma - 2)
    u = np.linspace(eig.zero(k_index), eig.zero(k_index + 1), n)
    s = np.exp(u)
    vals = eig.v_plus(u)
    vals[[0, -1]] = 0.0  # exact zeros; the samples differ by rounding only
    return TestFunction(sigma=sigma, k_index=k_index, s=s, values=vals,
                        derivative=eig.v_plus(u, 1) / s, eig=eig)


def _surface_data(profile: ProfileCurve, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = profile.resample(s) if profile.source is not None else profile
    return area_weight(q), q.beta_s


def _prepare(profile: ProfileCurve, phi, s_grid, dphi):
    if isinstance(phi, TestFunction):
        return phi.s, phi.values, phi.derivative
    if callable(phi):
        if s_grid is None:
            raise ValueError("s_grid is required for callable phi")
        s = np.asarray(s_grid, float)
        vals = np.asarray(phi(s), float)
    else:
        vals = np.asarray(phi, float)
        s = np.asarray(profile.s_grid if s_grid is None else s_grid, float)
    if dphi is None:
        d = np.gradient(vals, s, edge_order=2)
    else:
        d = np.asarray(dphi(s) if callable(dphi) else dphi, float)
    return s, vals, d


def _check_support(vals: np.ndarray) -> None:
    scale = max(1.0, float(np.max(np.abs(vals))))
    if abs(vals[0]) > SUPPORT_TOL * scale or abs(vals[-1]) > SUPPORT_TOL * scale:
        raise SupportError("function does not vanish at the grid boundary",
                           left=float(vals[0]), right=float(vals[-1]))


def quadratic_form(profile: ProfileCurve, sigma: float, phi, *, s_grid=None, dphi=None) -> float:
    """Q_sigma(phi) = int |phi'|^2 - beta (1 + sigma) phi^2 with weight a^{m-1} b^{n-1}."""
    s, v, d = _prepare(profile, phi, s_grid, dphi)
    _check_support(v)
    W, beta = _surface_data(profile, s)
    return float(simpson((d**2 - beta * (1 + sigma) * v**2) * W, x=s))


def bilinear_form(profile: ProfileCurve, sigma: float, phi: TestFunction, psi: TestFunction,
                  *, n: int = 4001) -> float:
    """Polarised Q_sigma(phi, psi) on a common grid covering both supports."""
    lo = min(phi.support[0], psi.support[0])
    hi = max(phi.support[1], psi.support[1])
    s = np.exp(np.linspace(math.log(lo), math.log(hi), n))
    W, beta = _surface_data(profile, s)
    f = (phi(s, 1) * psi(s, 1) - beta * (1 + sigma) * phi(s) * psi(s)) * W
    return float(simpson(f, x=s))


def _weighted_A2(profile: ProfileCurve, tf: TestFunction) -> float:
    W, beta = _surface_data(profile, tf.s)
    return float(simpson(beta * tf.values**2 * W, x=tf.s))


def form_ratio(profile: ProfileCurve, sigma: float, k_index: int) -> dict:
    """Q_sigma(w_{sigma,k}) against the cone value -2 int |A|^2 w^2."""
    tf = test_function(profile.dims.N, sigma, k_index)
    Q = quadratic_form(profile, sigma, tf)
    A2 = _weighted_A2(profile, tf)
    return {"sigma": sigma, "k_index": k_index, "support": tf.support, "Q_value": Q,
            "A2_mass": A2, "ratio_to_limit": Q / (-2 * A2),
            "negative_margin": -Q / A2 - 1.0}


def scan_negativity(profile: ProfileCurve, sigma: float, k_values: Sequence[int], *,
                    s_cone: float = 20.0, margin: float = 0.1) -> dict:
    """Evaluate the ratio for each k with support beyond s_cone; k0 is the
    smallest tested k from which Q < -(1 + margin) int |A|^2 w^2 holds on."""
    N = profile.dims.N
    eig = cone_eigendata(N, sigma - 2)
    rows = [form_ratio(profile, sigma, k) for k in k_values if math.exp(eig.zero(k)) >= s_cone]
    k0 = None
    for i in range(len(rows)):
        if all(r["negative_margin"] > margin for r in rows[i:]):
            k0 = rows[i]["k_index"]
            break
    return {"sigma": sigma, "rows": rows, "k0": k0}


def infinite_energy_slope(dims, sigma: float, S_values: Sequence[float], *,
                          per_unit: int = 400) -> dict:
    """int_1^S v_{sigma,+}(log s)^2 beta a^{m-1} b^{n-1} ds on the exact cone
    against log S.  The local slope d I / d log S oscillates about a constant."""
    from .phase_plane import _dims
    d = _dims(dims)
    eig = cone_eigendata(d.N, sigma - 2)
    S_values = np.asarray(sorted(S_values), float)
    u = np.linspace(0.0, math.log(S_values[-1]), int(per_unit * math.log(S_values[-1])) + 1)
    s = np.exp(u)
    cone = cone_profile(d, s)
    f = eig.v_plus(u) ** 2 * cone.beta_s * area_weight(cone) * s  # ds = s du
    from scipy.integrate import cumulative_simpson
    I = cumulative_simpson(f, x=u, initial=0.0)
    vals = np.interp(np.log(S_values), u, I)
    slope = np.polyfit(np.log(S_values), vals, 1)[0]
    local = np.diff(vals) / np.diff(np.log(S_values))
    return {"S": S_values.tolist(), "integral": vals.tolist(), "slope": float(slope),
            "local_slopes": local.tolist(),
            "slope_spread": float((local.max() - local.min()) / abs(slope))}


def sigma_tilde(epsilon: float, profile: ProfileCurve, a_star: float) -> dict:
    """sigma~ = W(2 sqrt2 a* / (eps^2 beta_bar)) with beta_bar = max beta."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    beta = np.asarray(profile.beta_s, float)
    beta = beta[np.isfinite(beta)]
    i = int(np.argmax(beta))
    beta_bar = float(beta[i])
    st = float(lambert_w(2 * SQRT2_ * a_star / (epsilon**2 * beta_bar)))
    sw = lambert_w(2 * SQRT2_ * a_star / (epsilon**2 * beta))
    return {"sigma_tilde": st, "beta_bar": beta_bar, "argmax_s": float(profile.s_grid[i]),
            "monotone_margin": float(np.min(sw - st))}


SQRT2_ = math.sqrt(2.0)

CUTOFFS = ("chi3", "global", "none")


def _lift_profile(field: LayeredField, S: np.ndarray, Z: np.ndarray, tf: TestFunction,
                  cutoff: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """v = sum_j c_j w(eps s~) v*'(z - h_j) and its (s~, z) derivatives."""
    eps = field.epsilon
    s = eps * S
    h = field.layers(s)
    hp = field.layers(s, 1)
    w = tf(s)
    wp = tf(s, 1)
    T = fiber_halfwidth(s, eps)
    v = np.zeros_like(Z)
    vs = np.zeros_like(Z)
    vz = np.zeros_like(Z)
    for j in range(field.k):
        t = Z - h[j]
        p, pp = v_star_prime(t), v_star_second(t)
        if cutoff == "chi3":
            arg = np.abs(t) - T + 3
            c, dc = chi(arg), chi_prime(arg)
            c_t = dc * np.sign(t)
            c_s = -dc * (s / (s**2 + 2)) * 2 * eps / (4 * SQRT2_)
            # d/ds~ of chi3 along fixed z includes the shift of t by h_j
            c_s = c_s - c_t * eps * hp[j]
        else:
            c, c_t, c_s = 1.0, 0.0, 0.0
        v += c * w * p
        vz += c * w * pp + c_t * w * p
        vs += c * (eps * wp * p - eps * w * hp[j] * pp) + c_s * w * p
    if cutoff == "global":
        g, gs, gz = field.zeta(S, Z)
        v, vs, vz = g * v, g * vs + gs * v, g * vz + gz * v
    return v, vs, vz


def lifted_rayleigh(field: LayeredField, profile: ProfileCurve, sigma_t: float, k_index: int,
                    *, cutoff: str = "global", n_s: int = 241, n_z: int = 1601,
                    raise_positive: bool = True) -> dict:
    """int |grad v|^2 + (3 U_1^2 - 1) v^2 over R^{N+1} for the lifted test
    function, in Fermi coordinates, scaled by eps^{N-2}.

    ``cutoff``: "chi3" uses the fiber cutoff chi_3; "global" the gluing
    cutoff zeta; "none" keeps the bare sum on the layer fibers and must
    fail the support check.
    """
    if cutoff not in CUTOFFS:
        raise ValueError(f"cutoff must be one of {CUTOFFS}")
    eps = field.epsilon
    m, n = field.geometry.m, field.geometry.n
    N = m + n - 1
    tf = test_function(N, sigma_t, k_index, n=n_s)
    lo, hi = tf.support
    if hi > field.stack.s_grid[-1]:
        raise SupportError("test function support beyond the layer stack grid",
                           support=(lo, hi), s_max=float(field.stack.s_grid[-1]))
    s = tf.s
    S = s / eps
    if cutoff == "none":
        # bare lift on the union of the layer fibers only
        h = field.layers(s)
        T = fiber_halfwidth(s, eps)
        zlo, zhi = h[0] - T, h[-1] + T
    else:
        from .allen_cahn import glue_halfwidth
        zhi = glue_halfwidth(s, eps)
        zlo = -zhi
    tau = np.linspace(0.0, 1.0, n_z)
    Zg = zlo[:, None] + (zhi - zlo)[:, None] * tau[None, :]
    Sg = np.broadcast_to(S[:, None], Zg.shape)
    v, vs, vz = _lift_profile(field, Sg, Zg, tf, cutoff)
    vmax = float(np.max(np.abs(v)))
    edge = float(max(np.max(np.abs(v[:, 0])), np.max(np.abs(v[:, -1]))))
    if cutoff == "none" and edge > SUPPORT_TOL * max(vmax, 1e-300):
        raise SupportError("lifted function does not vanish on the truncated grid",
                           edge=edge, vmax=vmax)
    if vmax == 0.0:
        raise PositiveValue("lifted test function vanishes identically (cutoff closed)",
                            cutoff=cutoff, k_index=k_index, epsilon=eps,
                            fiber_halfwidth_max=float(np.max(fiber_halfwidth(s, eps))))
    U = field.value(Sg, Zg)
    met = field.metric(Sg, Zg)
    dens = vz**2 + met["g_ss"] * vs**2 + (3 * U**2 - 1) * v**2
    vol = (_sphere_area(m) * _sphere_area(n) * met["A"] ** (m - 1) * met["B"] ** (n - 1)
           * met["lam"])
    inner = simpson(dens * vol, x=tau, axis=1) * (zhi - zlo)
    # ds~ = ds / eps
    value = float(simpson(inner, x=s) / eps)
    norm_inner = simpson(v**2 * vol, x=tau, axis=1) * (zhi - zlo)
    mass = float(simpson(norm_inner, x=s) / eps)
    scaled = value * eps ** (N - 2)
    # U_1 stands in for u_eps: |3u^2 - 3U_1^2| <= 6 |u - U_1|, and |u - U_1|
    # is budgeted by the sup of S(U_1) near the layers on the support
    sub = s[:: max(1, len(s) // 8)]
    hz = field.layers(sub)
    zz = hz[:, :, None] + np.linspace(-3.0, 3.0, 13)[None, None, :]
    ss = np.broadcast_to((sub / eps)[None, :, None], zz.shape)
    budget = float(np.max(np.abs(field.allen_cahn_operator(ss, zz))))
    out = {"sigma": sigma_t, "k_index": k_index, "cutoff": cutoff, "epsilon": eps,
           "support": (lo, hi), "value": value, "lifted_value_scaled": scaled,
           "rayleigh_quotient": value / mass if mass > 0 else math.nan,
           "boundary_value": edge,
           "reduced_prediction": reduced_prediction(profile, field.k, eps, tf),
           "residual_budget": budget,
           "substitution_bound": 6 * budget * mass * eps ** (N - 2)}
    # the negative part is a relative O(eps^2 |A|^2 (1 + sqrt2 w)) correction to
    # terms that cancel exactly on each fiber; below ~1e-15 it drowns in rounding
    W_, beta = _surface_data(profile, s)
    sw = lambert_w(2 * SQRT2_ * A_STAR / (eps**2 * beta))
    gain = float(np.max(eps**2 * beta * (1 + sw)))
    out["relative_gain"] = gain
    out["resolved"] = gain > PRECISION_FLOOR
    if raise_positive and not scaled < 0:
        raise PositiveValue("lifted quadratic form is not negative", **out)
    return out


def scan_lifted(field: LayeredField, profile: ProfileCurve, sigma_t: float,
                k_values: Sequence[int], *, cutoff: str = "global", margin: float = 0.1) -> dict:
    """Lifted values over k_index; k_bar is the smallest tested index from
    which every resolved value is below -margin |reduced prediction|."""
    rows = []
    for k in k_values:
        try:
            rows.append(lifted_rayleigh(field, profile, sigma_t, k, cutoff=cutoff,
                                        raise_positive=False))
        except SupportError as exc:
            rows.append({"k_index": k, "error": exc.record()})
    ok = [("error" not in r and r["resolved"]
           and r["lifted_value_scaled"] < -margin * abs(r["reduced_prediction"])) for r in rows]
    k_bar = None
    for i in range(len(rows)):
        if all(ok[i:]):
            k_bar = rows[i]["k_index"]
            break
    return {"rows": rows, "k_bar": k_bar}


def reduced_prediction(profile: ProfileCurve, k_layers: int, epsilon: float,
                       tf: TestFunction) -> float:
    """Leading-order value of the scaled lifted form: each layer contributes
    c* |S^{m-1}||S^{n-1}| Q_{sigma(s)}(w) with the local level sqrt2 w(s)."""
    W, beta = _surface_data(profile, tf.s)
    sw = lambert_w(2 * SQRT2_ * A_STAR / (epsilon**2 * beta))
    f = (tf.derivative**2 - beta * (1 + sw) * tf.values**2) * W
    m, n = profile.dims.m, profile.dims.n
    return float(k_layers * C_STAR * _sphere_area(m) * _sphere_area(n) * simpson(f, x=tf.s))


def morse_report(form: dict, lifted: dict | None = None) -> dict:
    """JSON record {sigma, k_index, Q_value, ratio_to_limit, lifted_value_scaled, margin}."""
    return {
        "sigma": form["sigma"],
        "k_index": form["k_index"],
        "Q_value": form["Q_value"],
        "ratio_to_limit": form["ratio_to_limit"],
        "lifted_value_scaled": None if lifted is None else lifted["lifted_value_scaled"],
        "margin": form["negative_margin"],
    }


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
