"""Generating curves of the invariant minimal hypersurfaces.

A surface {(a(s) x, b(s) y) : |x| = |y| = 1} in R^m x R^n is encoded by its
arc-length profile (a, b).  Here ``a`` is the radius of the S^{m-1} factor
and ``b`` the radius of the S^{n-1} factor.  The phase-plane orbit that
produces Sigma^branch for dimensions (m, n) is the heteroclinic of the field
with the dimensions exchanged (see :mod:`lawson.phase_plane`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import FitAmbiguous, ReconstructionError
from .phase_plane import Branch, DimensionPair, Orbit, _dims, shoot_heteroclinic, vector_field

__all__ = [
    "ProfileCurve",
    "FitResult",
    "profile",
    "reconstruct_profile",
    "cone_profile",
    "minimality_residual",
    "geometric_data",
    "asymptotic_fit",
    "cone_deviation",
    "area_weight",
    "profile_to_csv",
]

H_DEFAULT = 1e-2
S_MAX_DEFAULT = 100.0


@dataclass
class ProfileCurve:
    s_grid: np.ndarray
    a: np.ndarray
    b: np.ndarray
    a_prime: np.ndarray
    b_prime: np.ndarray
    alpha_s: np.ndarray
    beta_s: np.ndarray
    kappa0: np.ndarray
    dims: DimensionPair
    branch: str
    source: object = field(default=None, repr=False)

    @property
    def r(self) -> np.ndarray:
        return np.hypot(self.a, self.b)

    @property
    def support(self) -> np.ndarray:
        """<p, nu> = -a b' + b a' with nu = (-b' x, a' y)."""
        return -self.a * self.b_prime + self.b * self.a_prime

    @property
    def h(self) -> float:
        return float(self.s_grid[1] - self.s_grid[0])

    def is_uniform(self, rel: float = 1e-9) -> bool:
        ds = np.diff(self.s_grid)
        return bool(np.all(np.abs(ds - ds[0]) <= rel * max(1.0, abs(ds[0])) + 1e-12))

    def resample(self, s_grid: Sequence[float]) -> "ProfileCurve":
        """Evaluate the same curve on another grid (exact, from its source)."""
        if self.source is None:
            raise ValueError("profile has no source to resample from")
        return self.source.evaluate(np.asarray(s_grid, dtype=float))

    def swapped(self) -> "ProfileCurve":
        """Image under the reflection (x, y) -> (y, x)."""
        other = "sigma_plus" if self.branch == "sigma_minus" else (
            "sigma_minus" if self.branch == "sigma_plus" else self.branch)
        return ProfileCurve(
            s_grid=self.s_grid.copy(), a=self.b.copy(), b=self.a.copy(),
            a_prime=self.b_prime.copy(), b_prime=self.a_prime.copy(),
            alpha_s=self.alpha_s.copy(), beta_s=self.beta_s.copy(),
            kappa0=-self.kappa0, dims=self.dims.mirrored(), branch=other, source=None)

    def check_invariants(self, normalized: bool = True) -> dict:
        """Return the measured invariant defects (does not raise)."""
        interior = self.s_grid > 0
        out = {
            "arc_length_defect": float(np.max(np.abs(self.a_prime**2 + self.b_prime**2 - 1))),
            "min_a": float(np.min(self.a[interior])),
            "min_b": float(np.min(self.b[interior])),
            "support_sign_constant": bool(
                np.all(self.support[interior] > 0) or np.all(self.support[interior] < 0)),
            "support_sign": int(np.sign(np.median(self.support[interior]))),
            "beta_positive": bool(np.all(self.beta_s > 0)),
        }
        if normalized:
            out["min_r_defect"] = float(abs(np.min(self.r) - 1.0))
        return out


@dataclass
class FitResult:
    gamma_fit: float
    c_fit: float
    window: tuple[float, float]
    rms: float
    matched: float | None

    def to_dict(self) -> dict:
        return {"gamma_fit": self.gamma_fit, "c_fit": self.c_fit,
                "window": list(self.window), "rms": self.rms, "matched": self.matched}


def _uniform_grid(h: float, s_max: float) -> np.ndarray:
    n = int(round(s_max / h))
    return h * np.arange(n + 1)


class _OrbitSource:
    """Evaluates a normalised profile anywhere on [0, s_far] from the dense
    solution of the shooting run."""

    def __init__(self, orbit: Orbit, dims: DimensionPair) -> None:
        self.orbit = orbit
        self.dims = dims
        self.branch = orbit.branch
        sol = orbit.dense
        t0, t1 = orbit.tau_span
        taus = np.concatenate([np.linspace(t0, t0 + 1.0, 400)[:-1],
                               np.linspace(t0 + 1.0, t1, 20000)])
        y = sol(taus)
        rho = y[2]
        i = int(np.argmin(rho))
        if 0 < i < len(taus) - 1:
            from scipy.optimize import minimize_scalar
            res = minimize_scalar(lambda t: float(sol(t)[2]), bounds=(taus[i - 1], taus[i + 1]),
                                  method="bounded", options={"xatol": 1e-14})
            rho_min = min(float(res.fun), float(rho[i]))
        else:
            rho_min = float(rho[i])
        self.scale = math.exp(rho_min)
        self.taus = taus
        self.arc = y[3] / self.scale
        if np.any(np.diff(self.arc) <= 0):
            raise ReconstructionError("arc length not increasing along the orbit")
        self.s_start = float(self.arc[0])
        self.s_far = float(self.arc[-1])
        om, on = orbit.dims.m, orbit.dims.n  # field dims; geometry uses (on, om)
        r_tip = math.exp(float(y[2][0])) / self.scale
        if self.branch is Branch.sigma_minus:
            self.tip = dict(u=math.pi / 2, v=0.0, r=r_tip,
                            kappa=-(dims.m - 1) / (dims.n * r_tip))
        else:
            self.tip = dict(u=0.0, v=math.pi / 2, r=r_tip,
                            kappa=(dims.n - 1) / (dims.m * r_tip))

    def _tau_of(self, s: np.ndarray) -> np.ndarray:
        tau = np.interp(np.log(s), np.log(self.arc), self.taus)
        sol = self.orbit.dense
        for _ in range(30):
            y = sol(tau)
            r = np.exp(y[2]) / self.scale
            sc = np.sin(y[0]) * np.cos(y[0])
            step = (y[3] / self.scale - s) / (r * sc)
            tau = tau - step
            if np.max(np.abs(step) / np.maximum(1.0, np.abs(tau))) < 1e-15:
                break
        return tau

    def evaluate(self, s_grid: np.ndarray) -> ProfileCurve:
        s_grid = np.asarray(s_grid, dtype=float)
        if np.any(np.diff(s_grid) <= 0) or s_grid[0] < 0:
            raise ValueError("s_grid must be increasing and non-negative")
        if s_grid[-1] > self.s_far:
            raise ReconstructionError("requested arc length beyond the shooting range",
                                      s_requested=float(s_grid[-1]), s_far=self.s_far)
        d = self.dims
        n = len(s_grid)
        u = np.empty(n); v = np.empty(n); r = np.empty(n); kap = np.empty(n)
        near = s_grid < self.s_start
        far = ~near
        if np.any(near):
            # below the first integrated point (distance ~1e-6 from the
            # axis) the curve is the tip to second order
            # axis values; in practice only s = 0 falls here
            tip = self.tip
            if np.any(s_grid[near] > 0):
                raise ReconstructionError("grid point inside the unresolved tip layer")
            u[near] = tip["u"]; v[near] = tip["v"]; r[near] = tip["r"]; kap[near] = tip["kappa"]
        if np.any(far):
            tau = self._tau_of(s_grid[far])
            y = self.orbit.dense(tau)
            uu, vv = y[0], y[1]
            rr = np.exp(y[2]) / self.scale
            x2 = vector_field(self.orbit.dims, (uu, vv))[1]
            sc = np.sin(uu) * np.cos(uu)
            u[far] = uu; v[far] = vv; r[far] = rr
            kap[far] = x2 / (rr * sc)
        return _assemble(s_grid, u, v, r, kap, d, self.branch.value, self)


def _assemble(s, u, v, r, kap, d: DimensionPair, branch: str, source) -> ProfileCurve:
    a = r * np.sin(u)
    b = r * np.cos(u)
    ap = np.sin(v)
    bp = np.cos(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = (d.m - 1) * ap / a + (d.n - 1) * bp / b
        beta = kap**2 + (d.m - 1) * (bp / a) ** 2 + (d.n - 1) * (ap / b) ** 2
    tip = s == 0
    if np.any(tip):
        alpha[tip] = np.inf
        if branch == "sigma_minus":
            beta[tip] = d.n * kap[tip] ** 2 + (d.m - 1) / a[tip] ** 2
            a_tip = a[tip]
            b[tip] = 0.0
            a[tip] = a_tip
        elif branch == "sigma_plus":
            beta[tip] = d.m * kap[tip] ** 2 + (d.n - 1) / b[tip] ** 2
            a[tip] = 0.0
    return ProfileCurve(s_grid=s, a=a, b=b, a_prime=ap, b_prime=bp, alpha_s=alpha,
                        beta_s=beta, kappa0=kap, dims=d, branch=branch, source=source)


def reconstruct_profile(orbit: Orbit, dims, *, h: float = H_DEFAULT,
                        s_max: float = S_MAX_DEFAULT, s_grid: Sequence[float] | None = None,
                        residual_tol: float = 1e-4) -> ProfileCurve:
    """Rebuild (a, b) along arc length from a heteroclinic orbit.

    ``orbit`` must have been shot with the exchanged dimensions
    ``(dims.n, dims.m)``.  The curve is normalised so that its distance to
    the origin is 1 and validated against the minimal-surface equation.
    """
    d = _dims(dims)
    if orbit.dims != d.mirrored():
        raise ReconstructionError(
            "orbit dimensions must be the exchange of the surface dimensions",
            orbit_dims=orbit.dims.as_tuple(), surface_dims=d.as_tuple())
    if orbit.dense is None:
        raise ReconstructionError("orbit carries no dense solution")
    src = _OrbitSource(orbit, d)
    grid = _uniform_grid(h, s_max) if s_grid is None else np.asarray(s_grid, float)
    prof = src.evaluate(grid)
    check = prof if prof.is_uniform() else src.evaluate(_uniform_grid(H_DEFAULT, min(10.0, src.s_far)))
    res = minimality_residual(check)
    if not res < residual_tol:
        raise ReconstructionError("minimal-surface residual too large", residual=res)
    return prof


def profile(dims, branch="sigma_minus", *, h: float = H_DEFAULT, s_max: float = S_MAX_DEFAULT,
            s_grid: Sequence[float] | None = None, arc_stop: float = 1e10) -> ProfileCurve:
    """Shoot and reconstruct Sigma^branch for dimensions (m, n)."""
    d = _dims(dims)
    orbit = shoot_heteroclinic(d.mirrored(), branch, arc_stop=arc_stop)
    return reconstruct_profile(orbit, d, h=h, s_max=s_max, s_grid=s_grid)


class _ConeSource:
    def __init__(self, dims: DimensionPair) -> None:
        self.dims = dims
        self.theta = math.atan(math.sqrt((dims.m - 1) / (dims.n - 1)))

    def evaluate(self, s_grid: np.ndarray) -> ProfileCurve:
        s = np.asarray(s_grid, float)
        n = len(s)
        th = self.theta
        u = np.full(n, th); v = np.full(n, th)
        return _assemble(s, u, v, s.copy(), np.zeros(n), self.dims, "cone", self)


def cone_profile(dims, s_grid: Sequence[float] | None = None, *, h: float = H_DEFAULT,
                 s_max: float = S_MAX_DEFAULT) -> ProfileCurve:
    """The Lawson cone ray (n-1) a^2 = (m-1) b^2 parametrised by distance."""
    src = _ConeSource(_dims(dims))
    grid = _uniform_grid(h, s_max) if s_grid is None else np.asarray(s_grid, float)
    return src.evaluate(grid)


_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def _fd5(y: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Fourth-order centered first and second derivatives on interior
    samples 2..n-3."""
    n = len(y)
    idx = np.arange(2, n - 2)
    win = np.stack([y[idx + k] for k in (-2, -1, 0, 1, 2)])
    return (_D1 @ win) / h, (_D2 @ win) / h**2


def minimality_residual(profile: ProfileCurve, *, s_range: tuple[float, float] | None = None) -> float:
    """Max |-a''b' + a'b'' + (m-1) b'/a - (n-1) a'/b| over interior samples,
    all derivatives taken from centered differences of a and b."""
    p = profile
    if len(p.s_grid) < 5:
        raise ValueError("need at least 5 samples")
    if not p.is_uniform():
        raise ValueError("minimality_residual needs a uniform grid")
    h = p.h
    a1, a2 = _fd5(p.a, h)
    b1, b2 = _fd5(p.b, h)
    a = p.a[2:-2]
    b = p.b[2:-2]
    m, n = p.dims.m, p.dims.n
    res = -a2 * b1 + a1 * b2 + (m - 1) * b1 / a - (n - 1) * a1 / b
    if s_range is not None:
        s = p.s_grid[2:-2]
        res = res[(s >= s_range[0]) & (s <= s_range[1])]
    return float(np.max(np.abs(res)))


def geometric_data(profile: ProfileCurve, method: str = "ode") -> tuple[np.ndarray, np.ndarray]:
    """alpha(s) = (m-1)a'/a + (n-1)b'/b and beta(s) = |A|^2.

    ``method="ode"`` takes the profile curvature from the field (stored on
    the profile); ``"fd"`` recomputes it from centered differences of the
    unit tangent (interior samples only, endpoints copied).
    """
    p = profile
    m, n = p.dims.m, p.dims.n
    kap = p.kappa0
    if method == "fd":
        kap = p.kappa0.copy()
        ap1, _ = _fd5(p.a_prime, p.h)
        bp1, _ = _fd5(p.b_prime, p.h)
        kap[2:-2] = p.a_prime[2:-2] * bp1 - ap1 * p.b_prime[2:-2]
    elif method != "ode":
        raise ValueError(method)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = (m - 1) * p.a_prime / p.a + (n - 1) * p.b_prime / p.b
        beta = kap**2 + (m - 1) * (p.b_prime / p.a) ** 2 + (n - 1) * (p.a_prime / p.b) ** 2
    tip = p.s_grid == 0
    alpha[tip] = p.alpha_s[tip]
    beta[tip] = p.beta_s[tip]
    return alpha, beta


def asymptotic_fit(values: Sequence[float], s_grid: Sequence[float],
                   expected_exponents: Iterable[float], *, window: tuple[float, float] | None = None,
                   rel_tol: float = 0.05, strict: bool = True) -> FitResult:
    """Least-squares fit of log|value| against log s over the last decade
    of the grid (or ``window``)."""
    s = np.asarray(s_grid, float)
    y = np.asarray(values, float)
    if window is None:
        window = (s[-1] / 10.0, s[-1])
    sel = (s >= window[0]) & (s <= window[1]) & (y != 0)
    if sel.sum() < 3:
        raise FitAmbiguous("not enough nonzero samples in the fit window", window=window)
    X = np.log(s[sel])
    Y = np.log(np.abs(y[sel]))
    A = np.column_stack([X, np.ones_like(X)])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    slope, icpt = float(coef[0]), float(coef[1])
    rms = float(np.sqrt(np.mean((A @ coef - Y) ** 2)))
    sign = float(np.sign(np.median(y[sel])))
    matched = None
    for e in expected_exponents:
        if abs(slope - e) <= rel_tol * abs(e):
            matched = float(e)
            break
    res = FitResult(gamma_fit=slope, c_fit=sign * math.exp(icpt),
                    window=(float(window[0]), float(window[1])), rms=rms, matched=matched)
    if strict and matched is None:
        raise FitAmbiguous("fitted slope matches no expected exponent",
                           gamma_fit=slope, expected=list(expected_exponents))
    return res


def cone_deviation(profile: ProfileCurve) -> np.ndarray:
    """Signed distance of each profile point to the cone ray (positive on
    the side of larger a/b)."""
    d = profile.dims
    th = math.atan(math.sqrt((d.m - 1) / (d.n - 1)))
    return profile.a * math.cos(th) - profile.b * math.sin(th)


def area_weight(profile: ProfileCurve) -> np.ndarray:
    """Invariant area density a^{m-1} b^{n-1} (sphere areas omitted)."""
    return profile.a ** (profile.dims.m - 1) * profile.b ** (profile.dims.n - 1)


def profile_to_csv(profile: ProfileCurve, path) -> None:
    p = profile
    data = np.column_stack([p.s_grid, p.a, p.b, p.a_prime, p.b_prime, p.alpha_s, p.beta_s])
    np.savetxt(path, data, delimiter=",", header="s,a,b,ap,bp,alpha,beta", comments="",
               fmt="%.17g")
