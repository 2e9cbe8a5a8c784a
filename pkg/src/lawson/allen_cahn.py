"""Allen-Cahn layers built on top of a Jacobi-Toda layer stack.

The one-dimensional kit (the heteroclinic v*, the correctors psi_0, psi_1,
psi_2 and the constants a*, c*) lives at the top.  Below it the multi-layer
ansatz is assembled in Fermi coordinates (s~, z) of the dilated surface
Sigma_eps = Sigma / eps, where s~ is arc length on Sigma_eps and z the
signed normal distance along nu = (-b' x, a' y).  Layer l sits at
z = h_l(eps s~) and its fiber coordinate is t = z - h_l.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.interpolate import CubicHermiteSpline, make_interp_spline

from .errors import ExpansionMismatch, OverlapError, QuadratureError
from .surface import ProfileCurve
from .toda import A_STAR, LayerStack, SQRT2

__all__ = [
    "ProfileKit",
    "profile_kit",
    "chi",
    "LayeredField",
    "fermi_assemble",
    "fiber_halfwidth",
    "residual_eval",
    "residual_sweep",
    "projection",
    "energy",
    "field_to_csv",
    "global_to_csv",
    "energy_to_csv",
]

C_STAR = 2.0 * SQRT2 / 3.0


def v_star(t):
    return np.tanh(np.asarray(t, float) / SQRT2)


def v_star_prime(t):
    x = np.asarray(t, float) / SQRT2
    return 1.0 / (SQRT2 * np.cosh(x) ** 2)


def _sech2(t):
    """1 - v*^2 without the cancellation of 1 - tanh^2."""
    return 1.0 / np.cosh(np.asarray(t, float) / SQRT2) ** 2


def v_star_second(t):
    x = np.asarray(t, float) / SQRT2
    return -np.tanh(x) / np.cosh(x) ** 2


def _growing(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Second kernel element v*' int dt / v*'^2 (odd, Wronskian 1 with v*')."""
    x = t / SQRT2
    s2 = 1.0 / np.cosh(x) ** 2
    P = 3 * x / 8 + np.sinh(2 * x) / 4 + np.sinh(4 * x) / 32
    Pp = 3.0 / 8 + np.cosh(2 * x) / 2 + np.cosh(4 * x) / 8
    y = 2 * s2 * P
    yp = (2 * s2 * Pp - 4 * s2 * np.tanh(x) * P) / SQRT2
    return y, yp


def _simpson_total(f: np.ndarray, t: np.ndarray) -> float:
    return float(simpson(f, x=t))


@dataclass
class _Corrector:
    """Sampled bounded solution of L psi = g with its derivative."""

    t: np.ndarray
    values: np.ndarray
    deriv: np.ndarray
    rhs: Callable[[np.ndarray], np.ndarray]
    left: float
    right: float

    def __post_init__(self) -> None:
        self._spline = CubicHermiteSpline(self.t, self.values, self.deriv)

    def __call__(self, t, nu: int = 0) -> np.ndarray:
        t = np.asarray(t, float)
        if nu == 2:
            return self.rhs(t) - (1 - 3 * v_star(t) ** 2) * self(t)
        lo, hi = self.t[0], self.t[-1]
        tc = np.clip(t, lo, hi)
        out = self._spline(tc, nu)
        if nu == 0:
            out = np.where(t < lo, self.left, np.where(t > hi, self.right, out))
        else:
            out = np.where((t < lo) | (t > hi), 0.0, out)
        return out


@dataclass
class ProfileKit:
    t: np.ndarray
    a_star: float
    c_star: float
    psi0: _Corrector
    psi1: _Corrector
    psi2: _Corrector
    T: float
    checks: dict = field(default_factory=dict)

    v_star = staticmethod(v_star)
    v_star_prime = staticmethod(v_star_prime)
    v_star_second = staticmethod(v_star_second)

    def g0(self, t):
        t = np.asarray(t, float)
        return 6 * _sech2(t) * np.exp(-SQRT2 * t) - self.a_star * v_star_prime(t)

    def samples(self) -> dict:
        """psi_i sampled on |t| <= T."""
        sel = np.abs(self.t) <= self.T + 1e-12
        t = self.t[sel]
        return {"t": t, "psi0": self.psi0.values[sel], "psi1": self.psi1.values[sel],
                "psi2": self.psi2.values[sel]}


def _bounded_solution(t: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Variation of parameters with y1 = v*', y2 growing, W(y1, y2) = 1.

    psi = -y1 int_0^t y2 g + y2 int_{-inf}^t y1 g.  The second coefficient
    is accumulated from the nearer end on each half line (the two agree
    because g is orthogonal to v*').  Its relative error at a grid end is
    O(1) and decays like e^{-sqrt2 d} with the distance d from that end, so
    callers integrate on a wider window than they keep.
    """
    y1 = v_star_prime(t)
    y1p = v_star_second(t)
    y2, y2p = _growing(t)
    i0 = int(np.argmin(np.abs(t)))
    if t[i0] != 0.0:
        raise ValueError("t grid must contain 0")
    # both coefficients grow away from 0 or from the ends, so each is
    # accumulated outward in the direction of growth
    f2 = y2 * g
    up = cumulative_simpson(f2[i0:], x=t[i0:], initial=0.0)
    down = cumulative_simpson(f2[i0::-1], x=-t[i0::-1], initial=0.0)
    c1 = -np.concatenate([-down[:0:-1], up])
    f1 = y1 * g
    left = cumulative_simpson(f1, x=t, initial=0.0)
    right = cumulative_simpson(f1[::-1], x=-t[::-1], initial=0.0)[::-1]
    c2 = np.where(t <= 0, left, -right)
    psi = c1 * y1 + c2 * y2
    dpsi = c1 * y1p + c2 * y2p
    return psi, dpsi


def profile_kit(T: float = 12.0, *, T_quad: float = 24.0, dt: float = 2.5e-3,
                tol_orth: float = 1e-10, tol_identity: float = 1e-8) -> ProfileKit:
    """Build the one-dimensional profile kit and verify its identities.

    The correctors are integrated on |t| <= T_quad (where v*' reaches
    round-off) so that orthogonality and the identities are not limited by
    truncation; ``T`` only controls the exported sample window.
    """
    n = int(round(T_quad / dt))
    t = dt * np.arange(-n, n + 1)
    tw = dt * np.arange(-2 * n, 2 * n + 1)
    keep = slice(n, 3 * n + 1)
    vp = v_star_prime(t)
    v = v_star(t)
    c_star = _simpson_total(vp**2, t)
    inter = 6 * _sech2(t) * np.exp(-SQRT2 * t)
    a_star = _simpson_total(inter * vp, t) / c_star

    g0 = lambda s: 6 * _sech2(s) * np.exp(-SQRT2 * s) - a_star * v_star_prime(s)
    g1 = lambda s: -v_star_second(s)
    g2 = lambda s: s * v_star_prime(s)
    ends = {0: (-12.0, 0.0), 1: (0.0, 0.0), 2: (0.0, 0.0)}
    psis = []
    orth = {}
    for i, g in enumerate((g0, g1, g2)):
        psi, dpsi = _bounded_solution(tw, g(tw))
        psi, dpsi = psi[keep], dpsi[keep]
        # remove the kernel component
        coef = _simpson_total(psi * vp, t) / c_star
        psi = psi - coef * vp
        dpsi = dpsi - coef * v_star_second(t)
        orth[f"psi{i}"] = abs(_simpson_total(psi * vp, t))
        psis.append(_Corrector(t, psi, dpsi, g, *ends[i]))

    psi0, psi1, psi2 = psis
    id2 = 6 * _simpson_total(psi2.values * v * vp**2, t)
    id0 = 6 * _simpson_total((psi0.values - 2 * np.exp(-SQRT2 * t)) * v * vp**2, t)
    checks = {
        "c_star": c_star,
        "c_star_defect": abs(c_star - C_STAR),
        "a_star": a_star,
        "a_star_defect": abs(a_star - A_STAR),
        "orthogonality": orth,
        "identity_psi2": id2,
        "identity_psi2_target": -c_star / 2,
        "identity_psi2_defect": abs(id2 + c_star / 2),
        "identity_psi0": id0,
        "identity_psi0_target": SQRT2 * a_star * c_star,
        "identity_psi0_defect": abs(id0 - SQRT2 * a_star * c_star),
        "psi1_closed_form_defect": float(np.max(np.abs(psi1.values + t * vp / 2))),
        "psi0_left_limit": float(psi0.values[0]),
        "printed_identity_psi0": _printed_identity_psi0(psi0, t),
    }
    if max(orth.values()) > tol_orth:
        raise QuadratureError("corrector not orthogonal to v*'", **orth)
    if checks["identity_psi2_defect"] > tol_identity:
        raise QuadratureError("psi_2 identity fails", value=id2, target=-c_star / 2)
    if checks["identity_psi0_defect"] > tol_identity:
        raise QuadratureError("psi_0 identity fails", value=id0,
                              target=SQRT2 * a_star * c_star)
    return ProfileKit(t=t, a_star=a_star, c_star=c_star, psi0=psi0, psi1=psi1, psi2=psi2,
                      T=T, checks=checks)


def _printed_identity_psi0(psi0: _Corrector, t: np.ndarray) -> dict:
    """The literal form 6 int (psi_0 - 2 e^{sqrt2 t}) v*' over growing windows.

    Its integrand tends to a nonzero constant as t -> +inf, so the partial
    integrals grow linearly; recorded only as a diagnostic.
    """
    out = {}
    for L in (6.0, 12.0, 24.0):
        sel = np.abs(t) <= L
        f = (psi0.values[sel] - 2 * np.exp(SQRT2 * t[sel])) * v_star_prime(t[sel])
        out[f"L={L:g}"] = 6 * _simpson_total(f, t[sel])
    return out


# --------------------------------------------------------------------------
# cutoff

def chi(t):
    """C^2 plateau cutoff: 1 for t <= 1, 0 for t >= 2 (quintic smoothstep)."""
    u = np.clip(np.asarray(t, float) - 1.0, 0.0, 1.0)
    return 1.0 - u**3 * (10 - 15 * u + 6 * u**2)


def chi_prime(t):
    u = np.clip(np.asarray(t, float) - 1.0, 0.0, 1.0)
    return -30 * u**2 * (1 - u) ** 2


def log_scale(s, epsilon: float):
    """log(s^2 + 2) + 2 |log eps|, the common width of all neighbourhoods."""
    return np.log(np.asarray(s, float) ** 2 + 2) + 2 * abs(math.log(epsilon))


def fiber_halfwidth(s, epsilon: float):
    return log_scale(s, epsilon) / (4 * SQRT2)


def glue_halfwidth(s, epsilon: float):
    """|z| beyond which the gluing cutoff zeta vanishes."""
    return 4 / SQRT2 * log_scale(s, epsilon)


def _sphere_area(d: int) -> float:
    """|S^{d-1}|."""
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


# --------------------------------------------------------------------------
# layer interpolation and surface geometry

class _LayerSplines:
    """Quintic splines of h_j in x = asinh(s), extended evenly through s = 0."""

    def __init__(self, stack: LayerStack) -> None:
        x = np.arcsinh(stack.s_grid)
        xe = np.concatenate([-x[::-1], x])
        self.k = stack.k
        self.s_max = float(stack.s_grid[-1])
        self._sp = [make_interp_spline(xe, np.concatenate([hj[::-1], hj]), k=5)
                    for hj in stack.h]

    def __call__(self, s, nu: int = 0) -> np.ndarray:
        s = np.abs(np.asarray(s, float))
        x = np.arcsinh(s)
        c = np.cosh(x)
        out = []
        for sp in self._sp:
            if nu == 0:
                out.append(sp(x))
            elif nu == 1:
                out.append(sp(x, 1) / c)
            elif nu == 2:
                out.append((sp(x, 2) - np.tanh(x) * sp(x, 1)) / c**2)
            else:
                raise ValueError(nu)
        return np.array(out)


_TIP_CLAMP = 1e-5


class _Geometry:
    """Profile data at arbitrary arc lengths (exact resampling, cached)."""

    def __init__(self, profile: ProfileCurve) -> None:
        self.profile = profile
        self.m, self.n = profile.dims.m, profile.dims.n

    def at(self, s) -> dict:
        s = np.abs(np.asarray(s, float))
        shape = s.shape
        s = np.where(s < _TIP_CLAMP, 0.0, s).ravel()
        u, inv = np.unique(s, return_inverse=True)
        p = self.profile.resample(u)
        m, n = self.m, self.n
        a, b, ap, bp, kap = p.a, p.b, p.a_prime, p.b_prime, p.kappa0
        with np.errstate(divide="ignore", invalid="ignore"):
            dkap = (-(m - 1) * (kap * ap * a - ap * bp) / a**2
                    + (n - 1) * (-kap * bp * b - ap * bp) / b**2)
        dkap = np.where(u == 0, 0.0, dkap)
        data = {"a": a, "b": b, "ap": ap, "bp": bp, "kappa": kap, "dkappa": dkap,
                "beta": p.beta_s, "alpha": p.alpha_s}
        return {key: val[inv].reshape(shape) for key, val in data.items()}


# --------------------------------------------------------------------------
# the layered field

ETA_CONVENTIONS = ("matched", "consistent", "printed")


@dataclass
class LayeredField:
    """U_0 / U_1 on the layer fibers plus everything needed to re-evaluate them.

    ``U0`` and ``U1`` have shape (k, n_s, n_t): layer l, fiber node s_i and
    fiber coordinate t = tau_j T(s_i) with T the fiber half-width.
    """

    profile: ProfileCurve
    stack: LayerStack
    epsilon: float
    kit: ProfileKit
    s: np.ndarray
    tau: np.ndarray
    U0: np.ndarray
    U1: np.ndarray
    eta: str = "matched"
    checks: dict = field(default_factory=dict)
    global_samples: dict | None = None

    def __post_init__(self) -> None:
        self.layers = _LayerSplines(self.stack)
        self.geometry = _Geometry(self.profile)

    @property
    def k(self) -> int:
        return self.stack.k

    @property
    def t(self) -> np.ndarray:
        return fiber_halfwidth(self.s, self.epsilon)[:, None] * self.tau[None, :]

    def H(self, z) -> np.ndarray:
        """Far-field values: -1 on the z < 0 side, (-1)^{k-1} on the other."""
        return np.where(np.asarray(z) < 0, -1.0, float((-1) ** (self.k - 1)))

    # -- evaluation -------------------------------------------------------
    def jets(self, s_tilde, z, *, corrected: bool = True) -> dict:
        """U (= U_1, or U_0 when ``corrected`` is False) and its z-derivatives."""
        s_tilde = np.asarray(s_tilde, float)
        z = np.asarray(z, float)
        s_tilde, z = np.broadcast_arrays(s_tilde, z)
        eps = self.epsilon
        s = eps * np.abs(s_tilde)
        h = self.layers(s)
        kit = self.kit
        k = self.k
        U = np.full(z.shape, ((-1) ** (k - 1) - 1) / 2.0)
        Uz = np.zeros(z.shape)
        Uzz = np.zeros(z.shape)
        if corrected:
            hp = self.layers(s, 1)
            beta = self.geometry.at(s)["beta"]
            gaps = np.exp(-SQRT2 * np.diff(h, axis=0))
        for j in range(k):
            sign = 1.0 if j % 2 == 0 else -1.0
            t = z - h[j]
            U += sign * v_star(t)
            Uz += sign * v_star_prime(t)
            Uzz += sign * v_star_second(t)
            if not corrected:
                continue
            em = gaps[j - 1] if j > 0 else 0.0
            ep = gaps[j] if j < k - 1 else 0.0
            c1 = eps**2 * hp[j] ** 2
            c2 = eps**2 * beta
            if self.eta == "printed":
                lo, hi = -t, t
            else:
                lo, hi = t, -t
            # d/dt psi0(-t) = -psi0'(-t)
            dlo, dhi = (-1.0, 1.0) if self.eta == "printed" else (1.0, -1.0)
            eta = (-em * kit.psi0(lo) + ep * kit.psi0(hi)
                   + c1 * kit.psi1(t) + c2 * kit.psi2(t))
            eta_z = (-em * dlo * kit.psi0(lo, 1) + ep * dhi * kit.psi0(hi, 1)
                     + c1 * kit.psi1(t, 1) + c2 * kit.psi2(t, 1))
            eta_zz = (-em * kit.psi0(lo, 2) + ep * kit.psi0(hi, 2)
                      + c1 * kit.psi1(t, 2) + c2 * kit.psi2(t, 2))
            U += sign * eta
            Uz += sign * eta_z
            Uzz += sign * eta_zz
            if self.eta == "matched" and j > 0:
                # both neighbours tend to sign * 12 e^- between them; keep it once
                U -= sign * (-kit.psi0.left) * em
        return {"U": U, "Uz": Uz, "Uzz": Uzz}

    def value(self, s_tilde, z, *, corrected: bool = True) -> np.ndarray:
        return self.jets(s_tilde, z, corrected=corrected)["U"]

    def s_derivatives(self, s_tilde, z, *, step: float = 0.05,
                      corrected: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """U_s~ and U_s~s~ at fixed z by fourth-order central differences.

        U is even in s~, so stencils reaching across the tip reflect."""
        s_tilde, z = np.broadcast_arrays(np.asarray(s_tilde, float), np.asarray(z, float))
        f = {d: self.value(s_tilde + d * step, z, corrected=corrected)
             for d in (-2, -1, 1, 2)}
        f0 = self.value(s_tilde, z, corrected=corrected)
        d1 = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * step)
        d2 = (-f[-2] + 16 * f[-1] - 30 * f0 + 16 * f[1] - f[2]) / (12 * step**2)
        return d1, d2

    def metric(self, s_tilde, z) -> dict:
        """Exact metric data of the Fermi chart at (s~, z).

        Volume density rho = (1 - eps z kappa) A^{m-1} B^{n-1} with
        A = |x|, B = |y| at the point; the Laplacian is
        g (U_ss + d_s log(rho g) U_s) + U_zz + d_z log(rho) U_z,
        g = (1 - eps z kappa)^{-2}.
        """
        eps = self.epsilon
        s_tilde, z = np.broadcast_arrays(np.asarray(s_tilde, float), np.asarray(z, float))
        geo = self.geometry.at(eps * s_tilde)
        m, n = self.geometry.m, self.geometry.n
        a, b, ap, bp, kap = geo["a"], geo["b"], geo["ap"], geo["bp"], geo["kappa"]
        lam = 1 - eps * z * kap
        A = a / eps - z * bp
        B = b / eps + z * ap
        with np.errstate(divide="ignore", invalid="ignore"):
            dz_log = -eps * kap / lam - (m - 1) * bp / A + (n - 1) * ap / B
            ds_log = (eps**2 * z * geo["dkappa"] / lam
                      + (m - 1) * ap * lam / A + (n - 1) * bp * lam / B)
        return {"lam": lam, "A": A, "B": B, "dz_log_rho": dz_log,
                "ds_log_rho_g": ds_log, "g_ss": 1.0 / lam**2}

    def allen_cahn_operator(self, s_tilde, z, *, corrected: bool = True,
                            step: float = 0.05) -> np.ndarray:
        """S(U) = Delta U + U (1 - U^2) with the exact invariant Laplacian."""
        jet = self.jets(s_tilde, z, corrected=corrected)
        Us, Uss = self.s_derivatives(s_tilde, z, step=step, corrected=corrected)
        met = self.metric(s_tilde, z)
        lap = (met["g_ss"] * (Uss + met["ds_log_rho_g"] * Us)
               + jet["Uzz"] + met["dz_log_rho"] * jet["Uz"])
        U = jet["U"]
        return lap + U * (1 - U**2)

    # -- leading terms ----------------------------------------------------
    def toda_terms(self, s) -> dict:
        """-eps^2 (J h_l)(s) and a* (e^- - e^+) for every layer."""
        s = np.asarray(s, float)
        h = self.layers(s)
        hp = self.layers(s, 1)
        hpp = self.layers(s, 2)
        geo = self.geometry.at(s)
        Jh = hpp + geo["alpha"] * hp + geo["beta"] * h
        gaps = np.exp(-SQRT2 * np.diff(h, axis=0))
        zero = np.zeros_like(gaps[:1])
        em = np.concatenate([zero, gaps])
        ep = np.concatenate([gaps, zero])
        jac = -self.epsilon**2 * Jh
        inter = self.kit.a_star * (em - ep)
        return {"jacobi": jac, "interaction": inter, "leading": jac + inter}

    def gradient(self, s_tilde, z, *, corrected: bool = True,
                 step: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
        """(U_s~, U_z) as used by the energy."""
        Us, _ = self.s_derivatives(s_tilde, z, step=step, corrected=corrected)
        return Us, self.jets(s_tilde, z, corrected=corrected)["Uz"]

    # -- glued field ------------------------------------------------------
    def zeta(self, s_tilde, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gluing cutoff and its (s~, z) derivatives."""
        eps = self.epsilon
        s = eps * np.asarray(s_tilde, float)
        z = np.asarray(z, float)
        arg = np.abs(z) - glue_halfwidth(s, eps) + 2
        c = chi(arg)
        dc = chi_prime(arg)
        dz = dc * np.sign(z)
        ds = -dc * (4 / SQRT2) * 2 * s * eps / (s**2 + 2)
        return c, ds, dz

    def glued(self, s_tilde, z) -> np.ndarray:
        c, _, _ = self.zeta(s_tilde, z)
        return c * self.value(s_tilde, z) + self.H(z) * (1 - c)


def _sign_changes(u: np.ndarray) -> np.ndarray:
    sg = np.sign(u)
    return np.sum(sg[..., 1:] * sg[..., :-1] < 0, axis=-1)


def _growth_band(k: int, l: int, L, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Admissible window for h_l; the centre (k+1)/2 reduces to 3/2 for k = 2."""
    c = l - (k + 1) / 2
    return (c - alpha) * L / SQRT2, (c + alpha) * L / SQRT2


def fermi_assemble(profile: ProfileCurve, stack: LayerStack, epsilon: float, *,
                   kit: ProfileKit | None = None, s_max: float = 10.0, n_s: int = 96,
                   n_t: int = 81, eta: str = "matched", alpha: float = 1.0 / 9,
                   check_stack: bool = True, glue: bool = True,
                   global_box: float | None = None, global_n: int = 121,
                   valid_margin: float = 0.05) -> LayeredField:
    """Sample U_0 and U_1 on the layer fibers and optionally the glued w.

    Raises OverlapError when adjacent fibers meet, when a fiber leaves the
    region where the Fermi chart is a diffeomorphism, or (with ``glue``)
    when the support of the gluing cutoff does.
    """
    if eta not in ETA_CONVENTIONS:
        raise ValueError(f"eta must be one of {ETA_CONVENTIONS}")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    kit = kit or profile_kit()
    if check_stack:
        d, g = stack.provenance.get("delta"), stack.provenance.get("gamma")
        if d is None or abs(d - epsilon**2) > 1e-12 * epsilon**2 or abs(g - kit.a_star) > 1e-9:
            from .errors import ConfigError
            raise ConfigError("layer stack must solve the Toda system with delta = eps^2 "
                              "and gamma = a*", delta=d, gamma=g, epsilon=epsilon)
    if s_max > stack.s_grid[-1]:
        raise ValueError("s_max beyond the layer stack grid")
    xmax = math.asinh(s_max)
    s = np.sinh(xmax * (np.arange(n_s) + 0.5) / n_s)
    tau = np.linspace(-1.0, 1.0, n_t)
    fld = LayeredField(profile=profile, stack=stack, epsilon=epsilon, kit=kit, s=s, tau=tau,
                       U0=np.empty(0), U1=np.empty(0), eta=eta)
    k = stack.k
    T = fiber_halfwidth(s, epsilon)
    h = fld.layers(s)
    checks: dict = {}

    gaps = np.diff(h, axis=0) - 2 * T
    checks["fiber_gap_margin"] = float(np.min(gaps)) if k > 1 else math.inf
    if k > 1 and np.min(gaps) <= 0:
        i = np.unravel_index(np.argmin(gaps), gaps.shape)
        raise OverlapError("adjacent layer neighbourhoods intersect",
                           layer=int(i[0]) + 1, s=float(s[i[1]]), margin=float(gaps[i]))

    def chart_margin(zz):
        met = fld.metric(np.broadcast_to(s / epsilon, zz.shape), zz)
        A = met["A"] * epsilon
        B = met["B"] * epsilon
        geo = fld.geometry.at(np.broadcast_to(s, zz.shape))
        # A, B compared with their values on the surface (both vanish at the tip)
        ra = np.where(geo["a"] > 0, A / np.where(geo["a"] > 0, geo["a"], 1), 1.0)
        rb = np.where(geo["b"] > 0, B / np.where(geo["b"] > 0, geo["b"], 1), 1.0)
        return np.minimum(met["lam"], np.minimum(ra, rb))

    zf = np.concatenate([h - T, h + T])
    cm = chart_margin(zf)
    checks["fiber_chart_margin"] = float(np.min(cm))
    if np.min(cm) <= valid_margin:
        raise OverlapError("layer neighbourhood leaves the Fermi chart",
                           margin=float(np.min(cm)))

    L = log_scale(s, epsilon)
    band = []
    for l in range(1, k + 1):
        lo, hi = _growth_band(k, l, L, alpha)
        band.append(float(min(np.min(h[l - 1] - lo), np.min(hi - h[l - 1]))))
    checks["growth_band_margin"] = min(band)

    if glue:
        Z = glue_halfwidth(s, epsilon)
        gm = chart_margin(np.stack([-Z, Z]))
        checks["glue_chart_margin"] = float(np.min(gm))
        if np.min(gm) <= valid_margin:
            raise OverlapError("gluing neighbourhood leaves the Fermi chart",
                               margin=float(np.min(gm)))

    st = np.broadcast_to((s / epsilon)[:, None], (n_s, n_t))
    U0 = np.empty((k, n_s, n_t))
    U1 = np.empty((k, n_s, n_t))
    t = T[:, None] * tau[None, :]
    for l in range(k):
        z = t + h[l][:, None]
        U0[l] = fld.value(st, z, corrected=False)
        U1[l] = fld.value(st, z)
    fld.U0, fld.U1 = U0, U1

    # z-lines through all layers: crossings and the sup bound
    zl = np.linspace(-1.0, 1.0, 801)
    if glue:
        zline = Z[:, None] * zl[None, :]
    else:
        zline = (np.abs(h).max(axis=0) + T + 3)[:, None] * zl[None, :]
    ul = fld.value(np.broadcast_to((s / epsilon)[:, None], zline.shape), zline)
    checks["crossings_per_fiber"] = sorted(set(int(c) for c in _sign_changes(ul)))
    checks["sup_U1"] = float(np.max(np.abs(ul)))
    checks["sup_U1_ok"] = checks["sup_U1"] <= 1 + 1e-3
    checks["crossings_ok"] = checks["crossings_per_fiber"] == [k]
    fld.checks = checks
    if glue and global_box is not None:
        fld.global_samples = global_field(fld, global_box, global_n)
    return fld


# --------------------------------------------------------------------------
# residual, projections

def _toda_discrete_defect(field: LayeredField) -> float:
    """max |eps^2 J h - a* (e^- - e^+)| with the solver's own operator,
    excluding the far node whose row carries the boundary condition."""
    from .toda import TodaConfig, _error, _Operator
    st = field.stack
    cfg = TodaConfig(k=st.k, delta=field.epsilon**2, gamma_coupling=field.kit.a_star)
    op = _Operator(field.profile, st.grid)
    return float(np.max(np.abs(_error(op, cfg, st.h)[:, :-1])))


def residual_eval(field: LayeredField, layer: int, *, rho: float = 1.0,
                  gamma: float = 0.25, step: float = 0.05) -> dict:
    """S(U_1) on the fibers of ``layer`` (1-based) and its remainder after
    removing the Toda leading terms."""
    k = field.k
    if not 1 <= layer <= k:
        raise ValueError("layer out of range")
    eps = field.epsilon
    s, t = field.s, field.t
    h = field.layers(s)[layer - 1]
    z = t + h[:, None]
    st = np.broadcast_to((s / eps)[:, None], z.shape)
    S = field.allen_cahn_operator(st, z, step=step)
    sign = (-1.0) ** (layer - 1)
    terms = field.toda_terms(s)
    lead = terms["leading"][layer - 1]
    R = sign * S - lead[:, None] * v_star_prime(t)
    weight = np.exp(rho * np.abs(t)) * (s[:, None] ** 2 + 2) ** ((2 + gamma) / 2)
    normalized = np.abs(R) * weight / eps ** (2 + gamma)
    return {
        "layer": layer, "epsilon": eps, "s": s, "t": t, "S": S, "remainder": R,
        "leading_coefficient": lead,
        "max_remainder": float(np.max(np.abs(R))),
        "bound_constant": float(np.max(normalized)),
        "leading_defect": float(np.max(np.abs(lead))),
        "leading_scale": float(np.max(np.abs(terms["jacobi"][layer - 1]))),
        "toda_discrete_defect": _toda_discrete_defect(field),
    }


def _loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def residual_sweep(fields: Sequence[LayeredField], *, rho: float = 1.0, gamma: float = 0.25,
                   factor: float = 10.0) -> dict:
    """Remainder scaling over fields assembled at different eps.

    Raises ExpansionMismatch when the normalized bound constant grows by
    more than ``factor`` towards small eps."""
    eps = np.array([f.epsilon for f in fields])
    order = np.argsort(-eps)
    rows = []
    for i in order:
        f = fields[i]
        res = [residual_eval(f, l, rho=rho, gamma=gamma) for l in range(1, f.k + 1)]
        rows.append({
            "epsilon": f.epsilon,
            "max_remainder": max(r["max_remainder"] for r in res),
            "bound_constant": max(r["bound_constant"] for r in res),
            "leading_defect": max(r["leading_defect"] for r in res),
            "toda_discrete_defect": res[0]["toda_discrete_defect"],
        })
    e = np.array([r["epsilon"] for r in rows])
    m = np.array([r["max_remainder"] for r in rows])
    C = np.array([r["bound_constant"] for r in rows])
    out = {"rows": rows, "exponent": _loglog_slope(e, m) if len(e) > 1 else None,
           "bound_growth": float(np.max(C / C[0]))}
    if out["bound_growth"] > factor:
        raise ExpansionMismatch("remainder outgrows the eps^{2+gamma} pattern",
                                growth=out["bound_growth"], rows=rows)
    return out


def projection(field: LayeredField, layer: int, *, t_max: float = 24.0, dt: float = 0.04,
               step: float = 0.05, chart_margin: float = 0.05) -> dict:
    """P_l(s) = (-1)^{l-1} int S(U_1)(s, t + h_l) v*'(t) dt on full fibers.

    The fiber is cut where v*' drops below round-off or where the Fermi
    chart degenerates, whichever comes first.
    """
    eps = field.epsilon
    s = field.s
    n = int(round(t_max / dt))
    t = dt * np.arange(-n, n + 1)
    h = field.layers(s)[layer - 1]
    z = t[None, :] + h[:, None]
    st = np.broadcast_to((s / eps)[:, None], z.shape)
    met = field.metric(st, z)
    geo = field.geometry.at(np.broadcast_to(s[:, None], z.shape))
    ok = met["lam"] > chart_margin
    ok &= (met["A"] * eps > chart_margin * np.maximum(geo["a"], 1e-300)) | (geo["a"] == 0)
    ok &= (met["B"] * eps > chart_margin * np.maximum(geo["b"], 1e-300)) | (geo["b"] == 0)
    S = np.where(ok, field.allen_cahn_operator(st, np.where(ok, z, h[:, None]), step=step), 0.0)
    sign = (-1.0) ** (layer - 1)
    P = sign * simpson(S * v_star_prime(t)[None, :], x=t, axis=1)
    lead = field.toda_terms(s)["leading"][layer - 1]
    cut = np.where(ok.all(axis=1), t_max, np.min(np.where(ok, np.inf, np.abs(t)[None, :]), axis=1))
    return {"layer": layer, "s": s, "P": P, "predicted": field.kit.c_star * lead,
            "sup_P": float(np.max(np.abs(P))),
            "sup_P_over_c_star": float(np.max(np.abs(P)) / field.kit.c_star),
            "tracking_error": float(np.max(np.abs(P - field.kit.c_star * lead))),
            "fiber_cut": cut}


# --------------------------------------------------------------------------
# energy

def energy_density(w, grad_sq) -> np.ndarray:
    return 0.5 * np.asarray(grad_sq) + 0.25 * (1 - np.asarray(w) ** 2) ** 2


def flat_interface_energy(N: int, R: float, *, dt: float = 1e-3) -> float:
    """Energy of v*(x_1) in the ball B_R of R^{N+1} (1D quadrature)."""
    t = np.arange(-R, R + dt / 2, dt)
    e = energy_density(v_star(t), v_star_prime(t) ** 2)
    ball = math.pi ** (N / 2) / math.gamma(N / 2 + 1)
    return float(simpson(e * ball * np.clip(R**2 - t**2, 0, None) ** (N / 2), x=t))


def euclidean_energy(X: np.ndarray, Y: np.ndarray, u: np.ndarray, dims, R: float) -> float:
    """Axisymmetric energy of samples u(|x|, |y|) on a tensor grid in B_R.

    Volume element |S^{m-1}| |S^{n-1}| X^{m-1} Y^{n-1} dX dY; gradients
    by second-order differences."""
    m, n = dims
    x, y = X[:, 0], Y[0, :]
    ux, uy = np.gradient(u, x, y)
    e = energy_density(u, ux**2 + uy**2)
    vol = _sphere_area(m) * _sphere_area(n) * X ** (m - 1) * Y ** (n - 1)
    inside = X**2 + Y**2 <= R**2
    return float(simpson(simpson(np.where(inside, e * vol, 0.0), x=y, axis=1), x=x))


def energy(field: LayeredField, R_values: Sequence[float], *, ds: float = 0.5,
           n_z: int = 1201, step: float = 0.05) -> dict:
    """E(R) of the glued approximation w over B_R (dilated coordinates).

    w equals the constants of H away from the gluing neighbourhood, where the
    density vanishes identically, so the integral is taken in Fermi
    coordinates over the support of zeta with the exact volume element
    |S^{m-1}||S^{n-1}| A^{m-1} B^{n-1} (1 - eps z kappa) ds~ dz.
    """
    eps = field.epsilon
    R_values = np.asarray(sorted(R_values), float)
    if np.any(R_values <= 2 / eps):
        raise ValueError("R must exceed 2/eps")
    m, n = field.geometry.m, field.geometry.n
    N = m + n - 1
    # arc length on Sigma_eps beyond which the neighbourhood leaves B_Rmax
    s_hi = eps * (R_values[-1] + glue_halfwidth(eps * R_values[-1], eps)) + 1.0
    if s_hi > field.stack.s_grid[-1]:
        raise ValueError("layer stack grid too short for the requested radii")
    st = np.arange(0.0, s_hi / eps + ds, ds)
    st[0] = 0.5 * ds * 1e-3
    Z = glue_halfwidth(eps * st, eps)
    tau = np.linspace(-1.0, 1.0, n_z)
    Zg = Z[:, None] * tau[None, :]
    S = np.broadcast_to(st[:, None], Zg.shape)

    jet_U = field.value(S, Zg)
    Us, Uz = field.gradient(S, Zg, step=step)
    c, cs, cz = field.zeta(S, Zg)
    Hv = field.H(Zg)
    w = c * jet_U + Hv * (1 - c)
    ws = c * Us + cs * (jet_U - Hv)
    wz = c * Uz + cz * (jet_U - Hv)
    met = field.metric(S, Zg)
    dens = energy_density(w, wz**2 + met["g_ss"] * ws**2)
    vol = (_sphere_area(m) * _sphere_area(n) * met["A"] ** (m - 1) * met["B"] ** (n - 1)
           * met["lam"])
    radius = np.hypot(met["A"], met["B"])
    rows = []
    for R in R_values:
        inner = simpson(np.where(radius <= R, dens * vol, 0.0), x=tau, axis=1) * Z
        E = float(simpson(inner, x=st))
        rows.append({"R": float(R), "E": E, "ratio": E / R**N})
    out = {"N": N, "rows": rows}
    if len(rows) > 1:
        out["exponent"] = _loglog_slope(R_values, [r["E"] for r in rows])
        ratios = [r["ratio"] for r in rows]
        out["ratio_max"] = float(max(ratios))
        out["ratio_min"] = float(min(ratios))
    return out


# --------------------------------------------------------------------------
# glued field on Euclidean samples

def fermi_inverse(field: LayeredField, X, Y, *, iterations: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-point projection of (|x|, |y|) = (X, Y) onto Sigma_eps:
    returns (s~, z)."""
    from scipy.spatial import cKDTree

    eps = field.epsilon
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    shape = X.shape
    P = np.column_stack([X.ravel(), Y.ravel()])
    r_max = float(np.max(np.hypot(P[:, 0], P[:, 1])))
    s_far = min(eps * (r_max + 10.0) + 2.0, field.stack.s_grid[-1])
    sd = np.linspace(0.0, s_far / eps, 20001)
    geo = field.geometry.at(eps * sd)
    curve = np.column_stack([geo["a"], geo["b"]]) / eps
    _, idx = cKDTree(curve).query(P)
    st = sd[idx]
    for _ in range(iterations):
        g = field.geometry.at(eps * st)
        d = P - np.column_stack([g["a"], g["b"]]) / eps
        f = d[:, 0] * g["ap"] + d[:, 1] * g["bp"]
        fp = -1.0 + eps * (d[:, 0] * (-g["kappa"] * g["bp"]) + d[:, 1] * g["kappa"] * g["ap"])
        new = np.clip(st - f / fp, 0.0, None)
        done = np.max(np.abs(new - st)) < 1e-12 * max(1.0, float(np.max(st)))
        st = new
        if done:
            break
    g = field.geometry.at(eps * st)
    d = P - np.column_stack([g["a"], g["b"]]) / eps
    z = -d[:, 0] * g["bp"] + d[:, 1] * g["ap"]
    return st.reshape(shape), z.reshape(shape)


def global_field(field: LayeredField, box: float, n: int = 121) -> dict:
    """Glued w on an n x n grid of (|x|, |y|) in [0, box]^2."""
    x = np.linspace(0.0, box, n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    st, z = fermi_inverse(field, X, Y)
    eps = field.epsilon
    inside = np.abs(z) < glue_halfwidth(eps * st, eps)
    w = field.H(z).astype(float)
    if np.any(inside):
        w[inside] = field.glued(st[inside], z[inside])
    return {"x_norm": X, "y_norm": Y, "w": w, "s_tilde": st, "z": z, "inside": inside}


# --------------------------------------------------------------------------
# export

def field_to_csv(field: LayeredField, path, layer: int = 1) -> None:
    """Fiber samples of one layer: columns s,t,U0,U1 (s on Sigma, t on the fiber)."""
    S = np.broadcast_to(field.s[:, None], field.t.shape)
    data = np.column_stack([S.ravel(), field.t.ravel(), field.U0[layer - 1].ravel(),
                            field.U1[layer - 1].ravel()])
    np.savetxt(path, data, delimiter=",", header="s,t,U0,U1", comments="", fmt="%.17g")


def global_to_csv(samples: dict, path) -> None:
    data = np.column_stack([samples["x_norm"].ravel(), samples["y_norm"].ravel(),
                            samples["w"].ravel()])
    np.savetxt(path, data, delimiter=",", header="x_norm,y_norm,w", comments="", fmt="%.17g")


def energy_to_csv(table: dict, path) -> None:
    data = np.array([[r["R"], r["E"], r["ratio"]] for r in table["rows"]])
    np.savetxt(path, data, delimiter=",", header="R,E,ratio", comments="", fmt="%.17g")
