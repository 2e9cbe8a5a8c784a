"""Invariant Jacobi fields of Sigma^- and the Emden-Fowler change of variables.

Invariant Jacobi fields solve v'' + alpha v' + beta v = 0 in arc length.
One solution is geometric (v_+ = a b' - a' b, the normal component of the
position vector); the second follows by reduction of order using the
Wronskian identity (v_+ v_-' - v_+' v_-) a^{m-1} b^{n-1} = const.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import cumulative_simpson, simpson

from .errors import PositivityViolated, SingularQuadrature
from .surface import ProfileCurve, area_weight, asymptotic_fit

__all__ = [
    "JacobiField",
    "EmdenFowlerData",
    "jacobi_plus",
    "jacobi_minus",
    "emden_fowler",
    "jacobi_residual",
    "stability_check",
    "field_to_csv",
    "emden_fowler_to_csv",
]


@dataclass
class JacobiField:
    s_grid: np.ndarray
    values: np.ndarray
    derivative: np.ndarray
    kind: str
    fitted_exponent: float | None = None
    wronskian_spread: float | None = None
    head_exponent: float | None = None


@dataclass
class EmdenFowlerData:
    t_grid: np.ndarray
    alpha_tilde: np.ndarray
    beta_tilde: np.ndarray
    p: np.ndarray
    V: np.ndarray
    alpha_tilde_prime: np.ndarray

    def identity_defect(self) -> float:
        """max |2 p'/p + alpha_tilde| with p' from fourth-order differences
        of log p on the (uniform) t grid."""
        lp = np.log(self.p)
        dt = self.t_grid[1] - self.t_grid[0]
        d1 = (lp[:-4] - 8 * lp[1:-3] + 8 * lp[3:-1] - lp[4:]) / (12 * dt)
        return float(np.max(np.abs(2 * d1 + self.alpha_tilde[2:-2])))


def _expected(profile: ProfileCurve) -> tuple[float, float]:
    d = profile.dims
    return (d.gamma_plus, d.gamma_minus)


def jacobi_plus(profile: ProfileCurve) -> JacobiField:
    """v_+ = a b' - a' b with v_+' = kappa0 (a a' + b b')."""
    p = profile
    v = p.a * p.b_prime - p.a_prime * p.b
    if np.any(v <= 0):
        raise PositivityViolated("v_+ is not positive", first_bad=int(np.argmax(v <= 0)))
    dv = p.kappa0 * (p.a * p.a_prime + p.b * p.b_prime)
    fit = None
    if p.s_grid[-1] >= 50:
        fit = asymptotic_fit(v, p.s_grid, _expected(p), strict=False).gamma_fit
    return JacobiField(p.s_grid.copy(), v, dv, "plus", fitted_exponent=fit)


def _log_grid(profile: ProfileCurve, s_lo: float, s_hi: float, per_unit: int = 400) -> np.ndarray:
    n = int(per_unit * math.log(s_hi / s_lo)) | 1
    return np.exp(np.linspace(math.log(s_lo), math.log(s_hi), n))


def jacobi_minus(profile: ProfileCurve, v_plus: JacobiField | None = None, *,
                 s_lo: float = 1e-4, s_hi: float | None = None) -> JacobiField:
    """Second invariant Jacobi field by reduction of order.

    v_- = c v_+ * I(s) where I(s) = int_s^inf ds/(v_+^2 a^{m-1} b^{n-1}) when
    that tail integral converges, and int_s^1 otherwise.  An explicit
    ``s_hi`` caps the auxiliary grid (useful when v_+ changes sign further out).  The integral is
    computed in t = log s on a fine auxiliary grid that the profile is
    re-evaluated on.  ``c`` is fixed by the behaviour at the axis:
    v_- ~ s^{-(n-2)} for n > 2 and v_- ~ -log s for n = 2.
    """
    p = profile
    if p.source is None:
        raise SingularQuadrature("profile cannot be re-evaluated off its grid")
    if v_plus is None:
        v_plus = jacobi_plus(p)
    if np.any(v_plus.values[1:] <= 0):
        raise PositivityViolated("v_+ must be positive on (0, s_max]")
    d = p.dims
    if s_hi is None:
        s_hi = max(1e4, 10 * p.s_grid[-1])
    elif s_hi < p.s_grid[-1]:
        raise ValueError("s_hi must cover the profile grid")
    aux_s = _log_grid(p, s_lo, s_hi)
    aux = p.resample(aux_s)
    vp = aux.a * aux.b_prime - aux.a_prime * aux.b
    G = 1.0 / (vp**2 * area_weight(aux))
    tt = np.log(aux_s)
    integrand = aux_s * G  # d/dt of the s-integral
    # tail exponent of G on the last decade decides convergence at infinity
    sel = aux_s > s_hi / 10
    q = np.polyfit(np.log(aux_s[sel]), np.log(G[sel]), 1)[0]
    if q < -1.05:
        # accumulate from the far end so the small tail keeps its digits
        rev = cumulative_simpson(integrand[::-1], x=-tt[::-1], initial=0.0)[::-1]
        tail = G[-1] * aux_s[-1] / (-(q + 1))
        I_aux = rev + tail
        mode = "infinity"
    elif q > -0.95:
        cum = cumulative_simpson(integrand, x=tt, initial=0.0)
        i1 = int(np.argmin(np.abs(aux_s - 1.0)))
        I_aux = cum[i1] - cum
        mode = "unit"
    else:
        raise SingularQuadrature("tail exponent of 1/(v_+^2 W) is too close to -1", exponent=q)
    if not np.all(np.isfinite(I_aux)):
        raise SingularQuadrature("reduction-of-order integral is not finite")
    a0 = float(p.a[0]) if p.branch == "sigma_minus" else float(p.b[0])
    c = (d.n - 2) * a0 ** (d.m - 1) if d.n > 2 else a0 ** (d.m - 1)
    vm_aux = c * vp * I_aux
    dvp_aux = aux.kappa0 * (aux.a * aux.a_prime + aux.b * aux.b_prime)
    dvm_aux = c * (dvp_aux * I_aux - 1.0 / (vp * area_weight(aux)))

    s = p.s_grid
    vals = np.full_like(s, np.inf)
    ders = np.full_like(s, -np.inf)
    inside = s >= s_lo
    # interpolate the smooth factor I * v_+ in log s, then rebuild
    from scipy.interpolate import CubicSpline
    if mode == "infinity":
        log_I = CubicSpline(tt, np.log(np.abs(I_aux)))
        Ii = np.sign(I_aux[0]) * np.exp(log_I(np.log(s[inside])))
    else:
        Ii = CubicSpline(tt, I_aux)(np.log(s[inside]))
    vpg = v_plus.values[inside]
    vals[inside] = c * vpg * Ii
    Wg = area_weight(p)[inside]
    ders[inside] = c * (v_plus.derivative[inside] * Ii - 1.0 / (vpg * Wg))
    wr = (vpg * ders[inside] - v_plus.derivative[inside] * vals[inside]) * Wg
    spread = float(np.max(np.abs(wr + c)) / abs(c))
    fit = None
    if s[-1] >= 50:
        fit = asymptotic_fit(vals[inside], s[inside], _expected(p), strict=False).gamma_fit
    head = None
    hs = (aux_s > 1e-3) & (aux_s < 1e-2)
    if d.n > 2:
        head = float(np.polyfit(np.log(aux_s[hs]), np.log(np.abs(vm_aux[hs])), 1)[0])
    out = JacobiField(s.copy(), vals, ders, "minus", fitted_exponent=fit,
                      wronskian_spread=spread, head_exponent=head)
    out.aux = {"s": aux_s, "v": vm_aux, "dv": dvm_aux, "mode": mode, "tail_exponent": q, "c": c}
    return out


def emden_fowler(profile: ProfileCurve, t_grid: Sequence[float] | None = None) -> EmdenFowlerData:
    """alpha~(t) = alpha(e^t) e^t - 1, beta~(t) = beta(e^t) e^{2t},
    p = exp(-int_0^t alpha~/2), V = -alpha~'/2 - alpha~^2/4 + beta~."""
    p = profile
    if t_grid is None:
        t_grid = np.linspace(-4.0, math.log(p.s_grid[-1]), 4001)
    t = np.asarray(t_grid, float)
    s = np.exp(t)
    if s[-1] > p.s_grid[-1] * (1 + 1e-12) and p.source is None:
        raise ValueError("t grid reaches beyond the profile")
    q = p.resample(s) if p.source is not None else p
    m, n = p.dims.m, p.dims.n
    alpha = (m - 1) * q.a_prime / q.a + (n - 1) * q.b_prime / q.b
    app = -q.kappa0 * q.b_prime
    bpp = q.kappa0 * q.a_prime
    dalpha = ((m - 1) * (app / q.a - (q.a_prime / q.a) ** 2)
              + (n - 1) * (bpp / q.b - (q.b_prime / q.b) ** 2))
    at = alpha * s - 1.0
    at_p = dalpha * s**2 + alpha * s
    bt = q.beta_s * s**2
    # integral from 0 of alpha~/2, anchored at t = 0 by interpolation
    cum = cumulative_simpson(at, x=t, initial=0.0)
    cum0 = np.interp(0.0, t, cum) if t[0] <= 0 <= t[-1] else cum[0]
    pp = np.exp(-(cum - cum0) / 2)
    V = -at_p / 2 - at**2 / 4 + bt
    return EmdenFowlerData(t, at, bt, pp, V, at_p)


def jacobi_residual(profile: ProfileCurve, field, *, stencil: int = 5,
                    s_min: float = 0.0) -> float:
    """max |v'' + alpha v' + beta v| over interior samples by centered
    differences (five-point by default, three-point on request).
    ``field`` is a JacobiField or an array on the profile grid."""
    v = field.values if isinstance(field, JacobiField) else np.asarray(field, float)
    h = profile.h
    if stencil == 5:
        i = np.arange(2, len(v) - 2)
        d1 = (v[i - 2] - 8 * v[i - 1] + 8 * v[i + 1] - v[i + 2]) / (12 * h)
        d2 = (-v[i - 2] + 16 * v[i - 1] - 30 * v[i] + 16 * v[i + 1] - v[i + 2]) / (12 * h**2)
    elif stencil == 3:
        i = np.arange(1, len(v) - 1)
        d1 = (v[i + 1] - v[i - 1]) / (2 * h)
        d2 = (v[i + 1] - 2 * v[i] + v[i - 1]) / h**2
    else:
        raise ValueError("stencil must be 3 or 5")
    with np.errstate(invalid="ignore"):
        r = d2 + profile.alpha_s[i] * d1 + profile.beta_s[i] * v[i]
    keep = np.isfinite(r) & (profile.s_grid[i] >= s_min)
    r = r[keep]
    return float(np.max(np.abs(r))) if r.size else 0.0


def _bump(s: np.ndarray, c: float, w: float) -> tuple[np.ndarray, np.ndarray]:
    x = (s - c) / w
    inside = np.abs(x) < 1
    phi = np.where(inside, np.cos(0.5 * np.pi * x) ** 2, 0.0)
    dphi = np.where(inside, -0.5 * np.pi / w * np.sin(np.pi * x), 0.0)
    return phi, dphi


def stability_check(profile: ProfileCurve, n_bumps: int = 50) -> dict:
    """Second variation int (phi'^2 - beta phi^2) a^{m-1} b^{n-1} ds on a
    family of bumps spread over [0, s_max] (logarithmically, several
    widths).  Returns the smallest value normalised by int phi'^2 W."""
    p = profile
    s = p.s_grid
    W = area_weight(p)
    s_top = s[-1]
    centres = np.concatenate([[0.0], np.geomspace(0.05, 0.8 * s_top, n_bumps - 1)])
    worst = math.inf
    values = []
    for j, c in enumerate(centres):
        w = max(0.1, 0.5 * c) if j % 2 == 0 else max(0.3, 0.9 * c)
        w = min(w, s_top - c) if c + w > s_top else w
        phi, dphi = _bump(s, c, w)
        num = simpson((dphi**2 - p.beta_s * phi**2) * W, x=s)
        den = simpson(dphi**2 * W, x=s)
        values.append(num / den)
        worst = min(worst, num / den)
    return {"min_normalized_Q": float(worst), "values": values, "n_bumps": len(values)}


def field_to_csv(field: JacobiField, path) -> None:
    np.savetxt(path, np.column_stack([field.s_grid, field.values, field.derivative]),
               delimiter=",", header="s,v,vp", comments="", fmt="%.17g")


def emden_fowler_to_csv(data: EmdenFowlerData, path) -> None:
    np.savetxt(path, np.column_stack([data.t_grid, data.alpha_tilde, data.beta_tilde,
                                      data.p, data.V]),
               delimiter=",", header="t,alpha_tilde,beta_tilde,p,V", comments="", fmt="%.17g")
