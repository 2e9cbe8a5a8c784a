"""Jacobi-Toda system for the layer positions.

The unknowns are k even functions h_1 < ... < h_k of the arc length s on an
invariant minimal hypersurface, solving

    delta (h_j'' + alpha h_j' + beta h_j)
        = gamma (exp(-sqrt2 (h_j - h_{j-1})) - exp(-sqrt2 (h_{j+1} - h_j)))

with h_0 = -inf and h_{k+1} = +inf.  Everything is discretised on a
stretched grid s = sinh(x), x uniform, which resolves the tip with spacing
dx and reaches large s with O(log s_max / dx) points.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import spsolve

from .errors import (ConfigError, DomainError, EigFailure, LogDomainError, NewtonDiverged,
                     OrderingLost, OrthogonalityViolated, RegimeFitError, SolveFailure)
from .jacobi import emden_fowler
from .surface import ProfileCurve

__all__ = [
    "TodaConfig",
    "TodaGrid",
    "LayerStack",
    "DecouplingData",
    "lambert_w",
    "lambert_w_prime",
    "base_layer",
    "tridiagonal_kernel_solve",
    "approx_solution",
    "toda_residual",
    "decoupling",
    "t_sigma",
    "potential_regimes",
    "linear_solve",
    "weighted_norm",
    "newton_solve",
    "find_delta_star",
    "stack_to_csv",
    "solve_report",
]

SQRT2 = math.sqrt(2.0)
A_STAR = 12.0 * SQRT2  # gamma used by the Allen-Cahn reduction


# --------------------------------------------------------------------------
# configuration and grids

@dataclass(frozen=True)
class TodaConfig:
    k: int
    delta: float
    gamma_coupling: float = A_STAR
    l: int = 2

    def __post_init__(self) -> None:
        if int(self.k) != self.k or self.k < 2:
            raise ConfigError("k must be an integer >= 2", k=self.k)
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ConfigError("delta must be positive", delta=self.delta)
        if not self.gamma_coupling > 0:
            raise ConfigError("gamma_coupling must be positive", gamma=self.gamma_coupling)
        if int(self.l) != self.l or self.l < 1:
            raise ConfigError("recursion depth l must be >= 1", l=self.l)

    @property
    def sigma(self) -> float:
        return abs(math.log(self.delta))

    def with_(self, **kw) -> "TodaConfig":
        d = dict(k=self.k, delta=self.delta, gamma_coupling=self.gamma_coupling, l=self.l)
        d.update(kw)
        return TodaConfig(**d)


@dataclass
class TodaGrid:
    """Cell-centred stretched grid s = sinh(x), x = (i + 1/2) dx.

    The tip s = 0 sits half a cell before the first node, so the even
    reflection h(-x) = h(x) is applied through the ghost value h_{-1} = h_0
    and every node uses the same centred stencil."""
    x: np.ndarray
    dx: float

    @classmethod
    def build(cls, s_max: float = 1e3, dx: float = 4e-2) -> "TodaGrid":
        n = int(math.ceil(math.asinh(s_max) / dx - 0.5)) + 1
        return cls(dx * (np.arange(n) + 0.5), dx)

    def extended(self, pad: int) -> "TodaGrid":
        n = self.x.size + pad
        return TodaGrid(self.dx * (np.arange(n) + 0.5), self.dx)

    @property
    def s(self) -> np.ndarray:
        return np.sinh(self.x)

    @property
    def size(self) -> int:
        return self.x.size


def _tip_order(profile: ProfileCurve) -> float:
    """lim_{s->0} s alpha(s): dimension of the collapsing sphere."""
    d = profile.dims
    if profile.branch == "sigma_minus":
        return float(d.n - 1)
    if profile.branch == "sigma_plus":
        return float(d.m - 1)
    raise DomainError("the Toda system needs a smooth profile (no cone vertex)",
                      branch=profile.branch)


class _Operator:
    """Discrete J = d^2/ds^2 + alpha d/ds + beta on a TodaGrid.

    Second-order centred differences in x, mapped to s by the chain rule.
    The last row is one-sided and is either replaced by a boundary row or
    discarded (see ``approx_solution``)."""

    def __init__(self, profile: ProfileCurve, grid: TodaGrid) -> None:
        self.grid = grid
        s = grid.s
        g = profile.resample(s)
        self.prof = g
        self.alpha = g.alpha_s.copy()
        self.beta = g.beta_s.copy()
        _tip_order(profile)
        self.dims = profile.dims
        self.s = s
        self.D2, self.D1 = self._derivative_matrices()
        self.lap = (self.D2 + sp.diags(self.alpha) @ self.D1).tocsr()
        self.J = (self.lap + sp.diags(self.beta)).tocsr()

    def _derivative_matrices(self):
        x, dx = self.grid.x, self.grid.dx
        n = x.size
        ch, th = np.cosh(x), np.tanh(x)
        i = np.arange(1, n - 1)
        rows = np.concatenate([i, i, i, [0, 0], [n - 1] * 4])
        cols = np.concatenate([i - 1, i, i + 1, [0, 1], [n - 1, n - 2, n - 3, n - 4]])
        ones = np.ones(i.size)
        v1 = np.concatenate([-0.5 * ones, 0 * ones, 0.5 * ones, [-0.5, 0.5],
                             [1.5, -2.0, 0.5, 0.0]]) / dx
        # node 0: ghost h_{-1} = h_0
        v2 = np.concatenate([ones, -2 * ones, ones, [-1.0, 1.0],
                             [2.0, -5.0, 4.0, -1.0]]) / dx**2
        Dx = sp.csr_matrix((v1, (rows, cols)), shape=(n, n))
        Dxx = sp.csr_matrix((v2, (rows, cols)), shape=(n, n))
        D1 = sp.diags(1 / ch) @ Dx
        D2 = sp.diags(1 / ch**2) @ (Dxx - sp.diags(th) @ Dx)
        return D2.tocsr(), D1.tocsr()

    def robin_row(self) -> sp.csr_matrix:
        """q'(s_max) + ((N-2)/(2 s_max)) q(s_max)."""
        n = self.grid.size
        row = self.D1[n - 1].toarray().ravel()
        row[n - 1] += (self.dims.N - 2) / (2 * self.s[-1])
        return sp.csr_matrix(row)


# --------------------------------------------------------------------------
# Lambert function

def lambert_w(z):
    """Principal branch of W on [0, inf), Halley iteration."""
    za = np.asarray(z, dtype=float)
    if np.any(za < 0) or np.any(np.isnan(za)):
        raise DomainError("Lambert W is only needed for z >= 0", z_min=float(np.nanmin(za)))
    zf = np.atleast_1d(za).astype(float)
    w = np.where(zf < 3, zf / (1 + zf), 0.0)
    big = zf >= 3
    lz = np.log(np.where(big, zf, 3.0))
    w = np.where(big, lz - np.log(lz), w)
    active = zf > 0
    w = np.where(active, w, 0.0)
    for _ in range(60):
        ew = np.exp(w)
        f = w * ew - zf
        wp1 = w + 1
        step = f / (ew * wp1 - (w + 2) * f / (2 * wp1))
        step = np.where(active, step, 0.0)
        w = w - step
        if np.all(np.abs(step) <= 1e-14 * np.maximum(1.0, np.abs(w))):
            break
    # a final Newton polish removes the last ulp drift of Halley at large z
    ew = np.exp(w)
    w = np.where(active, w - (w * ew - zf) / (ew * (w + 1)), 0.0)
    if np.ndim(z) == 0:
        return float(w[0])
    return w.reshape(np.shape(z))


def lambert_w_prime(z):
    """W'(z) = W / (z (1 + W)), with W'(0) = 1."""
    z = np.asarray(z, float)
    w = np.asarray(lambert_w(z), float)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(z > 0, w / (z * (1 + w)), 1.0)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# base layer and approximate solution

def base_layer(profile: ProfileCurve, config: TodaConfig, s=None) -> np.ndarray:
    """w(s) = W(gamma sqrt2 / (delta beta)) / sqrt2 on the profile grid (or
    on ``s`` if given)."""
    beta = profile.beta_s if s is None else profile.resample(s).beta_s
    beta = np.asarray(beta, float)
    if np.any(~(beta > 0)):
        raise DomainError("beta must be positive for the base layer",
                          beta_min=float(np.nanmin(beta)))
    z = config.gamma_coupling * SQRT2 / (config.delta * beta)
    return lambert_w(z) / SQRT2


def tridiagonal_kernel_solve(b, c, tol: float = 1e-12) -> np.ndarray:
    """Solve b_{j-1} a_{j-1} - b_j a_j = c_j (a_0 = a_k = 0).

    ``b`` has k-1 rows and ``c`` has k rows; extra trailing axes are samples.
    The range of the map is the orthogonal complement of (1, ..., 1)."""
    b = np.asarray(b, float)
    c = np.asarray(c, float)
    if c.shape[0] != b.shape[0] + 1:
        raise ValueError("c must have one more entry than b")
    if np.any(~(b > 0)):
        raise ValueError("b must be positive")
    total = c.sum(axis=0)
    scale = np.maximum(1.0, np.abs(c).sum(axis=0))
    bad = np.abs(total) > tol * scale
    if np.any(bad):
        raise OrthogonalityViolated("right-hand side is not orthogonal to (1, ..., 1)",
                                    max_sum=float(np.max(np.abs(total))))
    return -np.cumsum(c, axis=0)[:-1] / b


def _apply_kernel_matrix(b: np.ndarray, a: np.ndarray) -> np.ndarray:
    """(M a)_j = b_{j-1} a_{j-1} - b_j a_j."""
    ba = b * a
    zero = np.zeros_like(ba[:1])
    return np.concatenate([zero, ba]) - np.concatenate([ba, zero])


def _interaction(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """e^-_j = exp(-sqrt2 (v_j - v_{j-1})), e^+_j = exp(-sqrt2 (v_{j+1} - v_j))."""
    gaps = np.exp(-SQRT2 * np.diff(v, axis=0))
    zero = np.zeros_like(v[:1])
    return np.concatenate([zero, gaps]), np.concatenate([gaps, zero])


def _error(op: _Operator, cfg: TodaConfig, v: np.ndarray) -> np.ndarray:
    em, ep = _interaction(v)
    Jv = np.stack([op.J @ vj for vj in v])
    return cfg.delta * Jv - cfg.gamma_coupling * (em - ep)


def _from_gaps(gaps: np.ndarray) -> np.ndarray:
    """Layer values with prescribed consecutive gaps and zero sum."""
    k = gaps.shape[0] + 1
    rel = np.concatenate([np.zeros_like(gaps[:1]), np.cumsum(gaps, axis=0)])
    return rel - rel.sum(axis=0) / k


@dataclass
class LayerStack:
    s_grid: np.ndarray
    h: np.ndarray                       # shape (k, n)
    provenance: dict
    levels: list = field(default_factory=list, repr=False)   # w^0 .. w^l
    errors: list = field(default_factory=list, repr=False)   # E(v^1) .. E(v^l)
    grid: TodaGrid | None = field(default=None, repr=False)
    report: dict = field(default_factory=dict, repr=False)

    @property
    def k(self) -> int:
        return self.h.shape[0]

    def ordering_margin(self) -> float:
        return float(np.min(np.diff(self.h, axis=0)))

    def level_sum(self, level: int) -> np.ndarray:
        return self.levels[level].sum(axis=0)

    def v(self, level: int) -> np.ndarray:
        return np.sum(self.levels[: level + 1], axis=0)


def weighted_error(stack: LayerStack, level: int, delta: float) -> float:
    """sup_{j,s} (1+s)^2 |E_j(v^level)| / delta."""
    E = stack.errors[level - 1]
    return float(np.max((1 + stack.s_grid) ** 2 * np.abs(E)) / delta)


def approx_solution(profile: ProfileCurve, config: TodaConfig, *,
                    grid: TodaGrid | None = None) -> LayerStack:
    """Recursive approximate solution v^l = w^0 + ... + w^l."""
    grid = grid or TodaGrid.build()
    k, l = config.k, config.l
    gam, dl = config.gamma_coupling, config.delta
    # Each level applies J once more; the one-sided last row pollutes one
    # extra node per level, so work on a padded grid and cut it off.
    n_keep = grid.size
    op = _Operator(profile, grid.extended(2 * l + 6))
    w = base_layer(op.prof, config)
    idx = np.arange(1, k + 1)[:, None]
    w0 = (idx - (k + 1) / 2) * w[None, :]

    Jw = op.J @ w
    jj = np.arange(1, k)[:, None]
    a1 = jj * (k - jj) / 2 * (Jw / (op.beta * w))[None, :]
    if np.any(~(a1 > 0)):
        bad = np.argwhere(~(a1 > 0))[0]
        raise LogDomainError("level-1 coefficient not positive (delta too large?)",
                             level=1, layer=int(bad[0]) + 1, s=float(grid.s[bad[1]]))
    levels = [w0, _from_gaps(-np.log(a1) / SQRT2)]
    v = w0 + levels[1]
    errors = [_error(op, config, v)]
    for lev in range(2, l + 1):
        b = np.exp(-SQRT2 * np.diff(v, axis=0))
        c = errors[-1] / gam
        a = tridiagonal_kernel_solve(b, c, tol=1e-9)
        if np.any(~(1 + a > 0)):
            bad = np.argwhere(~(1 + a > 0))[0]
            raise LogDomainError("1 + a_j must be positive (delta too large?)",
                                 level=lev, layer=int(bad[0]) + 1, s=float(grid.s[bad[1]]))
        wl = _from_gaps(-np.log1p(a) / SQRT2)
        levels.append(wl)
        v = v + wl
        errors.append(_error(op, config, v))

    telescoping = [float(np.max(np.abs(errors[i - 1] - dl * np.stack(
        [op.J @ x for x in levels[i]]))[:, :n_keep])) for i in range(1, l + 1)]
    cut = lambda a: a[:, :n_keep].copy()
    stack = LayerStack(grid.s, cut(v), {"approximate_l": l, "newton_converged": False,
                        "delta": dl, "gamma": gam},
                       levels=[cut(x) for x in levels], errors=[cut(e) for e in errors],
                       grid=grid)
    stack.report = {
        "weighted_errors": [weighted_error(stack, i, dl) for i in range(1, l + 1)],
        "level_sums": [float(np.max(np.abs(x.sum(axis=0)))) for x in stack.levels[1:]],
        "telescoping": telescoping,
    }
    return stack


# --------------------------------------------------------------------------
# decoupling

@dataclass
class DecouplingData:
    B: np.ndarray
    a_coeffs: np.ndarray        # (k-1, n)
    A: np.ndarray               # (n, k-1, k-1)
    C: np.ndarray
    D: np.ndarray               # (n, k-1, k-1)
    mu0: np.ndarray
    V: np.ndarray               # (n, k-1, k-1)
    M: np.ndarray               # (n, k-1) eigenvalues, ascending
    reconstruction_error: float
    r: np.ndarray | None = None  # (k-1, n)


def matrix_B(k: int) -> np.ndarray:
    B = np.zeros((k, k), dtype=int)
    for j in range(k - 1):
        B[j, j], B[j, j + 1] = -1, 1
    B[k - 1, :] = 1
    return B


def matrix_C(k: int) -> np.ndarray:
    return 2 * np.eye(k - 1) - np.eye(k - 1, k=1) - np.eye(k - 1, k=-1)


def mu0_values(k: int) -> np.ndarray:
    j = np.arange(1, k)
    A0 = matrix_C(k) @ np.diag(j * (k - j) / 2)
    return np.sort(np.linalg.eigvals(A0).real)


def decoupling(config: TodaConfig, a_coeffs, *, beta=None, w=None) -> DecouplingData:
    """A = C diag(a) = V M V^{-1} per sample.  If beta and w are given the
    eigenvalue perturbations r_j = mu_j / (delta beta w / gamma) - mu0_j are
    filled in as well."""
    k = config.k
    a = np.atleast_2d(np.asarray(a_coeffs, float))
    if a.shape[0] != k - 1:
        a = a.T
    if np.any(~(a > 0)):
        raise EigFailure("coefficients a_j must be positive", a_min=float(np.min(a)))
    C = matrix_C(k)
    n = a.shape[1]
    D = np.zeros((n, k - 1, k - 1))
    D[:, np.arange(k - 1), np.arange(k - 1)] = a.T
    A = C[None] @ D
    # C D is similar to the symmetric D^1/2 C D^1/2
    sq = np.sqrt(a.T)
    S = sq[:, :, None] * C[None] * sq[:, None, :]
    mu, U = np.linalg.eigh(S)
    V = U / sq[:, :, None]
    recon = V @ (mu[:, :, None] * np.linalg.inv(V))
    err = np.max(np.abs(recon - A), axis=(1, 2)) / np.max(np.abs(A), axis=(1, 2))
    if np.any(err > 1e-10) or np.any(mu <= 0):
        i = int(np.argmax(err))
        raise EigFailure("A is not diagonalisable to tolerance", sample=i, error=float(err[i]))
    mu0 = mu0_values(k)
    r = None
    if beta is not None and w is not None:
        scale = config.delta * np.asarray(beta) * np.asarray(w) / config.gamma_coupling
        r = (mu / scale[:, None]).T - mu0[:, None]
    return DecouplingData(matrix_B(k), a, A, C, D, mu0, V, mu, float(np.max(err)), r)


def stack_decoupling(profile: ProfileCurve, config: TodaConfig, stack: LayerStack) -> DecouplingData:
    op_beta = profile.resample(stack.s_grid).beta_s
    w = base_layer(profile, config, stack.s_grid)
    a = np.exp(-SQRT2 * np.diff(stack.h, axis=0))
    return decoupling(config, a, beta=op_beta, w=w)


# --------------------------------------------------------------------------
# potential regimes

def t_sigma(sigma: float, M: float = 3.0) -> float:
    """Negative root of -2 sigma t e^{2t} = e^{-2M} on the branch -2t > 1."""
    target = math.exp(-2 * M) / sigma
    if target >= math.exp(-1):
        raise DomainError("sigma too small for the requested M", sigma=sigma, M=M)
    g = lambda x: math.log(x) - x - math.log(target)  # x e^{-x} = target, x > 1
    hi = 2.0
    while g(hi) > 0:
        hi *= 2
    return -0.5 * brentq(g, 1.0, hi, xtol=1e-15, rtol=1e-15)


def potential_regimes(profile: ProfileCurve, config: TodaConfig, j: int = 1, *,
                      M: float = 3.0, t_min: float = -8.0, t_max: float | None = None,
                      T1: float = math.log(10.0), n_t: int = 6001,
                      grid: TodaGrid | None = None, stack: LayerStack | None = None) -> dict:
    """Emden-Fowler potential of mode j of the decoupled linear operator.

    Q(t) = -alpha~'/2 - alpha~^2/4 + beta~ (1 + sqrt2 (mu0_j + r_j) w).
    As t -> -inf, Q tends to -((tip-1)/2)^2, which vanishes only when the
    collapsing sphere is a circle; the regimes are fitted for the shifted
    potential Q - Q(-inf)."""
    if not 1 <= j <= config.k - 1:
        raise ValueError("mode index must be in 1..k-1")
    grid = grid or TodaGrid.build()
    if stack is None:
        stack = approx_solution(profile, config, grid=grid)
    dec = stack_decoupling(profile, config, stack)
    if t_max is None:
        t_max = math.log(stack.s_grid[-1])
    t = np.linspace(t_min, t_max, n_t)
    ef = emden_fowler(profile, t)
    s = np.exp(t)
    w = base_layer(profile, config, s)
    r = np.interp(s, stack.s_grid, dec.r[j - 1])
    mu0 = dec.mu0[j - 1]
    sigma = config.sigma
    wt = 1 + SQRT2 * (mu0 + r) * w
    Q = -ef.alpha_tilde_prime / 2 - ef.alpha_tilde**2 / 4 + ef.beta_tilde * wt
    tip = _tip_order(profile)
    Q_inf = -((tip - 1) / 2) ** 2
    Qs = Q - Q_inf
    dQ = np.gradient(Qs, t)
    # T0: last t <= 0 before Q stops increasing
    nonincr = np.nonzero((dQ <= 0) & (t <= 0))[0]
    T0 = 0.0 if nonincr.size == 0 else float(t[max(nonincr[0] - 1, 0)])
    T1 = max(T1, T0)
    I0 = t <= T0
    I1 = (t > T0) & (t <= T1)
    I2 = t > T1
    ts = t_sigma(sigma, M)
    out = {
        "sigma": sigma, "mode": j, "mu0": float(mu0), "t_sigma": ts, "M": M,
        "T0": T0, "T1": T1, "Q_minus_inf": Q_inf,
        "t": t, "Q": Q, "Q_shifted": Qs, "r_max": float(np.max(np.abs(dec.r[j - 1]))),
    }
    r0 = Qs[I0] / (sigma * np.exp(2 * t[I0]))
    out["c0"], out["C0"] = float(np.min(r0)), float(np.max(r0))
    out["monotone_on_I0"] = bool(np.all(dQ[I0] > 0))
    if I1.any():
        r1 = Qs[I1] / sigma
        out["c1"], out["C1"] = float(np.min(r1)), float(np.max(r1))
    if I2.any():
        r2 = Qs[I2] / (sigma + t[I2])
        out["c2"], out["C2"] = float(np.min(r2)), float(np.max(r2))
        big = t[I2] > t[I2][0] + 0.5 * (t[I2][-1] - t[I2][0])
        slope = Qs[I2][big] / (sigma + 2 * mu0 * t[I2][big])
        out["large_t_coefficient"] = float(slope[-1])
    fails = []
    if not out["c0"] > 0:
        fails.append("regime I lower bound")
    if not out["monotone_on_I0"]:
        fails.append("dQ/dt > 0 on regime I")
    if out.get("c1", 1.0) <= 0:
        fails.append("regime II lower bound")
    if out.get("c2", 1.0) <= 0:
        fails.append("regime III lower bound")
    if fails:
        raise RegimeFitError("potential regime bounds violated", failed=fails, T0=T0, T1=T1)
    return out


# --------------------------------------------------------------------------
# weighted norms and the scalar linear problem

def weighted_norm(f, s, mu: float, rho: float, kind: str = "sup_weighted",
                  holder_exponent: float = 0.5) -> float:
    """sup (s^2+2)^{mu/2} log(s+2)^rho |f|; the Hoelder variant adds the
    weighted largest difference quotient over sample pairs within distance 1."""
    f = np.asarray(f, float)
    s = np.asarray(s, float)
    wgt = (s**2 + 2) ** (mu / 2) * np.log(s + 2) ** rho
    sup = float(np.max(wgt * np.abs(f)))
    if kind == "sup_weighted":
        return sup
    if kind != "holder_weighted":
        raise ValueError(f"unknown norm kind {kind!r}")
    best = 0.0
    n = s.size
    for off in range(1, n):
        ds = s[off:] - s[:-off]
        ok = ds <= 1.0
        if not ok.any():
            break
        q = np.abs(f[off:] - f[:-off])[ok] / ds[ok] ** holder_exponent
        best = max(best, float(np.max(np.minimum(wgt[off:], wgt[:-off])[ok] * q)))
    return sup + best


def _mode_potential(profile, config, stack, j, grid) -> np.ndarray:
    dec = stack_decoupling(profile, config, stack)
    w = base_layer(profile, config, grid.s)
    return 1 + SQRT2 * (dec.mu0[j - 1] + dec.r[j - 1]) * w


def linear_solve(profile: ProfileCurve, config: TodaConfig, j: int, f, *,
                 grid: TodaGrid | None = None, stack: LayerStack | None = None,
                 rho: float = 1.0, far_condition: str = "tip",
                 check_singular: bool = True) -> tuple[np.ndarray, dict]:
    """Solve Delta q + beta (1 + sqrt2 (mu0_j + r_j) w) q = f for an even q.

    The regular homogeneous solution decays, so evenness alone leaves a one
    dimensional family.  ``"tip"`` selects q = 0 at the first node (the
    solution that vanishes at the tip); ``"robin"`` imposes
    q' + (N-2)/(2s) q = 0 at s_max instead."""
    grid = grid or TodaGrid.build()
    op = _Operator(profile, grid)
    if stack is None:
        stack = approx_solution(profile, config, grid=grid)
    pot = _mode_potential(profile, config, stack, j, grid)
    f = np.asarray(f, float)
    L = (op.lap + sp.diags(op.beta * pot)).tolil()
    rhs = f.copy()
    L[grid.size - 1, :] = _selector_row(op, far_condition)
    rhs[-1] = 0.0
    scale = _row_scale(op, far_condition)
    Ls = (sp.diags(scale) @ L.tocsr()).tocsr()
    smin = None
    if check_singular:
        sv = np.linalg.svd(Ls.toarray(), compute_uv=False)
        smin = float(sv[-1] / sv[0])
        if smin < 1e-13:
            raise SolveFailure("discrete operator is numerically singular", smallest_sv=smin)
    q = spsolve(Ls.tocsc(), scale * rhs)
    if not np.all(np.isfinite(q)):
        raise SolveFailure("non-finite solution", smallest_sv=smin)
    nf = weighted_norm(f, grid.s, 2.0, rho)
    nq = weighted_norm(q, grid.s, 0.0, rho - 0.5)
    sig = config.sigma
    rep = {"norm_f": nf, "norm_q": nq, "sigma": sig, "relative_smallest_sv": smin,
           "far_condition": far_condition,
           "ratio": nq / (sig**0.75 * math.log(sig) * nf) if nf > 0 else 0.0}
    return q, rep


# --------------------------------------------------------------------------
# Newton solve

FAR_CONDITIONS = ("tip", "robin")


def toda_residual(op: _Operator, config: TodaConfig, h: np.ndarray,
                  anchor: np.ndarray, far_condition: str = "tip") -> np.ndarray:
    """Residual of the system divided by delta, one row per layer.

    The row of the last node is replaced by the selecting condition: with
    ``"tip"`` it is h_j(x_0) - anchor_j(x_0) at the first node, with
    ``"robin"`` the Robin condition on h_j - anchor_j at s_max."""
    em, ep = _interaction(h)
    F = np.stack([op.J @ hj for hj in h]) - config.gamma_coupling / config.delta * (em - ep)
    if far_condition == "tip":
        F[:, -1] = h[:, 0] - anchor[:, 0]
    elif far_condition == "robin":
        F[:, -1] = (op.robin_row() @ (h - anchor).T).ravel()
    else:
        raise ValueError(f"far_condition must be one of {FAR_CONDITIONS}")
    return F


def _selector_row(op: _Operator, far_condition: str) -> sp.csr_matrix:
    if far_condition == "robin":
        return op.robin_row()
    row = np.zeros(op.grid.size)
    row[0] = 1.0
    return sp.csr_matrix(row)


def _row_scale(op: _Operator, far_condition: str = "tip") -> np.ndarray:
    """Equilibrating weights: (1+s^2) on interior rows; a Robin row is
    multiplied by s_max^{N/2}, since the regular homogeneous solutions have
    already decayed like s^{-(N-2)/2} there."""
    sc = 1 + op.s**2
    sc[-1] = op.s[-1] ** (op.dims.N / 2) if far_condition == "robin" else 1.0
    return sc


def _reduced(F: np.ndarray, h: np.ndarray) -> np.ndarray:
    """B-transformed system: consecutive differences of the equations (with
    their Robin rows), and the sum mode replaced by sum_j h_j = 0.

    Summing the equations gives J(sum h) = 0, whose regular solution almost
    satisfies any decaying far condition, so that mode is pinned instead by
    the zero-sum normalisation of the construction."""
    return np.concatenate([np.diff(F, axis=0), h.sum(axis=0)[None]])


def _newton_matrix(op: _Operator, config: TodaConfig, h: np.ndarray,
                   far_condition: str = "tip") -> sp.csc_matrix:
    k, n = h.shape
    g = config.gamma_coupling / config.delta * SQRT2
    em, ep = _interaction(h)
    Jl = op.J.tolil()
    Jl[n - 1, :] = _selector_row(op, far_condition)
    Jb = Jl.tocsr()
    last = np.ones(n)
    last[-1] = 0.0
    blocks = [[None] * k for _ in range(k)]
    for j in range(k):
        blocks[j][j] = Jb + sp.diags(g * (em[j] + ep[j]) * last)
        if j > 0:
            blocks[j][j - 1] = sp.diags(-g * em[j] * last)
        if j < k - 1:
            blocks[j][j + 1] = sp.diags(-g * ep[j] * last)
    full = sp.bmat(blocks, format="csr")
    Dk = sp.csr_matrix(np.diff(np.eye(k), axis=0))
    diff_rows = sp.kron(Dk, sp.identity(n)) @ full
    sum_rows = sp.kron(sp.csr_matrix(np.ones((1, k))), sp.identity(n))
    sc = np.concatenate([np.tile(_row_scale(op, far_condition), k - 1), np.ones(n)])
    return (sp.diags(sc) @ sp.vstack([diff_rows, sum_rows])).tocsc()


def _scaled(op: _Operator, G: np.ndarray, far_condition: str = "tip") -> np.ndarray:
    out = G.copy()
    out[:-1] *= _row_scale(op, far_condition)[None]
    return out


def _residual_size(F: np.ndarray, h: np.ndarray) -> float:
    return float(max(np.max(np.abs(F)), np.max(np.abs(h.sum(axis=0)))))


def newton_solve(profile: ProfileCurve, config: TodaConfig, initial: LayerStack, *,
                 tol: float = 1e-9, target: float = 1e-11, max_iter: int = 60,
                 rho: float = 1.0, far_condition: str = "tip") -> LayerStack:
    """Damped Newton iteration for the discrete Jacobi-Toda system.

    The reported residual is the largest of |J h_j - (gamma/delta)(...)|
    over nodes, the Robin rows and the zero-sum rows."""
    grid = initial.grid or TodaGrid.build()
    op = _Operator(profile, grid)
    anchor = initial.v(1)
    h = initial.h.copy()
    k, n = h.shape
    if np.min(np.diff(h, axis=0)) <= 0:
        raise OrderingLost("initial layers are not ordered")
    fc = far_condition
    F = toda_residual(op, config, h, anchor, fc)
    G = _scaled(op, _reduced(F, h), fc)
    hist = [_residual_size(F, h)]
    margins = [float(np.min(np.diff(h, axis=0)))]
    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while hist[-1] >= target and it < max_iter:
            it += 1
            step = spsolve(_newton_matrix(op, config, h, fc), -G.ravel()).reshape(k, n)
            if not np.all(np.isfinite(step)):
                raise NewtonDiverged("linear solve failed", residual_history=hist)
            g0 = float(np.linalg.norm(G))
            lam, accepted = 1.0, False
            while lam > 1e-10:
                trial = h + lam * step
                if np.min(np.diff(trial, axis=0)) > 0:
                    Ft = toda_residual(op, config, trial, anchor, fc)
                    Gt = _scaled(op, _reduced(Ft, trial), fc)
                    gt = float(np.linalg.norm(Gt))
                    if np.isfinite(gt) and gt <= (1 - 1e-4 * lam) * g0:
                        accepted = True
                        break
                lam *= 0.5
            if not accepted:
                if hist[-1] < tol:
                    break  # rounding floor
                raise NewtonDiverged("line search failed", residual_history=hist)
            h, F, G = trial, Ft, Gt
            hist.append(_residual_size(F, h))
            margins.append(float(np.min(np.diff(h, axis=0))))
    if hist[-1] >= tol:
        raise NewtonDiverged("residual did not reach tolerance", residual_history=hist)
    if np.min(np.diff(h, axis=0)) <= 0:
        raise OrderingLost("ordering lost at convergence")
    q = h - initial.h
    lev = initial.provenance.get("approximate_l", 2)
    out = LayerStack(grid.s, h, {"approximate_l": lev, "newton_converged": True,
                      "delta": config.delta, "gamma": config.gamma_coupling},
                     levels=initial.levels, errors=initial.errors, grid=grid)
    out.report = {
        "residual_history": hist,
        "iterations": it,
        "ordering_margin": out.ordering_margin(),
        "margins": margins,
        "initial_residual": hist[0],
        "weighted_norms": {
            "correction_sup": float(max(weighted_norm(qj, grid.s, 0.0, rho - 0.5) for qj in q)),
            "sigma_scaling": config.sigma ** ((5 - 2 * lev) / 4),
        },
        "delta_star": None,
        "far_condition": fc,
    }
    return out


def find_delta_star(profile: ProfileCurve, k: int, *, gamma: float = A_STAR, l: int = 2,
                    lo: float = 1e-10, hi: float = 10.0, iterations: int = 12,
                    grid: TodaGrid | None = None) -> float:
    """Largest delta (bisection in log delta) for which the approximate
    solution exists and Newton converges with ordering intact."""
    grid = grid or TodaGrid.build()

    def ok(d: float) -> bool:
        cfg = TodaConfig(k=k, delta=d, gamma_coupling=gamma, l=l)
        try:
            newton_solve(profile, cfg, approx_solution(profile, cfg, grid=grid))
            return True
        except (LogDomainError, OrthogonalityViolated, NewtonDiverged, OrderingLost,
                DomainError, FloatingPointError):
            return False

    if not ok(lo):
        raise NewtonDiverged("no convergence even at the smallest delta", delta=lo)
    if ok(hi):
        return hi
    a, b = math.log(lo), math.log(hi)
    for _ in range(iterations):
        mid = 0.5 * (a + b)
        if ok(math.exp(mid)):
            a = mid
        else:
            b = mid
    return math.exp(a)


# --------------------------------------------------------------------------
# export

def stack_to_csv(stack: LayerStack, path) -> None:
    header = "s," + ",".join(f"h{j + 1}" for j in range(stack.k))
    np.savetxt(path, np.column_stack([stack.s_grid, stack.h.T]), delimiter=",",
               header=header, comments="", fmt="%.17g")


def solve_report(stack: LayerStack) -> dict:
    r = stack.report
    return {
        "residual_history": r.get("residual_history", []),
        "delta_star": r.get("delta_star"),
        "ordering_margin": stack.ordering_margin(),
        "weighted_norms": r.get("weighted_norms", {}),
        "provenance": stack.provenance,
    }


def write_report(stack: LayerStack, path) -> None:
    with open(path, "w") as fh:
        json.dump(solve_report(stack), fh, indent=2, sort_keys=True)
