"""Planar dynamical system for O(m)xO(n)-invariant minimal hypersurfaces.

The field is

    X1(u, v) = cos u sin u sin(u - v)
    X2(u, v) = (m - 1) sin u sin v - (n - 1) cos u cos v

on the rectangle [0, pi/2] x [-pi, pi].  Its equilibria p1..p7 and the two
heteroclinic orbits leaving the node p6 generate the surfaces asymptotic to
the Lawson cone.

Orientation notes (derived, see the decisions ledger): along an orbit of X,
a generating curve with a = r sin u, b = r cos u, a' = sin v, b' = cos v is
traced *backwards* in orbit time, with arc length ds = -r sin u cos u dt and
the roles of m and n exchanged.  The shooter therefore integrates the
reversed flow and carries log r and arc length along as quadratures, so that
:mod:`lawson.surface` can rebuild the curve without a second integration.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np
from scipy.integrate import solve_ivp

from .errors import InvalidDimensions, NonConvergence, NotAnEquilibrium

__all__ = [
    "DimensionPair",
    "PhasePoint",
    "EquilibriumKind",
    "Equilibrium",
    "Orbit",
    "Branch",
    "vector_field",
    "jacobian",
    "divergence",
    "equilibria",
    "linearize",
    "p6_eigen_closed_form",
    "p2_eigen_closed_form",
    "shoot_heteroclinic",
    "orbit_to_csv",
    "equilibria_to_json",
]

EQ_TOL = 1e-12
SIGN_MARGIN = 1e-9


@dataclass(frozen=True)
class DimensionPair:
    m: int
    n: int

    def __post_init__(self) -> None:
        if int(self.m) != self.m or int(self.n) != self.n:
            raise InvalidDimensions("m and n must be integers", m=self.m, n=self.n)
        if self.m < 2 or self.n < 2:
            raise InvalidDimensions("m and n must be at least 2", m=self.m, n=self.n)
        if self.m + self.n < 8:
            raise InvalidDimensions("the construction needs m + n >= 8",
                                    m=self.m, n=self.n)

    @property
    def N(self) -> int:
        return self.m + self.n - 1

    @property
    def alpha_bar(self) -> float:
        return math.atan(math.sqrt((self.n - 1) / (self.m - 1)))

    @property
    def _disc(self) -> float:
        h = (self.N - 2) / 2
        return h * h - (self.N - 1)

    @property
    def gamma_plus(self) -> float:
        return -(self.N - 2) / 2 + math.sqrt(self._disc)

    @property
    def gamma_minus(self) -> float:
        return -(self.N - 2) / 2 - math.sqrt(self._disc)

    def mirrored(self) -> "DimensionPair":
        return DimensionPair(self.n, self.m)

    def as_tuple(self) -> tuple[int, int]:
        return (self.m, self.n)


def _dims(d) -> DimensionPair:
    if isinstance(d, DimensionPair):
        return d
    m, n = d
    return DimensionPair(int(m), int(n))


@dataclass(frozen=True)
class PhasePoint:
    u: float
    v: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError("phase point must be finite")
        eps = 1e-12
        if not (-eps <= self.u <= math.pi / 2 + eps and -math.pi - eps <= self.v <= math.pi + eps):
            raise ValueError(f"phase point ({self.u}, {self.v}) outside the closed rectangle")

    def array(self) -> np.ndarray:
        return np.array([self.u, self.v])


class EquilibriumKind(str, Enum):
    saddle = "saddle"
    unstable_node = "unstable_node"
    stable_node = "stable_node"


class Branch(str, Enum):
    sigma_plus = "sigma_plus"
    sigma_minus = "sigma_minus"

    @classmethod
    def parse(cls, value) -> "Branch":
        if isinstance(value, Branch):
            return value
        key = str(value).lower()
        aliases = {"plus": cls.sigma_plus, "+": cls.sigma_plus,
                   "minus": cls.sigma_minus, "-": cls.sigma_minus}
        if key in aliases:
            return aliases[key]
        return cls(key)


@dataclass(frozen=True)
class Equilibrium:
    name: str
    location: PhasePoint
    kind: EquilibriumKind
    eigenvalues: tuple[float, float]
    eigenvectors: tuple[tuple[float, float], tuple[float, float]]
    complex_pair: bool = False

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "location": [self.location.u, self.location.v],
            "kind": self.kind.value,
            "eigenvalues": list(self.eigenvalues),
            "eigenvectors": [list(e) for e in self.eigenvectors],
            "complex_pair": self.complex_pair,
        }


def vector_field(dims, p) -> tuple[float, float]:
    """Return (X1, X2) at ``p``.  Accepts a PhasePoint or a (u, v) pair;
    numpy arrays broadcast."""
    d = _dims(dims)
    u, v = (p.u, p.v) if isinstance(p, PhasePoint) else p
    su, cu = np.sin(u), np.cos(u)
    x1 = cu * su * np.sin(u - v)
    x2 = (d.m - 1) * su * np.sin(v) - (d.n - 1) * cu * np.cos(v)
    return x1, x2


def jacobian(dims, p) -> np.ndarray:
    d = _dims(dims)
    u, v = (p.u, p.v) if isinstance(p, PhasePoint) else p
    su, cu, sv, cv = math.sin(u), math.cos(u), math.sin(v), math.cos(v)
    return np.array([
        [math.cos(2 * u) * math.sin(u - v) + su * cu * math.cos(u - v),
         -su * cu * math.cos(u - v)],
        [(d.m - 1) * cu * sv + (d.n - 1) * su * cv,
         (d.m - 1) * su * cv + (d.n - 1) * cu * sv],
    ])


def divergence(dims, p):
    d = _dims(dims)
    u, v = (p.u, p.v) if isinstance(p, PhasePoint) else p
    su, cu = np.sin(u), np.cos(u)
    return ((3 * cu**2 + d.m - 2) * su * np.cos(v)
            + (3 * su**2 + d.n - 2) * np.sin(v) * cu)


def _classify(vals: np.ndarray) -> EquilibriumKind:
    re = np.real(vals)
    if np.all(re > SIGN_MARGIN):
        return EquilibriumKind.unstable_node
    if np.all(re < -SIGN_MARGIN):
        return EquilibriumKind.stable_node
    if re.min() < -SIGN_MARGIN and re.max() > SIGN_MARGIN:
        return EquilibriumKind.saddle
    raise NotAnEquilibrium("eigenvalue sign undecidable within margin",
                           eigenvalues=np.real(vals))


def _eigpairs(J: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    vals, vecs = np.linalg.eig(J)
    complex_pair = bool(np.any(np.abs(np.imag(vals)) > SIGN_MARGIN))
    if complex_pair:
        return vals, vecs, True
    vals = np.real(vals)
    vecs = np.real(vecs)
    order = np.argsort(-vals)
    vals, vecs = vals[order], vecs[:, order]
    for j in range(2):
        col = vecs[:, j]
        if abs(col[0]) > 1e-12:
            vecs[:, j] = col / col[0]
        else:
            vecs[:, j] = col / col[1]
    return vals, vecs, False


def linearize(dims, eq) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and eigenvectors (columns, first entry 1
    where possible) of the Jacobian of X at an equilibrium."""
    d = _dims(dims)
    p = eq.location if isinstance(eq, Equilibrium) else eq
    if not isinstance(p, PhasePoint):
        p = PhasePoint(*p)
    x1, x2 = vector_field(d, p)
    if math.hypot(x1, x2) > 1e-10:
        raise NotAnEquilibrium("vector field does not vanish", point=[p.u, p.v],
                               value=[x1, x2])
    vals, vecs, _ = _eigpairs(jacobian(d, p))
    return vals, vecs


def equilibria(dims) -> list[Equilibrium]:
    d = _dims(dims)
    ab = d.alpha_bar
    hp = math.pi / 2
    pts = [
        ("p1", 0.0, -hp), ("p2", 0.0, hp), ("p3", hp, -math.pi),
        ("p4", hp, 0.0), ("p5", hp, math.pi), ("p6", ab, ab), ("p7", ab, ab - math.pi),
    ]
    out = []
    for name, u, v in pts:
        p = PhasePoint(u, v)
        x1, x2 = vector_field(d, p)
        assert math.hypot(x1, x2) < EQ_TOL, (name, x1, x2)
        vals, vecs, cplx = _eigpairs(jacobian(d, p))
        if name == "p6":
            # discriminant N^2 - 8N + 8 > 0 for N >= 7: real node, asserted
            assert d.N**2 - 8 * d.N + 8 > 0 and not cplx
        kind = _classify(vals)
        out.append(Equilibrium(
            name=name, location=p, kind=kind,
            eigenvalues=(float(np.real(vals[0])), float(np.real(vals[1]))),
            eigenvectors=(tuple(np.real(vecs[:, 0]).tolist()),
                          tuple(np.real(vecs[:, 1]).tolist())),
            complex_pair=cplx,
        ))
    return out


def equilibrium(dims, name: str) -> Equilibrium:
    for e in equilibria(dims):
        if e.name == name:
            return e
    raise KeyError(name)


def p6_eigen_closed_form(dims) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigenpairs at p6.

    mu_{1,2} = (sin a cos a / 2)(N +- sqrt(N^2 - 8N + 8)) with eigenvectors
    (1, -2(N-1)/(N-2 -+ sqrt(N^2-8N+8))), i.e. (1, 1 - mu/(sin a cos a)).
    """
    d = _dims(dims)
    N = d.N
    sc = math.sin(d.alpha_bar) * math.cos(d.alpha_bar)
    r = math.sqrt(N * N - 8 * N + 8)
    vals = np.array([sc / 2 * (N + r), sc / 2 * (N - r)])
    vecs = np.array([[1.0, 1.0],
                     [-2 * (N - 1) / (N - 2 - r), -2 * (N - 1) / (N - 2 + r)]])
    return vals, vecs


def p2_eigen_closed_form(dims) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigenpairs at p2 = (0, pi/2): eigenvalue n-1 along (0, 1)
    and eigenvalue -1 along (1, -(m-1)/n)."""
    d = _dims(dims)
    vals = np.array([d.n - 1.0, -1.0])
    vecs = np.array([[0.0, 1.0], [1.0, -(d.m - 1) / d.n]])
    return vals, vecs


@dataclass
class Orbit:
    """Heteroclinic orbit sampled in increasing orbit time ``t``.

    Besides (u, v) the samples carry ``log_r`` and ``arc``: the logarithm of
    the radius and the arc length of the generating curve built from this
    orbit (unnormalised; see the module docstring for the m <-> n exchange).
    """
    dims: DimensionPair
    branch: Branch
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    log_r: np.ndarray
    arc: np.ndarray
    origin: Equilibrium
    target: Equilibrium
    monotone_u_sign: int
    endpoint_distance: float
    origin_distance: float
    tol: float
    monotonicity_violations: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    dense: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    tau_span: tuple[float, float] = (0.0, 0.0)
    tail: dict = field(default_factory=dict, repr=False)

    @property
    def u_monotone(self) -> bool:
        return len(self.monotonicity_violations) == 0

    def max_cone_overshoot(self) -> float:
        """Largest excursion of u past the cone value alpha_bar on the side
        opposite to the target (zero when u is monotone)."""
        side = self.monotone_u_sign
        return float(max(0.0, np.max(-side * (self.u - self.origin.location.u))))

    @property
    def samples(self) -> list[tuple[float, PhasePoint]]:
        return [(float(t), PhasePoint(float(u), float(v)))
                for t, u, v in zip(self.t, self.u, self.v)]

    def ode_defect(self, rtol: float = 1e-12) -> float:
        """Largest mismatch between each sample and an independent RK45
        integration of X started at the previous sample."""
        worst = 0.0
        f = lambda t, y: vector_field(self.dims, (y[0], y[1]))
        for i in range(len(self.t) - 1):
            seg = solve_ivp(f, (self.t[i], self.t[i + 1]), [self.u[i], self.v[i]],
                            method="RK45", rtol=rtol, atol=1e-14)
            y = seg.y[:, -1]
            worst = max(worst, float(np.hypot(y[0] - self.u[i + 1], y[1] - self.v[i + 1])))
        return worst


def _stable_direction(d: DimensionPair, branch: Branch) -> tuple[str, np.ndarray]:
    if branch is Branch.sigma_plus:
        # p2 = (0, pi/2); stable eigenvector (1, -(m-1)/n), orbit at u > 0
        vec = np.array([1.0, -(d.m - 1) / d.n])
        name = "p2"
    else:
        # p4 = (pi/2, 0); stable eigenvector (1, -(n-1)/m), orbit at u < pi/2
        vec = -np.array([1.0, -(d.n - 1) / d.m])
        name = "p4"
    return name, vec / np.linalg.norm(vec)


def _distance_to_axis(branch: Branch, u: float, r: float) -> float:
    # sigma_plus collapses a = r sin u; sigma_minus collapses b = r cos u
    return r * math.sin(u) if branch is Branch.sigma_plus else r * math.cos(u)


def shoot_heteroclinic(dims, branch, tol: float = 1e-8, *, offset: float = 1e-6,
                       rtol: float = 1e-13, atol: float = 1e-15,
                       arc_stop: float = 1e10, tau_max: float = 400.0) -> Orbit:
    """Compute the heteroclinic from p6 to p2 (sigma_plus) or p4 (sigma_minus).

    The orbit is the one-dimensional stable manifold of the target saddle;
    forward shooting from the node cannot land on it, so it is traced from
    the saddle along the stable eigenvector with the reversed field until it
    settles on p6.  Near the saddle the linearised flow extends it
    analytically down to ``tol``.
    """
    d = _dims(dims)
    br = Branch.parse(branch)
    if not tol > 0:
        raise ValueError("tol must be positive")
    eqs = {e.name: e for e in equilibria(d)}
    p6 = eqs["p6"]
    name, direction = _stable_direction(d, br)
    target = eqs[name]
    p_t = target.location.array()
    y_start = p_t + offset * direction
    r0 = 1.0
    s0 = _distance_to_axis(br, y_start[0], r0)

    m1, n1 = d.m - 1, d.n - 1

    def rhs(tau, y):
        u, v, rho, _s = y
        su, cu = math.sin(u), math.cos(u)
        sc = su * cu
        return [-sc * math.sin(u - v),
                -(m1 * su * math.sin(v) - n1 * cu * math.cos(v)),
                sc * math.cos(u - v),
                math.exp(rho) * sc]

    def far(tau, y):
        return y[3] - arc_stop
    far.terminal = True

    def escaped(tau, y):
        u, v = y[0], y[1]
        return min(u + 1e-9, math.pi / 2 + 1e-9 - u, v + math.pi + 1e-9, math.pi + 1e-9 - v)
    escaped.terminal = True

    sol = solve_ivp(rhs, (0.0, tau_max), [y_start[0], y_start[1], math.log(r0), s0],
                    method="DOP853", rtol=rtol, atol=atol, dense_output=True,
                    events=(far, escaped))
    if sol.status < 0:
        raise NonConvergence("integrator failure: " + sol.message)
    uu, vv = sol.y[0], sol.y[1]
    dist6 = np.hypot(uu - p6.location.u, vv - p6.location.v)
    if len(sol.t_events[1]):
        raise NonConvergence("trajectory left the closed rectangle",
                             closest_approach=float(dist6.min()))
    if dist6[-1] > 1e-6:
        raise NonConvergence("trajectory did not settle on p6",
                             closest_approach=float(dist6.min()))

    # analytic extension along the stable eigenvector toward the saddle
    deltas = offset * 10.0 ** -np.arange(1, 40)
    deltas = deltas[: int(np.searchsorted(-deltas, -tol / 10.0)) + 1]
    lam_s = -1.0
    ext_t = np.log(offset / deltas) / -lam_s
    ext_pts = p_t[None, :] + deltas[:, None] * direction[None, :]
    ext_arc = np.array([_distance_to_axis(br, p[0], r0) for p in ext_pts])

    tau = sol.t
    t_main = -tau[::-1]
    t_ext = ext_t  # positive times beyond t = 0
    t = np.concatenate([t_main, t_ext])
    u = np.concatenate([uu[::-1], ext_pts[:, 0]])
    v = np.concatenate([vv[::-1], ext_pts[:, 1]])
    log_r = np.concatenate([sol.y[2][::-1], np.full(len(deltas), math.log(r0))])
    arc = np.concatenate([sol.y[3][::-1], ext_arc])

    # samples that sit on p6 to rounding carry no information on u; they
    # stay available through the dense solution
    keep = int(np.argmax(np.abs(u - p6.location.u) > 1e-9))
    t, u, v, log_r, arc = t[keep:], u[keep:], v[keep:], log_r[keep:], arc[keep:]

    sign = -1 if br is Branch.sigma_plus else 1
    violations = np.flatnonzero(sign * np.diff(u) <= 0)

    end_dist = float(np.hypot(u[-1] - p_t[0], v[-1] - p_t[1]))
    if end_dist >= tol:
        raise NonConvergence("endpoint not within tolerance", closest_approach=end_dist)
    return Orbit(
        dims=d, branch=br, t=t, u=u, v=v, log_r=log_r, arc=arc,
        origin=p6, target=target, monotone_u_sign=sign,
        endpoint_distance=end_dist, origin_distance=float(np.hypot(
            u[0] - p6.location.u, v[0] - p6.location.v)), tol=tol,
        monotonicity_violations=violations,
        dense=sol.sol, tau_span=(float(sol.t[0]), float(sol.t[-1])),
        tail={"offset": offset, "direction": direction.tolist(), "arc_start": s0,
              "stable_rate": lam_s},
    )


def orbit_to_csv(orbit: Orbit, path) -> None:
    data = np.column_stack([orbit.t, orbit.u, orbit.v])
    np.savetxt(path, data, delimiter=",", header="t,u,v", comments="", fmt="%.17g")


def equilibria_to_json(eqs: Iterable[Equilibrium], path=None) -> str:
    text = json.dumps([e.to_dict() for e in eqs], indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
