"""Hitting-time moment fields of the diffusion dX = -V'(X) dt + sqrt(2) dB.

For an interval U the fields W(x) = E_x[exp(theta T_U)] and v_q(x) = E_x[T_U^q]
solve LW + theta W = 0 and L v_q = -q v_{q-1} on each component of the
complement, with W = 1, v_q = 0 on the boundary of U and zero flux far out.

Each component is discretised conservatively: node masses e^{-V} * cell and
edge conductances e^{-V(mid)} / h. The discrete operator is then the generator
of a birth-death chain, so discrete fields are exact moments of that chain.
Near U the nodes are the measure grid nodes; past the measure domain the grid
is stretched geometrically and the far end is pushed out by repeated doubling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .measure1d import Measure1D, cdf, rebuild
from .operator1d import (
    assemble_form,
    constrained_ratio,
    poincare_constant,
    restricted_poincare,
)

BLOW_UP_LEVEL = 1e12
SHIFT_TOL = 1e-4
DOUBLINGS = 14
GROWTH = 0.02
PROBES = (1.0, 2.0)
RATE_RTOL = 1e-3
RATE_FLOOR = 1e-12
RATE_CEIL = 1e8
RATE_DRIFT = 0.01
KAPPA = 4.0 / math.pi ** 2
CP_DIVERGENCE_RATIO = 1.5
ULTRA_CONVERGED = 1e-6


class HittingError(ValueError):
    pass


class NotLyapunov(HittingError):
    pass


@dataclass(frozen=True)
class HittingProblem:
    measure: Measure1D
    U: tuple[float, float]
    kind: str  # "exp_moment" or "poly_moment"
    theta: float | None = None
    q: int | None = None

    def __post_init__(self):
        lo, hi = map(float, self.U)
        object.__setattr__(self, "U", (lo, hi))
        if not lo < hi:
            raise HittingError(f"U must satisfy u_lo < u_hi, got {self.U}")
        dlo, dhi = self.measure.domain
        if hi <= dlo or lo >= dhi:
            raise HittingError(f"U={self.U} does not meet the domain {self.measure.domain}")
        if self.mu_U <= 0:
            raise HittingError(f"U={self.U} has zero mass")
        if self.kind == "exp_moment":
            if self.theta is None or not self.theta > 0:
                raise HittingError("exp_moment needs theta > 0")
        elif self.kind == "poly_moment":
            if self.q is None or int(self.q) != self.q or self.q < 0:
                raise HittingError("poly_moment needs an integer q >= 0")
        else:
            raise HittingError(f"unknown kind {self.kind!r}")

    @property
    def mu_U(self) -> float:
        return mass_of(self.measure, self.U)

    @property
    def boundary_value(self) -> float:
        return 1.0 if self.kind == "exp_moment" or self.q == 0 else 0.0


def mass_of(m: Measure1D, U) -> float:
    return cdf(m, U[1]) - cdf(m, U[0])


# ---------------------------------------------------------------- grids


@dataclass(frozen=True, eq=False)
class Component:
    """One side of the complement of U, indexed by distance s from the boundary."""

    side: int  # +1 right of U, -1 left of U
    boundary: float
    s: np.ndarray  # s[0] = 0 is the boundary node
    log_edge: np.ndarray  # edge (i-1, i) for i = 1..n-1
    log_mass: np.ndarray  # nodes 1..n-1
    measure_index: np.ndarray  # measure grid index of nodes 1..len(measure_index)

    @property
    def x(self) -> np.ndarray:
        return self.boundary + self.side * self.s

    @property
    def n_free(self) -> int:
        return self.log_mass.size


def _component(m: Measure1D, side: int, b: float, extent: float | None) -> Component | None:
    g = m.grid
    tol = 1e-9 * m.dx
    idx = np.flatnonzero(g > b + tol) if side > 0 else np.flatnonzero(g < b - tol)[::-1]
    if idx.size == 0:
        return None
    s = np.abs(g[idx] - b)
    ext = []
    if extent is not None and not m.spec.compact:
        last, h = s[-1], m.dx
        while last < extent:
            h *= 1.0 + GROWTH
            last += h
            ext.append(last)
    s_all = np.concatenate([[0.0], s, ext])
    h = np.diff(s_all)
    # a compact family keeps the measure's last half cell up to the wall
    right = np.append(h[1:], m.dx if (m.spec.compact or extent is None) else 0.0)
    cell = 0.5 * (h + right)
    vmin = float(m.V.min())
    mid = b + side * 0.5 * (s_all[1:] + s_all[:-1])
    x = b + side * s_all[1:]
    with np.errstate(over="ignore"):
        log_edge = -(m.spec.V(mid) - vmin) - np.log(h)
        log_mass = -(m.spec.V(x) - vmin) + np.log(cell)
    return Component(side, b, s_all, log_edge, log_mass, idx)


def _components(m: Measure1D, U, extent_scale: float | None):
    out = []
    lo, hi = m.domain
    for side, b, reach in ((-1, U[0], U[0] - lo), (1, U[1], hi - U[1])):
        extent = None if extent_scale is None else max(reach, 1.0) * extent_scale
        c = _component(m, side, b, extent)
        if c is not None:
            out.append(c)
    return out


# ---------------------------------------------------------------- solvers


def _solve_exp(c: Component, theta: float) -> np.ndarray | None:
    """W on the component, or None when the pivots lose positivity (theta too large).

    Eliminating from the reflecting end gives W_{i+1} = rho_{i+1} W_i with
    rho_i = 1 / (1 + r_i (1 - rho_{i+1}) - theta m_i / e_i). The pivots stay
    positive exactly while theta is below the bottom of the discrete spectrum.
    """
    le, lm = c.log_edge, c.log_mass
    with np.errstate(over="ignore", under="ignore"):
        r = np.append(np.exp(le[1:] - le[:-1]), 0.0).tolist()
        t = (theta * np.exp(lm - le)).tolist()
    piv = [0.0] * len(t)
    rho = 0.0
    for j in range(len(t) - 1, -1, -1):
        d = 1.0 + r[j] * (1.0 - rho) - t[j]
        if not d > 0.0 or not math.isfinite(d):
            return None
        piv[j] = d
        rho = 1.0 / d
    with np.errstate(over="ignore"):
        return np.exp(np.concatenate([[0.0], np.cumsum(-np.log(piv))]))


def _solve_poly(c: Component, q: int, prev: np.ndarray) -> np.ndarray:
    """v_q from the flux identity e_i (v_i - v_{i-1}) = q sum_{j >= i} m_j v_{q-1, j}."""
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        src = c.log_mass + np.log(prev[1:])
        tail = np.logaddexp.accumulate(src[::-1])[::-1]
        incr = np.exp(math.log(q) + tail - c.log_edge)
        return np.concatenate([[0.0], np.cumsum(incr)])


def _probe(c: Component, values: np.ndarray, log: bool) -> np.ndarray:
    s = np.minimum(PROBES, c.s[-1])
    if log:
        return np.exp(np.interp(s, c.s, np.log(values)))
    return np.interp(s, c.s, values)


def _reported_max(c: Component, values: np.ndarray) -> float:
    return float(np.max(values[: c.measure_index.size + 1]))


# ---------------------------------------------------------------- solutions


@dataclass(frozen=True, eq=False)
class HittingSolution:
    problem: HittingProblem
    field: np.ndarray  # on the measure grid, boundary value inside U
    blow_up: bool
    truncation_shift: float
    integral_against_mu: float
    integral_shift: float
    components: tuple = ()  # (Component, values) at the largest extent
    reason: str = ""

    def at(self, x: float) -> float:
        """Field value at x (boundary value inside U, log-linear between nodes)."""
        lo, hi = self.problem.U
        if lo <= x <= hi:
            return self.problem.boundary_value
        for c, v in self.components:
            s = (x - c.boundary) * c.side
            if 0 <= s <= c.s[-1]:
                if self.problem.kind == "exp_moment":
                    return float(np.exp(np.interp(s, c.s, np.log(v))))
                return float(np.interp(s, c.s, v))
        raise HittingError(f"x={x} lies outside the solved region")


def _integral(m: Measure1D, U, comps_values, bval: float) -> float:
    """int v dmu: measure weights on the grid plus the extension nodes beyond it."""
    vmin = float(m.V.min())
    total = float(np.exp(-(m.V - vmin)).sum()) * m.dx
    f = np.full(m.n, bval)
    tail = 0.0
    for c, v in comps_values:
        k = c.measure_index.size
        f[c.measure_index] = v[1 : k + 1]
        with np.errstate(over="ignore", invalid="ignore"):
            tail += float(np.sum(np.exp(c.log_mass[k:]) * v[k + 1 :])) / total
    with np.errstate(over="ignore", invalid="ignore"):
        return float(m.weights @ f) + tail


def _assemble(problem: HittingProblem, solve) -> HittingSolution:
    """Solve at the two largest extents and compare at the probe points."""
    m = problem.measure
    bval = problem.boundary_value
    log = problem.kind == "exp_moment"
    scales = [None] if m.spec.compact else [2.0 ** (DOUBLINGS - 1), 2.0 ** DOUBLINGS]
    runs = []
    for scale in scales:
        comps = _components(m, problem.U, scale)
        vals = [solve(c) for c in comps]
        runs.append((comps, vals))
    comps, vals = runs[-1]
    fieldv = np.full(m.n, bval)
    blow, reason = False, ""
    if any(v is None for v in vals):
        blow, reason = True, "discrete solution lost positivity"
    else:
        for c, v in zip(comps, vals):
            if not np.all(np.isfinite(v[: c.measure_index.size + 1])):
                blow, reason = True, "non-finite values"
            elif np.any(v < 0):
                blow, reason = True, "negative values"
            elif _reported_max(c, v) > BLOW_UP_LEVEL:
                blow, reason = True, f"field exceeds {BLOW_UP_LEVEL:g}"
            fieldv[c.measure_index] = v[1 : c.measure_index.size + 1]
    shift, ishift = 0.0, 0.0
    integral = math.inf
    if not blow:
        integral = _integral(m, problem.U, zip(comps, vals), bval)
        if len(runs) == 2:
            old_c, old_v = runs[0]
            if any(v is None for v in old_v):
                blow, reason = True, "discrete solution lost positivity at the smaller extent"
            else:
                for c_new, v_new, c_old, v_old in zip(comps, vals, old_c, old_v):
                    a, b = _probe(c_new, v_new, log), _probe(c_old, v_old, log)
                    denom = np.maximum(np.abs(a), 1e-300)
                    shift = max(shift, float(np.max(np.abs(a - b) / denom)))
                prev = _integral(m, problem.U, zip(old_c, old_v), bval)
                ishift = abs(integral - prev) / max(abs(integral), 1e-300)
                if not math.isfinite(shift) or shift >= SHIFT_TOL:
                    blow, reason = True, f"truncation shift {shift:.3e} >= {SHIFT_TOL:g}"
    if blow:
        integral = math.inf
    return HittingSolution(problem, fieldv, blow, shift, integral, ishift,
                           tuple(zip(comps, vals)), reason)


def exp_moment_field(p: HittingProblem) -> HittingSolution:
    if p.kind != "exp_moment":
        raise HittingError("exp_moment_field needs an exp_moment problem")
    return _assemble(p, lambda c: _solve_exp(c, p.theta))


def poly_moment_fields(m: Measure1D, U, q_max: int) -> list[HittingSolution]:
    """v_0, ..., v_{q_max}; each entry carries its own blow-up flag."""
    if q_max < 1:
        raise HittingError("q_max must be >= 1")
    out = []
    for q in range(q_max + 1):
        sol = _assemble(HittingProblem(m, U, "poly_moment", q=q),
                        lambda c, q=q: _poly_chain(c, q))
        if out and out[-1].blow_up and not sol.blow_up:
            sol = HittingSolution(sol.problem, sol.field, True, sol.truncation_shift, math.inf,
                                  sol.integral_shift, sol.components, "lower moment diverges")
        out.append(sol)
    return out


def _poly_chain(c: Component, q: int) -> np.ndarray:
    vals = np.ones(c.s.size)
    for k in range(1, q + 1):
        vals = _solve_poly(c, k, vals)
    return vals


# ---------------------------------------------------------------- critical rate


def _component_blows(pair, theta: float) -> bool:
    small, large = pair
    vl = _solve_exp(large, theta)
    if vl is None or _reported_max(large, vl) > BLOW_UP_LEVEL:
        return True
    if small is None:
        return False
    vs = _solve_exp(small, theta)
    if vs is None:
        return True
    a, b = _probe(large, vl, True), _probe(small, vs, True)
    return bool(np.max(np.abs(a - b) / a) >= SHIFT_TOL)


def critical_rate(m: Measure1D, U) -> float:
    """sup of theta with a finite exp-moment field, by bisection on the blow-up flag.

    Returns inf when U covers the whole domain. Returns 0 when blow-up
    persists down to RATE_FLOOR, or when the rate found at the largest extent
    is still falling (by more than RATE_DRIFT) relative to the previous
    extent, which is how a rate set only by the truncation shows up.
    """
    HittingProblem(m, U, "poly_moment", q=0)  # validates U
    if m.spec.compact:
        pairs = [(None, c) for c in _components(m, U, None)]
        return min((_bisect_rate(p) for p in pairs), default=math.inf)
    grids = [_components(m, U, 2.0 ** k) for k in (DOUBLINGS - 2, DOUBLINGS - 1, DOUBLINGS)]
    if not grids[-1]:
        return math.inf
    rates = []
    for a, b, c in zip(*grids):
        rate = _bisect_rate((b, c))
        if rate > 0 and math.isfinite(rate) and rate < (1.0 - RATE_DRIFT) * _bisect_rate((a, b)):
            rate = 0.0
        rates.append(rate)
    return min(rates)


def _bisect_rate(pair) -> float:
    theta = 1.0
    if _component_blows(pair, theta):
        hi = theta
        while True:
            theta *= 0.25
            if theta < RATE_FLOOR:
                return 0.0
            if not _component_blows(pair, theta):
                lo = theta
                break
            hi = theta
    else:
        lo = theta
        while True:
            theta *= 4.0
            if theta > RATE_CEIL:
                return math.inf
            if _component_blows(pair, theta):
                hi = theta
                break
            lo = theta
    while hi / lo - 1.0 > RATE_RTOL:
        mid = math.sqrt(lo * hi)
        if _component_blows(pair, mid):
            hi = mid
        else:
            lo = mid
    return math.sqrt(lo * hi)


# ---------------------------------------------------------------- Poincare helpers


class CPEstimate(NamedTuple):
    C_P: float
    diverging: bool
    C_P_wide: float


def poincare_with_divergence(m: Measure1D) -> CPEstimate:
    """C_P on the measure grid, flagged infinite when it keeps growing with the domain.

    Non-compact measures are rebuilt on a domain four times wider at the same
    spacing; growth beyond CP_DIVERGENCE_RATIO means the truncated value is
    an artefact of the cut and the measure has no Poincare inequality.
    """
    cp = poincare_constant(assemble_form(m)).C_P
    if m.spec.compact or m.spec.family != "heavy_tail":
        return CPEstimate(cp, False, cp)
    wide = rebuild(m, 4 * m.n, stretch=4.0)
    cp_wide = poincare_constant(assemble_form(wide)).C_P
    if cp_wide > CP_DIVERGENCE_RATIO * cp:
        return CPEstimate(math.inf, True, cp_wide)
    return CPEstimate(cp, False, cp_wide)


def theta_U(mu_U: float, C_P: float) -> float:
    """Guaranteed exponential rate from the Poincare constant and mu(U)."""
    if not 0 < mu_U <= 1:
        raise HittingError(f"mu(U) must lie in (0, 1], got {mu_U}")
    if not math.isfinite(C_P):
        return 0.0
    if mu_U <= 0.5:
        return mu_U / (8.0 * C_P * (1.0 - mu_U))
    return mu_U ** 2 / (2.0 * C_P)


def chi_slope_sq(r: float) -> float:
    """sup |chi'|^2 for the cubic smoothstep falling from 1 to 0 over width r."""
    return (1.5 / r) ** 2


def _clip(m: Measure1D, a: float, b: float) -> tuple[float, float]:
    lo, hi = m.domain
    return max(a, lo), min(b, hi)


def check_lyapunov(W: HittingSolution, lam: float, rtol: float = 1e-6) -> float:
    """Replay the three-point stencil on the measure grid outside U.

    Returns the largest excess of (LW + lam W)/W, relative to the size of the
    stencil terms, and raises NotLyapunov when it is above ``rtol``.
    """
    if W.blow_up:
        raise NotLyapunov("not a λ-Lyapunov function: field blew up")
    worst = 0.0
    for c, v in W.components:
        k = c.measure_index.size
        lm = c.log_mass[:k]
        # pad one edge of zero conductance past a reflecting end
        le = np.append(c.log_edge, -np.inf)[: k + 1]
        vv = np.append(v, v[-1])[: k + 2]
        w = vv[1 : k + 1]
        left = np.exp(le[:k] - lm) * (vv[:k] - w)
        right = np.exp(le[1:] - lm) * (vv[2:] - w)
        scale = (np.abs(left) + np.abs(right)) / w + lam
        excess = (left + right + lam * w) / w / scale
        worst = max(worst, float(np.max(excess)))
    if worst > rtol:
        raise NotLyapunov(f"not a λ-Lyapunov function: LW + λW exceeds 0 by {worst:.3e} (relative)")
    return worst


def fk_residual(sol: HittingSolution, lower: HittingSolution | None = None) -> float:
    """Largest relative three-point residual of the field's own equation.

    Checks e_i (v_{i-1} - v_i) + e_{i+1} (v_{i+1} - v_i) + m_i g_i = 0 at every
    measure grid node outside U, with g = theta W for exponential moments and
    g = q v_{q-1} for polynomial ones (``lower`` carries v_{q-1}). The residual
    is relative to the sum of the absolute stencil terms plus the rounding
    noise of the differences.
    """
    p = sol.problem
    if sol.blow_up:
        raise HittingError("field blew up; no residual to replay")
    if p.kind == "poly_moment" and p.q >= 1:
        if lower is None or lower.problem.q != p.q - 1:
            raise HittingError(f"v_{p.q} needs v_{p.q - 1} for its residual")
        sources = [p.q * lv for _, lv in lower.components]
    elif p.kind == "poly_moment":
        return 0.0
    else:
        sources = [p.theta * v for _, v in sol.components]
    worst = 0.0
    for (c, v), g in zip(sol.components, sources):
        n = c.measure_index.size  # the extension nodes only serve the truncation
        le = np.append(c.log_edge, -np.inf)  # reflecting end
        vv = np.append(v, v[-1])
        # each equation divided by its left conductance, so tail masses far
        # below the double range never enter on their own
        with np.errstate(under="ignore", invalid="ignore"):
            ratio = np.exp(le[1 : n + 1] - le[:n])
            left = vv[:n] - vv[1 : n + 1]
            right = ratio * (vv[2 : n + 2] - vv[1 : n + 1])
            src = np.exp(c.log_mass[:n] - le[:n]) * g[1 : n + 1]
        # differences of v carry an absolute rounding error of about eps |v|
        noise = np.finfo(float).eps * np.abs(vv[1 : n + 1]) * (1.0 + ratio)
        scale = np.abs(left) + np.abs(right) + np.abs(src) + noise
        ok = scale > 0
        worst = max(worst, float(np.max(np.abs(left + right + src)[ok] / scale[ok], initial=0.0)))
    return worst


def lyapunov_poincare_bound(W: HittingSolution, lam: float, U, r: float) -> float:
    """4/lam + (4 |chi'|^2 / lam + 2) C_P(U_r)."""
    if not r > 0:
        raise HittingError("r must be positive")
    check_lyapunov(W, lam)
    m = W.problem.measure
    cp_r = restricted_poincare(assemble_form(m), _clip(m, U[0] - r, U[1] + r)).C_P
    return 4.0 / lam + (4.0 * chi_slope_sq(r) / lam + 2.0) * cp_r


class BoundValue(NamedTuple):
    value: float
    status: str  # "ok" or "not_applicable"
    reason: str = ""


def stokes_bound(W: HittingSolution, lam: float, U) -> BoundValue:
    """1/lam + C_P(U) when dW/dn <= 0 on the boundary of U (n pointing out of U).

    Integrating by parts over the complement leaves a boundary term
    int f^2 e^{-V} / W * dW/dn, which can be dropped only with that sign, i.e.
    W must not increase as one leaves U. The value is always returned; the
    status says whether the sign condition holds.
    """
    check_lyapunov(W, lam)
    m = W.problem.measure
    value = 1.0 / lam + restricted_poincare(assemble_form(m), tuple(U)).C_P
    jets = boundary_jets(W) if W.problem.kind == "exp_moment" else {}
    for side, (d1, _) in jets.items():
        outward = d1 * side
        if outward > 0:
            where = "right" if side > 0 else "left"
            return BoundValue(value, "not_applicable",
                              f"W increases away from U on the {where} side (dW/dn = {outward:.3g} > 0)")
    return BoundValue(value, "ok")


def boundary_jets(W: HittingSolution) -> dict[int, tuple[float, float]]:
    """(W'(x), W''(x)) in x at each side of U, from the flux balance and the ODE.

    Integrating (e^{-V} W')' = -theta e^{-V} W from the boundary outwards gives
    e^{-V(b)} W'(b) = theta * int_b^inf e^{-V} W, second order in the grid.
    """
    p = W.problem
    spec = p.measure.spec
    vmin = float(p.measure.V.min())
    out = {}
    for c, v in W.components:
        b = c.boundary
        flux = p.theta * float(np.sum(np.exp(c.log_mass) * v[1:]))
        ds = flux * math.exp(float(spec.V(np.array([b]))[0]) - vmin)
        dx = ds * c.side
        d2 = float(spec.dV(np.array([b]))[0]) * dx - p.theta
        out[c.side] = (dx, d2)
    return out


def _quintic(a: float, b: float, ya, yb, x: np.ndarray):
    """Hermite quintic matching (f, f', f'') at a and b; returns (f, f', f'') at x."""
    h = b - a
    t = (x - a) / h
    f0, d0, s0 = ya
    f1, d1, s1 = yb
    d0, d1 = d0 * h, d1 * h
    s0, s1 = s0 * h * h, s1 * h * h
    t2, t3, t4, t5 = t * t, t ** 3, t ** 4, t ** 5
    H = [
        (1 - 10 * t3 + 15 * t4 - 6 * t5, -30 * t2 + 60 * t3 - 30 * t4, -60 * t + 180 * t2 - 120 * t3),
        (t - 6 * t3 + 8 * t4 - 3 * t5, 1 - 18 * t2 + 32 * t3 - 15 * t4, -36 * t + 96 * t2 - 60 * t3),
        (0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5, t - 4.5 * t2 + 6 * t3 - 2.5 * t4,
         1 - 9 * t + 18 * t2 - 10 * t3),
        (10 * t3 - 15 * t4 + 6 * t5, 30 * t2 - 60 * t3 + 30 * t4, 60 * t - 180 * t2 + 120 * t3),
        (-4 * t3 + 7 * t4 - 3 * t5, -12 * t2 + 28 * t3 - 15 * t4, -24 * t + 84 * t2 - 60 * t3),
        (0.5 * t3 - t4 + 0.5 * t5, 1.5 * t2 - 4 * t3 + 2.5 * t4, 3 * t - 12 * t2 + 10 * t3),
    ]
    coef = (f0, d0, s0, f1, d1, s1)
    f = sum(k * Hk[0] for k, Hk in zip(coef, H))
    fp = sum(k * Hk[1] for k, Hk in zip(coef, H)) / h
    fpp = sum(k * Hk[2] for k, Hk in zip(coef, H)) / (h * h)
    return f, fp, fpp


def _layered_log(lo, hi, jl, jr, dl, dr, n_piece):
    """log W inside U: quintic layers of widths dl, dr falling from the boundary
    jets to flat levels, joined by a zero-jet quintic.

    Each piece is sampled on its own grid so thin layers stay resolved.
    Returns (x, g, g', g'').
    """
    cl = -jl[1] * dl / 2.0
    cr = jr[1] * dr / 2.0
    pieces = ((lo, lo + dl, jl, (cl, 0.0, 0.0)),
              (lo + dl, hi - dr, (cl, 0.0, 0.0), (cr, 0.0, 0.0)),
              (hi - dr, hi, (cr, 0.0, 0.0), jr))
    out = [[], [], [], []]
    for a, b, ja, jb in pieces:
        if b - a <= 0:
            continue
        x = np.linspace(a, b, n_piece)
        for acc, val in zip(out, (x, *_quintic(a, b, ja, jb, x))):
            acc.append(val)
    return tuple(np.concatenate(v) for v in out)


def bbcg_drift(W: HittingSolution, lam: float, U, n_piece: int = 801,
               n_widths: int = 16) -> tuple[float, float]:
    """(b, min W) for a smooth extension of W into U, W rescaled to be >= 1.

    g = log W is extended by boundary layers that match g, g', g'' at each end
    of U (so W is C^2 across the boundary and stays positive), flattened in the
    middle. The layer widths are picked from a geometric scan to make b small.
    """
    m = W.problem.measure
    jets = boundary_jets(W)
    lo, hi = U

    def log_jet(side):
        d1, d2 = jets.get(side, (0.0, 0.0))
        return (0.0, d1, d2 - d1 * d1)

    jl, jr = log_jet(-1), log_jet(1)
    widths = 0.5 * (hi - lo) * np.geomspace(1e-3, 1.0, n_widths)
    best = (math.inf, 1.0)
    for dl in widths:
        for dr in widths:
            x, g, gp, gpp = _layered_log(lo, hi, jl, jr, dl, dr, n_piece)
            gmin = min(0.0, float(g.min()))
            # (LW + lam W) / min W for W = e^g, kept in log scale
            with np.errstate(over="ignore", invalid="ignore"):
                drift = np.exp(g - gmin) * (gpp + gp * gp - m.spec.dV(x) * gp + lam)
            b = max(0.0, float(np.nanmax(drift)))
            if b < best[0]:
                best = (b, math.exp(gmin))
    return best


def bbcg_bound(W: HittingSolution, lam: float, U) -> float:
    """(1/lam)(1 + b C_P(U)) with b the drift of the smooth extension inside U."""
    check_lyapunov(W, lam)
    b, _ = bbcg_drift(W, lam, U)
    m = W.problem.measure
    cp_u = restricted_poincare(assemble_form(m), tuple(U)).C_P
    return (1.0 + b * cp_u) / lam


def oscillation(m: Measure1D, lo: float, hi: float, n_eval: int = 4001) -> float:
    x = np.linspace(lo, hi, n_eval)
    x = np.union1d(x, m.grid[(m.grid >= lo) & (m.grid <= hi)])
    v = m.spec.V(x)
    if m.spec.shift <= hi and m.spec.shift >= lo:
        v = np.append(v, m.spec.V(np.array([m.spec.shift])))
    return float(v.max() - v.min())


def local_mean_poincare_bound(m: Measure1D, a: float, r: float, C_P: float) -> float:
    """Poincare bound for mean-zero-on-B(a, 2r) functions, with n = 1 and kappa = 4/pi^2."""
    lo, hi = m.domain
    if a - 2 * r < lo - 1e-12 or a + 2 * r > hi + 1e-12:
        raise HittingError(f"B({a}, {2 * r}) exceeds the domain {m.domain}")
    osc = oscillation(m, a - 2 * r, a + 2 * r)
    mu_b = mass_of(m, (a - r, a + r))
    e = math.exp(osc)
    return 32.0 * C_P / mu_b * (1.0 + 2.0 * KAPPA * e) + 2.0 * KAPPA * r * r * e


def local_mean_checker(m: Measure1D, a: float, r: float) -> float:
    """Exact discrete sup of int f^2 / int f'^2 over f with zero mean on B(a, 2r)."""
    return constrained_ratio(assemble_form(m), (a - 2 * r, a + 2 * r))


# ---------------------------------------------------------------- ultracontractivity


def _nested_tail(spec, a: float, direction: int, reaches: np.ndarray,
                 n_points: int = 20000) -> np.ndarray:
    """int_a^{a+R} e^{-V(y)} int_a^y e^{V(z)} dz dy along ``direction`` for each R.

    The ratio r(y) = log(int_a^y e^V) - V(y) is carried by the recursion
    r_k = logaddexp(r_{k-1} - dV_k, log cell_k), where cell_k is the cell
    integral of e^{V - V_k} with V linear on the cell. Only increments of V
    enter, so a potential of size 1e40 loses no digits.
    """
    d = np.concatenate([[0.0], np.geomspace(1e-6, reaches.max(), n_points)])
    v = spec.V(a + direction * d)
    h = np.diff(d)
    dv = np.diff(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.abs(dv) < 1e-8
        factor = np.where(small, 1.0 - 0.5 * dv, -np.expm1(-dv) / np.where(small, 1.0, dv))
        log_cell = (np.log(h) + np.log(factor)).tolist()
    r = [-math.inf] * (len(log_cell) + 1)
    prev = -math.inf
    for k, (step, lc) in enumerate(zip(dv.tolist(), log_cell), start=1):
        x1 = prev - step
        hi_, lo_ = (x1, lc) if x1 > lc else (lc, x1)
        prev = hi_ + math.log1p(math.exp(lo_ - hi_)) if lo_ > -math.inf else hi_
        r[k] = prev
    g = np.exp(np.array(r))
    outer = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * h)])
    return np.interp(reaches, d, outer)


class UltraResult(NamedTuple):
    convergent: bool
    value: float  # integral when convergent, last growth factor otherwise


def ultracontractive_test(m: Measure1D, a: float, max_doublings: int = 40) -> UltraResult:
    """Nested-integral criterion on both tails, pushing the cut out by doubling.

    Convergent when one doubling changes a tail by less than 1e-6 relative;
    otherwise ``value`` is the growth factor across the last doubling.
    """
    lo, hi = m.domain
    if not lo < a < hi:
        raise HittingError(f"a={a} must lie inside the domain {m.domain}")
    total, worst = 0.0, 1.0
    converged = True
    for direction, reach in ((1, hi - a), (-1, a - lo)):
        if m.spec.compact:
            total += float(_nested_tail(m.spec, a, direction, np.array([reach]))[0])
            continue
        reaches = max(reach, 1.0) * 2.0 ** np.arange(max_doublings + 1)
        vals = _nested_tail(m.spec, a, direction, reaches)
        rel = np.abs(np.diff(vals)) / np.abs(vals[1:])
        hit = np.flatnonzero(rel < ULTRA_CONVERGED)
        if hit.size:
            total += float(vals[hit[0] + 1])
        else:
            converged = False
            worst = max(worst, float(vals[-1] / vals[-2]))
    if converged:
        return UltraResult(True, total)
    return UltraResult(False, worst)


# ---------------------------------------------------------------- weak Poincare


@dataclass(frozen=True, eq=False)
class WeakPoincare:
    ratio: np.ndarray  # v_{q-1}/v_q on {d >= 1}, 1 elsewhere
    C: float
    rho_max: float
    q: int
    weights: np.ndarray = field(repr=False, default=None)

    def threshold(self, s: float) -> float:
        """u(s) = inf{u : mu(ratio < u) > s}."""
        order = np.argsort(self.ratio, kind="stable")
        cum = np.cumsum(self.weights[order])
        k = int(np.searchsorted(cum, s, side="right"))
        k = min(k, order.size - 1)
        return float(self.ratio[order[k]])

    def beta(self, s: float) -> float:
        if not 0 < s < 1:
            raise HittingError("s must lie in (0, 1)")
        return self.C / self.threshold(s)


def weak_poincare(m: Measure1D, U, q: int, r: float = 1.0, fields=None) -> WeakPoincare:
    if q < 1:
        raise HittingError("q must be >= 1")
    fields = fields or poly_moment_fields(m, U, q)
    vq1, vq = fields[q - 1], fields[q]
    if vq.blow_up or vq1.blow_up:
        raise HittingError(f"insufficient moments for order {q}")
    x = m.grid
    dist = np.maximum.reduce([U[0] - x, x - U[1], np.zeros_like(x)])
    ratio = np.ones(m.n)
    far = (dist >= 1.0) & (vq.field > 0)
    ratio[far] = vq1.field[far] / vq.field[far]
    band = (dist >= 1.0) & (dist < 1.0 + r) & (vq.field > 0)
    rho_max = max(1.0, float(ratio[band].max()) if band.any() else 1.0)
    reach = _clip(m, U[0] - 1.0 - r, U[1] + 1.0 + r)
    cp_r = restricted_poincare(assemble_form(m), reach).C_P
    C = 4.0 / q + (4.0 * chi_slope_sq(r) / q + 2.0 * rho_max) * cp_r
    return WeakPoincare(ratio, C, rho_max, q, m.weights)


def weak_poincare_beta(m: Measure1D, U, q: int, s: float) -> float:
    return weak_poincare(m, U, q).beta(s)


def raw_order_violations(fields) -> list[int]:
    """Count of nodes where v_{q-1} > v_q (flagged, not an error), per q >= 1."""
    out = []
    for q in range(1, len(fields)):
        out.append(int(np.sum(fields[q - 1].field > fields[q].field * (1 + 1e-12))))
    return out


# ---------------------------------------------------------------- moment upper bound


def curvature_constant(m: Measure1D) -> float:
    """C_m = sup (V'' - V'^2 / 2) over the grid."""
    if m.spec.has_kink:
        raise HittingError("curvature constant needs a C^2 potential")
    x = m.grid
    return float(np.max(m.spec.d2V(x) - 0.5 * m.spec.dV(x) ** 2))


def exp_moment_upper(m: Measure1D, x: float, theta: float, C_m: float, C_P: float,
                     mu_U: float) -> float:
    """e^{theta s0} (1 + e^{V(x)/2} theta / (theta_U - theta)), s0 = e^{2 C_m} / (2 pi).

    V is the normalised potential (density e^{-V}).
    """
    if m.spec.compact:
        raise HittingError("moment bound needs a measure on the whole line")
    tu = theta_U(mu_U, C_P)
    if not theta < tu:
        raise HittingError(f"rate above guaranteed threshold: theta={theta} >= theta_U={tu}")
    s0 = math.exp(2.0 * C_m) / (2.0 * math.pi)
    vx = float(m.normalized_V(np.array([x]))[0])
    try:
        return math.exp(theta * s0) * (1.0 + math.exp(vx / 2.0) * theta / (tu - theta))
    except OverflowError:
        return math.inf

