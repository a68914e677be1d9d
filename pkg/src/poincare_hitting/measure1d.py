"""One-dimensional Gibbs measures mu(dx) = Z^-1 exp(-V(x)) dx on a truncated grid.

The grid is cell-centred and uniform: node i sits at the centre of the cell
[x_lo + i*dx, x_lo + (i+1)*dx], and its weight is the midpoint-rule mass
exp(-V(x_i)) dx, normalised so that the weights sum to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
from scipy.optimize import brentq

FAMILIES = ("gaussian", "exp_power", "double_well", "heavy_tail", "uniform", "custom_table")

TRUNCATION_LEVEL = 40.0
GL_POINTS = 4
# heavy tails: cut where the relative tail mass beyond |x| drops below this
HEAVY_TAIL_MASS = 1e-6
N_SLOPES = 512

_DEFAULTS: dict[str, dict[str, float]] = {
    "gaussian": {"sigma": 1.0},
    "exp_power": {"p": 2.0},
    "double_well": {"a": 1.0, "h": 1.0},
    "heavy_tail": {"alpha": 3.0},
    "uniform": {"r": 1.0},
    "custom_table": {},
}


class MeasureError(ValueError):
    """Raised when a potential or measure cannot be constructed."""


def _base_potential(family: str, p: Mapping[str, float]):
    """Return (V, V', V'', kink) for the untransformed family.

    ``kink`` is True when V'' is singular somewhere (|x|^p with p < 2).
    """
    if family == "gaussian":
        s2 = p["sigma"] ** 2
        return (lambda x: 0.5 * x * x / s2, lambda x: x / s2,
                lambda x: np.full_like(x, 1.0 / s2), False)
    if family == "exp_power":
        q = p["p"]
        if q <= 0:
            raise MeasureError("exp_power needs p > 0")

        def d1(x):
            ax = np.abs(x)
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.sign(x) * q * ax ** (q - 1.0)
            return np.where(ax == 0.0, 0.0, out)

        def d2(x):
            ax = np.abs(x)
            with np.errstate(divide="ignore", invalid="ignore"):
                out = q * (q - 1.0) * ax ** (q - 2.0)
            if q < 2:
                return np.where(ax == 0.0, np.inf, out)
            return out

        # weak derivative at the kink is 0
        return (lambda x: np.abs(x) ** q, d1, d2, q < 2)
    if family == "double_well":
        a, h = p["a"], p["h"]
        return (lambda x: h * (x * x - a * a) ** 2,
                lambda x: 4.0 * h * x * (x * x - a * a),
                lambda x: h * (12.0 * x * x - 4.0 * a * a), False)
    if family == "heavy_tail":
        k = 0.5 * (1.0 + p["alpha"])
        return (lambda x: k * np.log1p(x * x),
                lambda x: 2.0 * k * x / (1.0 + x * x),
                lambda x: 2.0 * k * (1.0 - x * x) / (1.0 + x * x) ** 2, False)
    if family == "uniform":
        return (lambda x: np.zeros_like(x), lambda x: np.zeros_like(x),
                lambda x: np.zeros_like(x), False)
    raise MeasureError(f"unknown family {family!r}")


@dataclass(frozen=True)
class PotentialSpec:
    """A potential family with parameters and an (optional) explicit domain.

    Every family accepts two extra parameters: ``shift`` (translate by +shift)
    and ``dilate`` (V(x) -> V(dilate * x)); both are applied as
    V(x) = V0(dilate * (x - shift)).
    """

    family: str
    params: Mapping[str, float] = field(default_factory=dict)
    domain: tuple[float, float] | None = None
    table: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise MeasureError(f"unknown family {self.family!r}")
        merged = dict(_DEFAULTS[self.family])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        if self.family == "custom_table" and self.table is None:
            raise MeasureError("custom_table needs a (xs, vs) table")
        if self.family == "heavy_tail" and merged["alpha"] <= 0:
            raise MeasureError("heavy_tail needs alpha > 0")

    @property
    def shift(self) -> float:
        return float(self.params.get("shift", 0.0))

    @property
    def dilate(self) -> float:
        return float(self.params.get("dilate", 1.0))

    @property
    def compact(self) -> bool:
        return self.family in ("uniform", "custom_table")

    @property
    def has_kink(self) -> bool:
        if self.family == "custom_table":
            return True
        return _base_potential(self.family, self.params)[3]

    def _funcs(self):
        if self.family == "custom_table":
            xs = np.asarray(self.table[0], dtype=float)
            vs = np.asarray(self.table[1], dtype=float)
            slopes = np.diff(vs) / np.diff(xs)

            def d1(x):
                idx = np.clip(np.searchsorted(xs, x) - 1, 0, len(slopes) - 1)
                return slopes[idx]

            return (lambda x: np.interp(x, xs, vs), d1,
                    lambda x: np.full_like(x, np.inf), True)
        return _base_potential(self.family, self.params)

    def V(self, x):
        x = np.asarray(x, dtype=float)
        f = self._funcs()[0]
        return f(self.dilate * (x - self.shift))

    def dV(self, x):
        x = np.asarray(x, dtype=float)
        f = self._funcs()[1]
        return self.dilate * f(self.dilate * (x - self.shift))

    def d2V(self, x):
        x = np.asarray(x, dtype=float)
        f = self._funcs()[2]
        return self.dilate ** 2 * f(self.dilate * (x - self.shift))

    def resolved_domain(self) -> tuple[float, float]:
        """Domain after the truncation rule (explicit domains win)."""
        if self.domain is not None:
            lo, hi = map(float, self.domain)
        elif self.family == "uniform":
            r = self.params["r"]
            lo, hi = self.shift - r / self.dilate, self.shift + r / self.dilate
        elif self.family == "custom_table":
            lo, hi = float(self.table[0][0]), float(self.table[0][-1])
        elif self.family == "heavy_tail":
            alpha = self.params["alpha"]
            half = (1.0 / (alpha * HEAVY_TAIL_MASS)) ** (1.0 / alpha)
            lo, hi = self.shift - half / self.dilate, self.shift + half / self.dilate
        else:
            lo, hi = self._level_cut(TRUNCATION_LEVEL)
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise MeasureError(f"invalid domain ({lo}, {hi})")
        return lo, hi

    def _level_cut(self, level: float) -> tuple[float, float]:
        base = _base_potential(self.family, self.params)[0]
        centre = 0.0
        vmin = float(base(np.array([0.0]))[0])
        if self.family == "double_well":
            vmin = 0.0
            centre = self.params["a"]

        def g(t):
            return float(base(np.array([t]))[0]) - vmin - level

        def cut(direction):
            start = centre * direction
            step = 1.0
            while g(start + direction * step) < 0:
                step *= 2.0
                if step > 1e12:
                    raise MeasureError("potential does not reach the truncation level")
            a, b = sorted((start, start + direction * step))
            return brentq(g, a, b, xtol=1e-13)

        lo, hi = cut(-1.0), cut(1.0)
        return self.shift + lo / self.dilate, self.shift + hi / self.dilate

    def describe(self) -> str:
        keys = ",".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.family}:{keys}"


def parse_potential(text: str) -> PotentialSpec:
    """Parse ``family:key=value,key=value`` (e.g. ``exp_power:p=1.5``)."""
    family, _, rest = text.strip().partition(":")
    family = family.strip()
    if family not in FAMILIES or family == "custom_table":
        raise MeasureError(f"unknown or unsupported family {family!r}")
    params: dict[str, float] = {}
    domain = None
    if rest.strip():
        for item in rest.split(","):
            key, eq, value = item.partition("=")
            if not eq:
                raise MeasureError(f"malformed parameter {item!r}")
            key = key.strip()
            try:
                num = float(value)
            except ValueError as exc:
                raise MeasureError(f"parameter {key!r} is not a number: {value!r}") from exc
            params[key] = num
    if "lo" in params or "hi" in params:
        domain = (params.pop("lo"), params.pop("hi"))
    return PotentialSpec(family, params, domain)


@dataclass(frozen=True, eq=False)
class Measure1D:
    spec: PotentialSpec
    grid: np.ndarray
    dx: float
    V: np.ndarray
    weights: np.ndarray
    Z: float
    mean: float
    variance: float
    median: float
    mean_abs_dev: float
    a_min: float
    a_index: int

    @property
    def n(self) -> int:
        return self.grid.size

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.grid[0] - 0.5 * self.dx), float(self.grid[-1] + 0.5 * self.dx)

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate(([self.grid[0] - 0.5 * self.dx], self.grid + 0.5 * self.dx))

    @property
    def density(self) -> np.ndarray:
        """Normalised Lebesgue density at the nodes."""
        return self.weights / self.dx

    @property
    def log_Z(self) -> float:
        return math.log(self.Z)

    def normalized_V(self, x):
        """V + log Z, so that exp(-V) itself is the probability density."""
        return self.spec.V(x) + self.log_Z

    def mass(self, lo: float, hi: float) -> float:
        return cdf(self, hi) - cdf(self, lo)

    def expect(self, f: np.ndarray) -> float:
        return float(np.dot(self.weights, f))

    def var(self, f: np.ndarray) -> float:
        m = self.expect(f)
        return float(np.dot(self.weights, (f - m) ** 2))

    def median_of(self, f: np.ndarray) -> float:
        """A weighted median of the grid function f."""
        order = np.argsort(f, kind="stable")
        cum = np.cumsum(self.weights[order])
        return float(f[order][np.searchsorted(cum, 0.5)])


def build_measure(spec: PotentialSpec, n_points: int = 4096) -> Measure1D:
    if n_points < 64:
        raise MeasureError("n_points must be at least 64")
    lo, hi = spec.resolved_domain()
    dx = (hi - lo) / n_points
    x = lo + (np.arange(n_points) + 0.5) * dx
    with np.errstate(over="ignore", invalid="ignore"):
        v = spec.V(x)
    bad = ~np.isfinite(v)
    if bad.any():
        raise MeasureError(f"non-finite V at x={x[bad][0]!r}")
    vmin = float(v.min())
    raw = np.exp(-(v - vmin)) * dx
    total = float(raw.sum())
    if not total > 0:
        raise MeasureError("zero total mass")
    w = raw / total
    Z, mean, variance, mad = _cell_moments(spec, lo, dx, n_points, vmin)
    a_index = _argmin_index(v)
    m = Measure1D(spec=spec, grid=x, dx=dx, V=v, weights=w, Z=Z, mean=mean,
                  variance=variance, median=0.0, mean_abs_dev=mad,
                  a_min=float(x[a_index]), a_index=a_index)
    object.__setattr__(m, "median", quantile(m, 0.5))
    return m


def _cell_moments(spec: PotentialSpec, lo: float, dx: float, n: int, vmin: float):
    """Z, mean, variance and mean absolute deviation by Gauss-Legendre on every cell.

    Kinks of the catalog potentials sit on cell edges, so the rule keeps its
    order there, where the node weights drop to second order.
    """
    t, wt = np.polynomial.legendre.leggauss(GL_POINTS)
    xs = lo + (np.arange(n)[:, None] + 0.5 * (t + 1.0)) * dx
    with np.errstate(over="ignore", under="ignore"):
        f = np.exp(-(spec.V(xs) - vmin)) * (0.5 * dx * wt)
    total = float(f.sum())
    mean = float((f * xs).sum()) / total
    variance = float((f * (xs - mean) ** 2).sum()) / total
    mad = float((f * np.abs(xs - mean)).sum()) / total
    return total * math.exp(-vmin), mean, variance, mad


def _argmin_index(v: np.ndarray) -> int:
    """Leftmost minimiser; a flat run of minimisers resolves to its middle node."""
    first = int(np.argmin(v))
    tie = v <= v[first] + 1e-14 * max(1.0, abs(v[first]))
    last = first
    while last + 1 < v.size and tie[last + 1]:
        last += 1
    return (first + last) // 2


def _edge_cdf(m: Measure1D) -> np.ndarray:
    return np.concatenate(([0.0], np.cumsum(m.weights)))


def cdf(m: Measure1D, x: float) -> float:
    """mu((-inf, x)); mass is spread uniformly inside each cell.

    Points outside the domain are clamped to 0 or 1.
    """
    return float(np.interp(x, m.edges, _edge_cdf(m), left=0.0, right=1.0))


def quantile(m: Measure1D, p: float) -> float:
    return float(quantiles(m, p))


def quantiles(m: Measure1D, p) -> np.ndarray:
    """Inverse of the piecewise linear CDF, vectorised over p."""
    return np.interp(p, _edge_cdf(m), m.edges)


def node_cdf(m: Measure1D) -> np.ndarray:
    """F at every node (cumulative mass up to the node, half cell included)."""
    return np.cumsum(m.weights) - 0.5 * m.weights


def node_sf(m: Measure1D) -> np.ndarray:
    """1 - F at every node, summed from the right so tiny tails keep their digits."""
    w = m.weights[::-1]
    return (np.cumsum(w) - 0.5 * w)[::-1]


class LevelRadii(NamedTuple):
    R_minus: float
    R_plus: float
    capped: bool


def level_radii(m: Measure1D, beta: float) -> LevelRadii:
    """Largest grid radii around a_min on which V - V(a) stays <= beta."""
    if beta <= 0:
        raise MeasureError("beta must be positive")
    dv = m.V - m.V[m.a_index]
    i = m.a_index
    over = dv > beta
    right = np.flatnonzero(over[i:])
    left = np.flatnonzero(over[: i + 1][::-1])
    capped = False
    if right.size:
        j_hi = i + right[0] - 1
    else:
        j_hi, capped = m.n - 1, True
    if left.size:
        j_lo = i - left[0] + 1
    else:
        j_lo, capped = 0, True
    return LevelRadii(float(m.a_min - m.grid[j_lo]), float(m.grid[j_hi] - m.a_min), capped)


@dataclass(frozen=True)
class SuperlinearCertificate:
    beta: float
    R_minus: float
    R_plus: float
    R: float
    c_beta: float
    h_beta: float
    valid: bool
    reason: str = ""

    @property
    def slope(self) -> float:
        return self.c_beta / self.R if self.R > 0 else math.inf


def _tail(m: Measure1D, radii: LevelRadii):
    t = m.grid - m.a_min
    dv = m.V - m.V[m.a_index]
    right = t >= radii.R_plus - 1e-12 * max(1.0, radii.R_plus)
    left = -t >= radii.R_minus - 1e-12 * max(1.0, radii.R_minus)
    sel = (right & (t > 0)) | (left & (t < 0))
    return np.abs(t[sel]), dv[sel]


def superlinear_certificate(m: Measure1D, beta: float) -> SuperlinearCertificate:
    """Canonical (c_beta, h_beta) for the beta-superlinearity inequality.

    Preference order: the largest slope with h = 0; else the largest slope
    with h <= 2 beta on a 512-point geometric scan; else the smallest h.
    """
    radii = level_radii(m, beta)
    R = max(radii.R_minus, radii.R_plus)
    if m.spec.compact or radii.capped:
        return SuperlinearCertificate(beta, radii.R_minus, radii.R_plus, R, math.inf, 0.0,
                                      False, "compact support")
    t, dv = _tail(m, radii)
    if t.size == 0 or R <= 0:
        return SuperlinearCertificate(beta, radii.R_minus, radii.R_plus, R, 0.0, 0.0,
                                      False, "empty tail")
    ratio = dv / t
    exact = float(ratio.min())
    if exact > 0:
        s, h = exact, 0.0
    else:
        s_max = float(ratio.max())
        if s_max <= 0:
            return SuperlinearCertificate(beta, radii.R_minus, radii.R_plus, R, 0.0, 0.0,
                                          False, "no positive slope")
        slopes = np.geomspace(s_max * 1e-6, s_max, N_SLOPES)
        hs = np.maximum(0.0, np.max(slopes[:, None] * t[None, :] - dv[None, :], axis=1))
        ok = hs <= 2 * beta
        k = int(np.flatnonzero(ok)[-1]) if ok.any() else int(np.argmin(hs))
        s, h = float(slopes[k]), float(hs[k])
    return SuperlinearCertificate(beta, radii.R_minus, radii.R_plus, R, s * R, h, True)


def certificate_violation(m: Measure1D, cert: SuperlinearCertificate) -> float:
    """Largest violation of V(a +- t) - V(a) >= (c/R) t - h on the tail grid."""
    radii = LevelRadii(cert.R_minus, cert.R_plus, False)
    t, dv = _tail(m, radii)
    if not cert.valid or t.size == 0:
        return 0.0
    return float(np.max(cert.slope * t - cert.h_beta - dv))


def lemma_radii_bounds(variance: float, beta: float, c: float, h: float) -> tuple[float, float]:
    """(lower, upper) bounds on R(beta)^2 from the superlinearity lemma."""
    upper = 12.0 * variance * math.exp(beta) * (1.0 + 2.0 * math.exp(h) / c)
    inner = 1.0 / 3.0 + (math.exp(h) / c) * (1.0 + 2.0 / c + 2.0 / c ** 2)
    lower = 0.5 * variance * math.exp(-beta) / inner
    return lower, upper


def _from_raw(m: Measure1D, dens: np.ndarray, spec: PotentialSpec | None = None) -> Measure1D:
    w = dens / dens.sum()
    x = m.grid
    mean = float(np.dot(w, x))
    out = Measure1D(spec=spec or m.spec, grid=x, dx=m.dx, V=-np.log(w / m.dx), weights=w,
                    Z=1.0, mean=mean, variance=float(np.dot(w, (x - mean) ** 2)), median=0.0,
                    mean_abs_dev=float(np.dot(w, np.abs(x - mean))), a_min=m.a_min,
                    a_index=m.a_index)
    object.__setattr__(out, "median", quantile(out, 0.5))
    return out


def modified_measure(m: Measure1D, beta: float) -> Measure1D:
    """Flatten the density to exp(-beta) on N_beta = [a - R_-, a + R_+]."""
    cert = superlinear_certificate(m, beta)
    if not cert.valid:
        raise MeasureError("superlinearity required")
    dv = m.V - m.V[m.a_index]
    inside = (m.grid >= m.a_min - cert.R_minus - 1e-12) & (m.grid <= m.a_min + cert.R_plus + 1e-12)
    dens = np.where(inside, math.exp(-beta), np.exp(-dv))
    return _from_raw(m, dens)


def density_ratio_bounds(cert: SuperlinearCertificate) -> tuple[float, float]:
    b = cert.beta
    return math.exp(-b), math.exp(2 * b) * (1.0 + 2.0 * math.exp(cert.h_beta) / cert.c_beta)


def is_log_concave(m: Measure1D, tol: float = 1e-9) -> bool:
    """Discrete convexity of V on the grid."""
    d2 = m.V[2:] - 2 * m.V[1:-1] + m.V[:-2]
    return bool(np.all(d2 >= -tol * np.maximum(1.0, np.abs(m.V[1:-1]))))


def total_variation(m1: Measure1D, m2: Measure1D) -> float:
    return 0.5 * float(np.abs(m1.weights - m2.weights).sum())


def catalog() -> dict[str, PotentialSpec]:
    """Reference potentials used by the ledger soundness suite."""
    return {
        "gaussian": PotentialSpec("gaussian", {"sigma": 1.0}),
        "exp_power_1": PotentialSpec("exp_power", {"p": 1.0}),
        "exp_power_1.5": PotentialSpec("exp_power", {"p": 1.5}),
        "exp_power_4": PotentialSpec("exp_power", {"p": 4.0}),
        "double_well": PotentialSpec("double_well", {"a": 1.0, "h": 1.0}),
        "uniform": PotentialSpec("uniform", {"r": 1.0}),
        "heavy_tail_3": PotentialSpec("heavy_tail", {"alpha": 3.0}),
        "heavy_tail_4": PotentialSpec("heavy_tail", {"alpha": 4.0}),
    }


def rebuild(m: Measure1D, n_points: int | None = None, stretch: float = 1.0) -> Measure1D:
    """Same potential on a new grid; ``stretch`` widens a non-compact domain."""
    spec = m.spec
    lo, hi = m.domain
    if stretch != 1.0 and not spec.compact:
        c = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * stretch
        spec = PotentialSpec(spec.family, dict(spec.params), (c - half, c + half), spec.table)
    else:
        spec = PotentialSpec(spec.family, dict(spec.params), (lo, hi), spec.table)
    return build_measure(spec, n_points or m.n)

