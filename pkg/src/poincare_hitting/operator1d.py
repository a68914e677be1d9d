"""Dirichlet form of L = d^2/dx^2 - V' d/dx on a Measure1D grid.

The energy int (f')^2 dmu is discretised as f.A.f with a symmetric tridiagonal
stiffness matrix whose edge weights are the midpoint mu-masses; the mass
matrix is diag(weights). Every spectral quantity is a generalised eigenvalue
of (A, M), reduced to the symmetric tridiagonal M^-1/2 A M^-1/2 and solved by
the MRRR tridiagonal solver (LAPACK stemr through scipy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal, solve_banded
from scipy.optimize import brentq

from .measure1d import Measure1D, node_cdf, node_sf, rebuild

EIG_RESIDUAL = 1e-8
SEMIGROUP_MAX_N = 2048


class SpectralError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DirichletForm:
    measure: Measure1D
    edge: np.ndarray  # mu-mass attached to each edge i+1/2, length n-1
    mass: np.ndarray
    dirichlet: tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return self.mass.size

    @property
    def boundary(self) -> str:
        return "neumann"

    def bands(self) -> tuple[np.ndarray, np.ndarray]:
        """(diagonal, off-diagonal) of the stiffness matrix A."""
        k = self.edge / self.measure.dx ** 2
        diag = np.zeros(self.n)
        diag[:-1] += k
        diag[1:] += k
        return diag, -k

    def matrix(self) -> np.ndarray:
        d, e = self.bands()
        return np.diag(d) + np.diag(e, 1) + np.diag(e, -1)

    def apply(self, f: np.ndarray) -> np.ndarray:
        d, e = self.bands()
        out = d * f
        out[:-1] += e * f[1:]
        out[1:] += e * f[:-1]
        return out

    def energy(self, f: np.ndarray) -> float:
        """f.A.f = sum of edge masses times squared difference quotients."""
        g = np.diff(f) / self.measure.dx
        return float(np.dot(self.edge, g * g))


@dataclass(frozen=True, eq=False)
class SpectralResult:
    lambda1: float
    C_P: float
    eigvec: np.ndarray
    residual: float
    nodes: np.ndarray  # grid indices the eigenvector lives on


def assemble_form(m: Measure1D) -> DirichletForm:
    mid = 0.5 * (m.grid[1:] + m.grid[:-1])
    vmin = float(m.V.min())
    total = float(np.exp(-(m.V - vmin)).sum()) * m.dx
    edge = np.exp(-(m.spec.V(mid) - vmin)) * m.dx / total
    return DirichletForm(measure=m, edge=edge, mass=m.weights.copy())


def _sub_bands(form: DirichletForm, keep: np.ndarray, neumann_cut: bool):
    """Symmetrised bands on the node subset ``keep`` (sorted indices).

    With ``neumann_cut`` the edges leaving the subset are dropped (zero flux);
    otherwise they still load the diagonal (the removed neighbours act as
    zero Dirichlet values).
    """
    d_full, _ = form.bands()
    k = form.edge / form.measure.dx ** 2
    inside_edge = (keep[1:] - keep[:-1]) == 1
    if neumann_cut:
        d = np.zeros(keep.size)
        ke = k[keep[:-1]] * inside_edge
        d[:-1] += ke
        d[1:] += ke
    else:
        d = d_full[keep].copy()
    e = np.where(inside_edge, -k[keep[:-1]], 0.0)
    w = form.mass[keep]
    s = np.sqrt(w)
    return d / w, e / (s[:-1] * s[1:]), s


def _residual(d, e, s, lam, y) -> tuple[float, np.ndarray]:
    # A f - lam M f = M^1/2 (B - lam) y; extended precision keeps the check
    # itself below the O(eps ||B||) floor of a float64 product
    L = np.longdouble
    yl, dl, el = y.astype(L), d.astype(L), e.astype(L)
    By = dl * yl
    By[:-1] += el * yl[1:]
    By[1:] += el * yl[:-1]
    r = (s.astype(L) * (By - L(lam) * yl)).astype(float)
    return float(np.linalg.norm(r) / np.linalg.norm(s * y)), y / s


def _smallest(form: DirichletForm, keep: np.ndarray, index: int, neumann_cut: bool) -> SpectralResult:
    d, e, s = _sub_bands(form, keep, neumann_cut)
    try:
        vals, vecs = eigh_tridiagonal(d, e, select="i", select_range=(index, index),
                                      lapack_driver="stemr")
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"tridiagonal eigensolver failed: {exc}") from exc
    lam = float(vals[0])
    res, f = _residual(d, e, s, lam, vecs[:, 0])
    if res > EIG_RESIDUAL:
        raise SpectralError(f"eigen residual {res:.3e} exceeds {EIG_RESIDUAL:g}")
    return SpectralResult(lambda1=lam, C_P=1.0 / lam if lam > 0 else math.inf,
                          eigvec=f, residual=res, nodes=keep)


def poincare_constant(form: DirichletForm) -> SpectralResult:
    """Smallest nonzero eigenvalue of A f = lambda M f; C_P = 1/lambda."""
    if form.dirichlet:
        raise SpectralError("poincare_constant needs a form without Dirichlet nodes")
    return _smallest(form, np.arange(form.n), 1, neumann_cut=True)


def _interval_nodes(m: Measure1D, a: float, b: float) -> np.ndarray:
    tol = 1e-9 * m.dx
    return np.flatnonzero((m.grid >= a - tol) & (m.grid <= b + tol))


def restricted_poincare(form: DirichletForm, interval: tuple[float, float]) -> SpectralResult:
    """Poincare constant of mu restricted (and renormalised) to [a, b]."""
    keep = _interval_nodes(form.measure, *interval)
    if keep.size < 8:
        raise SpectralError(f"interval {interval} holds only {keep.size} grid points (need 8)")
    if keep.size == form.n:
        return poincare_constant(form)
    return _smallest(form, keep, 1, neumann_cut=True)


def dirichlet_eigen(form: DirichletForm, dirichlet_nodes: np.ndarray) -> SpectralResult:
    """Smallest eigenvalue with f = 0 on the given nodes (zero flux elsewhere)."""
    mask = np.ones(form.n, dtype=bool)
    mask[np.asarray(dirichlet_nodes, dtype=int)] = False
    keep = np.flatnonzero(mask)
    if keep.size == 0:
        raise SpectralError("no free nodes left")
    return _smallest(form, keep, 0, neumann_cut=False)


def snap(m: Measure1D, x: float) -> int:
    return int(np.argmin(np.abs(m.grid - x)))


def hardy_constant(form: DirichletForm, b: float) -> float:
    """sup over f(b) = 0 of int f^2 dmu / int f'^2 dmu (b snapped to the grid)."""
    return dirichlet_eigen(form, np.array([snap(form.measure, b)])).C_P


def interval_dirichlet_nodes(m: Measure1D, lo: float, hi: float) -> np.ndarray:
    """Grid nodes in the closed interval [lo, hi] (at least the nearest node)."""
    idx = _interval_nodes(m, lo, hi)
    if idx.size == 0:
        idx = np.array([snap(m, 0.5 * (lo + hi))])
    return idx


def _one_side(x: np.ndarray, rho: np.ndarray, tail: np.ndarray, med: float) -> float:
    """sup tail(x) * int_med^x dy / rho(y) over nodes ordered away from the median."""
    if x.size == 0:
        return 0.0
    inv = 1.0 / rho
    acc = np.empty(x.size)
    acc[0] = abs(x[0] - med) * inv[0]
    acc[1:] = acc[0] + np.cumsum(0.5 * (inv[1:] + inv[:-1]) * np.abs(np.diff(x)))
    return float(np.max(tail * acc))


def muckenhoupt_constant(m: Measure1D) -> float:
    """Two-sided Hardy-Muckenhoupt constant B around the median."""
    x, rho, med = m.grid, m.density, m.median
    right = x > med
    left = ~right
    b_right = _one_side(x[right], rho[right], node_sf(m)[right], med)
    b_left = _one_side(x[left][::-1], rho[left][::-1], node_cdf(m)[left][::-1], med)
    return max(b_right, b_left)


def cheeger_constant(m: Measure1D) -> float:
    """C'_C = sup_x min(F, 1 - F) / density, the exact 1D L1 constant."""
    return float(np.max(np.minimum(node_cdf(m), node_sf(m)) / m.density))


@dataclass(frozen=True, eq=False)
class Spectrum:
    form: DirichletForm
    values: np.ndarray
    vectors: np.ndarray  # M-orthonormal columns


def full_spectrum(form: DirichletForm) -> Spectrum:
    if form.n > SEMIGROUP_MAX_N:
        raise SpectralError(f"full decomposition is capped at N={SEMIGROUP_MAX_N}")
    keep = np.arange(form.n)
    d, e, s = _sub_bands(form, keep, neumann_cut=True)
    try:
        vals, vecs = eigh_tridiagonal(d, e)
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"decomposition failed: {exc}") from exc
    return Spectrum(form, vals, vecs / s[:, None])


def _coarse(form: DirichletForm, f: np.ndarray) -> tuple[DirichletForm, np.ndarray]:
    if form.n <= SEMIGROUP_MAX_N:
        return form, np.asarray(f, dtype=float)
    m = rebuild(form.measure, SEMIGROUP_MAX_N)
    return assemble_form(m), np.interp(m.grid, form.measure.grid, f)


def semigroup_variance(form: DirichletForm, f: np.ndarray, times) -> np.ndarray:
    """Var_mu(P_t f) for each t, from the full eigendecomposition.

    Grids above SEMIGROUP_MAX_N nodes are rebuilt at that size and f is
    linearly interpolated onto the coarse grid.
    """
    form, f = _coarse(form, f)
    spec = full_spectrum(form)
    return semigroup_variance_from(spec, f, times)


def semigroup_variance_from(spec: Spectrum, f: np.ndarray, times) -> np.ndarray:
    c = spec.vectors.T @ (spec.form.mass * f)
    lam = np.clip(spec.values[1:], 0.0, None)
    c2 = c[1:] ** 2
    t = np.atleast_1d(np.asarray(times, dtype=float))
    return np.exp(-2.0 * np.outer(t, lam)) @ c2


def semigroup_covariance(form: DirichletForm, f: np.ndarray, times) -> np.ndarray:
    """Cov_mu(f, P_t f) = sum_k exp(-lambda_k t) c_k^2 (stationary autocovariance)."""
    form, f = _coarse(form, f)
    spec = full_spectrum(form)
    c = spec.vectors.T @ (spec.form.mass * f)
    lam = np.clip(spec.values[1:], 0.0, None)
    t = np.atleast_1d(np.asarray(times, dtype=float))
    return np.exp(-np.outer(t, lam)) @ (c[1:] ** 2)


def log_convexity_defect(times, variances) -> float:
    """Smallest second divided difference of log Var on a (non-uniform) time grid."""
    t = np.asarray(times, dtype=float)
    y = np.log(np.asarray(variances, dtype=float))
    slopes = np.diff(y) / np.diff(t)
    dd = np.diff(slopes) / (0.5 * (t[2:] - t[:-2]))
    return float(dd.min())


def constrained_ratio(form: DirichletForm, region: tuple[float, float]) -> float:
    """sup of int f^2 dmu / int f'^2 dmu over f with zero mu-mean on ``region``.

    The rank-one constraint c.f = 0 (c = M 1_region) turns the generalised
    eigenproblem into the secular equation c.(A - lam M)^-1 c = 0 on
    (0, lambda_1); the sup is 1 over its root.
    """
    m = form.measure
    ind = np.zeros(form.n)
    ind[_interval_nodes(m, *region)] = 1.0
    c = form.mass * ind
    lam1 = poincare_constant(form).lambda1
    d, e = form.bands()

    def g(lam):
        ab = np.zeros((3, form.n))
        ab[0, 1:] = e
        ab[1] = d - lam * form.mass
        ab[2, :-1] = e
        return float(c @ solve_banded((1, 1), ab, c))

    lo, hi = lam1 * 1e-10, lam1 * (1.0 - 1e-10)
    if g(hi) <= 0:
        return 1.0 / lam1
    root = brentq(g, lo, hi, xtol=1e-14 * lam1, rtol=1e-13)
    return 1.0 / root
