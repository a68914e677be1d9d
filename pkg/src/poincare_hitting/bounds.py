"""Ledger of checked inequalities for a measure on the line.

Each row holds both sides of one inequality, its status and the inputs used.
Failures are rows, never exceptions; an inequality whose hypotheses do not
hold on the given measure is reported as not_applicable with the reason.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from . import hitting1d as h1
from . import montecarlo as mc
from .entries import BoundEntry, compare, not_applicable
from .measure1d import (Measure1D, cdf, is_log_concave, lemma_radii_bounds, level_radii, quantile,
                        superlinear_certificate)
from .operator1d import (assemble_form, cheeger_constant, full_spectrum, hardy_constant,
                         log_convexity_defect, muckenhoupt_constant, poincare_constant,
                         restricted_poincare, semigroup_variance_from, snap)
from .operator1d import _coarse

ANALYTIC_TOL = 1e-9
DISCRETE_TOL = 1e-3  # discretized quantity against a bound built from other discretized ones
K_MAX = 20


@dataclass
class LedgerOptions:
    U: tuple[float, float] = (-1.0, 1.0)
    beta: float = 1.0
    r: float = 1.0  # collar width for the Lyapunov bound
    theta: float | None = None  # defaults to theta_fraction * critical rate
    theta_fraction: float = 0.5
    local_r: float = 0.5
    n_functions: int = 100
    seed: int = 0
    simulate: bool = True
    n_paths: int = 10_000
    dt: float = 1e-3
    t_max: float = 10.0
    tail_grid: tuple[float, ...] = (0.0, 1.0, 2.0, 4.0, 8.0)
    calibration_grid: tuple[float, ...] = (1.0, 2.0, 4.0)
    holdout_grid: tuple[float, ...] = (6.0, 8.0)
    mixing_grid: tuple[float, ...] = tuple(np.linspace(0.0, 200.0, 41))


# ---------------------------------------------------------------- mixing envelopes


@dataclass
class MixingEnvelope:
    kind: str  # "from_beta" or "from_phi"
    parameters: dict
    t: np.ndarray
    alpha: np.ndarray
    k: int
    notes: str = ""


def _implied_order(t: np.ndarray, alpha: np.ndarray) -> tuple[int, str]:
    """Largest k <= K_MAX with alpha (1+t)^k not growing over the last half of the grid."""
    tail = slice(t.size // 2, None)
    k = 0
    for kk in range(1, K_MAX + 1):
        g = alpha[tail] * (1.0 + t[tail]) ** kk
        if np.all(g <= g[0] * (1.0 + 1e-12)):
            k = kk
        else:
            break
    note = "read off a finite grid; the tail behaviour beyond the grid is extrapolated"
    if k == K_MAX:
        note += f"; capped at {K_MAX} (faster than any power on the grid)"
    return k, note


def _beta_callable(beta_table) -> tuple[Callable[[float], float], float, float]:
    if callable(beta_table):
        return beta_table, 1e-300, 1.0
    s, b = (np.asarray(v, dtype=float) for v in zip(*beta_table))
    order = np.argsort(s)
    s, b = s[order], b[order]
    if np.any(np.diff(b) > 1e-12 * b[:-1]):
        raise ValueError("beta(s) must be nonincreasing in s")
    ls, lb = np.log(s), np.log(b)
    return (lambda x: float(np.exp(np.interp(math.log(x), ls, lb)))), float(s[0]), float(s[-1])


def mixing_from_beta(beta_table, t_grid) -> MixingEnvelope:
    """alpha(t) <= (inf{s : beta(s) log(1/s) <= t/2})^2, capped at 1.

    ``beta_table`` is a list of (s, beta(s)) pairs (log-log interpolated) or a
    callable. When the smallest tabulated s is already feasible the infimum
    lies below the table and that s is used, which keeps the bound valid.
    """
    beta, s_lo, s_hi = _beta_callable(beta_table)
    t = np.asarray(t_grid, dtype=float)
    alpha = np.ones_like(t)
    vacuous = []

    def g(log_s, tt):
        s = math.exp(log_s)
        return beta(s) * math.log(1.0 / s) - tt / 2.0

    a, b = math.log(s_lo), math.log(min(s_hi, 1.0 - 1e-15))
    for i, tt in enumerate(t):
        if g(b, tt) > 0:
            vacuous.append(float(tt))
            continue
        if g(a, tt) <= 0:
            s = s_lo
        else:
            s = math.exp(brentq(g, a, b, args=(tt,), xtol=1e-13, rtol=1e-13))
        alpha[i] = min(1.0, s * s)
    alpha = np.minimum.accumulate(alpha)
    k, note = _implied_order(t, alpha)
    if vacuous:
        note += f"; no feasible s at t in {vacuous[:3]}{'...' if len(vacuous) > 3 else ''} (alpha = 1)"
    params = {"beta": "callable" if callable(beta_table) else [list(map(float, p)) for p in beta_table]}
    return MixingEnvelope("from_beta", params, t, alpha, k, note)


def parse_phi(text: str) -> Callable[[float], float]:
    """'linear' or 'power:p' (phi(t) = t^p, 0 < p <= 1)."""
    if text == "linear":
        return lambda s: s
    name, _, arg = text.partition(":")
    if name == "power":
        p = float(arg)
        if not 0 < p <= 1:
            raise ValueError("power exponent must lie in (0, 1]")
        return lambda s: s ** p
    raise ValueError(f"unknown phi {text!r}")


def _H(phi, log_u: float) -> float:
    """int_1^u ds / phi(s), integrated in log s."""
    return quad(lambda v: math.exp(v) / phi(math.exp(v)), 0.0, log_u, limit=200,
                epsabs=0.0, epsrel=1e-12)[0]


def _H_inverse(phi, t: float) -> float:
    if t <= 0:
        return 1.0
    # bracket in log u, then bisect; H is increasing since phi > 0
    lo, hi = 0.0, 1.0
    while _H(phi, hi) < t:
        lo, hi = hi, 2.0 * hi
        if hi > 700:
            return math.inf
    return math.exp(brentq(lambda v: _H(phi, v) - t, lo, hi, xtol=1e-14, rtol=1e-13))


def mixing_from_phi(phi, W_integral: float, t_grid) -> MixingEnvelope:
    """alpha(t) <= C (int W dmu) / phi(H^{-1}(t)) with H(t) = int_1^t ds / phi(s) and C = 1."""
    if isinstance(phi, str):
        name, phi = phi, parse_phi(phi)
    else:
        name = "callable"
    t = np.asarray(t_grid, dtype=float)
    u = np.array([_H_inverse(phi, float(tt)) for tt in t])
    probe = np.geomspace(1.0, max(2.0, float(np.nanmax(u[np.isfinite(u)]))), 257)
    vals = np.array([phi(p) for p in probe])
    if np.any(np.diff(vals) < 0):
        raise ValueError("phi is not increasing on the evaluated range")
    with np.errstate(divide="ignore"):
        env = np.where(np.isfinite(u), W_integral / np.array([phi(v) if np.isfinite(v) else np.inf for v in u]), 0.0)
    alpha = np.minimum.accumulate(np.clip(env, 0.0, 1.0))
    k, note = _implied_order(t, alpha)
    note = "constant C taken as 1; " + note
    return MixingEnvelope("from_phi", {"phi": name, "W_integral": W_integral}, t, alpha, k, note)


def poly_tail_bound(k: int, mu_U: float, t: float, C_k: float) -> float:
    """C_k t^{-k} mu(U)^{-2k}."""
    if not t > 0:
        raise ValueError("t must be positive")
    if k < 1:
        raise ValueError("k must be a positive integer")
    return C_k * t ** (-k) * mu_U ** (-2 * k)


def calibrate_order(s: mc.HittingSample, calibration_grid, k_max: int) -> int:
    """Largest k <= k_max with t^k P(T > t) nonincreasing on the calibration grid (at least 1)."""
    t = np.asarray(calibration_grid, dtype=float)
    p = np.array([mc.empirical_tail(s, x)[0] for x in t])
    k = 1
    for kk in range(2, k_max + 1):
        g = p * t ** kk
        if np.all(np.diff(g) <= 0):
            k = kk
        else:
            break
    return k


def poly_tail_check(s: mc.HittingSample, k: int, mu_U: float, calibration_grid,
                    holdout_grid) -> list[BoundEntry]:
    """Fit C_k on the calibration grid (CI upper ends), then test the holdout grid."""
    C_k = 0.0
    for t in calibration_grid:
        _, _, hi = mc.empirical_tail(s, t)
        C_k = max(C_k, hi * t ** k * mu_U ** (2 * k))
    out = []
    for t in holdout_grid:
        p, lo, hi = mc.empirical_tail(s, t)
        rhs = poly_tail_bound(k, mu_U, t, C_k)
        if t >= s.config.get("t_max", math.inf) and s.censored.any():
            status = "inconclusive"
        else:
            status = "pass" if p <= rhs else ("inconclusive" if lo <= rhs else "fail")
        out.append(BoundEntry("poly_tail_k", p, rhs, status,
                              {"k": k, "mu_U": mu_U, "t": float(t), "C_k": C_k, "ci": [lo, hi]},
                              "C_k calibrated on a separate t grid; the constant is not explicit"))
    return out


# ---------------------------------------------------------------- ledger pieces


def _band(id: str, lo: float, mid: float, hi: float, tol: float, inputs: dict, notes: str = ""):
    ok = lo <= mid * (1 + tol) and mid <= hi * (1 + tol)
    return BoundEntry(id, float(mid), float(hi), "pass" if ok else "fail",
                      dict(inputs, lower=float(lo)), notes, tol)


def _weighted_median(f: np.ndarray, w: np.ndarray) -> float:
    order = np.argsort(f, kind="stable")
    cum = np.cumsum(w[order])
    return float(f[order[int(np.searchsorted(cum, 0.5))]])


def random_grid_functions(m: Measure1D, n: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random functions: random Fourier sums on the domain plus a random slope."""
    lo, hi = m.domain
    u = (m.grid - lo) / (hi - lo)
    k = np.arange(1, 9)
    out = np.empty((n, m.n))
    for i in range(n):
        a = rng.normal(size=k.size) / k
        b = rng.normal(size=k.size) / k
        out[i] = (np.sin(np.pi * np.outer(u, k)) @ a + np.cos(np.pi * np.outer(u, k)) @ b
                  + rng.normal() * (u - 0.5))
    return out


def _mean_median_entries(m: Measure1D, opts: LedgerOptions) -> list[BoundEntry]:
    rng = np.random.default_rng(opts.seed)
    w = m.weights
    worst_var = worst_l1_up = worst_l1_lo = 0.0
    for f in random_grid_functions(m, opts.n_functions, rng):
        mean = float(w @ f)
        med = _weighted_median(f, w)
        var = float(w @ (f - mean) ** 2)
        dmed = float(w @ (f - med) ** 2)
        l1_mean = float(w @ np.abs(f - mean))
        l1_med = float(w @ np.abs(f - med))
        worst_var = max(worst_var, dmed / (2 * var), var / dmed)
        worst_l1_up = max(worst_l1_up, l1_med / l1_mean)
        worst_l1_lo = max(worst_l1_lo, 0.5 * l1_mean / l1_med)
    inputs = {"n_functions": opts.n_functions, "seed": opts.seed}
    return [
        compare("mean_median_var", worst_var, 1.0, ANALYTIC_TOL, inputs=inputs,
                notes="max over f of E(f-m)^2/(2 Var) and Var/E(f-m)^2"),
        compare("mean_median_l1", max(worst_l1_up, worst_l1_lo), 1.0, ANALYTIC_TOL, inputs=inputs,
                notes="max over f of |f-median|_1/|f-mean|_1 and |f-mean|_1/(2|f-median|_1)"),
    ]


def _operator_entries(m: Measure1D, cp: float, opts: LedgerOptions) -> list[BoundEntry]:
    form = assemble_form(m)
    out = []
    var = m.variance
    if is_log_concave(m):
        out.append(_band("bobkov_band", var, cp, 12 * var, DISCRETE_TOL,
                         {"Var": var, "C_P": cp}, "Var <= C_P <= 12 Var"))
    else:
        out.append(not_applicable("bobkov_band", "V is not convex on the grid"))
    B = muckenhoupt_constant(m)
    out.append(_band("muckenhoupt_band", B, cp, 4 * B, DISCRETE_TOL, {"B": B, "C_P": cp},
                     "B <= C_P <= 4B"))
    cc = cheeger_constant(m)
    out.append(compare("cp_4cc2", cp, 4 * cc * cc, DISCRETE_TOL, inputs={"C_P": cp, "C_C_prime": cc}))
    mad = float(m.weights @ np.abs(m.grid - m.median))
    out.append(compare("cheeger_band", mad, cc, DISCRETE_TOL, inputs={"E|x - median|": mad},
                       notes="the identity function gives E|x - median| <= C'_C"))
    for p in (0.25, 0.5, 0.75):
        b = float(m.grid[snap(m, quantile(m, p))])
        F = cdf(m, b)
        side = min(F, 1.0 - F)
        out.append(compare("hardy_8cp", hardy_constant(form, b), 8 * cp / side, DISCRETE_TOL,
                           inputs={"b": b, "min_side_mass": side, "C_P": cp}))
    grid_F = np.array([cdf(m, x) for x in m.grid])
    for plo, phi in ((0.1, 0.9), (0.3, 0.6), (0.6, 0.95)):
        a, b = quantile(m, plo), quantile(m, phi)
        inside = (m.grid > a) & (m.grid < b)
        best = float(np.max(np.minimum(grid_F, 1 - grid_F)[inside]))
        cp_ab = restricted_poincare(form, (a, b)).C_P
        rhs = 8 * cp / best
        out.append(compare("restricted_16cp", cp_ab, rhs, DISCRETE_TOL,
                           inputs={"interval": [a, b], "sup_min_side_mass": best, "C_P": cp},
                           notes="8 C_P / sup_u min(F(u), 1 - F(u)); <= 16 C_P when the median is inside"))
    cform, _ = _coarse(form, m.grid)
    spec = full_spectrum(cform)
    lam1 = float(spec.values[1])
    rng = np.random.default_rng(opts.seed + 1)
    times = np.geomspace(1e-3, 10.0, 10)
    worst_ratio, worst_defect = 0.0, math.inf
    for f in random_grid_functions(cform.measure, 20, rng):
        v0 = semigroup_variance_from(spec, f, [0.0])[0]
        v = semigroup_variance_from(spec, f, times)
        worst_ratio = max(worst_ratio, float(np.max(v / (np.exp(-2 * lam1 * times) * v0))))
        worst_defect = min(worst_defect, log_convexity_defect(times, v))
    out.append(compare("cs_equals_2_over_cp", worst_ratio, 1.0, ANALYTIC_TOL,
                       inputs={"lambda1": lam1, "n_functions": 20},
                       notes="max over f, t of Var(P_t f) / (exp(-2t/C_P) Var f)"))
    out.append(compare("logconvexity", max(0.0, -worst_defect), 1e-9, 0.0,
                       inputs={"times": times.tolist()},
                       notes="negative part of the smallest second difference of log Var(P_t f)"))
    return out


def _radii_entries(m: Measure1D, opts: LedgerOptions) -> list[BoundEntry]:
    cert = superlinear_certificate(m, opts.beta)
    if not cert.valid:
        return [not_applicable("lemma_radii_upper", f"no superlinearity certificate: {cert.reason}"),
                not_applicable("lemma_radii_lower", f"no superlinearity certificate: {cert.reason}")]
    R2 = max(cert.R_minus, cert.R_plus) ** 2
    lo, hi = lemma_radii_bounds(m.variance, opts.beta, cert.c_beta, cert.h_beta)
    inputs = {"beta": opts.beta, "c": cert.c_beta, "h": cert.h_beta, "Var": m.variance}
    if level_radii(m, opts.beta).capped:
        return [not_applicable(i, "level set reaches the grid edge") for i in
                ("lemma_radii_upper", "lemma_radii_lower")]
    return [compare("lemma_radii_upper", R2, hi, DISCRETE_TOL, inputs=inputs),
            compare("lemma_radii_lower", R2, lo, DISCRETE_TOL, sense=">=", inputs=inputs)]


def _hitting_entries(m: Measure1D, est: h1.CPEstimate, opts: LedgerOptions) -> list[BoundEntry]:
    U = tuple(map(float, opts.U))
    out = []
    mu_U = h1.mass_of(m, U)
    lo, hi = m.domain
    ids = ("lyap_poincare", "bbcg", "stokes", "exp_moment_upper", "mixing_phi")
    if U[0] <= lo and U[1] >= hi:
        out.append(not_applicable("theta_U", "U covers the support"))
        return out + [not_applicable(i, "U covers the support") for i in ids]
    star = h1.critical_rate(m, U)
    tu = h1.theta_U(mu_U, est.C_P)
    out.append(compare("theta_U", tu, star, 1e-3, inputs={"mu_U": mu_U, "C_P": est.C_P, "theta_star": star},
                       notes="guaranteed rate against the critical rate of the boundary value problem"))
    if not star > 0:
        return out + [not_applicable(i, "no exponential moment (critical rate is 0)") for i in ids]
    theta = opts.theta if opts.theta is not None else opts.theta_fraction * min(star, 1e6)
    if not theta < star:
        return out + [not_applicable(i, f"theta={theta} is not below the critical rate {star}") for i in ids]
    W = h1.exp_moment_field(h1.HittingProblem(m, U, "exp_moment", theta))
    cp = est.C_P
    base = {"theta": theta, "U": list(U), "C_P": cp}
    try:
        h1.check_lyapunov(W, theta)
    except h1.NotLyapunov as exc:
        return out + [not_applicable(i, str(exc)) for i in ids]
    lyap = h1.lyapunov_poincare_bound(W, theta, U, opts.r)
    out.append(compare("lyap_poincare", cp, lyap, DISCRETE_TOL, inputs=dict(base, r=opts.r)))
    out.append(compare("bbcg", cp, h1.bbcg_bound(W, theta, U), DISCRETE_TOL, inputs=base))
    st = h1.stokes_bound(W, theta, U)
    if st.status == "ok":
        out.append(compare("stokes", cp, st.value, DISCRETE_TOL, inputs=base))
    else:
        e = compare("stokes", cp, st.value, DISCRETE_TOL, inputs=base)
        out.append(BoundEntry("stokes", e.lhs, e.rhs, "not_applicable", base,
                              f"{st.reason}; numerically {e.status}", e.tol))
    out.append(_moment_upper_entry(m, U, mu_U, est, opts))
    env = mixing_from_phi("linear", W.integral_against_mu, opts.mixing_grid)
    out.append(compare("mixing_phi", float(np.max(np.diff(env.alpha), initial=0.0)), 0.0, 0.0,
                       inputs={"phi": "linear", "W_integral": W.integral_against_mu, "k": env.k,
                               "alpha": env.alpha.tolist()},
                       notes="envelope must be nonincreasing in [0, 1]; " + env.notes))
    return out


def _local_mean_entry(m: Measure1D, est: h1.CPEstimate, opts: LedgerOptions) -> BoundEntry:
    a, r = m.median, opts.local_r
    lo, hi = m.domain
    if not math.isfinite(est.C_P):
        return not_applicable("local_mean", "no Poincare inequality")
    if a - 2 * r < lo or a + 2 * r > hi:
        return not_applicable("local_mean", "B(a, 2r) leaves the support")
    return compare("local_mean", h1.local_mean_checker(m, a, r),
                   h1.local_mean_poincare_bound(m, a, r, est.C_P), DISCRETE_TOL,
                   inputs={"a": a, "r": r, "C_P": est.C_P})


def _moment_upper_entry(m, U, mu_U, est, opts) -> BoundEntry:
    if m.spec.compact:
        return not_applicable("exp_moment_upper", "compact support")
    if m.spec.has_kink:
        return not_applicable("exp_moment_upper", "potential is not C^2")
    tu = h1.theta_U(mu_U, est.C_P)
    if not tu > 0:
        return not_applicable("exp_moment_upper", "guaranteed rate is 0")
    x = U[1] + 1.0
    if x >= m.domain[1]:
        return not_applicable("exp_moment_upper", "no room right of U")
    theta = 0.5 * tu
    C_m = h1.curvature_constant(m)
    W = h1.exp_moment_field(h1.HittingProblem(m, U, "exp_moment", theta))
    rhs = h1.exp_moment_upper(m, x, theta, C_m, est.C_P, mu_U)
    return compare("exp_moment_upper", W.at(x), rhs, DISCRETE_TOL,
                   inputs={"x": x, "theta": theta, "C_m": C_m, "C_P": est.C_P, "mu_U": mu_U},
                   notes="" if math.isfinite(rhs) else "bound overflows (vacuous)")


def _mixing_beta_entry(m: Measure1D, opts: LedgerOptions) -> BoundEntry:
    U = tuple(map(float, opts.U))
    try:
        wp = h1.weak_poincare(m, U, 1)
    except h1.HittingError as exc:
        return not_applicable("mixing_beta", str(exc))
    s = np.geomspace(1e-4, 0.5, 30)
    table = [(float(v), wp.beta(float(v))) for v in s]
    # beta(s) = C / u(s) is nonincreasing in s because u(s) is a quantile
    env = mixing_from_beta(table, opts.mixing_grid)
    return compare("mixing_beta", float(np.max(np.diff(env.alpha), initial=0.0)), 0.0, 0.0,
                   inputs={"q": 1, "C": wp.C, "k": env.k, "alpha": env.alpha.tolist()},
                   notes="envelope must be nonincreasing in [0, 1]; " + env.notes)


def _simulation_entries(m: Measure1D, est: h1.CPEstimate, mixing: BoundEntry,
                        opts: LedgerOptions) -> list[BoundEntry]:
    U = tuple(map(float, opts.U))
    if not opts.simulate:
        return [not_applicable("queue_tail", "simulation disabled")]
    lo, hi = m.domain
    if U[0] <= lo and U[1] >= hi:
        return [not_applicable("queue_tail", "U covers the support")]
    mu_U = h1.mass_of(m, U)
    cfg = mc.SimConfig(m, "stationary", U, opts.dt, opts.t_max, opts.n_paths, opts.seed)
    sample = mc.simulate_hitting(cfg)
    out = []
    if not math.isfinite(est.C_P):
        out.append(not_applicable("queue_tail", "no Poincare inequality"))
    elif mu_U <= 0.5:
        out += mc.tail_check(sample, est.C_P, mu_U, opts.tail_grid)
    else:
        out += mc.large_mass_tail_check(sample, est.C_P, mu_U, opts.tail_grid)
    if not math.isfinite(est.C_P) and not m.spec.compact:
        env_k = mixing.inputs.get("k", 0)
        if env_k < 1:
            out.append(not_applicable("poly_tail_k", "mixing envelope gives no polynomial order"))
        else:
            k = calibrate_order(sample, opts.calibration_grid, env_k)
            out += poly_tail_check(sample, k, mu_U, opts.calibration_grid, opts.holdout_grid)
    return out


def run_ledger(m: Measure1D, options: LedgerOptions | None = None) -> list[BoundEntry]:
    """Every applicable inequality for ``m``, sorted by id (stable within an id)."""
    opts = options or LedgerOptions()
    est = h1.poincare_with_divergence(m)
    cp_grid = poincare_constant(assemble_form(m)).C_P
    out = _mean_median_entries(m, opts)
    # operator inequalities hold for the truncated measure itself, so they use its C_P
    out += _operator_entries(m, cp_grid, opts)
    out += _radii_entries(m, opts)
    out += _hitting_entries(m, est, opts)
    out.append(_local_mean_entry(m, est, opts))
    mixing = _mixing_beta_entry(m, opts)
    out.append(mixing)
    out += _simulation_entries(m, est, mixing, opts)
    return sorted(out, key=lambda e: e.id)


def summary_counts(entries: list[BoundEntry]) -> dict[str, int]:
    counts = {"pass": 0, "fail": 0, "inconclusive": 0, "not_applicable": 0}
    for e in entries:
        counts[e.status] += 1
    return counts

