"""Acceptance criteria, one test per criterion, each with its runtime budget."""

import math
import time

import numpy as np
import pytest

from poincare_hitting import hitting1d as h1
from poincare_hitting.bounds import LedgerOptions, random_grid_functions, run_ledger
from poincare_hitting.chain import (
    Divergent, chain_decay, chain_gap, chain_lyapunov, hitting_laplace, lyapunov_residual,
    path_sum_laplace, random_reversible_chain, rho_star,
)
from poincare_hitting.measure1d import build_measure, catalog, parse_potential
from poincare_hitting.montecarlo import (
    SimConfig, exp_moment_estimate, large_mass_tail_check, moment_estimate, simulate_hitting,
    tail_check,
)
from poincare_hitting.operator1d import (
    SEMIGROUP_MAX_N, assemble_form, dirichlet_eigen, full_spectrum, interval_dirichlet_nodes,
    log_convexity_defect, poincare_constant, semigroup_variance_from,
)


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f} s, budget {self.seconds} s"


def variance(m, f):
    w = m.weights
    return float(w @ f ** 2 - (w @ f) ** 2)


@pytest.mark.acceptance(1, "uniform interval constant C_P = 1/pi^2 within 1%")
def test_criterion_01_uniform_constant():
    with Budget(5):
        m = build_measure(parse_potential("uniform:r=0.5"), 4096)
        cp = poincare_constant(assemble_form(m)).C_P
    assert cp == pytest.approx(1 / math.pi ** 2, rel=0.01)


@pytest.mark.acceptance(2, "Var <= C_P <= 12 Var on log-concave measures")
def test_criterion_02_variance_band():
    texts = ["gaussian", "exp_power:p=1", "exp_power:p=1.5", "exp_power:p=4", "uniform:r=1",
             "double_well:a=0,h=1"]
    bad = []
    with Budget(60):
        for text in texts:
            m = build_measure(parse_potential(text))
            cp = poincare_constant(assemble_form(m)).C_P
            if not m.variance <= cp * (1 + 1e-9) <= 12 * m.variance * (1 + 1e-9):
                bad.append((text, m.variance, cp))
    assert not bad


@pytest.mark.acceptance(3, "chain equivalence sweep on 200 random reversible chains")
def test_criterion_03_chain_sweep():
    rng = np.random.default_rng(20240601)
    failures = {"laplace_finite": 0, "lyapunov_replay": 0, "tv_rate": 0, "path_sum": 0}
    with Budget(120):
        for _ in range(200):
            m = random_reversible_chain(int(rng.integers(2, 9)), rng, min_gap2=0.05)
            g = chain_gap(m)
            rho = 1.0 + g.gap2 / 4.0
            W = hitting_laplace(m, rho)
            if isinstance(W, Divergent):
                failures["laplace_finite"] += 1
            # the replay and the path sum need a finite transform
            rho_ok = min(rho, 0.5 * (1.0 + rho_star(m)))
            cert = chain_lyapunov(m, rho_ok)
            if lyapunov_residual(m, cert) > 1e-10:
                failures["lyapunov_replay"] += 1
            tv, _ = chain_decay(m, 4000)
            if tv.theta > g.lambda_op + 1e-9:
                failures["tv_rate"] += 1
            brute = path_sum_laplace(m, rho_ok)
            if np.max(np.abs(brute - cert.W) / cert.W) > 1e-8:
                failures["path_sum"] += 1
    assert not any(failures.values()), f"failing chains per statement: {failures}"


@pytest.mark.acceptance(4, "theta(U) <= theta* on the catalog, theta* matches the Dirichlet oracle")
def test_criterion_04_rate_ordering():
    bad = []
    with Budget(120):
        for name, spec in sorted(catalog().items()):
            m = build_measure(spec)
            cp = h1.poincare_with_divergence(m).C_P
            for U in ((-1.0, 1.0), (-0.5, 0.5)):
                lo, hi = m.domain
                if U[0] <= lo and U[1] >= hi:
                    continue
                th_u = h1.theta_U(h1.mass_of(m, U), cp)
                th = h1.critical_rate(m, U)
                if th_u > th * (1 + h1.RATE_RTOL):
                    bad.append((name, U, th_u, th))
        for text, U in (("gaussian", (-1.0, 1.0)), ("uniform:r=1", (-0.5, 0.5))):
            m = build_measure(parse_potential(text))
            oracle = dirichlet_eigen(assemble_form(m), interval_dirichlet_nodes(m, *U)).lambda1
            th = h1.critical_rate(m, U)
            if abs(th - oracle) > 0.02 * oracle:
                bad.append((text, U, th, oracle))
    assert not bad


@pytest.mark.acceptance(5, "BVP and Monte Carlo agree within 5% for E[e^{0.1 T}] and E[T]")
def test_criterion_05_bvp_vs_simulation():
    U = (-1.0, 1.0)
    with Budget(180):
        m = build_measure(parse_potential("gaussian"))
        W = h1.exp_moment_field(h1.HittingProblem(m, U, "exp_moment", theta=0.1))
        v = h1.poly_moment_fields(m, U, 1)
        s = simulate_hitting(SimConfig(m, 2.0, U, dt=1e-3, t_max=50, n_paths=100_000, seed=12345))
    e = exp_moment_estimate(s, 0.1)
    t = moment_estimate(s, 1)
    assert e.reliable and t.reliable
    assert e.value == pytest.approx(W.at(2.0), rel=0.05)
    assert t.value == pytest.approx(v[1].at(2.0), rel=0.05)


@pytest.mark.acceptance(6, "stationary-start tails stay below the Poincare tail bound")
def test_criterion_06_tail_bound():
    grid = (0.0, 1.0, 2.0, 4.0, 8.0)
    fails = []
    with Budget(180):
        for text, U in (("gaussian", (-0.5, 0.5)), ("exp_power:p=1", (-0.5, 0.5)),
                        ("exp_power:p=1", (-1.0, 1.0))):
            m = build_measure(parse_potential(text))
            cp = poincare_constant(assemble_form(m)).C_P
            mu = h1.mass_of(m, U)
            s = simulate_hitting(SimConfig(m, "stationary", U, t_max=10, n_paths=100_000, seed=7))
            check = tail_check if mu <= 0.5 else large_mass_tail_check
            fails += [(text, U, e.inputs["t"]) for e in check(s, cp, mu, grid) if e.status == "fail"]
    assert not fails


CRITERION_7_IDS = ("lyap_poincare", "bbcg", "stokes", "local_mean", "hardy_8cp",
                   "restricted_16cp", "cp_4cc2", "muckenhoupt_band")


@pytest.mark.acceptance(7, "assembled Poincare bounds pass on the catalog")
def test_criterion_07_bound_domination():
    bad = []
    with Budget(120):
        for name, spec in sorted(catalog().items()):
            m = build_measure(spec)
            U = (-0.5, 0.5) if spec.compact else (-1.0, 1.0)
            no_poincare = h1.poincare_with_divergence(m).diverging
            for e in run_ledger(m, LedgerOptions(U=U, simulate=False)):
                if e.id not in CRITERION_7_IDS or e.status == "pass":
                    continue
                # without a Poincare inequality there is nothing to dominate
                if no_poincare and e.status == "not_applicable":
                    continue
                bad.append(f"{name}:{e.id}={e.status} ({e.notes[:50]})")
    assert not bad, "; ".join(bad)


@pytest.mark.acceptance(8, "ultracontractivity classifier on x^4, x^2 and |x|")
def test_criterion_08_ultracontractivity():
    with Budget(10):
        got = {t: h1.ultracontractive_test(build_measure(parse_potential(t)), 1.0).convergent
               for t in ("exp_power:p=4", "gaussian", "exp_power:p=1")}
    assert got == {"exp_power:p=4": True, "gaussian": False, "exp_power:p=1": False}


@pytest.mark.acceptance(9, "semigroup variance is log-convex and decays at rate 2/C_P")
def test_criterion_09_semigroup():
    times = np.linspace(0.0, 5.0, 51)
    bad = []
    with Budget(60):
        for text in ("gaussian", "exp_power:p=1"):
            m = build_measure(parse_potential(text), SEMIGROUP_MAX_N)
            spec = full_spectrum(assemble_form(m))
            cp = 1.0 / spec.values[1]
            fs = random_grid_functions(m, 20, np.random.default_rng(9))
            for f in fs:
                var = semigroup_variance_from(spec, f, times)
                if log_convexity_defect(times, var) < -1e-9:
                    bad.append((text, "log-convexity"))
                if np.any(var > np.exp(-2 * times / cp) * var[0] * (1 + 1e-9)):
                    bad.append((text, "decay"))
    assert not bad


@pytest.mark.acceptance(10, "weak Poincare inequality with the assembled beta(s)")
def test_criterion_10_weak_poincare():
    U = (-1.0, 1.0)
    bad = []
    with Budget(120):
        for text in ("heavy_tail:alpha=4", "gaussian"):
            m = build_measure(parse_potential(text))
            form = assemble_form(m)
            wp = h1.weak_poincare(m, U, 1)
            fs = random_grid_functions(m, 100, np.random.default_rng(10))
            for s in (0.1, 0.01, 0.001):
                beta = wp.beta(s)
                for f in fs:
                    osc = float(f.max() - f.min())
                    if variance(m, f) > beta * form.energy(f) + s * osc ** 2:
                        bad.append((text, s))
    assert not bad


@pytest.mark.acceptance(11, "moment ladder: residuals, v_0 = 1, Jensen, heavy-tail threshold")
def test_criterion_11_moment_ladder():
    U = (-1.0, 1.0)
    with Budget(60):
        m = build_measure(parse_potential("gaussian"))
        v = h1.poly_moment_fields(m, U, 4)
        thresholds = []
        for n in (2048, 4096, 8192):
            hv = h1.poly_moment_fields(build_measure(parse_potential("heavy_tail:alpha=3"), n), U, 4)
            thresholds.append(next((q for q, s in enumerate(hv) if s.blow_up), None))
    assert not any(s.blow_up for s in v)
    assert np.all(v[0].field == 1.0)
    assert max(h1.fk_residual(v[q], v[q - 1]) for q in range(1, 5)) < 1e-6
    for q in range(2, 5):
        assert np.all(v[q - 1].field <= v[q].field ** ((q - 1) / q) * (1 + 1e-8) + 1e-12)
    assert thresholds[0] is not None
    assert len(set(thresholds)) == 1, f"blow-up order changes with the grid: {thresholds}"
