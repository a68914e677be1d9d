import math

import numpy as np
import pytest

from poincare_hitting import bounds
from poincare_hitting.bounds import (
    LedgerOptions, calibrate_order, mixing_from_beta, mixing_from_phi, parse_phi,
    poly_tail_bound, poly_tail_check, random_grid_functions, run_ledger, summary_counts,
)
from poincare_hitting.entries import BoundEntry, compare, not_applicable
from poincare_hitting.hitting1d import mass_of
from poincare_hitting.measure1d import build_measure, catalog, parse_potential
from poincare_hitting.montecarlo import HittingSample, SimConfig, simulate_hitting

NO_SIM = LedgerOptions(simulate=False)


def by_id(entries, id):
    return [e for e in entries if e.id == id]


@pytest.fixture(scope="module")
def gauss_ledger():
    return run_ledger(build_measure(parse_potential("gaussian")),
                      LedgerOptions(n_paths=4000))


def test_compare_and_entries():
    assert compare("x", 1.0, 1.0).status == "pass"
    assert compare("x", 1.0 + 1e-10, 1.0).status == "pass"
    assert compare("x", 1.1, 1.0).status == "fail"
    assert compare("x", 2.0, 1.0, sense=">=").status == "pass"
    assert compare("x", 0.5, 1.0, sense=">=").status == "fail"
    assert compare("x", 1.0, 3.0).slack == 2.0
    na = not_applicable("y", "why")
    assert na.status == "not_applicable" and na.notes == "why"
    with pytest.raises(ValueError):
        BoundEntry("z", 0, 0, "maybe")
    d = compare("x", 1.0, 2.0, inputs={"a": 1}).as_dict()
    assert set(d) == {"id", "lhs", "rhs", "sense", "status", "slack", "tol", "inputs", "notes"}


def test_mixing_from_constant_beta():
    C = 2.0
    t = np.linspace(0, 40, 21)
    env = mixing_from_beta(lambda s: C, t)
    assert env.alpha[0] == 1.0
    assert np.allclose(env.alpha[1:], np.exp(-t[1:] / C), rtol=1e-9)
    # (1 + t)^k e^{-t/2} stops growing on [20, 40] only for k <= 21/2
    assert env.k == 10


def test_mixing_from_inverse_beta():
    t = np.linspace(0, 100, 51)
    env = mixing_from_beta(lambda s: 1.0 / s, t)
    assert env.alpha[0] == 1.0
    assert np.all(np.diff(env.alpha) <= 0)
    for tt, a in zip(t[5:], env.alpha[5:]):
        s = math.sqrt(a)
        assert math.log(1 / s) / s == pytest.approx(tt / 2, rel=1e-8)


def test_mixing_from_beta_table():
    table = [(s, 3.0 / s ** 0.5) for s in np.geomspace(1e-8, 0.5, 30)]
    env = mixing_from_beta(table, [0.0, 10.0, 100.0, 1000.0])
    assert env.alpha[0] == 1.0
    assert np.all(np.diff(env.alpha) <= 0)
    with pytest.raises(ValueError, match="nonincreasing"):
        mixing_from_beta([(0.1, 1.0), (0.2, 2.0)], [1.0])


def test_mixing_from_phi_linear():
    t = np.linspace(0, 20, 11)
    env = mixing_from_phi("linear", 1.0, t)
    assert np.allclose(env.alpha, np.exp(-t), rtol=1e-9)


def test_mixing_from_phi_sqrt():
    t = np.linspace(0, 50, 26)
    env = mixing_from_phi("power:0.5", 1.0, t)
    assert np.allclose(env.alpha, 1.0 / (1.0 + t / 2), rtol=1e-6)


def test_mixing_from_phi_power_slope():
    t = np.geomspace(1e3, 1e5, 20)
    env = mixing_from_phi("power:0.8", 1.0, t)
    slope = np.polyfit(np.log(t[-8:]), np.log(env.alpha[-8:]), 1)[0]
    assert slope == pytest.approx(-4.0, rel=0.05)


def test_parse_phi_errors():
    with pytest.raises(ValueError):
        parse_phi("power:1.5")
    with pytest.raises(ValueError):
        parse_phi("cubic")


def test_poly_tail_bound_examples():
    assert poly_tail_bound(1, 1.0, 10.0, 1.0) == pytest.approx(0.1)
    assert poly_tail_bound(2, 0.4, 6.0, 3.0) / poly_tail_bound(2, 0.4, 12.0, 3.0) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        poly_tail_bound(0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        poly_tail_bound(1, 1.0, 0.0, 1.0)


def test_calibrate_order_synthetic():
    # P(T > t) = (1 + t)^{-3}; the calibrated k must match the exact tail on the grid
    rng = np.random.default_rng(0)
    u = rng.random(200000)
    times = u ** (-1 / 3) - 1
    s = HittingSample(np.minimum(times, 1e6), np.zeros(u.size, bool), np.zeros(u.size, bool),
                      {"t_max": 1e6, "x0": "stationary"})
    k = calibrate_order(s, (1.0, 2.0, 4.0), 10)
    t = np.array([1.0, 2.0, 4.0])
    exact = (1 + t) ** -3
    assert np.all(np.diff(exact * t ** k) <= 0)
    assert np.any(np.diff(exact * t ** (k + 1)) > 0)


def test_poly_tail_heavy_holdout():
    m = build_measure(parse_potential("heavy_tail:alpha=4"))
    U = (-1.0, 1.0)
    s = simulate_hitting(SimConfig(m, "stationary", U, t_max=10, n_paths=20000, seed=0))
    mu = mass_of(m, U)
    k = calibrate_order(s, (1.0, 2.0, 4.0), bounds.K_MAX)
    entries = poly_tail_check(s, k, mu, (1.0, 2.0, 4.0), (6.0, 8.0))
    assert [e.status for e in entries] == ["pass", "pass"]


def test_random_grid_functions_seeded():
    m = build_measure(parse_potential("gaussian"))
    a = random_grid_functions(m, 5, np.random.default_rng(1))
    b = random_grid_functions(m, 5, np.random.default_rng(1))
    assert a.shape == (5, m.n) and np.array_equal(a, b)


def test_gaussian_ledger(gauss_ledger):
    counts = summary_counts(gauss_ledger)
    assert counts["fail"] == 0
    bob = by_id(gauss_ledger, "bobkov_band")[0]
    assert bob.status == "pass"
    assert bob.lhs == pytest.approx(1.0, rel=1e-3) and bob.rhs == pytest.approx(12.0, rel=1e-3)
    assert by_id(gauss_ledger, "stokes")[0].status == "not_applicable"
    assert [e.id for e in gauss_ledger] == sorted(e.id for e in gauss_ledger)
    assert all(e.status != "fail" for e in by_id(gauss_ledger, "queue_tail"))


def test_heavy_tail_gating():
    entries = run_ledger(build_measure(parse_potential("heavy_tail:alpha=3")), NO_SIM)
    assert by_id(entries, "bobkov_band")[0].status == "not_applicable"
    assert by_id(entries, "mixing_beta")
    assert by_id(entries, "queue_tail")[0].status == "not_applicable"


def test_laplace_radii_entries():
    entries = run_ledger(build_measure(parse_potential("exp_power:p=1")), NO_SIM)
    up, low = by_id(entries, "lemma_radii_upper")[0], by_id(entries, "lemma_radii_lower")[0]
    assert up.status == "pass" and low.status == "pass"
    assert up.rhs == pytest.approx(12 * 2 * math.e * 3, rel=0.01)
    assert low.rhs == pytest.approx(0.069, rel=0.02)
    assert low.lhs == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("name", sorted(catalog()))
def test_catalog_ledger_has_no_failures(name):
    entries = run_ledger(build_measure(catalog()[name]), NO_SIM)
    bad = [(e.id, e.lhs, e.rhs) for e in entries if e.status == "fail"]
    assert not bad
    for e in entries:
        if e.status == "pass":
            assert (e.lhs <= e.rhs * (1 + e.tol) + 1e-300) if e.sense == "<=" else \
                (e.lhs >= e.rhs * (1 - e.tol))


def test_ledger_deterministic():
    m = build_measure(parse_potential("exp_power:p=4"))
    a = [e.as_dict() for e in run_ledger(m, NO_SIM)]
    b = [e.as_dict() for e in run_ledger(m, NO_SIM)]
    assert repr(a) == repr(b)
