import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import integrate

from poincare_hitting import montecarlo as mc
from poincare_hitting.hitting1d import mass_of
from poincare_hitting.measure1d import build_measure, parse_potential
from poincare_hitting.montecarlo import (
    HittingSample, SimConfig, SimulationError, clopper_pearson, empirical_tail,
    exp_moment_estimate, large_mass_tail_check, merge, moment_estimate, simulate_hitting,
    tail_check, to_csv_rows,
)

U1 = (-1.0, 1.0)


@pytest.fixture(scope="module")
def gauss():
    return build_measure(parse_potential("gaussian"))


@pytest.fixture(scope="module")
def gauss_sample(gauss):
    return simulate_hitting(SimConfig(gauss, 2.0, U1, dt=1e-3, t_max=20, n_paths=20000, seed=1))


def test_config_validation(gauss):
    for kw in ({"dt": 0.02}, {"dt": 0.0}, {"t_max": 0.005}, {"n_paths": 0}, {"seed": -1},
               {"seed": 2 ** 64}):
        with pytest.raises(ValueError):
            SimConfig(gauss, 2.0, U1, **kw)
    with pytest.raises(ValueError, match="inside U"):
        SimConfig(gauss, 0.0, U1)
    with pytest.raises(ValueError):
        SimConfig(gauss, "anywhere", U1)
    with pytest.raises(ValueError):
        SimConfig(gauss, 2.0, (1.0, -1.0))


def test_deterministic_and_seed_sensitive(gauss):
    cfg = SimConfig(gauss, 2.0, U1, t_max=5, n_paths=200, seed=3)
    a, b = simulate_hitting(cfg), simulate_hitting(cfg)
    assert np.array_equal(a.times, b.times)
    c = simulate_hitting(SimConfig(gauss, 2.0, U1, t_max=5, n_paths=200, seed=4))
    assert not np.array_equal(a.times, c.times)


def test_partition_independence(gauss, monkeypatch):
    cfg = SimConfig(gauss, "stationary", (-0.5, 0.5), t_max=5, n_paths=300, seed=11)
    whole = simulate_hitting(cfg)
    times, censored, immediate = mc._run_paths(cfg, 100, 250)
    assert np.array_equal(times, whole.times[100:250])
    assert np.array_equal(immediate, whole.immediate[100:250])
    monkeypatch.setattr(mc, "BATCH_PATHS", 64)
    for workers in (1, 3):
        assert np.array_equal(simulate_hitting(cfg, workers=workers).times, whole.times)
    parts = [HittingSample(*mc._run_paths(cfg, lo, hi), cfg.echo()) for lo, hi in ((0, 70), (70, 300))]
    assert np.array_equal(merge(parts).times, whole.times)


def test_times_in_range(gauss_sample):
    s = gauss_sample
    assert np.all(s.times > 0) and np.all(s.times <= 20)
    assert np.all(s.times[s.censored] == 20)
    assert not s.immediate.any()


def test_immediate_hits(gauss):
    s = simulate_hitting(SimConfig(gauss, "stationary", U1, t_max=2, n_paths=2000, seed=2))
    frac = s.immediate.mean()
    assert frac == pytest.approx(mass_of(gauss, U1), abs=0.04)
    assert np.all(s.times[s.immediate] == 0.0)
    assert not s.censored[s.immediate].any()


def test_mean_time_matches_quadrature(gauss_sample):
    inner = lambda y: math.exp(y * y / 2) * math.sqrt(math.pi / 2) * math.erfc(y / math.sqrt(2))
    exact = integrate.quad(inner, 1.0, 2.0)[0]
    est = moment_estimate(gauss_sample, 1)
    assert est.reliable
    assert est.value == pytest.approx(exact, rel=0.05)


def test_exp_moment_matches_field(gauss_sample):
    from scipy.special import pbdv
    f = lambda y: math.exp(y * y / 4) * pbdv(0.1, y)[0]
    est = exp_moment_estimate(gauss_sample, 0.1)
    assert est.reliable
    assert est.value == pytest.approx(f(2.0) / f(1.0), rel=0.05)


def test_exp_moment_small_theta(gauss_sample):
    est = exp_moment_estimate(gauss_sample, 1e-9)
    assert est.value == pytest.approx(1.0, abs=1e-7)
    with pytest.raises(ValueError):
        exp_moment_estimate(gauss_sample, 0.0)


def test_exp_moment_flags_heavy_sample():
    times = np.full(1000, 0.1)
    times[:5] = 40.0
    s = HittingSample(times, np.zeros(1000, bool), np.zeros(1000, bool), {})
    est = exp_moment_estimate(s, 1.0)
    assert not est.reliable and "top 1%" in est.reason


def test_censoring_flags_and_monotone(gauss):
    fracs = []
    for t_max in (0.5, 1.0, 4.0):
        s = simulate_hitting(SimConfig(gauss, 3.0, U1, t_max=t_max, n_paths=1000, seed=5))
        fracs.append(s.censored_fraction)
        if s.censored.any():
            assert not exp_moment_estimate(s, 0.1).reliable
            assert not moment_estimate(s).reliable
    assert fracs[0] >= fracs[1] >= fracs[2]
    assert fracs[0] > 0


def test_reflection_on_compact_domain():
    m = build_measure(parse_potential("uniform:r=1"))
    s = simulate_hitting(SimConfig(m, 0.9, (-0.2, 0.2), t_max=10, n_paths=500, seed=0))
    assert s.censored_fraction < 0.05


def test_nonfinite_drift_reports_path():
    spec = SimpleNamespace(family="broken", params={}, compact=False,
                           dV=lambda x: np.where(x > 2.5, np.nan, x))
    m = SimpleNamespace(spec=spec, domain=(-10.0, 10.0))
    with pytest.raises(SimulationError, match="non-finite drift on path"):
        simulate_hitting(SimConfig(m, 2.4, U1, t_max=5, n_paths=50, seed=0))


def test_clopper_pearson():
    lo, hi = clopper_pearson(0, 10)
    assert lo == 0.0 and hi == pytest.approx(1 - 0.025 ** 0.1, rel=1e-10)
    lo, hi = clopper_pearson(10, 10)
    assert hi == 1.0 and lo == pytest.approx(0.025 ** 0.1, rel=1e-10)
    lo, hi = clopper_pearson(30, 100)
    assert lo < 0.3 < hi


def test_empirical_tail(gauss_sample):
    p, lo, hi = empirical_tail(gauss_sample, 0.0)
    assert p == 1.0 and hi == 1.0
    p5, _, _ = empirical_tail(gauss_sample, 5.0)
    assert p5 < 0.01


def test_tail_check_gaussian(gauss):
    U = (-0.5, 0.5)
    s = simulate_hitting(SimConfig(gauss, "stationary", U, t_max=10, n_paths=5000, seed=7))
    entries = tail_check(s, 1.0, mass_of(gauss, U), [0, 1, 2, 4])
    assert [e.status for e in entries] == ["pass"] * 4
    with pytest.raises(ValueError, match="large_mass_tail_check"):
        tail_check(s, 1.0, 0.6, [1])
    with pytest.raises(ValueError):
        large_mass_tail_check(s, 1.0, 0.3, [1])


def test_tail_check_needs_stationary_start(gauss_sample):
    with pytest.raises(ValueError, match="stationary"):
        tail_check(gauss_sample, 1.0, 0.3, [1])


def test_tail_check_fails_on_wrong_constant(gauss):
    U = (-0.5, 0.5)
    s = simulate_hitting(SimConfig(gauss, "stationary", U, t_max=10, n_paths=5000, seed=7))
    entries = tail_check(s, 0.01, mass_of(gauss, U), [2])
    assert entries[0].status == "fail"


def test_csv_rows(gauss_sample):
    rows = to_csv_rows(gauss_sample)
    assert len(rows) == gauss_sample.n
    assert all(c in (0, 1) for _, c in rows[:100])
