"""Euler-Maruyama sampling of hitting times for dX = -V'(X) dt + sqrt(2) dB.

Every path owns a Philox stream keyed by (seed, path index), so a path's
noise does not depend on batching or on how paths are split across workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .entries import BoundEntry
from .measure1d import Measure1D, quantiles

MAX_DT = 1e-2
BOUNDARY_TOL = 1e-9
BATCH_PATHS = 8192
BLOCK_STEPS = 256
CI_LEVEL = 0.95
TOP_SHARE = 0.5  # top 1% of e^{theta T} carrying more than this is flagged


class SimulationError(RuntimeError):
    pass


@dataclass
class SimConfig:
    measure: Measure1D
    x0: float | str
    U: tuple[float, float]
    dt: float = 1e-3
    t_max: float = 50.0
    n_paths: int = 10_000
    seed: int = 0

    def __post_init__(self):
        a, b = map(float, self.U)
        if not a < b:
            raise ValueError("U must be an interval (a, b) with a < b")
        self.U = (a, b)
        self.dt, self.t_max = float(self.dt), float(self.t_max)
        if not 0 < self.dt <= MAX_DT:
            raise ValueError(f"dt must lie in (0, {MAX_DT}]")
        if self.t_max < 10 * self.dt:
            raise ValueError("t_max must be at least 10 dt")
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(self.seed)
        if isinstance(self.x0, str):
            if self.x0 != "stationary":
                raise ValueError('x0 must be a number or "stationary"')
        else:
            self.x0 = float(self.x0)
            if a + BOUNDARY_TOL < self.x0 < b - BOUNDARY_TOL:
                raise ValueError("x0 lies inside U")

    @property
    def stationary(self) -> bool:
        return self.x0 == "stationary"

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_max / self.dt - 1e-9))

    def echo(self) -> dict:
        return {"potential": self.measure.spec.family, "params": dict(self.measure.spec.params),
                "x0": self.x0, "U": list(self.U), "dt": self.dt, "t_max": self.t_max,
                "n_paths": self.n_paths, "seed": self.seed}


@dataclass
class HittingSample:
    """Hitting times in path order; censored paths carry t_max exactly.

    ``immediate`` marks paths that start in the closure of U (time 0).
    """

    times: np.ndarray
    censored: np.ndarray
    immediate: np.ndarray
    config: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def censored_fraction(self) -> float:
        return float(self.censored.mean())

    @property
    def seed(self) -> int:
        return self.config.get("seed", 0)


def _stream(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, path]))


def _run_paths(cfg: SimConfig, lo: int, hi: int):
    """Simulate paths lo..hi-1; returns (times, censored, immediate)."""
    n = hi - lo
    a, b = cfg.U
    dt, n_steps = cfg.dt, cfg.n_steps
    sig = math.sqrt(2.0 * dt)
    spec = cfg.measure.spec
    reflect = cfg.measure.domain if spec.compact else None
    gens = [_stream(cfg.seed, i) for i in range(lo, hi)]
    if cfg.stationary:
        x = quantiles(cfg.measure, np.array([g.random() for g in gens]))
    else:
        x = np.full(n, cfg.x0)
    times = np.full(n, cfg.t_max, dtype=float)
    censored = np.ones(n, dtype=bool)
    immediate = (x >= a - BOUNDARY_TOL) & (x <= b + BOUNDARY_TOL)
    times[immediate] = 0.0
    censored[immediate] = False
    idx = np.flatnonzero(~immediate)
    x = x[idx]
    below = x < a  # which side of U the path is on; it cannot change without a hit
    step = 0
    while idx.size and step < n_steps:
        block = min(BLOCK_STEPS, n_steps - step)
        Z = np.stack([gens[i].standard_normal(block) for i in idx])
        alive = np.ones(idx.size, dtype=bool)
        for j in range(block):
            drift = spec.dV(x)
            broken = alive & ~np.isfinite(drift)
            if broken.any():
                bad = int(np.flatnonzero(broken)[0])
                raise SimulationError(
                    f"non-finite drift on path {lo + idx[bad]} at t={(step + j) * dt:.6g}, x={x[bad]!r}")
            xn = x - drift * dt + sig * Z[:, j]
            if reflect is not None:
                xn = np.where(xn < reflect[0], 2 * reflect[0] - xn, xn)
                xn = np.where(xn > reflect[1], 2 * reflect[1] - xn, xn)
            hit = alive & np.where(below, xn >= a, xn <= b)
            if hit.any():
                h = np.flatnonzero(hit)
                edge = np.where(below[h], a, b)
                frac = (edge - x[h]) / (xn[h] - x[h])
                t_hit = (step + j + frac) * dt
                times[idx[h]] = np.minimum(t_hit, cfg.t_max)
                censored[idx[h]] = False
                alive[h] = False
            x = xn
        step += block
        idx, x, below = idx[alive], x[alive], below[alive]
    return times, censored, immediate


def simulate_hitting(cfg: SimConfig, workers: int = 1) -> HittingSample:
    """Sample T_U for cfg.n_paths paths; bitwise reproducible for any ``workers``."""
    cuts = list(range(0, cfg.n_paths, BATCH_PATHS)) + [cfg.n_paths]
    ranges = list(zip(cuts[:-1], cuts[1:]))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda r: _run_paths(cfg, *r), ranges))
    else:
        parts = [_run_paths(cfg, *r) for r in ranges]
    times, censored, immediate = (np.concatenate(p) for p in zip(*parts))
    return HittingSample(times, censored, immediate, cfg.echo())


def merge(samples: list[HittingSample]) -> HittingSample:
    """Concatenate samples simulated on disjoint path ranges."""
    return HittingSample(np.concatenate([s.times for s in samples]),
                         np.concatenate([s.censored for s in samples]),
                         np.concatenate([s.immediate for s in samples]),
                         dict(samples[0].config))


@dataclass
class Estimate:
    value: float
    ci_halfwidth: float
    reliable: bool
    reason: str = ""


def _z() -> float:
    return float(stats.norm.ppf(0.5 + CI_LEVEL / 2))


def exp_moment_estimate(s: HittingSample, theta: float) -> Estimate:
    """Mean of e^{theta T} with a normal CI.

    Censored paths make the value a lower bound. The estimate is also flagged
    when the top 1% of e^{theta T} carries more than half the total.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    e = np.exp(theta * s.times)
    total = math.fsum(e)
    value = total / s.n
    half = _z() * float(e.std(ddof=1)) / math.sqrt(s.n) if s.n > 1 else math.inf
    reasons = []
    if s.censored.any():
        reasons.append(f"{s.censored_fraction:.3g} of paths censored (value is a lower bound)")
    k = max(1, s.n // 100)
    top = math.fsum(np.sort(e)[-k:])
    if top > TOP_SHARE * total:
        reasons.append(f"top 1% carries {top / total:.2f} of the mass")
    return Estimate(value, half, not reasons, "; ".join(reasons))


def moment_estimate(s: HittingSample, q: int = 1) -> Estimate:
    """Mean of T^q with a normal CI; flagged when paths are censored."""
    v = s.times ** q
    half = _z() * float(v.std(ddof=1)) / math.sqrt(s.n) if s.n > 1 else math.inf
    reason = "" if not s.censored.any() else f"{s.censored_fraction:.3g} of paths censored"
    return Estimate(math.fsum(v) / s.n, half, not reason, reason)


def empirical_tail(s: HittingSample, t: float) -> tuple[float, float, float]:
    """P(T > t) with its Clopper-Pearson interval."""
    k = int(np.count_nonzero(s.times > t))
    lo, hi = clopper_pearson(k, s.n)
    return k / s.n, lo, hi


def clopper_pearson(k: int, n: int, level: float = CI_LEVEL) -> tuple[float, float]:
    alpha = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


def queue_tail_bound(t: float, C_P: float, mu_U: float) -> float:
    """exp(-t mu(U) / (8 C_P (1 - mu(U)))), valid for a stationary start and mu(U) <= 1/2."""
    return math.exp(-t * mu_U / (8.0 * C_P * (1.0 - mu_U)))


def large_mass_tail_bound(t: float, C_P: float, mu_U: float) -> float:
    """exp(-t mu(U)^2 / (2 C_P)), the rate used when mu(U) >= 1/2."""
    return math.exp(-t * mu_U ** 2 / (2.0 * C_P))


def _tail_entries(s: HittingSample, t_grid, bound, inputs: dict, id: str) -> list[BoundEntry]:
    if s.config.get("x0") != "stationary":
        raise ValueError("tail checks need a sample started from the stationary law")
    t_max = s.config.get("t_max", math.inf)
    out = []
    for t in t_grid:
        p, lo, hi = empirical_tail(s, t)
        rhs = bound(float(t))
        note = f"Clopper-Pearson {CI_LEVEL:.0%} interval [{lo:.4g}, {hi:.4g}]"
        if t >= t_max and s.censored.any():
            status, note = "inconclusive", note + "; t beyond the censoring horizon"
        elif hi <= rhs:
            status = "pass"
        elif lo <= rhs:
            status = "inconclusive"
        else:
            status = "fail"
        out.append(BoundEntry(id, p, rhs, status, dict(inputs, t=float(t), ci_upper=hi), note))
    return out


def tail_check(s: HittingSample, C_P: float, mu_U: float, t_grid) -> list[BoundEntry]:
    """Compare empirical P_mu(T_U > t) with exp(-t mu(U) / (8 C_P (1 - mu(U))))."""
    if mu_U > 0.5:
        raise ValueError("mu(U) > 1/2: use large_mass_tail_check (rate mu(U)^2 / (2 C_P))")
    return _tail_entries(s, t_grid, lambda t: queue_tail_bound(t, C_P, mu_U),
                         {"C_P": C_P, "mu_U": mu_U}, "queue_tail")


def large_mass_tail_check(s: HittingSample, C_P: float, mu_U: float, t_grid) -> list[BoundEntry]:
    """Compare empirical P_mu(T_U > t) with exp(-t mu(U)^2 / (2 C_P)) for mu(U) >= 1/2."""
    if mu_U < 0.5:
        raise ValueError("mu(U) < 1/2: use tail_check")
    return _tail_entries(s, t_grid, lambda t: large_mass_tail_bound(t, C_P, mu_U),
                         {"C_P": C_P, "mu_U": mu_U}, "queue_tail")


def to_csv_rows(s: HittingSample) -> list[tuple[float, int]]:
    return [(float(t), int(c)) for t, c in zip(s.times, s.censored)]
