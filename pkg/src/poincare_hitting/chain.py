"""Finite Markov chains: hitting-time Laplace transforms, Lyapunov certificates,
the spectral gap of I - Q^2 and geometric decay, all by direct linear algebra."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

STOCHASTIC_TOL = 1e-12
BALANCE_TOL = 1e-10
STATIONARY_TOL = 1e-10
MAX_HORIZON = 10_000


class ChainError(ValueError):
    pass


class Divergent(NamedTuple):
    """Marker returned when E_x[rho^T_a] is infinite."""

    rho: float
    radius: float  # spectral radius of rho * Q restricted off the target


@dataclass(frozen=True, eq=False)
class ChainModel:
    states: tuple[str, ...]
    Q: np.ndarray
    pi: np.ndarray
    reversible: bool
    a: int

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def others(self) -> np.ndarray:
        return np.delete(np.arange(self.n), self.a)


def _primitive_power(Q: np.ndarray) -> int | None:
    """Smallest k with Q^k > 0 entrywise, up to Wielandt's bound (n-1)^2 + 1."""
    n = Q.shape[0]
    P = (Q > 0).astype(np.int64)
    cur = P.copy()
    for k in range(1, (n - 1) ** 2 + 2):
        if cur.all():
            return k
        cur = ((cur @ P) > 0).astype(np.int64)
    return None


def _reachable_all(Q: np.ndarray) -> bool:
    n = Q.shape[0]
    R = ((Q > 0) | np.eye(n, dtype=bool)).astype(np.int64)
    for _ in range(max(1, math.ceil(math.log2(max(n, 2))) + 1)):
        R = ((R @ R) > 0).astype(np.int64)
    return bool(R.all())


def stationary(Q: np.ndarray) -> np.ndarray:
    n = Q.shape[0]
    A = np.vstack([Q.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return pi


def from_matrix(Q, target: int = 0, states=None) -> ChainModel:
    """Validate a transition matrix and build the model."""
    Q = np.array(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] < 1:
        raise ChainError(f"Q must be a square matrix, got shape {Q.shape}")
    n = Q.shape[0]
    states = tuple(states) if states is not None else tuple(str(i) for i in range(n))
    if len(states) != n:
        raise ChainError(f"{len(states)} state names for a {n}x{n} matrix")
    if not 0 <= target < n:
        raise ChainError(f"target index {target} out of range")
    bad = np.argwhere(~np.isfinite(Q) | (Q < 0))
    if bad.size:
        i, j = bad[0]
        raise ChainError(f"entry ({i}, {j}) is negative or not finite")
    for i, s in enumerate(Q.sum(axis=1)):
        if abs(s - 1.0) > STOCHASTIC_TOL:
            raise ChainError(f"row {i} not stochastic (sums to {s:.12g})")
    if not _reachable_all(Q):
        raise ChainError("chain is reducible")
    if _primitive_power(Q) is None:
        raise ChainError("chain is periodic")
    pi = stationary(Q)
    if np.any(pi <= 0) or np.max(np.abs(pi @ Q - pi)) > STATIONARY_TOL:
        raise ChainError("could not compute a positive stationary distribution")
    flux = pi[:, None] * Q
    reversible = bool(np.max(np.abs(flux - flux.T)) <= BALANCE_TOL)
    return ChainModel(states, Q, pi, reversible, int(target))


def load_chain(doc) -> ChainModel:
    """Model from a chain document (dict, JSON text or a path to a JSON file).

    Document: {"states": [...], "Q": [[...], ...], "target": "<state>"}.
    """
    if isinstance(doc, Path) or (isinstance(doc, str) and not doc.lstrip().startswith("{")):
        doc = Path(doc).read_text()
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ChainError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ChainError("chain document must be a JSON object")
    for key in ("states", "Q", "target"):
        if key not in doc:
            raise ChainError(f"chain document is missing {key!r}")
    states = [str(s) for s in doc["states"]]
    if len(set(states)) != len(states):
        raise ChainError("state names must be unique")
    rows = doc["Q"]
    if not isinstance(rows, list) or len(rows) != len(states):
        raise ChainError(f"Q must have {len(states)} rows")
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != len(states):
            raise ChainError(f"row {i} must have {len(states)} entries")
    target = str(doc["target"])
    if target not in states:
        raise ChainError(f"target {target!r} is not a state")
    return from_matrix(rows, states.index(target), states)


# ---------------------------------------------------------------- hitting


def restricted(model: ChainModel) -> np.ndarray:
    o = model.others
    return model.Q[np.ix_(o, o)]


def spectral_radius_off_target(model: ChainModel) -> float:
    if model.n == 1:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(restricted(model)))))


def rho_star(model: ChainModel) -> float:
    """1 / spectral radius of Q off the target: E_x[rho^T_a] is finite iff rho < rho_star."""
    r = spectral_radius_off_target(model)
    return math.inf if r == 0 else 1.0 / r


def hitting_laplace(model: ChainModel, rho: float):
    """E_x[rho^{T_a}] for every x, with T_a = inf{n >= 0 : X_n = a}; Divergent if infinite."""
    if not rho > 0:
        raise ChainError("rho must be positive")
    W = np.ones(model.n)
    if model.n == 1:
        return W
    radius = rho * spectral_radius_off_target(model)
    if radius >= 1.0:
        return Divergent(rho, radius)
    o = model.others
    Qt = restricted(model)
    qa = model.Q[o, model.a]
    W[o] = np.linalg.solve(np.eye(o.size) - rho * Qt, rho * qa)
    return W


def path_sum_laplace(model: ChainModel, rho: float, n_max: int = MAX_HORIZON) -> np.ndarray:
    """sum_{n <= n_max} rho^n P_x(T_a = n), with P_x(T_a = n) = (Qt^{n-1} q_a)_x.

    The vector carries rho^n itself, so large rho^n never overflows on its own.
    """
    o = model.others
    Qt = rho * restricted(model)
    term = rho * model.Q[o, model.a]
    acc = np.zeros(o.size)
    for _ in range(n_max):
        acc += term
        term = Qt @ term
        if not np.all(np.isfinite(term)) or term.max() <= 1e-300:
            break
    out = np.ones(model.n)
    out[o] = acc
    return out


# ---------------------------------------------------------------- spectra


class Gap(NamedTuple):
    gap2: float
    C_P_chain: float
    lambda_op: float


def _symmetrised(model: ChainModel) -> np.ndarray:
    s = np.sqrt(model.pi)
    S = s[:, None] * model.Q / s[None, :]
    return 0.5 * (S + S.T)


def chain_gap(model: ChainModel) -> Gap:
    """Smallest nonzero eigenvalue of I - Q^2 in L^2(pi) and the second |eigenvalue| of Q."""
    if not model.reversible:
        raise ChainError("requires detailed balance")
    if model.n == 1:
        return Gap(math.inf, 0.0, 0.0)
    lam = np.linalg.eigvalsh(_symmetrised(model))
    rest = np.abs(lam[:-1])  # drop the top eigenvalue 1
    lam_op = float(rest.max())
    gap2 = 1.0 - lam_op ** 2
    return Gap(gap2, 1.0 / gap2 if gap2 > 0 else math.inf, lam_op)


# ---------------------------------------------------------------- certificates


class Lyapunov(NamedTuple):
    W: np.ndarray
    alpha: float
    b: float


def chain_lyapunov(model: ChainModel, rho: float) -> Lyapunov:
    """W = E_.[rho^T_a] solves QW = W/rho off a, hence QW - W <= -alpha W + b 1_a."""
    W = hitting_laplace(model, rho)
    if isinstance(W, Divergent):
        raise ChainError(f"E[rho^T_a] diverges at rho={rho} (radius {W.radius:.6g} >= 1)")
    QW = model.Q @ W
    alpha = 1.0 - 1.0 / rho
    b = max(0.0, float(QW[model.a] - W[model.a] / rho))
    return Lyapunov(W, alpha, b)


def lyapunov_residual(model: ChainModel, cert: Lyapunov) -> float:
    """max_x of QW - W + alpha W - b 1_a (must be <= 0 up to roundoff)."""
    r = model.Q @ cert.W - cert.W + cert.alpha * cert.W
    r[model.a] -= cert.b
    return float(r.max())


class TVRate(NamedTuple):
    theta: float
    C: np.ndarray  # per starting state
    log_tv: np.ndarray  # log TV distance from x at step n = 0..horizon

    @property
    def tv(self) -> np.ndarray:
        return np.exp(self.log_tv)


class VarRate(NamedTuple):
    lambda_op: float
    worst_ratio: float  # max over f, n of Var(Q^n f) / (lambda_op^{2n} Var f)
    ok: bool


def log_tv_distances(model: ChainModel, horizon: int) -> np.ndarray:
    """log ||Q^n(x, .) - pi||_TV (half the l1 norm) for n = 0..horizon.

    Powers of D = Q - 1 pi^T equal Q^n - 1 pi^T for n >= 1 without the
    cancellation of subtracting pi from Q^n. The power is renormalised every
    step and its scale kept as a logarithm, so nothing underflows.
    """
    if not 1 <= horizon <= MAX_HORIZON:
        raise ChainError(f"horizon must lie in [1, {MAX_HORIZON}]")
    D = model.Q - model.pi[None, :]
    # entries that are pure rounding would otherwise fake a slow tail
    D[np.abs(D) <= 16 * np.finfo(float).eps] = 0.0
    out = np.full((model.n, horizon + 1), -np.inf)
    with np.errstate(divide="ignore"):
        out[:, 0] = np.log(0.5 * np.abs(np.eye(model.n) - model.pi[None, :]).sum(axis=1))
        P, log_scale = D.copy(), 0.0
        for k in range(1, horizon + 1):
            top = np.abs(P).max()
            if top == 0.0:
                break
            P /= top
            log_scale += math.log(top)
            out[:, k] = log_scale + np.log(0.5 * np.abs(P).sum(axis=1))
            P = P @ D
    return out


def tv_distances(model: ChainModel, horizon: int) -> np.ndarray:
    return np.exp(log_tv_distances(model, horizon))


def fit_theta(log_tv: np.ndarray) -> tuple[float, np.ndarray]:
    """Asymptotic TV rate and the constants C(x) = max_n tv[x, n] / theta^n.

    theta = (tv[n2] / tv[n1])^{1/(n2 - n1)} with tv the worst start, n2 the
    last step with nonzero distance and n1 about n2/2 with n2 - n1 even, so a
    sign-alternating slowest mode does not bias the ratio. Exact mixing
    (distance 0 from step 1 on) gives theta = 0.
    """
    worst = log_tv.max(axis=0)
    alive = np.flatnonzero(np.isfinite(worst))
    n2 = int(alive.max()) if alive.size else 0
    if n2 == 0:
        return 0.0, np.exp(log_tv[:, 0])
    n1 = n2 - 2 * max(1, n2 // 4)
    if n1 < 0:
        n1 = 0 if n2 % 2 == 0 else 1
    if n1 == n2 or not np.isfinite(worst[n1]):
        n1 = 0
    log_theta = min(0.0, (worst[n2] - worst[n1]) / (n2 - n1))
    n = np.arange(n2 + 1)
    C = np.exp(np.max(log_tv[:, : n2 + 1] - log_theta * n[None, :], axis=1))
    return math.exp(log_theta), C


def chain_decay(model: ChainModel, horizon: int = 200, n_random: int = 8,
                seed: int = 0) -> tuple[TVRate, VarRate | None]:
    log_tv = log_tv_distances(model, horizon)
    theta, C = fit_theta(log_tv)
    var_rate = None
    if model.reversible:
        lam = chain_gap(model).lambda_op
        rng = np.random.default_rng(seed)
        fs = np.hstack([np.eye(model.n), rng.standard_normal((model.n, n_random))])
        pi = model.pi

        # Q fixes constants, so iterate on the centred functions: the
        # shrinking deviation then never cancels against the mean
        F = fs - pi @ fs
        v0 = pi @ F ** 2
        live = v0 > 0
        worst = 0.0
        for k in range(1, min(horizon, 100) + 1):
            F = model.Q @ F
            F -= pi @ F
            # absolute floor: rounding leaves ~1e-32 of variance after exact mixing
            bound = lam ** (2 * k) * v0[live] + 1e-28 * v0[live]
            vk = (pi @ F ** 2)[live]
            worst = max(worst, float(np.max(vk / bound)))
        var_rate = VarRate(lam, worst, worst <= 1.0 + 1e-9)
    return TVRate(theta, C, log_tv), var_rate


@dataclass(frozen=True, eq=False)
class ChainCertificates:
    rho_star: float
    gap2: float
    C_P_chain: float
    lambda_op: float
    lyapunov: Lyapunov | None
    rho_used: float
    tv_rate: TVRate


def certificates(model: ChainModel, horizon: int = 200) -> ChainCertificates:
    g = chain_gap(model)
    rs = rho_star(model)
    rho = 1.0 + g.gap2 / 4.0
    if rho >= rs:
        rho = 0.5 * (1.0 + rs)
    cert = chain_lyapunov(model, rho)
    tv, _ = chain_decay(model, horizon)
    return ChainCertificates(rs, g.gap2, g.C_P_chain, g.lambda_op, cert, rho, tv)


def equivalence_check(model: ChainModel, horizon: int = 4000) -> dict[str, bool]:
    """All statements of the finite equivalence, evaluated together on one chain.

    Finiteness is tested at rho = 1 + gap2/4. The Lyapunov replay and the
    path-sum oracle use the smaller of that rho and the midpoint of
    (1, rho_star), so each entry reports on its own statement.
    """
    g = chain_gap(model)
    rho = 1.0 + g.gap2 / 4.0
    finite = not isinstance(hitting_laplace(model, rho), Divergent)
    # the path sum over 1e4 steps converges only well inside (1, rho_star)
    rho = min(rho, 0.5 * (1.0 + rho_star(model)))
    cert = chain_lyapunov(model, rho)
    brute = path_sum_laplace(model, rho)
    tv, var = chain_decay(model, horizon)
    return {
        "laplace_finite": finite,
        "lyapunov_replay": lyapunov_residual(model, cert) <= 1e-10,
        "path_sum_oracle": bool(np.max(np.abs(brute - cert.W) / cert.W) <= 1e-8),
        "tv_rate_le_lambda": tv.theta <= g.lambda_op + 1e-9,
        "poincare_finite": math.isfinite(g.C_P_chain),
        "variance_decay": bool(var and var.ok),
    }


def random_reversible_chain(n: int, rng: np.random.Generator, concentration: float = 1.0,
                            min_gap2: float = 0.0) -> ChainModel:
    """Dirichlet(concentration) rows made reversible by a Metropolis filter.

    The proposal P has stationary law pi_P; the filter accepts i -> j with
    probability min(1, pi_j P_ji / (pi_i P_ij)), which keeps pi_P and enforces
    detailed balance. The target is the state of largest stationary mass.
    Chains with gap2 below ``min_gap2`` are redrawn.
    """
    if n < 2:
        raise ChainError("need at least two states")
    while True:
        P = rng.dirichlet(np.full(n, concentration), size=n)
        pi = stationary(P)
        flux = pi[:, None] * P
        with np.errstate(divide="ignore", invalid="ignore"):
            accept = np.where(flux > 0, np.minimum(1.0, flux.T / flux), 0.0)
        Q = P * accept
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, 1.0 - Q.sum(axis=1))
        try:
            model = from_matrix(Q)
        except ChainError:
            continue
        if not model.reversible or chain_gap(model).gap2 < min_gap2:
            continue
        return ChainModel(model.states, model.Q, model.pi, True, int(np.argmax(model.pi)))


def summary(model: ChainModel, horizon: int = 200) -> dict:
    """Plain-number report used by the command line."""
    out = {"n": model.n, "target": model.states[model.a], "reversible": model.reversible,
           "pi": model.pi.tolist(), "rho_star": rho_star(model)}
    tv, _ = chain_decay(model, horizon)
    out["tv_theta"] = tv.theta
    out["tv_C"] = tv.C.tolist()
    if model.reversible:
        c = certificates(model, horizon)
        out.update(gap2=c.gap2, C_P_chain=c.C_P_chain, lambda_op=c.lambda_op,
                   lyapunov_rho=c.rho_used, lyapunov_alpha=c.lyapunov.alpha,
                   lyapunov_b=c.lyapunov.b, lyapunov_W=c.lyapunov.W.tolist())
    return out

