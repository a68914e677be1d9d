"""Command-line front end.

Exit codes: 0 success, 1 computation error, 2 invalid input, 3 when
``verify`` finds a failing ledger entry.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import bounds, chain, hitting1d as h1, montecarlo as mc
from .measure1d import (MeasureError, build_measure, is_log_concave, level_radii, parse_potential,
                        superlinear_certificate)
from .operator1d import assemble_form, cheeger_constant, muckenhoupt_constant, poincare_constant

COMMANDS = ("measure", "poincare", "hitting", "mc", "chain", "verify")
NEEDS_POTENTIAL = ("measure", "poincare", "hitting", "mc", "verify")
NEEDS_U = ("hitting", "mc")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected lo,hi, got {text!r}") from exc
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"interval needs lo < hi, got {text!r}")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poincare-hitting", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--potential", help="family:key=value,... e.g. gaussian:sigma=1")
    p.add_argument("--grid-points", type=int, default=4096)
    p.add_argument("--U", type=_interval, help="target interval lo,hi")
    p.add_argument("--theta", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--r", type=float)
    p.add_argument("--q-max", type=int, default=4, help="highest polynomial moment (hitting)")
    p.add_argument("--x0", default="stationary", help='start point or "stationary" (mc)')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-paths", type=int, default=10_000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--t-max", type=float, default=10.0)
    p.add_argument("--samples", help="write per-path hitting times as CSV (mc)")
    p.add_argument("--no-simulation", action="store_true", help="skip simulation entries (verify)")
    p.add_argument("--file", help="chain JSON document")
    p.add_argument("--rho", type=float)
    p.add_argument("--horizon", type=int, default=200, help="TV horizon (chain)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--output", help="report path (stdout when omitted)")
    p.add_argument("--no-timestamp", action="store_true")
    return p


def _normalise_argv(argv: list[str]) -> list[str]:
    # "--U -1,1" would be read as a flag; glue the value on
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--U" and i + 1 < len(argv):
            out.append("--U=" + argv[i + 1])
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def _validate(a: argparse.Namespace) -> None:
    if a.command in NEEDS_POTENTIAL and not a.potential:
        raise UsageError(f"{a.command} needs --potential")
    if a.command in NEEDS_U and a.U is None:
        raise UsageError(f"{a.command} needs --U")
    if a.command == "chain" and not a.file:
        raise UsageError("chain needs --file")
    if a.grid_points < 64:
        raise UsageError("--grid-points must be at least 64")
    if a.theta is not None and not a.theta > 0:
        raise UsageError("--theta must be positive")
    if a.rho is not None and not a.rho > 0:
        raise UsageError("--rho must be positive")
    if a.command == "mc":
        if not 0 < a.dt <= mc.MAX_DT:
            raise UsageError(f"--dt must lie in (0, {mc.MAX_DT}]")
        if a.t_max < 10 * a.dt:
            raise UsageError("--t-max must be at least 10 dt")
        if a.n_paths < 1:
            raise UsageError("--n-paths must be positive")
        if a.x0 != "stationary":
            try:
                float(a.x0)
            except ValueError as exc:
                raise UsageError('--x0 must be a number or "stationary"') from exc


def _clean(v):
    """JSON-safe copy: numpy scalars and arrays to Python, non-finite floats to strings."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return v


def _measure(a):
    return build_measure(parse_potential(a.potential), a.grid_points)


def cmd_measure(a) -> tuple[dict, int]:
    m = _measure(a)
    res = {"Z": m.Z, "mean": m.mean, "variance": m.variance, "median": m.median,
           "a_min": m.a_min, "domain": list(m.domain), "log_concave": is_log_concave(m)}
    if a.beta is not None:
        radii = level_radii(m, a.beta)
        cert = superlinear_certificate(m, a.beta)
        res.update(R_minus=radii.R_minus, R_plus=radii.R_plus, radii_capped=radii.capped,
                   c_beta=cert.c_beta, h_beta=cert.h_beta, certificate_valid=cert.valid)
    return res, 0


def cmd_poincare(a) -> tuple[dict, int]:
    m = _measure(a)
    sp = poincare_constant(assemble_form(m))
    est = h1.poincare_with_divergence(m)
    res = {"C_P": sp.C_P, "lambda1": 1.0 / sp.C_P, "residual": sp.residual,
           "C_P_on_line": est.C_P, "diverging": est.diverging,
           "muckenhoupt_B": muckenhoupt_constant(m), "cheeger_C_prime": cheeger_constant(m),
           "variance": m.variance}
    return res, 0


def _field_summary(sol: h1.HittingSolution, probes) -> dict:
    return {"blow_up": sol.blow_up, "reason": sol.reason,
            "integral_against_mu": sol.integral_against_mu,
            "truncation_shift": sol.truncation_shift,
            "at": {f"{x:g}": sol.at(x) for x in probes}}


def cmd_hitting(a) -> tuple[dict, int]:
    m = _measure(a)
    U = a.U
    mu_U = h1.mass_of(m, U)
    est = h1.poincare_with_divergence(m)
    lo, hi = m.domain
    probes = [x for x in (U[0] - 2, U[0] - 1, U[1] + 1, U[1] + 2) if lo <= x <= hi]
    res = {"mu_U": mu_U, "theta_star": h1.critical_rate(m, U), "C_P": est.C_P,
           "theta_U": h1.theta_U(mu_U, est.C_P)}
    if a.theta is not None:
        sol = h1.exp_moment_field(h1.HittingProblem(m, U, "exp_moment", a.theta))
        res["exp_moment"] = dict(_field_summary(sol, probes), theta=a.theta)
    fields = h1.poly_moment_fields(m, U, a.q_max)
    res["poly_moments"] = [dict(_field_summary(f, probes), q=q) for q, f in enumerate(fields)]
    return res, 0


def cmd_mc(a) -> tuple[dict, int]:
    m = _measure(a)
    x0 = a.x0 if a.x0 == "stationary" else float(a.x0)
    cfg = mc.SimConfig(m, x0, a.U, a.dt, a.t_max, a.n_paths, a.seed)
    s = mc.simulate_hitting(cfg)
    mean = mc.moment_estimate(s, 1)
    res = {"n_paths": s.n, "censored_fraction": s.censored_fraction,
           "immediate_fraction": float(s.immediate.mean()),
           "mean_T": {"value": mean.value, "ci_halfwidth": mean.ci_halfwidth,
                      "reliable": mean.reliable, "reason": mean.reason}}
    if a.theta is not None:
        e = mc.exp_moment_estimate(s, a.theta)
        res["exp_moment"] = {"theta": a.theta, "value": e.value, "ci_halfwidth": e.ci_halfwidth,
                             "reliable": e.reliable, "reason": e.reason}
    if x0 == "stationary":
        mu_U = h1.mass_of(m, a.U)
        cp = h1.poincare_with_divergence(m).C_P
        if math.isfinite(cp):
            check = mc.tail_check if mu_U <= 0.5 else mc.large_mass_tail_check
            grid = [t for t in (0.0, 1.0, 2.0, 4.0, 8.0) if t < a.t_max]
            res["tail_check"] = [e.as_dict() for e in check(s, cp, mu_U, grid)]
    if a.samples:
        with open(a.samples, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "censored"])
            w.writerows(mc.to_csv_rows(s))
    return res, 0


def cmd_chain(a) -> tuple[dict, int]:
    model = chain.load_chain(Path(a.file))
    res = chain.summary(model, a.horizon)
    if a.rho is not None:
        W = chain.hitting_laplace(model, a.rho)
        if isinstance(W, chain.Divergent):
            res["hitting_laplace"] = {"rho": a.rho, "divergent": True, "radius": W.radius}
        else:
            res["hitting_laplace"] = {"rho": a.rho, "divergent": False, "W": W.tolist()}
    return res, 0


def cmd_verify(a) -> tuple[dict, int]:
    m = _measure(a)
    opts = bounds.LedgerOptions(seed=a.seed, n_paths=a.n_paths, dt=a.dt, t_max=a.t_max,
                                simulate=not a.no_simulation)
    if a.U is not None:
        opts.U = a.U
    if a.beta is not None:
        opts.beta = a.beta
    if a.r is not None:
        opts.r = a.r
    if a.theta is not None:
        opts.theta = a.theta
    entries = bounds.run_ledger(m, opts)
    counts = bounds.summary_counts(entries)
    return {"counts": counts, "entries": [e.as_dict() for e in entries]}, 3 if counts["fail"] else 0


HANDLERS = {"measure": cmd_measure, "poincare": cmd_poincare, "hitting": cmd_hitting,
            "mc": cmd_mc, "chain": cmd_chain, "verify": cmd_verify}


def _config(a) -> dict:
    keys = ("command", "potential", "grid_points", "U", "theta", "beta", "r", "q_max", "x0", "seed",
            "n_paths", "dt", "t_max", "file", "rho", "horizon", "format", "no_simulation")
    return {k: getattr(a, k) for k in keys}


def _flatten(prefix: str, v, rows: list):
    if isinstance(v, dict):
        status = v.get("status", "")
        for k, x in v.items():
            if k != "status":
                _flatten(f"{prefix}.{k}" if prefix else k, x, rows)
        if status and prefix:
            rows.append((f"{prefix}.status", status, "", status))
    elif isinstance(v, list) and v and isinstance(v[0], dict):
        for i, x in enumerate(v):
            name = x.get("id", str(i)) if isinstance(x, dict) else str(i)
            _flatten(f"{prefix}[{i}:{name}]", x, rows)
    else:
        rows.append((prefix, json.dumps(v) if isinstance(v, list) else v, "", ""))


def render(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"
    rows: list = []
    _flatten("", report["result"], rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "value", "unit", "status"])
    w.writerows(rows)
    return buf.getvalue()


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        a = build_parser().parse_args(_normalise_argv(argv))
        _validate(a)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    try:
        result, code = HANDLERS[a.command](a)
    except (MeasureError, chain.ChainError, h1.HittingError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # computation failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    report = {"config": _config(a), "result": result}
    if not a.no_timestamp:
        report["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    text = render(_clean(report), a.format)
    if a.output:
        Path(a.output).write_text(text)
    else:
        sys.stdout.write(text)
    return code


def main() -> None:
    sys.exit(run())
