"""Ledger rows shared by the simulation checks and the bound ledger."""

from __future__ import annotations

from dataclasses import dataclass, field

STATUSES = ("pass", "fail", "inconclusive", "not_applicable")


@dataclass
class BoundEntry:
    """One checked inequality lhs <= rhs (or lhs >= rhs when ``sense`` is ">=")."""

    id: str
    lhs: float
    rhs: float
    status: str
    inputs: dict = field(default_factory=dict)
    notes: str = ""
    tol: float = 0.0
    sense: str = "<="

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.sense not in ("<=", ">="):
            raise ValueError(f"unknown sense {self.sense!r}")

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs if self.sense == "<=" else self.lhs - self.rhs

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "sense": self.sense,
            "status": self.status,
            "slack": self.slack,
            "tol": self.tol,
            "inputs": dict(self.inputs),
            "notes": self.notes,
        }


def compare(id: str, lhs: float, rhs: float, tol: float = 1e-9, sense: str = "<=",
            inputs: dict | None = None, notes: str = "") -> BoundEntry:
    """Entry with status pass iff lhs <= rhs (1 + tol), mirrored for ">="."""
    if sense == "<=":
        ok = lhs <= rhs * (1.0 + tol) if rhs >= 0 else lhs <= rhs * (1.0 - tol)
    else:
        ok = lhs >= rhs * (1.0 - tol) if rhs >= 0 else lhs >= rhs * (1.0 + tol)
    return BoundEntry(id, float(lhs), float(rhs), "pass" if ok else "fail",
                      dict(inputs or {}), notes, tol, sense)


def not_applicable(id: str, reason: str, inputs: dict | None = None) -> BoundEntry:
    return BoundEntry(id, float("nan"), float("nan"), "not_applicable", dict(inputs or {}), reason)
