"""Lower/upper bounds on target error and their verdicts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .domains import LinearUdaModel, MixtureDomainPair
from .measures import MeasureSet, QuadratureSpec, compute_measures

# absorbs quadrature error in every inequality check
BOUND_TOL = 1e-4


def lower_bound(m: MeasureSet) -> float:
    """``max(e_S(f_S,f_T), e_T(f_S,f_T)) - e_S(h) - D_1``. Not clamped."""
    return max(m.mismatch_S, m.mismatch_T) - m.e_S_abs - m.tv


def upper_bound(m: MeasureSet) -> float:
    return min(m.mismatch_S, m.mismatch_T) + m.e_S_abs + m.tv


def pinsker_lower_bound(m: MeasureSet) -> float:
    """Lower bound with ``D_1`` replaced by its KL majorant.

    For the unnormalised ``D_1 = int |p - q|`` Pinsker's inequality reads
    ``D_1 <= sqrt(2 KL)``, so that is the term subtracted here.
    """
    return max(m.mismatch_S, m.mismatch_T) - m.e_S_abs - math.sqrt(2.0 * max(m.kl, 0.0))


def sandwich_check(m: MeasureSet, tol: float = BOUND_TOL) -> bool:
    slack = m.e_S_abs + m.tv + tol
    return abs(m.e_T_abs - m.mismatch_S) <= slack and abs(m.e_T_abs - m.mismatch_T) <= slack


@dataclass(frozen=True)
class BoundReport:
    measures: MeasureSet
    lower_bound: float
    upper_bound: float
    pinsker_lower_bound: float
    sandwich_ok: bool
    lb_le_eT: bool
    eT_le_ub: bool

    @property
    def consistent(self) -> bool:
        return self.sandwich_ok and self.lb_le_eT and self.eT_le_ub

    def to_dict(self) -> dict:
        return {
            "measures": self.measures.to_dict(),
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "pinsker_lower_bound": self.pinsker_lower_bound,
            "sandwich_ok": self.sandwich_ok,
            "lb_le_eT": self.lb_le_eT,
            "eT_le_ub": self.eT_le_ub,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundReport":
        return cls(
            MeasureSet.from_dict(d["measures"]),
            float(d["lower_bound"]),
            float(d["upper_bound"]),
            float(d["pinsker_lower_bound"]),
            bool(d["sandwich_ok"]),
            bool(d["lb_le_eT"]),
            bool(d["eT_le_ub"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_from_measures(m: MeasureSet, tol: float = BOUND_TOL) -> BoundReport:
    lb, ub = lower_bound(m), upper_bound(m)
    return BoundReport(
        measures=m,
        lower_bound=lb,
        upper_bound=ub,
        pinsker_lower_bound=pinsker_lower_bound(m),
        sandwich_ok=sandwich_check(m, tol),
        lb_le_eT=lb <= m.e_T_abs + tol,
        eT_le_ub=m.e_T_abs <= ub + tol,
    )


def evaluate_bounds(pair: MixtureDomainPair, model: LinearUdaModel, spec: QuadratureSpec | None = None) -> BoundReport:
    return report_from_measures(compute_measures(pair, model, spec))
