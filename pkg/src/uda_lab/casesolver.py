"""Nelder-Mead solution of the analytic linear-UDA objective and the three case presets.

The objective over ``(u1, u2, a, b)`` is::

    E_S[(Phi(a z + b) - f~_S(z))^2] + lambda * int (p~_S - p~_T)^2 + eta * (|u|^2 - 1)^2

Parameters ``(u, a, b)`` and ``(-u, -a, b)`` describe the same classifier, so
each restart's solution is reported with ``u2 >= 0``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels as K
from .bounds import BoundReport, evaluate_bounds
from .domains import LinearUdaModel, MixtureDomain, MixtureDomainPair, label_params
from .measures import DEFAULT_SPEC, NumericFailureError, QuadratureSpec, covering_spec
from .domains import project_domain

log = logging.getLogger(__name__)

SUCCESS_THRESHOLD = 0.01


class ConvergenceError(RuntimeError):
    pass


# ------------------------------------------------------------------ simplex


@dataclass(frozen=True)
class SimplexConfig:
    max_iters: int = 5000
    f_tol: float = 1e-10
    x_tol: float = 1e-8
    alpha: float = 1.0  # reflection
    gamma: float = 2.0  # expansion
    rho: float = 0.5  # contraction
    shrink: float = 0.5
    initial_step: float = 0.05

    def __post_init__(self):
        if not (self.alpha > 0 and self.gamma > 1 and 0 < self.rho < 1 and 0 < self.shrink < 1):
            raise ValueError("simplex coefficients out of range")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    converged: bool
    best_history: list[float] = field(default_factory=list, repr=False)


def nelder_mead(f: Callable[[np.ndarray], float], x0, cfg: SimplexConfig = SimplexConfig()) -> SimplexResult:
    """Minimise ``f`` from ``x0`` with the classic Nelder-Mead simplex.

    Stops once both the vertex spread (max-norm distance to the best vertex)
    is within ``x_tol`` and the value spread within ``f_tol``, or after
    ``max_iters`` iterations (``converged=False``).
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    n = x0.size
    sim = np.empty((n + 1, n))
    sim[0] = x0
    for i in range(n):
        sim[i + 1] = x0
        sim[i + 1, i] += cfg.initial_step
    nfev = 0

    def call(x):
        nonlocal nfev
        nfev += 1
        v = float(f(x))
        if math.isnan(v):
            raise NumericFailureError(f"objective returned NaN at {x}")
        return v

    fs = np.array([call(x) for x in sim])
    history: list[float] = []
    converged = False
    it = 0
    while it < cfg.max_iters:
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        history.append(float(fs[0]))
        if np.max(np.abs(sim[1:] - sim[0])) <= cfg.x_tol and np.max(np.abs(fs[1:] - fs[0])) <= cfg.f_tol:
            converged = True
            break
        it += 1
        centroid = sim[:-1].mean(axis=0)
        xr = centroid + cfg.alpha * (centroid - sim[-1])
        fr = call(xr)
        if fr < fs[0]:
            xe = centroid + cfg.gamma * (xr - centroid)
            fe = call(xe)
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-1]:
            xc = centroid + cfg.rho * (xr - centroid)
            fc = call(xc)
            if fc <= fr:
                sim[-1], fs[-1] = xc, fc
                continue
        else:
            xc = centroid + cfg.rho * (sim[-1] - centroid)
            fc = call(xc)
            if fc < fs[-1]:
                sim[-1], fs[-1] = xc, fc
                continue
        for i in range(1, n + 1):
            sim[i] = sim[0] + cfg.shrink * (sim[i] - sim[0])
            fs[i] = call(sim[i])
    order = np.argsort(fs, kind="stable")
    sim, fs = sim[order], fs[order]
    if not converged:
        history.append(float(fs[0]))
    return SimplexResult(sim[0].copy(), float(fs[0]), it, nfev, converged, history)


# ------------------------------------------------------------------ cases


@dataclass(frozen=True)
class CaseConfig:
    pair: MixtureDomainPair
    lam: float
    eta: float = 10.0

    def __post_init__(self):
        if not (self.lam > 0 and self.eta > 0):
            raise ValueError("lambda and eta must be positive")


def _domain(mp, mn, v, sigma=1.0):
    return MixtureDomain(np.array(mp, float), np.array(mn, float), sigma, np.array(v, float))


def case_preset(case_id: int) -> CaseConfig:
    if case_id == 1:
        pair = MixtureDomainPair(_domain([-1, 1], [-1, -1], [0, 1]), _domain([1, 1], [1, -1], [0, 1]))
        return CaseConfig(pair, 1e-1)
    if case_id == 2:
        pair = MixtureDomainPair(_domain([-1, 1], [-1, -1], [0, 1]), _domain([1, -1], [1, 1], [0, -1]))
        return CaseConfig(pair, 1e-1)
    if case_id == 3:
        pair = MixtureDomainPair(_domain([0, 1], [0, -1], [0, 1]), _domain([-1, 0], [1, 0], [-1, 0]))
        return CaseConfig(pair, 1e-2)
    raise ValueError(f"unknown case id {case_id!r}; expected 1, 2 or 3")


def objective(params, cfg: CaseConfig, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Squared source loss + lambda * squared-L2 mismatch + eta * (|u|^2 - 1)^2."""
    p = np.asarray(params, dtype=np.float64)
    u = p[:2]
    s = label_params(cfg.pair.source, u)
    t = label_params(cfg.pair.target, u)
    z, w = spec.grid()
    sq, dm = K.objective_terms(z, w, s, t, p[2], p[3])
    return sq + cfg.lam * dm + cfg.eta * (u @ u - 1.0) ** 2


@dataclass(frozen=True)
class RestartOutcome:
    index: int
    u: tuple[float, float]
    a: float
    b: float
    objective: float
    e_T: float
    outcome: str
    converged: bool
    iterations: int

    @property
    def family(self) -> str:
        """Sign of ``u1`` (after canonicalisation ``u2 >= 0``)."""
        return "neg_u1" if self.u[0] < 0 else "pos_u1"


@dataclass
class CaseReport:
    best_params: LinearUdaModel
    objective: float
    bound_report: BoundReport
    outcome: str
    restart_outcomes: list[RestartOutcome]
    case_id: int | None = None

    def family_frequencies(self) -> dict[str, float]:
        conv = [r for r in self.restart_outcomes if r.converged]
        out = {"neg_u1": 0.0, "pos_u1": 0.0}
        for r in conv:
            out[r.family] += 1.0 / len(conv)
        return out

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "best_params": self.best_params.to_dict(),
            "objective": self.objective,
            "outcome": self.outcome,
            "bound_report": self.bound_report.to_dict(),
            "family_frequencies": self.family_frequencies(),
            "restarts": [
                {
                    "index": r.index,
                    "u": list(r.u),
                    "a": r.a,
                    "b": r.b,
                    "objective": r.objective,
                    "e_T": r.e_T,
                    "outcome": r.outcome,
                    "family": r.family,
                    "converged": r.converged,
                    "iterations": r.iterations,
                }
                for r in self.restart_outcomes
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def canonical(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    if x[1] < 0 or (x[1] == 0 and x[0] < 0):
        x[:3] = -x[:3]
    return x


def report_spec_for(pair: MixtureDomainPair, u, base: QuadratureSpec = DEFAULT_SPEC, refine: int = 10) -> QuadratureSpec:
    """Finer grid for the final measures; optima often carry a very steep ``h``."""
    return covering_spec(project_domain(pair.source, u), project_domain(pair.target, u), base=base.refined(refine))


def run_case(
    cfg: CaseConfig,
    restarts: int = 5,
    seed: int = 0,
    simplex: SimplexConfig = SimplexConfig(),
    spec: QuadratureSpec = DEFAULT_SPEC,
    case_id: int | None = None,
) -> CaseReport:
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    inits = []
    for _ in range(restarts):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        inits.append(np.array([np.cos(theta), np.sin(theta), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5)]))

    outcomes: list[RestartOutcome] = []
    finals: list[tuple[np.ndarray, BoundReport]] = []
    for i, x0 in enumerate(inits):
        res = nelder_mead(lambda p: objective(p, cfg, spec), x0, simplex)
        x = canonical(res.x)
        model = LinearUdaModel.from_vector(x)
        rep = evaluate_bounds(cfg.pair, model, report_spec_for(cfg.pair, model.u, spec))
        e_t = rep.measures.e_T_abs
        outcomes.append(
            RestartOutcome(
                i,
                (float(x[0]), float(x[1])),
                float(x[2]),
                float(x[3]),
                res.fun,
                e_t,
                "success" if e_t < SUCCESS_THRESHOLD else "failure",
                res.converged,
                res.iterations,
            )
        )
        finals.append((x, rep))
        log.debug("restart %d: u=%s f=%.3g e_T=%.4f converged=%s", i, x[:2], res.fun, e_t, res.converged)

    conv = [r for r in outcomes if r.converged]
    if not conv:
        raise ConvergenceError(f"none of {restarts} restarts converged")
    best = min(conv, key=lambda r: (r.objective, r.index))
    x, rep = finals[best.index]
    return CaseReport(LinearUdaModel.from_vector(x), best.objective, rep, best.outcome, outcomes, case_id)
