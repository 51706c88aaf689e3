"""Quadrature of the scalar quantities that enter the bounds.

Every measure is an integral over the 1-D feature axis evaluated on a fixed
composite grid. ``D_1`` is the unnormalised ``int |p - p'|`` (range [0, 2]).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Callable, Literal

import numpy as np
from scipy.optimize import brentq

from . import _kernels as K
from .domains import (
    InducedMixture1D,
    LinearUdaModel,
    MixtureDomain,
    MixtureDomainPair,
    label_params,
    project_domain,
)

COVERAGE_SIGMAS = 6.0


class NumericFailureError(ArithmeticError):
    pass


class RangeCoverageError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureSpec:
    lo: float = -12.0
    hi: float = 12.0
    nodes: int = 4001
    rule: Literal["trapezoid", "simpson"] = "simpson"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("QuadratureSpec requires lo < hi")
        if self.nodes < 101:
            raise ValueError("QuadratureSpec requires at least 101 nodes")
        if self.rule not in ("trapezoid", "simpson"):
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.rule == "simpson" and self.nodes % 2 == 0:
            raise ValueError("simpson rule needs an odd node count")

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and quadrature weights (read-only, cached per spec)."""
        return _grid(self)

    def refined(self, factor: int = 2) -> "QuadratureSpec":
        return QuadratureSpec(self.lo, self.hi, (self.nodes - 1) * factor + 1, self.rule)

    def covers(self, mixture: InducedMixture1D, n_sigma: float = COVERAGE_SIGMAS) -> bool:
        return all(self.lo <= m - n_sigma * mixture.sigma and m + n_sigma * mixture.sigma <= self.hi for m in mixture.means)


DEFAULT_SPEC = QuadratureSpec()


@lru_cache(maxsize=64)
def _grid(spec: QuadratureSpec):
    z = np.linspace(spec.lo, spec.hi, spec.nodes)
    h = (spec.hi - spec.lo) / (spec.nodes - 1)
    w = np.full(spec.nodes, h)
    if spec.rule == "trapezoid":
        w[0] = w[-1] = h / 2
    else:
        w[1:-1:2] = 4 * h / 3
        w[2:-1:2] = 2 * h / 3
        w[0] = w[-1] = h / 3
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


def covering_spec(*mixtures: InducedMixture1D, base: QuadratureSpec = DEFAULT_SPEC) -> QuadratureSpec:
    """``base`` if it already covers every mixture, else a widened grid with the same spacing.

    The widened grid is symmetric with z=0 on a panel boundary, where a
    degenerate induced label jumps.
    """
    if all(base.covers(m) for m in mixtures):
        return base
    reach = max(abs(base.lo), abs(base.hi), *(abs(mu) + (COVERAGE_SIGMAS + 2) * m.sigma for m in mixtures for mu in m.means))
    step = (base.hi - base.lo) / (base.nodes - 1)
    half = int(math.ceil(reach / step))
    half += half % 2
    return QuadratureSpec(-half * step, half * step, max(2 * half + 1, 101), base.rule)


def _auto(spec: QuadratureSpec | None, *mixtures: InducedMixture1D) -> QuadratureSpec:
    if spec is None:
        return covering_spec(*mixtures)
    _check_cover(spec, *mixtures)
    return spec


def _labels(z, *params):
    return [K.induced_label(z, p[0], p[1], p[2], p[3], p[4], p[5], int(p[6])) for p in params]


def _label_fn(p):
    """Induced label as ``f(z, side)``; ``side`` picks a one-sided limit at a z=0 jump."""

    def f(z, side=0):
        v = np.atleast_1d(np.asarray(K.induced_label(z, p[0], p[1], p[2], p[3], p[4], p[5], int(p[6])), dtype=np.float64)).copy()
        if side and abs(int(p[6])) == 2:
            v[np.atleast_1d(z) == 0.0] = K.step_limit(int(p[6]), side)
        return v

    return f


_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)
STEEP_LABEL_STEP = 0.02
STEEP_SUBPANELS = 16


def _panel_correction(spec: QuadratureSpec, dens: Callable, g: Callable, labels=(), shape: Callable = np.abs) -> float:
    """Error of the composite rule on ``int dens * shape(g)`` from panels it cannot resolve.

    Two kinds of panel are redone with subdivided Gauss-Legendre: those where
    ``g`` changes sign (the kink of ``|g|`` drops the composite rule to second
    order), split at the root, and those where one of ``labels`` moves by more
    than ``STEEP_LABEL_STEP`` (a near-step narrower than the grid), plus their
    neighbours. Returns the summed difference. ``g(z, side)`` follows the
    one-sided convention of ``_label_fn`` so a panel end at a z=0 jump uses
    its own limit.
    """
    z, _ = spec.grid()
    k = 2 if spec.rule == "simpson" else 1
    gz = g(z, 0)
    idx = np.arange(0, len(z) - 1, k)[:, None] + np.arange(k + 1)[None, :]
    gp = gz[idx]
    kinked = (gp.min(axis=1) < 0) & (gp.max(axis=1) > 0)
    steep = np.zeros_like(kinked)
    for f in labels:
        fp = f(z, 0)[idx]
        steep |= fp.max(axis=1) - fp.min(axis=1) > STEEP_LABEL_STEP
    steep[1:] |= steep[:-1].copy()
    steep[:-1] |= steep[1:].copy()
    hit = np.flatnonzero(kinked | steep)
    if hit.size == 0:
        return 0.0
    step = (spec.hi - spec.lo) / (spec.nodes - 1)
    local = step * (np.array([1.0, 4.0, 1.0]) / 3 if k == 2 else np.array([0.5, 0.5]))

    def gauss(a, b, pieces):
        e = np.linspace(a, b, pieces + 1)
        half = 0.5 * np.diff(e)[:, None]
        t = (e[:-1, None] + half * (_GL_X + 1)).ravel()
        return float(((half * _GL_W).ravel()) @ (dens(t) * shape(g(t, 0))))

    delta = 0.0
    for j in hit:
        zn = z[idx[j]]
        gn = gz[idx[j]].copy()
        gn[0], gn[-1] = g(zn[:1], 1)[0], g(zn[-1:], -1)[0]
        approx = float(local @ (dens(zn) * shape(gn)))
        cuts = [zn[0]]
        for a, b, ga, gb in zip(zn[:-1], zn[1:], gn[:-1], gn[1:]):
            if ga * gb < 0:
                cuts.append(brentq(lambda t: ga if t == a else gb if t == b else g(np.array([t]), 0)[0], a, b, xtol=1e-15))
        cuts.append(zn[-1])
        pieces = STEEP_SUBPANELS if steep[j] else 1
        delta += sum(gauss(a, b, pieces) for a, b in zip(cuts[:-1], cuts[1:])) - approx
    return delta

def _hyp_fn(model: LinearUdaModel):
    return lambda z, side=0: K.norm_cdf(model.a * np.asarray(z) + model.b)


def _label_gap(f, g):
    return lambda z, side=0: f(z, side) - g(z, side)


def _density_gap(pa: InducedMixture1D, pb: InducedMixture1D):
    return lambda z, side=0: pa.pdf(z) - pb.pdf(z)


def _check_cover(spec: QuadratureSpec, *mixtures: InducedMixture1D) -> None:
    for m in mixtures:
        if not spec.covers(m):
            raise RangeCoverageError(
                f"quadrature range [{spec.lo}, {spec.hi}] does not cover {COVERAGE_SIGMAS} sigma "
                f"around means {m.means} (sigma={m.sigma})"
            )


def _finite(x: float, what: str) -> float:
    if not math.isfinite(x):
        raise NumericFailureError(f"{what} is not finite ({x!r})")
    return x


def integrate(f: Callable[[np.ndarray], np.ndarray], spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    z, w = spec.grid()
    vals = np.asarray(f(z), dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise NumericFailureError("integrand produced NaN/Inf")
    return float(w @ np.broadcast_to(vals, z.shape))


@dataclass(frozen=True)
class MeasureSet:
    e_S_sq: float
    e_S_abs: float
    e_T_abs: float
    mismatch_S: float
    mismatch_T: float
    tv: float
    mismatch_sq: float
    kl: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeasureSet":
        return cls(**{k: float(d[k]) for k in cls.__dataclass_fields__})


# ------------------------------------------------------------ single measures


# ``spec=None`` everywhere below means: the default grid, widened to cover the inputs.


def abs_error(model: LinearUdaModel, domain: MixtureDomain, u=None, spec: QuadratureSpec | None = None) -> float:
    """``E_z |f~(z) - h(z)|`` under the domain's induced density."""
    u = model.u if u is None else np.asarray(u, dtype=np.float64)
    mix = project_domain(domain, u)
    spec = _auto(spec, mix)
    z, w = spec.grid()
    p = label_params(domain, u)
    dens = mix.pdf(z)
    h = K.norm_cdf(model.a * z + model.b)
    vals = K.jump_average(z, lambda f: dens * np.abs(f - h), _labels(z, p), [p])
    fp = _label_fn(p)
    fix = _panel_correction(spec, mix.pdf, _label_gap(fp, _hyp_fn(model)), [fp])
    return _finite(float(w @ vals) + fix, "abs_error")


def sq_source_loss(model: LinearUdaModel, source: MixtureDomain, u=None, spec: QuadratureSpec | None = None) -> float:
    u = model.u if u is None else np.asarray(u, dtype=np.float64)
    mix = project_domain(source, u)
    spec = _auto(spec, mix)
    z, w = spec.grid()
    p = label_params(source, u)
    dens = mix.pdf(z)
    h = K.norm_cdf(model.a * z + model.b)
    vals = K.jump_average(z, lambda f: dens * (h - f) ** 2, _labels(z, p), [p])
    fp = _label_fn(p)
    fix = _panel_correction(spec, mix.pdf, _label_gap(fp, _hyp_fn(model)), [fp], np.square)
    return _finite(float(w @ vals) + fix, "sq_source_loss")


def label_mismatch(weighting: Literal["source", "target"], u, pair: MixtureDomainPair, spec: QuadratureSpec | None = None) -> float:
    """``E_z |f~_S(z) - f~_T(z)|`` with z drawn from the chosen induced density."""
    if weighting not in ("source", "target"):
        raise ValueError(f"weighting must be 'source' or 'target', got {weighting!r}")
    u = np.asarray(u, dtype=np.float64)
    ms, mt = project_domain(pair.source, u), project_domain(pair.target, u)
    spec = _auto(spec, ms, mt)
    z, w = spec.grid()
    ps, pt = label_params(pair.source, u), label_params(pair.target, u)
    mix = ms if weighting == "source" else mt
    dens = mix.pdf(z)
    vals = K.jump_average(z, lambda f, g: dens * np.abs(f - g), _labels(z, ps, pt), [ps, pt])
    fs, ft = _label_fn(ps), _label_fn(pt)
    fix = _panel_correction(spec, mix.pdf, _label_gap(fs, ft), [fs, ft])
    return _finite(float(w @ vals) + fix, "label_mismatch")


def total_variation(pa: InducedMixture1D, pb: InducedMixture1D, spec: QuadratureSpec | None = None) -> float:
    spec = _auto(spec, pa, pb)
    z, w = spec.grid()
    fix = _panel_correction(spec, np.ones_like, _density_gap(pa, pb))
    return _finite(float(w @ np.abs(pa.pdf(z) - pb.pdf(z))) + fix, "total_variation")


def sq_density_mismatch(pa: InducedMixture1D, pb: InducedMixture1D, spec: QuadratureSpec | None = None) -> float:
    z, w = _auto(spec, pa, pb).grid()
    return _finite(float(w @ (pa.pdf(z) - pb.pdf(z)) ** 2), "sq_density_mismatch")


def kl_divergence(pa: InducedMixture1D, pb: InducedMixture1D, spec: QuadratureSpec | None = None) -> float:
    """``KL(pa || pb)``; integrand dropped where ``pa`` < 1e-300."""
    z, w = _auto(spec, pa, pb).grid()
    la, lb = pa.logpdf(z), pb.logpdf(z)
    pdf_a = np.exp(la)
    integrand = np.where(pdf_a < K.KL_CLAMP, 0.0, pdf_a * (la - lb))
    return _finite(float(w @ integrand), "kl_divergence")


# ------------------------------------------------------------ all at once


def compute_measures(pair: MixtureDomainPair, model: LinearUdaModel, spec: QuadratureSpec | None = None) -> MeasureSet:
    """Every measure for ``model`` on ``pair`` in one fused pass.

    With ``spec=None`` the default grid is widened as needed to cover both
    induced mixtures.
    """
    ms, mt = project_domain(pair.source, model.u), project_domain(pair.target, model.u)
    spec = _auto(spec, ms, mt)
    z, w = spec.grid()
    ps, pt = label_params(pair.source, model.u), label_params(pair.target, model.u)
    vals = list(K.measure_terms(z, w, ps, pt, model.a, model.b))
    fs, ft, h = _label_fn(ps), _label_fn(pt), _hyp_fn(model)
    fixes = {
        0: (ms.pdf, _label_gap(fs, h), [fs], np.square),
        1: (ms.pdf, _label_gap(fs, h), [fs], np.abs),
        2: (mt.pdf, _label_gap(ft, h), [ft], np.abs),
        3: (ms.pdf, _label_gap(fs, ft), [fs, ft], np.abs),
        4: (mt.pdf, _label_gap(fs, ft), [fs, ft], np.abs),
        5: (np.ones_like, _density_gap(ms, mt), [], np.abs),
    }
    for i, (dens, g, labels, shape) in fixes.items():
        vals[i] += _panel_correction(spec, dens, g, labels, shape)
    for name, v in zip(MeasureSet.__dataclass_fields__, vals):
        _finite(v, name)
    return MeasureSet(*(float(v) for v in vals))
