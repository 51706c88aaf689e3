"""Two-component Gaussian-mixture domains and their 1-D linear projections.

Conventions used throughout the package:

* ``u_perp`` is the -90 degree rotation of ``u``: ``(u2, -u1)``. With this
  orientation the intersection coordinate ``q = (u.v)/(u1 v2 - u2 v1) * z`` is
  exactly the ``u_perp`` coordinate of the point where the line ``u.x = z``
  crosses the decision boundary ``v.x = 0``.
* The induced labeling function is the exact conditional expectation
  ``E[f(x) | u.x = z]``. Conditioning on ``z`` reweights the two mixture
  components by their posterior responsibilities, so each component's
  halfspace probability is weighted by ``r_c(z)`` rather than a flat 0.5.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K

DEGENERATE_TOL = 1e-9
UNIT_TOL = 1e-12


class InvalidInputError(ValueError):
    pass


class DegenerateBranchError(ArithmeticError):
    """``u`` is parallel to the labeling normal; use the sign(z) branch."""


def _vec2(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape != (2,):
        raise InvalidInputError(f"{name} must be a 2-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class MixtureDomain:
    """Equal-weight mixture of two isotropic Gaussians labeled by a halfspace."""

    mu_pos: np.ndarray
    mu_neg: np.ndarray
    sigma: float
    label_normal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu_pos", _vec2(self.mu_pos, "mu_pos"))
        object.__setattr__(self, "mu_neg", _vec2(self.mu_neg, "mu_neg"))
        v = _vec2(self.label_normal, "label_normal")
        if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise InvalidInputError(f"label_normal must be unit length, got norm {np.linalg.norm(v)!r}")
        object.__setattr__(self, "label_normal", v)
        sigma = float(self.sigma)
        if not sigma > 0 or not math.isfinite(sigma):
            raise InvalidInputError(f"sigma must be positive, got {self.sigma!r}")
        object.__setattr__(self, "sigma", sigma)

    def labels(self, x: np.ndarray) -> np.ndarray:
        """True labeling I[v.x > 0] for an (n, 2) array."""
        return (np.asarray(x) @ self.label_normal > 0).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "mu_pos": self.mu_pos.tolist(),
            "mu_neg": self.mu_neg.tolist(),
            "sigma": self.sigma,
            "label_normal": self.label_normal.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureDomain":
        try:
            return cls(d["mu_pos"], d["mu_neg"], d["sigma"], d["label_normal"])
        except KeyError as exc:
            raise InvalidInputError(f"missing domain key {exc}") from None


@dataclass(frozen=True)
class MixtureDomainPair:
    source: MixtureDomain
    target: MixtureDomain

    def to_dict(self) -> dict:
        return {"source": self.source.to_dict(), "target": self.target.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureDomainPair":
        try:
            return cls(MixtureDomain.from_dict(d["source"]), MixtureDomain.from_dict(d["target"]))
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed domain pair: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MixtureDomainPair":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class LinearUdaModel:
    """Projection ``g(x) = u.x`` followed by ``h(z) = Phi(a z + b)``."""

    u: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        object.__setattr__(self, "u", _vec2(self.u, "u"))
        a, b = float(self.a), float(self.b)
        if not (math.isfinite(a) and math.isfinite(b)):
            raise InvalidInputError("a and b must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_vector(cls, p) -> "LinearUdaModel":
        p = np.asarray(p, dtype=np.float64)
        return cls(p[:2], p[2], p[3])

    def to_vector(self) -> np.ndarray:
        return np.array([self.u[0], self.u[1], self.a, self.b])

    def to_dict(self) -> dict:
        return {"u": self.u.tolist(), "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearUdaModel":
        try:
            return cls(d["u"], d["a"], d["b"])
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed model: {exc}") from None


@dataclass(frozen=True)
class InducedMixture1D:
    means: tuple[float, float]
    sigma: float
    weights: tuple[float, float] = (0.5, 0.5)

    def pdf(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        return np.exp(K.mixture_logpdf(z, self.means[0], self.means[1], self.sigma))

    def logpdf(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        return K.mixture_logpdf(z, self.means[0], self.means[1], self.sigma)


def perp(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.array([u[1], -u[0]])


def project_domain(domain: MixtureDomain, u) -> InducedMixture1D:
    """Push the domain through ``z = u.x``.

    The induced sigma equals the input sigma, which is exact only for unit ``u``.
    """
    u = _vec2(u, "u")
    if not np.linalg.norm(u) > 0:
        raise InvalidInputError("projection direction u must be non-zero")
    return InducedMixture1D((float(u @ domain.mu_pos), float(u @ domain.mu_neg)), domain.sigma)


def intersection_coord(u, v, z: float) -> float:
    u = _vec2(u, "u")
    v = _vec2(v, "v")
    den = u[0] * v[1] - u[1] * v[0]
    if abs(den) < DEGENERATE_TOL:
        raise DegenerateBranchError("u is parallel to the labeling normal")
    return float((u[0] * v[0] + u[1] * v[1]) / den * z)


def label_params(domain: MixtureDomain, u) -> np.ndarray:
    """Pack the kernel parameters for ``induced_label``.

    Layout: [m_pos, m_neg, w_pos, w_neg, sigma, slope, branch] where ``m`` are
    the component means along ``u``, ``w`` along ``u_perp`` and ``q = slope*z``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = domain.label_normal
    up = perp(u)
    vp = float(v @ up)
    vu = float(v @ u)
    if abs(vp) < DEGENERATE_TOL:
        branch = 2 if vu > 0 else -2
        slope = 0.0
    else:
        branch = 1 if vp > 0 else -1
        slope = vu / (u[0] * v[1] - u[1] * v[0])
    return np.array(
        [
            u @ domain.mu_pos,
            u @ domain.mu_neg,
            up @ domain.mu_pos,
            up @ domain.mu_neg,
            domain.sigma,
            slope,
            float(branch),
        ]
    )


def induced_label_fn(domain: MixtureDomain, u, z):
    """Induced labeling ``E[I[v.x > 0] | u.x = z]``; scalar in, scalar out."""
    u = _vec2(u, "u")
    if not np.linalg.norm(u) > 0:
        raise InvalidInputError("projection direction u must be non-zero")
    p = label_params(domain, u)
    zz = np.atleast_1d(np.asarray(z, dtype=np.float64))
    out = K.induced_label(zz, p[0], p[1], p[2], p[3], p[4], p[5], int(p[6]))
    return float(out[0]) if np.ndim(z) == 0 else out


def hypothesis_eval(model: LinearUdaModel, z):
    zz = np.atleast_1d(np.asarray(z, dtype=np.float64))
    out = K.norm_cdf(model.a * zz + model.b)
    return float(out[0]) if np.ndim(z) == 0 else out
