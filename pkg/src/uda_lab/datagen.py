"""Seeded finite datasets: two moons with an x-axis shift, and mixture samples.

All randomness comes from numpy's PCG64 bit generator. A master seed is
expanded with ``numpy.random.SeedSequence`` and split into one child stream
per generated dataset (``spawn``), so source and target draws never share
a stream.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domains import MixtureDomain

DOMAINS = ("source", "target")


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: int
    domain: str
    is_poison: bool = False


@dataclass
class Dataset:
    """Column-oriented labeled samples (``x`` is ``(n, d)``)."""

    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    is_poison: np.ndarray
    num_classes: int = 2
    skipped: list[str] = field(default_factory=list, repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            x = x.reshape(len(self.y), -1) if len(self.y) else np.zeros((0, 2))
        self.x = x
        self.y = np.asarray(self.y, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype="<U6")
        self.is_poison = np.asarray(self.is_poison, dtype=bool)
        n = len(self.y)
        if not (self.x.shape[0] == len(self.domain) == len(self.is_poison) == n):
            raise ValueError("dataset columns have mismatched lengths")
        if n and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label out of range")
        if np.any(self.is_poison & (self.domain != "source")):
            raise ValueError("poison samples must carry the source domain tag")

    @classmethod
    def build(cls, x, y, domain: str, is_poison: bool = False, num_classes: int = 2) -> "Dataset":
        n = len(y)
        return cls(np.asarray(x, dtype=np.float64).reshape(n, -1), y, np.full(n, domain), np.full(n, is_poison), num_classes)

    @classmethod
    def empty(cls, dim: int = 2, num_classes: int = 2) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros(0, "<U6"), np.zeros(0, bool), num_classes)

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self):
        for i in range(len(self)):
            yield LabeledSample(self.x[i].copy(), int(self.y[i]), str(self.domain[i]), bool(self.is_poison[i]))

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.domain[idx], self.is_poison[idx], self.num_classes)

    def concat(self, other: "Dataset") -> "Dataset":
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return Dataset(
            np.vstack([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            np.concatenate([self.domain, other.domain]),
            np.concatenate([self.is_poison, other.is_poison]),
            max(self.num_classes, other.num_classes),
        )

    def with_labels(self, y) -> "Dataset":
        return Dataset(self.x.copy(), np.asarray(y), self.domain.copy(), self.is_poison.copy(), self.num_classes)

    # -------------------------------------------------------------- CSV

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(self.dim)] + ["y", "domain", "is_poison"])
        for i in range(len(self)):
            w.writerow([repr(float(v)) for v in self.x[i]] + [int(self.y[i]), self.domain[i], int(self.is_poison[i])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="")
        return text

    @classmethod
    def from_csv(cls, path_or_text, num_classes: int | None = None) -> "Dataset":
        text = str(path_or_text)
        if "\n" not in text:
            text = Path(text).read_text(encoding="utf-8")
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty CSV")
        header = rows[0]
        xcols = [i for i, h in enumerate(header) if h.startswith("x")]
        try:
            iy, idom, ip = header.index("y"), header.index("domain"), header.index("is_poison")
        except ValueError:
            raise ValueError(f"CSV header missing required columns: {header}") from None
        body = [r for r in rows[1:] if r]
        x = np.array([[float(r[i]) for i in xcols] for r in body]).reshape(len(body), len(xcols))
        y = np.array([int(r[iy]) for r in body], dtype=np.int64)
        dom = np.array([r[idom] for r in body], dtype="<U6")
        poison = np.array([r[ip].strip().lower() in ("1", "true") for r in body], dtype=bool)
        k = num_classes if num_classes is not None else max(2, int(y.max()) + 1 if len(y) else 2)
        return cls(x, y, dom, poison, k)


@dataclass(frozen=True)
class MoonsConfig:
    n_per_domain: int = 500
    noise_sigma: float = 0.1
    shift: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_per_domain < 2 or self.n_per_domain % 2:
            raise ValueError("n_per_domain must be an even integer >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _moons(rng: np.random.Generator, n: int, noise: float):
    half = n // 2
    t0 = rng.uniform(0.0, np.pi, half)
    t1 = rng.uniform(0.0, np.pi, half)
    x = np.vstack(
        [
            np.column_stack([np.cos(t0), np.sin(t0)]),
            np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)]),
        ]
    )
    x = x + rng.normal(0.0, noise, size=x.shape) if noise > 0 else x
    y = np.repeat(np.array([0, 1]), half)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def gen_two_moons(cfg: MoonsConfig) -> tuple[Dataset, Dataset]:
    """Source moons and an independently drawn copy translated by ``(shift, 0)``."""
    s_rng, t_rng = (np.random.default_rng(c) for c in np.random.SeedSequence(cfg.seed).spawn(2))
    xs, ys = _moons(s_rng, cfg.n_per_domain, cfg.noise_sigma)
    xt, yt = _moons(t_rng, cfg.n_per_domain, cfg.noise_sigma)
    xt = xt + np.array([cfg.shift, 0.0])
    return Dataset.build(xs, ys, "source"), Dataset.build(xt, yt, "target")


def gen_mixture_samples(domain: MixtureDomain, n: int, seed: int, tag: str = "source") -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pos = rng.random(n) < 0.5
    means = np.where(pos[:, None], domain.mu_pos, domain.mu_neg)
    x = means + domain.sigma * rng.standard_normal((n, 2))
    return Dataset.build(x, domain.labels(x), tag)
