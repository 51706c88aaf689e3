"""Poisoned-dataset generators and attack evaluation.

Three families:

* wrong-label: samples drawn from the source or target pool and relabeled;
* watermark: ``p = alpha * t + (1 - alpha) * s`` with ``s`` the nearest
  same-class source sample to a target sample ``t``, wrongly labeled;
* clean-label: bounded perturbations of correctly labeled bases, optimised in
  alternation with victim training so the victim's representation of the
  poisons collides with that of one target test point.

Every poison carries the ``source`` domain tag and ``is_poison=True``; fraction
budgets are relative to the target-set size.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .datagen import Dataset
from .nnkit import (
    MlpUdaModel,
    TrainConfig,
    TrainingDivergedError,
    UdaMethod,
    UdaTrainer,
    mlp_backward,
    mlp_forward,
    train_uda,
)

log = logging.getLogger(__name__)


class InfeasiblePoisonError(ValueError):
    pass


class Pool(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class LabelScheme(str, enum.Enum):
    NEXT_CLASS = "next_class"
    NEAREST_INCORRECT = "nearest_incorrect_class"


class Norm(str, enum.Enum):
    LINF = "l_inf"
    L2 = "l2"


# ------------------------------------------------------------------ labeling


def next_class_label(y: int, k: int) -> int:
    if k < 2:
        raise ValueError("need at least two classes")
    if not 0 <= y < k:
        raise ValueError(f"label {y} outside [0, {k})")
    return (y + 1) % k


def class_centroids(model: MlpUdaModel, data: Dataset) -> dict[int, np.ndarray]:
    """Per-class mean representation ``g(x)`` under ``model``."""
    g = model.features(data.x)
    return {c: g[data.y == c].mean(axis=0) for c in np.unique(data.y).tolist()}


def nearest_incorrect_class_label(x, model: MlpUdaModel | None, centroids: dict[int, np.ndarray], y: int, k: int) -> int:
    """Closest centroid (in representation space) among classes other than ``y``.

    ``model=None`` means ``x`` is already a representation. Ties go to the
    lowest class index.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    missing = [c for c in range(k) if c != y and c not in centroids]
    if missing:
        raise ValueError(f"missing centroids for classes {missing}")
    z = np.asarray(x, dtype=np.float64)
    if model is not None:
        z = model.features(z.reshape(1, -1))[0]
    best, best_d = -1, math.inf
    for c in range(k):
        if c == y:
            continue
        d = float(np.linalg.norm(z - centroids[c]))
        if d < best_d:
            best, best_d = c, d
    return best


def _relabel(x: np.ndarray, y: np.ndarray, k: int, scheme: LabelScheme, model, centroids) -> np.ndarray:
    if scheme is LabelScheme.NEXT_CLASS:
        return np.array([next_class_label(int(v), k) for v in y], dtype=np.int64)
    if model is None or centroids is None:
        raise ValueError("nearest_incorrect_class needs a reference model and centroids")
    return np.array([nearest_incorrect_class_label(xi, model, centroids, int(v), k) for xi, v in zip(x, y)], dtype=np.int64)


# ------------------------------------------------------------------ specs


@dataclass(frozen=True)
class WrongLabelSpec:
    sample_from: Pool = Pool.TARGET
    fraction: float = 0.10
    scheme: LabelScheme = LabelScheme.NEXT_CLASS

    def __post_init__(self):
        object.__setattr__(self, "sample_from", Pool(self.sample_from))
        object.__setattr__(self, "scheme", LabelScheme(self.scheme))
        if not 0 <= self.fraction <= 1:
            raise ValueError("fraction must be in [0, 1]")


@dataclass(frozen=True)
class WatermarkSpec:
    alpha: float = 0.3
    fraction: float = 0.10
    scheme: LabelScheme = LabelScheme.NEXT_CLASS

    def __post_init__(self):
        object.__setattr__(self, "scheme", LabelScheme(self.scheme))
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if not 0 <= self.fraction <= 1:
            raise ValueError("fraction must be in [0, 1]")


def poison_count(fraction: float, target: Dataset) -> int:
    # Python's round: half to even
    return int(round(fraction * len(target)))


def _poison_dataset(x: np.ndarray, y: np.ndarray, k: int) -> Dataset:
    n = len(y)
    return Dataset(np.asarray(x, dtype=np.float64).reshape(n, -1), y, np.full(n, "source"), np.ones(n, bool), k)


def make_wrong_label_poison(source: Dataset, target: Dataset, spec: WrongLabelSpec, seed: int, model: MlpUdaModel | None = None, centroids=None) -> Dataset:
    """Mislabeled copies of ``round(fraction * |target|)`` pool samples (without replacement)."""
    if len(source) == 0 or len(target) == 0:
        raise ValueError("source and target must be non-empty")
    pool = source if spec.sample_from is Pool.SOURCE else target
    n = poison_count(spec.fraction, target)
    if n > len(pool):
        raise InfeasiblePoisonError(f"{n} poisons requested from a pool of {len(pool)}")
    k = max(source.num_classes, target.num_classes)
    if n == 0:
        return Dataset.empty(pool.dim, k)
    idx = np.sort(np.random.default_rng(np.random.SeedSequence(seed)).choice(len(pool), n, replace=False))
    x = pool.x[idx].copy()
    return _poison_dataset(x, _relabel(x, pool.y[idx], k, spec.scheme, model, centroids), k)


def make_watermark_poison(source: Dataset, target: Dataset, spec: WatermarkSpec, seed: int, model: MlpUdaModel | None = None, centroids=None) -> Dataset:
    """Blend selected target samples into their nearest same-class source sample.

    Target samples without any same-class source sample are skipped and listed
    in the returned dataset's ``skipped`` field.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("source and target must be non-empty")
    n = poison_count(spec.fraction, target)
    if n > len(target):
        raise InfeasiblePoisonError(f"{n} poisons requested from a pool of {len(target)}")
    k = max(source.num_classes, target.num_classes)
    if n == 0:
        return Dataset.empty(target.dim, k)
    idx = np.sort(np.random.default_rng(np.random.SeedSequence(seed)).choice(len(target), n, replace=False))
    xs, ys, skipped = [], [], []
    for i in idx.tolist():
        t, yt = target.x[i], int(target.y[i])
        same = np.flatnonzero(source.y == yt)
        if same.size == 0:
            skipped.append(f"target[{i}]: no source sample of class {yt}")
            continue
        d = np.sum((source.x[same] - t) ** 2, axis=1)
        s = source.x[same[int(np.argmin(d))]]
        xs.append(spec.alpha * t + (1.0 - spec.alpha) * s)
        ys.append(yt)
    if not xs:
        out = Dataset.empty(target.dim, k)
    else:
        x = np.array(xs)
        out = _poison_dataset(x, _relabel(x, np.array(ys), k, spec.scheme, model, centroids), k)
    out.skipped = skipped
    return out


# ------------------------------------------------------------------ clean-label


def project_to_ball(candidate, base, eps: float, norm: Norm | str = Norm.LINF) -> np.ndarray:
    """Nearest point to ``candidate`` inside the ``eps``-ball around ``base``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    c = np.asarray(candidate, dtype=np.float64)
    b = np.asarray(base, dtype=np.float64)
    if Norm(norm) is Norm.LINF:
        return np.clip(c, b - eps, b + eps)
    d = c - b
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    scale = np.where(r > eps, eps / np.where(r > 0, r, 1.0), 1.0)
    return b + d * scale


@dataclass(frozen=True)
class CleanLabelSpec:
    eps: float = 0.1
    norm: Norm = Norm.LINF
    n_poison: int = 5
    base_from: Pool = Pool.TARGET
    target_test_index: int = 0
    outer_iters: int = 200
    attacker_step: float = 0.05
    reinit_points: tuple[int, ...] | None = None  # None: quarter points of outer_iters

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm(self.norm))
        object.__setattr__(self, "base_from", Pool(self.base_from))
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.n_poison < 1 or self.outer_iters < 1:
            raise ValueError("n_poison and outer_iters must be >= 1")
        if self.attacker_step <= 0:
            raise ValueError("attacker_step must be positive")

    def reinit_schedule(self) -> tuple[int, ...]:
        if self.reinit_points is not None:
            return tuple(sorted(set(int(p) for p in self.reinit_points)))
        return tuple(sorted({self.outer_iters // 4, self.outer_iters // 2, (3 * self.outer_iters) // 4} - {0}))


def collision_objective(model: MlpUdaModel, x_test: np.ndarray, u: np.ndarray) -> float:
    g_t = model.features(x_test.reshape(1, -1))
    g_u = model.features(u)
    return float(np.sum((g_u - g_t) ** 2))


def collision_grad(model: MlpUdaModel, x_test: np.ndarray, u: np.ndarray) -> tuple[float, np.ndarray]:
    """``sum_i |g(x_test) - g(u_i)|^2`` and its gradient w.r.t. every ``u_i``."""
    g_t = model.features(x_test.reshape(1, -1))
    acts = mlp_forward(model.feature, u)
    diff = acts.out - g_t
    _, gx = mlp_backward(model.feature, acts, 2.0 * diff)
    return float(np.sum(diff**2)), gx


class PoisonUpdate(Protocol):
    """One attacker update: returns the new (already projected) poisons.

    The default is :class:`ProjectedGradientStep`. A bilevel strategy that
    differentiates through victim training would plug in here.
    """

    def __call__(self, model: MlpUdaModel, x_test: np.ndarray, u: np.ndarray, bases: np.ndarray, spec: CleanLabelSpec) -> np.ndarray: ...


class ProjectedGradientStep:
    """Fixed-step descent on the collision objective, then projection.

    The step is backtracked (halved, up to ``max_halvings`` times) until the
    objective does not increase, so successive attacker steps against an
    unchanged victim are monotone. If no halving helps, poisons stay put.
    """

    def __init__(self, max_halvings: int = 20):
        self.max_halvings = max_halvings

    def __call__(self, model, x_test, u, bases, spec):
        f0, g = collision_grad(model, x_test, u)
        step = spec.attacker_step
        for _ in range(self.max_halvings + 1):
            cand = project_to_ball(u - step * g, bases, spec.eps, spec.norm)
            if collision_objective(model, x_test, cand) <= f0:
                return cand
            step *= 0.5
        return u.copy()


@dataclass
class CleanLabelTrace:
    objective_before: list[float] = field(default_factory=list)
    objective_after: list[float] = field(default_factory=list)
    reinit_at: list[int] = field(default_factory=list)
    failed: bool = False
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "objective_before": self.objective_before,
            "objective_after": self.objective_after,
            "reinit_at": self.reinit_at,
            "failed": self.failed,
            "message": self.message,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def select_bases(pool: Dataset, x_test: np.ndarray, y_test: int, n: int) -> np.ndarray:
    """Indices of the ``n`` pool samples nearest ``x_test`` whose class differs from ``y_test``."""
    cand = np.flatnonzero(pool.y != y_test)
    if cand.size < n:
        raise InfeasiblePoisonError(f"only {cand.size} opposite-class bases available, need {n}")
    d = np.sum((pool.x[cand] - x_test) ** 2, axis=1)
    order = np.lexsort((cand, d))
    return cand[order[:n]]


def clean_label_alternate(
    spec: CleanLabelSpec,
    victim_method,
    source: Dataset,
    target: Dataset,
    cfg: TrainConfig,
    seed: int,
    update: PoisonUpdate | None = None,
) -> tuple[Dataset, CleanLabelTrace]:
    """Alternate one victim epoch and one attacker step for ``outer_iters`` rounds.

    The victim trains on source plus the current poisons and the unlabeled
    target set; ``target.y[target_test_index]`` is read only to pick bases from
    the opposite class. Poisons keep their bases' labels.
    """
    if not 0 <= spec.target_test_index < len(target):
        raise ValueError("target_test_index out of range")
    update = update or ProjectedGradientStep()
    x_test = target.x[spec.target_test_index]
    y_test = int(target.y[spec.target_test_index])
    pool = source if spec.base_from is Pool.SOURCE else target
    base_idx = select_bases(pool, x_test, y_test, spec.n_poison)
    bases = pool.x[base_idx].copy()
    labels = pool.y[base_idx].copy()
    k = max(source.num_classes, target.num_classes)
    u = bases.copy()

    reinit = set(spec.reinit_schedule())
    seeds = np.random.SeedSequence(seed).generate_state(len(reinit) + 1)
    trainer = UdaTrainer(victim_method, cfg, int(seeds[0]), source.dim, k)
    trace = CleanLabelTrace()
    n_reinit = 0
    for it in range(spec.outer_iters):
        if it in reinit:
            n_reinit += 1
            trainer.reset(int(seeds[n_reinit]))
            trace.reinit_at.append(it)
        xs = np.vstack([source.x, u])
        ys = np.concatenate([source.y, labels])
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                trainer.train_epoch(xs, ys, target.x)
        except FloatingPointError as exc:
            trace.failed, trace.message = True, f"victim diverged at outer iteration {it}: {exc}"
            break
        before = collision_objective(trainer.model, x_test, u)
        u = update(trainer.model, x_test, u, bases, spec)
        trace.objective_before.append(before)
        trace.objective_after.append(collision_objective(trainer.model, x_test, u))
    return _poison_dataset(u, labels, k), trace


# ------------------------------------------------------------------ evaluation


@dataclass(frozen=True)
class AttackResult:
    success_rate: float
    successes: int
    evaluated: int
    diverged: int

    def to_dict(self) -> dict:
        return {"success_rate": self.success_rate, "successes": self.successes, "evaluated": self.evaluated, "diverged": self.diverged}


def attack_eval(
    poisons: Dataset,
    victim_method,
    source: Dataset,
    target: Dataset,
    test_index: int,
    retrain_seeds: Sequence[int],
    cfg: TrainConfig = TrainConfig(),
) -> AttackResult:
    """Retrain from scratch on ``source + poisons`` per seed; success = test point misclassified.

    Diverged runs are excluded from the rate and counted separately.
    """
    if not retrain_seeds:
        raise ValueError("need at least one retrain seed")
    train = source.concat(poisons)
    x_test = target.x[test_index : test_index + 1]
    y_test = int(target.y[test_index])
    wins = evaluated = diverged = 0
    for s in retrain_seeds:
        try:
            rep = train_uda(victim_method, train, target, cfg, seed=int(s))
        except TrainingDivergedError:
            diverged += 1
            continue
        evaluated += 1
        wins += int(rep.model.predict(x_test)[0] != y_test)
    rate = wins / evaluated if evaluated else float("nan")
    return AttackResult(rate, wins, evaluated, diverged)


def success_rate(outcomes: Sequence[bool]) -> float:
    if not outcomes:
        raise ValueError("no outcomes")
    return sum(bool(o) for o in outcomes) / len(outcomes)
