"""Small numpy MLPs with hand-written backprop and four desk-scale UDA trainers.

Networks (inputs are row vectors, weights are ``(fan_in, fan_out)``)::

    feature extractor   2 -> 16 -> 16      relu on every layer
    classifier          16 -> 2            logits
    discriminator       16 -> 8 -> 2       (CDAN: 16*2 -> 8 -> 2)
    MCD classifiers     16 -> 8 -> 2       two independent heads

All losses are batch-mean softmax cross-entropies except the MCD
discrepancy (batch-mean L1 distance between class-probability vectors).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import Dataset

MAX_CONDITION_DIM = 4096


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg: str, report: "TrainReport"):
        super().__init__(msg)
        self.report = report


class UdaMethod(str, enum.Enum):
    SOURCE_ONLY = "source"
    DANN = "dann"
    CDAN = "cdan"
    MCD = "mcd"

    @classmethod
    def parse(cls, name) -> "UdaMethod":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        aliases = {"source": cls.SOURCE_ONLY, "sourceonly": cls.SOURCE_ONLY, "dann": cls.DANN, "cdan": cls.CDAN, "mcd": cls.MCD}
        if key not in aliases:
            raise ValueError(f"unknown UDA method {name!r}")
        return aliases[key]


# ------------------------------------------------------------------ MLP


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    activate_output: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation, self.activate_output)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases], self.activation, self.activate_output)

    def to_dict(self) -> dict:
        # layer-major, each weight row-major
        return {
            "sizes": self.sizes,
            "activation": self.activation,
            "activate_output": self.activate_output,
            "layers": [{"w": w.ravel().tolist(), "b": b.tolist()} for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        sizes = d["sizes"]
        ws, bs = [], []
        for i, layer in enumerate(d["layers"]):
            ws.append(np.array(layer["w"], dtype=np.float64).reshape(sizes[i], sizes[i + 1]))
            bs.append(np.array(layer["b"], dtype=np.float64))
        return cls(ws, bs, d["activation"], d["activate_output"])


def init_mlp(sizes, rng: np.random.Generator, activation: str = "relu", activate_output: bool = False) -> MlpParams:
    """He-uniform weights, zero biases."""
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / fan_in)
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs, activation, activate_output)


@dataclass
class Activations:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer
    out: np.ndarray


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def mlp_forward(params: MlpParams, x: np.ndarray) -> Activations:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"input shape {x.shape} does not match first layer width {params.weights[0].shape[0]}")
    inputs, pre = [], []
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w + b
        pre.append(z)
        a = _act(z, params.activation) if (i < last or params.activate_output) else z
    return Activations(inputs, pre, a)


def mlp_backward(params: MlpParams, acts: Activations, grad_out: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Gradients of a scalar loss given ``dL/d(out)``; returns (param grads, dL/d(input))."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != acts.out.shape:
        raise ValueError(f"upstream gradient {g.shape} does not match output {acts.out.shape}")
    grads = params.zeros_like()
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i < last or params.activate_output:
            out_i = acts.inputs[i + 1] if i < last else acts.out
            g = g * _act_grad(acts.pre[i], out_i, params.activation)
        grads.weights[i] = acts.inputs[i].T @ g
        grads.biases[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, g


# ------------------------------------------------------------------ loss pieces


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - (grad_probs * probs).sum(axis=1, keepdims=True))


def grl_forward(x):
    return x


def grl_backward(upstream: np.ndarray, coeff: float) -> np.ndarray:
    if coeff < 0:
        raise ValueError("gradient-reversal coefficient must be non-negative")
    return -coeff * upstream


def cdan_condition(features: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Row-wise flattened outer product ``f p^T`` (index ``i*k + j``)."""
    f = np.atleast_2d(features)
    p = np.atleast_2d(probs)
    if f.shape[0] != p.shape[0]:
        raise ValueError("features and probs batch sizes differ")
    d, k = f.shape[1], p.shape[1]
    if d * k > MAX_CONDITION_DIM:
        raise ValueError(f"conditioned dimension {d * k} exceeds {MAX_CONDITION_DIM}")
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("class probabilities must sum to 1")
    out = (f[:, :, None] * p[:, None, :]).reshape(f.shape[0], d * k)
    return out[0] if np.ndim(features) == 1 else out


def cdan_condition_backward(grad: np.ndarray, features: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``features`` (probabilities are treated as constants)."""
    n, d = features.shape
    return (grad.reshape(n, d, probs.shape[1]) * probs[:, None, :]).sum(axis=2)


def mcd_discrepancy(p1: np.ndarray, p2: np.ndarray) -> float:
    if p1.shape != p2.shape:
        raise ValueError(f"shape mismatch {p1.shape} vs {p2.shape}")
    return float(np.abs(p1 - p2).sum(axis=1).mean())


def mcd_discrepancy_grad(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``p1`` (w.r.t. ``p2`` it is the negative)."""
    return np.sign(p1 - p2) / p1.shape[0]


# ------------------------------------------------------------------ UDA model


@dataclass
class MlpUdaModel:
    """Named sub-networks; absent ones are ``None``."""

    feature: MlpParams
    classifier: MlpParams
    discriminator: MlpParams | None = None
    classifier2: MlpParams | None = None

    def parts(self) -> dict[str, MlpParams]:
        return {k: v for k, v in (("feature", self.feature), ("classifier", self.classifier), ("discriminator", self.discriminator), ("classifier2", self.classifier2)) if v is not None}

    def copy(self) -> "MlpUdaModel":
        return MlpUdaModel(**{k: v.copy() for k, v in self.parts().items()})

    def zeros_like(self) -> "MlpUdaModel":
        return MlpUdaModel(**{k: v.zeros_like() for k, v in self.parts().items()})

    def arrays(self) -> list[np.ndarray]:
        return [a for p in self.parts().values() for a in p.arrays()]

    def features(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.feature, x).out

    def logits(self, x: np.ndarray) -> np.ndarray:
        f = self.features(x)
        out = mlp_forward(self.classifier, f).out
        if self.classifier2 is not None:
            # MCD prediction: average the two heads' probabilities
            p = 0.5 * (softmax(out) + softmax(mlp_forward(self.classifier2, f).out))
            return np.log(np.maximum(p, 1e-300))
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        # argmax returns the lowest index on ties
        return np.argmax(self.logits(x), axis=1)

    def to_dict(self) -> dict:
        return {k: v.to_dict() for k, v in self.parts().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpUdaModel":
        return cls(**{k: MlpParams.from_dict(v) for k, v in d.items()})


def build_model(method: UdaMethod, rng: np.random.Generator, hidden=(16, 16), head_hidden: int = 8, in_dim: int = 2, k: int = 2) -> MlpUdaModel:
    method = UdaMethod.parse(method)
    feat_dim = hidden[-1]
    feature = init_mlp([in_dim, *hidden], rng, activate_output=True)
    if method is UdaMethod.MCD:
        return MlpUdaModel(feature, init_mlp([feat_dim, head_hidden, k], rng), classifier2=init_mlp([feat_dim, head_hidden, k], rng))
    classifier = init_mlp([feat_dim, k], rng)
    if method is UdaMethod.DANN:
        return MlpUdaModel(feature, classifier, init_mlp([feat_dim, head_hidden, 2], rng))
    if method is UdaMethod.CDAN:
        return MlpUdaModel(feature, classifier, init_mlp([feat_dim * k, head_hidden, 2], rng))
    return MlpUdaModel(feature, classifier)


def evaluate(model: MlpUdaModel, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(model.predict(data.x) == data.y))


# ------------------------------------------------------------------ losses + grads


def _acc(total: MlpParams | None, g: MlpParams, scale: float = 1.0) -> MlpParams:
    if total is None:
        total = g.zeros_like()
    for i in range(len(g.weights)):
        total.weights[i] += scale * g.weights[i]
        total.biases[i] += scale * g.biases[i]
    return total


def source_loss_grads(model: MlpUdaModel, xs, ys):
    """Cross-entropy of the (first) classifier on source."""
    fa = mlp_forward(model.feature, xs)
    ca = mlp_forward(model.classifier, fa.out)
    loss, g = cross_entropy(ca.out, ys)
    gc, gf_out = mlp_backward(model.classifier, ca, g)
    gf, _ = mlp_backward(model.feature, fa, gf_out)
    return loss, {"feature": gf, "classifier": gc}


def adversarial_loss_grads(model: MlpUdaModel, xs, ys, xt, coeff: float, conditional: bool, reverse: bool = True, probs_override=None):
    """DANN/CDAN total loss ``CE_cls + CE_domain`` and its gradients.

    With ``reverse=True`` the feature extractor receives the domain gradient
    through a gradient-reversal layer of strength ``coeff``; with
    ``reverse=False`` every gradient is the plain gradient of
    ``CE_cls + coeff * CE_domain`` seen by the feature extractor (discriminator
    always minimises ``CE_domain``), which is what finite differences check
    when ``coeff=1``. CDAN treats class probabilities as constants
    (stop-gradient); ``probs_override`` pins them for gradient checks.
    """
    ns = xs.shape[0]
    x = np.vstack([xs, xt])
    fa = mlp_forward(model.feature, x)
    feats = fa.out
    ca = mlp_forward(model.classifier, feats[:ns])
    cls_loss, g_cls = cross_entropy(ca.out, ys)
    gc, gf_cls = mlp_backward(model.classifier, ca, g_cls)

    if conditional:
        probs = softmax(mlp_forward(model.classifier, feats).out) if probs_override is None else probs_override
        d_in = cdan_condition(feats, probs)
    else:
        d_in = grl_forward(feats)
    da = mlp_forward(model.discriminator, d_in)
    dom = np.concatenate([np.zeros(ns, np.int64), np.ones(xt.shape[0], np.int64)])
    dom_loss, g_dom = cross_entropy(da.out, dom)
    gd, g_din = mlp_backward(model.discriminator, da, g_dom)
    g_feat_dom = cdan_condition_backward(g_din, feats, probs) if conditional else g_din
    g_feat_dom = grl_backward(g_feat_dom, coeff) if reverse else coeff * g_feat_dom

    g_feat = g_feat_dom
    g_feat[:ns] += gf_cls
    gf, _ = mlp_backward(model.feature, fa, g_feat)
    return cls_loss, dom_loss, {"feature": gf, "classifier": gc, "discriminator": gd}


def mcd_losses_grads(model: MlpUdaModel, xs, ys, xt, step: str, weight: float = 1.0):
    """MCD losses.

    step "A": CE1 + CE2 on source, all parameters.
    step "B": CE1 + CE2 - weight * discrepancy(target), classifiers only.
    step "C": weight * discrepancy(target), feature extractor only.
    Gradients returned for every sub-network regardless of which one the
    step updates, so the same function serves the finite-difference check.
    """
    grads: dict[str, MlpParams] = {}
    total = 0.0
    disc = 0.0
    if step in ("A", "B"):
        fa = mlp_forward(model.feature, xs)
        g_feat = np.zeros_like(fa.out)
        for name in ("classifier", "classifier2"):
            net = getattr(model, name)
            ca = mlp_forward(net, fa.out)
            loss, g = cross_entropy(ca.out, ys)
            total += loss
            gnet, gf = mlp_backward(net, ca, g)
            grads[name] = gnet
            g_feat += gf
        grads["feature"] = mlp_backward(model.feature, fa, g_feat)[0]
    if step in ("B", "C"):
        sign = -1.0 if step == "B" else 1.0
        fa = mlp_forward(model.feature, xt)
        c1 = mlp_forward(model.classifier, fa.out)
        c2 = mlp_forward(model.classifier2, fa.out)
        p1, p2 = softmax(c1.out), softmax(c2.out)
        disc = mcd_discrepancy(p1, p2)
        total += sign * weight * disc
        gp = sign * weight * mcd_discrepancy_grad(p1, p2)
        g1, gf1 = mlp_backward(model.classifier, c1, softmax_backward(p1, gp))
        g2, gf2 = mlp_backward(model.classifier2, c2, softmax_backward(p2, -gp))
        grads["classifier"] = _acc(grads.get("classifier"), g1)
        grads["classifier2"] = _acc(grads.get("classifier2"), g2)
        gf = mlp_backward(model.feature, fa, gf1 + gf2)[0]
        grads["feature"] = _acc(grads.get("feature"), gf)
    return total, disc, grads


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    adv_weight_start: float = 0.0
    adv_weight_end: float = 1.0
    ramp_fraction: float = 0.5
    hidden_sizes: tuple[int, ...] = (16, 16)
    head_hidden: int = 8
    mcd_inner_steps: int = 4
    # MCD applies its discrepancy in 1 + mcd_inner_steps updates per batch;
    # unscaled, features blow up and training collapses to chance
    mcd_discrepancy_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or self.mcd_discrepancy_scale <= 0 or self.mcd_inner_steps < 1:
            raise ValueError("epochs, batch_size, learning rates and mcd_inner_steps must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def adv_weight(self, epoch: int) -> float:
        ramp = max(1, int(round(self.ramp_fraction * self.epochs)))
        frac = min(1.0, epoch / ramp)
        return self.adv_weight_start + frac * (self.adv_weight_end - self.adv_weight_start)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class TrainReport:
    method: str
    seed: int
    model: MlpUdaModel
    source_accuracy: list[float] = field(default_factory=list)
    target_accuracy: list[float] = field(default_factory=list)
    adversarial_loss: list[float] = field(default_factory=list)
    diverged: bool = False

    @property
    def final_target_accuracy(self) -> float:
        return self.target_accuracy[-1] if self.target_accuracy else float("nan")

    @property
    def final_source_accuracy(self) -> float:
        return self.source_accuracy[-1] if self.source_accuracy else float("nan")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "diverged": self.diverged,
            "source_accuracy": self.source_accuracy,
            "target_accuracy": self.target_accuracy,
            "adversarial_loss": self.adversarial_loss,
            "model": self.model.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class _Momentum:
    def __init__(self, lr: float, momentum: float):
        self.lr, self.mu = lr, momentum
        self.vel: dict[int, np.ndarray] = {}

    def step(self, params: MlpParams, grads: MlpParams) -> None:
        for p, g in zip(params.arrays(), grads.arrays()):
            v = self.vel.get(id(p))
            v = -self.lr * g if v is None else self.mu * v - self.lr * g
            self.vel[id(p)] = v
            p += v

    def reset(self) -> None:
        self.vel.clear()


class UdaTrainer:
    """Owns one model and its optimiser state; trains epoch by epoch.

    Target labels are never read here; only ``target_x`` reaches training.
    """

    def __init__(self, method, cfg: TrainConfig, seed: int | None = None, in_dim: int = 2, num_classes: int = 2):
        self.method = UdaMethod.parse(method)
        self.cfg = cfg
        self.in_dim, self.k = in_dim, num_classes
        self.reset(cfg.seed if seed is None else seed)

    def reset(self, seed: int) -> None:
        self.seed = seed
        init_ss, self._batch_ss = np.random.SeedSequence(seed).spawn(2)
        self.model = build_model(self.method, np.random.default_rng(init_ss), self.cfg.hidden_sizes, self.cfg.head_hidden, self.in_dim, self.k)
        self.rng = np.random.default_rng(self._batch_ss)
        self.opt = {name: _Momentum(self.cfg.learning_rate, self.cfg.momentum) for name in self.model.parts()}
        self.epoch = 0

    def _update(self, grads: dict[str, MlpParams], only=None) -> None:
        for name, g in grads.items():
            if only is None or name in only:
                self.opt[name].step(getattr(self.model, name), g)

    def train_epoch(self, xs: np.ndarray, ys: np.ndarray, xt: np.ndarray) -> float:
        """One pass over the source set; returns the mean adversarial loss."""
        cfg = self.cfg
        lam = cfg.adv_weight(self.epoch)
        ns, nt = xs.shape[0], xt.shape[0]
        perm_s = self.rng.permutation(ns)
        perm_t = self.rng.permutation(nt)
        steps = math.ceil(ns / cfg.batch_size)
        adv = []
        for s in range(steps):
            idx = perm_s[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            tidx = perm_t[np.arange(s * cfg.batch_size, s * cfg.batch_size + len(idx)) % nt]
            bx, by, bt = xs[idx], ys[idx], xt[tidx]
            if self.method is UdaMethod.SOURCE_ONLY:
                loss, grads = source_loss_grads(self.model, bx, by)
                adv.append(0.0)
                check = loss
            elif self.method in (UdaMethod.DANN, UdaMethod.CDAN):
                loss, dloss, grads = adversarial_loss_grads(self.model, bx, by, bt, lam, self.method is UdaMethod.CDAN)
                adv.append(dloss)
                check = loss + dloss
            else:
                w = lam * cfg.mcd_discrepancy_scale
                loss, _, grads = mcd_losses_grads(self.model, bx, by, bt, "A")
                self._update(grads)
                loss_b, _, grads = mcd_losses_grads(self.model, bx, by, bt, "B", w)
                self._update(grads, only=("classifier", "classifier2"))
                disc = 0.0
                for _ in range(cfg.mcd_inner_steps):
                    _, disc, grads = mcd_losses_grads(self.model, bx, by, bt, "C", w)
                    self._update(grads, only=("feature",))
                adv.append(disc)
                check = loss + loss_b + disc
                grads = {}
            if not math.isfinite(check):
                raise FloatingPointError(f"non-finite loss at epoch {self.epoch} step {s}")
            self._update(grads)
        self.epoch += 1
        return float(np.mean(adv))


def train_uda(method, source: Dataset, target: Dataset, cfg: TrainConfig = TrainConfig(), seed: int | None = None) -> TrainReport:
    """Train on labeled ``source`` and unlabeled ``target``.

    ``target.y`` is used only for the per-epoch accuracy log.
    """
    trainer = UdaTrainer(method, cfg, seed, source.dim, max(source.num_classes, target.num_classes))
    report = TrainReport(trainer.method.value, trainer.seed, trainer.model)
    xs, ys, xt = source.x, source.y, target.x.copy()
    for _ in range(cfg.epochs):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                adv = trainer.train_epoch(xs, ys, xt)
        except FloatingPointError as exc:
            report.diverged = True
            raise TrainingDivergedError(str(exc), report) from None
        report.adversarial_loss.append(adv)
        report.source_accuracy.append(evaluate(trainer.model, source))
        report.target_accuracy.append(evaluate(trainer.model, target))
    return report
