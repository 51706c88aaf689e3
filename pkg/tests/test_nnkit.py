import json

import numpy as np
import pytest

from uda_lab.datagen import Dataset, MoonsConfig, gen_two_moons
from uda_lab.nnkit import (
    MlpParams,
    MlpUdaModel,
    TrainConfig,
    TrainingDivergedError,
    TrainReport,
    UdaMethod,
    adversarial_loss_grads,
    build_model,
    cdan_condition,
    cross_entropy,
    evaluate,
    grl_backward,
    grl_forward,
    init_mlp,
    mcd_discrepancy,
    mcd_losses_grads,
    mlp_backward,
    mlp_forward,
    softmax,
    source_loss_grads,
    train_uda,
)

H = 1e-5


def max_rel_fd_error(model, loss_fn, grads):
    """Central-difference check over every parameter of every sub-network."""
    worst = 0.0
    for name, params in model.parts().items():
        g = grads.get(name, params.zeros_like())
        for arr, garr in zip(params.arrays(), g.arrays()):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + H
                lp = loss_fn()
                arr[idx] = old - H
                lm = loss_fn()
                arr[idx] = old
                num = (lp - lm) / (2 * H)
                worst = max(worst, abs(num - garr[idx]) / max(1e-6, abs(num) + abs(garr[idx])))
    return worst


@pytest.fixture
def batch():
    r = np.random.default_rng(0)
    return r.normal(size=(7, 2)), r.integers(0, 2, 7), r.normal(size=(5, 2))


# ------------------------------------------------------------------ MLP


def test_forward_zero_weights_uniform_softmax():
    p = init_mlp([2, 4, 3], np.random.default_rng(0)).zeros_like()
    out = mlp_forward(p, np.ones((5, 2))).out
    assert np.array_equal(out, np.zeros((5, 3)))
    assert np.allclose(softmax(out), 1 / 3)


def test_forward_identity_layer_and_shapes():
    p = MlpParams([np.eye(3)], [np.zeros(3)], "relu", False)
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(mlp_forward(p, x).out, x)
    net = init_mlp([2, 16, 16, 2], np.random.default_rng(0))
    assert mlp_forward(net, np.zeros((11, 2))).out.shape == (11, 2)
    with pytest.raises(ValueError):
        mlp_forward(net, np.zeros((3, 3)))


def test_backward_matches_finite_differences():
    net = init_mlp([2, 16, 16, 2], np.random.default_rng(3))
    x, y = np.random.default_rng(4).normal(size=(9, 2)), np.array([0, 1, 1, 0, 1, 0, 0, 1, 1])
    acts = mlp_forward(net, x)
    _, g = cross_entropy(acts.out, y)
    grads, _ = mlp_backward(net, acts, g)
    model = MlpUdaModel(net, init_mlp([2, 2], np.random.default_rng(0)))
    err = max_rel_fd_error(MlpUdaModel(net, model.classifier), lambda: cross_entropy(mlp_forward(net, x).out, y)[0], {"feature": grads})
    assert err <= 1e-4


def test_backward_zero_and_linear():
    net = init_mlp([2, 5, 3], np.random.default_rng(2), activation="tanh")
    acts = mlp_forward(net, np.random.default_rng(5).normal(size=(6, 2)))
    g0, dx = mlp_backward(net, acts, np.zeros((6, 3)))
    assert all(np.all(a == 0) for a in g0.arrays()) and np.all(dx == 0)
    ga, gb = np.random.default_rng(6).normal(size=(2, 6, 3))
    sa, sb, sab = (mlp_backward(net, acts, g)[0] for g in (ga, gb, ga + gb))
    for a, b, ab in zip(sa.arrays(), sb.arrays(), sab.arrays()):
        assert np.allclose(a + b, ab, atol=1e-12)
    with pytest.raises(ValueError):
        mlp_backward(net, acts, np.zeros((6, 2)))


def test_params_json_layout():
    net = init_mlp([2, 3, 2], np.random.default_rng(0))
    d = json.loads(json.dumps(net.to_dict()))
    assert d["layers"][0]["w"][:3] == net.weights[0].ravel()[:3].tolist()
    back = MlpParams.from_dict(d)
    assert all(np.array_equal(a, b) for a, b in zip(back.arrays(), net.arrays()))


# ------------------------------------------------------------------ pieces


def test_grl_examples():
    g = np.array([[1.0, -2.0]])
    assert np.all(grl_backward(g, 0.0) == 0)
    assert np.array_equal(grl_backward(g, 1.0), -g)
    x = np.arange(4.0)
    assert grl_forward(x) is x
    with pytest.raises(ValueError):
        grl_backward(g, -0.1)


def test_cdan_condition_examples():
    f = np.array([1.0, 2.0, 3.0])
    out = cdan_condition(f, np.array([0.0, 1.0]))
    assert out.shape == (6,)
    assert np.array_equal(out, [0, 1, 0, 2, 0, 3])
    p = np.array([0.3, 0.7])
    assert np.allclose(cdan_condition(2.5 * f, p), 2.5 * cdan_condition(f, p))
    assert np.linalg.norm(cdan_condition(f, p)) == pytest.approx(np.linalg.norm(f) * np.linalg.norm(p))
    with pytest.raises(ValueError):
        cdan_condition(f, np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        cdan_condition(np.ones(2049), np.array([0.5, 0.5]))


def test_mcd_discrepancy_examples():
    p = softmax(np.random.default_rng(0).normal(size=(4, 2)))
    q = softmax(np.random.default_rng(1).normal(size=(4, 2)))
    assert mcd_discrepancy(p, p) == 0
    assert mcd_discrepancy(p, q) == mcd_discrepancy(q, p) > 0
    assert mcd_discrepancy(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 2.0
    with pytest.raises(ValueError):
        mcd_discrepancy(p, q[:2])


# ------------------------------------------------------------------ full-loss gradients


def test_source_only_gradients(batch):
    xs, ys, _ = batch
    model = build_model(UdaMethod.SOURCE_ONLY, np.random.default_rng(1))
    _, g = source_loss_grads(model, xs, ys)
    assert max_rel_fd_error(model, lambda: source_loss_grads(model, xs, ys)[0], g) <= 1e-4


@pytest.mark.parametrize("method", [UdaMethod.DANN, UdaMethod.CDAN])
def test_adversarial_gradients(batch, method):
    xs, ys, xt = batch
    model = build_model(method, np.random.default_rng(1))
    cond = method is UdaMethod.CDAN
    # CDAN treats the conditioning probabilities as constants
    probs = softmax(model.logits(np.vstack([xs, xt]))) if cond else None

    def loss():
        c, d, _ = adversarial_loss_grads(model, xs, ys, xt, 1.0, cond, reverse=False, probs_override=probs)
        return c + d

    _, _, g = adversarial_loss_grads(model, xs, ys, xt, 1.0, cond, reverse=False, probs_override=probs)
    assert max_rel_fd_error(model, loss, g) <= 1e-4


@pytest.mark.parametrize("method", [UdaMethod.DANN, UdaMethod.CDAN])
def test_reversal_flips_only_domain_part_of_feature_grad(batch, method):
    xs, ys, xt = batch
    model = build_model(method, np.random.default_rng(2))
    cond = method is UdaMethod.CDAN
    _, _, plain = adversarial_loss_grads(model, xs, ys, xt, 0.7, cond, reverse=False)
    _, _, rev = adversarial_loss_grads(model, xs, ys, xt, 0.7, cond, reverse=True)
    _, _, none = adversarial_loss_grads(model, xs, ys, xt, 0.0, cond, reverse=False)
    for p, r, n in zip(plain["feature"].arrays(), rev["feature"].arrays(), none["feature"].arrays()):
        assert np.allclose(r - n, -(p - n), atol=1e-12)
    for name in ("classifier", "discriminator"):
        for p, r in zip(plain[name].arrays(), rev[name].arrays()):
            assert np.array_equal(p, r)


@pytest.mark.parametrize("step", ["A", "B", "C"])
def test_mcd_gradients(batch, step):
    xs, ys, xt = batch
    model = build_model(UdaMethod.MCD, np.random.default_rng(1))
    _, _, g = mcd_losses_grads(model, xs, ys, xt, step, 0.7)
    assert max_rel_fd_error(model, lambda: mcd_losses_grads(model, xs, ys, xt, step, 0.7)[0], g) <= 1e-4


# ------------------------------------------------------------------ evaluation


def test_evaluate_tie_break_and_order():
    net = init_mlp([2, 2], np.random.default_rng(0)).zeros_like()
    model = MlpUdaModel(init_mlp([2, 2], np.random.default_rng(0)), net)
    data = Dataset.build(np.random.default_rng(1).normal(size=(10, 2)), [0, 1] * 5, "target")
    assert evaluate(model, data) == 0.5
    assert np.all(model.predict(data.x) == 0)
    with pytest.raises(ValueError):
        evaluate(model, Dataset.empty())


def test_evaluate_memorized_and_permutation_invariant():
    src, _ = gen_two_moons(MoonsConfig(n_per_domain=10, noise_sigma=0.0, seed=2))
    rep = train_uda("source", src, src, TrainConfig(epochs=300, batch_size=10))
    assert evaluate(rep.model, src) == 1.0
    perm = np.random.default_rng(0).permutation(len(src))
    _, tgt = gen_two_moons(MoonsConfig(shift=0.5))
    assert evaluate(rep.model, tgt.subset(perm[:8].tolist() + list(range(10, 500)))) == pytest.approx(
        evaluate(rep.model, tgt.subset(list(range(10, 500)) + perm[:8].tolist()))
    )


# ------------------------------------------------------------------ training


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    cfg = TrainConfig(epochs=10)
    assert cfg.adv_weight(0) == 0.0 and cfg.adv_weight(5) == 1.0 and cfg.adv_weight(9) == 1.0


@pytest.mark.parametrize("method", list(UdaMethod))
def test_training_is_deterministic(method):
    src, tgt = gen_two_moons(MoonsConfig(n_per_domain=100, shift=0.5))
    cfg = TrainConfig(epochs=5)
    a, b = train_uda(method, src, tgt, cfg, seed=4), train_uda(method, src, tgt, cfg, seed=4)
    assert a.to_json() == b.to_json()
    assert all(0 <= v <= 1 for v in a.target_accuracy + a.source_accuracy)


@pytest.mark.parametrize("method", list(UdaMethod))
def test_target_labels_are_never_read(method):
    src, tgt = gen_two_moons(MoonsConfig(n_per_domain=100, shift=0.5))
    flipped = tgt.with_labels(1 - tgt.y)
    cfg = TrainConfig(epochs=5)
    a, b = train_uda(method, src, tgt, cfg, seed=1), train_uda(method, src, flipped, cfg, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(a.model.arrays(), b.model.arrays()))


def test_divergence_raises_with_partial_report():
    src, tgt = gen_two_moons(MoonsConfig(n_per_domain=100))
    x = src.x.copy()
    x[3, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train_uda("dann", Dataset.build(x, src.y, "source"), tgt, TrainConfig(epochs=20))
    assert info.value.report.diverged
    assert info.value.report.target_accuracy == []


def test_report_json_roundtrip():
    src, tgt = gen_two_moons(MoonsConfig(n_per_domain=50))
    rep = train_uda("cdan", src, tgt, TrainConfig(epochs=2))
    d = json.loads(rep.to_json())
    model = MlpUdaModel.from_dict(d["model"])
    assert np.array_equal(model.predict(tgt.x), rep.model.predict(tgt.x))
    assert d["method"] == "cdan" and len(d["target_accuracy"]) == 2


def test_dann_aligns_marginals():
    src, tgt = gen_two_moons(MoonsConfig(shift=0.25, seed=0))
    held_s, held_t = gen_two_moons(MoonsConfig(shift=0.25, seed=99))
    model = train_uda("dann", src, tgt, seed=0).model
    x = np.vstack([held_s.x, held_t.x])
    dom = np.r_[np.zeros(len(held_s)), np.ones(len(held_t))]
    pred = np.argmax(mlp_forward(model.discriminator, model.features(x)).out, axis=1)
    assert abs(np.mean(pred == dom) - 0.5) <= 0.15


def test_source_only_small_shift_accuracy():
    accs = []
    for trial in range(5):
        src, tgt = gen_two_moons(MoonsConfig(shift=0.25, seed=trial))
        accs.append(train_uda("source", src, tgt, seed=trial).final_target_accuracy)
    assert np.mean(accs) >= 0.95


def test_target_poison_hurts_dann_at_large_shift():
    from uda_lab.poison import WrongLabelSpec, make_wrong_label_poison

    clean, poisoned = [], []
    for trial in range(5):
        src, tgt = gen_two_moons(MoonsConfig(shift=0.75, seed=trial))
        clean.append(train_uda("dann", src, tgt, seed=trial).final_target_accuracy)
        pz = make_wrong_label_poison(src, tgt, WrongLabelSpec(fraction=0.10), seed=trial)
        poisoned.append(train_uda("dann", src.concat(pz), tgt, seed=trial).final_target_accuracy)
    assert np.mean(poisoned) <= np.mean(clean) - 0.15
