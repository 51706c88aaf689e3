import json

import numpy as np
import pytest

from uda_lab.cli import (
    RunManifest,
    config_hash,
    derive_seed,
    main,
    read_sweep_csv,
    sweep_jobs,
    worker_count,
)
from uda_lab.datagen import Dataset
from uda_lab.domains import LinearUdaModel, MixtureDomain, MixtureDomainPair


def run(*argv):
    return main([str(a) for a in argv])


def replay_matches(manifest_path):
    """Delete every output, replay from the manifest, compare bytes."""
    m = RunManifest.read(manifest_path)
    before = {p: open(p, "rb").read() for p in m.outputs}
    for p in m.outputs:
        open(p, "wb").close()
    assert run("replay", manifest_path) == 0
    return all(open(p, "rb").read() == b for p, b in before.items())


@pytest.fixture
def moons_dir(tmp_path):
    assert run("gen-moons", "--n", 200, "--shift", 0.5, "--seed", 3, "--out-dir", tmp_path / "m") == 0
    return tmp_path / "m"


# ------------------------------------------------------------------ manifest helpers


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "dann", 0.5, 0.1, 2) == derive_seed(0, "dann", 0.5, 0.1, 2)
    assert derive_seed(0, "dann", 0.5, 0.1, 2) != derive_seed(0, "dann", 0.5, 0.1, 3)
    assert 0 <= derive_seed("x") < 2**63


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("UDA_LAB_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("UDA_LAB_THREADS", "zero")
    with pytest.raises(Exception):
        worker_count()


# ------------------------------------------------------------------ case


def test_case_bad_id_is_usage_error(capsys):
    assert run("case", "--id", 9) == 2
    assert run("case") == 2


def test_case2_report_and_determinism(tmp_path):
    out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
    assert run("case", "--id", 2, "--restarts", 5, "--seed", 7, "--out", out1) == 0
    assert run("case", "--id", 2, "--restarts", 5, "--seed", 7, "--out", out2) == 0
    d = json.loads(out1.read_text())
    assert d["outcome"] == "failure" and d["bound_report"]["measures"]["e_T_abs"] > 0.99
    assert out1.read_bytes() == out2.read_bytes()
    man = json.loads((tmp_path / "a.json.manifest.json").read_text())
    assert man["command"] == "case" and man["seed"] == 7 and man["outputs"] == [str(out1)]
    assert len(man["config_hash"]) == 64
    assert replay_matches(str(out1) + ".manifest.json")


# ------------------------------------------------------------------ bounds


def write_config(path, pair, model, inline=False):
    d = {"model": model.to_dict()}
    d.update(pair.to_dict() if inline else {"pair": pair.to_dict()})
    path.write_text(json.dumps(d))
    return path


def test_bounds_case1_optimum(tmp_path):
    s = MixtureDomain([-1, 1], [-1, -1], 1.0, [0, 1])
    t = MixtureDomain([1, 1], [1, -1], 1.0, [0, 1])
    cfg = write_config(tmp_path / "c.json", MixtureDomainPair(s, t), LinearUdaModel([0, 1], 200.0, 0.0))
    assert run("bounds", "--config", cfg, "--out", tmp_path / "r.json") == 0
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["lower_bound"] <= 1e-3 and d["sandwich_ok"]


def test_bounds_identical_domains(tmp_path):
    d = MixtureDomain([0.5, 1], [-0.5, -1], 0.8, [0.6, 0.8])
    cfg = write_config(tmp_path / "c.json", MixtureDomainPair(d, d), LinearUdaModel([0.6, 0.8], 3.0, 0.0), inline=True)
    assert run("bounds", "--config", cfg, "--out", tmp_path / "r.json") == 0
    m = json.loads((tmp_path / "r.json").read_text())["measures"]
    assert m["tv"] < 1e-12 and m["mismatch_S"] < 1e-12 and m["mismatch_T"] < 1e-12


def test_bounds_random_configs(tmp_path, rng):
    from conftest import random_config

    for i in range(5):
        pair, model = random_config(rng)
        cfg = write_config(tmp_path / f"c{i}.json", pair, model)
        assert run("bounds", "--config", cfg, "--out", tmp_path / f"r{i}.json") == 0
        assert json.loads((tmp_path / f"r{i}.json").read_text())["lb_le_eT"]
    assert replay_matches(str(tmp_path / "r0.json") + ".manifest.json")


def test_bounds_malformed_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("bounds", "--config", bad, "--out", tmp_path / "r.json") == 2
    bad.write_text(json.dumps({"model": {"u": [0, 1], "a": 1, "b": 0}}))
    assert run("bounds", "--config", bad, "--out", tmp_path / "r.json") == 2
    assert run("bounds", "--config", tmp_path / "missing.json") == 2


# ------------------------------------------------------------------ data + poison


def test_gen_moons_replay(moons_dir):
    src = Dataset.from_csv(moons_dir / "source.csv")
    assert len(src) == 200
    assert replay_matches(str(moons_dir / "source.csv") + ".manifest.json")


def test_poison_wrong_label_count(tmp_path):
    assert run("gen-moons", "--n", 1000, "--out-dir", tmp_path) == 0
    out = tmp_path / "p.csv"
    assert run("poison", "wrong-label", "--source", tmp_path / "source.csv", "--target", tmp_path / "target.csv", "--from", "target", "--fraction", 0.10, "--out", out) == 0
    pz = Dataset.from_csv(out)
    assert len(pz) == 100 and pz.is_poison.all()
    assert replay_matches(str(out) + ".manifest.json")


def test_poison_nearest_incorrect_scheme(moons_dir, tmp_path):
    out = tmp_path / "p.csv"
    args = ["poison", "wrong-label", "--source", moons_dir / "source.csv", "--target", moons_dir / "target.csv"]
    assert run(*args, "--scheme", "nearest_incorrect_class", "--epochs", 10, "--out", out) == 0
    assert len(Dataset.from_csv(out)) == 20


def test_poison_watermark_alpha_zero(moons_dir, tmp_path):
    out = tmp_path / "w.csv"
    assert run("poison", "watermark", "--source", moons_dir / "source.csv", "--target", moons_dir / "target.csv", "--alpha", 0, "--out", out) == 0
    src = Dataset.from_csv(moons_dir / "source.csv")
    pz = Dataset.from_csv(out)
    assert all(any(np.array_equal(p, q) for q in src.x) for p in pz.x)


def test_poison_clean_label_eps_zero(moons_dir, tmp_path):
    out = tmp_path / "c.csv"
    tgt = Dataset.from_csv(moons_dir / "target.csv")
    args = ["poison", "clean-label", "--source", moons_dir / "source.csv", "--target", moons_dir / "target.csv"]
    assert run(*args, "--eps", 0, "--n-poison", 3, "--test-index", 5, "--outer-iters", 4, "--epochs", 10, "--out", out) == 0
    pz = Dataset.from_csv(out)
    assert all(any(np.array_equal(p, q) for q in tgt.x) for p in pz.x)
    assert np.all(pz.y != tgt.y[5])
    assert json.loads((tmp_path / "c.csv.trace.json").read_text())["objective_before"]
    assert replay_matches(str(out) + ".manifest.json")


def test_poison_infeasible_is_usage_error(moons_dir, tmp_path):
    args = ["poison", "wrong-label", "--source", moons_dir / "source.csv", "--target", moons_dir / "target.csv"]
    assert run(*args, "--fraction", 1.5, "--out", tmp_path / "x.csv") == 2
    assert run("poison", "wrong-label", "--source", tmp_path / "nope.csv", "--target", moons_dir / "target.csv") == 2


# ------------------------------------------------------------------ sweep


def test_full_sweep_grid_size():
    jobs = sweep_jobs(["source", "dann", "cdan", "mcd"], [0.25, 0.5, 0.75], "wrong-label", [0, 0.05, 0.10], 5, 0)
    assert len(jobs) == 180
    assert len({j.seed for j in jobs}) == 180
    # one data draw per (shift, trial), shared across methods and fractions
    assert len({j.data_seed for j in jobs}) == 15


def test_sweep_csv_and_replay(tmp_path, monkeypatch):
    monkeypatch.setenv("UDA_LAB_THREADS", "1")
    out = tmp_path / "s.csv"
    argv = ["moons-sweep", "--methods", "source,dann", "--shifts", "0.5", "--fractions", "0,0.1", "--trials", 2, "--n", 100, "--epochs", 5, "--out", out]
    assert run(*argv) == 0
    rows, agg = read_sweep_csv(out.read_text())
    assert len(rows) == 8
    assert {r["stat"] for r in agg} == {"mean", "sd"} and len(agg) == 8
    assert all(0 <= float(r["target_accuracy"]) <= 1 for r in rows)
    first = out.read_bytes()
    assert replay_matches(str(out) + ".manifest.json")
    monkeypatch.setenv("UDA_LAB_THREADS", "2")
    assert run(*argv) == 0
    assert out.read_bytes() == first


def test_sweep_rejects_bad_trials(tmp_path):
    assert run("moons-sweep", "--trials", 0, "--out", tmp_path / "s.csv") == 2
    assert run("moons-sweep", "--shifts", "a,b") == 2
