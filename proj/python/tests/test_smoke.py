import json
import math

import numpy as np
import pytest

import capsct


def test_mcnemar_values():
    assert capsct.mcnemar_exact(3, 0) == pytest.approx(0.25, abs=1e-12)
    assert capsct.mcnemar_exact(3, 1) == pytest.approx(0.625, abs=1e-12)
    assert capsct.format_p_value(capsct.mcnemar_exact(4, 4)) == "1"


def test_squash_norm():
    v = capsct.squash([3.0, 4.0])
    assert math.hypot(*v) == pytest.approx(25.0 / 26.0)
    assert capsct.squash([0.0, 0.0]) == [0.0, 0.0]


def test_routing_couplings_sum_to_one():
    rng = np.random.default_rng(3)
    u_hat = rng.normal(size=(6, 4, 5))
    out, couplings, history = capsct.routing(u_hat, 3)
    assert out.shape == (4, 5)
    assert len(history) == 3
    for c in history:
        np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(couplings, history[-1])


def test_single_iteration_is_uniform_coupling():
    rng = np.random.default_rng(4)
    u_hat = rng.normal(size=(5, 3, 4))
    out, couplings, _ = capsct.routing(u_hat, 1)
    s = u_hat.sum(axis=0) / 3.0
    expected = np.array([capsct.squash(list(row)) for row in s])
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(couplings, 1.0 / 3.0)


def test_gating_boundary():
    scores, probs, decision = capsct.gate_and_pool([[0.8, 0.3, 0.9]], [1.0])
    assert decision == 0
    assert scores == pytest.approx([0.8, 0.3, 0.0])
    assert capsct.gate_and_pool([[0.8, 0.3, 0.9]] * 3, [0.0] * 3)[2] == 2
    with pytest.raises(capsct.ContractError):
        capsct.gate_and_pool([[0.1, 0.1, 0.1]], [1.5])


def test_auc_matches_pair_counting():
    rng = np.random.default_rng(5)
    scores = rng.integers(0, 5, size=60).astype(float)
    labels = rng.integers(0, 2, size=60)
    auc, points = capsct.roc_auc(scores.tolist(), labels.tolist())
    pos, neg = scores[labels == 1], scores[labels == 0]
    pairs = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (len(pos) * len(neg))
    assert auc == pytest.approx(pairs, abs=1e-12)
    assert points[0][1:] == (0.0, 0.0) and points[-1][1:] == (1.0, 1.0)


def test_stratified_folds():
    labels = [0] * 104 + [1] * 60 + [2] * 56
    folds = capsct.stratified_kfold(labels, 10, 1)
    assert [len(f) for f in folds] == [22] * 10
    assert sorted(i for f in folds for i in f) == list(range(220))


def test_logistic_separation_flag():
    x = np.array([[0.0], [1.0], [2.0], [3.0]])
    fit = capsct.logistic_fit(x, np.array([0.0, 0.0, 1.0, 1.0]), ["x"])
    assert fit["separated"] and fit["p_values"] is None
    assert fit["names"] == ["intercept", "x"]


def test_config_roundtrip_and_strict_keys():
    cfg = capsct.default_config()
    assert capsct.resolve_config(cfg) == cfg
    assert capsct.resolve_config({"seed": 9})["seed"] == 9
    with pytest.raises(capsct.ConfigError):
        capsct.resolve_config({"sed": 9})


def test_gradcam_map_is_nonnegative():
    rng = np.random.default_rng(6)
    act = rng.uniform(0, 1, size=(3, 4, 4))
    grad = rng.normal(size=48).tolist()
    h = capsct.gradcam_map(act, grad)
    assert h.shape == (4, 4) and (h >= 0).all()
    px = capsct.render_heatmap(np.array([[0.0, 0.5], [0.5, 1.0]]), 2)
    assert px.tolist() == [[0, 128], [128, 255]]


TINY = {
    "seed": 5,
    "folds": 2,
    "phantom": {"patients_per_class": 4, "slices_per_patient": 12, "side": 32},
    "train": {
        "stage1": {"learning_rate": 1e-3, "epochs": 2},
        "stage2": {"learning_rate": 1e-3, "epochs": 2},
        "fusion": {"learning_rate": 1e-3, "epochs": 3},
    },
}


def test_phantom_crossval_and_classifier(tmp_path):
    data = tmp_path / "data"
    capsct.write_phantom(data, TINY)
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["patients"]) == 12

    out = tmp_path / "cv"
    aggregate = capsct.crossval(data, TINY, out)
    assert aggregate["folds"] == 2
    assert 0.0 <= aggregate["fusion"]["accuracy"]["mean"] <= 1.0
    assert json.loads((out / "aggregate.json").read_text()) == aggregate

    clf = capsct.Classifier(out / "fold_0", TINY)
    preds = clf.predict(data)
    assert len(preds) == 12
    for p in preds:
        assert sum(p["fusion_probabilities"]) == pytest.approx(1.0)
        assert p["fusion_decision"] in (0, 1, 2)
    heat = clf.gradcam_stage1(np.zeros((32, 32)), "covid", "conv2")
    assert heat.shape == (32, 32) and (heat >= 0).all()
    with pytest.raises(capsct.ConfigError):
        clf.gradcam_stage1(np.zeros((32, 32)), "covid", "conv9")


def test_missing_dataset_raises_io_error(tmp_path):
    with pytest.raises(capsct.Error):
        capsct.crossval(tmp_path / "nothing", TINY)
