import json

import numpy as np
import pytest

from clp import evalreport as er
from clp import metatrain as mt
from clp import synthdata as sd
from clp.characteristics import ClassStats, update_class_stats
from clp.errors import ContractError, ConformanceError
from clp.models import Classifier, PerturbNet

import oracles as O


@pytest.fixture(scope="module")
def ds():
    return sd.synth_spurshapes(4, 2, 16, 16, 8, 0.5, 11)


def test_perfect_predictor():
    truth = np.array([0, 1, 2, 2, 1, 0])
    r = er.metrics_from_predictions(truth, truth, truth, 3)
    assert r.top1_acc == 1.0 and r.top1_err == 0.0
    assert r.worst_group_acc == 1.0 and r.macro_precision == 1.0
    assert r.per_class_acc == (1.0, 1.0, 1.0)


def test_constant_predictor():
    truth = np.repeat(np.arange(4), 5)
    r = er.metrics_from_predictions(np.zeros(20, int), truth, truth, 4)
    assert r.top1_acc == 0.25 and r.per_class_acc == (1.0, 0.0, 0.0, 0.0)
    assert r.macro_precision == pytest.approx(0.25 / 4)
    assert r.worst_group_acc == 0.0


def test_weighted_per_class_is_top1():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 5, 200)
    pred = np.where(rng.uniform(size=200) < 0.6, truth, rng.integers(0, 5, 200))
    r = er.metrics_from_predictions(pred, truth, truth, 5)
    counts = np.bincount(truth, minlength=5)
    assert abs(np.dot(r.per_class_acc, counts) / 200 - r.top1_acc) < 1e-12
    assert sum(g["n"] for g in r.groups) == 200


def test_evaluate_uses_clean_labels(ds):
    noisy = sd.inject_label_noise(ds, "uniform", 0.5, 0)
    clf = Classifier(3 * 16 * 16, 4, (6,), seed=0)
    a, b = er.evaluate(clf, ds), er.evaluate(clf, noisy)
    assert a == b
    assert er.evaluate(clf, ds) == a
    with pytest.raises(ContractError):
        er.evaluate(clf, sd.empty_container(4, 16, 16))


def _noisy_arrays():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(12, 5))
    y = np.arange(12) % 3
    flags = np.zeros(12, np.uint8)
    flags[::4] = sd.FLAG_NOISY
    return mt.ArrayDataset(x, np.ones((12, 5)), y, y.copy(), flags, y.copy(), 3, 1)


def test_loss_increase_fraction_limits():
    data = _noisy_arrays()
    clf = Classifier(5, 3, (4,), seed=1)
    pnet = PerturbNet(3, 4)
    stats = None
    assert er.loss_increase_fractions(clf, pnet, stats, data, delta=0.0) == (0.0, 0.0)
    wrong = np.zeros((12, 3))
    wrong[np.arange(12), (data.labels + 1) % 3] = np.inf
    assert er.loss_increase_fractions(clf, pnet, stats, data, delta=wrong) == (1.0, 1.0)
    right = np.zeros((12, 3))
    right[np.arange(12), data.labels] = np.inf
    assert er.loss_increase_fractions(clf, pnet, stats, data, delta=right) == (0.0, 0.0)


def test_loss_increase_with_pnet_and_empty_subset():
    data = _noisy_arrays()
    clean = mt.ArrayDataset(data.x, data.masks, data.labels, data.orig_labels,
                            np.zeros(12, np.uint8), data.groups, 3, 1)
    clf = Classifier(5, 3, (4,), seed=1)
    stats = update_class_stats(ClassStats.create([4, 4, 4]), [0, 1, 2], [1.0] * 3, [0.0] * 3)
    c, n = er.loss_increase_fractions(clf, PerturbNet(3, 4, seed=2), stats, clean)
    # a fresh network outputs zero perturbations
    assert c == 0.0 and n is None


def test_saliency_map_range_and_shift_invariance(ds):
    clf = Classifier(3 * 16 * 16, 4, (6,), "tanh", seed=2)
    m = er.saliency_map(clf, ds[0])
    assert m.shape == (16, 16) and m.min() == 0.0 and m.max() == 1.0
    p = clf.param_values()
    p[-1] = p[-1] + 3.0  # same shift on every logit
    shifted = er.saliency_map(clf.with_params(p), ds[0])
    np.testing.assert_allclose(shifted, m, atol=1e-9)


def test_saliency_zero_background_linear(ds):
    s = ds[1]
    inside = np.tile(s.mask.astype(bool).ravel(), 3)
    A = np.random.default_rng(0).normal(size=(4, inside.size)) * inside
    clf = O.linear_classifier(A)
    raw = er.raw_saliency(clf, s.pixels, s.orig_label)
    assert not raw[~s.mask.astype(bool)].any()
    assert er.saliency_ratio(clf, s) == float("inf")
    flat = O.linear_classifier(np.zeros((4, inside.size)))
    assert not er.saliency_map(flat, s).any()


def test_saliency_ratio_needs_both_regions(ds):
    full = sd.SampleRecord(ds[0].pixels, np.ones((16, 16), np.uint8), 0, 0, 0, 0)
    with pytest.raises(ConformanceError):
        er.saliency_ratio(Classifier(768, 4, (), seed=0), full)


def test_pgm_round_trip():
    img = np.linspace(0, 1, 12).reshape(3, 4)
    blob = er.encode_pgm(img)
    assert blob.startswith(b"P5\n4 3\n255\n") and len(blob) == 11 + 12
    np.testing.assert_allclose(er.decode_pgm(blob), img, atol=0.5 / 255)


def test_report_emit(tmp_path):
    truth = np.array([0, 1, 1, 0])
    r = er.metrics_from_predictions([0, 1, 0, 0], truth, [0, 1, 2, 3], 2)
    paths = er.report_emit(r, mt.History(), tmp_path / "x_", {2: np.eye(3)}, {"note": 1})
    names = sorted(p.rsplit("/", 1)[1] for p in paths)
    assert names == ["x_history.csv", "x_metrics.json", "x_saliency_2.pgm"]
    back = json.loads((tmp_path / "x_metrics.json").read_text())
    assert back["top1_acc"] == 0.75 and back["note"] == 1
    assert back["groups"] == [dict(g) for g in r.groups]
    assert (tmp_path / "x_history.csv").read_text() == "iter,train_loss,meta_loss\n"
    assert len(er.report_emit(r, None, tmp_path / "y_")) == 1
