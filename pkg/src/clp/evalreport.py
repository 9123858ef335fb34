"""Evaluation metrics, the loss-increase diagnostic, and saliency maps."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensorad as ad
from .characteristics import FeatureNormalizer, extract_batch, log_softmax_np
from .errors import ContractError, ConformanceError
from .ioutil import atomic_write_bytes, atomic_write_text
from .synthdata import FLAG_NOISY, DatasetContainer

EVAL_CHUNK = 512


@dataclass(frozen=True)
class MetricsReport:
    top1_acc: float
    top1_err: float
    per_class_acc: tuple
    macro_precision: float
    worst_group_acc: float
    groups: tuple  # ({"id", "n", "acc"}, ...)
    n_eval: int

    def to_dict(self):
        return {"top1_acc": self.top1_acc, "top1_err": self.top1_err,
                "per_class_acc": list(self.per_class_acc),
                "macro_precision": self.macro_precision,
                "worst_group_acc": self.worst_group_acc,
                "groups": [dict(g) for g in self.groups], "n_eval": self.n_eval}


def _flat_pixels(ds):
    if isinstance(ds, DatasetContainer):
        return ds.pixels.reshape(len(ds), -1)
    return ds.x


def predict_logits(clf, x, chunk=EVAL_CHUNK):
    """Unperturbed logits and features for a (N, D) array, computed in chunks."""
    logits, feats = [], []
    with ad.no_grad():
        for start in range(0, len(x), chunk):
            f, u = clf.forward(ad.constant(np.asarray(x[start:start + chunk], np.float64)))
            logits.append(u.value)
            feats.append(f.value)
    return np.concatenate(logits), np.concatenate(feats)


def metrics_from_predictions(pred, truth, groups, num_classes):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    groups = np.asarray(groups)
    n = truth.shape[0]
    if n == 0:
        raise ContractError("cannot evaluate an empty dataset")
    correct = pred == truth
    per_class = []
    precision = []
    for k in range(num_classes):
        sel = truth == k
        per_class.append(float(correct[sel].mean()) if sel.any() else 0.0)
        predicted = pred == k
        precision.append(float((correct & predicted).sum() / predicted.sum())
                         if predicted.any() else 0.0)
    table = []
    for g in np.unique(groups):
        sel = groups == g
        table.append({"id": int(g), "n": int(sel.sum()), "acc": float(correct[sel].mean())})
    acc = float(correct.mean())
    return MetricsReport(acc, 1.0 - acc, tuple(per_class), float(np.mean(precision)),
                         min(g["acc"] for g in table), tuple(table), int(n))


def evaluate(clf, ds):
    """Score the classifier's unperturbed argmax against the clean labels."""
    if len(ds) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    logits, _ = predict_logits(clf, _flat_pixels(ds))
    pred = np.argmax(logits, axis=1)  # first maximum wins ties
    return metrics_from_predictions(pred, ds.orig_labels, ds.groups, ds.num_classes)


def _row_ce(z, y):
    # +inf logits take all the probability mass, shared equally among them
    rows = np.arange(len(y))
    top = np.isposinf(z)
    n_top = top.sum(axis=1)
    safe = np.where(top, 0.0, z)
    loss = -log_softmax_np(safe)[rows, y]
    limit = np.where(top[rows, y], np.log(np.maximum(n_top, 1)), np.inf)
    return np.where(n_top > 0, limit, loss)


def loss_increase_fractions(clf, pnet, stats, ds, normalizer=None, delta=None):
    """Fraction of clean and of noisy samples whose CE rises when ``delta`` is added.

    The loss is taken against the (possibly corrupted) training label. ``delta``
    defaults to the perturbation network's output on the samples'
    characteristics; a normalizer fitted on the whole set is used when none is
    given.

    Returns:
        ``(frac_clean, frac_noisy)``; either is ``None`` if that subset is empty.
    """
    x = _flat_pixels(ds)
    y = np.asarray(ds.labels)
    u, feats = predict_logits(clf, x)
    if delta is None:
        raw, _ = extract_batch(u, feats, y, clf.class_weights(), stats)
        if normalizer is None:
            normalizer = FeatureNormalizer()
            normalizer.update(raw)
        with ad.no_grad():
            delta = pnet.forward(ad.constant(normalizer.transform(raw))).value
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), u.shape)
    with np.errstate(invalid="ignore", over="ignore"):
        increased = _row_ce(u + delta, y) > _row_ce(u, y)
    noisy = (np.asarray(ds.flags) & FLAG_NOISY) != 0
    clean_frac = float(increased[~noisy].mean()) if (~noisy).any() else None
    noisy_frac = float(increased[noisy].mean()) if noisy.any() else None
    return clean_frac, noisy_frac


def raw_saliency(clf, pixels, label):
    """Channel-summed squared input gradient of the label's softmax probability."""
    pixels = np.asarray(pixels, dtype=np.float64)
    c, h, w = pixels.shape
    xs = ad.leaf(pixels.reshape(1, -1))
    _, u = clf.forward(xs)
    p = ad.sum_(ad.exp(ad.row_gather(ad.log_softmax(u), [int(label)])))
    (g,) = ad.backward(p, [xs])
    return (g.value.reshape(c, h, w) ** 2).sum(axis=0)


def saliency_map(clf, sample):
    """Saliency for ``sample.orig_label`` scaled to [0, 1]; all-zero if flat."""
    s = raw_saliency(clf, sample.pixels, sample.orig_label)
    lo, hi = s.min(), s.max()
    if hi - lo > 0:
        return (s - lo) / (hi - lo)
    return np.zeros_like(s)


def saliency_ratio(clf, sample):
    """Mean raw saliency inside the causal mask over the mean outside it."""
    s = raw_saliency(clf, sample.pixels, sample.orig_label)
    m = sample.mask.astype(bool)
    if m.all() or not m.any():
        raise ConformanceError("mask must have both inside and outside pixels")
    outside = s[~m].mean()
    return float(s[m].mean() / outside) if outside > 0 else float("inf")


def encode_pgm(img):
    """8-bit binary portable graymap of a [0, 1] image."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def decode_pgm(blob):
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ConformanceError("not a binary graymap")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w) / 255.0


def history_csv(history):
    if history is None:
        return "iter,train_loss,meta_loss\n"
    return history.to_csv()


def report_emit(report, history, path_prefix, saliency=None, extra=None):
    """Write ``<prefix>metrics.json``, ``<prefix>history.csv`` and graymaps.

    The history file is skipped when ``history`` is None.
    ``saliency`` maps sample index to an H x W map; ``extra`` adds top-level
    JSON keys (a config echo, say). Returns the written paths.
    """
    prefix = os.fspath(path_prefix)
    payload = report.to_dict() if isinstance(report, MetricsReport) else dict(report)
    if extra:
        payload.update(extra)
    paths = [prefix + "metrics.json"]
    atomic_write_text(paths[0], json.dumps(payload, sort_keys=True, indent=2) + "\n")
    if history is not None:
        paths.append(prefix + "history.csv")
        atomic_write_text(paths[1], history_csv(history))
    for idx, img in sorted((saliency or {}).items()):
        p = f"{prefix}saliency_{int(idx)}.pgm"
        atomic_write_bytes(p, encode_pgm(img))
        paths.append(p)
    return paths
