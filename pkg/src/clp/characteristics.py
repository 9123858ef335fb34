"""Per-sample training characteristics fed to the perturbation network.

Ten quantities describe how hard a sample currently is, both on its own
(loss, margin, gradient norm, feature/weight cosine, entropy) and relative to
its class (class share, class mean loss, classifier weight norm, and the loss
and margin relative to the class means). Index ``i`` of a vector holds
characteristic ``g{i+1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError

NAMES = ("loss", "margin", "grad_norm", "cosine", "entropy", "class_share",
         "class_mean_loss", "weight_norm_sq", "relative_loss", "relative_margin")
NUM_CHARACTERISTICS = len(NAMES)
CF_PROB_CLIP = 1.0 - 1e-12


def softmax_np(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class CharVector:
    g: np.ndarray
    degenerate: bool = False

    def __getitem__(self, index):
        """One-based access, ``cv[1]`` is the sample loss."""
        return float(self.g[index - 1])


@dataclass(frozen=True)
class ClassStats:
    """Class sizes plus exponential moving averages of loss and margin."""

    counts: np.ndarray
    ema_loss: np.ndarray
    ema_margin: np.ndarray
    initialized: np.ndarray
    beta: float = 0.9

    @classmethod
    def create(cls, counts, beta=0.9):
        counts = np.asarray(counts, dtype=np.int64)
        c = counts.shape[0]
        return cls(counts, np.zeros(c), np.zeros(c), np.zeros(c, bool), float(beta))

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def num_classes(self):
        return self.counts.shape[0]


def update_class_stats(stats, labels, losses, margins):
    """EMA update for the classes present in the batch.

    A class seen for the first time starts at its batch mean; absent classes
    are left alone.
    """
    labels = np.asarray(labels, dtype=np.int64)
    losses = np.asarray(losses, dtype=np.float64)
    margins = np.asarray(margins, dtype=np.float64)
    ema_l, ema_m = stats.ema_loss.copy(), stats.ema_margin.copy()
    init = stats.initialized.copy()
    b = stats.beta
    for k in np.unique(labels):
        sel = labels == k
        ml, mm = losses[sel].mean(), margins[sel].mean()
        if init[k]:
            ema_l[k] = b * ema_l[k] + (1 - b) * ml
            ema_m[k] = b * ema_m[k] + (1 - b) * mm
        else:
            ema_l[k], ema_m[k], init[k] = ml, mm, True
    return replace(stats, ema_loss=ema_l, ema_margin=ema_m, initialized=init)


def extract_batch(logits, features, labels, class_weights, stats,
                  counterfactual=None, losses=None):
    """Characteristics for a batch of samples.

    Args:
        logits: (B, C) unperturbed logits.
        features: (B, F) penultimate activations.
        labels: (B,) class indices; for counterfactual rows, the original label.
        class_weights: (C, F) final-layer weight matrix (row per class).
        stats: :class:`ClassStats` initialised for every label in the batch.
        counterfactual: optional (B,) bool. These rows are scored as "not y":
            the loss is ``-log(1 - S_y)`` and the margin is negated.
        losses: optional (B,) precomputed sample losses.

    Returns:
        (B, 10) array and a (B,) bool array marking rows whose cosine was
        undefined (zero feature or weight row) and set to 0.
    """
    u = np.asarray(logits, dtype=np.float64)
    feats = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, c = u.shape
    if not np.all(stats.initialized[y]):
        missing = sorted(set(y[~stats.initialized[y]].tolist()))
        raise ContractError(f"class statistics not initialised for classes {missing}")
    cf = np.zeros(n, bool) if counterfactual is None else np.asarray(counterfactual, bool)
    rows = np.arange(n)

    s = softmax_np(u)
    s_y = s[rows, y]
    rest = s.copy()
    rest[rows, y] = -np.inf
    margin = s_y - rest.max(axis=1)
    margin = np.where(cf, -margin, margin)

    onehot = np.zeros_like(s)
    onehot[rows, y] = 1.0
    grad_norm = np.linalg.norm(onehot - s, axis=1)

    w = np.asarray(class_weights, dtype=np.float64)[y]
    fn = np.linalg.norm(feats, axis=1)
    wn = np.linalg.norm(w, axis=1)
    degenerate = (fn == 0) | (wn == 0)
    denom = np.where(degenerate, 1.0, fn * wn)
    cosine = np.where(degenerate, 0.0, (feats * w).sum(axis=1) / denom)

    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(s > 0, s * np.log2(s), 0.0)
    entropy = -plogp.sum(axis=1)

    if losses is None:
        ce = -log_softmax_np(u)[rows, y]
        cfl = -np.log1p(-np.minimum(s_y, CF_PROB_CLIP))
        losses = np.where(cf, cfl, ce)
    losses = np.asarray(losses, dtype=np.float64)

    share = stats.counts[y] / stats.total
    class_loss = stats.ema_loss[y]
    weight_sq = (w * w).sum(axis=1)
    g = np.stack([losses, margin, grad_norm, cosine, entropy, share, class_loss,
                  weight_sq, losses - class_loss, margin - stats.ema_margin[y]], axis=1)
    return g, degenerate


def extract(logits, feature, label, class_weights, stats, loss=None,
            counterfactual=False):
    """Single-sample version of :func:`extract_batch`."""
    g, deg = extract_batch(np.atleast_2d(logits), np.atleast_2d(feature), [label],
                           class_weights, stats, [counterfactual],
                           None if loss is None else [loss])
    return CharVector(g[0], bool(deg[0]))


@dataclass
class FeatureNormalizer:
    """Running z-scoring of characteristic vectors, clamped to ``[-kappa, kappa]``."""

    momentum: float = 0.99
    kappa: float = 5.0
    std_floor: float = 1e-6
    mean: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CHARACTERISTICS))
    var: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CHARACTERISTICS))
    updates: int = 0

    def update(self, batch):
        x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        bm = x.mean(axis=0)
        if self.updates == 0:
            self.mean = bm
            self.var = x.var(axis=0)
        else:
            b = self.momentum
            self.mean = b * self.mean + (1 - b) * bm
            self.var = b * self.var + (1 - b) * ((x - self.mean) ** 2).mean(axis=0)
        self.updates += 1

    def transform(self, batch):
        if self.updates == 0:
            raise ContractError("normalizer used before its first update")
        x = np.asarray(batch, dtype=np.float64)
        std = np.maximum(np.sqrt(self.var), self.std_floor)
        return np.clip((x - self.mean) / std, -self.kappa, self.kappa)

    def copy(self):
        return FeatureNormalizer(self.momentum, self.kappa, self.std_floor,
                                 self.mean.copy(), self.var.copy(), self.updates)


def normalize(cv, norm):
    """Update ``norm`` with ``cv`` (a vector or a batch), then z-score it."""
    g = cv.g if isinstance(cv, CharVector) else cv
    norm.update(g)
    out = norm.transform(g)
    return CharVector(out, cv.degenerate) if isinstance(cv, CharVector) else out
