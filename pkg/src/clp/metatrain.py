"""Losses and the alternating classifier / perturbation-network training loop.

One CLP iteration on a training minibatch and a metadata minibatch:

1. virtual step: ``W_hat(Omega) = W - eta1 * grad_W L_train(W, Omega)``, kept
   differentiable in ``Omega``;
2. meta update: ``Omega <- Omega - eta2 * grad_Omega L_meta(W_hat(Omega), Omega)``;
3. actual step: the classifier optimizer step on ``L_train(W, Omega_new)``.

``L`` is the mean per-sample loss plus the saliency penalty. Characteristics
enter as constants: they are computed from the current (or virtual) classifier
and are not differentiated through.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensorad as ad
from .characteristics import (ClassStats, FeatureNormalizer, extract_batch,
                              log_softmax_np, softmax_np, update_class_stats)
from .errors import ConfigError, NumericError
from .models import ModelConfig, build_models
from .synthdata import FLAG_COUNTERFACTUAL, DatasetContainer

log = logging.getLogger(__name__)

CF_PROB_CLIP = 1.0 - 1e-12


@dataclass
class TrainConfig:
    eta1: float = 0.1
    eta2: float = 1e-3
    batch_n: int = 32
    batch_m: int = 32
    iters: int = 1000
    lam: float = 0.6
    momentum: float = 0.9
    weight_decay: float = 5e-4
    detach_saliency: bool = False
    train_saliency: bool = True
    seed: int = 0
    stats_beta: float = 0.9

    def __post_init__(self):
        if self.eta1 < 0 or self.eta2 < 0:
            raise ConfigError("step sizes must be non-negative")
        if self.batch_n < 1 or self.batch_m < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")


# ---------------------------------------------------------------------- data


@dataclass(frozen=True)
class Batch:
    x: np.ndarray  # (B, D) float64
    y: np.ndarray  # (B,) labels; original label for counterfactual rows
    counterfactual: np.ndarray  # (B,) bool
    saliency_weights: np.ndarray  # (B, D)

    def __len__(self):
        return self.y.shape[0]


def saliency_weights(masks, channels):
    """Per-input weights ``(1 - r_j) / sum_j (1 - r_j)``, repeated over channels.

    Rows whose mask covers every position get all-zero weights.
    """
    m = np.asarray(masks, dtype=np.float64).reshape(len(masks), -1)
    bg = 1.0 - m
    denom = bg.sum(axis=1, keepdims=True)
    w = np.divide(bg, denom, out=np.zeros_like(bg), where=denom > 0)
    return np.tile(w, (1, channels))


@dataclass(frozen=True, eq=False)
class ArrayDataset:
    """Flattened float64 view of a dataset, ready for batching."""

    x: np.ndarray  # (N, channels * G)
    masks: np.ndarray  # (N, G)
    labels: np.ndarray
    orig_labels: np.ndarray
    flags: np.ndarray
    groups: np.ndarray
    num_classes: int
    channels: int = 3

    @classmethod
    def from_container(cls, ds):
        if isinstance(ds, cls):
            return ds
        n = len(ds)
        return cls(ds.pixels.reshape(n, -1).astype(np.float64),
                   ds.masks.reshape(n, -1), np.asarray(ds.labels),
                   np.asarray(ds.orig_labels), np.asarray(ds.flags),
                   np.asarray(ds.groups), ds.num_classes, ds.pixels.shape[1] if n else 3)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def batch(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        cf = (self.flags[idx] & FLAG_COUNTERFACTUAL) != 0
        y = np.where(cf, self.orig_labels[idx], self.labels[idx])
        return Batch(self.x[idx], y, cf, saliency_weights(self.masks[idx], self.channels))


def as_arrays(ds):
    return ArrayDataset.from_container(ds) if isinstance(ds, DatasetContainer) else ds


class EpochSampler:
    """Batches drawn from successive seeded permutations of ``range(n)``."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.perm = rng.permutation(n)
        self.pos = 0
        self.epochs_done = 0

    def next(self, k):
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
                self.epochs_done += 1
            take = min(k - len(out), self.n - self.pos)
            out.extend(self.perm[self.pos:self.pos + take])
            self.pos += take
        return np.asarray(out, dtype=np.int64)


# -------------------------------------------------------------------- losses


def _per_sample_losses(logp, labels, counterfactual=None):
    """Cross-entropy per row, or ``-log(1 - S_y)`` on counterfactual rows."""
    ly = ad.row_gather(logp, labels)
    ce = ad.scale(ly, -1.0)
    if counterfactual is None or not np.any(counterfactual):
        return ce
    p = ad.clamp(ad.exp(ly), 0.0, CF_PROB_CLIP)
    cfl = ad.scale(ad.log(ad.sub(1.0, p)), -1.0)
    m = np.asarray(counterfactual, dtype=np.float64)
    return ad.add(ad.mul(ce, ad.constant(1.0 - m)), ad.mul(cfl, ad.constant(m)))


def ce_loss(logits, labels):
    """Batch mean of ``-log softmax(logits)_y``."""
    return ad.mean(_per_sample_losses(ad.log_softmax(logits), labels))


def cf_loss(logits, orig_labels):
    """Batch mean of ``-log(1 - softmax(logits)_y)`` with the probability clipped."""
    n = len(orig_labels)
    return ad.mean(_per_sample_losses(ad.log_softmax(logits), orig_labels,
                                      np.ones(n, bool)))


def _saliency_term(xs, logp, labels, weights, lam, create_graph):
    """``lam * mean_i sum_j (d p_{y_i} / d x_ij)^2 * w_ij`` as a graph node."""
    p_y = ad.exp(ad.row_gather(logp, labels))
    (gx,) = ad.backward(ad.sum_(p_y), [xs], create_graph=create_graph)
    total = ad.sum_(ad.mul(ad.square(gx), ad.constant(weights)))
    return ad.scale(total, lam / len(labels))


def saliency_reg(clf, x, masks, labels, lam, params=None, delta=None,
                 create_graph=True, channels=3):
    """Saliency penalty on background inputs, averaged over the batch."""
    if lam == 0:
        return ad.constant(0.0)
    xs = ad.leaf(np.asarray(x, dtype=np.float64).reshape(len(labels), -1))
    _, u = clf.forward(xs, params)
    z = u if delta is None else ad.add(u, delta)
    return _saliency_term(xs, ad.log_softmax(z), np.asarray(labels),
                          saliency_weights(masks, channels), lam, create_graph)


def batch_objective(xs, logits, batch, delta, lam, create_graph):
    """Mean loss plus saliency penalty for one batch whose forward pass is done.

    Returns:
        (objective node, mean-loss node).
    """
    z = logits if delta is None else ad.add(logits, delta)
    logp = ad.log_softmax(z)
    loss = ad.mean(_per_sample_losses(logp, batch.y, batch.counterfactual))
    if lam == 0 or not xs.requires_grad:
        return loss, loss
    reg = _saliency_term(xs, logp, batch.y, batch.saliency_weights, lam, create_graph)
    return ad.add(loss, reg), loss


# --------------------------------------------------------------------- state


@dataclass
class TrainState:
    clf: object
    pnet: object
    stats: ClassStats | None
    normalizer: FeatureNormalizer
    t: int = 0
    velocity: list = field(default_factory=list)
    rng_batch: np.random.Generator | None = None
    rng_meta: np.random.Generator | None = None


@dataclass
class History:
    iters: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    meta_loss: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def record(self, t, train_loss, meta_loss):
        self.iters.append(t)
        self.train_loss.append(float(train_loss))
        self.meta_loss.append(None if meta_loss is None else float(meta_loss))

    def same_as(self, other):
        return (self.iters == other.iters and self.train_loss == other.train_loss
                and self.meta_loss == other.meta_loss and self.epochs == other.epochs)

    def to_csv(self):
        """Per-iteration rows; epoch metrics fill extra columns on the rows they follow."""
        cols = ["iter", "train_loss", "meta_loss"]
        if self.epochs:
            cols += ["epoch", "top1_acc", "worst_group_acc"]
        at = {e["iter"]: e for e in self.epochs}
        lines = [",".join(cols)]
        for t, a, b in zip(self.iters, self.train_loss, self.meta_loss):
            row = [str(t), repr(a), "" if b is None else repr(b)]
            if self.epochs:
                e = at.get(t)
                row += ["", "", ""] if e is None else [
                    str(e["epoch"]), repr(e["top1_acc"]), repr(e["worst_group_acc"])]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def init_class_stats(clf, data, beta=0.9, chunk=512):
    """Class statistics initialised from one pass of ``clf`` over ``data``."""
    data = as_arrays(data)
    losses, margins = [], []
    with ad.no_grad():
        for start in range(0, len(data), chunk):
            sl = slice(start, start + chunk)
            _, u = clf.forward(ad.constant(data.x[sl]))
            y = data.labels[sl]
            rows = np.arange(len(y))
            losses.append(-log_softmax_np(u.value)[rows, y])
            s = softmax_np(u.value)
            s_y = s[rows, y]
            s[rows, y] = -np.inf
            margins.append(s_y - s.max(axis=1))
    stats = ClassStats.create(data.class_counts, beta)
    if len(data) == 0:
        return stats
    return update_class_stats(stats, data.labels, np.concatenate(losses),
                              np.concatenate(margins))


def init_state(cfg, clf, pnet, train_data, with_meta=True):
    stats = init_class_stats(clf, train_data, cfg.stats_beta) if with_meta else None
    return TrainState(clf, pnet, stats, FeatureNormalizer(), 0,
                      [np.zeros_like(p) for p in clf.param_values()],
                      np.random.default_rng([cfg.seed, 1]),
                      np.random.default_rng([cfg.seed, 2]))


def _forward(clf, params, batch, need_input_grad):
    xs = ad.leaf(batch.x) if need_input_grad else ad.constant(batch.x)
    feats, u = clf.forward(xs, params)
    return xs, feats, u


def _uses_saliency(cfg):
    return cfg.lam > 0 and cfg.train_saliency


@dataclass
class VirtualStep:
    w_leaves: list
    w_hat: list
    omega: list
    xs: ad.Node
    logits: ad.Node
    characteristics: np.ndarray  # raw, (n, 10)
    normalized: np.ndarray
    objective: ad.Node


def train_characteristics(state, batch, feats, logits, update_normalizer=True):
    raw, _ = extract_batch(logits, feats, batch.y, state.clf.class_weights(),
                           state.stats, batch.counterfactual)
    if update_normalizer:
        state.normalizer.update(raw)
    return raw, state.normalizer.transform(raw)


def inner_virtual_step(state, batch, cfg):
    """Differentiable look-ahead ``W_hat(Omega)`` (plain SGD, no momentum).

    Also updates the feature normalizer with the batch characteristics, which
    are extracted from the current classifier.
    """
    w = state.clf.leaves()
    omega = state.pnet.leaves()
    xs, feats, u = _forward(state.clf, w, batch, _uses_saliency(cfg))
    raw, cv = train_characteristics(state, batch, feats.value, u.value)
    delta = state.pnet.forward(ad.constant(cv), omega)
    obj, _ = batch_objective(xs, u, batch, delta, cfg.lam, not cfg.detach_saliency)
    grads = ad.backward(obj, w, create_graph=True)
    w_hat = [ad.sub(p, ad.scale(g, cfg.eta1)) for p, g in zip(w, grads)]
    return VirtualStep(w, w_hat, omega, xs, u, raw, cv, obj)


def meta_characteristics(state, w_hat_values, mbatch, feats, logits):
    raw, _ = extract_batch(logits, feats, mbatch.y, w_hat_values[-2].T, state.stats,
                           mbatch.counterfactual)
    return state.normalizer.transform(raw)


def meta_objective(clf, pnet, w_hat, omega, mbatch, cfg, cv_meta=None, state=None):
    """Meta loss at the virtual classifier.

    ``cv_meta`` (normalized characteristics of the metadata batch) is computed
    from ``w_hat`` unless given; passing it freezes that input, which is what
    the analytic meta-gradient assumes.

    Returns:
        (objective node, cv_meta).
    """
    xm, fm, um = _forward(clf, w_hat, mbatch, cfg.lam > 0)
    if cv_meta is None:
        cv_meta = meta_characteristics(state, [p.value for p in w_hat], mbatch,
                                       fm.value, um.value)
    delta = pnet.forward(ad.constant(cv_meta), omega)
    obj, _ = batch_objective(xm, um, mbatch, delta, cfg.lam, not cfg.detach_saliency)
    return obj, cv_meta


def meta_update(state, vstep, mbatch, cfg):
    """One gradient step on the perturbation network. Returns the meta loss."""
    obj, _ = meta_objective(state.clf, state.pnet, vstep.w_hat, vstep.omega, mbatch,
                            cfg, state=state)
    grads = ad.backward(obj, vstep.omega)
    new = []
    for p, g in zip(vstep.omega, grads):
        if not np.all(np.isfinite(g.value)):
            raise NumericError("non-finite meta-gradient")
        new.append(p.value - cfg.eta2 * g.value)
    state.pnet = state.pnet.with_params(new)
    return float(obj.value)


def actual_step(state, batch, cfg, cv=None, forward=None):
    """Optimizer step on the classifier with perturbations from the current Omega.

    ``cv`` are the batch's normalized characteristics; ``None`` means no
    perturbation at all (the ERM step). ``forward`` may carry
    ``(weight leaves, xs, logits)`` from the virtual step to skip a recompute.

    Returns:
        The objective value before the step.
    """
    if forward is None:
        w = state.clf.leaves()
        xs, _, u = _forward(state.clf, w, batch, _uses_saliency(cfg))
    else:
        w, xs, u = forward
    delta = None
    if cv is not None:
        with ad.no_grad():
            delta = ad.constant(state.pnet.forward(ad.constant(cv)).value)
    obj, _ = batch_objective(xs, u, batch, delta, cfg.lam, True)
    grads = ad.backward(obj, w)
    params = []
    for i, (p, g) in enumerate(zip(state.clf.param_values(), grads)):
        d = g.value
        if not np.all(np.isfinite(d)):
            raise NumericError("non-finite classifier gradient")
        if cfg.weight_decay:
            d = d + cfg.weight_decay * p
        v = cfg.momentum * state.velocity[i] + d
        state.velocity[i] = v
        params.append(p - cfg.eta1 * v)
    state.clf = state.clf.with_params(params)
    return float(obj.value)


# ---------------------------------------------------------------------- loops


def _evaluate_epoch(state, eval_data, t, epoch):
    from .evalreport import evaluate
    rep = evaluate(state.clf, eval_data)
    return {"iter": t, "epoch": epoch, "top1_acc": rep.top1_acc,
            "worst_group_acc": rep.worst_group_acc}


def run_training(cfg, train_data, meta_data=None, *, clf, pnet, mode="clp",
                 eval_data=None):
    """Shared loop for ``clp`` (meta step each iteration) and ``erm`` (none)."""
    train_data = as_arrays(train_data)
    meta = as_arrays(meta_data) if meta_data is not None else None
    if eval_data is not None:
        eval_data = as_arrays(eval_data)
    use_meta = mode == "clp"
    if use_meta and (meta is None or len(meta) == 0):
        raise ConfigError("CLP training needs a non-empty metadata set")
    state = init_state(cfg, clf, pnet, train_data, with_meta=use_meta)
    sampler = EpochSampler(len(train_data), state.rng_batch)
    hist = History()
    for t in range(1, cfg.iters + 1):
        try:
            batch = train_data.batch(sampler.next(cfg.batch_n))
            meta_loss = None
            if use_meta:
                vstep = inner_virtual_step(state, batch, cfg)
                midx = state.rng_meta.integers(0, len(meta), size=cfg.batch_m)
                meta_loss = meta_update(state, vstep, meta.batch(midx), cfg)
                loss = actual_step(state, batch, cfg, vstep.normalized,
                                   (vstep.w_leaves, vstep.xs, vstep.logits))
                state.stats = update_class_stats(state.stats, batch.y,
                                                 vstep.characteristics[:, 0],
                                                 vstep.characteristics[:, 1])
            else:
                loss = actual_step(state, batch, cfg)
        except NumericError as exc:
            raise NumericError(f"iteration {t}: {exc}") from exc
        state.t = t
        hist.record(t, loss, meta_loss)
        if eval_data is not None and (sampler.pos == sampler.n or t == cfg.iters):
            hist.epochs.append(_evaluate_epoch(state, eval_data, t, sampler.epochs_done))
    return state, hist


def train(cfg, train_ds, meta_ds, model_cfg=None, eval_ds=None, models=None):
    """CLP training. ``meta_ds`` is the (already augmented) metadata set."""
    data = as_arrays(train_ds)
    clf, pnet = models or build_models(data.x.shape[1], data.num_classes,
                                       model_cfg or ModelConfig())
    return run_training(cfg, data, meta_ds, clf=clf, pnet=pnet, mode="clp",
                        eval_data=eval_ds)


def train_erm(cfg, train_ds, model_cfg=None, eval_ds=None, models=None):
    """Same loop with zero perturbation and no meta step."""
    data = as_arrays(train_ds)
    clf, pnet = models or build_models(data.x.shape[1], data.num_classes,
                                       model_cfg or ModelConfig())
    return run_training(cfg, data, None, clf=clf, pnet=pnet, mode="erm",
                        eval_data=eval_ds)
