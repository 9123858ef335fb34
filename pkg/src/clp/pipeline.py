"""Config-driven stages: synthesize, augment, train, evaluate."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import synthdata as sd
from .causalaug import AugmentPlan, augment_metadata
from .checkpoint import Checkpoint
from .config import RunConfig
from .errors import ConfigError
from .metatrain import TrainConfig, train, train_erm
from .models import ModelConfig, build_models

MODES = ("clp", "erm", "meta_lp")
_CF_FRACTION = {"both": 0.5, "counterfactual": 1.0, "factual": 0.0}


def build_datasets(cfg: RunConfig):
    """Training set with the configured biases, a clean metadata set and a test set.

    Metadata and test images come from separate group-balanced draws with no
    background/class coupling, so neither overlaps the training set.
    """
    d = cfg.data
    train_ds = sd.synth_spurshapes(d.classes, d.backgrounds, d.height, d.width,
                                   d.n_per_class, d.spuriousness, d.seed)
    if d.imbalance_ratio > 1:
        train_ds = sd.apply_longtail(train_ds, d.imbalance_ratio, d.seed + 1)
    if d.noise_kind != "none":
        if d.noise_ratio <= 0:
            raise ConfigError("data.noise_ratio must be > 0 when noise_kind is set")
        train_ds = sd.inject_label_noise(train_ds, d.noise_kind, d.noise_ratio, d.seed + 2)
    per_group = -(-2 * d.meta_per_class // d.backgrounds)
    pool = sd.synth_spurshapes(d.classes, d.backgrounds, d.height, d.width,
                               per_group * d.backgrounds, 0.0, d.seed + 3, balanced=True)
    meta, _ = sd.draw_meta_subset(pool, d.meta_per_class, d.seed + 3)
    test = sd.synth_spurshapes(d.classes, d.backgrounds, d.height, d.width,
                               d.test_per_class, 0.0, d.seed + 4, balanced=True)
    return {"train": train_ds, "meta": meta, "test": test}


def model_config(cfg: RunConfig):
    m = cfg.model
    return ModelConfig(hidden_widths=tuple(m.hidden_widths), pnet_hidden=m.pnet_hidden,
                       init_seed=m.init_seed)


def train_config(cfg: RunConfig):
    t = cfg.train
    return TrainConfig(eta1=t.eta1, eta2=t.eta2, batch_n=t.batch_n, batch_m=t.batch_m,
                       iters=t.iters, lam=t.lam, momentum=t.momentum,
                       weight_decay=t.weight_decay, detach_saliency=t.detach_saliency,
                       train_saliency=t.train_saliency, seed=t.seed)


def augment(cfg: RunConfig, meta, model=None):
    a = cfg.augment
    plan = AugmentPlan(cf_fraction=_CF_FRACTION[a.mode], cf_method=a.cf_method,
                       f_method=a.f_method, seed=a.seed, epsilon=a.epsilon,
                       fgsm_target=a.fgsm_target)
    return augment_metadata(meta, plan, model)


def run_mode(cfg: RunConfig, mode, datasets, eval_ds=None):
    """Train in ``mode``; returns (checkpoint, history, metadata actually used)."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    train_ds = datasets["train"]
    input_dim = 3 * train_ds.height * train_ds.width
    clf, pnet = build_models(input_dim, train_ds.num_classes, model_config(cfg))
    tcfg = train_config(cfg)
    meta = None
    if mode == "erm":
        # the baseline is plain cross-entropy
        tcfg = dataclasses.replace(tcfg, lam=0.0)
        state, hist = train_erm(tcfg, train_ds, eval_ds=eval_ds, models=(clf, pnet))
    else:
        meta = datasets["meta"]
        if mode == "clp":
            # FGSM infill uses the classifier as it is before training
            meta = augment(cfg, meta, clf)
        state, hist = train(tcfg, train_ds, meta, eval_ds=eval_ds, models=(clf, pnet))
    info = {"mode": mode, "iters": state.t,
            "meta_size": 0 if meta is None else len(meta)}
    ck = Checkpoint(state.clf, state.pnet, state.stats,
                    state.normalizer if state.normalizer.updates else None, info)
    return ck, hist, meta


def group_table(ds, num_backgrounds):
    """Rows of (class, background, count) covering every group of ``ds``."""
    counts = np.bincount(np.asarray(ds.groups, dtype=np.int64),
                         minlength=ds.num_classes * num_backgrounds)
    return [(g // num_backgrounds, g % num_backgrounds, int(c)) for g, c in enumerate(counts)]
