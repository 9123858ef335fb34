"""Counterfactual and factual augmentation of metadata images.

Counterfactual samples keep the background and replace the causal region
(``(1 - r) * x + r * fill``); they carry the original label with the
counterfactual flag set, meaning "not this class". Factual samples keep the
causal region and replace the background (``r * x + (1 - r) * fill``) with the
label unchanged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensorad as ad
from .errors import AugmentationError, ConfigError
from .synthdata import (FLAG_COUNTERFACTUAL, FLAG_FACTUAL, SampleRecord, concat,
                        from_records)

COUNTERFACTUAL_METHODS = ("grey", "random", "shuffle", "tile")
FACTUAL_METHODS = ("random", "shuffle", "mix_rand", "fgsm")
RANDOM_SIGMA = 0.2
RANDOM_GRID = 4


@dataclass(frozen=True)
class InfillSpec:
    mode: str = "counterfactual"
    method: str = "grey"
    epsilon: float = 0.5
    fgsm_target: str = "random_other_class"

    def __post_init__(self):
        allowed = {"counterfactual": COUNTERFACTUAL_METHODS,
                   "factual": FACTUAL_METHODS}.get(self.mode)
        if allowed is None:
            raise ConfigError(f"unknown augmentation mode {self.mode!r}")
        if self.method not in allowed:
            raise ConfigError(f"{self.method!r} is not a {self.mode} infill method")
        if self.fgsm_target not in ("random_other_class", "untargeted"):
            raise ConfigError(f"unknown fgsm target rule {self.fgsm_target!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")


@dataclass(frozen=True)
class AugmentPlan:
    """How many samples to add and how to make them.

    ``total=None`` means twice the metadata size.
    """

    total: int | None = None
    cf_fraction: float = 0.5
    cf_method: str = "tile"
    f_method: str = "mix_rand"
    seed: int = 0
    epsilon: float = 0.5
    fgsm_target: str = "random_other_class"

    def __post_init__(self):
        if not 0 <= self.cf_fraction <= 1:
            raise ConfigError("cf_fraction must lie in [0, 1]")
        if self.total is not None and self.total < 0:
            raise ConfigError("total must be non-negative")
        InfillSpec("counterfactual", self.cf_method)
        InfillSpec("factual", self.f_method, self.epsilon, self.fgsm_target)


def bbox(mask):
    """Inclusive (top, bottom, left, right) of the non-zero region, or None."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1], cols[0], cols[-1]


def largest_background_strip(mask):
    """Largest of the four full-width/height strips around the mask's bbox.

    Returns (top, bottom, left, right) inclusive, or None if the mask's
    bounding box covers the whole image.
    """
    h, w = mask.shape
    box = bbox(mask)
    if box is None:
        return 0, h - 1, 0, w - 1
    t, b, l, r = box
    strips = [
        (t * w, (0, t - 1, 0, w - 1)),
        ((h - 1 - b) * w, (b + 1, h - 1, 0, w - 1)),
        (l * h, (0, h - 1, 0, l - 1)),
        ((w - 1 - r) * h, (0, h - 1, r + 1, w - 1)),
    ]
    area, rect = max(strips, key=lambda s: s[0])
    return rect if area > 0 else None


def _tile_fill(pixels, mask):
    """Tile the largest background strip over the image, anchored at the mask's bbox."""
    strip = largest_background_strip(mask)
    if strip is None:
        warnings.warn("no background left to tile; using grey infill", RuntimeWarning,
                      stacklevel=3)
        return np.full(pixels.shape, 0.5)
    t, b, l, r = strip
    patch = pixels[:, t:b + 1, l:r + 1].astype(np.float64)
    ph, pw = patch.shape[1:]
    h, w = mask.shape
    box = bbox(mask) or (0, 0, 0, 0)
    rows = (np.arange(h) - box[0]) % ph
    cols = (np.arange(w) - box[2]) % pw
    return patch[:, rows[:, None], cols[None, :]]


def random_fill_parts(shape, rng):
    """Low-frequency uniform base and the Gaussian detail added on top of it."""
    c, h, w = shape
    coarse = rng.uniform(0.0, 1.0, (c, RANDOM_GRID, RANDOM_GRID))
    rows = np.arange(h) * RANDOM_GRID // h
    cols = np.arange(w) * RANDOM_GRID // w
    base = coarse[:, rows[:, None], cols[None, :]]
    noise = rng.normal(0.0, RANDOM_SIGMA, shape)
    return base, noise


def _shuffle_fill(pixels, region, rng):
    out = pixels.astype(np.float64)
    pos = np.flatnonzero(region.reshape(-1))
    flat = out.reshape(out.shape[0], -1)
    flat[:, pos] = flat[:, rng.permutation(pos)]
    return out


def fgsm_fill(sample, model, epsilon, rng, target_rule="random_other_class"):
    """One signed-gradient step on the input, clipped to ``[0, 1]``.

    Targeted mode descends the loss of a random other class; untargeted mode
    ascends the loss of the sample's own class.
    """
    x = sample.pixels.astype(np.float64)
    C = model.num_classes
    y = sample.orig_label
    if target_rule == "random_other_class":
        target = int(rng.integers(C - 1))
        target += target >= y
        direction = -1.0
    else:
        target, direction = y, 1.0
    xs = ad.leaf(x.reshape(1, -1))
    _, logits = model.forward(xs)
    loss = ad.scale(ad.sum_(ad.row_gather(ad.log_softmax(logits), [target])), -1.0)
    (g,) = ad.backward(loss, [xs])
    step = direction * epsilon * np.sign(g.value.reshape(x.shape))
    return np.clip(x + step, 0.0, 1.0)


def infill_value(sample, method, rng, donor=None, model=None, *, mode="counterfactual",
                 epsilon=0.5, fgsm_target="random_other_class"):
    """Fill image for ``sample`` (3 x H x W, float64).

    Only the region that the chosen mode replaces matters: the mask for
    counterfactuals, its complement for factuals.
    """
    pixels = sample.pixels
    mask = sample.mask.astype(bool)
    if method == "grey":
        return np.full(pixels.shape, 0.5)
    if method == "random":
        base, noise = random_fill_parts(pixels.shape, rng)
        return np.clip(base + noise, 0.0, 1.0)
    if method == "shuffle":
        region = mask if mode == "counterfactual" else ~mask
        return _shuffle_fill(pixels, region, rng)
    if method == "tile":
        return _tile_fill(pixels, mask)
    if method == "mix_rand":
        if donor is None or donor.orig_label == sample.orig_label:
            raise AugmentationError("mix_rand needs a donor from a different class")
        return _tile_fill(donor.pixels, donor.mask.astype(bool))
    if method == "fgsm":
        if model is None:
            raise AugmentationError("fgsm infill needs a classifier")
        return fgsm_fill(sample, model, epsilon, rng, fgsm_target)
    raise ConfigError(f"unknown infill method {method!r}")


def _require_mask(sample):
    if not sample.mask.any():
        raise AugmentationError("sample has an empty causal mask")


def _blend(keep_where_one, pixels, r, fill):
    x = pixels.astype(np.float64)
    r = r.astype(np.float64)[None]
    if keep_where_one:
        out = r * x + (1.0 - r) * fill
    else:
        out = (1.0 - r) * x + r * fill
    return out.astype(np.float32)


def counterfactual_augment(sample, spec, rng, donor=None, model=None, fill=None):
    """Replace the causal region; the result means "not ``orig_label``"."""
    _require_mask(sample)
    if fill is None:
        fill = infill_value(sample, spec.method, rng, donor, model, mode="counterfactual",
                            epsilon=spec.epsilon, fgsm_target=spec.fgsm_target)
    pixels = _blend(False, sample.pixels, sample.mask, fill)
    return SampleRecord(pixels, sample.mask.copy(), sample.orig_label, sample.orig_label,
                        sample.group, (sample.flags | FLAG_COUNTERFACTUAL) & 0xFF)


def factual_augment(sample, spec, rng, donor=None, model=None, fill=None):
    """Replace the background, keep the causal region and the label."""
    _require_mask(sample)
    if fill is None:
        fill = infill_value(sample, spec.method, rng, donor, model, mode="factual",
                            epsilon=spec.epsilon, fgsm_target=spec.fgsm_target)
    pixels = _blend(True, sample.pixels, sample.mask, fill)
    return SampleRecord(pixels, sample.mask.copy(), sample.label, sample.orig_label,
                        sample.group, (sample.flags | FLAG_FACTUAL) & 0xFF)


def _substream(seed, mode_tag, index):
    return np.random.default_rng([int(seed), mode_tag, int(index)])


def augment_metadata(meta, plan, model=None):
    """Return ``meta`` followed by its counterfactual and factual augmentations.

    Source samples are taken round-robin; the ``i``-th augmentation of each mode
    uses its own random substream, so output is a pure function of the inputs.
    """
    m = len(meta)
    if m == 0:
        raise AugmentationError("cannot augment an empty metadata set")
    total = 2 * m if plan.total is None else plan.total
    n_cf = int(round(plan.cf_fraction * total))
    n_f = total - n_cf
    cf_spec = InfillSpec("counterfactual", plan.cf_method, plan.epsilon, plan.fgsm_target)
    f_spec = InfillSpec("factual", plan.f_method, plan.epsilon, plan.fgsm_target)
    samples = list(meta)
    added = []
    for i in range(n_cf):
        added.append(counterfactual_augment(samples[i % m], cf_spec,
                                            _substream(plan.seed, 0, i), model=model))
    for i in range(n_f):
        src = samples[i % m]
        rng = _substream(plan.seed, 1, i)
        donor = None
        if f_spec.method == "mix_rand":
            pool = [s for s in samples if s.orig_label != src.orig_label]
            if not pool:
                raise AugmentationError("mix_rand found no donor of a different class")
            donor = pool[int(rng.integers(len(pool)))]
        added.append(factual_augment(src, f_spec, rng, donor=donor, model=model))
    extra = from_records(added, meta.num_classes, meta.height, meta.width)
    out = concat(meta, extra)
    return out.with_columns(provenance={
        "augment_total": total, "augment_cf": n_cf, "augment_f": n_f,
        "cf_method": plan.cf_method, "f_method": plan.f_method,
        "augment_seed": plan.seed})
