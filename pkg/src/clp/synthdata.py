"""Synthetic spurious-correlation image datasets and bias injection.

Each image is one class-determined coloured shape pasted onto a background
texture. The background is linked to the class with probability ``rho``,
which creates a background/label shortcut; ground-truth causal masks (the
shape's bounding box) come for free.

The module also provides the bias regimes used for evaluation (long-tail
subsampling, uniform/flip label noise, clean balanced metadata draws) and the
``CLPD`` binary container codec.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, InfeasibleError

FLAG_COUNTERFACTUAL = 1
FLAG_FACTUAL = 2
FLAG_NOISY = 4

SHAPES = ("square", "disk", "cross", "triangle", "ring", "diagonal_bar")
SHAPE_COLORS = np.array([
    [0.90, 0.10, 0.10],
    [0.95, 0.85, 0.10],
    [0.10, 0.85, 0.90],
    [0.90, 0.10, 0.85],
    [0.97, 0.97, 0.97],
    [1.00, 0.55, 0.00],
])
TEXTURE_KINDS = ("solid", "stripes", "checker", "speckle")
BACKGROUND_COLORS = np.array([
    [0.25, 0.45, 0.25],
    [0.20, 0.30, 0.55],
    [0.55, 0.45, 0.30],
    [0.45, 0.45, 0.45],
    [0.60, 0.30, 0.40],
    [0.30, 0.50, 0.50],
    [0.50, 0.50, 0.20],
    [0.35, 0.25, 0.45],
])
SPECKLE_AMPLITUDE = 0.05


@dataclass(frozen=True)
class SampleRecord:
    pixels: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8, 1 = causal
    label: int
    orig_label: int
    group: int
    flags: int = 0

    @property
    def is_counterfactual(self):
        return bool(self.flags & FLAG_COUNTERFACTUAL)


@dataclass(frozen=True)
class BiasSpec:
    imbalance_ratio: float = 1.0
    noise_kind: str = "none"
    noise_ratio: float = 0.0
    spuriousness: float = 0.95
    group_counts: dict | None = None

    def __post_init__(self):
        if self.imbalance_ratio < 1:
            raise ConfigError("imbalance_ratio must be >= 1")
        if not 0 <= self.noise_ratio < 1:
            raise ConfigError("noise_ratio must lie in [0, 1)")
        if self.noise_kind not in ("none", "uniform", "flip"):
            raise ConfigError(f"unknown noise kind {self.noise_kind!r}")
        if not 0 <= self.spuriousness <= 1:
            raise ConfigError("spuriousness must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class DatasetContainer:
    """An immutable, column-oriented set of samples."""

    pixels: np.ndarray  # (N, 3, H, W) float32
    masks: np.ndarray  # (N, H, W) uint8
    labels: np.ndarray  # (N,) int64
    orig_labels: np.ndarray
    groups: np.ndarray
    flags: np.ndarray  # (N,) uint8
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.labels.shape[0]
        for name in ("pixels", "masks", "orig_labels", "groups", "flags"):
            if getattr(self, name).shape[0] != n:
                raise ConfigError(f"column {name} has the wrong length")
        for name in ("pixels", "masks", "labels", "orig_labels", "groups", "flags"):
            getattr(self, name).flags.writeable = False

    @property
    def height(self):
        return self.pixels.shape[2]

    @property
    def width(self):
        return self.pixels.shape[3]

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i):
        return SampleRecord(self.pixels[i], self.masks[i], int(self.labels[i]),
                            int(self.orig_labels[i]), int(self.groups[i]),
                            int(self.flags[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices, **provenance):
        idx = np.asarray(indices, dtype=np.int64)
        return DatasetContainer(
            self.pixels[idx], self.masks[idx], self.labels[idx],
            self.orig_labels[idx], self.groups[idx], self.flags[idx],
            self.num_classes, {**self.provenance, **provenance})

    def with_columns(self, **changes):
        prov = changes.pop("provenance", None)
        out = dataclasses.replace(self, **changes)
        if prov is not None:
            object.__setattr__(out, "provenance", {**self.provenance, **prov})
        return out

    def equals(self, other):
        """Bit-level equality of all stored columns (provenance excluded)."""
        return (self.num_classes == other.num_classes
                and all(np.array_equal(getattr(self, c), getattr(other, c))
                        for c in ("pixels", "masks", "labels", "orig_labels",
                                  "groups", "flags"))
                and self.pixels.shape == other.pixels.shape)


def from_records(records, num_classes, height, width, provenance=None):
    """Build a container from an iterable of :class:`SampleRecord`."""
    records = list(records)
    n = len(records)
    pixels = np.zeros((n, 3, height, width), np.float32)
    masks = np.zeros((n, height, width), np.uint8)
    cols = np.zeros((4, n), np.int64)
    for i, r in enumerate(records):
        pixels[i] = r.pixels
        masks[i] = r.mask
        cols[:, i] = (r.label, r.orig_label, r.group, r.flags)
    return DatasetContainer(pixels, masks, cols[0], cols[1], cols[2],
                            cols[3].astype(np.uint8), num_classes,
                            dict(provenance or {}))


def empty_container(num_classes, height, width):
    return from_records([], num_classes, height, width)


def concat(*datasets):
    first = datasets[0]
    return DatasetContainer(
        *(np.concatenate([getattr(d, c) for d in datasets])
          for c in ("pixels", "masks", "labels", "orig_labels", "groups", "flags")),
        first.num_classes, dict(first.provenance))


# ------------------------------------------------------------------ rendering


def shape_mask(kind, size):
    """Boolean silhouette of ``kind`` on a ``size`` x ``size`` canvas."""
    i, j = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    r2 = (i - c) ** 2 + (j - c) ** 2
    if kind == "square":
        return np.ones((size, size), bool)
    if kind == "disk":
        return r2 <= (size / 2.0) ** 2
    if kind == "cross":
        return (np.abs(i - c) <= size / 4.0) | (np.abs(j - c) <= size / 4.0)
    if kind == "triangle":
        return j <= i
    if kind == "ring":
        return (r2 <= (size / 2.0) ** 2) & (r2 >= (size / 4.0) ** 2)
    if kind == "diagonal_bar":
        return np.abs(i - j) <= 0.35 * size
    raise ConfigError(f"unknown shape {kind!r}")


def render_texture(index, height, width, rng):
    """Background texture ``index`` as a (3, H, W) float64 image."""
    kind = TEXTURE_KINDS[index % len(TEXTURE_KINDS)]
    color = BACKGROUND_COLORS[index % len(BACKGROUND_COLORS)]
    img = np.broadcast_to(color[:, None, None], (3, height, width)).copy()
    rows, cols = np.mgrid[0:height, 0:width]
    if kind == "stripes":
        dark = (rows // 2) % 2 == 1
        img[:, dark] *= 0.7
    elif kind == "checker":
        light = ((rows // 4) + (cols // 4)) % 2 == 1
        img[:, light] = np.minimum(1.0, img[:, light] + 0.2)
    elif kind == "speckle":
        img += rng.uniform(-SPECKLE_AMPLITUDE, SPECKLE_AMPLITUDE, img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_sample(label, background, height, width, size_range, rng):
    lo, hi = size_range
    size = int(rng.integers(lo, hi + 1))
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    img = render_texture(background, height, width, rng)
    sil = shape_mask(SHAPES[label], size)
    color = SHAPE_COLORS[label]
    patch = img[:, top:top + size, left:left + size]
    patch[:, sil] = color[:, None]
    rr, cc = np.nonzero(sil)
    mask = np.zeros((height, width), np.uint8)
    mask[top + rr.min():top + rr.max() + 1, left + cc.min():left + cc.max() + 1] = 1
    return img.astype(np.float32), mask


def default_size_range(height, width):
    side = min(height, width)
    return max(4, side // 4), max(5, side // 2)


def synth_spurshapes(num_classes, num_backgrounds, height, width, n_per_class,
                     rho, seed, *, balanced=False, size_range=None):
    """Render a shapes-on-textures dataset with a background shortcut.

    With probability ``rho`` a sample of class ``k`` gets the class-linked
    background ``k mod B``; otherwise the background is uniform over the other
    ``B - 1`` textures. ``balanced=True`` ignores ``rho`` and cycles through
    all backgrounds so every (class, background) group has equal size (up to
    one sample).

    Returns:
        DatasetContainer ordered class-major; ``group = label * B + background``.
    """
    C, B = int(num_classes), int(num_backgrounds)
    if C < 2 or B < 2:
        raise ConfigError("need at least 2 classes and 2 backgrounds")
    if C > len(SHAPES):
        raise ConfigError(f"shape library holds only {len(SHAPES)} shapes")
    if B > len(BACKGROUND_COLORS):
        raise ConfigError(f"texture library holds only {len(BACKGROUND_COLORS)} textures")
    if height < 16 or width < 16:
        raise ConfigError("images must be at least 16x16")
    if not 0 <= rho <= 1:
        raise ConfigError("rho must lie in [0, 1]")
    size_range = tuple(size_range or default_size_range(height, width))
    if size_range[0] < 3 or size_range[0] > size_range[1] or size_range[1] > min(height, width):
        raise ConfigError(f"shape size range {size_range} does not fit {height}x{width}")

    rng = np.random.default_rng(seed)
    n = C * n_per_class
    pixels = np.zeros((n, 3, height, width), np.float32)
    masks = np.zeros((n, height, width), np.uint8)
    labels = np.repeat(np.arange(C, dtype=np.int64), n_per_class)
    groups = np.zeros(n, np.int64)
    for s in range(n):
        k = int(labels[s])
        linked = k % B
        if balanced:
            bg = (linked + s % n_per_class) % B
        elif rng.random() < rho:
            bg = linked
        else:
            others = [b for b in range(B) if b != linked]
            bg = others[int(rng.integers(len(others)))]
        pixels[s], masks[s] = _render_sample(k, bg, height, width, size_range, rng)
        groups[s] = k * B + bg
    prov = {"generator": "spurshapes", "classes": C, "backgrounds": B,
            "height": height, "width": width, "n_per_class": n_per_class,
            "rho": rho, "balanced": balanced, "seed": seed}
    return DatasetContainer(pixels, masks, labels, labels.copy(), groups,
                            np.zeros(n, np.uint8), C, prov)


def background_of(ds, num_backgrounds):
    return ds.groups % num_backgrounds


# -------------------------------------------------------------- bias regimes


def longtail_counts(n, num_classes, ratio):
    """Per-class sizes ``floor(n * ratio ** (-k / (C - 1)))``."""
    k = np.arange(num_classes)
    raw = n * np.power(float(ratio), -k / (num_classes - 1))
    # guard against 9.999999... at exact integers
    return np.floor(raw + 1e-9).astype(np.int64)


def apply_longtail(ds, ratio, seed):
    """Subsample a class-balanced dataset to a geometric long-tail profile."""
    counts = ds.class_counts
    n = int(counts[0])
    if np.any(counts != n):
        raise InfeasibleError("apply_longtail expects a class-balanced dataset")
    if ratio < 1:
        raise ConfigError("imbalance ratio must be >= 1")
    if ratio > n:
        raise InfeasibleError(f"ratio {ratio} exceeds per-class size {n}")
    keep_counts = longtail_counts(n, ds.num_classes, ratio)
    rng = np.random.default_rng(seed)
    keep = []
    for k in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == k)
        keep.append(np.sort(rng.choice(members, size=keep_counts[k], replace=False)))
    return ds.subset(np.sort(np.concatenate(keep)), imbalance_ratio=ratio,
                     longtail_seed=seed)


def ring_confusions(num_classes):
    """Default flip-noise table: each class is confused with its ring neighbours."""
    return {k: ((k - 1) % num_classes, (k + 1) % num_classes)
            for k in range(num_classes)}


def inject_label_noise(ds, kind, ratio, seed, confusions=None):
    """Corrupt exactly ``floor(ratio * N)`` labels chosen without replacement."""
    C = ds.num_classes
    if kind not in ("uniform", "flip"):
        raise ConfigError(f"unknown noise kind {kind!r}")
    if not 0 < ratio < 1:
        raise ConfigError("noise ratio must lie in (0, 1)")
    if kind == "flip" and C < 3:
        raise ConfigError("flip noise needs at least 3 classes")
    table = confusions or ring_confusions(C)
    rng = np.random.default_rng(seed)
    n_noisy = int(np.floor(ratio * len(ds)))
    chosen = np.sort(rng.choice(len(ds), size=n_noisy, replace=False))
    labels = ds.labels.copy()
    flags = ds.flags.copy()
    for i in chosen:
        y = int(ds.orig_labels[i])
        if kind == "uniform":
            new = int(rng.integers(C - 1))
            new += new >= y
        else:
            new = int(table[y][int(rng.integers(2))])
        labels[i] = new
        flags[i] |= FLAG_NOISY
    return ds.with_columns(labels=labels, flags=flags,
                           provenance={"noise_kind": kind, "noise_ratio": ratio,
                                       "noise_seed": seed})


def draw_meta_subset(ds, per_class, seed):
    """Split off a clean, class- and group-balanced metadata set.

    Within each class, clean samples are drawn round-robin over the groups
    present (each group's candidates in seeded random order).

    Returns:
        (meta, rest) as disjoint containers.
    """
    rng = np.random.default_rng(seed)
    clean = ((ds.flags & FLAG_NOISY) == 0) & (ds.labels == ds.orig_labels)
    picked = []
    for k in range(ds.num_classes):
        cand = np.flatnonzero(clean & (ds.labels == k))
        if cand.size < per_class:
            raise InfeasibleError(
                f"class {k} has {cand.size} clean samples, need {per_class}")
        queues = [list(rng.permutation(cand[ds.groups[cand] == g]))
                  for g in np.unique(ds.groups[cand])]
        taken = 0
        while taken < per_class:
            for q in queues:
                if q and taken < per_class:
                    picked.append(q.pop(0))
                    taken += 1
    meta_idx = np.sort(np.asarray(picked, dtype=np.int64))
    rest_idx = np.setdiff1d(np.arange(len(ds)), meta_idx)
    return (ds.subset(meta_idx, meta_per_class=per_class, meta_seed=seed),
            ds.subset(rest_idx))


# ------------------------------------------------------------------ container

MAGIC = b"CLPD"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHI")


def _record_dtype(height, width):
    g = height * width
    return np.dtype([("label", "<u2"), ("orig_label", "<u2"), ("group", "<u2"),
                     ("flags", "u1"), ("pad", "u1"), ("mask", "u1", (g,)),
                     ("pixels", "<f4", (3 * g,))])


def encode_container(ds):
    n, h, w = len(ds), ds.height, ds.width
    rec = np.zeros(n, _record_dtype(h, w))
    rec["label"] = ds.labels
    rec["orig_label"] = ds.orig_labels
    rec["group"] = ds.groups
    rec["flags"] = ds.flags
    rec["mask"] = ds.masks.reshape(n, h * w)
    rec["pixels"] = ds.pixels.reshape(n, 3 * h * w)
    return _HEADER.pack(MAGIC, VERSION, ds.num_classes, h, w, n) + rec.tobytes()


def decode_container(buf):
    buf = bytes(buf)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, C, h, w, n = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    dt = _record_dtype(h, w)
    need = _HEADER.size + n * dt.itemsize
    if len(buf) < need:
        complete = (len(buf) - _HEADER.size) // dt.itemsize
        raise FormatError(f"truncated after {complete} of {n} samples",
                          _HEADER.size + complete * dt.itemsize)
    if len(buf) > need:
        raise FormatError("trailing bytes after last sample", need)
    rec = np.frombuffer(buf, dt, count=n, offset=_HEADER.size)
    return DatasetContainer(
        rec["pixels"].reshape(n, 3, h, w).astype(np.float32),
        rec["mask"].reshape(n, h, w).astype(np.uint8),
        rec["label"].astype(np.int64), rec["orig_label"].astype(np.int64),
        rec["group"].astype(np.int64), rec["flags"].astype(np.uint8), C, {})


def write_container(ds, path):
    from .ioutil import atomic_write_bytes
    atomic_write_bytes(path, encode_container(ds))


def read_container(path):
    with open(path, "rb") as fh:
        return decode_container(fh.read())
