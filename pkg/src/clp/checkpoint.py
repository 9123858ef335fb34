"""Binary checkpoint for a trained classifier / perturbation-network pair.

Layout (little-endian): magic ``CLPW``, version u16, JSON length u32, JSON
architecture block (UTF-8), block count u16, then per block: name length u16,
name, ndim u8, ndim x u32 dims, float64 data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .characteristics import ClassStats, FeatureNormalizer
from .errors import FormatError, VersioningError
from .ioutil import atomic_write_bytes
from .models import Classifier, PerturbNet

MAGIC = b"CLPW"
VERSION = 1


@dataclass
class Checkpoint:
    clf: Classifier
    pnet: PerturbNet
    stats: ClassStats | None = None
    normalizer: FeatureNormalizer | None = None
    info: dict = field(default_factory=dict)

    def check_compatible(self, input_dim, num_classes):
        if (input_dim, num_classes) != (self.clf.input_dim, self.clf.num_classes):
            raise VersioningError(
                f"checkpoint expects input_dim={self.clf.input_dim}, "
                f"classes={self.clf.num_classes}; data has {input_dim}, {num_classes}")


def _architecture(ck):
    return {
        "classifier": {"input_dim": ck.clf.input_dim, "num_classes": ck.clf.num_classes,
                       "hidden_widths": list(ck.clf.hidden_widths),
                       "activation": ck.clf.activation},
        "pnet": {"num_classes": ck.pnet.num_classes, "hidden": ck.pnet.hidden,
                 "activation": ck.pnet.activation, "n_inputs": ck.pnet.n_inputs},
        "stats_beta": None if ck.stats is None else ck.stats.beta,
        "normalizer": None if ck.normalizer is None else {
            "momentum": ck.normalizer.momentum, "kappa": ck.normalizer.kappa,
            "std_floor": ck.normalizer.std_floor, "updates": ck.normalizer.updates},
        "info": ck.info,
    }


def _blocks(ck):
    out = [(f"clf.{i}", p) for i, p in enumerate(ck.clf.param_values())]
    out += [(f"pnet.{i}", p) for i, p in enumerate(ck.pnet.param_values())]
    if ck.stats is not None:
        out += [("stats.counts", ck.stats.counts), ("stats.ema_loss", ck.stats.ema_loss),
                ("stats.ema_margin", ck.stats.ema_margin),
                ("stats.initialized", ck.stats.initialized)]
    if ck.normalizer is not None:
        out += [("norm.mean", ck.normalizer.mean), ("norm.var", ck.normalizer.var)]
    return out


def encode_checkpoint(ck):
    arch = json.dumps(_architecture(ck), sort_keys=True).encode("utf-8")
    parts = [struct.pack("<4sHI", MAGIC, VERSION, len(arch)), arch]
    blocks = _blocks(ck)
    parts.append(struct.pack("<H", len(blocks)))
    for name, arr in blocks:
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob):
    r = _Reader(bytes(blob))
    magic, version, arch_len = r.unpack("<4sHI", "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise VersioningError(f"checkpoint version {version}, expected {VERSION}")
    try:
        arch = json.loads(r.take(arch_len, "architecture").decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"unreadable architecture block: {exc}", 10) from exc
    (count,) = r.unpack("<H", "block count")
    blocks = {}
    for _ in range(count):
        (klen,) = r.unpack("<H", "block name")
        name = r.take(klen, "block name").decode("utf-8")
        (ndim,) = r.unpack("<B", "block rank")
        shape = r.unpack(f"<{ndim}I", "block shape")
        size = int(np.prod(shape)) * 8
        blocks[name] = np.frombuffer(r.take(size, name), "<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes after last block", r.pos)
    return _rebuild(arch, blocks)


def _params(model, prefix, blocks):
    expected = model.param_shapes()
    got = []
    for i, shape in enumerate(expected):
        arr = blocks.get(f"{prefix}.{i}")
        if arr is None or arr.shape != shape:
            raise VersioningError(f"parameter {prefix}.{i} missing or not of shape {shape}")
        got.append(arr)
    return model.with_params(got)


def _rebuild(arch, blocks):
    c, p = arch["classifier"], arch["pnet"]
    clf = _params(Classifier(c["input_dim"], c["num_classes"], c["hidden_widths"],
                             c["activation"]), "clf", blocks)
    pnet = _params(PerturbNet(p["num_classes"], p["hidden"], p["activation"],
                              n_inputs=p["n_inputs"]), "pnet", blocks)
    stats = None
    if arch.get("stats_beta") is not None:
        stats = ClassStats(blocks["stats.counts"].astype(np.int64), blocks["stats.ema_loss"],
                           blocks["stats.ema_margin"], blocks["stats.initialized"] > 0,
                           arch["stats_beta"])
    norm = None
    if arch.get("normalizer") is not None:
        n = arch["normalizer"]
        norm = FeatureNormalizer(n["momentum"], n["kappa"], n["std_floor"],
                                 blocks["norm.mean"], blocks["norm.var"], n["updates"])
    return Checkpoint(clf, pnet, stats, norm, arch.get("info", {}))


def write_checkpoint(path, ck):
    atomic_write_bytes(path, encode_checkpoint(ck))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
