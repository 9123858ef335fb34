import struct

import numpy as np
import pytest

from clp import checkpoint as ckp
from clp.characteristics import ClassStats, FeatureNormalizer, update_class_stats
from clp.errors import FormatError, VersioningError
from clp.models import Classifier, PerturbNet


def make():
    stats = update_class_stats(ClassStats.create([3, 2]), [0, 1], [0.5, 1.5], [0.1, -0.2])
    norm = FeatureNormalizer()
    norm.update(np.random.default_rng(0).normal(size=(5, 10)))
    pnet = PerturbNet(2, 4, seed=3)
    p = pnet.param_values()
    p[2] = np.arange(8.0).reshape(p[2].shape)
    return ckp.Checkpoint(Classifier(6, 2, (5, 3), "tanh", seed=1), pnet.with_params(p),
                          stats, norm, {"mode": "clp", "iters": 7})


def test_round_trip(tmp_path):
    ck = make()
    path = tmp_path / "m.clpw"
    ckp.write_checkpoint(path, ck)
    back = ckp.read_checkpoint(path)
    for a, b in zip(back.clf.param_values() + back.pnet.param_values(),
                    ck.clf.param_values() + ck.pnet.param_values()):
        assert np.array_equal(a, b)
    assert back.clf.hidden_widths == (5, 3) and back.clf.activation == "tanh"
    assert np.array_equal(back.stats.ema_loss, ck.stats.ema_loss)
    assert np.array_equal(back.stats.initialized, ck.stats.initialized)
    assert np.array_equal(back.normalizer.var, ck.normalizer.var)
    assert back.normalizer.updates == 1 and back.info == ck.info
    assert ckp.encode_checkpoint(back) == ckp.encode_checkpoint(ck)


def test_optional_parts_absent():
    ck = make()
    ck.stats = ck.normalizer = None
    back = ckp.decode_checkpoint(ckp.encode_checkpoint(ck))
    assert back.stats is None and back.normalizer is None


def test_header_layout():
    blob = ckp.encode_checkpoint(make())
    magic, version, n = struct.unpack("<4sHI", blob[:10])
    assert magic == b"CLPW" and version == 1 and blob[10:10 + n].startswith(b"{")


def test_format_errors():
    blob = ckp.encode_checkpoint(make())
    with pytest.raises(FormatError):
        ckp.decode_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(VersioningError):
        ckp.decode_checkpoint(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(FormatError):
        ckp.decode_checkpoint(blob[:-3])
    with pytest.raises(FormatError):
        ckp.decode_checkpoint(blob + b"\0")


def test_shape_mismatch_is_versioning_error():
    ck = make()
    other = ckp.Checkpoint(Classifier(6, 2, (4, 3), "tanh"), ck.pnet)
    blob = ckp.encode_checkpoint(other)
    # claim wider hidden layer than the stored blocks provide
    bad = blob.replace(b'"hidden_widths": [4, 3]', b'"hidden_widths": [5, 3]')
    bad = bad[:6] + struct.pack("<I", struct.unpack("<I", blob[6:10])[0]) + bad[10:]
    with pytest.raises(VersioningError):
        ckp.decode_checkpoint(bad)


def test_check_compatible():
    ck = make()
    ck.check_compatible(6, 2)
    with pytest.raises(VersioningError):
        ck.check_compatible(12, 2)
    with pytest.raises(VersioningError):
        ck.check_compatible(6, 3)
