import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clp import synthdata as sd
from clp.errors import ConfigError, FormatError, InfeasibleError

# floor(1000 * 100 ** (-k / 9)), evaluated with 50-digit decimal arithmetic
LONGTAIL_1000_10_100 = [1000, 599, 359, 215, 129, 77, 46, 27, 16, 10]
# 3 sigma of Binomial(1000, 0.05): 3 * sqrt(1000 * 0.05 * 0.95)
BINOM_3SIGMA = 20.676


@pytest.fixture(scope="module")
def small():
    return sd.synth_spurshapes(4, 4, 16, 16, 30, 0.9, 5)


def test_rho_one_links_every_background():
    ds = sd.synth_spurshapes(3, 2, 16, 16, 20, 1.0, 0)
    assert np.all(sd.background_of(ds, 2) == ds.labels % 2)
    assert np.all(ds.groups == ds.labels * 2 + ds.labels % 2)


def test_minority_counts_binomial():
    ds = sd.synth_spurshapes(2, 2, 16, 16, 1000, 0.95, 123)
    bg = sd.background_of(ds, 2)
    for k in range(2):
        minority = int(np.sum((ds.labels == k) & (bg != k)))
        assert abs(minority - 50) <= BINOM_3SIGMA


def test_masks_are_solid_rectangles(small):
    for m in small.masks:
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        assert rows.size and cols.size
        box = m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        assert box.all() and m.sum() == box.size


def test_shapes_visible_against_background():
    ds = sd.synth_spurshapes(6, 4, 24, 24, 10, 0.5, 1)
    for i in range(len(ds)):
        bg_only = sd.render_texture(int(ds.groups[i] % 4), 24, 24,
                                    np.random.default_rng(0))
        m = ds.masks[i].astype(bool)
        # shapes are vivid; textures are muted, so any overlap with the
        # texture colour is at least 0.1 away per pixel
        diff = np.abs(ds.pixels[i] - bg_only).max(axis=0)[m]
        assert np.mean(diff > 0.1) >= 0.5


def test_pixels_in_unit_range(small):
    assert small.pixels.dtype == np.float32
    assert small.pixels.min() >= 0 and small.pixels.max() <= 1


def test_balanced_groups():
    ds = sd.synth_spurshapes(4, 4, 16, 16, 20, 0.0, 3, balanced=True)
    assert np.all(np.bincount(ds.groups, minlength=16) == 5)


def test_deterministic():
    a = sd.synth_spurshapes(3, 3, 16, 16, 10, 0.8, 9)
    b = sd.synth_spurshapes(3, 3, 16, 16, 10, 0.8, 9)
    assert sd.encode_container(a) == sd.encode_container(b)


@pytest.mark.parametrize("kwargs", [
    dict(num_classes=1), dict(num_backgrounds=1), dict(height=8),
    dict(num_classes=7), dict(rho=1.5), dict(size_range=(4, 40)),
])
def test_synth_config_errors(kwargs):
    base = dict(num_classes=3, num_backgrounds=3, height=16, width=16, n_per_class=2,
                rho=0.5, seed=0)
    base.update(kwargs)
    with pytest.raises(ConfigError):
        sd.synth_spurshapes(**base)


def test_longtail_schedule_frozen():
    assert sd.longtail_counts(1000, 10, 100).tolist() == LONGTAIL_1000_10_100


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(40, 2000), st.floats(1.0, 20.0))
def test_longtail_ratio_bound(c, n, ratio):
    counts = sd.longtail_counts(n, c, ratio)
    assert counts[0] == n and np.all(np.diff(counts) <= 0)
    # flooring only shrinks the smallest class: min >= n / ratio - 1
    r = counts.max() / counts.min()
    assert ratio - 1e-9 <= r <= ratio * n / (n - ratio) + 1e-9


def test_apply_longtail_counts_and_identity():
    ds = sd.synth_spurshapes(4, 2, 16, 16, 40, 0.9, 2)
    lt = sd.apply_longtail(ds, 10, 1)
    assert lt.class_counts.tolist() == sd.longtail_counts(40, 4, 10).tolist()
    same = sd.apply_longtail(ds, 1, 1)
    assert same.equals(ds) and same.provenance["imbalance_ratio"] == 1
    with pytest.raises(InfeasibleError):
        sd.apply_longtail(ds, 41, 1)
    with pytest.raises(InfeasibleError):
        sd.apply_longtail(lt, 2, 1)


@pytest.mark.parametrize("ratio", [0.1, 0.4, 0.37])
def test_uniform_noise_exact_count(ratio):
    ds = sd.synth_spurshapes(4, 2, 16, 16, 25, 0.5, 4)
    noisy = sd.inject_label_noise(ds, "uniform", ratio, 7)
    changed = noisy.labels != noisy.orig_labels
    flagged = (noisy.flags & sd.FLAG_NOISY) != 0
    assert changed.sum() == int(np.floor(ratio * len(ds)))
    assert np.array_equal(changed, flagged)
    assert np.array_equal(noisy.orig_labels, ds.labels)


def test_flip_noise_lands_on_neighbours():
    ds = sd.synth_spurshapes(6, 2, 16, 16, 20, 0.5, 4)
    noisy = sd.inject_label_noise(ds, "flip", 0.5, 3)
    sel = (noisy.flags & sd.FLAG_NOISY) != 0
    y, z = noisy.orig_labels[sel], noisy.labels[sel]
    assert np.all((z == (y + 1) % 6) | (z == (y - 1) % 6))
    custom = sd.inject_label_noise(ds, "flip", 0.5, 3, {k: (0, 1) if k > 1 else (2, 3)
                                                       for k in range(6)})
    s = (custom.flags & sd.FLAG_NOISY) != 0
    assert set(custom.labels[s][custom.orig_labels[s] > 1].tolist()) <= {0, 1}


def test_noise_errors():
    ds2 = sd.synth_spurshapes(2, 2, 16, 16, 5, 0.5, 4)
    with pytest.raises(ConfigError):
        sd.inject_label_noise(ds2, "flip", 0.2, 0)
    with pytest.raises(ConfigError):
        sd.inject_label_noise(ds2, "uniform", 0.0, 0)
    with pytest.raises(ConfigError):
        sd.inject_label_noise(ds2, "swap", 0.2, 0)


def test_meta_subset_clean_balanced_disjoint():
    ds = sd.synth_spurshapes(4, 4, 16, 16, 40, 0.0, 6, balanced=True)
    ds = sd.inject_label_noise(ds, "uniform", 0.3, 1)
    meta, rest = sd.draw_meta_subset(ds, 10, 2)
    assert len(meta) == 40 and len(rest) == len(ds) - 40
    assert np.all(meta.labels == meta.orig_labels)
    assert not np.any(meta.flags & sd.FLAG_NOISY)
    assert meta.class_counts.tolist() == [10] * 4
    # round robin over 4 groups: 10 per class -> 3, 3, 2, 2
    for k in range(4):
        per_group = np.bincount(meta.groups[meta.labels == k] % 4, minlength=4)
        assert sorted(per_group.tolist()) == [2, 2, 3, 3]
    # disjoint by identity: pixel rows of meta never appear in rest
    rest_keys = {r.tobytes() for r in rest.pixels}
    assert not any(m.tobytes() in rest_keys for m in meta.pixels)
    with pytest.raises(InfeasibleError):
        sd.draw_meta_subset(ds, 40, 2)


def test_container_round_trip(tmp_path, small):
    p = tmp_path / "d.clpd"
    sd.write_container(small, p)
    back = sd.read_container(p)
    assert back.equals(small)
    assert back.pixels.dtype == np.float32 and back.labels.dtype == np.int64


def test_empty_container_round_trip():
    e = sd.empty_container(3, 16, 16)
    back = sd.decode_container(sd.encode_container(e))
    assert len(back) == 0 and back.num_classes == 3 and back.height == 16


def test_container_header_layout(small):
    blob = sd.encode_container(small)
    assert blob[:4] == b"CLPD"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert int.from_bytes(blob[6:8], "little") == 4
    assert int.from_bytes(blob[12:16], "little") == len(small)
    rec = 2 + 2 + 2 + 1 + 1 + 16 * 16 + 3 * 16 * 16 * 4
    assert len(blob) == 16 + rec * len(small)


def test_container_format_errors(small):
    blob = sd.encode_container(small)
    with pytest.raises(FormatError) as e:
        sd.decode_container(b"XXXX" + blob[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        sd.decode_container(blob[:4] + (2).to_bytes(2, "little") + blob[6:])
    assert e.value.offset == 4
    with pytest.raises(FormatError) as e:
        sd.decode_container(blob[:-5])
    assert e.value.offset > 16
    with pytest.raises(FormatError):
        sd.decode_container(blob + b"\0")
    with pytest.raises(FormatError):
        sd.decode_container(blob[:10])


def test_container_is_immutable(small):
    with pytest.raises(ValueError):
        small.labels[0] = 3


def test_bias_spec_validation():
    sd.BiasSpec()
    for bad in (dict(imbalance_ratio=0.5), dict(noise_ratio=1.0), dict(noise_kind="x"),
                dict(spuriousness=2)):
        with pytest.raises(ConfigError):
            sd.BiasSpec(**bad)
