from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ammnet.data import (
    CLASS_BANDS,
    CLUTTER,
    DSM_NOISE,
    GenSpec,
    Raster,
    augment,
    band_violations,
    decode_raster,
    encode_raster,
    generate,
    hflip,
    load_split,
    prepare_labels,
    read_raster,
    rot90,
    split_counts,
    vflip,
    write_dataset,
    write_raster,
)
from ammnet.errors import FormatError, GenerationError


def test_generation_is_deterministic():
    a, b = generate(GenSpec(seed=5)), generate(GenSpec(seed=5))
    for x, y in ((a.rgb, b.rgb), (a.dsm, b.dsm), (a.labels, b.labels)):
        assert np.array_equal(x.data, y.data)
    assert not np.array_equal(a.rgb.data, generate(GenSpec(seed=6)).rgb.data)


def test_shapes_and_dtypes():
    s = generate(GenSpec(size=64, seed=1))
    assert s.rgb.data.shape == (3, 64, 64) and s.rgb.data.dtype == np.uint8
    assert s.dsm.data.shape == (1, 64, 64) and s.dsm.data.dtype == np.float32
    assert s.labels.data.shape == (1, 64, 64) and s.labels.data.max() <= 5


def test_band_invariant_pre_and_post_noise():
    for seed in range(20):
        assert band_violations(generate(GenSpec(seed=seed, dsm_noise=0.0))) == 0
        assert band_violations(generate(GenSpec(seed=seed)), tol=3 * DSM_NOISE + 1e-5) == 0


def test_occlusion_touches_rgb_only():
    for seed in range(5):
        clean, occ = generate(GenSpec(seed=seed)), generate(GenSpec(seed=seed, occlusion_rate=0.3))
        assert np.array_equal(clean.dsm.data, occ.dsm.data)
        assert np.array_equal(clean.labels.data, occ.labels.data)
        assert not np.array_equal(clean.rgb.data, occ.rgb.data)


def test_occlusion_coverage():
    changed = []
    for seed in range(30):
        clean, occ = generate(GenSpec(seed=seed)), generate(GenSpec(seed=seed, occlusion_rate=0.3))
        changed.append((clean.rgb.data != occ.rgb.data).any(axis=0).mean())
    assert np.mean(changed) >= 0.25


def test_tree_and_low_vegetation_differ_only_in_height():
    rgb_t, rgb_l, h_t, h_l = [], [], [], []
    for seed in range(30):
        s = generate(GenSpec(seed=seed))
        lab = s.labels.data[0]
        rgb_t.append(s.rgb.data[:, lab == 3].astype(float))
        rgb_l.append(s.rgb.data[:, lab == 2].astype(float))
        h_t.append(s.dsm.data[0][lab == 3])
        h_l.append(s.dsm.data[0][lab == 2])
    mt, ml = np.concatenate(rgb_t, axis=1).mean(axis=1), np.concatenate(rgb_l, axis=1).mean(axis=1)
    assert np.all(np.abs(mt - ml) < 10)
    assert np.concatenate(h_t).mean() - np.concatenate(h_l).mean() > 2.5


def test_every_foreground_class_is_common():
    present = np.zeros(5)
    for seed in range(100):
        lab = generate(GenSpec(seed=seed)).labels.data
        present += [np.any(lab == c) for c in range(5)]
    assert (present[1:] >= 95).all()


def test_invalid_spec():
    with pytest.raises(GenerationError):
        GenSpec(size=48).validate()
    with pytest.raises(GenerationError):
        GenSpec(occlusion_rate=1.5).validate()


# -- augmentation ------------------------------------------------------------
def test_double_flip_is_identity():
    a = np.random.default_rng(0).standard_normal((2, 5, 6))
    assert np.array_equal(hflip(hflip(a)), a)
    assert np.array_equal(vflip(vflip(a)), a)


def test_rot180_moves_delta():
    a = np.zeros((1, 6, 6))
    a[0, 1, 4] = 1
    out = rot90(a, 2)
    assert out[0, 6 - 1 - 1, 6 - 1 - 4] == 1 and out.sum() == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_augmentation_preserves_registration(scene_seed, aug_seed):
    scene = generate(GenSpec(seed=scene_seed, dsm_noise=0.0))
    out = augment(scene, aug_seed)
    assert band_violations(out) == 0
    # every augmented (rgb, dsm, label) triple must exist in the source scene
    src = set(zip(map(tuple, scene.rgb.data.reshape(3, -1).T), scene.dsm.data.ravel(), scene.labels.data.ravel()))
    dst = set(zip(map(tuple, out.rgb.data.reshape(3, -1).T), out.dsm.data.ravel(), out.labels.data.ravel()))
    assert dst <= src


# -- raster container --------------------------------------------------------
def test_raster_round_trip(tmp_path):
    s = generate(GenSpec(seed=2))
    for r in (s.rgb, s.dsm, s.labels):
        path = tmp_path / "r.amrd"
        write_raster(path, r)
        back = read_raster(path)
        assert back.data.dtype == r.data.dtype and np.array_equal(back.data, r.data)
        assert encode_raster(back) == path.read_bytes()


def test_raster_header_layout():
    buf = encode_raster(Raster(np.zeros((1, 64, 64), np.uint8)))
    # magic, version, dtype code, channels, then u32 height and width
    assert len(buf) == 15 + 4096
    assert buf[:4] == b"AMRD"


def test_raster_truncation_names_lengths():
    buf = encode_raster(Raster(np.zeros((1, 8, 8), np.uint8)))
    with pytest.raises(FormatError, match="expected 64 bytes, got 60"):
        decode_raster(buf[:-4])
    with pytest.raises(FormatError):
        decode_raster(buf[:10])
    with pytest.raises(FormatError):
        decode_raster(b"NOPE" + buf[4:])


# -- dataset directories -----------------------------------------------------
def test_write_dataset_layout_and_determinism(tmp_path):
    h1 = write_dataset(tmp_path / "a", 10, GenSpec(), seed=7)
    write_dataset(tmp_path / "b", 10, GenSpec(), seed=7)
    counts = split_counts(10)
    for split, n in counts.items():
        ids = (tmp_path / "a" / split / "manifest.txt").read_text().split()
        assert len(ids) == n
        for sid in ids:
            for kind in ("rgb", "dsm", "lbl"):
                a = (tmp_path / "a" / split / f"{sid}.{kind}.amrd").read_bytes()
                assert a == (tmp_path / "b" / split / f"{sid}.{kind}.amrd").read_bytes()
    assert sum(h.sum() for h in h1.values()) == 10 * 64 * 64
    arrays = load_split(tmp_path / "a", "train")
    assert arrays.rgb.shape == (counts["train"], 3, 64, 64)


def test_missing_manifest_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        load_split(tmp_path, "train")


def test_clutter_becomes_ignore():
    lab = np.array([[0, CLUTTER], [3, 4]], dtype=np.uint8)
    assert prepare_labels(lab).tolist() == [[0, 255], [3, 4]]


def test_band_table_is_consistent():
    for lo, hi in CLASS_BANDS.values():
        assert lo <= hi
