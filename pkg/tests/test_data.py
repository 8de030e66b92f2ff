import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roimatch.data import (LEVELS, DanglingPathError, ManifestNotFoundError, ManifestSchemaError,
                           SplitLeakError, assign_splits, augment, load_manifest, load_sample,
                           normalize_image, preprocess, save_sample, synth_dataset, synth_pair,
                           write_manifest)
from roimatch.geometry import rasterize


def test_synth_deterministic():
    a, b = synth_pair("II", 3), synth_pair("II", 3)
    assert np.array_equal(a.target_image, b.target_image)
    assert np.array_equal(a.reference_mask, b.reference_mask)
    assert a.target_polygons.to_json() == b.target_polygons.to_json()


def test_synth_seeds_differ():
    assert not np.array_equal(synth_pair("I", 0).target_image, synth_pair("I", 1).target_image)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(LEVELS), st.integers(0, 10_000))
def test_synth_samples_valid(level, seed):
    s = synth_pair(level, seed)
    s.validate()
    assert s.level == level and 1 <= len(s.target_polygons) <= 6
    assert s.reference_image.dtype == np.uint8 and s.reference_image.shape == (256, 256, 3)


def test_level_one_positions_close():
    s = synth_pair("I", 5)
    ys, xs = np.nonzero(s.reference_mask)
    cx, cy = xs.mean() + 0.5, ys.mean() + 0.5
    dist = min(np.hypot(*(np.array(p.centroid) - (cx, cy))) for p in s.target_polygons)
    assert dist <= 4


def test_level_two_positions_far():
    for seed in range(5):
        s = synth_pair("II", seed)
        ys, xs = np.nonzero(s.reference_mask)
        c = np.array([xs.mean() + 0.5, ys.mean() + 0.5])
        for p in s.target_polygons:
            assert np.hypot(*(np.array(p.centroid) - c)) > 0.2 * np.hypot(256, 256) - 1


def test_unknown_level():
    with pytest.raises(ValueError):
        synth_pair("IV", 0)


def test_synth_dataset_counts():
    ds = synth_dataset(2, seed=1, size=128)
    assert [s.level for s in ds] == ["I", "I", "II", "II", "III", "III"]
    assert len({s.pair_id for s in ds}) == 6


def test_assign_splits_proportions():
    ids = [f"p{i}" for i in range(30)]
    splits = assign_splits(ids)
    counts = {k: list(splits.values()).count(k) for k in ("train", "val", "test")}
    assert counts == {"train": 24, "val": 3, "test": 3}
    assert assign_splits(list(reversed(ids))) == splits


def test_normalize_range():
    img = np.array([[[0, 128, 255]]], np.uint8)
    out = normalize_image(img)
    assert out.shape == (3, 1, 1) and out.dtype == np.float32
    assert out.min() == -1 and out.max() == 1


def test_preprocess_scales_geometry():
    s = synth_pair("III", 2, size=256)
    p = preprocess(s, (128, 128))
    assert p.reference.shape == p.target.shape == (3, 128, 128)
    assert p.mask.shape == (128, 128) and set(np.unique(p.mask)) <= {0.0, 1.0}
    assert p.target_scale == (0.5, 0.5)
    for a, b in zip(s.target_polygons, p.polygons):
        assert np.allclose(a.points * 0.5, b.points)


def test_augment_deterministic_and_consistent():
    s = synth_pair("II", 4)
    a, b = augment(s, 11, p_flip=1, p_rotate=1), augment(s, 11, p_flip=1, p_rotate=1)
    assert np.array_equal(a.target_image, b.target_image)
    a.validate()
    # the rasterized polygons still sit on the rendered elements: flip puts them mirrored
    flipped = augment(s, 0, p_flip=1, p_rotate=0, p_color=0)
    m0 = rasterize(s.target_polygons, 256, 256) > 0
    m1 = rasterize(flipped.target_polygons, 256, 256) > 0
    assert np.array_equal(m0[:, ::-1], m1)
    assert np.array_equal(flipped.target_image, s.target_image[:, ::-1])
    assert np.array_equal(flipped.reference_mask, s.reference_mask[:, ::-1])


def test_augment_identity():
    s = synth_pair("I", 1)
    out = augment(s, 3, p_flip=0, p_rotate=0, p_color=0)
    assert np.array_equal(out.target_image, s.target_image)
    assert out.target_polygons.to_json() == s.target_polygons.to_json()


def write_pairs(tmp_path, n=3):
    records = []
    for i in range(n):
        records.append(save_sample(synth_pair("I", i, size=64), tmp_path, "train" if i else "test"))
    write_manifest(records, tmp_path / "manifest.json")
    return records


def test_manifest_round_trip(tmp_path):
    write_pairs(tmp_path)
    man = load_manifest(tmp_path / "manifest.json")
    assert len(man.records) == 3 and len(man.split("train")) == 2
    s = load_sample(man.records[0])
    orig = synth_pair("I", 0, size=64)
    assert np.array_equal(s.reference_image, orig.reference_image)
    assert np.array_equal(s.reference_mask, orig.reference_mask)
    assert s.target_polygons.to_json() == orig.target_polygons.to_json()


def test_manifest_missing(tmp_path):
    with pytest.raises(ManifestNotFoundError):
        load_manifest(tmp_path / "nope.json")
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.json")


def test_manifest_extra_key(tmp_path):
    records = write_pairs(tmp_path, 1)
    records[0]["extra"] = 1
    write_manifest(records, tmp_path / "manifest.json")
    with pytest.raises(ManifestSchemaError):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_bad_version(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"version": 2, "records": []}))
    with pytest.raises(ManifestSchemaError):
        load_manifest(tmp_path / "m.json")


def test_manifest_dangling(tmp_path):
    records = write_pairs(tmp_path, 1)
    (tmp_path / records[0]["tgt_image"]).unlink()
    with pytest.raises(DanglingPathError):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_split_leak(tmp_path):
    records = write_pairs(tmp_path, 1)
    write_manifest(records + [dict(records[0], split="val")], tmp_path / "manifest.json")
    with pytest.raises(SplitLeakError):
        load_manifest(tmp_path / "manifest.json")


def test_sample_validation():
    s = synth_pair("I", 0)
    s.reference_mask = np.zeros_like(s.reference_mask)
    with pytest.raises(ValueError):
        s.validate()


def prompt_center(s):
    ys, xs = np.nonzero(s.reference_mask)
    return np.array([xs.mean() + 0.5, ys.mean() + 0.5])


def nearest_offset(s):
    c = prompt_center(s)
    return min(np.hypot(*(np.array(p.centroid) - c)) for p in s.target_polygons)


def test_level_one_centres_within_five_percent():
    diag = np.hypot(256, 256)
    assert all(nearest_offset(synth_pair("I", seed)) <= 0.05 * diag for seed in range(100))


def test_level_two_offsets_and_renderer():
    from skimage.metrics import structural_similarity
    diag = np.hypot(256, 256)
    far, sims = 0, []
    for seed in range(100):
        s = synth_pair("II", seed)
        far += nearest_offset(s) > 0.15 * diag
        ys, xs = np.nonzero(s.reference_mask)
        ref = s.reference_image[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
        x0, y0, x1, y1 = (int(round(v)) for v in s.target_polygons[0].bounds())
        tgt = s.target_image[y0:y1, x0:x1]
        if ref.shape == tgt.shape and min(ref.shape[:2]) >= 7:
            sims.append(structural_similarity(ref, tgt, channel_axis=2))
    assert far >= 90
    assert np.median(sims) > 0.7


def test_preprocess_non_square():
    s = synth_pair("I", 0)
    s.target_image = np.zeros((600, 800, 3), np.uint8)
    s.target_polygons = s.target_polygons.scaled(800 / 256, 600 / 256)
    p = preprocess(s, (640, 640))
    assert p.target_scale[0] == pytest.approx(0.8) and p.target_scale[1] == pytest.approx(640 / 600)


def test_preprocess_identity_geometry():
    s = synth_pair("II", 1)
    p = preprocess(s, (256, 256))
    for a, b in zip(s.target_polygons, p.polygons):
        assert np.array_equal(a.points, b.points)


def test_preprocess_zero_dim():
    s = synth_pair("I", 0)
    s.target_image = np.zeros((0, 10, 3), np.uint8)
    with pytest.raises(ValueError):
        preprocess(s)


def test_flip_twice_involution():
    s = synth_pair("III", 3)
    twice = augment(augment(s, 0, p_flip=1, p_rotate=0, p_color=0), 0, p_flip=1, p_rotate=0, p_color=0)
    assert np.array_equal(twice.target_image, s.target_image)
    for a, b in zip(s.target_polygons, twice.target_polygons):
        assert np.allclose(np.sort(a.points, 0), np.sort(b.points, 0))


@pytest.mark.parametrize("seed", range(5))
def test_rotation_preserves_mask_area(seed):
    s = synth_pair("I", seed)
    out = augment(s, seed, p_flip=0, p_rotate=1, p_color=0)
    assert abs(int(out.reference_mask.sum()) - int(s.reference_mask.sum())) <= 0.05 * s.reference_mask.sum()


def test_photometric_leaves_masks():
    s = synth_pair("II", 2)
    out = augment(s, 5, p_flip=0, p_rotate=0, p_color=1)
    assert np.array_equal(np.bincount(out.reference_mask.ravel()), np.bincount(s.reference_mask.ravel()))
    assert out.target_polygons.to_json() == s.target_polygons.to_json()
    assert not np.array_equal(out.target_image, s.target_image)
