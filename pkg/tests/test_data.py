import json

import numpy as np
import pytest
from PIL import Image

from protokd.data import (
    DataError,
    Dataset,
    SplitSpec,
    SyntheticSpec,
    class_families,
    generate_synthetic,
    load_image_dataset,
    load_pseudo_images,
    save_image_dataset,
    save_pseudo_images,
    scarce_split,
    split_checksum,
    write_manifest,
)


def _write_png(path, color, size=10):
    Image.fromarray(np.full((size, size, 3), color, dtype=np.uint8)).save(path)


def _tree(tmp_path):
    for name, col in (("b_cls", 200), ("a_cls", 40)):
        (tmp_path / name).mkdir()
        _write_png(tmp_path / name / "x1.png", col)
        _write_png(tmp_path / name / "x0.png", col + 10, size=14)
    return tmp_path


def test_load_image_dataset_two_by_two(tmp_path):
    ds = load_image_dataset(_tree(tmp_path), input_size=8)
    assert ds.num_classes == 2 and len(ds) == 4
    assert ds.class_names == ["a_cls", "b_cls"]
    assert ds.images.shape == (4, 3, 8, 8)
    assert ds.labels.tolist() == [0, 0, 1, 1]
    # x0 sorts first; its colour was offset by 10 grey levels
    np.testing.assert_allclose(ds.images[0], 50 / 255, atol=1e-6)
    np.testing.assert_allclose(ds.images[3], 200 / 255, atol=1e-6)
    again = load_image_dataset(tmp_path, input_size=8)
    assert np.array_equal(again.images, ds.images)


def test_load_image_dataset_errors(tmp_path):
    _tree(tmp_path)
    (tmp_path / "c_empty").mkdir()
    with pytest.raises(DataError, match="c_empty"):
        load_image_dataset(tmp_path)
    (tmp_path / "c_empty" / "bad.png").write_bytes(b"not an image")
    with pytest.raises(DataError, match="bad.png"):
        load_image_dataset(tmp_path)
    with pytest.raises(DataError):
        load_image_dataset(tmp_path / "missing")


def test_image_dataset_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(num_classes=3, per_class=2, image_size=12, intra_class_variance=0.5))
    save_image_dataset(ds, tmp_path)
    back = load_image_dataset(tmp_path, input_size=12)
    assert back.labels.tolist() == ds.labels.tolist()
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-6


def test_split_sizes_one_shot_protocol():
    ds = generate_synthetic(SyntheticSpec(num_classes=14, per_class=8, image_size=8))
    tr, va, te = scarce_split(ds, SplitSpec(1, 5, seed=3))
    assert len(tr) == 14 and len(va) == 70 and len(te) == 14 * 2
    assert tr.class_counts().tolist() == [1] * 14
    assert va.class_counts().tolist() == [5] * 14


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_split_partitions_dataset(seed):
    ds = generate_synthetic(SyntheticSpec(num_classes=5, per_class=9, image_size=8, count_skew=0.3, min_per_class=6, seed=seed))
    tr, va, te = scarce_split(ds, SplitSpec(2, 3, seed=seed))
    sets = [set(s.indices.tolist()) for s in (tr, va, te)]
    assert sets[0] | sets[1] | sets[2] == set(range(len(ds)))
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    for s in (tr, va, te):
        assert np.array_equal(s.labels, ds.labels[s.indices])


def test_split_determinism_and_seed_variation():
    ds = generate_synthetic(SyntheticSpec(num_classes=6, per_class=12, image_size=8))
    a = scarce_split(ds, SplitSpec(1, 5, seed=7))
    b = scarce_split(ds, SplitSpec(1, 5, seed=7))
    c = scarce_split(ds, SplitSpec(1, 5, seed=8))
    assert split_checksum(*a) == split_checksum(*b)
    assert split_checksum(*a) != split_checksum(*c)
    assert a[0].indices.tolist() != c[0].indices.tolist()


def test_split_infeasible_and_invalid():
    ds = generate_synthetic(SyntheticSpec(num_classes=3, per_class=4, image_size=8))
    with pytest.raises(DataError, match="class_0"):
        scarce_split(ds, SplitSpec(1, 5))
    with pytest.raises(ValueError):
        SplitSpec(train_per_class=6)
    with pytest.raises(ValueError):
        SplitSpec(train_per_class=0)


def test_synthetic_variance_zero_is_constant_per_class():
    ds = generate_synthetic(SyntheticSpec(num_classes=4, per_class=5, image_size=16))
    for c in range(4):
        imgs = ds.images[ds.labels == c]
        assert all(np.array_equal(imgs[0], im) for im in imgs[1:])
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_synthetic_seed_determinism():
    spec = SyntheticSpec(num_classes=5, per_class=4, intra_class_variance=0.7, image_size=16, seed=4, count_skew=0.5, min_per_class=2)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    other = generate_synthetic(SyntheticSpec(num_classes=5, per_class=4, intra_class_variance=0.7, image_size=16, seed=5))
    assert not np.array_equal(a.images[:4], other.images[:4])


def test_synthetic_families_are_distinct():
    fams = class_families(14, 0)
    assert len({tuple(vars(f).values()) for f in fams}) == 14
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=1)


def test_variance_zero_raw_pixel_prototypes_are_perfect():
    ds = generate_synthetic(SyntheticSpec(num_classes=4, per_class=10, image_size=16))
    tr, _, te = scarce_split(ds, SplitSpec(1, 2, seed=0))
    flat_tr = tr.images.reshape(len(tr), -1).astype(np.float64)
    correct = 0
    for img, y in zip(te.images, te.labels):
        best, best_d = -1, np.inf
        for p, c in zip(flat_tr, tr.labels):
            d = float(((img.ravel() - p) ** 2).sum())
            if d < best_d:
                best, best_d = c, d
        correct += best == y
    assert correct == len(te)


def test_pseudo_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 64, 64))
    mats = (a + a.transpose(0, 2, 1)) / 2
    path = tmp_path / "p.bin"
    save_pseudo_images(path, mats, [0, 1, 1], ["x", "y"])
    ds = load_pseudo_images(path)
    assert len(ds) == 3 and ds.modality == "pseudo-image"
    assert ds.images.shape == (3, 1, 64, 64)
    assert np.array_equal(ds.images[:, 0], mats)
    assert ds.class_names == ["x", "y"]


def test_pseudo_image_errors(tmp_path):
    bad = np.zeros((2, 4, 4))
    bad[1, 0, 3] = 1.0
    path = tmp_path / "bad.bin"
    save_pseudo_images(path, bad, [0, 1])
    with pytest.raises(DataError, match="matrix 1"):
        load_pseudo_images(path)
    good = tmp_path / "good.bin"
    save_pseudo_images(good, np.zeros((2, 4, 4)), [0, 1])
    (tmp_path / "trunc.bin").write_bytes(good.read_bytes()[:-8])
    with pytest.raises(DataError, match="ragged or truncated"):
        load_pseudo_images(tmp_path / "trunc.bin")
    with pytest.raises(DataError, match="square"):
        save_pseudo_images(tmp_path / "x.bin", np.zeros((2, 3, 4)), [0, 1])


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3, 4, 4)), [0, 2], ["a", "b"])
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3, 4)), [0, 1], ["a", "b"])
    ds = Dataset(np.zeros((2, 1, 4, 4)), [0, 0], ["a", "b"])
    with pytest.raises(DataError, match="b"):
        ds.check_complete()


def test_manifest_records_splits(tmp_path):
    ds = generate_synthetic(SyntheticSpec(num_classes=3, per_class=7, image_size=8))
    tr, va, te = scarce_split(ds, SplitSpec(1, 5))
    write_manifest(tmp_path / "m.json", ds, {"train": tr, "val": va, "test": te})
    m = json.loads((tmp_path / "m.json").read_text())
    assert len(m["items"]) == 21
    assert m["split_checksum"] == split_checksum(tr, va, te)
    assert sorted(m["splits"]["train"] + m["splits"]["val"] + m["splits"]["test"]) == list(range(21))
