import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foveal_mim.dataio import (
    RECORD_BYTES,
    DataError,
    DatasetSpec,
    SplitIndex,
    filter_segmentable,
    is_segmentable,
    load_confidence_masks,
    load_stl10,
    random_resized_crop,
    read_confidence_mask,
    sample_crop_box,
    split_train_val,
    write_confidence_mask,
    write_stl10,
)


@pytest.fixture
def tiny_split(tmp_path, rng):
    images = rng.integers(0, 256, size=(6, 96, 96, 3), dtype=np.uint8)
    labels = np.array([0, 1, 2, 9, 4, 5])
    write_stl10(tmp_path, "train", images, labels)
    return tmp_path, images, labels


def test_roundtrip(tiny_split):
    root, images, labels = tiny_split
    split = load_stl10(DatasetSpec(str(root), "train", True))
    assert len(split) == 6
    assert np.array_equal(np.asarray(split.images), images)
    assert np.array_equal(split.labels, labels)
    img, label = split[3]
    assert img.dtype == np.float32 and label == 9
    np.testing.assert_allclose(img, images[3] / 255.0, atol=1e-7)


def test_record_layout_is_channel_planes_column_major(tmp_path):
    # first bytes of a record hold red values running down the first column
    raw = np.zeros(RECORD_BYTES, dtype=np.uint8)
    raw[1] = 200  # red plane, second stored element
    raw[96 * 96] = 100  # green plane, first element
    raw.tofile(tmp_path / "unlabeled_X.bin")
    img = np.asarray(load_stl10(DatasetSpec(str(tmp_path))).images[0])
    assert img[1, 0, 0] == 200 and img[0, 1, 0] == 0
    assert img[0, 0, 1] == 100


def test_count_from_file_size(tmp_path):
    np.zeros(7 * RECORD_BYTES, dtype=np.uint8).tofile(tmp_path / "unlabeled_X.bin")
    assert len(load_stl10(DatasetSpec(str(tmp_path)))) == 7


def test_truncated_file_rejected(tmp_path):
    np.zeros(RECORD_BYTES + 5, dtype=np.uint8).tofile(tmp_path / "unlabeled_X.bin")
    with pytest.raises(DataError, match="truncated"):
        load_stl10(DatasetSpec(str(tmp_path)))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_stl10(DatasetSpec(str(tmp_path), "test", True))


def test_label_mismatch(tiny_split):
    root, _, _ = tiny_split
    np.array([1, 2], dtype=np.uint8).tofile(root / "train_y.bin")
    with pytest.raises(DataError):
        load_stl10(DatasetSpec(str(root), "train", True))


def test_unlabeled_with_labels_rejected():
    with pytest.raises(ValueError):
        DatasetSpec("x", "unlabeled", True)


# train / validation split

def test_stratified_split():
    labels = np.repeat(np.arange(10), 500)
    tr, va = split_train_val(labels, seed=3)
    assert len(tr) == 4000 and len(va) == 1000
    assert not set(tr) & set(va)
    assert np.array_equal(np.bincount(labels[va], minlength=10), np.full(10, 100))
    tr2, va2 = split_train_val(labels, seed=3)
    assert np.array_equal(va, va2) and np.array_equal(tr, tr2)


def test_split_size_checked():
    with pytest.raises(ValueError):
        split_train_val(np.zeros(10, dtype=int))


# crops

def test_identity_crop(image):
    out = random_resized_crop(image, (1.0, 1.0), (1.0, 1.0), (96, 96), np.random.default_rng(0))
    np.testing.assert_allclose(out, image, atol=1e-6)


def test_crop_property_sweep():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        top, left, h, w = sample_crop_box(96, 96, (0.08, 1.0), (0.75, 1.33), rng)
        assert 0.08 <= h * w / 9216 <= 1.0
        assert 0.75 <= w / h <= 1.33
        assert 0 <= top and top + h <= 96 and 0 <= left and left + w <= 96


def test_degenerate_crop_ranges_rejected():
    with pytest.raises(ValueError):
        sample_crop_box(96, 96, (0.5, 0.2), (0.75, 1.33), np.random.default_rng(0))


def test_crop_output_shape_and_range(image):
    out, box = random_resized_crop(image, rng=np.random.default_rng(1), return_box=True)
    assert out.shape == (96, 96, 3) and out.min() >= 0 and out.max() <= 1
    assert len(box) == 4


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), lo=st.floats(0.05, 1.0))
def test_crop_scale_respected(seed, lo):
    top, left, h, w = sample_crop_box(96, 96, (lo, 1.0), (0.75, 1.33), np.random.default_rng(seed))
    assert h * w / 9216 >= lo - 1e-9 or (h, w) == (96, 96)


# confidence maps

def test_confidence_png_levels(tmp_path):
    write_confidence_mask(tmp_path, 0, np.zeros((96, 96)))
    write_confidence_mask(tmp_path, 1, np.ones((96, 96)))
    write_confidence_mask(tmp_path, 2, np.full((96, 96), 204 / 255))
    m = load_confidence_masks(tmp_path)
    assert [x.image_index for x in m] == [0, 1, 2]
    assert not m[0].values.any()
    assert (m[1].values == 1).all()
    assert m[2].values[0, 0] == pytest.approx(0.8, abs=1e-7)
    assert is_segmentable(m[2].values)


def test_confidence_wrong_shape(tmp_path):
    write_confidence_mask(tmp_path, 0, np.zeros((10, 10)))
    with pytest.raises(DataError):
        read_confidence_mask(tmp_path, 0)


def test_confidence_gap_detected(tmp_path):
    write_confidence_mask(tmp_path, 0, np.zeros((96, 96)))
    write_confidence_mask(tmp_path, 2, np.zeros((96, 96)))
    with pytest.raises(FileNotFoundError):
        load_confidence_masks(tmp_path)


def _mask_with(n, value=0.8):
    v = np.zeros(96 * 96, dtype=np.float32)
    v[:n] = value
    return v.reshape(96, 96)


def test_segmentable_boundary():
    assert not is_segmentable(_mask_with(99))
    assert is_segmentable(_mask_with(100))
    assert is_segmentable(np.ones((96, 96)))
    assert not is_segmentable(_mask_with(5000, 0.79))


def test_filter_keeps_input_order(tmp_path):
    masks = [_mask_with(100), _mask_with(99), np.ones((96, 96)), _mask_with(0)]
    split = filter_segmentable(masks)
    assert split.kept_indices == (0, 2)
    assert split.discarded_fraction == pytest.approx(0.5)
    split.save(tmp_path / "keep.txt")
    again = SplitIndex.load(tmp_path / "keep.txt")
    assert again.kept_indices == (0, 2) and again.total == 4


def test_split_index_rejects_unsorted(tmp_path):
    (tmp_path / "keep.txt").write_text("3\n1\n")
    with pytest.raises(DataError):
        SplitIndex.load(tmp_path / "keep.txt")
