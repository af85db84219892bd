import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mcadv import checkpoint, data
from mcadv.errors import ConfigError, DataError, ParseError


def image_file(n, rows=2, cols=3, pixels=None):
    head = struct.pack(">IIII", 0x803, n, rows, cols)
    body = bytes(pixels if pixels is not None else range(n * rows * cols))
    return head + body


def test_hand_built_image_file(tmp_path):
    path = tmp_path / "img"
    path.write_bytes(image_file(2, pixels=[0, 255, 51, 102, 0, 0, 1, 2, 3, 4, 5, 6]))
    x = data.load_idx_images(path)
    assert x.shape == (2, 6)
    assert x[0, 1] == 1.0 and x[0, 2] == 0.2
    assert x[1, 0] == 1 / 255


def test_hand_built_label_file(tmp_path):
    path = tmp_path / "lab"
    path.write_bytes(struct.pack(">II", 0x801, 3) + bytes([7, 0, 9]))
    assert data.load_idx_labels(path).tolist() == [7, 0, 9]


def test_gzip_is_transparent(tmp_path):
    path = tmp_path / "img.gz"
    path.write_bytes(gzip.compress(image_file(1)))
    assert data.load_idx_images(path).shape == (1, 6)


def test_zero_images_is_valid(tmp_path):
    path = tmp_path / "img"
    path.write_bytes(image_file(0))
    assert data.load_idx_images(path).shape == (0, 6)


def test_wrong_magic_reports_offset(tmp_path):
    path = tmp_path / "lab"
    path.write_bytes(image_file(1))
    with pytest.raises(ParseError, match="offset 0"):
        data.load_idx_labels(path)


def test_truncated_payload_reports_offset():
    raw = image_file(2)[:-1]
    with pytest.raises(ParseError, match=f"offset {len(raw)}"):
        data.parse_idx(raw)


def test_trailing_bytes_rejected():
    with pytest.raises(ParseError, match="trailing"):
        data.parse_idx(image_file(1) + b"\x00")


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        data.read_idx(tmp_path / "absent")


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.uint8, np.int16, np.int32, np.float32, np.float64]),
                  hnp.array_shapes(min_dims=1, max_dims=3, min_side=0, max_side=4)))
def test_idx_round_trip(arr):
    back = data.parse_idx(data.encode_idx(arr))
    assert back.shape == arr.shape
    assert back.astype(arr.dtype).tobytes() == arr.tobytes()


def test_dataset_round_trip_is_exact_for_quantized_pixels(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 16)) / 255.0
    ds = data.LabeledDataset(images, rng.integers(0, 10, 5))
    ds.save_idx(tmp_path / "i", tmp_path / "l")
    back = data.load_dataset(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(back.images, images)
    assert np.array_equal(back.labels, ds.labels)


def test_dataset_validation():
    with pytest.raises(ConfigError):
        data.LabeledDataset(np.full((1, 4), 1.5), np.array([0]))
    with pytest.raises(ConfigError):
        data.LabeledDataset(np.zeros((1, 4)), np.array([10]))
    with pytest.raises(ConfigError):
        data.LabeledDataset(np.zeros((2, 4)), np.array([0]))


def test_subsample_is_seeded_and_tracks_indices():
    ds = data.LabeledDataset(np.linspace(0, 1, 20).reshape(10, 2), np.arange(10) % 3)
    a, b = data.subsample(ds, 4, 7), data.subsample(ds, 4, 7)
    assert np.array_equal(a.indices, b.indices)
    assert len(set(a.indices.tolist())) == 4
    assert np.array_equal(a.labels, ds.labels[a.indices])
    with pytest.raises(ConfigError):
        data.subsample(ds, 11, 0)


def test_standin_matches_mnist_layout(tmp_path):
    paths = data.write_standin(tmp_path, n_train=50, n_test=20, seed=1)
    assert [p.name for p in paths] == list(data.STANDIN_FILES)
    train = data.load_dataset(paths[0], paths[1])
    test = data.load_dataset(paths[2], paths[3])
    assert train.images.shape == (50, 784) and test.images.shape == (20, 784)
    assert set(train.labels.tolist()) <= set(range(10))


def test_checkpoint_round_trip_is_bit_exact():
    rng = np.random.default_rng(5)
    tensors = {"a": rng.normal(size=(3, 2)), "b": np.array([np.pi, -0.0, 1e-300])}
    raw = checkpoint.dumps({"k": 1}, tensors)
    meta, back = checkpoint.loads(raw)
    assert meta == {"k": 1}
    assert all(back[k].tobytes() == tensors[k].tobytes() for k in tensors)
    assert checkpoint.dumps(meta, back) == raw


@pytest.mark.parametrize("cut", [4, 11, 30, -3])
def test_checkpoint_corruption_is_a_parse_error(cut):
    raw = checkpoint.dumps({}, {"w": np.ones(4)})
    with pytest.raises(ParseError):
        checkpoint.loads(raw[:cut])


def test_two_by_two_image(tmp_path):
    path = tmp_path / "img"
    path.write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 128, 255, 64]))
    assert np.array_equal(data.load_idx_images(path), [[0, 128 / 255, 1, 64 / 255]])


def test_subsample_edges():
    ds = data.LabeledDataset(np.linspace(0, 1, 20).reshape(10, 2), np.arange(10) % 3)
    full = data.subsample(ds, 10, 3)
    assert sorted(full.indices.tolist()) == list(range(10))
    assert len(data.subsample(ds, 0, 3)) == 0
