"""IDX file parsing/writing, labelled datasets and deterministic subsampling."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mcadv.errors import ConfigError, DataError, ParseError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# IDX type byte -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt: code for code, dt in _IDX_TYPES.items()}


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte string into an array of its declared type and shape."""
    if len(raw) < 4:
        raise ParseError("truncated IDX header", len(raw))
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES:
        raise ParseError(f"bad IDX magic 0x{int.from_bytes(raw[:4], 'big'):08X}", 0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ParseError("truncated IDX dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_TYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    need = header_end + count * dtype.itemsize
    if len(raw) < need:
        raise ParseError(f"truncated IDX payload: expected {need} bytes, got {len(raw)}", len(raw))
    if len(raw) > need:
        raise ParseError("trailing bytes after IDX payload", need)
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header_end).reshape(dims)


def read_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


def encode_idx(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder(">") if arr.dtype.itemsize > 1 else arr.dtype
    if dtype not in _IDX_CODES:
        raise ConfigError(f"dtype {arr.dtype} has no IDX encoding")
    header = struct.pack(">HBB", 0, _IDX_CODES[dtype], arr.ndim)
    header += struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(dtype).tobytes()


def write_idx(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(array))


def _check_magic(raw: bytes, magic: int, what: str) -> None:
    if len(raw) < 4:
        raise ParseError(f"truncated {what} header", len(raw))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise ParseError(f"{what} file has magic 0x{found:08X}, expected 0x{magic:08X}", 0)


def load_idx_images(path) -> np.ndarray:
    """Load an unsigned-byte image file as float64 rows in [0, 1], shape [N, rows*cols]."""
    raw = _read_bytes(path)
    _check_magic(raw, IMAGES_MAGIC, "image")
    arr = parse_idx(raw)
    return arr.reshape(arr.shape[0], int(np.prod(arr.shape[1:]))).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    _check_magic(raw, LABELS_MAGIC, "label")
    return parse_idx(raw).astype(np.int64)


def quantize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    seed: int | None = None
    indices: np.ndarray | None = field(default=None, repr=False)
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConfigError("pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        base = self.indices if self.indices is not None else np.arange(len(self))
        return LabeledDataset(self.images[idx], self.labels[idx], self.name, self.seed, base[idx], self.num_classes)

    def save_idx(self, images_path, labels_path) -> None:
        n = len(self)
        side = int(round(np.sqrt(self.images.shape[1]))) if n else 28
        write_idx(images_path, quantize(self.images).reshape(n, side, side))
        write_idx(labels_path, self.labels.astype(np.uint8))


def load_dataset(images_path, labels_path, name: str = "") -> LabeledDataset:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ParseError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    return LabeledDataset(images, labels, name=name)


def subsample(dataset: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """Uniform sample of ``n`` items without replacement, fixed by ``seed``."""
    if n < 0 or n > len(dataset):
        raise ConfigError(f"cannot subsample {n} items from a dataset of {len(dataset)}")
    idx = np.random.default_rng(seed).permutation(len(dataset))[:n]
    out = dataset.take(idx)
    return LabeledDataset(out.images, out.labels, dataset.name, seed, out.indices, dataset.num_classes)


def make_digits_standin(n_train: int = 10_000, n_test: int = 2_000, seed: int = 0,
                        test_sources: int = 360) -> tuple[LabeledDataset, LabeledDataset]:
    """Build an MNIST-shaped corpus from scikit-learn's bundled 8x8 handwritten digits.

    Each 8x8 digit is upscaled into a 20x20 box centred on a 28x28 canvas and
    jittered with a random affine warp. Train and test items are generated
    from disjoint sets of source digits so the split stays honest.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    digits = load_digits()
    src = digits.images / 16.0
    src_labels = digits.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(src))
    test_idx, train_idx = order[:test_sources], order[test_sources:]

    def render(indices, count, name):
        images = np.empty((count, 784))
        labels = np.empty(count, dtype=np.int64)
        picks = indices[rng.integers(0, len(indices), size=count)]
        for k, s in enumerate(picks):
            big = ndimage.zoom(src[s], 2.5, order=3)
            canvas = np.zeros((28, 28))
            canvas[4:24, 4:24] = big
            angle = np.deg2rad(rng.uniform(-12, 12))
            scale = rng.uniform(0.9, 1.1)
            shear = rng.uniform(-0.15, 0.15)
            rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
            mat = rot @ np.array([[1.0, shear], [0.0, 1.0]]) / scale
            centre = np.array([13.5, 13.5])
            offset = centre - mat @ centre + rng.uniform(-1.5, 1.5, size=2)
            warped = ndimage.affine_transform(canvas, mat, offset=offset, order=1)
            warped = np.clip(warped, 0.0, 1.0) ** rng.uniform(0.7, 1.1)
            images[k] = warped.reshape(-1)
            labels[k] = src_labels[s]
        images = quantize(images) / 255.0
        return LabeledDataset(images, labels, name=name, seed=seed)

    return render(train_idx, n_train, "digits-standin-train"), render(test_idx, n_test, "digits-standin-test")


STANDIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def write_standin(out_dir, **kwargs) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = make_digits_standin(**kwargs)
    paths = [out / name for name in STANDIN_FILES]
    train.save_idx(paths[0], paths[1])
    test.save_idx(paths[2], paths[3])
    return paths
