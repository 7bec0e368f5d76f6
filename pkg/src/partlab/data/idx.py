"""IDX (MNIST) binary files.

Layout, all integers big-endian::

    images: magic 0x00000803 | count | rows | cols | count*rows*cols ubytes
    labels: magic 0x00000801 | count | count ubytes
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..autodiff import ContractError
from .labels import DIGITS, NEG, POS, SourceDataset

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def _read_header(buf: bytes, expected_magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise IdxFormatError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, *dims = struct.unpack(f">I{ndims}i", buf[:need])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic number, expected 0x{expected_magic:08x}, got 0x{magic:08x}")
    if any(d < 0 for d in dims):
        raise IdxFormatError(f"{path}: negative dimension in {dims}")
    payload = int(np.prod(dims))
    if len(buf) - need != payload:
        raise IdxFormatError(f"{path}: expected {payload} payload bytes, found {len(buf) - need}")
    return tuple(dims)


def read_idx_images(path) -> np.ndarray:
    """Images as float64 in [0, 1], shape (count, rows, cols)."""
    buf = Path(path).read_bytes()
    count, rows, cols = _read_header(buf, IMAGE_MAGIC, 3, path)
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count,) = _read_header(buf, LABEL_MAGIC, 1, path)
    return np.frombuffer(buf, dtype=np.uint8, offset=8).copy()


def one_hot_states(digits: np.ndarray, n: int = 10) -> np.ndarray:
    digits = np.asarray(digits, dtype=np.intp)
    if digits.size and (digits.min() < 0 or digits.max() >= n):
        raise ContractError(f"label values must lie in 0..{n - 1}")
    states = np.full((digits.size, n), NEG, dtype=np.int8)
    states[np.arange(digits.size), digits] = POS
    return states


def load_idx(image_path, label_path, name: str | None = None) -> SourceDataset:
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"{image_path} holds {len(images)} images but {label_path} holds {len(labels)} labels")
    return SourceDataset(name or Path(image_path).stem, DIGITS, images, one_hot_states(labels))


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] images to the 0..255 byte grid."""
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = to_bytes(images)
    count, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">Iiii", IMAGE_MAGIC, count, rows, cols) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">Ii", LABEL_MAGIC, labels.size) + labels.tobytes())


def digits_of(d: SourceDataset) -> np.ndarray:
    """Digit of each sample of a fully labeled one-hot dataset over ``0..9``."""
    if d.schema != DIGITS:
        raise ContractError(f"digits_of needs the 0..9 schema, got {list(d.schema)}")
    pos = d.states == POS
    if not np.all(pos.sum(axis=1) == 1):
        raise ContractError("digits_of: every sample needs exactly one Positive state")
    return pos.argmax(axis=1)
