"""Dataset ingestion and the binary checkpoint container.

Covers the canonical CIFAR binary record layout (both the 10-class and
100-class variants), a deterministic synthetic blob dataset for desk-scale
runs, and a little-endian checkpoint format with a whole-file checksum that
round-trips byte-exactly.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import ChecksumError, DataError, StateNameError, VersionError

C10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
C10_TEST_FILES = ["test_batch.bin"]
C100_TRAIN_FILES = ["train.bin"]
C100_TEST_FILES = ["test.bin"]

_PIXELS = 3 * 32 * 32


@dataclass
class Dataset:
    """Images in N x 3 x 32 x 32 layout scaled to [0, 1], with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str
    digest: str

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise DataError(f"dataset {self.split!r} is empty or misshapen: {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError(f"dataset {self.split!r}: {len(self.images)} images "
                            f"vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"dataset {self.split!r}: labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def _parse_cifar_bytes(raw: bytes, variant: str, source: str) -> tuple[np.ndarray, np.ndarray]:
    label_bytes = 1 if variant == "c10" else 2
    rec = label_bytes + _PIXELS
    if len(raw) == 0 or len(raw) % rec != 0:
        good = (len(raw) // rec) * rec
        raise DataError(f"{source}: truncated or misaligned records "
                        f"(file has {len(raw)} bytes, record size {rec}, "
                        f"first bad byte at offset {good})")
    n = len(raw) // rec
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, rec)
    # c100 stores a coarse label byte first; the fine label is what we keep
    labels = arr[:, label_bytes - 1].astype(np.int64)
    pixels = arr[:, label_bytes:].reshape(n, 3, 32, 32)
    images = pixels.astype(np.float32) / 255.0
    return images, labels


def load_cifar(path, variant: str = "c10") -> tuple[Dataset, Dataset]:
    """Load the binary shards under ``path`` into (train, test) datasets."""
    if variant not in ("c10", "c100"):
        raise DataError(f"variant must be 'c10' or 'c100', got {variant!r}")
    root = Path(path)
    train_files = C10_TRAIN_FILES if variant == "c10" else C100_TRAIN_FILES
    test_files = C10_TEST_FILES if variant == "c10" else C100_TEST_FILES
    classes = 10 if variant == "c10" else 100

    def load_split(files: list[str], split: str) -> Dataset:
        images, labels, digest = [], [], hashlib.sha256()
        for fname in files:
            fpath = root / fname
            if not fpath.exists():
                raise DataError(f"missing dataset file: {fpath}")
            raw = fpath.read_bytes()
            digest.update(raw)
            im, lb = _parse_cifar_bytes(raw, variant, str(fpath))
            images.append(im)
            labels.append(lb)
        return Dataset(np.concatenate(images), np.concatenate(labels),
                       classes, split, digest.hexdigest())

    return load_split(train_files, "train"), load_split(test_files, "test")


def synthetic_dataset(seed: int, classes: int = 10, n: int = 500,
                      difficulty: str = "easy", split: str = "train") -> Dataset:
    """Class-conditional Gaussian blob images, deterministic per seed.

    Labels are assigned round-robin so the histogram is balanced to within
    one sample. Difficulty trades prototype contrast against pixel noise.
    """
    try:
        proto_scale, noise_scale = {
            "easy": (0.25, 0.02),
            "medium": (0.15, 0.08),
            "hard": (0.08, 0.15),
        }[difficulty]
    except KeyError:
        raise DataError(f"difficulty must be easy, medium or hard, got {difficulty!r}") from None
    if n < classes:
        raise DataError(f"need at least one sample per class: n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(0.0, 1.0, size=(classes, 3, 32, 32))
    labels = np.arange(n, dtype=np.int64) % classes
    noise = rng.normal(0.0, 1.0, size=(n, 3, 32, 32))
    images = 0.5 + proto_scale * prototypes[labels] + noise_scale * noise
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    digest = hashlib.sha256(images.astype("<f4").tobytes()
                            + labels.astype("<i8").tobytes()).hexdigest()
    return Dataset(images, labels, classes, split, digest)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"RORCKPT\x00"
_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, state: dict[str, np.ndarray], config_text: str = "") -> None:
    """Write named tensors plus a config echo; trailing CRC32 over everything."""
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<I", _VERSION)
    config_bytes = config_text.encode()
    buf += struct.pack("<I", len(config_bytes))
    buf += config_bytes
    names = sorted(state)
    buf += struct.pack("<I", len(names))
    for name in names:
        arr = np.asarray(state[name])
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float32)
        nb = name.encode()
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Read a checkpoint, validating magic, version and checksum first."""
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 12:
        raise VersionError(f"{path}: too short to be a checkpoint")
    body, stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != stored:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")
    if body[:len(_MAGIC)] != _MAGIC:
        raise VersionError(f"{path}: bad magic, not a checkpoint file")
    off = len(_MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals if len(vals) > 1 else vals[0]

    version = take("<I")
    if version != _VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    config_len = take("<I")
    config_text = body[off:off + config_len].decode()
    off += config_len
    count = take("<I")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = take("<H")
        name = body[off:off + name_len].decode()
        off += name_len
        code, ndim = take("<BB")
        if code not in _DTYPES:
            raise VersionError(f"{path}: unknown dtype code {code} for tensor {name!r}")
        shape = tuple(take("<I") for _ in range(ndim))
        dtype = np.dtype(_DTYPES[code])
        nelem = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(body, dtype=dtype, count=nelem, offset=off).reshape(shape).copy()
        off += nelem * dtype.itemsize
        if name in state:
            raise StateNameError(f"{path}: duplicate tensor name {name!r}")
        state[name] = arr
    return state, config_text
