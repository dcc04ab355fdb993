"""Dataset ingestion (IDX, CIFAR-10 binary batches, canonical dump) and
construction of two-class problems.

All pixel intensities live in [0, 1] as float64. Quantization back to bytes
only happens in the writers.
"""

from __future__ import annotations

import gzip
import io
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ConsistencyError, DataFormatError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
DUMP_MAGIC = b"NNC1"

MNIST_CLASSES = tuple(str(i) for i in range(10))
FASHION_CLASSES = ("tshirt", "trouser", "pullover", "dress", "coat",
                   "sandal", "shirt", "sneaker", "bag", "boot")
CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")


@dataclass(frozen=True)
class ImageExample:
    pixels: np.ndarray
    dims: tuple[int, int, int]
    label: int


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """An immutable batch of flattened images with integer labels.

    ``pixels`` has shape (n, N) with N = prod(dims); both arrays are made
    read-only on construction so instances can be shared freely.
    """

    pixels: np.ndarray
    labels: np.ndarray
    dims: tuple[int, int, int]
    class_names: tuple[str, ...]
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        dims = tuple(int(d) for d in self.dims)
        if pixels.ndim != 2:
            raise ConsistencyError(f"pixels must be 2-D, got shape {pixels.shape}")
        if len(dims) != 3 or int(np.prod(dims)) != pixels.shape[1]:
            raise ConsistencyError(f"dims {dims} do not match vector length {pixels.shape[1]}")
        if labels.shape != (pixels.shape[0],):
            raise ConsistencyError("labels and pixels disagree on example count")
        if pixels.shape[0] == 0:
            raise ConsistencyError("a LabeledSet must be non-empty")
        if labels.min() < 0 or labels.max() >= len(self.class_names):
            raise ConsistencyError("label outside the class range")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ConsistencyError("pixel intensities must lie in [0, 1]")
        ids = np.arange(pixels.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        for arr in (pixels, labels, ids):
            arr.flags.writeable = False
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.pixels.shape[0]

    def __getitem__(self, i) -> ImageExample:
        return ImageExample(self.pixels[i], self.dims, int(self.labels[i]))

    @property
    def n_features(self) -> int:
        return self.pixels.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def take(self, index) -> "LabeledSet":
        index = np.asarray(index, dtype=np.int64)
        return LabeledSet(self.pixels[index], self.labels[index], self.dims,
                          self.class_names, self.ids[index])


@dataclass(frozen=True)
class BinaryProblem:
    class_a: int
    class_b: int
    train: LabeledSet
    test: LabeledSet
    name: str


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"{what}: expected {n} bytes, got {len(data)}")
    return data


def _read_idx(path, magic, what):
    with _open(path) as f:
        head = _read_exact(f, 8, what)
        found, count = struct.unpack(">II", head)
        if found != magic:
            raise DataFormatError(f"{what}: magic {found:#010x}, expected {magic:#010x}")
        extra = ()
        if magic == IDX_IMAGES_MAGIC:
            extra = struct.unpack(">II", _read_exact(f, 8, what))
        size = count * int(np.prod(extra, dtype=np.int64)) if extra else count
        body = _read_exact(f, size, what)
    return count, extra, np.frombuffer(body, dtype=np.uint8)


def load_idx(images_path, labels_path, class_names: Sequence[str] = MNIST_CLASSES) -> LabeledSet:
    """Load an MNIST-style pair of IDX files (optionally gzipped)."""
    n_img, (rows, cols), raw = _read_idx(images_path, IDX_IMAGES_MAGIC, str(images_path))
    n_lab, _, labels = _read_idx(labels_path, IDX_LABELS_MAGIC, str(labels_path))
    if n_img != n_lab:
        raise ConsistencyError(f"{n_img} images but {n_lab} labels")
    pixels = raw.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return LabeledSet(pixels, labels.astype(np.int64), (1, rows, cols), class_names)


def _quantize(pixels):
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def write_idx(data: LabeledSet, images_path, labels_path) -> None:
    c, rows, cols = data.dims
    if c != 1:
        raise ConfigurationError("IDX export supports single-channel images only")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(data), rows, cols))
        f.write(_quantize(data.pixels).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(data)))
        f.write(data.labels.astype(np.uint8).tobytes())


def load_cifar10_bin(paths, class_names: Sequence[str] = CIFAR10_CLASSES) -> LabeledSet:
    """Load one or more CIFAR-10 binary batches (3073-byte records)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for path in paths:
        with _open(path) as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= len(class_names):
        raise DataFormatError(f"label byte {labels.max()} outside {len(class_names)} classes")
    pixels = records[:, 1:].astype(np.float64) / 255.0
    return LabeledSet(pixels, labels, (3, 32, 32), class_names)


def write_cifar10_bin(data: LabeledSet, path) -> None:
    if data.dims != (3, 32, 32):
        raise ConfigurationError("CIFAR export needs dims (3, 32, 32)")
    records = np.empty((len(data), CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = data.labels
    records[:, 1:] = _quantize(data.pixels)
    Path(path).write_bytes(records.tobytes())


def save_dump(data: LabeledSet, path) -> None:
    """Write the canonical little-endian dump: magic, count, dims, f32 pixels, u8 labels."""
    buf = io.BytesIO()
    buf.write(DUMP_MAGIC)
    buf.write(struct.pack("<4I", len(data), *data.dims))
    buf.write(data.pixels.astype("<f4").tobytes())
    buf.write(data.labels.astype(np.uint8).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dump(path, class_names: Sequence[str] | None = None) -> LabeledSet:
    raw = Path(path).read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise DataFormatError(f"{path}: not an NNC1 dump")
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: header truncated")
    count, c, h, w = struct.unpack_from("<4I", raw, 4)
    n = c * h * w
    need = 20 + count * n * 4 + count
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype="<f4", count=count * n, offset=20).reshape(count, n)
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=20 + count * n * 4)
    if class_names is None:
        class_names = tuple(str(i) for i in range(int(labels.max()) + 1))
    return LabeledSet(pixels.astype(np.float64), labels.astype(np.int64), (c, h, w), class_names)


def subsample(data: LabeledSet, n: int, seed: int, allow_empty: bool = False) -> LabeledSet:
    """Class-stratified deterministic subsample of ``n`` examples.

    Each class receives a share proportional to its frequency (largest
    remainder rounding); within a class, members are drawn by a seeded
    Fisher-Yates shuffle. The original order is preserved in the output.
    """
    size = len(data)
    if n > size or n < 0:
        raise ConfigurationError(f"cannot draw {n} examples from a set of {size}")
    if n == 0:
        if allow_empty:
            return None
        raise ConfigurationError("subsample size 0 requested (pass allow_empty=True)")
    if n == size:
        return data
    counts = data.class_counts()
    quota = counts * n / size
    take = np.floor(quota).astype(np.int64)
    remainder = n - take.sum()
    # ties in the fractional part go to the lower class id
    order = np.lexsort((np.arange(len(counts)), -(quota - take)))
    take[order[:remainder]] += 1
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(len(counts)):
        members = np.flatnonzero(data.labels == cls)
        if take[cls]:
            chosen.append(members[rng.permutation(len(members))[: take[cls]]])
    return data.take(np.sort(np.concatenate(chosen)))


def _restrict(data: LabeledSet, a: int, b: int, names: tuple[str, str]) -> LabeledSet:
    mask = (data.labels == a) | (data.labels == b)
    index = np.flatnonzero(mask)
    labels = (data.labels[index] == b).astype(np.int64)
    return LabeledSet(data.pixels[index], labels, data.dims, names, data.ids[index])


def binary_problem(train: LabeledSet, test: LabeledSet, a: int, b: int,
                   test_cap: int | None = None, seed: int = 0,
                   train_cap: int | None = None) -> BinaryProblem:
    """One two-class problem; labels are remapped so that the class whose name
    sorts first becomes 0."""
    names = train.class_names
    if names[b] < names[a]:
        a, b = b, a
    for part, what in ((train, "train"), (test, "test")):
        counts = part.class_counts()
        for cls in (a, b):
            if counts[cls] == 0:
                raise ConfigurationError(f"class {names[cls]!r} has no {what} examples")
    pair = (names[a], names[b])
    tr = _restrict(train, a, b, pair)
    te = _restrict(test, a, b, pair)
    if train_cap is not None and train_cap < len(tr):
        tr = subsample(tr, train_cap, seed)
    if test_cap is not None and test_cap < len(te):
        te = subsample(te, test_cap, seed)
    return BinaryProblem(a, b, tr, te, f"{names[a]}_vs_{names[b]}")


def make_binary_problems(data: LabeledSet, test_set: LabeledSet, test_cap: int | None = None,
                         seed: int = 0, pairs=None, train_cap: int | None = None) -> list[BinaryProblem]:
    """All unordered class pairs (or the requested ``pairs``), in lexicographic
    order of their names."""
    if data.n_classes < 2:
        raise ConfigurationError("need at least two classes")
    if test_set.class_names != data.class_names or test_set.dims != data.dims:
        raise ConsistencyError("train and test sets describe different classes or shapes")
    if pairs is None:
        counts = data.class_counts()
        empty = [data.class_names[c] for c in range(data.n_classes) if counts[c] == 0]
        if empty:
            raise ConfigurationError(f"classes without examples: {empty}")
        pairs = itertools.combinations(range(data.n_classes), 2)
    problems = [binary_problem(data, test_set, a, b, test_cap, seed, train_cap) for a, b in pairs]
    problems.sort(key=lambda p: p.name)
    return problems


def parse_pairs(spec: str, class_names: Sequence[str]):
    """Parse ``"all"`` or ``"1-7,0-1"`` / ``"dog-frog"`` into class-id pairs."""
    spec = spec.strip()
    if spec in ("", "all"):
        return None
    lookup = {name: i for i, name in enumerate(class_names)}
    pairs = []
    for token in spec.split(","):
        parts = token.strip().split("-")
        if len(parts) != 2:
            raise ConfigurationError(f"bad pair {token!r}; use a-b")
        try:
            ids = tuple(lookup[p] if p in lookup else int(p) for p in parts)
        except ValueError:
            raise ConfigurationError(f"unknown class in pair {token!r}") from None
        if ids[0] == ids[1] or not all(0 <= i < len(class_names) for i in ids):
            raise ConfigurationError(f"bad pair {token!r}")
        pairs.append(ids)
    return pairs
