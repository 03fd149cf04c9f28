"""Dataset sources: a procedural local-texture task, IDX files and CIFAR binaries."""

from __future__ import annotations

import gzip
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

# IDX element type code -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class ImageSet:
    images: np.ndarray  # [N, C, H, W] float
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.size:
            i = int(bad[0])
            raise DataError(f"label {int(self.labels[i])} at index {i} is outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    train: ImageSet
    test: ImageSet | None = None


@dataclass
class DatasetSource:
    """Where the images come from.

    ``synthetic`` uses ``n_train``/``n_test``/``seed``; ``idx_files`` expects
    ``train``/``test`` as ``[images, labels]`` path pairs; ``cifar_binary``
    expects lists of batch files and ``label_bytes`` (1 for CIFAR-10, 2 for
    CIFAR-100, where the fine label is used).
    """

    kind: str = "synthetic"
    num_classes: int = 8
    n_train: int = 1024
    n_test: int = 512
    seed: int = 0
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    label_bytes: int = 1
    mean: list | None = None
    std: list | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx_files", "cifar_binary"):
            raise ConfigError(f"data.kind {self.kind!r} must be synthetic, idx_files or cifar_binary")
        if self.num_classes < 2:
            raise ConfigError("data.num_classes must be >= 2")
        if self.kind == "synthetic" and (self.n_train < 1 or self.n_test < 0):
            raise ConfigError("data.n_train must be >= 1 and data.n_test >= 0")
        if self.label_bytes not in (1, 2):
            raise ConfigError("data.label_bytes must be 1 or 2")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# synthetic local-texture task


MOTIFS = np.array(
    [
        [[0, 0, 0], [1, 1, 1], [0, 0, 0]],  # horizontal
        [[0, 1, 0], [0, 1, 0], [0, 1, 0]],  # vertical
        [[1, 0, 0], [0, 1, 0], [0, 0, 1]],  # diagonal
        [[0, 0, 1], [0, 1, 0], [1, 0, 0]],  # anti-diagonal
    ],
    dtype=np.float32,
)


def synth_factors(classes: int) -> tuple[int, int]:
    """``(bands, orientations)`` with ``bands * orientations == classes``."""
    orientations = math.gcd(classes, 4)
    return classes // orientations, orientations


def synth_dataset(
    seed: int,
    n: int,
    classes: int,
    image_size: int = 32,
    channels: int = 3,
    task: str = "joint",
    motifs_per_image: int = 6,
    noise: float = 0.2,
    contrast: float = 1.0,
) -> ImageSet:
    """Procedural images whose class needs both a global and a local cue.

    The label is ``band * orientations + orientation``: ``band`` sets the mean
    intensity, ``orientation`` picks a 3x3 line motif stamped at random spots.
    With ``task="band"`` the label is the band alone (a coarser source task).
    Classes are exactly balanced when ``n`` is a multiple of ``classes``.
    """
    if classes < 2:
        raise ConfigError("synthetic task needs at least 2 classes")
    if task not in ("joint", "band", "coarse"):
        raise ConfigError(f"unknown synthetic task {task!r}")
    bands, orientations = synth_factors(classes)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    band = labels // orientations
    orient = labels % orientations
    levels = np.linspace(-0.5, 0.5, bands) if bands > 1 else np.zeros(1)

    images = rng.normal(0.0, noise, size=(n, channels, image_size, image_size))
    images += levels[band][:, None, None, None]
    tint = rng.uniform(0.5, 1.0, size=(n, channels))
    span = image_size - 2
    for i in range(n):
        motif = MOTIFS[orient[i]] if orientations > 1 else MOTIFS[rng.integers(4)]
        stamp = contrast * tint[i][:, None, None] * motif
        for _ in range(motifs_per_image):
            r, c = rng.integers(0, span, size=2)
            images[i, :, r : r + 3, c : c + 3] += stamp
    images = images.astype(np.float32)
    if task == "band":
        return ImageSet(images, band.astype(np.int64), bands)
    if task == "coarse" and orientations == 4:
        # axis-aligned vs diagonal lines; mirror pairs share a label
        return ImageSet(images, (band * 2 + orient // 2).astype(np.int64), bands * 2)
    return ImageSet(images, labels.astype(np.int64), classes)


# ---------------------------------------------------------------------------
# file formats


def _open(path: Path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file: two zero bytes, a type code, a rank byte, big-endian u32 extents, raw data."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: bad IDX magic")
    code, rank = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise DataError(f"{path}: unknown IDX element type 0x{code:02x}")
    header = 4 + 4 * rank
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=rank, offset=4))
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - header != expected:
        raise DataError(f"{path}: expected {expected} data bytes for dims {dims}, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    key = array.dtype.newbyteorder("=")
    if key not in codes:
        raise DataError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, codes[key], array.ndim]) + np.asarray(array.shape, dtype=">u4").tobytes()
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[codes[key]]).tobytes())


def read_cifar_binary(path, label_bytes: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Records of ``label_bytes`` label bytes followed by 3072 channel-major pixels.

    Returns ``uint8`` images ``[N, 3, 32, 32]`` and the last label byte of each
    record (the fine label for CIFAR-100).
    """
    path = Path(path)
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    record = label_bytes + CIFAR_PIXELS
    if raw.size % record:
        raise DataError(f"{path}: size {raw.size} is not a multiple of the {record}-byte record")
    rows = raw.reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def _normalize(images: np.ndarray, mean, std) -> np.ndarray:
    x = images.astype(np.float32)
    if mean is not None:
        x = x - np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    if std is not None:
        x = x / np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return x


def _load_idx_pair(pair, source: DatasetSource) -> ImageSet:
    if len(pair) != 2:
        raise ConfigError("idx_files splits must be [images_path, labels_path]")
    images = read_idx(pair[0])
    labels = read_idx(pair[1]).astype(np.int64).reshape(-1)
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise DataError(f"{pair[0]}: expected 3-D or 4-D image array, got {images.ndim}-D")
    return ImageSet(_normalize(images / 255.0, source.mean, source.std), labels, source.num_classes)


def _load_cifar(paths, source: DatasetSource) -> ImageSet:
    parts = [read_cifar_binary(p, source.label_bytes) for p in paths]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return ImageSet(_normalize(images / 255.0, source.mean, source.std), labels, source.num_classes)


def load_dataset(source: DatasetSource, image_size: int = 32, channels: int = 3) -> Dataset:
    if source.kind == "synthetic":
        train = synth_dataset(source.seed, source.n_train, source.num_classes, image_size, channels)
        test = None
        if source.n_test:
            test = synth_dataset(source.seed + 1_000_003, source.n_test, source.num_classes, image_size, channels)
        return Dataset(train, test)
    if source.kind == "idx_files":
        if not source.train:
            raise ConfigError("data.train must list [images, labels] IDX paths")
        return Dataset(
            _load_idx_pair(source.train, source),
            _load_idx_pair(source.test, source) if source.test else None,
        )
    if not source.train:
        raise ConfigError("data.train must list CIFAR batch files")
    return Dataset(_load_cifar(source.train, source), _load_cifar(source.test, source) if source.test else None)


def source_split(source: DatasetSource, n: int, image_size: int = 32, channels: int = 3, **task_kw) -> ImageSet:
    """Disjoint pretraining split with coarse labels (band x axis-aligned/diagonal)."""
    if source.kind != "synthetic":
        raise ConfigError("backbone pretraining is only defined for the synthetic source")
    return synth_dataset(source.seed + 2_000_003, n, source.num_classes, image_size, channels, task="coarse", **task_kw)
