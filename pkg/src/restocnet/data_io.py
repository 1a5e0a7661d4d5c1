"""Dataset readers, preprocessing and on-disk formats.

MNIST is read from the four IDX files, CIFAR-10 from its binary batches.
CIFAR images are contrast-normalised per channel and ZCA-whitened; the
resulting tensors can be cached as ``RSTP`` files.  Trained kernel banks and
thresholds are persisted as ``RSTC`` checkpoints (see :func:`save_checkpoint`).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class DataFormatError(ValueError):
    """Base class for malformed dataset or cache files."""


class MagicMismatchError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class RecordSizeError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


class DegenerateChannelError(ValueError):
    """A channel has zero standard deviation and cannot be normalised."""


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    """CRC or length mismatch."""


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64
    split: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > 9):
            raise LabelRangeError("labels must lie in [0, 9]")

    def __len__(self):
        return len(self.labels)

    def subset(self, start: int, stop: int) -> "LabeledImageSet":
        return LabeledImageSet(self.images[start:stop], self.labels[start:stop], self.split)


# --------------------------------------------------------------------------
# MNIST (IDX)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, name: str) -> Path:
    for candidate in (name, name.replace("-idx", ".idx")):
        path = directory / candidate
        if path.exists():
            return path
    raise FileNotFoundError(f"missing MNIST file {directory / name}")


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file (magic 2049 or 2051)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: header truncated")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise MagicMismatchError(f"{path}: bad IDX magic {magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayloadError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedPayloadError(
            f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-D images or 1-D labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_mnist(directory, split: str = "train") -> LabeledImageSet:
    """Load one MNIST split as an N x 1 x 28 x 28 float64 set in [0, 255]."""
    directory = Path(directory)
    image_name, label_name = MNIST_FILES[split]
    image_path, label_path = _find(directory, image_name), _find(directory, label_name)
    images = read_idx(image_path)
    labels = read_idx(label_path)
    if images.ndim != 3:
        raise MagicMismatchError(f"{image_path}: expected 3-D image file")
    if labels.ndim != 1:
        raise MagicMismatchError(f"{label_path}: expected 1-D label file")
    if len(images) != len(labels):
        raise RecordSizeError(f"{len(images)} images vs {len(labels)} labels")
    if len(labels) and labels.max() > 9:
        raise LabelRangeError(f"{label_path}: label {labels.max()} > 9")
    return LabeledImageSet(images[:, None].astype(np.float64), labels.astype(np.int64), split)


# --------------------------------------------------------------------------
# CIFAR-10 (binary batches)

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise RecordSizeError(
            f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        raise LabelRangeError(f"{path}: label byte {labels.max()} > 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, split: str = "train") -> LabeledImageSet:
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    parts = []
    for name in CIFAR_FILES[split]:
        path = directory / name
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR-10 batch {path}")
        parts.append(read_cifar_batch(path))
    images = np.concatenate([p[0] for p in parts]).astype(np.float64)
    labels = np.concatenate([p[1] for p in parts])
    return LabeledImageSet(images, labels, split)


# --------------------------------------------------------------------------
# Preprocessing


@dataclass
class ChannelStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)


def channel_stats(images: np.ndarray, eps: float = 0.0) -> ChannelStats:
    if len(images) == 0:
        raise ValueError("cannot compute statistics of an empty set")
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    if eps == 0.0 and np.any(std == 0):
        bad = np.flatnonzero(std == 0).tolist()
        raise DegenerateChannelError(f"zero-variance channel(s) {bad}; pass gcn_eps > 0")
    return ChannelStats(mean, std + eps)


def apply_gcn(images: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return (images - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]


def global_contrast_normalize(
    data: LabeledImageSet, stats: Optional[ChannelStats] = None, eps: float = 0.0
) -> tuple[LabeledImageSet, ChannelStats]:
    """Per-channel standardisation.

    Statistics are computed from ``data`` unless ``stats`` (from the training
    split) is supplied.
    """
    if stats is None:
        stats = channel_stats(data.images, eps)
    return LabeledImageSet(apply_gcn(data.images, stats), data.labels, data.split), stats


@dataclass
class ZcaModel:
    mean: np.ndarray  # per-channel GCN mean
    std: np.ndarray  # per-channel GCN std
    whitening: np.ndarray  # (D, D), symmetric
    epsilon: float
    pixel_mean: np.ndarray = field(default=None)  # (D,) mean of GCN'd data

    @property
    def dim(self) -> int:
        return self.whitening.shape[0]


def zca_matrix(covariance: np.ndarray, epsilon: float) -> np.ndarray:
    """``E (L + eps I)^-1/2 E^T`` for a symmetric covariance."""
    evals, evecs = np.linalg.eigh(covariance)
    evals = np.clip(evals, 0.0, None)
    scale = evals + epsilon
    if np.any(scale <= 0):
        raise np.linalg.LinAlgError(
            "covariance is rank deficient; use epsilon > 0")
    w = (evecs / np.sqrt(scale)) @ evecs.T
    return 0.5 * (w + w.T)


def zca_fit(data: LabeledImageSet | np.ndarray, epsilon: float = 1e-2,
            stats: Optional[ChannelStats] = None) -> ZcaModel:
    """Fit a ZCA model to contrast-normalised data.

    ``stats`` are the GCN statistics that produced ``data``; they are stored
    in the model so :func:`zca_apply` can be fed raw images.  When omitted the
    model treats its input as already normalised (identity GCN).
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = data.images if isinstance(data, LabeledImageSet) else np.asarray(data)
    n = len(x)
    flat = x.reshape(n, -1).astype(np.float64)
    pixel_mean = flat.mean(axis=0)
    centred = flat - pixel_mean
    cov = centred.T @ centred / n
    channels = x.shape[1] if x.ndim == 4 else 1
    if stats is None:
        stats = ChannelStats(np.zeros(channels), np.ones(channels))
    return ZcaModel(stats.mean, stats.std, zca_matrix(cov, epsilon), epsilon, pixel_mean)


def zca_apply(model: ZcaModel, data: LabeledImageSet) -> LabeledImageSet:
    """Normalise with the model's stored statistics, then whiten."""
    n = len(data.images)
    if int(np.prod(data.images.shape[1:])) != model.dim:
        raise ValueError(
            f"model dimension {model.dim} does not match images {data.images.shape[1:]}")
    normed = apply_gcn(data.images, ChannelStats(model.mean, model.std)).reshape(n, -1)
    if model.pixel_mean is not None:
        normed = normed - model.pixel_mean
    white = normed @ model.whitening  # W symmetric
    return LabeledImageSet(white.reshape(data.images.shape), data.labels, data.split)


# --------------------------------------------------------------------------
# Preprocessed tensor cache: "RSTP" u16 version, u8 ndim, u32 dims..., f32 LE

RSTP_MAGIC = b"RSTP"
RSTP_VERSION = 1


def save_tensor(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(RSTP_MAGIC)
        fh.write(struct.pack("<HB", RSTP_VERSION, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != RSTP_MAGIC:
        raise MagicMismatchError(f"{path}: not an RSTP tensor file")
    if len(raw) < 7:
        raise TruncatedPayloadError(f"{path}: header truncated")
    version, ndim = struct.unpack("<HB", raw[4:7])
    if version != RSTP_VERSION:
        raise DataFormatError(f"{path}: unsupported RSTP version {version}")
    dims = struct.unpack(f"<{ndim}I", raw[7:7 + 4 * ndim])
    offset = 7 + 4 * ndim
    count = int(np.prod(dims))
    if len(raw) - offset != 4 * count:
        raise TruncatedPayloadError(f"{path}: payload length mismatch")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)


def save_image_set(directory, data: LabeledImageSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / f"{data.split}-images.rstp", data.images)
    save_tensor(directory / f"{data.split}-labels.rstp", data.labels)


def load_image_set(directory, split: str) -> LabeledImageSet:
    directory = Path(directory)
    images = load_tensor(directory / f"{split}-images.rstp")
    labels = load_tensor(directory / f"{split}-labels.rstp").astype(np.int64)
    return LabeledImageSet(images, labels, split)


# --------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"RSTC"
CHECKPOINT_VERSION = 1

STORAGE_BINARY = 0
STORAGE_FLOAT = 1


@dataclass
class LayerRecord:
    """One stored kernel bank with its per-map thresholds.

    Binary banks hold ``bits`` (bool, out x in x k x k); full-precision banks
    (ablation only) hold float32 ``values`` instead.
    """

    bits: Optional[np.ndarray]
    thresholds: np.ndarray  # float32, one per output map
    w_low: float = -1.0
    w_high: float = 1.0
    values: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return (self.bits if self.bits is not None else self.values).shape

    def weights(self) -> np.ndarray:
        if self.values is not None:
            return self.values.astype(np.float32)
        return np.where(self.bits, np.float32(self.w_high), np.float32(self.w_low))


@dataclass
class Checkpoint:
    topology: dict  # JSON-serialisable topology descriptor
    layers: list  # list[LayerRecord]
    seed: int = 0
    classifier: Optional[list] = None  # [(W, b), ...] float64

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return dump_checkpoint(self) == dump_checkpoint(other)


def pack_bits(bits: np.ndarray) -> bytes:
    """Pack a boolean array row-major, MSB first within each byte."""
    return np.packbits(np.asarray(bits, dtype=bool).ravel()).tobytes()


def unpack_bits(payload: bytes, shape) -> np.ndarray:
    count = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count)
    return bits.astype(bool).reshape(shape)


def dump_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<H", CHECKPOINT_VERSION)
    out += struct.pack("<Q", int(ckpt.seed))
    topo = json.dumps(ckpt.topology, sort_keys=True).encode()
    out += struct.pack("<I", len(topo)) + topo
    out += struct.pack("<H", len(ckpt.layers))
    for layer in ckpt.layers:
        shape = layer.shape
        if len(shape) != 4:
            raise CheckpointError(f"kernel bank must be 4-D, got {shape}")
        storage = STORAGE_FLOAT if layer.values is not None else STORAGE_BINARY
        out += struct.pack("<B4I2f", storage, *shape, layer.w_low, layer.w_high)
        if storage == STORAGE_BINARY:
            payload = pack_bits(layer.bits)
        else:
            payload = np.ascontiguousarray(layer.values, dtype="<f4").tobytes()
        out += struct.pack("<I", len(payload)) + payload
        thresholds = np.asarray(layer.thresholds, dtype="<f4")
        if thresholds.shape != (shape[0],):
            raise CheckpointError("one threshold per output map required")
        out += thresholds.tobytes()
    if ckpt.classifier is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<BH", 1, len(ckpt.classifier))
        for weight, bias in ckpt.classifier:
            rows, cols = weight.shape
            out += struct.pack("<2I", rows, cols)
            out += np.ascontiguousarray(weight, dtype="<f8").tobytes()
            out += np.ascontiguousarray(bias, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError("checkpoint truncated")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError("not an RSTC checkpoint")
    if len(raw) < 6:
        raise CheckpointTruncatedError("checkpoint truncated")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    if len(raw) < 10:
        raise CheckpointTruncatedError("checkpoint truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    reader = _Reader(body)
    reader.take(6)
    try:
        (seed,) = reader.unpack("<Q")
        (topo_len,) = reader.unpack("<I")
        topology = json.loads(reader.take(topo_len).decode())
        (n_layers,) = reader.unpack("<H")
        layers = []
        for _ in range(n_layers):
            storage, *rest = reader.unpack("<B4I2f")
            shape, (w_low, w_high) = tuple(rest[:4]), rest[4:]
            (n_bytes,) = reader.unpack("<I")
            payload = reader.take(n_bytes)
            thresholds = np.frombuffer(reader.take(4 * shape[0]), dtype="<f4").astype(np.float32)
            if storage == STORAGE_BINARY:
                if n_bytes != -(-int(np.prod(shape)) // 8):
                    raise CheckpointCorruptError("kernel payload length mismatch")
                layers.append(LayerRecord(unpack_bits(payload, shape), thresholds, w_low, w_high))
            else:
                values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
                layers.append(LayerRecord(None, thresholds, w_low, w_high, values))
        (has_classifier,) = reader.unpack("<B")
        classifier = None
        if has_classifier:
            (n_fc,) = reader.unpack("<H")
            classifier = []
            for _ in range(n_fc):
                rows, cols = reader.unpack("<2I")
                w = np.frombuffer(reader.take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
                b = np.frombuffer(reader.take(8 * cols), dtype="<f8")
                classifier.append((w.copy(), b.copy()))
    except CheckpointTruncatedError:
        if zlib.crc32(body) != crc:
            raise CheckpointCorruptError("CRC mismatch") from None
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointCorruptError(f"malformed checkpoint: {exc}") from None
    if zlib.crc32(body) != crc:
        raise CheckpointCorruptError("CRC mismatch")
    if reader.pos != len(body):
        raise CheckpointCorruptError("trailing bytes before CRC")
    return Checkpoint(topology, layers, seed, classifier)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = dump_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
