"""PGM renderings of binary weights and on-disk activation exports."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .data_io import load_tensor, save_tensor

GAP_VALUE = 128


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) greyscale PGM with maxval 255."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM export expects a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def tile(images: np.ndarray, cols: int, gap: int = 1) -> np.ndarray:
    """Arrange ``n`` equally sized uint8 tiles row-major on a grid."""
    n, h, w = images.shape
    rows = max(1, math.ceil(n / cols))
    out = np.full((rows * (h + gap) - gap, cols * (w + gap) - gap), GAP_VALUE, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        out[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = images[i]
    return out


def kernel_tiles(bits: np.ndarray) -> np.ndarray:
    """J x I x k x k bits -> one image; row j holds output map j's kernels."""
    j, i, kh, kw = bits.shape
    pixels = np.where(bits, 255, 0).astype(np.uint8)
    return tile(pixels.reshape(j * i, kh, kw), cols=i)


def receptive_field_tiles(weights: np.ndarray, side: int = 28) -> np.ndarray:
    """(side*side) x N binary weights -> sqrt(N) x sqrt(N) grid of fields."""
    n = weights.shape[1]
    fields = np.where(weights.T.reshape(n, side, side), 255, 0).astype(np.uint8)
    return tile(fields, cols=math.ceil(math.sqrt(n)))


def export_activations(directory, split: str, activations: np.ndarray, labels) -> tuple:
    """Write ``{split}-activations.rstp`` and a ``{split}-labels.csv`` index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(activations):
        raise ValueError("one label per activation row expected")
    tensor_path = directory / f"{split}-activations.rstp"
    index_path = directory / f"{split}-labels.csv"
    save_tensor(tensor_path, np.asarray(activations, dtype=np.float32))
    with open(index_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "label"])
        writer.writerows(enumerate(labels.tolist()))
    return tensor_path, index_path


def load_activations(directory, split: str) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    x = load_tensor(directory / f"{split}-activations.rstp")
    with open(directory / f"{split}-labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    if len(labels) != len(x):
        raise ValueError(f"{directory}: label index does not match activation rows")
    return x, labels
