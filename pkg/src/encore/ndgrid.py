"""Dense float64 grids and label masks.

Grids are plain ``numpy.ndarray`` values of dtype float64 laid out as
``(channels, height, width)``; a leading batch axis is accepted by the
channel-wise ops, which always reduce over axis ``-3``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


def as_grid(data, ndim=3) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d grid, got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError(f"grid has an empty dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid contains non-finite values")
    return arr


@dataclass
class LabelMask:
    """Per-pixel class indices plus a keep flag per pixel."""

    labels: np.ndarray
    keep: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.labels.ndim != 2:
            raise ShapeError(f"labels must be 2-d, got {self.labels.shape}")
        if self.keep.shape != self.labels.shape:
            raise ShapeError(
                f"keep shape {self.keep.shape} != labels shape {self.labels.shape}"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("negative class index in labels")

    @classmethod
    def full(cls, labels) -> "LabelMask":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(labels, np.ones(labels.shape, dtype=bool))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def check_classes(self, num_classes: int) -> None:
        if self.labels.size and self.labels.max() >= num_classes:
            raise ValueError(
                f"label {int(self.labels.max())} out of range for {num_classes} classes"
            )

    def flipped(self) -> "LabelMask":
        return LabelMask(self.labels[:, ::-1].copy(), self.keep[:, ::-1].copy())

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels) and np.array_equal(
            self.keep, other.keep
        )


def _check_channels(grid: np.ndarray, min_channels=2) -> None:
    if grid.ndim < 3:
        raise ShapeError(f"expected (..., C, H, W), got shape {grid.shape}")
    if grid.shape[-3] < min_channels:
        raise ShapeError(f"need at least {min_channels} channels, got {grid.shape[-3]}")


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    _check_channels(logits)
    shifted = logits - logits.max(axis=-3, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-3, keepdims=True)


def argmax_channel(probs: np.ndarray) -> LabelMask:
    probs = np.asarray(probs, dtype=np.float64)
    _check_channels(probs)
    if probs.ndim != 3:
        raise ShapeError(f"expected (C, H, W), got shape {probs.shape}")
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return LabelMask.full(np.argmax(probs, axis=0))


def max_channel(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    _check_channels(probs, min_channels=1)
    return probs.max(axis=-3, keepdims=True)


# ---------------------------------------------------------------------------
# IO

def write_pgm(path, image: np.ndarray) -> None:
    """Write a single-channel image with values in [0, 1] as binary 8-bit PGM."""
    image = np.asarray(image)
    if image.ndim == 3:
        if image.shape[0] != 1:
            raise ShapeError("PGM holds a single channel")
        image = image[0]
    if image.dtype.kind == "f":
        pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    else:
        if image.size and (image.min() < 0 or image.max() > 255):
            raise ValueError("integer PGM values must lie in [0, 255]")
        pixels = image.astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _pgm_tokens(buf: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM; returns the raw uint8 array of shape (H, W)."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    (w, h, maxval), offset = _pgm_tokens(buf, 3)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=offset)
    return data.reshape(h, w).copy()


def write_grid_csv(path, grid: np.ndarray) -> None:
    """Debug dump: one row per flat index with its coordinates and value."""
    grid = np.asarray(grid, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"d{i}" for i in range(grid.ndim)] + ["value"])
        for idx in np.ndindex(grid.shape):
            writer.writerow([*idx, repr(float(grid[idx]))])
