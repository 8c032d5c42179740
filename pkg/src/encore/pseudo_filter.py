from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from encore.ndgrid import LabelMask, ShapeError

TAU_MIN = 0.05
TAU_MAX = 0.999


def clamp_tau(values) -> np.ndarray:
    return np.clip(np.asarray(values, dtype=np.float64), TAU_MIN, TAU_MAX)


@dataclass(frozen=True)
class ThresholdVector:
    values: np.ndarray
    provenance: str = "fixed"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ShapeError(f"threshold vector must be 1-d and non-empty, got shape {v.shape}")
        # NaN fails both comparisons
        if not ((v >= TAU_MIN) & (v <= TAU_MAX)).all():
            raise ValueError(f"thresholds {v.tolist()} outside [{TAU_MIN}, {TAU_MAX}]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, tau: float, num_classes: int, provenance="fixed"):
        return cls(np.full(num_classes, float(tau)), provenance)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ThresholdVector):
            return NotImplemented
        return np.array_equal(self.values, other.values) and self.provenance == other.provenance


def filter_pseudo_labels(probs: np.ndarray, tau: ThresholdVector) -> LabelMask:
    """Argmax pseudo-labels, kept where the winning probability reaches its class threshold."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] != len(tau):
        raise ShapeError(f"probabilities {probs.shape} vs {len(tau)} thresholds")
    labels = np.argmax(probs, axis=0)
    conf = np.take_along_axis(probs, labels[None], axis=0)[0]
    return LabelMask(labels, conf >= tau.values[labels])


def keep_fraction(mask: LabelMask, num_classes: int):
    """Kept share of pixels per (pseudo-)class and overall.

    A class with no pixels reports 0.0.
    """
    labels = mask.labels.ravel()
    keep = mask.keep.ravel()
    total = np.bincount(labels, minlength=num_classes)[:num_classes]
    kept = np.bincount(labels[keep], minlength=num_classes)[:num_classes]
    per_class = np.where(total > 0, kept / np.maximum(total, 1), 0.0)
    overall = float(keep.sum() / keep.size) if keep.size else 0.0
    return per_class.tolist(), overall
