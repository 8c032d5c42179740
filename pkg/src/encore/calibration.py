"""Class-aware confidence calibration: per-class reliability from labeled data."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from encore.ndgrid import ShapeError, softmax
from encore.segmodel import forward

log = logging.getLogger(__name__)

MODES = ("recall", "tp_confidence")


@dataclass
class ReliabilityVector:
    values: list  # float, or None where the class never appeared in the labeled truth
    mode: str
    counts: list  # number of labeled images containing each class

    @property
    def undefined_classes(self) -> list:
        return [c for c, v in enumerate(self.values) if v is None]

    def as_array(self) -> np.ndarray:
        if self.undefined_classes:
            raise ValueError(f"classes {self.undefined_classes} have no reliability value")
        return np.array(self.values, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "values": self.values,
            "undefined_classes": self.undefined_classes,
            "counts": self.counts,
        }


def compute_reliability(probs, truths, mode="tp_confidence") -> ReliabilityVector:
    """Reliability of each class, averaged over the images where it occurs.

    ``recall``: fraction of the class's pixels that the argmax predicts correctly.
    ``tp_confidence``: mean softmax probability of the class over its true
    positive pixels (0 for an image with no true positives).
    """
    if mode not in MODES:
        raise ValueError(f"unknown reliability mode {mode!r}; expected one of {MODES}")
    if len(probs) != len(truths):
        raise ValueError(f"{len(probs)} probability maps vs {len(truths)} truths")
    if not probs:
        raise ValueError("need at least one labeled image")

    num_classes = np.asarray(probs[0]).shape[0]
    totals = np.zeros(num_classes)
    counts = np.zeros(num_classes, dtype=np.int64)
    for p, t in zip(probs, truths):
        p = np.asarray(p, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != num_classes or p.shape[1:] != t.labels.shape:
            raise ShapeError(f"probabilities {p.shape} do not match truth {t.labels.shape}")
        if np.abs(p.sum(axis=0) - 1.0).max() > 1e-6:
            raise ValueError("probability maps must sum to 1 over classes")
        y = t.labels.ravel()
        flat = p.reshape(num_classes, -1)
        pred = np.argmax(flat, axis=0)
        tp = pred == y
        n_c = np.bincount(y, minlength=num_classes)[:num_classes]
        if mode == "recall":
            per_image = np.bincount(y[tp], minlength=num_classes)[:num_classes]
            per_image = per_image / np.maximum(n_c, 1)
        else:
            tp_count = np.bincount(y[tp], minlength=num_classes)[:num_classes]
            conf = flat[y[tp], np.flatnonzero(tp)]
            tp_conf = np.bincount(y[tp], weights=conf, minlength=num_classes)[:num_classes]
            per_image = tp_conf / np.maximum(tp_count, 1)
        present = n_c > 0
        totals[present] += per_image[present]
        counts += present

    values = [float(totals[c] / counts[c]) if counts[c] else None for c in range(num_classes)]
    return ReliabilityVector(values, mode, counts.tolist())


def resolve_undefined(rel: ReliabilityVector, fallback=0.95) -> ReliabilityVector:
    if not 0.0 < fallback < 1.0:
        raise ValueError(f"fallback must lie in (0, 1), got {fallback}")
    missing = rel.undefined_classes
    if not missing:
        return rel
    defined = [v for v in rel.values if v is not None]
    fill = float(np.mean(defined)) if defined else fallback
    log.info("reliability undefined for classes %s; filled with %.4f", missing, fill)
    values = [fill if v is None else v for v in rel.values]
    return ReliabilityVector(values, rel.mode, rel.counts)


def reliability_from_model(model, samples, mode="tp_confidence") -> ReliabilityVector:
    probs = [softmax(forward(model, s.image)) for s in samples]
    return compute_reliability(probs, [s.truth for s in samples], mode)
