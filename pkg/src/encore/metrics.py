from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from encore.ndgrid import LabelMask, ShapeError


@dataclass
class DiceReport:
    dice: list  # per class, background included at index 0
    absent: list  # True where the class is in neither prediction nor truth
    mean_foreground: float
    pred_counts: list
    truth_counts: list

    def csv_header(self):
        return ["sample_id"] + [f"dice_{c}" for c in range(len(self.dice))] + ["mean_foreground"]

    def csv_row(self, sample_id):
        cells = ["absent" if a else repr(float(d)) for d, a in zip(self.dice, self.absent)]
        return [sample_id] + cells + [repr(float(self.mean_foreground))]


def dice(pred: LabelMask, truth: LabelMask, num_classes: int) -> DiceReport:
    """Per-class Dice between two label maps.

    A class found in neither map scores 1.0 but is flagged absent; the
    foreground mean skips absent classes and class 0. If every foreground
    class is absent the mean is 1.0.
    """
    p = np.asarray(pred.labels).ravel()
    t = np.asarray(truth.labels).ravel()
    if pred.labels.shape != truth.labels.shape:
        raise ShapeError(f"prediction {pred.labels.shape} vs truth {truth.labels.shape}")
    pc = np.bincount(p, minlength=num_classes)[:num_classes]
    tc = np.bincount(t, minlength=num_classes)[:num_classes]
    inter = np.bincount(p[p == t], minlength=num_classes)[:num_classes]
    denom = pc + tc
    absent = denom == 0
    scores = np.where(absent, 1.0, 2.0 * inter / np.where(absent, 1, denom))
    fg = ~absent[1:]
    mean_fg = float(scores[1:][fg].mean()) if fg.any() else 1.0
    return DiceReport(
        scores.tolist(), absent.tolist(), mean_fg, pc.tolist(), tc.tolist()
    )


def mean_dice(preds, truths, num_classes: int) -> float:
    """Foreground Dice averaged over images, summed in index order."""
    total = 0.0
    for p, t in zip(preds, truths, strict=True):
        total += dice(p, t, num_classes).mean_foreground
    return total / len(preds)
