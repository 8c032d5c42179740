"""Adaptive confidence thresholding with three class-wise controllers.

Controllers are numbered 1 (low), 2 (center) and 3 (high). Each iteration
one of them is selected by assessor Dice; a run of ``patience`` consecutive
selections of a boundary controller re-centres the triple on it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import Context, Decimal

import numpy as np

from encore.calibration import ReliabilityVector
from encore.pseudo_filter import TAU_MAX, TAU_MIN, ThresholdVector

LOW, CENTER, HIGH = 1, 2, 3


@dataclass(slots=True)
class ControllerState:
    """Owned by one trainer; :func:`record_and_adapt` updates it in place."""

    taus: tuple  # (low, center, high) ThresholdVectors
    alpha_low: float = 0.98
    alpha_high: float = 1.02
    patience: int = 5
    counter: int = 0
    last_selected: int | None = None
    active: int = CENTER  # controller whose thresholds filter the next student step
    log: list = field(default_factory=list)  # (iteration, "down" | "up")

    def tau(self, k: int) -> ThresholdVector:
        return self.taus[k - 1]

    def snapshot(self, iteration, adapted=False) -> dict:
        return {
            "iter": iteration,
            "tau1": self.taus[0].values.tolist(),
            "tau2": self.taus[1].values.tolist(),
            "tau3": self.taus[2].values.tolist(),
            "selected": self.last_selected,
            "active": self.active,
            "counter": self.counter,
            "adapted": adapted,
        }


_EXACT = Context(prec=60)  # exact for two 17-digit operands


def scale(values, alpha) -> np.ndarray:
    """``alpha * values`` as the correctly rounded product of their shortest decimal forms.

    Binary rounding would give 1.02 * 0.8 = 0.8160000000000001; here it is 0.816,
    so thresholds agree with hand arithmetic. Rounding is monotone, so
    alpha < 1 never raises a value and alpha > 1 never lowers one.
    """
    return np.array(_scaled(np.ravel(values).tolist(), alpha))


def _scaled(values: list, alpha) -> list:
    a = Decimal(repr(float(alpha)))
    mul = _EXACT.multiply
    return [float(mul(a, Decimal(repr(v)))) for v in values]


def _clamped(values: list) -> np.ndarray:
    return np.array([min(TAU_MAX, max(TAU_MIN, v)) for v in values])


def _triple(center, alpha_low, alpha_high):
    center = np.asarray(center, dtype=np.float64).tolist()
    return (
        ThresholdVector(_clamped(_scaled(center, alpha_low)), "1"),
        ThresholdVector(_clamped(center), "2"),
        ThresholdVector(_clamped(_scaled(center, alpha_high)), "3"),
    )


def init_controllers(reliability, alpha_low=0.98, alpha_high=1.02, patience=5) -> ControllerState:
    if not 0.0 < alpha_low < 1.0 < alpha_high:
        raise ValueError(
            f"threshold adaptors must satisfy 0 < alpha_low < 1 < alpha_high, "
            f"got ({alpha_low}, {alpha_high})"
        )
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    if isinstance(reliability, ReliabilityVector):
        reliability = reliability.as_array()
    return ControllerState(_triple(reliability, alpha_low, alpha_high), alpha_low, alpha_high, patience)


def select(scores) -> int:
    """Controller with the highest Dice. Ties prefer the center, then the low side."""
    scores = [float(s) for s in scores]
    if len(scores) != 3:
        raise ValueError(f"expected three scores, got {len(scores)}")
    if not all(math.isfinite(s) for s in scores):
        raise ValueError(f"non-finite assessor score in {scores}")
    best = max(scores)
    if scores[CENTER - 1] == best:
        return CENTER
    return LOW if scores[LOW - 1] == best else HIGH


def record_and_adapt(state: ControllerState, selected: int, iteration: int) -> ControllerState:
    """Count consecutive selections and re-centre on a boundary controller after a full run.

    The counter restarts at zero after each adaptation; the center controller
    never adapts and its counter saturates at ``patience``.
    """
    if selected not in (LOW, CENTER, HIGH):
        raise ValueError(f"selected controller must be 1, 2 or 3, got {selected}")
    counter = state.counter + 1 if selected == state.last_selected else 1
    state.last_selected = selected
    state.active = selected
    if selected == CENTER:
        state.counter = min(counter, state.patience)
        return state
    if counter < state.patience:
        state.counter = counter
        return state
    pivot = state.taus[selected - 1].values
    state.taus = _triple(pivot, state.alpha_low, state.alpha_high)
    state.counter = 0
    # the old winner is the new center
    state.active = CENTER
    state.log.append((iteration, "down" if selected == LOW else "up"))
    return state


def active_threshold(state: ControllerState) -> ThresholdVector:
    return state.taus[state.active - 1]


class TraceWriter:
    """Appends one JSON object per iteration to a JSON-lines file."""

    def __init__(self, path):
        self._fh = open(path, "w")

    def write(self, snapshot: dict) -> None:
        self._fh.write(json.dumps(snapshot) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
