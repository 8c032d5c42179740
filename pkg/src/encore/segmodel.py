"""Per-pixel segmenter over fixed local features, with hand-written gradients.

The model is either linear (``logits = W f + b``) or has one tanh hidden
layer (``logits = W2 tanh(W1 f + b1) + b2``). Features are computed once per
image by :class:`FeatureExtractor` and are not learned.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from encore.ndgrid import LabelMask, ShapeError


class TrainingError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureExtractor:
    channels: int = 1
    radius: int = 2

    @property
    def num_features(self) -> int:
        return self.channels * 3 + 2

    def __call__(self, image: np.ndarray) -> np.ndarray:
        """Return features of shape (F, H, W)."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != self.channels:
            raise ShapeError(
                f"extractor expects ({self.channels}, H, W), got {image.shape}"
            )
        _, h, w = image.shape
        size = 2 * self.radius + 1
        feats = np.empty((self.num_features, h, w))
        for ch in range(self.channels):
            x = image[ch]
            mean = uniform_filter(x, size=size, mode="reflect")
            sq = uniform_filter(x * x, size=size, mode="reflect")
            feats[3 * ch] = x
            feats[3 * ch + 1] = mean
            feats[3 * ch + 2] = np.sqrt(np.maximum(sq - mean * mean, 0.0))
        feats[-2] = np.linspace(-1.0, 1.0, h)[:, None]
        feats[-1] = np.linspace(-1.0, 1.0, w)[None, :]
        return feats


@dataclass
class SegModel:
    num_classes: int
    params: dict
    extractor: FeatureExtractor = field(default_factory=FeatureExtractor)
    step: int = 0

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[0] if "W1" in self.params else 0

    def architecture(self):
        return (self.num_classes, self.extractor, {k: v.shape for k, v in self.params.items()})


@dataclass
class LossReport:
    loss: float
    grads: dict
    count: int


def init_model(num_classes, extractor=None, hidden=0, seed=0, scale=0.1) -> SegModel:
    extractor = extractor or FeatureExtractor()
    n_feat = extractor.num_features
    rng = np.random.default_rng(seed)
    if hidden:
        params = {
            "W1": rng.normal(0.0, 1.0 / np.sqrt(n_feat), size=(hidden, n_feat)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, scale, size=(num_classes, hidden)),
            "b2": np.zeros(num_classes),
        }
    else:
        params = {
            "W": rng.normal(0.0, scale, size=(num_classes, n_feat)),
            "b": np.zeros(num_classes),
        }
    return SegModel(num_classes, params, extractor)


def _flat(features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 3:
        return features.reshape(features.shape[0], -1)
    return features


def logits_from_features(model: SegModel, features: np.ndarray) -> np.ndarray:
    """Logits for features of shape (F, H, W) -> (C, H, W), or (F, P) -> (C, P)."""
    features = np.asarray(features, dtype=np.float64)
    flat = _flat(features)
    if flat.shape[0] != model.extractor.num_features:
        raise ShapeError(
            f"model expects {model.extractor.num_features} features, got {flat.shape[0]}"
        )
    p = model.params
    if "W1" in p:
        hid = np.tanh(p["W1"] @ flat + p["b1"][:, None])
        out = p["W2"] @ hid + p["b2"][:, None]
    else:
        out = p["W"] @ flat + p["b"][:, None]
    return out.reshape((model.num_classes,) + features.shape[1:])


def forward(model: SegModel, image: np.ndarray) -> np.ndarray:
    return logits_from_features(model, model.extractor(image))


def loss_from_features(model: SegModel, features, labels, keep) -> LossReport:
    """Mean cross-entropy over kept pixels.

    ``features`` is (F, P) or a list of (F, H, W) arrays; labels and keep are
    the matching flat or per-image arrays.
    """
    if isinstance(features, (list, tuple)):
        flat = np.concatenate([_flat(f) for f in features], axis=1)
        labels = np.concatenate([np.asarray(l).ravel() for l in labels])
        keep = np.concatenate([np.asarray(k).ravel() for k in keep])
    else:
        flat = _flat(features)
        labels = np.asarray(labels).ravel()
        keep = np.asarray(keep, dtype=bool).ravel()
    if labels.shape[0] != flat.shape[1] or keep.shape[0] != flat.shape[1]:
        raise ShapeError(
            f"{flat.shape[1]} feature pixels vs {labels.shape[0]} labels / {keep.shape[0]} keep"
        )
    if labels.size and labels.max() >= model.num_classes:
        raise ShapeError(f"label {labels.max()} out of range for {model.num_classes} classes")

    count = int(keep.sum())
    p = model.params
    if count == 0:
        return LossReport(0.0, {k: np.zeros_like(v) for k, v in p.items()}, 0)

    f = flat[:, keep] if count < keep.size else flat
    y = labels[keep]
    cols = np.arange(count)
    # in-place updates below avoid large temporaries; this is the hot loop
    if "W1" in p:
        hid = p["W1"] @ f
        hid += p["b1"][:, None]
        np.tanh(hid, out=hid)
        z = p["W2"] @ hid
        z += p["b2"][:, None]
    else:
        z = p["W"] @ f
        z += p["b"][:, None]
    z -= z.max(axis=0, keepdims=True)
    z_true = z[y, cols]
    np.exp(z, out=z)
    norm = z.sum(axis=0)
    loss = float(np.mean(np.log(norm) - z_true))
    z /= norm
    dz = z
    dz[y, cols] -= 1.0
    dz /= count
    if "W1" in p:
        dhid = p["W2"].T @ dz
        grads = {"W2": dz @ hid.T, "b2": dz.sum(axis=1)}
        np.multiply(hid, hid, out=hid)
        np.subtract(1.0, hid, out=hid)
        dhid *= hid
        grads = {"W1": dhid @ f.T, "b1": dhid.sum(axis=1), **grads}
    else:
        grads = {"W": dz @ f.T, "b": dz.sum(axis=1)}
    return LossReport(max(loss, 0.0), grads, count)


def masked_ce_loss(model: SegModel, image: np.ndarray, target: LabelMask) -> LossReport:
    feats = model.extractor(image)
    if feats.shape[1:] != target.labels.shape:
        raise ShapeError(f"image {feats.shape[1:]} vs target {target.labels.shape}")
    return loss_from_features(model, feats, target.labels, target.keep)


def add_grads(a: dict, b: dict, weight=1.0) -> dict:
    return {k: a[k] + weight * b[k] for k in a}


def sgd_step(model: SegModel, grads: dict, lr: float) -> SegModel:
    # lr == 0 is allowed and leaves parameters untouched (end of a poly schedule)
    if not lr >= 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if set(grads) != set(model.params):
        raise ShapeError(f"gradient keys {sorted(grads)} != parameter keys {sorted(model.params)}")
    for k, g in grads.items():
        if g.shape != model.params[k].shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, expected {model.params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}", step=model.step)
    params = {k: v - lr * grads[k] for k, v in model.params.items()}
    return SegModel(model.num_classes, params, model.extractor, model.step + 1)


def poly_lr(lr_init: float, iteration: int, total: int, power: float = 0.9) -> float:
    if not 0 <= iteration < total:
        raise ScheduleError(f"iteration {iteration} outside [0, {total})")
    return lr_init * (1.0 - iteration / total) ** power


def clone(model: SegModel) -> SegModel:
    return copy.deepcopy(model)


def ema_update(teacher: SegModel, student: SegModel, decay: float) -> SegModel:
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"ema decay must be in [0, 1], got {decay}")
    if teacher.architecture() != student.architecture():
        raise ShapeError("teacher and student architectures differ")
    params = {
        k: decay * v + (1.0 - decay) * student.params[k] for k, v in teacher.params.items()
    }
    return SegModel(teacher.num_classes, params, teacher.extractor, teacher.step)


# ---------------------------------------------------------------------------
# checkpoints: hex-float encoding keeps every bit

def model_to_dict(model: SegModel) -> dict:
    return {
        "num_classes": model.num_classes,
        "step": model.step,
        "extractor": {"channels": model.extractor.channels, "radius": model.extractor.radius},
        "params": {
            k: {"shape": list(v.shape), "data": [float(x).hex() for x in v.ravel()]}
            for k, v in sorted(model.params.items())
        },
    }


def model_from_dict(d: dict) -> SegModel:
    params = {
        k: np.array([float.fromhex(x) for x in p["data"]], dtype=np.float64).reshape(p["shape"])
        for k, p in d["params"].items()
    }
    return SegModel(d["num_classes"], params, FeatureExtractor(**d["extractor"]), d["step"])


def save_model(model: SegModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> SegModel:
    return model_from_dict(json.loads(Path(path).read_text()))
