"""Synthetic multi-class segmentation scenes with per-class difficulty."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from encore.ndgrid import LabelMask, read_pgm, write_pgm

SHAPE_KINDS = ("disk", "rectangle", "ring")
FRACTIONS = (1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32)


class GenerationError(ValueError):
    def __init__(self, class_index, message):
        super().__init__(f"class {class_index}: {message}")
        self.class_index = class_index


@dataclass(frozen=True)
class ShapeClass:
    kind: str
    mean: float
    sigma: float
    color: tuple | None = None  # per-channel means for 3-channel scenes; defaults to gray at `mean`
    size: tuple = (0.12, 0.22)  # radius / half-extent range, as a fraction of min(H, W)


@dataclass(frozen=True)
class SceneSpec:
    """Scene layout and appearance.

    Each scene draws one log-normal brightness gain shared by all channels
    (``gain_sigma``) and, optionally, a per-channel colour cast
    (``cast_sigma``). Hue ratios survive a shared gain, so the classes stay
    separable, but a handful of labeled scenes samples the gain range poorly.
    """

    height: int = 64
    width: int = 64
    shapes: tuple = (
        ShapeClass("disk", 0.55, 0.02, color=(0.9, 0.15, 0.15)),
        ShapeClass("rectangle", 0.55, 0.12, color=(0.15, 0.8, 0.2)),
        ShapeClass("ring", 0.55, 0.30, color=(0.2, 0.25, 0.9)),
    )
    background_mean: float = 0.3
    background_sigma: float = 0.04
    channels: int = 3
    gain_sigma: float = 0.7
    cast_sigma: float = 0.15
    seed: int = 0

    def __post_init__(self):
        shapes = tuple(s if isinstance(s, ShapeClass) else ShapeClass(**s) for s in self.shapes)
        shapes = tuple(
            replace(s, size=tuple(s.size), color=None if s.color is None else tuple(s.color))
            for s in shapes
        )
        object.__setattr__(self, "shapes", shapes)
        if self.height < 4 or self.width < 4:
            raise ValueError("scene must be at least 4x4")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if not shapes:
            raise ValueError("need at least one foreground shape")
        for c, s in enumerate(shapes, start=1):
            if s.kind not in SHAPE_KINDS:
                raise GenerationError(c, f"unknown shape kind {s.kind!r}")
            if not (math.isfinite(s.sigma) and s.sigma >= 0):
                raise GenerationError(c, f"noise sigma must be finite and >= 0, got {s.sigma}")
            if not 0.0 <= s.mean <= 1.0:
                raise GenerationError(c, f"intensity mean {s.mean} outside [0, 1]")
            if s.color is not None and (len(s.color) != 3 or not all(0 <= v <= 1 for v in s.color)):
                raise GenerationError(c, f"color must be three values in [0, 1], got {s.color}")
        if not (math.isfinite(self.background_sigma) and self.background_sigma >= 0):
            raise GenerationError(0, "background sigma must be finite and >= 0")
        for name in ("gain_sigma", "cast_sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    @property
    def class_count(self) -> int:
        return 1 + len(self.shapes)

    def class_means(self) -> np.ndarray:
        """(C, channels) mean appearance before the scene gain."""
        rows = [[self.background_mean] * 3]
        for s in self.shapes:
            rows.append(list(s.color) if s.color is not None else [s.mean] * 3)
        means = np.array(rows, dtype=np.float64)
        if self.channels == 1:
            means = np.array([[self.background_mean]] + [[s.mean] for s in self.shapes])
        return means

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = [asdict(s) for s in self.shapes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "shapes" in d:
            d["shapes"] = tuple(ShapeClass(**s) for s in d["shapes"])
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (channels, H, W), values in [0, 1]
    truth: LabelMask
    id: int


@dataclass(frozen=True)
class SplitSpec:
    total: int
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not any(math.isclose(self.fraction, f) for f in FRACTIONS):
            raise ValueError(f"label fraction {self.fraction} not one of 1/2 .. 1/32")

    @property
    def labeled_count(self) -> int:
        return max(1, math.floor(self.fraction * self.total + 1e-9))


def _shape_mask(kind, cy, cx, r, yy, xx):
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= 0.7 * r)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)


def _draw_scene(spec: SceneSpec, rng: np.random.Generator):
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int64)
    occupied = np.zeros((h, w), dtype=bool)
    side = min(h, w)
    for c, shape in enumerate(spec.shapes, start=1):
        lo, hi = shape.size
        r = rng.uniform(lo, hi) * side
        if 2 * r + 2 > side:
            raise GenerationError(c, f"shape of radius {r:.1f}px cannot fit in {h}x{w}")
        mask = None
        for _ in range(60):
            cy = rng.uniform(r + 1, h - r - 2)
            cx = rng.uniform(r + 1, w - r - 2)
            candidate = _shape_mask(shape.kind, cy, cx, r, yy, xx)
            mask = candidate
            if not (candidate & occupied).any():
                break
        labels[mask] = c
        occupied |= mask

    means = spec.class_means()
    if spec.gain_sigma or spec.cast_sigma:
        log_gain = spec.gain_sigma * rng.standard_normal() + spec.cast_sigma * rng.standard_normal(spec.channels)
        means = means * np.exp(log_gain)
    sigmas = [spec.background_sigma] + [s.sigma for s in spec.shapes]
    image = np.empty((spec.channels, h, w))
    for c in range(spec.class_count):
        sel = labels == c
        noise = rng.standard_normal((spec.channels, int(sel.sum())))
        image[:, sel] = means[c][:, None] + sigmas[c] * noise
    np.clip(image, 0.0, 1.0, out=image)
    return image, labels


def generate(spec: SceneSpec, count: int) -> list:
    if count < 1:
        raise ValueError("count must be >= 1")
    samples = []
    for i in range(count):
        rng = np.random.default_rng([spec.seed, i])
        image, labels = _draw_scene(spec, rng)
        samples.append(Sample(image, LabelMask.full(labels), i))
    return samples


def split(samples: list, split_spec: SplitSpec):
    if split_spec.total != len(samples):
        raise ValueError(f"split expects {split_spec.total} samples, got {len(samples)}")
    order = np.random.default_rng(split_spec.seed).permutation(len(samples))
    k = split_spec.labeled_count
    labeled_idx = set(order[:k].tolist())
    labeled = [s for i, s in enumerate(samples) if i in labeled_idx]
    unlabeled = [s for i, s in enumerate(samples) if i not in labeled_idx]
    return labeled, unlabeled


def augment_weak(sample: Sample, rng) -> Sample:
    if rng.random() < 0.5:
        return Sample(sample.image[:, :, ::-1].copy(), sample.truth.flipped(), sample.id)
    return sample


def jitter_intensity(image: np.ndarray, rng) -> np.ndarray:
    """Additive noise (sigma 0.05) then contrast scaling about the image mean."""
    image = image + rng.normal(0.0, 0.05, size=image.shape)
    factor = rng.uniform(0.7, 1.3)
    mean = image.mean()
    return np.clip((image - mean) * factor + mean, 0.0, 1.0)


def augment_strong(sample: Sample, rng) -> Sample:
    out = augment_weak(sample, rng)
    return Sample(jitter_intensity(out.image, rng), out.truth, out.id)


# ---------------------------------------------------------------------------
# on-disk dataset: PGM pairs plus a JSON manifest

@dataclass
class Dataset:
    spec: SceneSpec
    train: list
    test: list = field(default_factory=list)
    labeled_ids: set = field(default_factory=set)

    @property
    def num_classes(self) -> int:
        return self.spec.class_count

    def labeled_split(self):
        labeled = [s for s in self.train if s.id in self.labeled_ids]
        unlabeled = [s for s in self.train if s.id not in self.labeled_ids]
        return labeled, unlabeled

    def resplit(self, fraction: float, seed: int) -> "Dataset":
        labeled, _ = split(self.train, SplitSpec(len(self.train), fraction, seed))
        return Dataset(self.spec, self.train, self.test, {s.id for s in labeled})


def build_dataset(spec: SceneSpec, count: int, fraction=1 / 8, test_count=0, split_seed=0):
    samples = generate(spec, count + test_count)
    train, test = samples[:count], samples[count:]
    labeled, _ = split(train, SplitSpec(count, fraction, split_seed))
    return Dataset(spec, train, test, {s.id for s in labeled})


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for part, samples in (("train", ds.train), ("test", ds.test)):
        for s in samples:
            # one PGM per channel
            img = [f"images/{s.id:05d}_c{ch}.pgm" for ch in range(s.image.shape[0])]
            msk = f"masks/{s.id:05d}.pgm"
            for ch, name in enumerate(img):
                write_pgm(out / name, s.image[ch])
            write_pgm(out / msk, s.truth.labels)
            entries.append({
                "id": s.id,
                "split": part,
                "labeled": s.id in ds.labeled_ids,
                "image": img,
                "mask": msk,
            })
    manifest = {"spec": ds.spec.to_dict(), "samples": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(data_dir) -> Dataset:
    """Load a manifest directory.

    Images come back quantized to 8 bits, exactly as written.
    """
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    spec = SceneSpec.from_dict(manifest["spec"])
    train, test, labeled = [], [], set()
    for e in manifest["samples"]:
        paths = e["image"] if isinstance(e["image"], list) else [e["image"]]
        image = np.stack([read_pgm(root / p) for p in paths]).astype(np.float64) / 255.0
        labels = read_pgm(root / e["mask"]).astype(np.int64)
        truth = LabelMask.full(labels)
        truth.check_classes(spec.class_count)
        s = Sample(image, truth, int(e["id"]))
        (test if e.get("split") == "test" else train).append(s)
        if e.get("labeled"):
            labeled.add(s.id)
    return Dataset(spec, train, test, labeled)
