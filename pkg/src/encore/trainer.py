"""Teacher-student pseudo-supervision loop with optional adaptive thresholds.

Modes:
  supervised  labeled loss only
  fixed       one scalar threshold for every class
  cac_only    class-wise thresholds from the reliability vector, never adapted
  encore      three assessors per iteration pick and adapt the threshold triple
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from encore import calibration
from encore.act_controller import (
    CENTER,
    TraceWriter,
    active_threshold,
    init_controllers,
    record_and_adapt,
    select,
)
from encore.metrics import dice, mean_dice
from encore.ndgrid import LabelMask, argmax_channel, softmax
from encore.pseudo_filter import ThresholdVector, clamp_tau, filter_pseudo_labels, keep_fraction
from encore.segmodel import (
    FeatureExtractor,
    SegModel,
    TrainingError,
    add_grads,
    clone,
    ema_update,
    init_model,
    logits_from_features,
    loss_from_features,
    poly_lr,
    save_model,
    sgd_step,
)
from encore.synthdata import Dataset, Sample, jitter_intensity

log = logging.getLogger(__name__)

MODES = ("supervised", "fixed", "cac_only", "encore")


class ConfigError(ValueError):
    def __init__(self, problems):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = problems


@dataclass
class TrainConfig:
    mode: str = "encore"
    epochs: int = 3
    iterations: int | None = None  # overrides epochs when set
    batch_labeled: int = 2
    batch_unlabeled: int = 4
    lr_init: float = 0.5
    unsup_weight: float = 1.0
    ramp: bool = True  # linear ramp of the unsupervised weight over the first 20% of iterations
    ema_decay: float = 0.99
    fixed_threshold: float = 0.95
    cac_mode: str = "tp_confidence"
    alpha_low: float = 0.98
    alpha_high: float = 1.02
    patience: int = 5
    warmup_fraction: float = 0.2
    hidden: int = 16
    radius: int = 2
    label_fraction: float | None = None  # re-split the training pool instead of using manifest flags
    eval_every: int = 0
    seed: int = 0

    def problems(self) -> list:
        out = []
        if self.mode not in MODES:
            out.append(f"mode: {self.mode!r} not one of {MODES}")
        if self.epochs < 1:
            out.append(f"epochs: must be >= 1, got {self.epochs}")
        if self.iterations is not None and self.iterations < 1:
            out.append(f"iterations: must be >= 1, got {self.iterations}")
        if self.batch_labeled < 1:
            out.append(f"batch_labeled: must be >= 1, got {self.batch_labeled}")
        if self.batch_unlabeled < 1:
            out.append(f"batch_unlabeled: must be >= 1, got {self.batch_unlabeled}")
        if not self.lr_init > 0:
            out.append(f"lr_init: must be > 0, got {self.lr_init}")
        if not self.unsup_weight >= 0:
            out.append(f"unsup_weight: must be >= 0, got {self.unsup_weight}")
        if not 0.0 <= self.ema_decay < 1.0:
            out.append(f"ema_decay: must be in [0, 1), got {self.ema_decay}")
        if not 0.05 <= self.fixed_threshold <= 0.999:
            out.append(f"fixed_threshold: must be in [0.05, 0.999], got {self.fixed_threshold}")
        if self.cac_mode not in calibration.MODES:
            out.append(f"cac_mode: {self.cac_mode!r} not one of {calibration.MODES}")
        if not 0.0 < self.alpha_low < 1.0:
            out.append(f"alpha_low: must be in (0, 1), got {self.alpha_low}")
        if not self.alpha_high > 1.0:
            out.append(f"alpha_high: must be > 1, got {self.alpha_high}")
        if self.patience < 1:
            out.append(f"patience: must be >= 1, got {self.patience}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            out.append(f"warmup_fraction: must be in [0, 1), got {self.warmup_fraction}")
        if self.hidden < 0:
            out.append(f"hidden: must be >= 0, got {self.hidden}")
        if self.radius < 1:
            out.append(f"radius: must be >= 1, got {self.radius}")
        if self.eval_every < 0:
            out.append(f"eval_every: must be >= 0, got {self.eval_every}")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationRecord:
    iteration: int
    phase: str
    lr: float
    unsup_weight: float = 0.0
    loss_l: float = 0.0
    loss_u: float = 0.0
    kept_fraction: float = 0.0
    assessor_dice: tuple | None = None
    selected: int | None = None
    tau: list | None = None
    adapted: bool = False
    eval_dice: float | None = None

    CSV_HEADER = (
        "iteration", "phase", "lr", "unsup_weight", "loss_l", "loss_u", "kept_fraction",
        "dice_1", "dice_2", "dice_3", "selected", "adapted", "eval_dice",
    )

    def csv_row(self) -> list:
        d = self.assessor_dice or ("", "", "")
        return [
            self.iteration, self.phase, repr(self.lr), repr(self.unsup_weight),
            repr(self.loss_l), repr(self.loss_u), repr(self.kept_fraction),
            *(repr(x) if x != "" else "" for x in d),
            "" if self.selected is None else self.selected,
            int(self.adapted),
            "" if self.eval_dice is None else repr(self.eval_dice),
        ]


# ---------------------------------------------------------------------------
# batches

@dataclass
class LabeledBatch:
    feats: list
    truths: list

    @property
    def labels(self):
        return [t.labels for t in self.truths]


@dataclass
class UnlabeledBatch:
    weak: list
    strong: list


class _FeatureCache:
    """Features of unaugmented and flipped images, computed on first use."""

    def __init__(self, extractor: FeatureExtractor):
        self.extractor = extractor
        self._cache = {}

    def __call__(self, sample: Sample, flipped: bool) -> np.ndarray:
        key = (sample.id, flipped)
        if key not in self._cache:
            image = sample.image[:, :, ::-1] if flipped else sample.image
            self._cache[key] = self.extractor(image)
        return self._cache[key]


def _draw(rng, n, k):
    return rng.choice(n, size=k, replace=n < k)


def labeled_batch(samples, rng, size, cache) -> LabeledBatch:
    feats, truths = [], []
    for i in _draw(rng, len(samples), size):
        s = samples[i]
        flip = rng.random() < 0.5
        feats.append(cache(s, flip))
        truths.append(s.truth.flipped() if flip else s.truth)
    return LabeledBatch(feats, truths)


def unlabeled_batch(samples, rng, size, cache, extractor) -> UnlabeledBatch:
    weak, strong = [], []
    for i in _draw(rng, len(samples), size):
        s = samples[i]
        flip = rng.random() < 0.5
        weak.append(cache(s, flip))
        # strong view shares the weak view's flip so pseudo-labels stay aligned
        image = s.image[:, :, ::-1] if flip else s.image
        strong.append(extractor(jitter_intensity(image, rng)))
    return UnlabeledBatch(weak, strong)


def predict_probs(model: SegModel, feats) -> list:
    return [softmax(logits_from_features(model, f)) for f in feats]


def assessor_dice(model: SegModel, batch: LabeledBatch, k: int = 0) -> float:
    preds = [argmax_channel(p) for p in predict_probs(model, batch.feats)]
    return mean_dice(preds, batch.truths, model.num_classes)


def _check_loss(report, where, iteration):
    if not math.isfinite(report.loss):
        raise TrainingError(f"non-finite loss ({where})", step=iteration)


def supervised_step(student, batch: LabeledBatch, lr, iteration):
    rep = loss_from_features(student, batch.feats, batch.labels, [t.keep for t in batch.truths])
    _check_loss(rep, "labeled", iteration)
    return sgd_step(student, rep.grads, lr), rep


def pseudo_masks(probs, tau: ThresholdVector) -> list:
    return [filter_pseudo_labels(p, tau) for p in probs]


def _unsup_loss(model, batch: UnlabeledBatch, masks):
    return loss_from_features(
        model, batch.strong, [m.labels for m in masks], [m.keep for m in masks]
    )


def _kept(masks) -> float:
    kept = sum(int(m.keep.sum()) for m in masks)
    return kept / sum(m.keep.size for m in masks)


def student_step(student, lbatch, ubatch, masks, lr, weight, iteration):
    rep_l = loss_from_features(student, lbatch.feats, lbatch.labels, [t.keep for t in lbatch.truths])
    _check_loss(rep_l, "labeled", iteration)
    rep_u = _unsup_loss(student, ubatch, masks)
    _check_loss(rep_u, "unlabeled", iteration)
    grads = add_grads(rep_l.grads, rep_u.grads, weight)
    return sgd_step(student, grads, lr), rep_l, rep_u


def encore_iteration(
    student, teacher, state, lbatch, ubatch, config, iteration, lr, weight, assess=assessor_dice
):
    """One adaptive-threshold iteration; returns (student, teacher, state, record).

    ``assess(model, lbatch, k)`` scores assessor ``k`` on the labeled batch and
    may be replaced to script the controller's feedback.
    """
    probs = predict_probs(teacher, ubatch.weak)
    scores = []
    for k in (1, 2, 3):
        assessor = clone(student)
        masks = pseudo_masks(probs, state.tau(k))
        rep = _unsup_loss(assessor, ubatch, masks)
        try:
            _check_loss(rep, f"assessor {k}", iteration)
            assessor = sgd_step(assessor, rep.grads, lr)
        except TrainingError as exc:
            raise TrainingError(f"assessor {k}: {exc}", step=iteration) from exc
        scores.append(float(assess(assessor, lbatch, k)))
    chosen = select(scores)
    before = len(state.log)
    state = record_and_adapt(state, chosen, iteration)
    tau = active_threshold(state)
    masks = pseudo_masks(probs, tau)
    student, rep_l, rep_u = student_step(student, lbatch, ubatch, masks, lr, weight, iteration)
    teacher = ema_update(teacher, student, config.ema_decay)
    record = IterationRecord(
        iteration, "encore", lr, weight, rep_l.loss, rep_u.loss, _kept(masks),
        tuple(scores), chosen, tau.values.tolist(), len(state.log) > before,
    )
    return student, teacher, state, record


def fixed_iteration(student, teacher, tau, lbatch, ubatch, config, iteration, lr, weight):
    probs = predict_probs(teacher, ubatch.weak)
    masks = pseudo_masks(probs, tau)
    student, rep_l, rep_u = student_step(student, lbatch, ubatch, masks, lr, weight, iteration)
    teacher = ema_update(teacher, student, config.ema_decay)
    record = IterationRecord(
        iteration, config.mode, lr, weight, rep_l.loss, rep_u.loss, _kept(masks),
        tau=tau.values.tolist(),
    )
    return student, teacher, record


# ---------------------------------------------------------------------------
# schedule

def total_iterations(config: TrainConfig, unlabeled_count: int) -> int:
    if config.iterations is not None:
        return config.iterations
    per_epoch = max(1, math.ceil(unlabeled_count / config.batch_unlabeled))
    return config.epochs * per_epoch


def warmup_iterations(config: TrainConfig, total: int) -> int:
    return int(round(config.warmup_fraction * total))


def unsup_weight(config: TrainConfig, step: int, semi_total: int) -> float:
    """Step counts from the first semi-supervised iteration."""
    if not config.ramp:
        return config.unsup_weight
    ramp_len = max(1, int(round(0.2 * semi_total)))
    return config.unsup_weight * min(1.0, (step + 1) / ramp_len)


@dataclass
class RNGStreams:
    """Independent streams so that labeled sampling never depends on the mode."""

    labeled: np.random.Generator
    unlabeled: np.random.Generator

    @classmethod
    def from_seed(cls, seed):
        a, b = np.random.SeedSequence(seed).spawn(2)
        return cls(np.random.default_rng(a), np.random.default_rng(b))


def warmup(config: TrainConfig, labeled, iterations=None, total=None, num_classes=None,
           rngs=None, cache=None, records=None) -> SegModel:
    """Train on labeled data only; returns the warmed-up student."""
    if not labeled:
        raise ValueError("warmup needs at least one labeled sample")
    num_classes = num_classes or 1 + max(int(s.truth.labels.max()) for s in labeled)
    extractor = FeatureExtractor(labeled[0].image.shape[0], config.radius)
    if iterations is None:
        total = total or total_iterations(config, len(labeled))
        iterations = warmup_iterations(config, total)
    total = total or max(iterations, 1)
    rngs = rngs or RNGStreams.from_seed(config.seed)
    cache = cache or _FeatureCache(extractor)
    model = init_model(num_classes, extractor, config.hidden, seed=config.seed)
    for it in range(iterations):
        lr = poly_lr(config.lr_init, it, total)
        batch = labeled_batch(labeled, rngs.labeled, config.batch_labeled, cache)
        model, rep = supervised_step(model, batch, lr, it)
        if records is not None:
            records.append(IterationRecord(it, "warmup", lr, loss_l=rep.loss))
    return model


@dataclass
class RunResult:
    student: SegModel
    records: list
    eval_dice: float
    per_class_dice: list
    reliability: object = None
    controller: object = None
    cac_calls: int = 0


def evaluate(model: SegModel, samples) -> tuple:
    reports = []
    for s in samples:
        pred = argmax_channel(softmax(logits_from_features(model, model.extractor(s.image))))
        reports.append(dice(pred, s.truth, model.num_classes))
    mean = sum(r.mean_foreground for r in reports) / len(reports)
    return mean, reports


def _per_class(reports, num_classes):
    out = []
    for c in range(num_classes):
        vals = [r.dice[c] for r in reports if not r.absent[c]]
        out.append(sum(vals) / len(vals) if vals else None)
    return out


def run(config: TrainConfig, dataset: Dataset, out_dir=None, assess=assessor_dice) -> RunResult:
    config.validate()
    if config.label_fraction is not None:
        dataset = dataset.resplit(config.label_fraction, config.seed)
    labeled, unlabeled = dataset.labeled_split()
    if not labeled:
        raise ValueError("dataset has no labeled samples")
    if config.mode != "supervised" and not unlabeled:
        raise ValueError(f"mode {config.mode} needs unlabeled samples")
    test = dataset.test
    if not test:
        log.warning("dataset has no test split; evaluating on the unlabeled pool")
        test = unlabeled or labeled
    num_classes = dataset.num_classes

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")

    total = total_iterations(config, len(unlabeled))
    n_warm = warmup_iterations(config, total)
    semi_total = total - n_warm
    rngs = RNGStreams.from_seed(config.seed)
    extractor = FeatureExtractor(labeled[0].image.shape[0], config.radius)
    cache = _FeatureCache(extractor)
    records = []

    student = warmup(config, labeled, n_warm, total, num_classes, rngs, cache, records)
    teacher = clone(student)

    rel = None
    cac_calls = 0
    state = None
    tau = None
    if config.mode in ("cac_only", "encore"):
        probs = [softmax(logits_from_features(student, cache(s, False))) for s in labeled]
        rel = calibration.compute_reliability(probs, [s.truth for s in labeled], config.cac_mode)
        cac_calls += 1
        rel = calibration.resolve_undefined(rel)
        if out is not None:
            (out / "reliability.json").write_text(json.dumps(rel.to_json(), indent=2) + "\n")
        if config.mode == "encore":
            state = init_controllers(rel, config.alpha_low, config.alpha_high, config.patience)
        else:
            tau = ThresholdVector(clamp_tau(rel.as_array()), "cac")
    elif config.mode == "fixed":
        tau = ThresholdVector.uniform(config.fixed_threshold, num_classes)

    trace = TraceWriter(out / "controller_trace.jsonl") if out is not None and state else None
    try:
        for step in range(semi_total):
            it = n_warm + step
            lr = poly_lr(config.lr_init, it, total)
            lbatch = labeled_batch(labeled, rngs.labeled, config.batch_labeled, cache)
            if config.mode == "supervised":
                student, rep = supervised_step(student, lbatch, lr, it)
                rec = IterationRecord(it, "supervised", lr, loss_l=rep.loss)
            else:
                ubatch = unlabeled_batch(unlabeled, rngs.unlabeled, config.batch_unlabeled, cache, extractor)
                weight = unsup_weight(config, step, semi_total)
                if config.mode == "encore":
                    student, teacher, state, rec = encore_iteration(
                        student, teacher, state, lbatch, ubatch, config, it, lr, weight, assess
                    )
                    if trace:
                        trace.write(state.snapshot(it, rec.adapted))
                else:
                    student, teacher, rec = fixed_iteration(
                        student, teacher, tau, lbatch, ubatch, config, it, lr, weight
                    )
            if config.eval_every and (step + 1) % config.eval_every == 0:
                rec.eval_dice = evaluate(student, test)[0]
            records.append(rec)
    finally:
        if trace:
            trace.close()

    mean, reports = evaluate(student, test)
    result = RunResult(
        student, records, mean, _per_class(reports, num_classes), rel, state, cac_calls
    )
    if out is not None:
        _write_outputs(out, result, reports, test, dataset)
    return result


def _write_outputs(out: Path, result: RunResult, reports, test, dataset):
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IterationRecord.CSV_HEADER)
        for rec in result.records:
            writer.writerow(rec.csv_row())
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(reports[0].csv_header())
        for s, r in zip(test, reports):
            writer.writerow(r.csv_row(s.id))
        writer.writerow(["mean"] + [
            "" if v is None else repr(v) for v in result.per_class_dice
        ] + [repr(result.eval_dice)])
    save_model(result.student, out / "final_model.json")
    manifest = {
        "spec": dataset.spec.to_dict(),
        "labeled": sorted(dataset.labeled_ids),
        "unlabeled": sorted(s.id for s in dataset.train if s.id not in dataset.labeled_ids),
        "test": [s.id for s in dataset.test],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
