"""Three-step unknown inference and multi-trial experiments.

1. Build activation templates from non-augmented training features,
   grouped by the model's own predicted class.
2. Measure per-score mean/std on augmented training data, then fit the
   acceptance threshold at 95% TPR on non-augmented training fused scores.
3. Score test samples and emit accept/reject decisions.

Baseline heads skip the templates and threshold their single score.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import AugmentSpec, Dataset, OpenSetSplit, augment_batch
from .metrics import EvalReport, auroc, evaluate
from .models import AE_MODES, Inference, Model
from .scoring import (SCORE_IDS, ScoreStats, calibrate_scores, collect_class_stats, decide, fit_threshold,
                      fuse, normalize, raw_scores)

log = logging.getLogger(__name__)

# draw seeds for calibration augmentation live far from the training ones
CALIBRATION_SEED_OFFSET = 1 << 40


@dataclass
class PipelineResult:
    stats: Optional[ScoreStats]
    threshold: float
    train_scores: np.ndarray  # (N_train,) final score on non-augmented training data
    scores: np.ndarray  # (N_test,) final score, higher = known
    predicted: np.ndarray  # (N_test,) closed-set prediction
    decisions: np.ndarray  # (N_test,) predicted class or m for unknown
    components: Dict[str, np.ndarray] = field(default_factory=dict)  # calibrated per-score values
    inference: Optional[Inference] = None


def _augmented(x: np.ndarray, spec: Optional[AugmentSpec]) -> np.ndarray:
    if spec is None or x.ndim != 4 or spec.max_ops == 0:
        return x
    seeds = CALIBRATION_SEED_OFFSET + np.arange(len(x), dtype=np.int64)
    return augment_batch(x, spec, seeds)


def build_stats(model: Model, train_x: np.ndarray, augment: Optional[AugmentSpec] = None,
                weights=(1.0, 1.0, 1.0), gram_power: int = 8, tpr: float = 0.95,
                batch_size: int = 256) -> ScoreStats:
    """Steps 1 and 2: templates, calibration and the acceptance threshold."""
    if model.mode not in AE_MODES:
        raise ValueError(f"score statistics only exist for auto-encoder heads, not {model.mode!r}")
    m = model.num_classes
    plain = model.infer(train_x, batch_size)
    stats = collect_class_stats(plain.features, plain.predicted, m, gram_power, model.mode)
    stats = replace(stats, weights=tuple(float(w) for w in weights))
    aug_x = _augmented(train_x, augment)
    aug = plain if aug_x is train_x else model.infer(aug_x, batch_size)
    stats = calibrate_scores(raw_scores(aug.features, aug.errors, aug.predicted, stats), stats)
    fused = fuse(raw_scores(plain.features, plain.errors, plain.predicted, stats), stats)
    return replace(stats, threshold=fit_threshold(fused, tpr))


def score_samples(model: Model, x: np.ndarray, stats: Optional[ScoreStats], batch_size: int = 256):
    """(final scores, predicted classes, calibrated components, raw inference)."""
    inf = model.infer(x, batch_size)
    if model.mode not in AE_MODES:
        return inf.base_score, inf.predicted, {}, inf
    raw = raw_scores(inf.features, inf.errors, inf.predicted, stats)
    return fuse(raw, stats), inf.predicted, normalize(raw, stats), inf


def run_unknown_inference_pipeline(model: Model, train: Dataset, test: Dataset,
                                   augment: Optional[AugmentSpec] = None, weights=(1.0, 1.0, 1.0),
                                   gram_power: int = 8, tpr: float = 0.95,
                                   stats: Optional[ScoreStats] = None,
                                   batch_size: int = 256) -> PipelineResult:
    """Run all three steps; pass ``stats`` to reuse previously fitted statistics."""
    m = model.num_classes
    if model.mode in AE_MODES:
        if stats is None:
            stats = build_stats(model, train.x, augment, weights, gram_power, tpr, batch_size)
        train_scores = score_samples(model, train.x, stats, batch_size)[0]
        threshold = stats.threshold
    else:
        train_scores = model.infer(train.x, batch_size).base_score
        threshold = fit_threshold(train_scores, tpr)
    scores, predicted, components, inf = score_samples(model, test.x, stats, batch_size)
    return PipelineResult(stats=stats, threshold=threshold, train_scores=train_scores, scores=scores,
                          predicted=predicted, decisions=decide(scores, predicted, threshold, m),
                          components=components, inference=inf)


def evaluate_result(result: PipelineResult, test_labels: np.ndarray, num_classes: int,
                    n_test_classes: Optional[int] = None) -> EvalReport:
    """Metric block for labels already remapped so that unknowns equal ``num_classes``."""
    y = np.asarray(test_labels, dtype=int)
    known = y < num_classes
    return evaluate(result.scores[known], y[known], result.predicted[known], result.scores[~known],
                    result.predicted[~known], result.threshold, num_classes, n_test_classes)


def score_breakdown(result: PipelineResult, test_labels: np.ndarray, num_classes: int) -> Dict[str, float]:
    """AUROC of every calibrated component and of the final score."""
    y = np.asarray(test_labels, dtype=int)
    known = y < num_classes
    if known.all() or not known.any():
        return {}
    out = {key: auroc(result.components[key][known], result.components[key][~known])
           for key in SCORE_IDS if key in result.components}
    out["all"] = auroc(result.scores[known], result.scores[~known])
    return out


# --- experiments ----------------------------------------------------------------

@dataclass
class TrialResult:
    split: OpenSetSplit
    report: EvalReport
    breakdown: Dict[str, float]
    train_seconds: float


@dataclass
class ExperimentReport:
    trials: List[TrialResult]
    mean: Dict[str, float]
    std: Dict[str, float]

    def to_dict(self) -> dict:
        return {
            "trials": [{"known": list(t.split.known_classes), "unknown": list(t.split.unknown_classes),
                        "trial_seed": t.split.trial_seed, "report": t.report.to_dict(),
                        "auroc_by_score": t.breakdown, "train_seconds": t.train_seconds} for t in self.trials],
            "mean": self.mean,
            "std": self.std,
        }

    def summary(self) -> str:
        rows = [f"{len(self.trials)} trial(s)"]
        for key in self.mean:
            rows.append(f"{key:16s} {self.mean[key]:.4f} +- {self.std[key]:.4f}")
        return "\n".join(rows)


def aggregate(reports: Sequence[EvalReport]) -> tuple:
    """Mean and sample std of every metric present in all reports."""
    dicts = [r.to_dict() for r in reports]
    mean, std = {}, {}
    for key in dicts[0] if dicts else []:
        values = [d[key] for d in dicts]
        if any(v is None for v in values):
            continue
        mean[key] = float(np.mean(values))
        std[key] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std


def run_experiment(config, train_data: Dataset, test_data: Dataset, splits: Sequence[OpenSetSplit],
                   verbose: bool = False) -> ExperimentReport:
    """Train and evaluate one model per split; ``config`` is a TrainConfig."""
    from .train import build_model, train  # local: train imports this module's siblings

    trials = []
    for split in splits:
        m = split.num_known
        head = replace(config.head, num_classes=m)
        cfg = replace(config, head=head)
        known_train = train_data.subset(split.known_mask(train_data.y))
        known_train = Dataset(known_train.x, split.remap(known_train.y), m)
        model, history = train(cfg, known_train, build_model(cfg), verbose=verbose)
        test_y = split.remap(test_data.y)
        result = run_unknown_inference_pipeline(model, known_train, Dataset(test_data.x, test_y, m + 1),
                                                cfg.augment, cfg.weights, cfg.gram_power)
        report = evaluate_result(result, test_y, m, n_test_classes=test_data.class_count)
        trials.append(TrialResult(split, report, score_breakdown(result, test_y, m), history.seconds))
        log.info("trial %d: %s", split.trial_seed, report.to_dict())
    mean, std = aggregate([t.report for t in trials])
    return ExperimentReport(trials, mean, std)
