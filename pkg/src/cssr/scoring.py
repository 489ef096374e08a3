"""Unknown-detection scores, their calibration and thresholded inference.

Three raw scores are computed for a feature map Z and its predicted class c
(higher always means "more likely known"):

* ``recon``: reconstruction-error score, ``-d/||z||_1^2`` per pixel for the
  prototype head and ``d`` for the reciprocal head, averaged over pixels;
* ``first``: mean over pixels of ``|z| . mu_tilde_c``;
* ``gram``: ``Sum(G^c * G(Z))`` with an order-p Gram matrix.

Each is standardized with a mean/std measured on augmented training data
and combined linearly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

SCORE_IDS = ("recon", "first", "gram")
ZERO_NORM_SCORE = -1e9


@dataclass
class ScoreStats:
    mu: np.ndarray  # (m, D)
    mu_tilde: np.ndarray  # (m, D)
    gram_templates: np.ndarray  # (m, D, D)
    gram_power: int = 8
    mode: str = "cssr"
    means: Dict[str, float] = field(default_factory=dict)
    stds: Dict[str, float] = field(default_factory=dict)
    weights: tuple = (1.0, 1.0, 1.0)
    threshold: Optional[float] = None
    empty_classes: tuple = ()

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]

    @property
    def calibrated(self) -> bool:
        return all(k in self.means and k in self.stds for k in SCORE_IDS)


# --- reconstruction score -----------------------------------------------------

def recon_scores(errors_c: np.ndarray, Z: np.ndarray, mode: str) -> np.ndarray:
    """Batched pixel-averaged reconstruction score.

    errors_c: (N, H, W) reconstruction error of each sample's predicted class.
    Z: (N, H, W, D) raw feature maps.
    """
    errors_c = np.asarray(errors_c, dtype=float)
    if mode == "rcssr":
        return errors_c.mean(axis=(1, 2))
    l1 = np.abs(Z).sum(axis=-1)
    zero = l1 == 0
    if np.any(zero):
        log.warning("%d pixels with zero feature norm scored as %g", int(zero.sum()), ZERO_NORM_SCORE)
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = np.where(zero, ZERO_NORM_SCORE, -errors_c / np.where(zero, 1.0, l1) ** 2)
    return pix.mean(axis=(1, 2))


def score_recon(Z: np.ndarray, c: int, head) -> float:
    Z = np.asarray(Z, dtype=float)
    errors = head.evaluate(Z[None]).errors[0, :, :, c]
    return float(recon_scores(errors[None], Z[None], head.config.mode)[0])


# --- feature statistics -------------------------------------------------------

def gram_matrix(Z: np.ndarray, p: int = 1) -> np.ndarray:
    """Order-p Gram matrix of an (H, W, D) map (or batch (N, H, W, D))."""
    if p < 1 or int(p) != p:
        raise ValueError(f"gram power must be a positive integer, got {p}")
    Z = np.asarray(Z, dtype=float)
    batched = Z.ndim == 4
    F = np.abs(Z).reshape((Z.shape[0] if batched else 1), -1, Z.shape[-1])  # (N, P, D)
    if p == 1:
        G = np.einsum("npi,npj->nij", F, F)
    else:
        Fp = F ** p
        G = np.einsum("npi,npj->nij", Fp, Fp) ** (1.0 / p)
    return G if batched else G[0]


def collect_class_stats(features: np.ndarray, predicted: np.ndarray, num_classes: int,
                        gram_power: int = 8, mode: str = "cssr") -> ScoreStats:
    """First- and second-order activation templates grouped by predicted class."""
    A = np.abs(np.asarray(features, dtype=float))
    predicted = np.asarray(predicted, dtype=int)
    n, h, w, d = A.shape
    mu = np.zeros((num_classes, d))
    grams = np.zeros((num_classes, d, d))
    empty = []
    for c in range(num_classes):
        sel = predicted == c
        if not np.any(sel):
            empty.append(c)
            continue
        mu[c] = A[sel].mean(axis=(0, 1, 2))
        grams[c] = gram_matrix(A[sel], gram_power).mean(axis=0)
    if empty:
        log.warning("no training samples predicted into classes %s; using uniform mu_tilde and zero Gram template", empty)
    total = mu.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu_tilde = np.where(total > 0, mu / np.where(total > 0, total, 1.0), 0.0)
    for c in empty:
        mu_tilde[c] = 1.0 / num_classes
    return ScoreStats(mu=mu, mu_tilde=mu_tilde, gram_templates=grams, gram_power=gram_power,
                      mode=mode, empty_classes=tuple(empty))


def _check_class(stats: ScoreStats, c) -> None:
    c = np.asarray(c)
    if np.any(c < 0) or np.any(c >= stats.num_classes):
        raise KeyError(f"no statistics for class {c}")


def first_order_scores(Z: np.ndarray, classes: np.ndarray, stats: ScoreStats) -> np.ndarray:
    _check_class(stats, classes)
    A = np.abs(np.asarray(Z, dtype=float))
    weights = stats.mu_tilde[np.asarray(classes, dtype=int)]  # (N, D)
    return np.einsum("nhwd,nd->n", A, weights) / (A.shape[1] * A.shape[2])


def score_first_order(Z: np.ndarray, c: int, stats: ScoreStats) -> float:
    return float(first_order_scores(np.asarray(Z)[None], np.array([c]), stats)[0])


def gram_scores(Z: np.ndarray, classes: np.ndarray, stats: ScoreStats) -> np.ndarray:
    _check_class(stats, classes)
    Z = np.asarray(Z, dtype=float)
    if Z.shape[-1] != stats.gram_templates.shape[-1]:
        raise ValueError(f"feature dimension {Z.shape[-1]} does not match Gram template {stats.gram_templates.shape[1:]}")
    G = gram_matrix(Z, stats.gram_power)
    T = stats.gram_templates[np.asarray(classes, dtype=int)]
    return np.einsum("nij,nij->n", T, G)


def score_gram(Z: np.ndarray, c: int, stats: ScoreStats) -> float:
    return float(gram_scores(np.asarray(Z)[None], np.array([c]), stats)[0])


def raw_scores(features: np.ndarray, errors: np.ndarray, predicted: np.ndarray,
               stats: ScoreStats) -> Dict[str, np.ndarray]:
    """All three raw scores for a batch; ``errors`` is (N, H, W, m)."""
    predicted = np.asarray(predicted, dtype=int)
    err_c = np.take_along_axis(errors, predicted[:, None, None, None], axis=-1)[..., 0]
    return {
        "recon": recon_scores(err_c, features, stats.mode),
        "first": first_order_scores(features, predicted, stats),
        "gram": gram_scores(features, predicted, stats),
    }


# --- calibration and fusion ---------------------------------------------------

def calibrate_scores(scores: Dict[str, np.ndarray], stats: ScoreStats) -> ScoreStats:
    """Attach per-score mean and unbiased std measured on augmented training data."""
    means, stds = {}, {}
    for key in SCORE_IDS:
        s = np.asarray(scores[key], dtype=float)
        if s.size < 2:
            raise ValueError(f"score {key!r}: need at least two samples to calibrate")
        std = float(s.std(ddof=1))
        if not std > 0:
            raise ValueError(f"score {key!r} is degenerate (standard deviation 0)")
        means[key], stds[key] = float(s.mean()), std
    return replace(stats, means=means, stds=stds)


def normalize(scores: Dict[str, np.ndarray], stats: ScoreStats) -> Dict[str, np.ndarray]:
    if not stats.calibrated:
        raise ValueError("score statistics are not calibrated")
    return {k: (np.asarray(scores[k], dtype=float) - stats.means[k]) / stats.stds[k] for k in SCORE_IDS}


def fuse(scores: Dict[str, np.ndarray], stats: ScoreStats) -> np.ndarray:
    normed = normalize(scores, stats)
    w1, w2, w3 = stats.weights
    return w1 * normed["recon"] + w2 * normed["first"] + w3 * normed["gram"]


def fused_score(Z: np.ndarray, c: int, head, stats: ScoreStats) -> float:
    Z = np.asarray(Z, dtype=float)[None]
    errors = head.evaluate(Z).errors
    return float(fuse(raw_scores(Z, errors, np.array([c]), stats), stats)[0])


def fit_threshold(known_scores: Sequence[float], tpr_target: float = 0.95) -> float:
    """Order statistic floor((1 - tpr) * n) of the ascending known scores."""
    s = np.sort(np.asarray(known_scores, dtype=float))
    if s.size == 0:
        raise ValueError("cannot fit a threshold on an empty score list")
    if not 0 < tpr_target <= 1:
        raise ValueError(f"tpr_target must be in (0, 1], got {tpr_target}")
    # small epsilon guards (1 - 0.95) * 100 = 4.999...
    k = int(np.floor((1.0 - tpr_target) * s.size + 1e-9))
    return float(s[min(k, s.size - 1)])


def decide(fused: np.ndarray, predicted: np.ndarray, threshold: float, num_classes: int) -> np.ndarray:
    """Predicted class where the fused score reaches the threshold, else ``num_classes`` (unknown)."""
    return np.where(np.asarray(fused) >= threshold, np.asarray(predicted, dtype=int), num_classes)


def open_set_infer(Z: np.ndarray, head, stats: ScoreStats) -> int:
    if stats.threshold is None:
        raise ValueError("score statistics carry no threshold")
    Z = np.asarray(Z, dtype=float)[None]
    out = head.evaluate(Z)
    c = np.argmax(out.probs, axis=-1)
    s = fuse(raw_scores(Z, out.errors, c, stats), stats)
    return int(decide(s, c, stats.threshold, head.num_classes)[0])
