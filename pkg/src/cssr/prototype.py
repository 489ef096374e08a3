"""Prototype and reciprocal-point classifiers, plus empirical checks of how
MAE and MSE distances shape the class probability around a prototype."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .head import softmax_from_distances

NORMS = ("mae", "mse")


@dataclass
class PrototypeModel:
    points: List[np.ndarray]  # per class, (n_i, D)
    norm: str = "mse"
    margins: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = [np.atleast_2d(np.asarray(p, dtype=float)) for p in self.points]
        for i, p in enumerate(self.points):
            if p.size == 0:
                raise ValueError(f"class {i} has an empty point set")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")

    @classmethod
    def single(cls, prototypes, norm: str = "mse", margins=None) -> "PrototypeModel":
        protos = np.asarray(prototypes, dtype=float)
        if protos.ndim == 1:
            protos = protos[:, None]
        return cls([p[None, :] for p in protos], norm=norm, margins=margins)

    @property
    def num_classes(self) -> int:
        return len(self.points)

    def _check_label(self, c: int) -> None:
        if not 0 <= c < self.num_classes:
            raise ValueError(f"label {c} out of range for {self.num_classes} classes")


def point_distance(z: np.ndarray, points: np.ndarray, norm: str) -> np.ndarray:
    diff = np.atleast_1d(np.asarray(z, dtype=float)) - points
    if norm == "mae":
        return np.abs(diff).sum(axis=-1)
    return (diff * diff).sum(axis=-1)


def prototype_prob(z, model: PrototypeModel, gamma: float = 1.0) -> np.ndarray:
    d = np.array([point_distance(z, u, model.norm).min() for u in model.points])
    return softmax_from_distances(d, gamma)


def reciprocal_prob(z, model: PrototypeModel, gamma: float = 1.0) -> np.ndarray:
    d = np.array([point_distance(z, u, "mse").sum() for u in model.points])
    return softmax_from_distances(d, -gamma)


def prototype_loss(z, c: int, model: PrototypeModel) -> float:
    model._check_label(c)
    return float(point_distance(z, model.points[c], "mse").min())


def reciprocal_reg(z, c: int, model: PrototypeModel) -> float:
    model._check_label(c)
    if model.margins is None:
        raise ValueError("reciprocal regularizer needs per-class margins")
    d = point_distance(z, model.points[c], "mse")
    return float(((d - model.margins[c]) ** 2).sum())


@dataclass
class MonotonicityReport:
    trials: int
    offsets_per_trial: int
    gamma: float
    checks: int = 0
    violations: List[dict] = field(default_factory=list)
    max_gain: float = -np.inf

    @property
    def passed(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} MAE monotonicity: {self.checks} checks over {self.trials} trials, "
                f"{len(self.violations)} violations, gamma={self.gamma}, "
                f"max p(u_c+eps)-p(u_c) = {self.max_gain:.3e}")


def _distinct_prototypes(rng, m, d):
    while True:
        u = rng.normal(scale=rng.uniform(0.2, 3.0), size=(m, d))
        if len({tuple(r) for r in u}) == m:
            return u


def check_mae_monotonicity(trials: int = 200, seed: int = 0, offsets: int = 50,
                           gamma: float = 1.0, tol: float = 1e-9) -> MonotonicityReport:
    """Sample prototype sets and offsets; the MAE probability at the prototype
    must never be beaten by the probability at prototype + offset."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = MonotonicityReport(trials, offsets, gamma)
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        m = int(rng.integers(2, 9))
        d = int(rng.integers(1, 17))
        u = _distinct_prototypes(rng, m, d)
        model = PrototypeModel.single(u, norm="mae")
        c = int(rng.integers(m))
        base = prototype_prob(u[c], model, gamma)[c]
        for _ in range(offsets):
            eps = rng.normal(size=d) * rng.choice([0.01, 0.1, 1.0, 5.0])
            p = prototype_prob(u[c] + eps, model, gamma)[c]
            report.checks += 1
            report.max_gain = max(report.max_gain, p - base)
            if p > base + tol:
                report.violations.append({"trial": t, "m": m, "D": d, "prototypes": u.tolist(),
                                          "c": c, "eps": eps.tolist(), "p_proto": base, "p_offset": p})
    return report


@dataclass
class Witness:
    prototypes: np.ndarray
    c: int
    eps: np.ndarray
    p_at_prototype: float
    p_at_offset: float
    gamma: float = 1.0

    def summary(self) -> str:
        return (f"MSE witness: prototypes={self.prototypes.tolist()} c={self.c} eps={self.eps.tolist()} "
                f"p(u_c)={self.p_at_prototype:.4f} < p(u_c+eps)={self.p_at_offset:.4f} (gamma={self.gamma})")


CANONICAL_PROTOTYPES = np.array([[0.0], [1.0]])
CANONICAL_EPS = np.array([-0.5])


def _witness_gain(u, c, eps, gamma):
    model = PrototypeModel.single(u, norm="mse")
    return prototype_prob(u[c], model, gamma)[c], prototype_prob(u[c] + eps, model, gamma)[c]


def find_mse_counterexample(seed: int = 0, num_classes: int = 2, budget: int = 100,
                            gamma: float = 1.0) -> Witness:
    """Find prototypes U, class c and offset eps with p(c|u_c+eps) > p(c|u_c) under MSE."""
    if num_classes < 2:
        raise ValueError("a counterexample needs at least two classes")
    if num_classes == 2:
        p0, p1 = _witness_gain(CANONICAL_PROTOTYPES, 0, CANONICAL_EPS, gamma)
        if p1 > p0:
            return Witness(CANONICAL_PROTOTYPES.copy(), 0, CANONICAL_EPS.copy(), p0, p1, gamma)
    rng = np.random.default_rng(seed)
    for _ in range(budget):
        d = int(rng.integers(1, 3))
        u = _distinct_prototypes(rng, num_classes, d)
        c = int(rng.integers(num_classes))
        # step away from the nearest competitor
        others = np.delete(u, c, axis=0)
        away = u[c] - others[np.argmin(((others - u[c]) ** 2).sum(1))]
        eps = 0.5 * away * rng.uniform(0.1, 1.0)
        p0, p1 = _witness_gain(u, c, eps, gamma)
        if p1 > p0:
            return Witness(u, c, eps, p0, p1, gamma)
    raise RuntimeError(f"no MSE counterexample found within {budget} random configurations")
