"""Finite-difference checks for every primitive and for the end-to-end losses."""

from __future__ import annotations

from typing import Callable, Dict, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, GradCheckResult, Graph, grad_check

PRIMITIVE_TOLERANCE = 1e-6
END_TO_END_TOLERANCE = 1e-4
# Primitive inputs sit away from kinks, so a wide 4-point stencil is safe there and
# keeps both truncation and round-off near 1e-10. Whole networks can cross ReLU or
# max-pool switch points, so they keep a narrow 2-point stencil.
PRIMITIVE_STEP, PRIMITIVE_POINTS = 1e-3, 4
END_TO_END_STEP = 1e-5


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _distinct(rng, shape):
    """Values with gaps of 0.1 so no finite-difference step changes a max."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 - 0.05 * n).reshape(shape)


def _cases(rng) -> Dict[str, Tuple[Dict[str, np.ndarray], Callable]]:
    """name -> (inputs, op building a tensor from input tensors)."""
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    return {
        "matmul": ({"a": r(3, 4), "b": r(4, 2)}, lambda t: ad.matmul(t["a"], t["b"])),
        "matmul-batched": ({"a": r(2, 3, 4), "b": r(2, 4, 5)}, lambda t: ad.matmul(t["a"], t["b"])),
        "conv2d": ({"x": r(2, 5, 5, 2), "w": r(3, 3, 2, 3)}, lambda t: ad.conv2d(t["x"], t["w"])),
        "conv2d-stride2": ({"x": r(1, 6, 6, 2), "w": r(3, 3, 2, 2)}, lambda t: ad.conv2d(t["x"], t["w"], stride=2)),
        "conv2d-1x1": ({"x": r(2, 3, 3, 4), "w": r(1, 1, 4, 2)}, lambda t: ad.conv2d(t["x"], t["w"])),
        "add": ({"a": r(3, 4), "b": r(4)}, lambda t: ad.add(t["a"], t["b"])),
        "subtract": ({"a": r(2, 3, 4), "b": r(3, 1)}, lambda t: ad.subtract(t["a"], t["b"])),
        "scale": ({"a": r(3, 3)}, lambda t: ad.scale(t["a"], -0.7)),
        "tanh": ({"a": r(4, 3)}, lambda t: ad.tanh(t["a"])),
        "relu": ({"a": _away_from_zero(rng, (4, 3))}, lambda t: ad.relu(t["a"])),
        "abs": ({"a": _away_from_zero(rng, (4, 3))}, lambda t: ad.abs_(t["a"])),
        "sum-reduce": ({"a": r(2, 3, 4)}, lambda t: ad.sum_(t["a"], axis=1)),
        "mean-reduce": ({"a": r(2, 3, 4)}, lambda t: ad.mean(t["a"], axis=(1, 2))),
        "max-pool2x2": ({"a": _distinct(rng, (2, 5, 4, 2))}, lambda t: ad.max_pool2x2(t["a"])),
        "global-average-pool": ({"a": r(2, 3, 3, 4)}, lambda t: ad.global_avg_pool(t["a"])),
        "softmax-over-channel": ({"a": r(2, 2, 2, 5)}, lambda t: ad.softmax(t["a"])),
        "log": ({"a": rng.uniform(0.5, 2.0, size=(3, 4))}, lambda t: ad.log(t["a"], floor=1e-12)),
        "elementwise-multiply": ({"a": r(3, 4), "b": r(3, 4)}, lambda t: ad.multiply(t["a"], t["b"])),
        "reshape": ({"a": r(2, 6)}, lambda t: ad.reshape(t["a"], (3, 4))),
        "transpose": ({"a": r(2, 3, 4)}, lambda t: ad.transpose(t["a"], (2, 0, 1))),
    }


def check_primitives(seed: int = 0, tolerance: float = PRIMITIVE_TOLERANCE) -> GradCheckReport:
    """Each primitive is reduced to a scalar by a fixed random projection."""
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, (inputs, op) in _cases(rng).items():
        g = Graph()
        tensors = {k: g.param(k, v) for k, v in inputs.items()}
        out_shape = op(tensors).shape
        proj = g.const(rng.normal(size=out_shape))
        sub = grad_check(g, lambda: ad.sum_(ad.multiply(op(tensors), proj)), tolerance, PRIMITIVE_STEP,
                         points=PRIMITIVE_POINTS)
        worst = max(r.max_rel_error for r in sub.results)
        detail = ", ".join(r.detail for r in sub.results if r.detail)
        report.results.append(GradCheckResult(name, worst, sub.passed, detail))
    return report


def check_end_to_end(mode: str = "cssr", preset: str = "mlp2d", seed: int = 0,
                     tolerance: float = END_TO_END_TOLERANCE, error_norm: str = "mae",
                     strategy: str = "sm-ap", max_entries=None) -> GradCheckReport:
    """Check the full classification loss of a small model on random inputs."""
    from .backbone import BackboneConfig
    from .head import HeadConfig
    from .models import AE_MODES, Model

    rng = np.random.default_rng(seed)
    if preset == "mlp2d":
        bb = BackboneConfig("mlp2d", 4, seed, hidden=6)
        x = rng.normal(size=(5, 2)) * 2
    else:
        bb = BackboneConfig("smallconv", 128, seed, input_hw=(8, 8))
        x = rng.uniform(size=(2, 8, 8, 1))
    head = HeadConfig.for_mode(mode if mode in AE_MODES else "cssr", 0.5, error_norm=error_norm,
                               strategy=strategy, num_classes=3, latent_dim=2, seed=seed)
    model = Model(mode, bb, head)
    labels = np.arange(len(x)) % 3
    return grad_check(model.graph, lambda: model.loss(x, labels)[0], tolerance, END_TO_END_STEP,
                      max_entries=max_entries, rng=rng)
