"""Backbone + classification head bundles for every supported mode.

``cssr``/``rcssr`` use the class-specific auto-encoder head. ``linear``,
``gcpl`` and ``rpl`` are baselines on globally pooled features: a plain
SoftMax layer, learnable prototypes and learnable reciprocal points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .backbone import Backbone, BackboneConfig, build_backbone
from .head import CSSRHead, HeadConfig, classification_loss_tensor
from .scoring import recon_scores

MODES = ("cssr", "rcssr", "linear", "gcpl", "rpl")
AE_MODES = ("cssr", "rcssr")
BASELINE_REG = 0.1


class Inference(NamedTuple):
    features: np.ndarray  # (N, H, W, D)
    probs: np.ndarray  # (N, m)
    predicted: np.ndarray  # (N,)
    errors: Optional[np.ndarray]  # (N, H, W, m) for AE heads
    base_score: np.ndarray  # (N,) single-score baseline (higher = known)


class LinearHead:
    def __init__(self, num_classes: int, feature_dim: int, graph: ad.Graph, seed: int = 0):
        rng = np.random.default_rng(seed + 1)
        self.graph = graph
        self.num_classes = num_classes
        self.w = graph.param("head.linear.w", ad.uniform_init(rng, (feature_dim, num_classes), feature_dim))
        self.b = graph.param("head.linear.b", np.zeros(num_classes))

    def forward(self, Z: ad.Tensor) -> ad.Tensor:
        return ad.softmax(ad.add(ad.matmul(ad.global_avg_pool(Z), self.w), self.b))

    def loss(self, Z: ad.Tensor, labels):
        probs = self.forward(Z)
        return classification_loss_tensor(probs, labels, self.graph), probs

    def score(self, probs: np.ndarray, dists=None) -> np.ndarray:
        return probs.max(axis=-1)


class PointHead:
    """Learnable prototype (``gcpl``) or reciprocal (``rpl``) points, one per class."""

    def __init__(self, mode: str, num_classes: int, feature_dim: int, graph: ad.Graph, seed: int = 0):
        rng = np.random.default_rng(seed + 1)
        self.mode = mode
        self.graph = graph
        self.num_classes = num_classes
        self.points = graph.param("head.points", 0.1 * rng.standard_normal((num_classes, feature_dim)))
        if mode == "rpl":
            self.margins = graph.param("head.margins", np.ones(num_classes))

    def distances(self, Z: ad.Tensor) -> ad.Tensor:
        z = ad.global_avg_pool(Z)
        n, d = z.shape
        diff = ad.subtract(ad.reshape(z, (n, 1, d)), self.points)
        return ad.sum_(ad.multiply(diff, diff), axis=-1)

    def forward_with_dist(self, Z):
        dist = self.distances(Z)
        logits = ad.scale(dist, -1.0 if self.mode == "gcpl" else 1.0)
        return ad.softmax(logits), dist

    def forward(self, Z):
        return self.forward_with_dist(Z)[0]

    def loss(self, Z: ad.Tensor, labels):
        probs, dist = self.forward_with_dist(Z)
        ce = classification_loss_tensor(probs, labels, self.graph)
        onehot = np.zeros(dist.shape)
        onehot[np.arange(len(labels)), labels] = 1.0
        own = ad.sum_(ad.multiply(dist, self.graph.const(onehot)), axis=1)
        if self.mode == "gcpl":
            reg = ad.mean(own)
        else:
            margin = ad.sum_(ad.multiply(self.graph.const(onehot), ad.reshape(self.margins, (1, self.num_classes))), axis=1)
            gap = ad.subtract(own, margin)
            reg = ad.mean(ad.multiply(gap, gap))
        return ad.add(ce, ad.scale(reg, BASELINE_REG)), probs

    def score(self, probs, dists) -> np.ndarray:
        if self.mode == "gcpl":
            return -dists.min(axis=-1)
        return dists.max(axis=-1)


class Model:
    def __init__(self, mode: str, backbone_config: BackboneConfig, head_config: HeadConfig,
                 dtype=np.float64):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.graph = ad.Graph(dtype)
        self.backbone: Backbone = build_backbone(backbone_config, self.graph)
        d = backbone_config.feature_dim
        m = head_config.num_classes
        if mode in AE_MODES:
            if head_config.mode != mode:
                raise ValueError(f"head mode {head_config.mode!r} does not match model mode {mode!r}")
            self.head = CSSRHead(head_config, d, self.graph)
        elif mode == "linear":
            self.head = LinearHead(m, d, self.graph, head_config.seed)
        else:
            self.head = PointHead(mode, m, d, self.graph, head_config.seed)
        self.head_config = head_config

    @property
    def num_classes(self) -> int:
        return self.head_config.num_classes

    def loss(self, x: np.ndarray, labels: np.ndarray):
        """(scalar loss tensor, (N, m) probability tensor) for one batch."""
        Z = self.backbone(self.graph.const(x))
        return self.head.loss(Z, labels)

    def infer(self, x: np.ndarray, batch_size: int = 256) -> Inference:
        x = np.asarray(x, dtype=self.graph.dtype)
        self.backbone.check_input(x)
        feats, probs, errors, dists = [], [], [], []
        for start in range(0, len(x), batch_size):
            Z = self.backbone(self.graph.const(x[start:start + batch_size]))
            feats.append(Z.data)
            if self.mode in AE_MODES:
                out = self.head.evaluate(Z.data)
                errors.append(out.errors)
                probs.append(out.probs)
            elif self.mode == "linear":
                probs.append(self.head.forward(Z).data)
            else:
                p, dist = self.head.forward_with_dist(Z)
                probs.append(p.data)
                dists.append(dist.data)
        features = np.concatenate(feats)
        probs = np.concatenate(probs)
        predicted = np.argmax(probs, axis=-1)
        errs = np.concatenate(errors) if errors else None
        if self.mode in AE_MODES:
            err_c = np.take_along_axis(errs, predicted[:, None, None, None], axis=-1)[..., 0]
            base = recon_scores(err_c, features, self.mode)
        else:
            base = self.head.score(probs, np.concatenate(dists) if dists else None)
        return Inference(features, probs, predicted, errs, base)
