"""Mini-batch SGD with momentum and a step learning-rate schedule."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional, Tuple

import numpy as np

from .autodiff import NonFiniteError
from .backbone import BackboneConfig
from .data import AugmentSpec, Dataset, augment_batch
from .head import LOG_FLOOR, HeadConfig
from .models import AE_MODES, MODES, Model

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, reason: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {reason}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "cssr"
    epochs: int = 50
    batch_size: int = 64
    lr_initial: float = 0.05
    lr_drop_epochs: Tuple[int, ...] = ()
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    head: HeadConfig = field(default_factory=HeadConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    augment: AugmentSpec = field(default_factory=lambda: AugmentSpec(max_ops=0))
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    gram_power: int = 8

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_initial < 0:
            raise ValueError("lr_initial must be >= 0")
        drops = list(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])) or any(e >= self.epochs or e < 1 for e in drops):
            raise ValueError(f"lr_drop_epochs must be strictly increasing and inside [1, {self.epochs})")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.lr_initial * self.lr_drop_factor ** drops

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        head = HeadConfig(**d.pop("head", {}))
        bb = dict(d.pop("backbone", {}))
        if "input_hw" in bb:
            bb["input_hw"] = tuple(bb["input_hw"])
        aug = dict(d.pop("augment", {"max_ops": 0}))
        if "enabled" in aug:
            aug["enabled"] = tuple(aug["enabled"])
        if "ranges" in aug:
            aug["ranges"] = {k: tuple(v) for k, v in aug["ranges"].items()}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        for key in ("lr_drop_epochs", "weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(head=head, backbone=BackboneConfig(**bb), augment=AugmentSpec(**aug), **d)


def gaussian2d_preset(mode: str = "cssr", seed: int = 0, error_norm: str = "mae", **kw) -> TrainConfig:
    head = HeadConfig.for_mode(mode if mode in AE_MODES else "cssr", 0.1, error_norm=error_norm,
                               num_classes=4, latent_dim=2, seed=seed)
    return TrainConfig(mode=mode, epochs=50, batch_size=64, lr_initial=0.05, seed=seed, head=head,
                       backbone=BackboneConfig("mlp2d", 8, seed), **kw)


def image_preset(mode: str = "cssr", num_classes: int = 6, seed: int = 0, **kw) -> TrainConfig:
    head = HeadConfig.for_mode(mode if mode in AE_MODES else "cssr", 0.1, num_classes=num_classes,
                               latent_dim=16, seed=seed)
    params = dict(mode=mode, epochs=10, batch_size=64, lr_initial=0.05, lr_drop_epochs=(8,), seed=seed,
                  head=head, backbone=BackboneConfig("smallconv", 128, seed),
                  augment=AugmentSpec(seed=seed))
    params.update(kw)
    return TrainConfig(**params)


def full_scale_preset(mode: str = "cssr", num_classes: int = 6, seed: int = 0) -> TrainConfig:
    """The full-length schedule (200 epochs, lr 0.4, batch 128, drops at 130/190, k=64)."""
    head = HeadConfig.for_mode(mode if mode in AE_MODES else "cssr", 0.1, num_classes=num_classes,
                               latent_dim=64, seed=seed)
    return TrainConfig(mode=mode, epochs=200, batch_size=128, lr_initial=0.4, lr_drop_epochs=(130, 190),
                       seed=seed, head=head, backbone=BackboneConfig("smallconv", 128, seed),
                       augment=AugmentSpec(seed=seed))


def build_model(config: TrainConfig) -> Model:
    config.validate()
    head = config.head
    if config.mode in AE_MODES and head.mode != config.mode:
        head = HeadConfig.for_mode(config.mode, abs(head.gamma), error_norm=head.error_norm,
                                   strategy=head.strategy, num_classes=head.num_classes,
                                   latent_dim=head.latent_dim, seed=head.seed)
    return Model(config.mode, config.backbone, head)


@dataclass
class TrainLog:
    epoch_loss: List[float] = field(default_factory=list)
    epoch_accuracy: List[float] = field(default_factory=list)
    clamped_probs: int = 0
    seconds: float = 0.0


def train(config: TrainConfig, dataset: Dataset, model: Optional[Model] = None,
          verbose: bool = False) -> Tuple[Model, TrainLog]:
    """Train on ``dataset`` whose labels are already 0..m-1 known-class indices."""
    model = model or build_model(config)
    x, y = dataset.x, np.asarray(dataset.y, dtype=int)
    if y.size and (y.min() < 0 or y.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes}); remap with the open-set split first")
    images = x.ndim == 4
    augment = images and config.augment.max_ops > 0
    history = TrainLog()
    start = time.perf_counter()
    n = len(y)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total, correct = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            xb = x[idx]
            if augment:
                seeds = (epoch * n + idx).astype(np.int64)
                xb = augment_batch(xb, config.augment, seeds)
            try:
                loss, probs_t = model.loss(xb, y[idx])
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, b, str(exc)) from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, f"loss {value}")
            model.graph.backward(loss)
            model.graph.sgd_step(lr, config.momentum)
            total += value * len(idx)
            probs = probs_t.data
            picked = probs[np.arange(len(idx)), y[idx]]
            history.clamped_probs += int(np.sum(picked < LOG_FLOOR))
            correct += int(np.sum(np.argmax(probs, axis=1) == y[idx]))
        history.epoch_loss.append(total / max(n, 1))
        history.epoch_accuracy.append(correct / max(n, 1))
        if verbose:
            log.info("epoch %d lr %.4g loss %.4f acc %.4f", epoch, lr, history.epoch_loss[-1], history.epoch_accuracy[-1])
    if history.clamped_probs:
        log.warning("%d true-class probabilities fell below the log floor", history.clamped_probs)
    history.seconds = time.perf_counter() - start
    return model, history

