"""Class-specific auto-encoder head.

Each known class owns a bias-free linear encoder, a tanh bottleneck and a
linear decoder. Per-pixel reconstruction errors, scaled by ``-gamma``, are
the class logits. All m auto-encoders run together as one pixelwise
(1x1-convolution style) operation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple

import numpy as np

from . import autodiff as ad

MODES = ("cssr", "rcssr")
NORMS = ("mae", "mse")
STRATEGIES = ("sm-ap", "ap-sm")
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassAE:
    encoder: np.ndarray  # (k, D)
    decoder: np.ndarray  # (D, k)

    @property
    def latent_dim(self) -> int:
        return self.encoder.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.encoder.shape[1]


def reconstruct(z: np.ndarray, ae: ClassAE) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != ae.feature_dim:
        raise ad.ShapeError(f"reconstruct: feature length {z.shape[-1]} does not match auto-encoder dimension {ae.feature_dim}")
    if not np.all(np.isfinite(z)):
        raise ad.NonFiniteError("reconstruct: non-finite feature vector")
    return np.tanh(z @ ae.encoder.T) @ ae.decoder.T


def recon_error(z: np.ndarray, ae: ClassAE, norm: str = "mae") -> np.ndarray:
    """L1 (``mae``) or squared-L2 (``mse``) distance between z and its reconstruction."""
    if norm not in NORMS:
        raise ValueError(f"unknown error norm {norm!r}")
    r = np.asarray(z, dtype=float) - reconstruct(z, ae)
    if norm == "mae":
        return np.abs(r).sum(axis=-1)
    return (r * r).sum(axis=-1)


@dataclass(frozen=True)
class HeadConfig:
    mode: str = "cssr"
    gamma: float = 0.1
    error_norm: str = "mae"
    strategy: str = "sm-ap"
    num_classes: int = 4
    latent_dim: int = 2
    seed: int = 0

    @classmethod
    def for_mode(cls, mode: str, gamma_magnitude: float = 0.1, **kw) -> "HeadConfig":
        sign = 1.0 if mode == "cssr" else -1.0
        return cls(mode=mode, gamma=sign * abs(gamma_magnitude), **kw)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown head mode {self.mode!r}")
        if self.gamma == 0:
            raise ValueError("gamma must be nonzero")
        if (self.gamma > 0) != (self.mode == "cssr"):
            raise ValueError(f"gamma sign {self.gamma:+g} does not match mode {self.mode!r}")
        if self.error_norm not in NORMS:
            raise ValueError(f"unknown error norm {self.error_norm!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")


class HeadOutput(NamedTuple):
    errors: np.ndarray  # (N, H, W, m) reconstruction errors
    pixel_probs: np.ndarray  # (N, H, W, m)
    probs: np.ndarray  # (N, m)


def softmax_from_distances(distances: np.ndarray, gamma: float) -> np.ndarray:
    """SoftMax of ``-gamma * d`` over the last axis."""
    logits = -gamma * np.asarray(distances, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise ad.NonFiniteError("non-finite distance values")
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


class CSSRHead:
    def __init__(self, config: HeadConfig, feature_dim: int, graph: ad.Graph):
        config.validate()
        self.config = config
        self.feature_dim = feature_dim
        self.graph = graph
        m, k, d = config.num_classes, config.latent_dim, feature_dim
        rng = np.random.default_rng(config.seed + 1)
        self.encoder = graph.param("head.encoder", ad.uniform_init(rng, (m, k, d), d))
        self.decoder = graph.param("head.decoder", ad.uniform_init(rng, (m, d, k), k))

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def class_aes(self) -> List[ClassAE]:
        return [ClassAE(self.encoder.data[i].copy(), self.decoder.data[i].copy()) for i in range(self.num_classes)]

    # -- differentiable path -------------------------------------------------

    def errors(self, Z: ad.Tensor) -> ad.Tensor:
        """Per-pixel reconstruction errors for every class: (N, H, W, D) -> (N, H, W, m)."""
        if Z.data.ndim != 4 or Z.shape[-1] != self.feature_dim:
            raise ad.ShapeError(f"head expects (N, H, W, {self.feature_dim}) feature maps, got {Z.shape}")
        n, h, w, d = Z.shape
        m, k = self.num_classes, self.config.latent_dim
        pix = ad.reshape(Z, (n * h * w, d))
        enc = ad.reshape(ad.transpose(self.encoder, (2, 0, 1)), (d, m * k))
        latent = ad.tanh(ad.matmul(pix, enc))
        latent = ad.transpose(ad.reshape(latent, (n * h * w, m, k)), (1, 0, 2))
        recon = ad.matmul(latent, ad.transpose(self.decoder, (0, 2, 1)))  # (m, P, D)
        resid = ad.subtract(pix, recon)
        if self.config.error_norm == "mae":
            dist = ad.sum_(ad.abs_(resid), axis=-1)
        else:
            dist = ad.sum_(ad.multiply(resid, resid), axis=-1)
        return ad.reshape(ad.transpose(dist, (1, 0)), (n, h, w, m))

    def logits(self, errors: ad.Tensor) -> ad.Tensor:
        return ad.scale(errors, -self.config.gamma)

    def image_probs(self, errors: ad.Tensor) -> ad.Tensor:
        logits = self.logits(errors)
        if self.config.strategy == "sm-ap":
            return ad.mean(ad.softmax(logits), axis=(1, 2))
        return ad.softmax(ad.mean(logits, axis=(1, 2)))

    def forward(self, Z: ad.Tensor) -> ad.Tensor:
        return self.image_probs(self.errors(Z))

    def loss(self, Z: ad.Tensor, labels: np.ndarray):
        """Returns (scalar loss, image probabilities)."""
        probs = self.forward(Z)
        return classification_loss_tensor(probs, labels, self.graph), probs

    # -- inference -----------------------------------------------------------

    def evaluate(self, Z: np.ndarray, batch_size: int = 512) -> HeadOutput:
        Z = np.asarray(Z, dtype=self.graph.dtype)
        if Z.ndim == 3:
            Z = Z[None]
        if Z.shape[0] == 0 or Z.shape[1] * Z.shape[2] == 0:
            raise ValueError("empty feature map")
        errs, pix, probs = [], [], []
        for start in range(0, len(Z), batch_size):
            e = self.errors(self.graph.const(Z[start:start + batch_size]))
            logits = self.logits(e)
            pp = ad.softmax(logits)
            if self.config.strategy == "sm-ap":
                pr = ad.mean(pp, axis=(1, 2))
            else:
                pr = ad.softmax(ad.mean(logits, axis=(1, 2)))
            errs.append(e.data)
            pix.append(pp.data)
            probs.append(pr.data)
        return HeadOutput(np.concatenate(errs), np.concatenate(pix), np.concatenate(probs))


def classification_loss_tensor(probs: ad.Tensor, labels: np.ndarray, graph: ad.Graph) -> ad.Tensor:
    """Mean over the batch of -log p(true class), floored at ``LOG_FLOOR``."""
    labels = np.asarray(labels, dtype=int)
    n, m = probs.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= m:
        raise ValueError(f"labels must be {n} integers in [0, {m})")
    onehot = np.zeros((n, m))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum_(ad.multiply(probs, graph.const(onehot)), axis=1)
    return ad.scale(ad.mean(ad.log(picked, floor=LOG_FLOOR)), -1.0)


def pixel_class_probs(Z: np.ndarray, head: CSSRHead) -> np.ndarray:
    """(H, W, D) or (N, H, W, D) features -> per-pixel class probabilities."""
    out = head.evaluate(Z).pixel_probs
    return out[0] if np.ndim(Z) == 3 else out


def image_class_probs(Z: np.ndarray, head: CSSRHead) -> np.ndarray:
    out = head.evaluate(Z).probs
    return out[0] if np.ndim(Z) == 3 else out


def classification_loss(probs: np.ndarray, label: int) -> float:
    probs = np.asarray(probs, dtype=float)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], LOG_FLOOR)))


def predict_label(Z: np.ndarray, head: CSSRHead):
    """Argmax of the image-level probabilities; ties go to the lowest index."""
    probs = image_class_probs(Z, head)
    return np.argmax(probs, axis=-1)
