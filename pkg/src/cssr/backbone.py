"""Small feature extractors producing NHWC semantic feature maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import autodiff as ad

PRESETS = ("mlp2d", "smallconv")
SMALLCONV_CHANNELS = (32, 64, 128)


@dataclass(frozen=True)
class BackboneConfig:
    preset: str = "mlp2d"
    feature_dim: int = 8
    seed: int = 0
    hidden: int = 64
    input_hw: Tuple[int, int] = (28, 28)

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown backbone preset {self.preset!r}; expected one of {PRESETS}")
        if self.preset == "mlp2d" and not 2 <= self.feature_dim <= 64:
            raise ValueError(f"mlp2d feature_dim must be in [2, 64], got {self.feature_dim}")
        if self.preset == "smallconv":
            if self.feature_dim != SMALLCONV_CHANNELS[-1]:
                raise ValueError(f"smallconv feature_dim is fixed at 128, got {self.feature_dim}")
            if min(self.input_hw) < 8:
                raise ValueError(f"smallconv needs inputs of at least 8x8, got {self.input_hw}")


class Backbone:
    """Parameters live in the owning graph under ``backbone.*``."""

    def __init__(self, config: BackboneConfig, graph: ad.Graph):
        config.validate()
        self.config = config
        self.graph = graph
        rng = np.random.default_rng(config.seed)
        self.layers: List[Tuple[str, str, str]] = []
        if config.preset == "mlp2d":
            dims = [2, config.hidden, config.hidden, config.feature_dim]
            for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
                w = graph.param(f"backbone.fc{i}.w", ad.uniform_init(rng, (fan_in, fan_out), fan_in))
                b = graph.param(f"backbone.fc{i}.b", np.zeros(fan_out))
                self.layers.append(("dense", w.name, b.name))
        else:
            cin = 1
            for i, cout in enumerate(SMALLCONV_CHANNELS):
                fan_in = 9 * cin
                w = graph.param(f"backbone.conv{i}.w", ad.uniform_init(rng, (3, 3, cin, cout), fan_in))
                b = graph.param(f"backbone.conv{i}.b", np.zeros(cout))
                self.layers.append(("conv", w.name, b.name))
                cin = cout

    @property
    def input_shape(self) -> Tuple[int, ...]:
        if self.config.preset == "mlp2d":
            return (2,)
        return (*self.config.input_hw, 1)

    def output_hw(self) -> Tuple[int, int]:
        if self.config.preset == "mlp2d":
            return (1, 1)
        h, w = self.config.input_hw
        for _ in SMALLCONV_CHANNELS:
            h, w = h // 2, w // 2
        return (h, w)

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim < 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ad.ShapeError(f"backbone {self.config.preset}: expected inputs of shape (N, {', '.join(map(str, self.input_shape))}), got {tuple(x.shape)}")

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        """Differentiable path; returns an (N, H, W, D) feature map tensor."""
        self.check_input(x.data)
        p = self.graph.params
        h = x
        if self.config.preset == "mlp2d":
            last = len(self.layers) - 1
            for i, (_, wname, bname) in enumerate(self.layers):
                h = ad.add(ad.matmul(h, p[wname]), p[bname])
                if i < last:
                    h = ad.relu(h)
            return ad.reshape(h, (x.shape[0], 1, 1, self.config.feature_dim))
        for _, wname, bname in self.layers:
            h = ad.add(ad.conv2d(h, p[wname]), p[bname])
            h = ad.max_pool2x2(ad.relu(h))
        return h

    __call__ = forward


def build_backbone(config: BackboneConfig, graph: ad.Graph | None = None) -> Backbone:
    return Backbone(config, graph if graph is not None else ad.Graph())


def extract_features(backbone: Backbone, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Feature maps (N, H, W, D) for a batch of raw inputs; no side effects."""
    inputs = np.asarray(inputs, dtype=backbone.graph.dtype)
    backbone.check_input(inputs)
    out = []
    for start in range(0, len(inputs), batch_size):
        chunk = backbone.graph.const(inputs[start:start + batch_size])
        out.append(backbone.forward(chunk).data)
    if not out:
        h, w = backbone.output_hw()
        return np.zeros((0, h, w, backbone.config.feature_dim), dtype=backbone.graph.dtype)
    return np.concatenate(out, axis=0)
