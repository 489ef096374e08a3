"""Accept/reject maps of a 2-D model over a rectangle of input space."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import AE_MODES
from .scoring import ScoreStats, decide, fuse, raw_scores


@dataclass
class OpenSpaceMap:
    accepted: np.ndarray  # (res, res) bool; row 0 is the top edge (largest y)
    classes: np.ndarray  # (res, res) closed-set predicted class per cell
    xs: np.ndarray  # (res,) cell-centre x coordinates, left to right
    ys: np.ndarray  # (res,) cell-centre y coordinates, top to bottom

    def cell(self, x: float, y: float):
        """(row, col) of the grid node nearest to (x, y)."""
        return int(np.argmin(np.abs(self.ys - y))), int(np.argmin(np.abs(self.xs - x)))

    def to_pgm(self) -> bytes:
        h, w = self.accepted.shape
        return f"P5\n{w} {h}\n255\n".encode("ascii") + np.where(self.accepted, 255, 0).astype(np.uint8).tobytes()


def grid_points(bounds: Sequence[float], resolution: int):
    xmin, xmax, ymin, ymax = map(float, bounds)
    if not np.all(np.isfinite([xmin, xmax, ymin, ymax])) or xmin >= xmax or ymin >= ymax:
        raise ValueError(f"bounds must be finite with min < max, got {tuple(bounds)}")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymax, ymin, resolution)
    gx, gy = np.meshgrid(xs, ys)
    return xs, ys, np.stack([gx.ravel(), gy.ravel()], axis=1)


def render_open_space_map(model, stats: ScoreStats, bounds=(-6.0, 6.0, -6.0, 6.0),
                          resolution: int = 128) -> OpenSpaceMap:
    """Run open-set inference at every grid node; the node set includes the four corners."""
    if model.backbone.config.preset != "mlp2d":
        raise ValueError(f"open-space maps need the 2-D mlp2d backbone, got {model.backbone.config.preset!r}")
    if model.mode not in AE_MODES:
        raise ValueError(f"open-space maps need an auto-encoder head, got mode {model.mode!r}")
    if stats.threshold is None:
        raise ValueError("score statistics carry no threshold")
    xs, ys, pts = grid_points(bounds, resolution)
    inf = model.infer(pts)
    fused = fuse(raw_scores(inf.features, inf.errors, inf.predicted, stats), stats)
    decision = decide(fused, inf.predicted, stats.threshold, model.num_classes)
    shape = (resolution, resolution)
    return OpenSpaceMap((decision < model.num_classes).reshape(shape), inf.predicted.reshape(shape), xs, ys)


def write_pgm(path, grid: OpenSpaceMap) -> Path:
    path = Path(path)
    path.write_bytes(grid.to_pgm())
    return path
