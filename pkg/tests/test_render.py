from dataclasses import replace

import numpy as np
import pytest

from cssr.render import grid_points, render_open_space_map, write_pgm
from cssr.train import build_model, image_preset


def test_grid_includes_corners_and_orientation():
    xs, ys, pts = grid_points((-10, 10, -5, 5), 5)
    assert xs[0] == -10 and xs[-1] == 10 and ys[0] == 5 and ys[-1] == -5
    assert tuple(pts[0]) == (-10, 5) and tuple(pts[-1]) == (10, -5)


@pytest.mark.parametrize("bounds,res", [((1, 0, 0, 1), 4), ((0, 1, 0, np.inf), 4), ((0, 1, 0, 1), 1)])
def test_grid_rejects_bad_arguments(bounds, res):
    with pytest.raises(ValueError):
        grid_points(bounds, res)


def test_infinite_thresholds_bound_the_map(gaussian_run):
    model, stats = gaussian_run["model"], gaussian_run["stats"]
    everything = render_open_space_map(model, replace(stats, threshold=-np.inf), resolution=16)
    nothing = render_open_space_map(model, replace(stats, threshold=np.inf), resolution=16)
    assert everything.accepted.all()
    assert not nothing.accepted.any()


def test_class_means_are_accepted(gaussian_run):
    grid = render_open_space_map(gaussian_run["model"], gaussian_run["stats"], (-10, 10, -10, 10), 128)
    for x, y in [(2, 2), (-2, 2), (-2, -2), (2, -2)]:
        assert grid.accepted[grid.cell(x, y)]


def test_closed_set_classes_match_inference(gaussian_run):
    model = gaussian_run["model"]
    grid = render_open_space_map(model, gaussian_run["stats"], resolution=8)
    _, _, pts = grid_points((-6, 6, -6, 6), 8)
    assert np.array_equal(grid.classes.ravel(), model.infer(pts).predicted)


def test_pgm_layout(tmp_path, gaussian_run):
    grid = render_open_space_map(gaussian_run["model"], gaussian_run["stats"], resolution=10)
    buf = write_pgm(tmp_path / "m.pgm", grid).read_bytes()
    header = b"P5\n10 10\n255\n"
    assert buf.startswith(header) and len(buf) == len(header) + 100
    body = np.frombuffer(buf[len(header):], np.uint8).reshape(10, 10)
    assert np.array_equal(body == 255, grid.accepted)


def test_rejects_image_backbone_and_missing_threshold(gaussian_run):
    with pytest.raises(ValueError, match="mlp2d"):
        render_open_space_map(build_model(image_preset("cssr", 6)), gaussian_run["stats"])
    with pytest.raises(ValueError, match="threshold"):
        render_open_space_map(gaussian_run["model"], replace(gaussian_run["stats"], threshold=None))
