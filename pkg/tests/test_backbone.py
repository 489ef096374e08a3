import numpy as np
import pytest
from hypothesis import given, strategies as st

from cssr import autodiff as ad
from cssr.backbone import BackboneConfig, build_backbone, extract_features


def test_mlp_feature_shape():
    bb = build_backbone(BackboneConfig("mlp2d", 8, 0))
    assert extract_features(bb, np.zeros((5, 2))).shape == (5, 1, 1, 8)


def test_smallconv_shape_on_28x28():
    bb = build_backbone(BackboneConfig("smallconv", 128, 0))
    out = extract_features(bb, np.random.default_rng(0).uniform(size=(2, 28, 28, 1)))
    assert out.shape == (2, 3, 3, 128)
    assert bb.output_hw() == (3, 3)


def test_same_seed_same_init():
    a = build_backbone(BackboneConfig("smallconv", 128, 4)).graph.state()
    b = build_backbone(BackboneConfig("smallconv", 128, 4)).graph.state()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_different_seed_different_init():
    a = build_backbone(BackboneConfig("mlp2d", 8, 0)).graph.state()
    b = build_backbone(BackboneConfig("mlp2d", 8, 1)).graph.state()
    assert not np.array_equal(a["backbone.fc0.w"], b["backbone.fc0.w"])


def test_init_bounds():
    bb = build_backbone(BackboneConfig("mlp2d", 8, 0))
    w = bb.graph.params["backbone.fc1.w"].data
    assert np.abs(w).max() <= 1 / np.sqrt(64)


def test_zero_parameters_give_zero_features():
    bb = build_backbone(BackboneConfig("smallconv", 128, 0))
    for p in bb.graph.params.values():
        p.data[:] = 0
    assert not extract_features(bb, np.ones((1, 28, 28, 1))).any()


@given(st.integers(1, 12), st.integers(0, 100))
def test_batch_order_and_purity(n, seed):
    rng = np.random.default_rng(seed)
    bb = build_backbone(BackboneConfig("mlp2d", 4, 0))
    x = rng.normal(size=(n, 2))
    full = extract_features(bb, x, batch_size=5)
    x2 = np.concatenate([x, x[:1]])
    again = extract_features(bb, x2, batch_size=3)
    # BLAS blocking depends on batch shape, so only rounding may differ across batchings
    np.testing.assert_allclose(full, again[:n], rtol=1e-12, atol=1e-14)
    one_batch = extract_features(bb, x2, batch_size=len(x2))
    np.testing.assert_array_equal(one_batch[0], one_batch[-1])
    np.testing.assert_array_equal(full, extract_features(bb, x, batch_size=5))


def test_shape_mismatch_names_expected_and_actual():
    bb = build_backbone(BackboneConfig("smallconv", 128, 0))
    with pytest.raises(ad.ShapeError, match=r"\(N, 28, 28, 1\).*\(2, 32, 32, 1\)"):
        extract_features(bb, np.zeros((2, 32, 32, 1)))


@pytest.mark.parametrize("cfg", [BackboneConfig("resnet", 8), BackboneConfig("mlp2d", 1),
                                 BackboneConfig("mlp2d", 65), BackboneConfig("smallconv", 64)])
def test_invalid_configs_rejected(cfg):
    with pytest.raises(ValueError):
        build_backbone(cfg)
