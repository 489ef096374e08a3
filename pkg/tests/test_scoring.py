import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cssr import autodiff as ad
from cssr.head import CSSRHead, HeadConfig
from cssr.scoring import (SCORE_IDS, ScoreStats, ZERO_NORM_SCORE, calibrate_scores, collect_class_stats, decide,
                          first_order_scores, fit_threshold, fuse, fused_score, gram_matrix, gram_scores,
                          normalize, open_set_infer, raw_scores, recon_scores, score_first_order, score_gram,
                          score_recon)

feature_maps = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 3), st.integers(1, 3), st.integers(1, 5)),
                      elements=st.floats(-10, 10))


def small_head(mode="cssr", m=3, d=4):
    return CSSRHead(HeadConfig.for_mode(mode, 0.1, num_classes=m, latent_dim=2), d, ad.Graph())


def unit_stats(m, d, weights=(1.0, 1.0, 1.0), threshold=None, mode="cssr"):
    return ScoreStats(mu=np.ones((m, d)), mu_tilde=np.full((m, d), 1.0 / m), gram_templates=np.zeros((m, d, d)),
                      gram_power=1, mode=mode, means={k: 0.0 for k in SCORE_IDS},
                      stds={k: 1.0 for k in SCORE_IDS}, weights=weights, threshold=threshold)


def test_recon_score_arithmetic():
    Z = np.array([[[[1.5, -0.5]]]])  # L1 norm 2
    assert recon_scores(np.array([[[0.5]]]), Z, "cssr")[0] == -0.125
    assert recon_scores(np.array([[[0.5]]]), Z, "rcssr")[0] == 0.5


def test_recon_score_pixel_mean():
    Z = np.ones((1, 1, 2, 1))  # unit norm per pixel
    assert recon_scores(np.array([[[0.1, 0.3]]]), Z, "cssr")[0] == pytest.approx(-0.2)


def test_zero_norm_pixel_surrogate(caplog):
    s = recon_scores(np.array([[[0.0]]]), np.zeros((1, 1, 1, 3)), "cssr")
    assert s[0] == ZERO_NORM_SCORE
    assert "zero feature norm" in caplog.text


def test_score_recon_uses_head_errors(rng):
    head = small_head()
    Z = rng.normal(size=(2, 2, 4))
    d = head.evaluate(Z[None]).errors[0, :, :, 1]
    expected = np.mean(-d / np.abs(Z).sum(-1) ** 2)
    assert score_recon(Z, 1, head) == pytest.approx(expected, rel=1e-12)


def test_identical_populations_give_even_mu_tilde(rng):
    f = np.abs(rng.normal(size=(4, 2, 2, 3)))
    stats = collect_class_stats(np.concatenate([f, f]), np.array([0] * 4 + [1] * 4), 2, gram_power=1)
    np.testing.assert_allclose(stats.mu_tilde, 0.5, atol=1e-15)


def test_single_sample_gram_template():
    stats = collect_class_stats(np.array([[[[1.0, 2.0]]]]), np.array([0]), 1, gram_power=1)
    np.testing.assert_array_equal(stats.gram_templates[0], [[1, 2], [2, 4]])


def test_silent_feature_gets_zero_mu_tilde():
    f = np.array([[[[1.0, 0.0]]], [[[2.0, 0.0]]]])
    stats = collect_class_stats(f, np.array([0, 1]), 2, gram_power=1)
    np.testing.assert_array_equal(stats.mu_tilde[:, 1], [0.0, 0.0])


def test_empty_class_fallback(caplog):
    f = np.ones((3, 1, 1, 2))
    stats = collect_class_stats(f, np.array([0, 0, 2]), 3)
    assert stats.empty_classes == (1,)
    np.testing.assert_array_equal(stats.mu_tilde[1], [1 / 3, 1 / 3])
    assert not stats.gram_templates[1].any()
    assert "no training samples" in caplog.text


@given(feature_maps, st.data())
def test_mu_tilde_columns_sum_to_one(Z, data):
    m = 3
    pred = np.array(data.draw(st.lists(st.integers(0, m - 1), min_size=len(Z), max_size=len(Z))))
    stats = collect_class_stats(Z, pred, m, gram_power=2)
    present = [c for c in range(m) if c not in stats.empty_classes]
    total = stats.mu[present].sum(0)
    sums = stats.mu_tilde[present].sum(0)
    np.testing.assert_allclose(sums[total > 0], 1.0, atol=1e-9)


def test_first_order_examples():
    stats = unit_stats(2, 2)
    stats.mu_tilde[:] = 0.5
    assert score_first_order(np.array([[[3.0, -5.0]]]), 0, stats) == 4.0
    assert score_first_order(np.zeros((2, 2, 2)), 1, stats) == 0.0


@given(feature_maps)
def test_first_order_is_linear_in_scale(Z):
    stats = unit_stats(1, Z.shape[-1])
    a = first_order_scores(Z, np.zeros(len(Z), int), stats)
    np.testing.assert_allclose(first_order_scores(2 * Z, np.zeros(len(Z), int), stats), 2 * a, rtol=1e-12)


def test_gram_examples():
    z = np.array([[[1.0, 2.0]]])
    np.testing.assert_array_equal(gram_matrix(z, 1), [[1, 2], [2, 4]])
    np.testing.assert_allclose(gram_matrix(z, 2), [[1, 2], [2, 4]], rtol=1e-15)
    np.testing.assert_allclose(gram_matrix(z, 8), [[1, 2], [2, 4]], rtol=1e-14)
    with pytest.raises(ValueError):
        gram_matrix(z, 0)


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4)), elements=st.floats(-5, 5)))
def test_gram_identity_and_symmetry(Z):
    G = gram_matrix(Z, 1)
    outer = sum(np.outer(np.abs(z), np.abs(z)) for z in Z.reshape(-1, Z.shape[-1]))
    np.testing.assert_allclose(G, outer, atol=1e-9)
    assert np.array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() >= -1e-9 * max(1.0, np.abs(G).max())


@given(arrays(np.float64, (2, 2, 3), elements=st.floats(-5, 5)), arrays(np.float64, (3, 3), elements=st.floats(-2, 2)))
def test_gram_score_pixel_decomposition(Z, T):
    stats = unit_stats(1, 3)
    stats.gram_templates[0] = T
    pix = sum(np.sum(T * np.outer(np.abs(z), np.abs(z))) for z in Z.reshape(-1, 3))
    assert score_gram(Z, 0, stats) == pytest.approx(pix, abs=1e-6)


def test_gram_score_examples(rng):
    stats = unit_stats(1, 3)
    z = rng.normal(size=(1, 1, 3))
    assert score_gram(z, 0, stats) == 0.0
    stats.gram_templates[0] = np.eye(3)
    assert score_gram(z, 0, stats) == pytest.approx(np.sum(z ** 2), rel=1e-12)
    with pytest.raises(ValueError):
        score_gram(np.ones((1, 1, 4)), 0, stats)
    with pytest.raises(KeyError):
        score_gram(z, 5, stats)


def _scores(values):
    return {k: np.asarray(values, dtype=float) for k in SCORE_IDS}


def test_calibration_examples():
    stats = calibrate_scores(_scores([1.0, 3.0]), unit_stats(1, 1))
    assert stats.means["recon"] == 2.0
    assert stats.stds["recon"] == pytest.approx(math.sqrt(2), rel=1e-15)
    with pytest.raises(ValueError, match="recon"):
        calibrate_scores(_scores([2.0, 2.0, 2.0]), unit_stats(1, 1))


def test_identity_normalization():
    s = _scores([0.3, -1.2])
    out = normalize(s, unit_stats(1, 1))
    for k in SCORE_IDS:
        np.testing.assert_array_equal(out[k], s[k])


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-100, 100)), st.floats(-1e3, 1e3))
def test_calibration_shift_invariance(values, shift):
    if np.ptp(values) < 1e-3:
        return
    base = unit_stats(1, 1)
    a = normalize(_scores(values), calibrate_scores(_scores(values), base))
    b = normalize(_scores(values + shift), calibrate_scores(_scores(values + shift), base))
    np.testing.assert_allclose(a["recon"], b["recon"], atol=1e-9)


def test_fusion_examples():
    s = {"recon": np.array([1.0]), "first": np.array([-1.0]), "gram": np.array([2.0])}
    assert fuse(s, unit_stats(1, 1))[0] == 2.0
    assert fuse(s, unit_stats(1, 1, weights=(1, 0, 0)))[0] == 1.0
    assert fuse(s, unit_stats(1, 1, weights=(0, 0, 0)))[0] == 0.0
    uncalibrated = replace(unit_stats(1, 1), means={}, stds={})
    with pytest.raises(ValueError):
        fuse(s, uncalibrated)


def test_threshold_examples():
    assert fit_threshold(np.arange(1, 101), 0.95) == 6
    assert fit_threshold([5.0, 2.0, 9.0], 1.0) == 2.0
    assert fit_threshold([4.2], 0.3) == 4.2
    with pytest.raises(ValueError):
        fit_threshold([], 0.95)
    with pytest.raises(ValueError):
        fit_threshold([1.0], 0.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=300), st.floats(0.01, 1.0))
def test_threshold_is_tight(scores, tpr):
    s = np.array(scores)
    delta = fit_threshold(s, tpr)
    assert np.mean(s >= delta) >= tpr - 1e-12
    # with every copy of delta removed, acceptance would fall short
    assert np.mean(s > delta) < tpr or delta == s.min()


@given(arrays(np.float64, 20, elements=st.floats(-5, 5)), st.floats(-5, 5), st.floats(0, 3))
def test_raising_threshold_never_accepts_more(scores, delta, raise_by):
    pred = np.zeros(20, int)
    low = decide(scores, pred, delta, 2)
    high = decide(scores, pred, delta + raise_by, 2)
    assert not np.any((low == 2) & (high != 2))


def test_open_set_infer_boundary(rng):
    head = small_head(m=2, d=3)
    Z = rng.normal(size=(1, 1, 3))
    stats = unit_stats(2, 3, weights=(1, 0, 0))
    s = fused_score(Z, int(np.argmax(head.evaluate(Z[None]).probs)), head, stats)
    c = open_set_infer(Z, head, replace(stats, threshold=s))
    assert c in (0, 1)
    assert open_set_infer(Z, head, replace(stats, threshold=s + 1e-6)) == 2
    with pytest.raises(ValueError):
        open_set_infer(Z, head, stats)


def test_zero_feature_map_is_rejected(rng):
    head = small_head(m=2, d=3)
    Z = rng.normal(size=(40, 1, 1, 3))
    out = head.evaluate(Z)
    pred = out.probs.argmax(-1)
    stats = collect_class_stats(Z, pred, 2, gram_power=1)
    stats = calibrate_scores(raw_scores(Z, out.errors, pred, stats), stats)
    stats = replace(stats, threshold=fit_threshold(fuse(raw_scores(Z, out.errors, pred, stats), stats)))
    assert open_set_infer(np.zeros((1, 1, 3)), head, stats) == 2


def test_fusion_degeneracy_matches_recon_threshold(rng):
    head = small_head(m=3, d=4)
    Z = rng.normal(size=(60, 2, 2, 4))
    out = head.evaluate(Z)
    pred = out.probs.argmax(-1)
    stats = collect_class_stats(Z, pred, 3, gram_power=8)
    stats = replace(calibrate_scores(raw_scores(Z, out.errors, pred, stats), stats), weights=(1.0, 0.0, 0.0))
    raw = raw_scores(Z, out.errors, pred, stats)
    delta = fit_threshold(fuse(raw, stats))
    stats = replace(stats, threshold=delta)
    normed = normalize(raw, stats)["recon"]
    expected = np.where(normed >= delta, pred, 3)
    got = np.array([open_set_infer(z, head, stats) for z in Z])
    np.testing.assert_array_equal(got, expected)
