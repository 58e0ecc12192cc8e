"""Mean feature maps, SSIM, resampling, and the cross-model layer table."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uapforge.similarity import (MeanFeatureMap, SsimParams,
                                 layer_similarity_table, mean_feature_map,
                                 resample_map, ssim)
from uapforge.tensor import ContractViolation


def rand_map(seed, shape=(16, 16)):
    return np.random.default_rng(seed).uniform(0, 1, shape)


# ---------------------------------------------------------------------------
# mean_feature_map
# ---------------------------------------------------------------------------

def test_mean_feature_map_is_channel_mean():
    acts = np.stack([np.full((4, 4), 1.0), np.full((4, 4), 3.0)])
    m = mean_feature_map(acts, arch_id="cnn-a", layer=1)
    assert np.array_equal(m.values, np.full((4, 4), 2.0))
    assert m.arch_id == "cnn-a" and m.layer == 1


def test_mean_feature_map_rejects_batched_input():
    with pytest.raises(ContractViolation):
        mean_feature_map(np.zeros((2, 3, 4, 4)))


# ---------------------------------------------------------------------------
# ssim
# ---------------------------------------------------------------------------

def test_ssim_self_comparison_is_one():
    a = rand_map(0)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_symmetry():
    a, b = rand_map(1), rand_map(2)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_bounded():
    for s in range(6):
        v = ssim(rand_map(s), rand_map(s + 100))
        assert -1.0 <= v <= 1.0


def test_ssim_constant_zero_vs_one_maps():
    # both variances vanish; the luminance term alone gives C1/(1+C1)
    a = np.zeros((16, 16))
    b = np.ones((16, 16))
    c1 = 0.01 ** 2
    assert ssim(a, b) == pytest.approx(c1 / (1.0 + c1), rel=1e-9)  # ~9.999e-5


def test_ssim_small_map_uses_global_window():
    a = rand_map(3, (5, 5))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_shape_and_rank_checks():
    with pytest.raises(ContractViolation):
        ssim(rand_map(0, (8, 8)), rand_map(0, (9, 9)))
    with pytest.raises(ContractViolation):
        ssim(np.zeros(8), np.zeros(8))


def test_ssim_detects_structure_better_than_noise():
    a = rand_map(4)
    noisy = a + np.random.default_rng(5).normal(0, 0.05, a.shape)
    unrelated = rand_map(6)
    assert ssim(a, noisy) > ssim(a, unrelated)


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_ssim_self_is_one_property(seed):
    a = rand_map(seed, (12, 12))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# resample_map
# ---------------------------------------------------------------------------

def test_resample_identity():
    a = rand_map(7, (8, 8))
    assert np.array_equal(resample_map(a, 8, 8), a)


def test_resample_integer_factor_is_block_mean():
    a = np.arange(16, dtype=np.float64).reshape(4, 4)
    out = resample_map(a, 2, 2)
    expect = np.array([[a[:2, :2].mean(), a[:2, 2:].mean()],
                       [a[2:, :2].mean(), a[2:, 2:].mean()]])
    assert np.allclose(out, expect, atol=1e-12)


def test_resample_preserves_constant_maps():
    a = np.full((10, 10), 0.37)
    for th, tw in [(5, 5), (3, 7), (13, 4)]:
        out = resample_map(a, th, tw)
        assert out.shape == (th, tw)
        assert np.allclose(out, 0.37, atol=1e-12)


def test_resample_mean_roughly_preserved_bilinear():
    a = rand_map(8, (9, 9))
    out = resample_map(a, 6, 6)   # non-integer factor -> bilinear
    assert out.shape == (6, 6)
    assert abs(out.mean() - a.mean()) < 0.05


def test_resample_rejects_bad_target():
    with pytest.raises(ContractViolation):
        resample_map(rand_map(0), 0, 4)


# ---------------------------------------------------------------------------
# layer table
# ---------------------------------------------------------------------------

def test_layer_similarity_self_table(small_model, testset):
    imgs = testset.images[:8]
    report = layer_similarity_table(small_model, [small_model], imgs,
                                    layers=[1, 2])
    assert report.reference_arch == "cnn-a"
    for row in report.rows:
        assert row.ssim == pytest.approx(1.0, abs=1e-9)
        assert row.n_images == 8


def test_layer_similarity_rejects_unknown_layer(small_model, testset):
    with pytest.raises(ContractViolation):
        layer_similarity_table(small_model, [small_model],
                               testset.images[:4], layers=[99])


def test_layer_similarity_cross_arch_rows(small_model, trainset, testset):
    from tests.conftest import train_frozen
    other = train_frozen("cnn-b", trainset, epochs=1)
    imgs = testset.images[:6]
    report = layer_similarity_table(small_model, [other], imgs, layers=[1, 3])
    assert [r.layer for r in report.rows] == [1, 3]
    for row in report.rows:
        assert -1.0 <= row.ssim <= 1.0
        assert row.comparison_arch == "cnn-b"
