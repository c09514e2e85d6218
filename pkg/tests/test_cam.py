import numpy as np
import pytest

import seamcam.tensor as T
from seamcam.affine import resize_bilinear
from seamcam.cam import (CamStack, InferenceConfig, NORMALIZED_BG,
                         RAW_FOREGROUND, fuse_multiscale,
                         normalize_with_background, pseudo_label,
                         rectify_and_scale)
from seamcam.errors import ParameterError


def raw_stack(data):
    return CamStack(T.Tensor(data), RAW_FOREGROUND)


class TestRectifyAndScale:
    def test_all_negative_becomes_zero(self, rng):
        stack = rectify_and_scale(T.Tensor(-rng.uniform(1, 2, size=(1, 3, 4, 4))))
        assert not stack.data.any()

    def test_peak_becomes_one(self, rng):
        data = rng.uniform(size=(1, 1, 4, 4))
        data[0, 0, 2, 3] = 4.0
        stack = rectify_and_scale(T.Tensor(data))
        assert stack.data[0, 0, 2, 3] == 1.0
        assert stack.data.max() == 1.0

    def test_spatial_max_is_zero_or_one(self, rng):
        data = rng.normal(size=(3, 4, 8, 8))
        stack = rectify_and_scale(T.Tensor(data))
        peaks = stack.data.max(axis=(2, 3))
        assert np.all((peaks == 0.0) | (np.abs(peaks - 1.0) < 1e-12))


class TestNormalizeWithBackground:
    def test_single_pixel_example(self):
        stack = raw_stack(np.array([0.8, 0.3, 0.1]).reshape(1, 3, 1, 1))
        out = normalize_with_background(stack)
        assert out.kind == NORMALIZED_BG
        assert np.allclose(out.data.ravel(), [0.2, 0.8, 0.0, 0.0])

    def test_all_zero_pixel_is_background(self):
        out = normalize_with_background(raw_stack(np.zeros((1, 3, 1, 1))))
        assert np.allclose(out.data.ravel(), [1.0, 0.0, 0.0, 0.0])

    def test_tie_keeps_lowest_class(self):
        out = normalize_with_background(
            raw_stack(np.array([0.5, 0.5]).reshape(1, 2, 1, 1)))
        assert np.allclose(out.data.ravel(), [0.5, 0.5, 0.0])

    def test_complementarity_exact(self, rng):
        raw = rectify_and_scale(T.Tensor(rng.normal(size=(2, 3, 6, 6))))
        out = normalize_with_background(raw)
        pre_max = raw.data.max(axis=1)
        assert np.array_equal(out.data[:, 0], 1.0 - pre_max)

    def test_at_most_one_foreground_channel(self, rng):
        raw = rectify_and_scale(T.Tensor(rng.normal(size=(2, 4, 5, 5))))
        out = normalize_with_background(raw)
        nonzero = (out.data[:, 1:] > 0).sum(axis=1)
        assert nonzero.max() <= 1


class TestPseudoLabel:
    def test_all_below_alpha_is_background(self, rng):
        cam = raw_stack(rng.uniform(0, 0.2, size=(1, 3, 4, 4)))
        mask = pseudo_label(cam, np.ones((1, 3)), alpha=0.3)
        assert not mask.any()

    def test_single_peak(self):
        data = np.zeros((1, 2, 3, 3))
        data[0, 1, 1, 1] = 0.9
        mask = pseudo_label(raw_stack(data), np.array([[0, 1]]), alpha=0.3)
        expected = np.zeros((1, 3, 3), dtype=np.int64)
        expected[0, 1, 1] = 2
        assert np.array_equal(mask, expected)

    def test_absent_class_suppressed(self):
        data = np.full((1, 2, 2, 2), 0.9)
        mask = pseudo_label(raw_stack(data), np.array([[0, 1]]), alpha=0.3)
        assert np.array_equal(np.unique(mask), [2])

    def test_matches_argmax_oracle(self, rng):
        for _ in range(20):
            cam = rng.uniform(size=(1, 3, 8, 8))
            label = (rng.uniform(size=(1, 3)) > 0.4).astype(float)
            alpha = float(rng.uniform(0.1, 0.9))
            got = pseudo_label(raw_stack(cam), label, alpha)
            masked = cam * label[:, :, None, None]
            for i in range(8):
                for j in range(8):
                    scores = [alpha] + [masked[0, c, i, j] for c in range(3)]
                    assert got[0, i, j] == int(np.argmax(scores))

    def test_tie_prefers_background(self):
        data = np.full((1, 1, 1, 1), 0.3)
        mask = pseudo_label(raw_stack(data), np.array([[1]]), alpha=0.3)
        assert mask[0, 0, 0] == 0

    def test_monotone_in_alpha(self, rng):
        cam = raw_stack(rng.uniform(size=(1, 3, 8, 8)))
        label = np.ones((1, 3))
        prev_fg = None
        for alpha in np.linspace(0.05, 0.95, 10):
            fg = (pseudo_label(cam, label, float(alpha)) > 0).sum()
            if prev_fg is not None:
                assert fg <= prev_fg  # raising alpha never adds foreground
            prev_fg = fg

    def test_alpha_domain(self, rng):
        cam = raw_stack(rng.uniform(size=(1, 2, 2, 2)))
        with pytest.raises(ParameterError):
            pseudo_label(cam, np.ones((1, 2)), alpha=1.5)


class TestFuseMultiscale:
    def test_single_scale_same_size_identity(self, rng):
        base = rectify_and_scale(T.Tensor(rng.normal(size=(1, 3, 8, 8))))
        fused = fuse_multiscale([base], (8, 8))
        assert np.abs(fused.data - base.data).max() < 1e-12

    def test_mean_of_identical_stacks(self, rng):
        base = rectify_and_scale(T.Tensor(rng.normal(size=(1, 2, 6, 6))))
        fused = fuse_multiscale([base, base, base], (6, 6))
        assert np.abs(fused.data - base.data).max() < 1e-12

    def test_matches_compositional_oracle(self, rng):
        a = rng.uniform(size=(1, 2, 8, 8))
        b = rng.uniform(size=(1, 2, 16, 16))
        fused = fuse_multiscale([raw_stack(a), raw_stack(b)], (16, 16))
        resized = np.stack([resize_bilinear(a, (16, 16)), b])
        mean = resized.mean(axis=0)
        expected = mean / np.maximum(mean.max(axis=(2, 3), keepdims=True), 1e-5)
        assert np.abs(fused.data - expected).max() < 1e-9

    def test_order_invariance(self, rng):
        stacks = [raw_stack(rng.uniform(size=(1, 2, s, s))) for s in (4, 8, 12)]
        f1 = fuse_multiscale(stacks, (8, 8)).data
        f2 = fuse_multiscale(stacks[::-1], (8, 8)).data
        assert np.abs(f1 - f2).max() < 1e-12

    def test_flip_counterparts_unflipped(self, rng):
        base = raw_stack(rng.uniform(size=(1, 2, 6, 6)))
        flipped = raw_stack(base.data[:, :, :, ::-1].copy())
        fused = fuse_multiscale([base], (6, 6), flipped_cams=[flipped])
        assert np.abs(fused.data - fuse_multiscale([base], (6, 6)).data).max() < 1e-12

    def test_empty_list_rejected(self):
        with pytest.raises(ParameterError):
            fuse_multiscale([], (4, 4))


def test_inference_config_validation():
    with pytest.raises(ParameterError):
        InferenceConfig(alpha=1.2)
    with pytest.raises(ParameterError):
        InferenceConfig(scales=())
