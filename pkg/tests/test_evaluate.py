import numpy as np
import pytest

import seamcam.tensor as T
from seamcam.affine import AffineTransform
from seamcam.cam import CamStack, RAW_FOREGROUND, pseudo_label
from seamcam.errors import DataError, ParameterError
from seamcam.evaluate import (EvalReport, activation_metrics, confusion_counts,
                              equivariance_error, miou, threshold_sweep)
from seamcam.gradcheck import tiny_dims
from seamcam.network import ToyBackbone


class TestConfusionCounts:
    def test_perfect_prediction(self, rng):
        m = rng.integers(0, 3, size=(6, 6))
        counts = confusion_counts(m, m, 3)
        assert not counts[:, 1].any() and not counts[:, 2].any()

    def test_hand_counted_two_by_two(self):
        gt = np.array([[1, 1], [0, 0]])
        pred = np.array([[1, 0], [0, 0]])
        counts = confusion_counts(pred, gt, 2)
        assert tuple(counts[1]) == (1, 0, 1)  # TP, FP, FN
        assert tuple(counts[0]) == (2, 1, 0)

    def test_empty_class_is_zero_row(self):
        counts = confusion_counts(np.zeros((3, 3), int), np.zeros((3, 3), int), 4)
        assert not counts[1:].any()

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            confusion_counts(np.array([[5]]), np.array([[0]]), 3)

    def test_count_sums_equal_pixels(self, rng):
        pred = rng.integers(0, 4, size=(10, 10))
        gt = rng.integers(0, 4, size=(10, 10))
        counts = confusion_counts(pred, gt, 4)
        assert counts[:, 0].sum() + counts[:, 2].sum() == 100
        assert counts[:, 0].sum() + counts[:, 1].sum() == 100


class TestMiou:
    def test_perfect(self, rng):
        m = rng.integers(0, 3, size=(5, 5))
        value, _ = miou(confusion_counts(m, m, 3))
        assert value == 1.0

    def test_hand_case(self):
        gt = np.array([[1, 1], [0, 0]])
        pred = np.array([[1, 0], [0, 0]])
        value, per_class = miou(confusion_counts(pred, gt, 2))
        assert abs(value - (0.5 + 2.0 / 3.0) / 2.0) < 1e-12
        assert abs(value - 0.5833) < 1e-4

    def test_disjoint_classes_give_zero(self):
        gt = np.ones((4, 4), int)
        pred = np.full((4, 4), 2)
        value, per_class = miou(confusion_counts(pred, gt, 3))
        assert per_class[1] == 0.0 and per_class[2] == 0.0

    def test_absent_classes_excluded(self):
        gt = np.zeros((4, 4), int)
        value, per_class = miou(confusion_counts(gt, gt, 5))
        assert value == 1.0
        assert set(per_class) == {0}

    def test_relabeling_invariance(self, rng):
        pred = rng.integers(0, 4, size=(8, 8))
        gt = rng.integers(0, 4, size=(8, 8))
        base, _ = miou(confusion_counts(pred, gt, 4))
        perm = np.array([2, 3, 1, 0])
        permuted, _ = miou(confusion_counts(perm[pred], perm[gt], 4))
        assert abs(base - permuted) < 1e-12


class TestActivationMetrics:
    def test_perfect_prediction(self, rng):
        m = rng.integers(0, 3, size=(6, 6))
        m_fn, m_fp, degen = activation_metrics(confusion_counts(m, m, 3))
        assert m_fn == 0.0 and m_fp == 0.0 and not degen

    def test_direct_ratio(self):
        counts = np.array([[10, 0, 0], [2, 3, 1]])
        m_fn, m_fp, degen = activation_metrics(counts)
        assert m_fn == 0.5 and m_fp == 1.5 and not degen

    def test_degenerate_class_excluded(self):
        counts = np.array([[5, 0, 0], [0, 3, 2], [4, 2, 2]])
        m_fn, m_fp, degen = activation_metrics(counts)
        assert degen == [1]
        assert m_fn == 0.5 and m_fp == 0.5

    def test_background_excluded(self):
        counts = np.array([[1, 9, 9], [2, 2, 2]])
        m_fn, m_fp, _ = activation_metrics(counts)
        assert m_fn == 1.0 and m_fp == 1.0


class TestThresholdSweep:
    def test_binary_cam_perfect_at_any_alpha(self):
        gt = np.zeros((8, 8), dtype=np.int64)
        gt[2:5, 2:5] = 1
        cam = np.zeros((1, 2, 8, 8))
        cam[0, 0] = (gt == 1).astype(float)
        stack = CamStack(T.Tensor(cam), RAW_FOREGROUND)
        label = np.array([1, 0])
        for alphas in ([0.1], [0.5], [0.9]):
            best_alpha, best, curve = threshold_sweep(
                [stack], [gt], [label], alphas, num_classes=3)
            assert best == 1.0

    def test_curve_cardinality(self, rng):
        cam = CamStack(T.Tensor(rng.uniform(size=(1, 3, 8, 8))), RAW_FOREGROUND)
        gt = rng.integers(0, 4, size=(8, 8))
        alphas = [round(0.1 * k, 1) for k in range(1, 10)]
        _, _, curve = threshold_sweep([cam], [gt], [np.ones(3)], alphas, 4)
        assert len(curve) == 9

    def test_matches_recomputation_oracle(self, rng):
        cams = [CamStack(T.Tensor(rng.uniform(size=(1, 3, 8, 8))), RAW_FOREGROUND)
                for _ in range(3)]
        gts = [rng.integers(0, 4, size=(8, 8)) for _ in range(3)]
        labels = [np.ones(3)] * 3
        alphas = [0.2, 0.5, 0.8]
        _, _, curve = threshold_sweep(cams, gts, labels, alphas, 4)
        for alpha, value in curve:
            total = np.zeros((4, 3), dtype=np.int64)
            for cam, gt in zip(cams, gts):
                pred = pseudo_label(cam, np.ones((1, 3)), alpha)[0]
                total += confusion_counts(pred, gt, 4)
            expected, _ = miou(total)
            assert value == expected

    def test_tie_prefers_smaller_alpha(self):
        gt = np.zeros((4, 4), dtype=np.int64)
        cam = CamStack(T.Tensor(np.zeros((1, 2, 4, 4))), RAW_FOREGROUND)
        best_alpha, best, _ = threshold_sweep([cam], [gt], [np.zeros(2)],
                                              [0.3, 0.6], 3)
        assert best == 1.0 and best_alpha == 0.3

    def test_monotone_fn_fp_in_alpha(self, rng):
        cam = rng.uniform(size=(1, 3, 8, 8))
        stack = CamStack(T.Tensor(cam), RAW_FOREGROUND)
        gt = rng.integers(0, 4, size=(8, 8))
        label = np.ones(3)
        prev_fn, prev_fp = -1, None
        for alpha in np.linspace(0.05, 0.95, 19):
            pred = pseudo_label(stack, label[None], float(alpha))[0]
            counts = confusion_counts(pred, gt, 4)
            fn = counts[1:, 2].sum()
            fp = counts[1:, 1].sum()
            assert fn >= prev_fn
            if prev_fp is not None:
                assert fp <= prev_fp
            prev_fn, prev_fp = fn, fp

    def test_alpha_validation(self, rng):
        cam = CamStack(T.Tensor(rng.uniform(size=(1, 2, 4, 4))), RAW_FOREGROUND)
        with pytest.raises(ParameterError):
            threshold_sweep([cam], [np.zeros((4, 4), int)], [np.ones(2)], [], 3)


class TestEquivarianceError:
    def test_identity_transform_is_zero(self, rng):
        model = ToyBackbone(dims=tiny_dims(), seed=5)
        model.params["head"].data += 0.1
        images = [rng.uniform(size=(3, 16, 16))]
        err = equivariance_error(model, images, [AffineTransform()])
        assert err < 1e-12

    def test_constant_model_is_zero_under_flip(self, rng):
        model = ToyBackbone(dims=tiny_dims(), seed=5)  # zero head: constant maps
        images = [rng.uniform(size=(3, 16, 16))]
        err = equivariance_error(model, images, [AffineTransform(hflip=True)])
        assert err < 1e-12

    def test_matches_scalar_recomputation(self, rng):
        from seamcam.affine import warp, warp_valid_mask
        from seamcam.network import forward_branch
        model = ToyBackbone(dims=tiny_dims(), seed=6)
        model.params["head"].data = rng.uniform(
            -0.3, 0.3, size=model.params["head"].shape)
        images = [rng.uniform(size=(3, 16, 16)) for _ in range(2)]
        t = AffineTransform(scale=0.5)
        got = equivariance_error(model, images, [t])
        errs = []
        for image in images:
            f = forward_branch(model, T.Tensor(image[None]),
                               compute_pcm=False).cam_norm.data
            warped_img = warp(T.Tensor(image[None]), t).data
            f_w = forward_branch(model, T.Tensor(warped_img),
                                 compute_pcm=False).cam_norm.data
            t_map = AffineTransform(scale=0.5)
            w_f = warp(T.Tensor(f), t_map).data
            valid = warp_valid_mask(t_map, 4, 4)
            num = 0.0
            den = 0
            for c in range(f_w.shape[1]):
                for i in range(f_w.shape[2]):
                    for j in range(f_w.shape[3]):
                        if valid[0, 0, i, j]:
                            num += abs(w_f[0, c, i, j] - f_w[0, c, i, j])
                            den += 1
            errs.append(num / den)
        assert abs(got - np.mean(errs)) < 1e-10


def test_report_text_roundtrip():
    report = EvalReport(per_class_iou={0: 0.9, 2: 0.5}, miou=0.7, m_fn=0.1,
                        m_fp=0.2, best_alpha=0.45, equivariance_error=0.03,
                        degenerate_classes=[1])
    back = EvalReport.from_text(report.to_text())
    assert back == report
