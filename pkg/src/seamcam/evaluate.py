"""Segmentation-quality and consistency metrics.

mIoU is the mean of per-class TP/(TP+FP+FN) over classes present in
prediction or ground truth. The under-/over-activation metrics are the
means of FN_c/TP_c and FP_c/TP_c over foreground classes; classes with
TP_c = 0 are excluded from those means and reported as degenerate
instead of producing infinities.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .affine import warp, warp_valid_mask
from .cam import pseudo_label
from .errors import DataError, ParameterError
from .network import forward_branch, snap_transform_for_images, transform_at_map_resolution


@dataclass
class EvalReport:
    per_class_iou: dict
    miou: float
    m_fn: float
    m_fp: float
    best_alpha: float
    equivariance_error: float = float("nan")
    degenerate_classes: list = field(default_factory=list)

    def to_text(self):
        lines = [f"miou={self.miou!r}",
                 f"m_fn={self.m_fn!r}",
                 f"m_fp={self.m_fp!r}",
                 f"best_alpha={self.best_alpha!r}",
                 f"equivariance_error={self.equivariance_error!r}",
                 "degenerate_classes=" + ",".join(str(c) for c in self.degenerate_classes)]
        for cls in sorted(self.per_class_iou):
            lines.append(f"iou_class_{cls}={self.per_class_iou[cls]!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text):
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                kv[key] = value
        per_class = {int(k.rsplit("_", 1)[1]): float(v)
                     for k, v in kv.items() if k.startswith("iou_class_")}
        degen = [int(c) for c in kv.get("degenerate_classes", "").split(",") if c]
        return EvalReport(per_class_iou=per_class, miou=float(kv["miou"]),
                          m_fn=float(kv["m_fn"]), m_fp=float(kv["m_fp"]),
                          best_alpha=float(kv["best_alpha"]),
                          equivariance_error=float(kv["equivariance_error"]),
                          degenerate_classes=degen)


def confusion_counts(pred, gt, num_classes):
    """Per-class (TP, FP, FN) pixel counts as an int64 [num_classes, 3] array."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ParameterError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(
                f"{name} contains class ids outside [0, {num_classes}): "
                f"[{arr.min()}, {arr.max()}]")
    joint = np.bincount(gt.ravel() * num_classes + pred.ravel(),
                        minlength=num_classes * num_classes)
    joint = joint.reshape(num_classes, num_classes)
    tp = np.diag(joint)
    fn = joint.sum(axis=1) - tp
    fp = joint.sum(axis=0) - tp
    return np.stack([tp, fp, fn], axis=1).astype(np.int64)


def miou(counts):
    """Mean IoU over classes present in gt or pred; returns (miou, per_class)."""
    counts = np.asarray(counts)
    tp, fp, fn = counts[:, 0], counts[:, 1], counts[:, 2]
    present = (tp + fp + fn) > 0
    per_class = {}
    for c in np.flatnonzero(present):
        per_class[int(c)] = float(tp[c] / (tp[c] + fp[c] + fn[c]))
    if not per_class:
        return 0.0, per_class
    return float(np.mean(list(per_class.values()))), per_class


def activation_metrics(counts):
    """(m_fn, m_fp, degenerate) over foreground classes (class 0 excluded)."""
    counts = np.asarray(counts)
    fn_ratios, fp_ratios, degenerate = [], [], []
    for c in range(1, counts.shape[0]):
        tp, fp, fn = counts[c]
        if tp == 0:
            degenerate.append(int(c))
            continue
        fn_ratios.append(fn / tp)
        fp_ratios.append(fp / tp)
    m_fn = float(np.mean(fn_ratios)) if fn_ratios else 0.0
    m_fp = float(np.mean(fp_ratios)) if fp_ratios else 0.0
    return m_fn, m_fp, degenerate


def threshold_sweep(cams, gts, labels, alphas, num_classes):
    """Pseudo-label mIoU per alpha; returns (best_alpha, best_miou, curve).

    ``cams`` are raw_foreground stacks at ground-truth resolution, one
    per image (or one batched stack). Ties pick the smaller alpha.
    """
    alphas = list(alphas)
    if not alphas or any(not (0 < a < 1) for a in alphas):
        raise ParameterError(f"alphas must be non-empty and inside (0,1): {alphas}")
    curve = []
    best_alpha, best_miou = None, -1.0
    for alpha in alphas:
        total = np.zeros((num_classes, 3), dtype=np.int64)
        for stack, gt, label in zip(cams, gts, labels):
            pred = pseudo_label(stack, np.atleast_2d(label), alpha)
            total += confusion_counts(pred[0], gt, num_classes)
        value, _ = miou(total)
        curve.append((alpha, value))
        if value > best_miou:
            best_alpha, best_miou = alpha, value
    return best_alpha, best_miou, curve


def evaluate_masks(preds, gts, num_classes):
    """Aggregate report over already-decided prediction masks."""
    total = np.zeros((num_classes, 3), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        total += confusion_counts(pred, gt, num_classes)
    miou_value, per_class = miou(total)
    m_fn, m_fp, degenerate = activation_metrics(total)
    return total, miou_value, per_class, m_fn, m_fp, degenerate


def equivariance_error(model, images, transforms, use_pcm=False):
    """Mean valid-masked L1 between warp(F(I)) and F(warp(I)).

    F maps an image batch to its normalized stack (refined when
    ``use_pcm``); inference mode, no gradients retained.
    """
    def normalized(image_batch):
        out = forward_branch(model, T.Tensor(image_batch), compute_pcm=use_pcm)
        stack = out.pcm_out if use_pcm else out.cam_norm
        return stack.maps.data

    stride = model.dims.stride
    errors = []
    for image in images:
        batch = image[None] if image.ndim == 3 else image
        h, w = batch.shape[2], batch.shape[3]
        f_orig = normalized(batch)
        for t in transforms:
            t_img = snap_transform_for_images(t, h, w, stride)
            warped_img = warp(T.Tensor(batch), t_img).data
            f_warped = normalized(warped_img)
            t_map = transform_at_map_resolution(t_img, stride)
            warped_f = warp(T.Tensor(f_orig), t_map).data
            valid = warp_valid_mask(t_map, f_orig.shape[2], f_orig.shape[3])
            count = valid.sum() * f_warped.shape[0] * f_warped.shape[1]
            if count == 0:
                continue
            errors.append(float((np.abs(warped_f - f_warped) * valid).sum() / count))
    if not errors:
        raise ParameterError("equivariance_error: no valid pixels under any transform")
    return float(np.mean(errors))
