"""Training objectives: classification, equivariant regularization (ER),
equivariant cross regularization (ECR) with online hard example mining,
and their unweighted sum.

ER and ECR both operate on background-appended normalized stacks and
average only over pixels whose warped sample point stayed inside the
source (the validity mask from the affine module). ECR's per-pixel loss
is the channel sum of absolute differences; hard-example mining keeps
the largest ``ceil(keep_fraction * valid_count)`` of them per term.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .affine import warp
from .cam import NORMALIZED_BG
from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class OhemConfig:
    keep_fraction: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ParameterError(
                f"keep_fraction must lie in (0,1], got {self.keep_fraction}")


@dataclass
class LossBundle:
    """Scalar loss tensors; ``total`` is always their exact sum."""

    l_cls: T.Tensor
    l_er: T.Tensor
    l_ecr: T.Tensor
    total: T.Tensor

    def values(self):
        return {
            "l_cls": self.l_cls.item(),
            "l_er": self.l_er.item(),
            "l_ecr": self.l_ecr.item(),
            "total": self.total.item(),
        }


def multilabel_soft_margin(z, label):
    """Mean binary cross-entropy over classes and batch, in log-sigmoid form.

    z: [N,K] logits, label: [N,K] multi-hot.
    """
    label = np.asarray(label, dtype=np.float64)
    if label.shape != z.shape:
        raise DimensionError(f"label shape {label.shape} != logits shape {z.shape}")
    pos = T.mul(T.log_sigmoid(z), T.Tensor(label))
    neg = T.mul(T.log_sigmoid(T.scale(z, -1.0)), T.Tensor(1.0 - label))
    return T.scale(T.mean_reduce(T.add(pos, neg)), -1.0)


def classification_loss(z_o, z_t, label):
    """Mean of the soft-margin loss over the two siamese branches."""
    return T.scale(T.add(multilabel_soft_margin(z_o, label),
                         multilabel_soft_margin(z_t, label)), 0.5)


def _check_consistency_inputs(name, warped, target, valid):
    if warped.shape != target.shape:
        raise DimensionError(
            f"{name}: warped stack {warped.shape} vs target {target.shape}")
    if valid.shape[2:] != target.shape[2:]:
        raise DimensionError(
            f"{name}: validity mask {valid.shape} vs target {target.shape}")


def er_loss(cam_o, cam_t, transform, valid):
    """Mean |warp(cam_o) - cam_t| over valid pixels and all channels.

    Gradients flow into both branches.
    """
    if cam_o.kind != NORMALIZED_BG or cam_t.kind != NORMALIZED_BG:
        raise ParameterError("er_loss expects normalized_bg stacks")
    warped = warp(cam_o.maps, transform)
    _check_consistency_inputs("er_loss", warped, cam_t.maps, valid)
    diff = T.absolute(T.sub(warped, cam_t.maps))
    n, c = diff.shape[0], diff.shape[1]
    count = max(float(valid.sum()), 1.0)
    masked = T.mul(diff, T.Tensor(valid))
    return T.scale(T.sum_reduce(masked), 1.0 / (count * n * c))


def _ohem_term(warped, target, valid, keep_fraction):
    """Channel-summed L1 with hard-example selection over valid pixels."""
    diff = T.absolute(T.sub(warped, target))
    masked = T.mul(diff, T.Tensor(valid))
    per_pixel = T.sum_reduce(masked, axis=1, keepdims=True)  # [N,1,H,W]
    valid_b = np.broadcast_to(valid, per_pixel.shape)
    n_valid = int(valid_b.sum())
    if n_valid == 0:
        return T.scale(T.sum_reduce(per_pixel), 0.0)
    k = math.ceil(keep_fraction * n_valid)
    flat = per_pixel.data.ravel()
    validf = valid_b.ravel() > 0
    # stable top-k among valid pixels: sort by (-loss, index)
    order = np.argsort(-flat[validf], kind="stable")[:k]
    keep = np.zeros(flat.shape)
    keep[np.flatnonzero(validf)[order]] = 1.0
    selected = T.mul(per_pixel, T.Tensor(keep.reshape(per_pixel.shape)))
    return T.scale(T.sum_reduce(selected), 1.0 / k)


def ecr_loss(y_o, y_t, camhat_o, camhat_t, transform, valid, ohem):
    """Cross-branch consistency between refined and original stacks.

    term1 = OHEM(|warp(y_o) - camhat_t|), term2 = OHEM(|warp(camhat_o) - y_t|);
    the refined stacks y_* were computed from gradient-detached inputs,
    so trunk gradients arrive only through the original stacks here.
    """
    for s in (y_o, y_t, camhat_o, camhat_t):
        if s.kind != NORMALIZED_BG:
            raise ParameterError("ecr_loss expects normalized_bg stacks")
    w_refined = warp(y_o.maps, transform)
    w_original = warp(camhat_o.maps, transform)
    _check_consistency_inputs("ecr_loss", w_refined, camhat_t.maps, valid)
    _check_consistency_inputs("ecr_loss", w_original, y_t.maps, valid)
    term1 = _ohem_term(w_refined, camhat_t.maps, valid, ohem.keep_fraction)
    term2 = _ohem_term(w_original, y_t.maps, valid, ohem.keep_fraction)
    return T.add(term1, term2)


def total_loss(l_cls, l_er, l_ecr, weights=(1.0, 1.0, 1.0)):
    """Weighted components and their sum; default weights are all 1."""
    w_cls, w_er, w_ecr = (float(w) for w in weights)
    l_cls = T.scale(l_cls, w_cls)
    l_er = T.scale(l_er, w_er)
    l_ecr = T.scale(l_ecr, w_ecr)
    total = T.add(T.add(l_cls, l_er), l_ecr)
    return LossBundle(l_cls=l_cls, l_er=l_er, l_ecr=l_ecr, total=total)
