"""Class-activation-map construction, normalization, and fusion.

A :class:`CamStack` is either ``raw_foreground`` (one rectified map per
foreground class) or ``normalized_bg`` (per pixel, only the strongest
foreground activation survives; a background channel holding one minus
the pre-suppression maximum is prepended at index 0).

Tie-breaking is deterministic everywhere: equal foreground activations
keep the lowest class index, and pseudo-labels prefer background on
exact ties with the threshold.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .affine import hflip_array, resize_bilinear
from .errors import DimensionError, ParameterError

RAW_FOREGROUND = "raw_foreground"
NORMALIZED_BG = "normalized_bg"

EPSILON = 1e-5


@dataclass
class CamStack:
    maps: T.Tensor
    kind: str

    def __post_init__(self):
        if self.kind not in (RAW_FOREGROUND, NORMALIZED_BG):
            raise ParameterError(f"unknown CamStack kind {self.kind!r}")
        if not isinstance(self.maps, T.Tensor):
            self.maps = T.Tensor(self.maps)
        if self.maps.data.ndim != 4:
            raise DimensionError(f"CamStack maps must be [N,C,H,W], got {self.maps.shape}")

    @property
    def data(self):
        return self.maps.data

    @property
    def shape(self):
        return self.maps.shape


@dataclass(frozen=True)
class InferenceConfig:
    alpha: float = 0.45
    scales: tuple = (0.5, 1.0, 1.5, 2.0)
    use_flip: bool = True

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ParameterError(f"alpha must lie in (0,1), got {self.alpha}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ParameterError(f"scales must be non-empty and positive, got {self.scales}")


def rectify_and_scale(raw_head_output):
    """ReLU then per-image, per-class division by the spatial max.

    Maps the head output into [0,1]; each class map that activates
    anywhere peaks at exactly 1, all-negative maps become all zero.
    """
    maps = raw_head_output if isinstance(raw_head_output, T.Tensor) \
        else T.Tensor(raw_head_output)
    pos = T.relu(maps)
    peak = T.clip_min(T.max_reduce(pos, axis=(2, 3), keepdims=True), EPSILON)
    return CamStack(T.div(pos, peak), RAW_FOREGROUND)


def normalize_with_background(cam):
    """Suppress non-maximum foreground per pixel and prepend background.

    Background = 1 - (pre-suppression max over foreground). Ties keep the
    lowest class index, so at most one foreground channel stays nonzero.
    """
    if cam.kind != RAW_FOREGROUND:
        raise ParameterError("normalize_with_background expects a raw_foreground stack")
    maps = cam.maps
    peak = T.max_reduce(maps, axis=1, keepdims=True)        # [N,1,H,W]
    keep = (maps.data == peak.data)
    keep &= np.cumsum(keep, axis=1) == 1                    # first argmax only
    fg = T.mul(maps, T.Tensor(keep.astype(np.float64)))
    bkg = T.add(T.scale(peak, -1.0), 1.0)
    return CamStack(T.concat_channel([bkg, fg]), NORMALIZED_BG)


def pseudo_label(cam, image_label, alpha):
    """Thresholded argmax over (background=alpha, present-class activations).

    Classes absent from the image-level label are zeroed first. Ties go
    to background, then to the lowest class index. Returns int64
    [N,H,W] masks with 0 = background and c = foreground class c.
    """
    if not (0.0 < alpha < 1.0):
        raise ParameterError(f"alpha must lie in (0,1), got {alpha}")
    if cam.kind != RAW_FOREGROUND:
        raise ParameterError("pseudo_label expects a raw_foreground stack")
    data = cam.data
    n, c, h, w = data.shape
    label = np.asarray(image_label, dtype=np.float64).reshape(n, c)
    scores = np.empty((n, c + 1, h, w))
    scores[:, 0] = alpha
    scores[:, 1:] = data * label[:, :, None, None]
    # argmax returns the first maximum: background wins exact ties, then
    # lower class indices
    return scores.argmax(axis=1).astype(np.int64)


def fuse_multiscale(per_scale_cams, target_hw, flipped_cams=None):
    """Average per-scale stacks at a common size, then re-max-normalize.

    ``flipped_cams``, when given, are stacks computed from horizontally
    flipped inputs (one per entry of ``per_scale_cams``); they are
    flipped back before entering the average.
    """
    if not per_scale_cams:
        raise ParameterError("fuse_multiscale needs at least one stack")
    for s in per_scale_cams:
        if isinstance(s, CamStack) and s.kind != RAW_FOREGROUND:
            raise ParameterError("fuse_multiscale expects raw_foreground stacks")
    stacks = [s.data if isinstance(s, CamStack) else np.asarray(s, dtype=np.float64)
              for s in per_scale_cams]
    if flipped_cams is not None:
        if len(flipped_cams) != len(stacks):
            raise ParameterError(
                f"flipped stack count {len(flipped_cams)} != scale count {len(stacks)}")
        stacks += [hflip_array(s.data if isinstance(s, CamStack) else np.asarray(s))
                   for s in flipped_cams]
    resized = [resize_bilinear(s, target_hw) for s in stacks]
    mean = np.mean(resized, axis=0)
    peak = np.maximum(mean.max(axis=(2, 3), keepdims=True), EPSILON)
    return CamStack(T.Tensor(mean / peak), RAW_FOREGROUND)


def export_cam(path_prefix, stack, image_id, classes_present, alpha):
    """Write one stack to ``<prefix>.bin`` plus a text sidecar manifest."""
    from . import tensorfile
    tensorfile.save_tensor(f"{path_prefix}.bin", stack.data, version=1)
    lines = [
        f"image_id={image_id}",
        f"kind={stack.kind}",
        "classes_present=" + ",".join(str(c) for c in classes_present),
        f"alpha={alpha!r}",
    ]
    with open(f"{path_prefix}.txt", "w") as fp:
        fp.write("\n".join(lines) + "\n")
