"""Toy backbone, siamese wiring, optimizer, and the training loop.

The backbone is eight 3x3 conv+relu layers in four stages with channel
plan (16, 32, 64, 64) and x2 downsampling entering stages 2 and 3
(overall output stride 4). A bias-free 1x1 head maps the last stage to
one map per foreground class; global average pooling over those maps
yields the classification logits. Two 1x1 reducers tap stages 3 and 4
for the refinement module's feature assembly.

Both siamese branches read the same parameter store. The refinement
module consumes gradient-detached copies of the normalized maps and of
the assembled features, so cross-regularization gradients reach the
trunk only through the original (non-refined) stacks, and reach the
refinement embedding directly.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .affine import TransformConfig, resize_bilinear, sample_transform, warp, warp_valid_mask
from .attention import PcmParams, assemble_features, pcm_forward
from .cam import CamStack, normalize_with_background, rectify_and_scale
from .errors import ConfigError, DimensionError, NumericDomainError, ParameterError
from .losses import LossBundle, OhemConfig, classification_loss, ecr_loss, er_loss, total_loss

# SeedSequence stream tags: keep distinct RNG streams independent
_STREAM_INIT = 0
_STREAM_EPOCH = 1
_STREAM_TRANSFORM = 2


@dataclass(frozen=True)
class ModelDims:
    stages: tuple = (16, 32, 64, 64)
    reducers: tuple = (8, 16)
    embed: int = 32
    num_foreground: int = 3
    in_channels: int = 3
    stride: int = 4

    def describe(self):
        return (f"stages={','.join(map(str, self.stages))};"
                f"reducers={','.join(map(str, self.reducers))};"
                f"embed={self.embed};fg={self.num_foreground}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr_init: float = 0.01
    poly_gamma: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    keep_fraction: float = 0.2
    loss_weights: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    transform: TransformConfig = field(
        default_factory=lambda: TransformConfig(rescale_rate=0.3))
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ParameterError(f"lr_init must be > 0, got {self.lr_init}")
        if self.poly_gamma <= 0:
            raise ParameterError(f"poly_gamma must be > 0, got {self.poly_gamma}")
        if self.steps < 1 or self.batch_size < 1:
            raise ParameterError("steps and batch_size must be >= 1")


MODE_WEIGHTS = {
    "baseline": (1.0, 0.0, 0.0),
    "er": (1.0, 1.0, 0.0),
    "seam": (1.0, 1.0, 1.0),
}


def _rng(seed, stream, index=0):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=[int(seed), stream, int(index)])))


class ToyBackbone:
    """Parameter store plus forward pass; weights shared by both branches."""

    def __init__(self, dims=ModelDims(), seed=0):
        self.dims = dims
        self.params = {}
        rng = _rng(seed, _STREAM_INIT)
        c_prev = dims.in_channels
        for si, c_out in enumerate(dims.stages, start=1):
            self._add_conv(f"stage{si}.conv1", c_out, c_prev, 3, rng)
            self._add_conv(f"stage{si}.conv2", c_out, c_out, 3, rng)
            c_prev = c_out
        # head starts at zero so the initial maps are neutral
        self.params["head"] = T.Tensor(
            np.zeros((dims.num_foreground, dims.stages[3], 1, 1)), requires_grad=True)
        self._add_conv("reduce3", dims.reducers[0], dims.stages[2], 1, rng)
        self._add_conv("reduce4", dims.reducers[1], dims.stages[3], 1, rng)
        feat_ch = dims.in_channels + dims.reducers[0] + dims.reducers[1]
        self.pcm = PcmParams.init(feat_ch, dims.embed, rng)
        self.params["pcm.theta"] = self.pcm.theta

    def _add_conv(self, name, c_out, c_in, k, rng):
        bound = 1.0 / math.sqrt(c_in * k * k)
        data = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        self.params[name] = T.Tensor(data, requires_grad=True)

    def trunk_parameters(self):
        return {k: v for k, v in self.params.items() if k != "pcm.theta"}

    def load_state(self, tensors):
        for name, param in self.params.items():
            if name not in tensors:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            if tensors[name].shape != param.data.shape:
                raise ConfigError(
                    f"checkpoint parameter {name!r} has shape {tensors[name].shape}, "
                    f"model expects {param.data.shape}")
            param.data = np.ascontiguousarray(tensors[name], dtype=np.float64)

    def state(self):
        return {name: p.data for name, p in self.params.items()}


@dataclass
class BranchOutputs:
    cam_raw: T.Tensor          # head output [N,C-1,h,w]
    z: T.Tensor                # pooled logits [N,C-1]
    cam_norm: CamStack         # normalized_bg [N,C,h,w]
    pcm_out: CamStack = None   # refined normalized_bg, when requested


def forward_branch(model, image, compute_pcm=True):
    """One branch: trunk, head, normalization, optional refinement."""
    h, w = image.shape[2], image.shape[3]
    stride = model.dims.stride
    if h % stride or w % stride:
        raise DimensionError(
            f"input {h}x{w} not divisible by output stride {stride}")
    p = model.params
    image = image if isinstance(image, T.Tensor) else T.Tensor(image)
    x = image
    acts = {}
    for si in range(1, 5):
        s = 2 if si in (2, 3) else 1
        x = T.relu(T.conv2d(x, p[f"stage{si}.conv1"], stride=s, padding=1))
        x = T.relu(T.conv2d(x, p[f"stage{si}.conv2"], stride=1, padding=1))
        acts[si] = x
    cam_raw = T.conv2d(acts[4], p["head"])
    z = T.global_average_pool(cam_raw)
    cam_norm = normalize_with_background(rectify_and_scale(cam_raw))
    pcm_out = None
    if compute_pcm:
        map_hw = (cam_raw.shape[2], cam_raw.shape[3])
        img_small = resize_bilinear(image, map_hw)
        feats = assemble_features(
            img_small,
            T.conv2d(acts[3], p["reduce3"]),
            T.conv2d(acts[4], p["reduce4"]),
        )
        refined = pcm_forward(T.stop_gradient(cam_norm.maps),
                              T.stop_gradient(feats), model.pcm)
        pcm_out = CamStack(refined, cam_norm.kind)
    return BranchOutputs(cam_raw=cam_raw, z=z, cam_norm=cam_norm, pcm_out=pcm_out)


def snap_transform_for_images(t, h, w, stride):
    """Adjust the scale so warped images stay divisible by the stride.

    round(scale*H) is snapped to the nearest positive multiple of the
    stride and the scale recomputed, so the same transform applies
    exactly at both image and map resolution.
    """
    if t.scale == 1.0:
        return t
    if h != w:
        raise ParameterError("siamese rescaling expects square inputs")
    target = int(round(t.scale * h))
    snapped = max(stride, int(round(target / stride)) * stride)
    return replace(t, scale=snapped / h)


def transform_at_map_resolution(t, stride):
    """The image-space transform expressed in map coordinates."""
    dx, dy = t.translation_px
    return replace(t, translation_px=(dx / stride, dy / stride))


def siamese_step(model, images, labels, transform, cfg, velocities, lr):
    """One optimization step over both branches; returns the loss bundle.

    Branch O consumes the images as-is, branch T the warped images; both
    share ``model``'s parameters. Applies SGD with the given lr.
    """
    if images.shape[0] == 0:
        raise ParameterError("siamese_step: empty batch")
    bundle = siamese_losses(model, images, labels, transform, cfg)
    if not math.isfinite(bundle.total.item()):
        raise NumericDomainError(f"non-finite loss: {bundle.values()}")
    for param in model.params.values():
        param.zero_grad()
    bundle.total.backward()
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in model.params.items()}
    sgd_update(model.params, grads, lr=lr, momentum=cfg.momentum,
               weight_decay=cfg.weight_decay, velocities=velocities)
    return bundle


def siamese_losses(model, images, labels, transform, cfg):
    """Loss bundle for one batch (no parameter update)."""
    w_cls, w_er, w_ecr = cfg.loss_weights
    stride = model.dims.stride
    need_pcm = w_ecr != 0.0
    h, w = images.shape[2], images.shape[3]
    t_img = snap_transform_for_images(transform, h, w, stride)
    images_t = warp(T.Tensor(images), t_img).data

    out_o = forward_branch(model, T.Tensor(images), compute_pcm=need_pcm)
    out_t = forward_branch(model, T.Tensor(images_t), compute_pcm=need_pcm)

    l_cls = classification_loss(out_o.z, out_t.z, labels)
    zero = T.Tensor(0.0)
    l_er, l_ecr = zero, zero
    if w_er != 0.0 or w_ecr != 0.0:
        t_map = transform_at_map_resolution(t_img, stride)
        map_h, map_w = out_o.cam_norm.shape[2], out_o.cam_norm.shape[3]
        valid = warp_valid_mask(t_map, map_h, map_w)
        if w_er != 0.0:
            l_er = er_loss(out_o.cam_norm, out_t.cam_norm, t_map, valid)
        if w_ecr != 0.0:
            l_ecr = ecr_loss(out_o.pcm_out, out_t.pcm_out,
                             out_o.cam_norm, out_t.cam_norm,
                             t_map, valid, OhemConfig(cfg.keep_fraction))
    return total_loss(l_cls, l_er, l_ecr, weights=cfg.loss_weights)


def poly_lr(itr, max_itr, lr_init, gamma):
    """lr_init * (1 - itr/max_itr) ** gamma."""
    if itr < 0 or itr > max_itr:
        raise ParameterError(f"itr {itr} outside [0, {max_itr}]")
    return lr_init * (1.0 - itr / max_itr) ** gamma


def sgd_update(params, grads, lr, momentum, weight_decay, velocities):
    """v = momentum*v + g + wd*p; p -= lr*v. Updates params in place."""
    for name in params:
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + g + weight_decay * p.data
        velocities[name] = v
        p.data -= lr * v


def batch_indices(step, n_samples, batch_size, seed):
    """Deterministic batch for a given step: per-epoch seeded shuffles."""
    per_epoch = max(n_samples // batch_size, 1)
    epoch = step // per_epoch
    slot = step % per_epoch
    perm = _rng(seed, _STREAM_EPOCH, epoch).permutation(n_samples)
    return perm[slot * batch_size:(slot + 1) * batch_size]


def transform_for_step(cfg, step):
    """Per-step transform, a pure function of (seed, step) for resumability."""
    seq = np.random.SeedSequence(entropy=[int(cfg.seed), _STREAM_TRANSFORM, int(step)])
    return sample_transform(cfg.transform, int(seq.generate_state(1)[0]))
