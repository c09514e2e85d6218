"""Parametric affine transformations applied to images and activation maps.

A transform is the composition flip -> rotate about center -> translate
-> scale, realized as a single inverse-mapped sampling pass. Coordinates
are pixel centers: pixel (i, j) sits at (x=j, y=i), the source domain is
[0, W-1] x [0, H-1].

Conventions fixed here:

* ``scale`` s resizes content by s; the output grid is round(s*H) x
  round(s*W) and output pixel p samples the source at p/s.
* positive ``rotation_deg`` rotates content counterclockwise in (x, y)
  coordinates (y pointing down the rows).
* ``translation_px`` (dx, dy) shifts the sampling window by (+dx, +dy):
  content moves toward smaller x and y, so a positive dx invalidates the
  rightmost dx columns.
* out-of-bounds samples read 0; :func:`warp_valid_mask` marks output
  pixels whose sample point lies fully inside the source.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError

__all__ = [
    "AffineTransform", "TransformConfig", "warp", "warp_valid_mask",
    "sample_transform", "resize_bilinear", "hflip_array",
]


@dataclass(frozen=True)
class AffineTransform:
    scale: float = 1.0
    rotation_deg: float = 0.0
    translation_px: tuple = (0, 0)
    hflip: bool = False

    def __post_init__(self):
        if self.scale <= 0:
            raise ParameterError(f"scale must be > 0, got {self.scale}")

    def is_identity(self):
        return (self.scale == 1.0 and self.rotation_deg == 0.0
                and tuple(self.translation_px) == (0, 0) and not self.hflip)

    def output_hw(self, h, w):
        oh = int(round(self.scale * h))
        ow = int(round(self.scale * w))
        if oh < 1 or ow < 1:
            raise ParameterError(
                f"transform scale {self.scale} collapses {h}x{w} to {oh}x{ow}")
        return oh, ow

    def inverse_matrix(self, h, w):
        """2x3 matrix taking output pixel (xo, yo, 1) to source (xs, ys).

        Inverse of the forward chain flip -> rotate -> translate -> scale.
        """
        def mat3(m):
            return np.asarray(m, dtype=np.float64)

        inv_scale = mat3([[1.0 / self.scale, 0, 0],
                          [0, 1.0 / self.scale, 0],
                          [0, 0, 1]])
        dx, dy = self.translation_px
        inv_trans = mat3([[1, 0, dx], [0, 1, dy], [0, 0, 1]])
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        phi = math.radians(self.rotation_deg)
        c, s = math.cos(phi), math.sin(phi)
        # rotate by -phi about (cx, cy)
        inv_rot = mat3([[c, s, cx - c * cx - s * cy],
                        [-s, c, cy + s * cx - c * cy]] + [[0, 0, 1]])
        inv_flip = mat3([[-1, 0, w - 1], [0, 1, 0], [0, 0, 1]]) if self.hflip \
            else np.eye(3)
        full = inv_flip @ inv_rot @ inv_trans @ inv_scale
        return full[:2]


def warp(maps, transform, sampling="bilinear"):
    """Warp [N,C,H,W] maps by ``transform``; out-of-bounds reads zero.

    Bilinear warps are linear in the map values and differentiable w.r.t.
    them (use nearest only for label masks).
    """
    maps = maps if isinstance(maps, T.Tensor) else T.Tensor(maps)
    h, w = maps.shape[2], maps.shape[3]
    if sampling == "bilinear" and (h < 2 or w < 2):
        raise ParameterError(f"bilinear warp needs H,W >= 2, got {h}x{w}")
    out_hw = transform.output_hw(h, w)
    mat = transform.inverse_matrix(h, w)
    return T.affine_sample(maps, mat, out_hw, mode=sampling)


def warp_valid_mask(transform, h, w):
    """[1,1,H',W'] float mask: 1 where the sample point is inside the source."""
    oh, ow = transform.output_hw(h, w)
    mat = transform.inverse_matrix(h, w)
    xo = np.arange(ow)
    yo = np.arange(oh)
    xs = mat[0, 0] * xo[None, :] + mat[0, 1] * yo[:, None] + mat[0, 2]
    ys = mat[1, 0] * xo[None, :] + mat[1, 1] * yo[:, None] + mat[1, 2]
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    return inside.astype(np.float64)[None, None]


def resize_bilinear(maps, out_hw):
    """Span-preserving bilinear resize of [N,C,H,W] to out_hw.

    Corner pixels map to corner pixels, so equal sizes give an exact
    identity. Accepts a Tensor (differentiable) or a plain array.
    """
    is_tensor = isinstance(maps, T.Tensor)
    t = maps if is_tensor else T.Tensor(maps)
    h, w = t.shape[2], t.shape[3]
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ParameterError(f"resize target must be positive, got {out_hw}")
    sx = (w - 1) / (ow - 1) if ow > 1 else 0.0
    sy = (h - 1) / (oh - 1) if oh > 1 else 0.0
    mat = np.array([[sx, 0.0, 0.0], [0.0, sy, 0.0]])
    out = T.affine_sample(t, mat, (oh, ow), mode="bilinear")
    return out if is_tensor else out.data


def hflip_array(arr):
    """Horizontal flip of [...,W] arrays (exact column reversal)."""
    return np.ascontiguousarray(arr[..., ::-1])


@dataclass(frozen=True)
class TransformConfig:
    """Which transform families the sampler may draw.

    ``rescale_rate`` is a fixed downsampling rate (not sampled);
    rotations are uniform in [-rotation_deg, rotation_deg]; translations
    pick one of the four axis directions at exactly ``translation_px``
    pixels; flips occur with probability 0.5 when enabled.
    """

    rescale_rate: float = None
    rotation_deg: float = None
    translation_px: int = None
    hflip: bool = False
    identity: bool = False

    def families(self):
        out = []
        if self.rescale_rate is not None:
            out.append("rescale")
        if self.rotation_deg is not None:
            out.append("rotation")
        if self.translation_px is not None:
            out.append("translation")
        if self.hflip:
            out.append("hflip")
        if self.identity:
            out.append("identity")
        return out

    @staticmethod
    def from_dict(d):
        return TransformConfig(
            rescale_rate=d.get("rescale_rate"),
            rotation_deg=d.get("rotation_deg"),
            translation_px=d.get("translation_px"),
            hflip=bool(d.get("hflip", False)),
            identity=bool(d.get("identity", False)),
        )

    def to_dict(self):
        return {
            "rescale_rate": self.rescale_rate,
            "rotation_deg": self.rotation_deg,
            "translation_px": self.translation_px,
            "hflip": self.hflip,
            "identity": self.identity,
        }


def sample_transform(config, rng_seed):
    """Draw one transform; deterministic for a given seed."""
    families = config.families()
    if not families:
        raise ParameterError("transform config enables no families")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    scale = 1.0
    rotation = 0.0
    translation = (0, 0)
    flip = False
    if config.rescale_rate is not None:
        if config.rescale_rate <= 0:
            raise ParameterError(f"rescale rate must be > 0, got {config.rescale_rate}")
        scale = float(config.rescale_rate)
    if config.rotation_deg is not None:
        rotation = float(rng.uniform(-config.rotation_deg, config.rotation_deg))
    if config.translation_px is not None:
        direction = int(rng.integers(4))
        px = int(config.translation_px)
        translation = [(px, 0), (-px, 0), (0, px), (0, -px)][direction]
    if config.hflip:
        flip = bool(rng.integers(2))
    return AffineTransform(scale=scale, rotation_deg=rotation,
                           translation_px=translation, hflip=flip)
