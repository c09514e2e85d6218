"""Pixel correlation module and the classical self-attention variant.

The pixel correlation module (PCM) re-estimates each pixel's activation
vector as a weighted average of every pixel's activations, with weights
from ReLU-rectified cosine similarity of embedded features, L1-normalized
per row. There is no residual connection, so activation intensity is
preserved and outputs stay inside the convex hull of the inputs.

The classical variant keeps the softmax dot-product form with separate
query/key/value embeddings plus a residual connection; it exists as an
ablation alternative.

Affinities are computed over all H*W positions; maps here are small
enough that the quadratic cost is irrelevant, and the double-loop test
oracle in the test suite doubles as documentation of the semantics.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError

# rows whose total affinity falls below this are blended with an identity
# row; an all-zero embedding (affinity 0) then maps to itself exactly
DEGENERATE_ROW_THRESHOLD = 0.5


@dataclass
class PcmParams:
    """Single 1x1 embedding kernel [Ce, Cf, 1, 1] for the cosine affinity."""

    theta: T.Tensor

    @staticmethod
    def init(feature_channels, embed_channels, rng):
        bound = 1.0 / np.sqrt(feature_channels)
        k = rng.uniform(-bound, bound, size=(embed_channels, feature_channels, 1, 1))
        return PcmParams(theta=T.Tensor(k, requires_grad=True))


@dataclass
class ClassicalAttentionParams:
    """Query/key kernels (shared output dim) and a value kernel on CAM channels."""

    theta: T.Tensor
    phi: T.Tensor
    g: T.Tensor

    @staticmethod
    def init(feature_channels, embed_channels, cam_channels, rng):
        def kernel(cout, cin):
            bound = 1.0 / np.sqrt(cin)
            return T.Tensor(rng.uniform(-bound, bound, size=(cout, cin, 1, 1)),
                            requires_grad=True)
        return ClassicalAttentionParams(
            theta=kernel(embed_channels, feature_channels),
            phi=kernel(embed_channels, feature_channels),
            g=kernel(cam_channels, cam_channels),
        )


def assemble_features(image, shallow_a, shallow_b):
    """Concatenate (image, shallow_a, shallow_b) along channels.

    All three must already share spatial dimensions with the map being
    refined; the caller resizes the image down to map resolution.
    """
    for name, t in (("shallow_a", shallow_a), ("shallow_b", shallow_b)):
        if t.shape[2:] != image.shape[2:] or t.shape[0] != image.shape[0]:
            raise DimensionError(
                f"assemble_features: {name} {t.shape} does not match image {image.shape}")
    parts = [p for p in (image, shallow_a, shallow_b) if p.shape[1] > 0]
    if len(parts) == 1:
        return parts[0]
    return T.concat_channel(parts)


def _flatten_pixels(t):
    n, c, h, w = t.shape
    return T.reshape(t, (n, c, h * w))


def cosine_attention(camf, emb, epsilon=1e-5):
    """Fused affinity-weighted average: the hot core of the refinement module.

    camf: [N,C,P] values to mix, emb: [N,Ce,P] raw embeddings. Per pixel
    pair, a_ij = relu(cos(emb_i, emb_j)); w_ij = a_ij / sum_j a_ij;
    out_i = sum_j w_ij * camf_j. Rows with no affinity mass (zero
    embeddings) fall back to the identity row. One graph node: forward
    and backward are a handful of batched matmuls instead of a dozen
    elementwise passes over [N,P,P] temporaries.
    """
    e = emb.data
    norms = np.sqrt((e * e).sum(axis=1, keepdims=True))      # [N,1,P]
    denom = np.maximum(norms, epsilon)
    en = e / denom                                           # normalized
    scores = np.matmul(np.swapaxes(en, 1, 2), en)            # [N,P,P]
    mask = scores > 0.0
    aff = scores * mask
    row = aff.sum(axis=2)                                    # [N,P]
    fallback = row < DEGENERATE_ROW_THRESHOLD
    if fallback.any():
        idx = np.arange(row.shape[1])
        aff[:, idx, idx] += fallback
        row = row + fallback
    weights = aff / row[:, :, None]
    out = np.matmul(camf.data, np.swapaxes(weights, 1, 2))

    def grad_fn(g):
        gcam = gemb = None
        if camf.requires_grad:
            gcam = np.matmul(g, weights)
        if emb.requires_grad:
            gw = np.matmul(np.swapaxes(g, 1, 2), camf.data)  # [N,P,P]
            grow = -(gw * weights).sum(axis=2) / row         # [N,P]
            gs = (gw / row[:, :, None] + grow[:, :, None]) * mask
            gembn = np.matmul(en, gs + np.swapaxes(gs, 1, 2))
            live = norms > epsilon
            dot = (gembn * en).sum(axis=1, keepdims=True)
            gemb = np.where(live, (gembn - en * dot) / denom, gembn / epsilon)
        return gcam, gemb

    return T.make_op("cosine_attention", out, (camf, emb), grad_fn)


def pcm_forward(cam, features, params, epsilon=1e-5):
    """Refine cam [N,C,H,W] by ReLU-cosine affinity over embedded features.

    Per pixel pair (i, j): a_ij = relu(cos(x_i, x_j)) with x = theta(features);
    w_ij = a_ij / sum_j a_ij; out_i = sum_j w_ij * cam_j. No residual
    connection, so activation intensity is preserved.
    """
    if cam.shape[2:] != features.shape[2:] or cam.shape[0] != features.shape[0]:
        raise DimensionError(
            f"pcm_forward: cam {cam.shape} and features {features.shape} disagree")
    n, c, h, w = cam.shape
    emb = _flatten_pixels(T.conv2d(features, params.theta))  # [N,Ce,P]
    camf = _flatten_pixels(cam)                              # [N,C,P]
    out = cosine_attention(camf, emb, epsilon)
    return T.reshape(out, (n, c, h, w))


def classical_attention_forward(cam, features, params):
    """Softmax dot-product attention over cam with a residual connection.

    out_i = sum_j softmax_j(theta(x_i) . phi(x_j)) * g(cam)_j + cam_i,
    with the softmax computed per row under max subtraction (exact, since
    softmax is invariant to a per-row constant shift).
    """
    if cam.shape[2:] != features.shape[2:] or cam.shape[0] != features.shape[0]:
        raise DimensionError(
            f"classical_attention_forward: cam {cam.shape} and features "
            f"{features.shape} disagree")
    n, c, h, w = cam.shape
    q = _flatten_pixels(T.conv2d(features, params.theta))  # [N,Ce,P]
    k = _flatten_pixels(T.conv2d(features, params.phi))
    v = _flatten_pixels(T.conv2d(cam, params.g))           # [N,C,P]
    scores = T.bmm(T.transpose_last2(q), k)                # [N,P(i),P(j)]
    row_max = T.Tensor(scores.data.max(axis=2, keepdims=True))  # constant shift
    e = T.exp(T.sub(scores, row_max))
    norm = T.sum_reduce(e, axis=2, keepdims=True)
    agg = T.bmm(v, T.transpose_last2(e))                   # [N,C,P(i)]
    out = T.div(agg, T.reshape(norm, (n, 1, h * w)))
    return T.add(T.reshape(out, (n, c, h, w)), cam)
