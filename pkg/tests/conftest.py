import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def scalar_bilinear(src, ys, xs):
    """Independent per-pixel bilinear formula with zero outside the source.

    src: [H,W] for one channel; (ys, xs) a real-valued sample point.
    """
    h, w = src.shape
    y0, x0 = int(np.floor(ys)), int(np.floor(xs))
    total = 0.0
    for dy in (0, 1):
        for dx in (0, 1):
            yy, xx = y0 + dy, x0 + dx
            wy = (1.0 - abs(ys - yy))
            wx = (1.0 - abs(xs - xx))
            if 0 <= yy < h and 0 <= xx < w and wy > 0 and wx > 0:
                total += wy * wx * src[yy, xx]
    return total


def pcm_oracle(cam, features, theta, epsilon=1e-5):
    """Literal double-loop of the refinement rule (the documented semantics)."""
    n, c, h, w = cam.shape
    ce = theta.shape[0]
    out = np.zeros_like(cam)
    for b in range(n):
        emb = np.zeros((h * w, ce))
        for i in range(h * w):
            vec = features[b, :, i // w, i % w]
            emb[i] = theta[:, :, 0, 0] @ vec
        for i in range(h * w):
            aff = np.zeros(h * w)
            for j in range(h * w):
                denom = max(np.linalg.norm(emb[i]), epsilon) * \
                    max(np.linalg.norm(emb[j]), epsilon)
                aff[j] = max(emb[i] @ emb[j] / denom, 0.0)
            total = aff.sum()
            if total < 0.5:
                aff[i] += 1.0
                total += 1.0
            weights = aff / total
            for ch in range(c):
                value = 0.0
                for j in range(h * w):
                    value += weights[j] * cam[b, ch, j // w, j % w]
                out[b, ch, i // w, i % w] = value
    return out


def classical_attention_oracle(cam, features, theta, phi, g):
    """Double-loop softmax attention with residual, computed naively."""
    n, c, h, w = cam.shape
    out = np.zeros_like(cam)
    for b in range(n):
        q = np.einsum("ec,chw->ehw", theta[:, :, 0, 0], features[b])
        k = np.einsum("ec,chw->ehw", phi[:, :, 0, 0], features[b])
        v = np.einsum("dc,chw->dhw", g[:, :, 0, 0], cam[b])
        qf = q.reshape(-1, h * w)
        kf = k.reshape(-1, h * w)
        vf = v.reshape(-1, h * w)
        for i in range(h * w):
            f = np.array([np.exp(qf[:, i] @ kf[:, j]) for j in range(h * w)])
            weights = f / f.sum()
            for ch in range(c):
                out[b, ch, i // w, i % w] = weights @ vf[ch] + cam[b, ch, i // w, i % w]
    return out
