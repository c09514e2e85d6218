"""Pure-numpy kernel backend.

Reference implementation of the hot inner loops: 2-D convolution
(forward plus both gradients) and affine grid sampling. The native
Cython backend in ``_native.pyx`` mirrors these semantics exactly; the
cross-backend agreement test keeps the two in lock step.

Convolutions are evaluated position-by-position over the kernel window
so that each step is one BLAS matmul on a strided slice. This avoids
materialising the full im2col buffer in Python.
"""

import numpy as np

NAME = "numpy"


def conv2d_forward(x, w, stride, pad):
    """x: [N,Cin,H,W], w: [Cout,Cin,kh,kw] -> [N,Cout,Ho,Wo]."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = x if pad == 0 else np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, cout, ho, wo))
    out2 = out.reshape(n, cout, ho * wo)
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            xs = np.ascontiguousarray(xs).reshape(n, cin, ho * wo)
            # [Cout,Cin] @ [N,Cin,P] broadcasts to [N,Cout,P]
            out2 += np.matmul(w[:, :, di, dj], xs)
    return out


def conv2d_grad_input(w, gy, x_shape, stride, pad):
    """Gradient of conv2d w.r.t. the data input."""
    n, cin, h, wd = x_shape
    cout, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    gy2 = gy.reshape(n, cout, ho * wo)
    for di in range(kh):
        for dj in range(kw):
            # [Cin,Cout] @ [N,Cout,P] -> [N,Cin,P]
            contrib = np.matmul(w[:, :, di, dj].T, gy2).reshape(n, cin, ho, wo)
            gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += contrib
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])


def conv2d_grad_kernel(x, gy, w_shape, stride, pad):
    """Gradient of conv2d w.r.t. the kernel."""
    cout, cin, kh, kw = w_shape
    ho, wo = gy.shape[2], gy.shape[3]
    xp = x if pad == 0 else np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gw = np.zeros(w_shape)
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            gw[:, :, di, dj] = np.tensordot(gy, xs, axes=([0, 2, 3], [0, 2, 3]))
    return gw


def _grid(mat, out_h, out_w):
    """Source coordinates for each output pixel under the 2x3 inverse map."""
    xo = np.arange(out_w)
    yo = np.arange(out_h)
    xs = mat[0, 0] * xo[None, :] + mat[0, 1] * yo[:, None] + mat[0, 2]
    ys = mat[1, 0] * xo[None, :] + mat[1, 1] * yo[:, None] + mat[1, 2]
    return xs, ys


def sample_forward(src, mat, out_h, out_w, nearest):
    """Inverse-mapped sampling of src: [N,C,H,W] -> [N,C,out_h,out_w].

    Out-of-bounds samples read zero. ``mat`` maps output pixel (xo, yo)
    to source coordinates (xs, ys) = mat @ (xo, yo, 1).
    """
    n, c, h, w = src.shape
    xs, ys = _grid(mat, out_h, out_w)
    flat = src.reshape(n, c, h * w)
    if nearest:
        xr = np.rint(xs).astype(np.int64)
        yr = np.rint(ys).astype(np.int64)
        inb = (xr >= 0) & (xr < w) & (yr >= 0) & (yr < h)
        idx = np.clip(yr, 0, h - 1) * w + np.clip(xr, 0, w - 1)
        return flat[:, :, idx] * inb
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros((n, c, out_h, out_w))
    for yi, xi, wt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ):
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        out += flat[:, :, idx] * (wt * inb)
    return out


def sample_grad_input(mat, gy, src_shape):
    """Gradient of bilinear sample_forward w.r.t. src (scatter of the 4 taps)."""
    n, c, h, w = src_shape
    out_h, out_w = gy.shape[2], gy.shape[3]
    xs, ys = _grid(mat, out_h, out_w)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0).ravel()
    fy = (ys - y0).ravel()
    x0 = x0.ravel()
    y0 = y0.ravel()
    g2 = gy.reshape(n * c, out_h * out_w)
    gsrc = np.zeros((n * c, h * w))
    for yi, xi, wt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ):
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        np.add.at(gsrc, (slice(None), idx), g2 * (wt * inb))
    return gsrc.reshape(src_shape)
