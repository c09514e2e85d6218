"""Cross-backend agreement: the compiled kernels must match the numpy
reference bit-for-practical-purposes on every supported configuration."""

import numpy as np
import pytest

from seamcam._kernels import BACKEND, available_backends

BACKENDS = available_backends()
needs_native = pytest.mark.skipif("native" not in BACKENDS,
                                  reason="native backend not built")

CONV_CASES = [
    # (n, cin, h, w, cout, kh, kw, stride, pad)
    (1, 1, 5, 5, 1, 3, 3, 1, 1),
    (2, 3, 9, 7, 4, 3, 3, 1, 1),
    (2, 3, 9, 7, 4, 3, 3, 2, 1),
    (1, 4, 8, 8, 2, 1, 1, 1, 0),
    (3, 2, 10, 10, 5, 5, 5, 3, 2),
    (1, 2, 6, 6, 3, 2, 4, 2, 0),
]


def test_default_backend_is_selected():
    assert BACKEND in BACKENDS


@needs_native
@pytest.mark.parametrize("case", CONV_CASES)
def test_conv_backends_agree(case, rng):
    n, cin, h, w, cout, kh, kw, stride, pad = case
    x = rng.normal(size=(n, cin, h, w))
    k = rng.normal(size=(cout, cin, kh, kw))
    ref = BACKENDS["numpy"]
    nat = BACKENDS["native"]
    fwd_ref = ref.conv2d_forward(x, k, stride, pad)
    fwd_nat = nat.conv2d_forward(x, k, stride, pad)
    assert fwd_ref.shape == fwd_nat.shape
    assert np.abs(fwd_ref - fwd_nat).max() < 1e-12
    gy = rng.normal(size=fwd_ref.shape)
    assert np.abs(ref.conv2d_grad_input(k, gy, x.shape, stride, pad)
                  - nat.conv2d_grad_input(k, gy, x.shape, stride, pad)).max() < 1e-12
    assert np.abs(ref.conv2d_grad_kernel(x, gy, k.shape, stride, pad)
                  - nat.conv2d_grad_kernel(x, gy, k.shape, stride, pad)).max() < 1e-12


@needs_native
@pytest.mark.parametrize("nearest", [False, True])
def test_sampling_backends_agree(nearest, rng):
    src = rng.normal(size=(2, 3, 8, 9))
    mats = [
        np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        np.array([[2.0, 0.0, -1.0], [0.0, 2.0, -1.0]]),
        np.array([[0.7, 0.2, 1.3], [-0.1, 0.8, 0.4]]),
    ]
    for mat in mats:
        a = BACKENDS["numpy"].sample_forward(src, mat, 6, 5, nearest)
        b = BACKENDS["native"].sample_forward(src, mat, 6, 5, nearest)
        assert np.abs(a - b).max() < 1e-13
        if not nearest:
            gy = rng.normal(size=(2, 3, 6, 5))
            ga = BACKENDS["numpy"].sample_grad_input(mat, gy, src.shape)
            gb = BACKENDS["native"].sample_grad_input(mat, gy, src.shape)
            assert np.abs(ga - gb).max() < 1e-13


def test_numpy_conv_against_direct_loops(rng):
    """The reference backend itself, checked against seven nested loops."""
    n, cin, h, w, cout, kh, kw, stride, pad = 2, 2, 6, 5, 3, 3, 3, 2, 1
    x = rng.normal(size=(n, cin, h, w))
    k = rng.normal(size=(cout, cin, kh, kw))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    expected = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += k[co, ci, di, dj] * \
                                    xp[b, ci, i * stride + di, j * stride + dj]
                    expected[b, co, i, j] = acc
    got = BACKENDS["numpy"].conv2d_forward(x, k, stride, pad)
    assert np.abs(got - expected).max() < 1e-12
