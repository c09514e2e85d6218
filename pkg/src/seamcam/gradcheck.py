"""Finite-difference verification of every differentiable operation.

Central differences with step 1e-5 at double precision, compared as
|analytic − numeric| / max(|analytic|, 1e-8). Sample points are drawn
away from non-smooth loci (ReLU/abs kinks, max ties, hard-example
selection boundaries), which the generators below guarantee by
construction. The end-to-end check runs the whole siamese loss graph on
a small batch and differentiates every parameter.
"""

import numpy as np

from . import tensor as T
from .affine import AffineTransform, TransformConfig, warp
from .attention import ClassicalAttentionParams, PcmParams, classical_attention_forward, pcm_forward
from .cam import CamStack, NORMALIZED_BG, normalize_with_background, rectify_and_scale
from .errors import NumericDomainError
from .losses import OhemConfig, ecr_loss, er_loss, multilabel_soft_margin
from .network import ModelDims, ToyBackbone, TrainConfig, siamese_losses

FD_STEP = 1e-5
PER_OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


def max_relative_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)
                        / np.maximum(np.abs(analytic), 1e-8)))


def fd_gradient(make_loss, param, indices=None, step=FD_STEP):
    """Central-difference gradient of make_loss() w.r.t. param elements."""
    flat = param.data.ravel()
    indices = list(range(flat.size)) if indices is None else list(indices)
    out = np.zeros(len(indices))
    for pos, i in enumerate(indices):
        saved = flat[i]
        flat[i] = saved + step
        up = make_loss().item()
        flat[i] = saved - step
        down = make_loss().item()
        flat[i] = saved
        out[pos] = (up - down) / (2.0 * step)
    return out, indices


def check_gradients(make_loss, params, max_points=120, seed=0):
    """Max relative error between backprop and finite differences.

    ``params`` maps names to leaf tensors; at most ``max_points`` random
    elements per tensor are probed.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    for p in params.values():
        p.zero_grad()
    loss = make_loss()
    loss.backward()
    worst = 0.0
    for name, p in params.items():
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
        size = p.data.size
        if size <= max_points:
            idx = list(range(size))
        else:
            idx = sorted(rng.choice(size, size=max_points, replace=False).tolist())
        numeric, idx = fd_gradient(make_loss, p, idx)
        worst = max(worst, max_relative_error(analytic[idx], numeric))
    return worst


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def _away_from_zero(rng, shape, margin=1e-2):
    """Uniform in [-1,-margin] U [margin,1]: keeps kinks out of FD reach."""
    signs = rng.choice([-1.0, 1.0], size=shape)
    return signs * rng.uniform(margin, 1.0, size=shape)


# ---------------------------------------------------------------------------
# individual op checks; each returns the max relative error

def _check_unary(op, data):
    x = T.Tensor(data, requires_grad=True)
    proj = _rng(7).normal(size=data.shape)

    def make_loss():
        return T.sum_reduce(T.mul(op(x), T.Tensor(proj)))

    return check_gradients(make_loss, {"x": x})


def check_elementwise():
    rng = _rng(11)
    out = {}
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(_away_from_zero(rng, (3, 4), margin=0.3), requires_grad=True)
    proj = rng.normal(size=(3, 4))

    def binary(op):
        def make_loss():
            return T.sum_reduce(T.mul(op(a, b), T.Tensor(proj)))
        return check_gradients(make_loss, {"a": a, "b": b})

    out["add"] = binary(T.add)
    out["sub"] = binary(T.sub)
    out["mul"] = binary(T.mul)
    out["div"] = binary(T.div)
    out["scalar_scale"] = _check_unary(lambda t: T.scale(t, 1.7),
                                       rng.normal(size=(3, 4)))
    out["relu"] = _check_unary(T.relu, _away_from_zero(rng, (4, 5)))
    out["abs"] = _check_unary(T.absolute, _away_from_zero(rng, (4, 5)))
    out["sigmoid"] = _check_unary(T.sigmoid, rng.normal(size=(4, 5)))
    out["exp"] = _check_unary(T.exp, rng.normal(size=(4, 5)))
    out["log"] = _check_unary(T.log, rng.uniform(0.2, 3.0, size=(4, 5)))
    out["log_sigmoid"] = _check_unary(T.log_sigmoid, rng.normal(size=(4, 5)))
    out["clip_min"] = _check_unary(lambda t: T.clip_min(t, 0.1),
                                   _away_from_zero(rng, (4, 5)) + 0.5)
    # distinct values keep the max unambiguous under the FD step
    base = rng.permutation(40).reshape(2, 4, 5) * 0.1
    out["max_reduce"] = _check_unary(lambda t: T.max_reduce(t, axis=(1, 2)), base)
    out["mean_reduce"] = _check_unary(lambda t: T.mean_reduce(t, axis=1),
                                      rng.normal(size=(3, 4)))
    out["concat_channel"] = _check_unary(
        lambda t: T.concat_channel([t, T.scale(t, 2.0)]),
        rng.normal(size=(2, 3, 2, 2)))
    out["bmm"] = _check_bmm(rng)
    return out


def _check_bmm(rng):
    a = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
    proj = rng.normal(size=(2, 3, 5))

    def make_loss():
        return T.sum_reduce(T.mul(T.bmm(a, b), T.Tensor(proj)))

    return check_gradients(make_loss, {"a": a, "b": b})


def check_conv2d():
    rng = _rng(13)
    x = T.Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    proj = rng.normal(size=(1, 3, 5, 5))

    def make_loss():
        return T.sum_reduce(T.mul(T.conv2d(x, w, stride=1, padding=1), T.Tensor(proj)))

    return check_gradients(make_loss, {"input": x, "kernel": w})


def check_global_average_pool():
    rng = _rng(17)
    x = T.Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    proj = rng.normal(size=(2, 3))

    def make_loss():
        return T.sum_reduce(T.mul(T.global_average_pool(x), T.Tensor(proj)))

    return check_gradients(make_loss, {"input": x})


def check_l2_normalize():
    rng = _rng(19)
    data = rng.normal(size=(2, 4, 3, 3))
    # keep vector norms well above epsilon so the branch is stable
    data += np.sign(data) * 0.2
    x = T.Tensor(data, requires_grad=True)
    proj = rng.normal(size=data.shape)

    def make_loss():
        return T.sum_reduce(T.mul(T.l2_normalize_channel(x), T.Tensor(proj)))

    return check_gradients(make_loss, {"input": x})


def check_warp():
    rng = _rng(23)
    x = T.Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
    t = AffineTransform(scale=0.75, rotation_deg=10.0, translation_px=(1, -1))
    proj = rng.normal(size=(1, 2, 6, 6))

    def make_loss():
        return T.sum_reduce(T.mul(warp(x, t), T.Tensor(proj)))

    return check_gradients(make_loss, {"map": x})


def check_stop_gradient():
    rng = _rng(29)
    x = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    y = T.sum_reduce(T.stop_gradient(x))
    assert not y.requires_grad
    # y = x * stop(x): dy/dx must equal the values of stop(x)
    x.zero_grad()
    T.sum_reduce(T.mul(x, T.stop_gradient(x))).backward()
    return max_relative_error(x.grad, x.data)


def check_pcm():
    rng = _rng(31)
    n, c, ce, cf, h, w = 1, 3, 4, 5, 2, 3
    feats = rng.normal(size=(n, cf, h, w))
    # reject embeddings whose pairwise cosines sit near the ReLU kink
    params = PcmParams.init(cf, ce, rng)
    for _ in range(100):
        emb = np.einsum("ec,ncij->neij", params.theta.data[:, :, 0, 0], feats)
        v = emb.reshape(ce, h * w)
        v = v / np.linalg.norm(v, axis=0, keepdims=True)
        cos = v.T @ v
        if np.abs(cos).min() > 5e-3:
            break
        params = PcmParams.init(cf, ce, rng)
    cam = T.Tensor(rng.uniform(0.05, 0.95, size=(n, c, h, w)), requires_grad=True)
    features = T.Tensor(feats, requires_grad=True)
    proj = rng.normal(size=(n, c, h, w))

    def make_loss():
        return T.sum_reduce(T.mul(pcm_forward(cam, features, params), T.Tensor(proj)))

    return check_gradients(make_loss, {"cam": cam, "features": features,
                                       "theta": params.theta})


def check_classical_attention():
    rng = _rng(37)
    n, c, ce, cf, h, w = 1, 2, 3, 4, 2, 2
    params = ClassicalAttentionParams.init(cf, ce, c, rng)
    cam = T.Tensor(rng.uniform(0.05, 0.95, size=(n, c, h, w)), requires_grad=True)
    features = T.Tensor(rng.normal(size=(n, cf, h, w)), requires_grad=True)
    proj = rng.normal(size=(n, c, h, w))

    def make_loss():
        return T.sum_reduce(T.mul(classical_attention_forward(cam, features, params),
                                  T.Tensor(proj)))

    return check_gradients(make_loss, {"cam": cam, "features": features,
                                       "theta": params.theta, "phi": params.phi,
                                       "g": params.g})


def check_losses():
    rng = _rng(41)
    out = {}
    z = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    label = (rng.uniform(size=(2, 3)) > 0.5).astype(np.float64)
    out["multilabel_soft_margin"] = check_gradients(
        lambda: multilabel_soft_margin(z, label), {"z": z})

    t = AffineTransform(scale=0.5)
    a = T.Tensor(rng.uniform(0.1, 0.9, size=(1, 3, 8, 8)), requires_grad=True)
    b = T.Tensor(rng.uniform(0.1, 0.9, size=(1, 3, 4, 4)), requires_grad=True)
    valid = np.ones((1, 1, 4, 4))

    def er():
        return er_loss(CamStack(a, NORMALIZED_BG), CamStack(b, NORMALIZED_BG), t, valid)

    out["er_loss"] = check_gradients(er, {"cam_o": a, "cam_t": b})

    yo = T.Tensor(rng.uniform(0.1, 0.9, size=(1, 3, 8, 8)), requires_grad=True)
    yt = T.Tensor(rng.uniform(0.1, 0.9, size=(1, 3, 4, 4)), requires_grad=True)

    def ecr():
        return ecr_loss(CamStack(yo, NORMALIZED_BG), CamStack(yt, NORMALIZED_BG),
                        CamStack(a, NORMALIZED_BG), CamStack(b, NORMALIZED_BG),
                        t, valid, OhemConfig(0.5))

    out["ecr_loss"] = check_gradients(
        ecr, {"y_o": yo, "y_t": yt, "camhat_o": a, "camhat_t": b})
    return out


def check_cam_normalization():
    rng = _rng(43)
    # distinct activations per pixel keep the argmax stable under FD
    data = rng.uniform(0.05, 0.95, size=(1, 3, 3, 3))
    data += rng.permutation(data.size).reshape(data.shape) * 1e-3
    x = T.Tensor(data, requires_grad=True)
    proj = rng.normal(size=(1, 4, 3, 3))

    def make_loss():
        stack = normalize_with_background(rectify_and_scale(x))
        return T.sum_reduce(T.mul(stack.maps, T.Tensor(proj)))

    return check_gradients(make_loss, {"head_output": x})


def tiny_dims(num_foreground=3):
    return ModelDims(stages=(4, 6, 8, 8), reducers=(3, 4), embed=6,
                     num_foreground=num_foreground)


def check_end_to_end(batch=2, size=16, seed=5):
    """FD over every parameter of the full siamese loss on a small batch."""
    rng = _rng(seed)
    dims = tiny_dims()
    model = ToyBackbone(dims=dims, seed=seed)
    # the zero-initialized head would make gradients vanish identically;
    # gradcheck needs a generic point
    head = model.params["head"]
    head.data = rng.uniform(-0.5, 0.5, size=head.data.shape)
    images = rng.uniform(size=(batch, 3, size, size))
    labels = (rng.uniform(size=(batch, dims.num_foreground)) > 0.5).astype(np.float64)
    cfg = TrainConfig(steps=10, batch_size=batch, seed=seed,
                      transform=TransformConfig(rescale_rate=0.5),
                      keep_fraction=0.2)
    transform = AffineTransform(scale=0.5)

    def make_loss():
        return siamese_losses(model, images, labels, transform, cfg).total

    return check_gradients(make_loss, model.params, max_points=40, seed=seed)


def run_all(end_to_end=True):
    """All checks; returns {name: max_rel_err} with 'end_to_end' last."""
    results = {}
    results.update(check_elementwise())
    results["conv2d"] = check_conv2d()
    results["global_average_pool"] = check_global_average_pool()
    results["l2_normalize_channel"] = check_l2_normalize()
    results["warp_bilinear"] = check_warp()
    results["stop_gradient"] = check_stop_gradient()
    results["pcm_forward"] = check_pcm()
    results["classical_attention"] = check_classical_attention()
    results.update(check_losses())
    results["cam_normalization"] = check_cam_normalization()
    if end_to_end:
        results["end_to_end"] = check_end_to_end()
    return results


def assert_all_pass(results):
    failures = []
    for name, err in results.items():
        tol = END_TO_END_TOL if name == "end_to_end" else PER_OP_TOL
        if not (err < tol):
            failures.append(f"{name}: {err:.3e} >= {tol:g}")
    if failures:
        raise NumericDomainError("gradient check failed: " + "; ".join(failures))
