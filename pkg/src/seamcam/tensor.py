"""Minimal reverse-mode autodiff engine.

Every differentiable quantity in the training graph is a :class:`Tensor`
holding a dense float64 numpy array. Operations record creator nodes;
:func:`backward` assembles the reachable subgraph into a :class:`Graph`
(topologically ordered op records) and sweeps it in exact reverse order,
accumulating gradients into ``requires_grad`` leaves.

Design constraints, fixed once here:

* float64 throughout, dense row-major storage, no views or strides;
* ReLU and abs use subgradient 0 at the kink;
* max reductions route gradient to the first maximum in row-major order
  of the reduced axes (deterministic tie-breaking);
* a graph may be swept once; a second ``backward`` without ``reset`` is
  rejected.
"""

import numpy as np

from . import _kernels
from .errors import DimensionError, GraphError, NumericDomainError, ParameterError

__all__ = [
    "Tensor", "Graph", "Node", "backward",
    "add", "sub", "mul", "div", "scale", "relu", "sigmoid", "exp", "log",
    "log_sigmoid", "absolute", "clip_min", "max_reduce", "sum_reduce",
    "mean_reduce", "concat_channel", "slice_channel", "reshape",
    "transpose_last2", "bmm", "conv2d", "global_average_pool",
    "l2_normalize_channel", "affine_sample", "stop_gradient",
]


def _as_array(values):
    # ascontiguousarray would promote 0-d scalars to 1-d; keep their shape
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense float64 array participating in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None  # creator record; None for leaves

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return stop_gradient(self)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    # operator sugar; scalars are python floats
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Node:
    """One op record: kind, input tensors, and the gradient rule."""

    __slots__ = ("op", "inputs", "grad_fn", "out_shape", "consumed")

    def __init__(self, op, inputs, grad_fn, out_shape):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn  # grad_out -> tuple of per-input grads (or None)
        self.out_shape = out_shape
        self.consumed = False


def make_op(op, out_data, inputs, grad_fn):
    """Record a custom differentiable op.

    ``grad_fn`` maps the output gradient to one gradient (or None) per
    input; it runs once per backward sweep.
    """
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), grad_fn, out.data.shape)
    return out


_make = make_op


def _coerce(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", out, (a, b), grad_fn)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", out, (a, b), grad_fn)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "mul")
    out = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make("mul", out, (a, b), grad_fn)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _make("div", out, (a, b), grad_fn)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)

    def grad_fn(g):
        return (g * s,)

    return _make("scale", a.data * s, (a,), grad_fn)


def relu(a):
    mask = a.data > 0  # subgradient 0 at the kink

    def grad_fn(g):
        return (g * mask,)

    return _make("relu", a.data * mask, (a,), grad_fn)


def sigmoid(a):
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (a,), grad_fn)


def exp(a):
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _make("exp", out, (a,), grad_fn)


def log(a):
    if np.any(a.data <= 0):
        bad = float(a.data.min())
        raise NumericDomainError(f"log: non-positive input (min {bad})")
    out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _make("log", out, (a,), grad_fn)


def log_sigmoid(a):
    """log(sigmoid(x)) evaluated stably as -softplus(-x)."""
    x = a.data
    e = np.exp(-np.abs(x))
    out = -(np.maximum(-x, 0.0) + np.log1p(e))
    sig_neg = np.where(x >= 0, e / (1.0 + e), 1.0 / (1.0 + e))

    def grad_fn(g):
        return (g * sig_neg,)  # d/dx log sigma(x) = sigma(-x)

    return _make("log_sigmoid", out, (a,), grad_fn)


def absolute(a):
    sign = np.sign(a.data)  # 0 at 0: subgradient 0 at the kink

    def grad_fn(g):
        return (g * sign,)

    return _make("abs", np.abs(a.data), (a,), grad_fn)


def clip_min(a, lo):
    """Elementwise max(a, lo); gradient passes only where a > lo."""
    lo = float(lo)
    mask = a.data > lo

    def grad_fn(g):
        return (g * mask,)

    return _make("clip_min", np.maximum(a.data, lo), (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_reduce(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make("sum_reduce", out, (a,), grad_fn)


def mean_reduce(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _make("mean_reduce", out, (a,), grad_fn)


def max_reduce(a, axis, keepdims=False):
    """Max over ``axis``; gradient routes to the first maximum (row-major)."""
    axes = _norm_axes(axis, a.data.ndim)
    moved = np.moveaxis(a.data, axes, range(a.data.ndim - len(axes), a.data.ndim))
    lead = moved.shape[:a.data.ndim - len(axes)]
    flat = moved.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_full = out.reshape([1 if i in axes else s for i, s in enumerate(a.data.shape)])
    result = out_full if keepdims else out_full.reshape(
        [s for i, s in enumerate(a.data.shape) if i not in axes])

    def grad_fn(g):
        gg = g if keepdims else g.reshape(out_full.shape)
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
        onehot = np.moveaxis(
            onehot.reshape(moved.shape),
            range(a.data.ndim - len(axes), a.data.ndim), axes)
        return (onehot * gg,)

    return _make("max_reduce", result, (a,), grad_fn)


def concat_channel(parts):
    """Concatenate [N,C_i,H,W] tensors along the channel axis."""
    parts = [_coerce(p) for p in parts]
    base = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(base) or s[0] != base[0] or s[2:] != base[2:]:
            raise DimensionError(
                f"concat_channel: {s} incompatible with {base} outside axis 1")
    sizes = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(np.ascontiguousarray(g[:, bounds[i]:bounds[i + 1]])
                     for i in range(len(parts)))

    return _make("concat_channel", out, tuple(parts), grad_fn)


def slice_channel(a, start, stop):
    """a[:, start:stop] with zero-padded gradient."""
    out = np.ascontiguousarray(a.data[:, start:stop])

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _make("slice_channel", out, (a,), grad_fn)


def reshape(a, shape):
    out = a.data.reshape(shape).copy()

    def grad_fn(g):
        return (g.reshape(a.data.shape),)

    return _make("reshape", out, (a,), grad_fn)


def transpose_last2(a):
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))

    def grad_fn(g):
        return (np.ascontiguousarray(np.swapaxes(g, -1, -2)),)

    return _make("transpose_last2", out, (a,), grad_fn)


def bmm(a, b):
    """Batched matmul: [N,P,K] @ [N,K,Q] -> [N,P,Q]."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[2] != b.data.shape[1] \
            or a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(f"bmm: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make("bmm", out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# spatial ops

def conv2d(x, w, stride=1, padding=0):
    """2-D convolution (cross-correlation), no bias.

    x: [N,Cin,H,W], w: [Cout,Cin,kh,kw]. Output spatial size is
    floor((H + 2*padding - kh)/stride) + 1, analogously for W.
    """
    if stride < 1:
        raise ParameterError(f"conv2d: stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d: expected 4-d input and kernel, got {x.data.shape} and {w.data.shape}")
    n, cin, h, wd = x.data.shape
    cout, cink, kh, kw = w.data.shape
    if cin != cink:
        raise DimensionError(
            f"conv2d: input channels {cin} (axis 1) != kernel channels {cink} (axis 1)")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wd + 2 * padding}")
    out = _kernels.conv2d_forward(x.data, w.data, stride, padding)

    def grad_fn(g):
        gx = gw = None
        if x.requires_grad:
            gx = _kernels.conv2d_grad_input(w.data, g, x.data.shape, stride, padding)
        if w.requires_grad:
            gw = _kernels.conv2d_grad_kernel(x.data, g, w.data.shape, stride, padding)
        return gx, gw

    return _make("conv2d", out, (x, w), grad_fn)


def global_average_pool(x):
    """[N,C,H,W] -> [N,C] spatial mean; gradient distributes 1/(H*W)."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_average_pool: expected 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return _make("global_average_pool", out, (x,), grad_fn)


def l2_normalize_channel(x, epsilon=1e-5):
    """Divide each pixel's channel vector by max(its L2 norm, epsilon)."""
    if epsilon <= 0:
        raise ParameterError(f"l2_normalize_channel: epsilon must be > 0, got {epsilon}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, epsilon)
    out = x.data / denom
    live = norm > epsilon  # below epsilon the map is linear: x / epsilon

    def grad_fn(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        proj = (g - out * dot) / denom
        return (np.where(live, proj, g / epsilon),)

    return _make("l2_normalize_channel", out, (x,), grad_fn)


def affine_sample(x, mat, out_hw, mode="bilinear"):
    """Sample x at inverse-mapped grid positions; zero outside the source.

    ``mat`` is a constant 2x3 matrix taking output pixel coordinates
    (xo, yo, 1) to source coordinates. Bilinear sampling is linear in x
    and differentiable; nearest is piecewise constant (no gradient path).
    """
    if mode not in ("bilinear", "nearest"):
        raise ParameterError(f"affine_sample: unknown mode {mode!r}")
    out_h, out_w = int(out_hw[0]), int(out_hw[1])
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"affine_sample: non-positive output size {out_hw}")
    mat = np.asarray(mat, dtype=np.float64)
    if mode == "nearest":
        out = _kernels.sample_forward(x.data, mat, out_h, out_w, True)
        return Tensor(out)  # not differentiable; used for label masks only
    out = _kernels.sample_forward(x.data, mat, out_h, out_w, False)

    def grad_fn(g):
        return (_kernels.sample_grad_input(mat, g, x.data.shape),)

    return _make("affine_sample", out, (x,), grad_fn)


def stop_gradient(x):
    """Forward identity; no backward path (output is a constant leaf)."""
    out = Tensor(x.data)
    return out


# ---------------------------------------------------------------------------
# backward

class Graph:
    """Topologically ordered op records reachable from one root tensor."""

    def __init__(self, root):
        if root.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {root.data.shape}")
        self.root = root
        self.records = []  # Nodes in forward (topological) order
        self._order = []   # matching output tensors
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None or id(t) in seen and not expanded:
                continue
            if expanded:
                self.records.append(t.node)
                self._order.append(t)
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))

    def backward(self):
        """Sweep records in reverse topological order, filling leaf grads."""
        if any(n.consumed for n in self.records):
            raise GraphError("backward already ran on this graph; call reset() first")
        grads = {id(self.root): np.ones_like(self.root.data)}
        for t in reversed(self._order):
            node = t.node
            node.consumed = True
            g = grads.pop(id(t), None)
            if g is None:
                continue
            input_grads = node.grad_fn(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:  # leaf: accumulate into .grad
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi
                else:
                    acc = grads.get(id(inp))
                    # never mutate a stored array: grad_fns may alias outputs
                    grads[id(inp)] = gi if acc is None else acc + gi

    def reset(self):
        """Re-arm the graph so backward may run again (grads keep accumulating)."""
        for n in self.records:
            n.consumed = False


def backward(root):
    """Populate ``grad`` on every requires_grad leaf reachable from ``root``."""
    Graph(root).backward()
