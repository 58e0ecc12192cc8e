"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (classifiers, the perturbation generator, losses)
is expressed through the operation set in this module. Arrays are plain
numpy, row-major, N x C x H x W for image batches. Gradients are
recorded on a per-output node structure and replayed in reverse
topological order by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np


class ContractViolation(ValueError):
    """An operation was called outside its documented shape/value contract."""


class NumericFailure(FloatingPointError):
    """A non-finite value appeared where the contract requires finite math."""


class FrozenModelError(RuntimeError):
    """An optimizer step was attempted against frozen parameters."""


_state = threading.local()


def _default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype):
    """Set the element type for newly created tensors ('float32' or 'float64')."""
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractViolation(f"unsupported element type {dtype}")
    _state.dtype = dt.type


@contextlib.contextmanager
def using_dtype(dtype):
    prev = _default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One executed operation: inputs, and the adjoint that maps the
    output gradient to per-input gradients (None for non-differentiable
    inputs)."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """A dense n-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = self.name
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(data, op, inputs, backward_fn):
    """Create the output tensor of an op, recording the node when any
    input is tracked and recording is enabled."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _grad_enabled() and any(t.requires_grad or t.node is not None for t in inputs)
    out.requires_grad = track
    out.node = Node(op, inputs, backward_fn) if track else None
    return out


def _require(cond, op, msg):
    if not cond:
        raise ContractViolation(f"{op}: {msg}")


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"{op}: non-finite value encountered")


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original input shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and reduction operations
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise (broadcasting) addition; used for residual connections."""
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _wrap(data, "add", (a, b), bw)


def sub(a, b):
    data = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _wrap(data, "sub", (a, b), bw)


def mul(a, b):
    data = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _wrap(data, "mul", (a, b), bw)


def neg(a):
    return _wrap(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    return _wrap(a.data * np.asarray(c, dtype=a.data.dtype), "scale", (a,),
                 lambda g: (g * c,))


def relu(a):
    data = np.maximum(a.data, 0)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _wrap(data, "relu", (a,), bw)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes strictly inside, zero at and
    beyond the boundary."""
    _require(lo <= hi, "clamp", f"lo {lo} exceeds hi {hi}")
    data = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def bw(g):
        return (g * mask,)

    return _wrap(data, "clamp", (a,), bw)


def log(a):
    data = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _wrap(data, "log", (a,), bw)


def sign(a):
    """Forward-only elementwise sign; the output never carries gradients."""
    out = Tensor.__new__(Tensor)
    out.data = np.sign(a.data)
    out.requires_grad = False
    out.grad = None
    out.node = None
    out.name = None
    return out


def softmax(a, axis=-1):
    """Numerically stable softmax over the class axis."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _wrap(y, "softmax", (a,), bw)


def mean(a, axis=None, keepdims=False):
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype) / count,)

    return _wrap(data, "mean", (a,), bw)


def sum_reduce(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype).copy(),)

    return _wrap(data, "sum", (a,), bw)


def l2_norm(a, per_sample=False):
    """Euclidean norm of the flattened tensor; with ``per_sample`` the
    leading axis is kept and each sample is flattened independently."""
    if per_sample:
        flat = a.data.reshape(a.data.shape[0], -1)
        nrm = np.sqrt((flat * flat).sum(axis=1))

        def bw(g):
            denom = np.where(nrm == 0, 1.0, nrm)
            gi = (flat / denom[:, None]) * np.asarray(g).reshape(-1, 1)
            return (gi.reshape(a.data.shape),)

        return _wrap(nrm, "l2_norm", (a,), bw)

    nrm = np.sqrt((a.data * a.data).sum())

    def bw(g):
        denom = nrm if nrm != 0 else 1.0
        return (a.data / denom * g,)

    return _wrap(np.asarray(nrm, dtype=a.data.dtype), "l2_norm", (a,), bw)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _wrap(data, "reshape", (a,), bw)


# ---------------------------------------------------------------------------
# Linear / convolution layers
# ---------------------------------------------------------------------------

def linear(x, w, b):
    """Affine map: x [N, F_in] @ w [F_in, F_out] + b [F_out]."""
    _require(x.data.ndim == 2, "linear", f"input must be rank 2, got {x.data.shape}")
    _require(w.data.ndim == 2 and x.data.shape[1] == w.data.shape[0], "linear",
             f"shape mismatch between input {x.data.shape} and weight {w.data.shape}")
    _require(b.data.shape == (w.data.shape[1],), "linear",
             f"bias {b.data.shape} does not match weight {w.data.shape}")
    data = x.data @ w.data + b.data

    def bw(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _wrap(data, "linear", (x, w, b), bw)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _im2col(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    oh, ow = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c * kh * kw, oh * ow)
    return cols, oh, ow


def _col2im(cols, n, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow):
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += cols6[:, :, i, j]
    return out[:, :, ph:ph + h, pw:pw + w]


def conv2d(x, w, b, stride=1, padding=0):
    """2-D convolution, x [N,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]."""
    _require(x.data.ndim == 4, "conv2d", f"input must be rank 4, got {x.data.shape}")
    _require(w.data.ndim == 4 and w.data.shape[1] == x.data.shape[1], "conv2d",
             f"shape mismatch between input {x.data.shape} and kernel {w.data.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, cin, h, wd = x.data.shape
    cout, _, kh, kw = w.data.shape
    _require(h + 2 * ph >= kh and wd + 2 * pw >= kw, "conv2d",
             f"kernel {w.data.shape} larger than padded input {x.data.shape}")
    _require(b.data.shape == (cout,), "conv2d",
             f"bias {b.data.shape} does not match kernel {w.data.shape}")

    cols, oh, ow = _im2col(x.data, kh, kw, sh, sw, ph, pw)
    w2 = w.data.reshape(cout, -1)
    out = np.einsum("of,nfl->nol", w2, cols, optimize=True)
    out = out.reshape(n, cout, oh, ow) + b.data.reshape(1, cout, 1, 1)

    def bw(g):
        g2 = g.reshape(n, cout, oh * ow)
        dw = np.einsum("nol,nfl->of", g2, cols, optimize=True).reshape(w.data.shape)
        db = g2.sum(axis=(0, 2))
        dcols = np.einsum("of,nol->nfl", w2, g2, optimize=True)
        dx = _col2im(dcols, n, cin, h, wd, kh, kw, sh, sw, ph, pw, oh, ow)
        return dx, dw, db

    return _wrap(out, "conv2d", (x, w, b), bw)


def conv_transpose2d(x, w, b, stride=1, padding=0):
    """Transposed 2-D convolution, x [N,Cin,H,W], w [Cin,Cout,kh,kw]."""
    _require(x.data.ndim == 4, "conv_transpose2d",
             f"input must be rank 4, got {x.data.shape}")
    _require(w.data.ndim == 4 and w.data.shape[0] == x.data.shape[1],
             "conv_transpose2d",
             f"shape mismatch between input {x.data.shape} and kernel {w.data.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, cin, h, wd = x.data.shape
    _, cout, kh, kw = w.data.shape
    _require(b.data.shape == (cout,), "conv_transpose2d",
             f"bias {b.data.shape} does not match kernel {w.data.shape}")
    oh = (h - 1) * sh + kh - 2 * ph
    ow = (wd - 1) * sw + kw - 2 * pw
    _require(oh >= 1 and ow >= 1, "conv_transpose2d",
             f"output collapses for input {x.data.shape} with kernel {w.data.shape}")

    w2 = w.data.reshape(cin, cout * kh * kw)
    cols = np.einsum("if,nil->nfl", w2, x.data.reshape(n, cin, h * wd), optimize=True)
    out = _col2im(cols, n, cout, oh, ow, kh, kw, sh, sw, ph, pw, h, wd)
    out = out + b.data.reshape(1, cout, 1, 1)

    def bw(g):
        dcols, goh, gow = _im2col(g, kh, kw, sh, sw, ph, pw)
        assert (goh, gow) == (h, wd)
        dx = np.einsum("if,nfl->nil", w2, dcols, optimize=True).reshape(x.data.shape)
        dw = np.einsum("nil,nfl->if", x.data.reshape(n, cin, h * wd), dcols,
                       optimize=True).reshape(w.data.shape)
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _wrap(out, "conv_transpose2d", (x, w, b), bw)


def max_pool2d(x, kernel=2, stride=None):
    _require(x.data.ndim == 4, "max_pool2d",
             f"input must be rank 4, got {x.data.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    n, c, h, w = x.data.shape
    _require(h >= kh and w >= kw, "max_pool2d",
             f"window {kh}x{kw} larger than input {x.data.shape}")
    cols, oh, ow = _im2col(x.data, kh, kw, sh, sw, 0, 0)
    cols = cols.reshape(n, c, kh * kw, oh * ow)
    idx = cols.argmax(axis=2)
    out = np.take_along_axis(cols, idx[:, :, None, :], axis=2)[:, :, 0, :]
    out = out.reshape(n, c, oh, ow)

    def bw(g):
        dcols = np.zeros((n, c, kh * kw, oh * ow), dtype=g.dtype)
        np.put_along_axis(dcols, idx[:, :, None, :],
                          g.reshape(n, c, 1, oh * ow), axis=2)
        return (_col2im(dcols.reshape(n, c * kh * kw, oh * ow),
                        n, c, h, w, kh, kw, sh, sw, 0, 0, oh, ow),)

    return _wrap(out, "max_pool2d", (x,), bw)


def global_avg_pool(x):
    """Mean over the spatial axes: [N,C,H,W] -> [N,C]."""
    _require(x.data.ndim == 4, "global_avg_pool",
             f"input must be rank 4, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return _wrap(out, "global_avg_pool", (x,), bw)


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, eps=1e-5):
    """Per-channel normalization over [N,C,H,W].

    Training mode (no running stats given) normalizes with the current
    batch statistics and differentiates through them; inference mode
    uses the supplied frozen statistics.
    """
    _require(x.data.ndim == 4, "batch_norm",
             f"input must be rank 4, got {x.data.shape}")
    c = x.data.shape[1]
    _require(gamma.data.shape == (c,) and beta.data.shape == (c,), "batch_norm",
             f"gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
             f"do not match channels of {x.data.shape}")
    axes = (0, 2, 3)
    if running_mean is None:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def bw(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=axes)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            dx = (inv[None, :, None, None] / count) * (count * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

        return _wrap(out, "batch_norm", (x, gamma, beta), bw)

    inv = 1.0 / np.sqrt(np.asarray(running_var) + eps)
    xhat = (x.data - np.asarray(running_mean)[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = g * (gamma.data * inv)[None, :, None, None]
        return dx, dgamma, dbeta

    return _wrap(out, "batch_norm", (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

@dataclass
class GradGraph:
    """Topologically ordered record of the operations reaching a loss."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def from_tensor(cls, t):
        graph = cls()
        seen = set()

        def visit(tensor):
            if tensor.node is None or id(tensor) in seen:
                return
            seen.add(id(tensor))
            for inp in tensor.node.inputs:
                visit(inp)
            graph.nodes.append(tensor.node)
            graph.outputs.append(tensor)

        visit(t)
        return graph


def backward(loss, params=None):
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    ``params``, when given, is an iterable of tensors that receive a
    zero gradient if the loss does not reach them.
    """
    _require(loss.data.size == 1, "backward",
             f"loss must be scalar, got shape {loss.data.shape}")
    graph = GradGraph.from_tensor(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node, out in zip(reversed(graph.nodes), reversed(graph.outputs)):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None:
                continue
            if not np.all(np.isfinite(gi)):
                raise NumericFailure(f"{node.op}: non-finite gradient in adjoint")
            if inp.requires_grad:
                if inp.grad is None:
                    inp.grad = Tensor(np.zeros_like(inp.data))
                inp.grad.data += gi
            if inp.node is not None:
                acc = grads.get(id(inp))
                if acc is None:
                    grads[id(inp)] = gi.copy()
                else:
                    acc += gi
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = Tensor(np.zeros_like(p.data))
    return graph


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators plus step counter for a fixed
    parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, state):
    """One Adam update with bias correction, in place."""
    if len(params) != len(state.m):
        raise ContractViolation(
            f"adam_step: {len(params)} params vs state for {len(state.m)}")
    for p in params:
        if not p.requires_grad or not p.data.flags.writeable:
            raise FrozenModelError("adam_step: parameter is frozen")
        if p.grad is None:
            raise ContractViolation("adam_step: parameter has no gradient")
        if p.grad.data.shape != p.data.shape:
            raise ContractViolation(
                f"adam_step: grad shape {p.grad.data.shape} vs param {p.data.shape}")
        if not np.all(np.isfinite(p.grad.data)):
            raise NumericFailure("adam_step: non-finite gradient")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class CheckReport:
    op: str
    max_rel_error: float
    passed: bool
    points: int
    tolerance: float


def _fd_inputs(op, rng):
    """Random, kink-avoiding inputs for one gradcheck evaluation of ``op``.

    Returns (callable taking Tensor inputs -> Tensor output, list of input arrays).
    """
    if op == "conv2d":
        x = rng.normal(0, 1, (1, 2, 5, 5))
        w = rng.normal(0, 1, (3, 2, 3, 3))
        b = rng.normal(0, 1, (3,))
        return lambda t: conv2d(t[0], t[1], t[2], stride=1, padding=1), [x, w, b]
    if op == "conv_transpose2d":
        x = rng.normal(0, 1, (1, 3, 4, 4))
        w = rng.normal(0, 1, (3, 2, 4, 4))
        b = rng.normal(0, 1, (2,))
        return lambda t: conv_transpose2d(t[0], t[1], t[2], stride=2, padding=1), [x, w, b]
    if op == "relu":
        x = rng.normal(0, 1, (4, 6))
        x[np.abs(x) < 0.05] += 0.1  # keep away from the kink at zero
        return lambda t: relu(t[0]), [x]
    if op == "linear":
        x = rng.normal(0, 1, (3, 5))
        w = rng.normal(0, 1, (5, 4))
        b = rng.normal(0, 1, (4,))
        return lambda t: linear(t[0], t[1], t[2]), [x, w, b]
    if op == "max_pool2d":
        x = rng.normal(0, 1, (1, 2, 6, 6)) * 3  # spread values, avoid near-ties
        return lambda t: max_pool2d(t[0], 2), [x]
    if op == "global_avg_pool":
        return lambda t: global_avg_pool(t[0]), [rng.normal(0, 1, (2, 3, 4, 4))]
    if op == "batch_norm":
        x = rng.normal(0, 1, (4, 3, 5, 5))
        gamma = rng.uniform(0.5, 1.5, (3,))
        beta = rng.normal(0, 1, (3,))
        return lambda t: batch_norm(t[0], t[1], t[2]), [x, gamma, beta]
    if op == "add":
        return lambda t: add(t[0], t[1]), [rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (3, 4))]
    if op == "scale":
        return lambda t: scale(t[0], 1.7), [rng.normal(0, 1, (3, 4))]
    if op == "clamp":
        x = rng.uniform(-0.8, 0.8, (4, 4))  # interior of [-1, 1], away from bounds
        return lambda t: clamp(t[0], -1.0, 1.0), [x]
    if op == "softmax":
        return lambda t: softmax(t[0]), [rng.normal(0, 1, (3, 5))]
    if op == "log":
        return lambda t: log(t[0]), [rng.uniform(0.5, 2.0, (3, 4))]
    if op == "mean":
        return lambda t: mean(t[0]), [rng.normal(0, 1, (3, 4))]
    if op == "l2_norm":
        x = rng.normal(0, 1, (8,))
        x += np.sign(x) * 0.2  # keep the norm well away from zero
        return lambda t: l2_norm(t[0]), [x]
    raise ContractViolation(f"finite_difference_check: unknown op {op!r}")


DIFFERENTIABLE_OPS = (
    "conv2d", "conv_transpose2d", "relu", "linear", "max_pool2d",
    "global_avg_pool", "batch_norm", "add", "scale", "clamp",
    "softmax", "log", "mean", "l2_norm",
)

FORWARD_ONLY_OPS = ("sign",)


def finite_difference_check(op, seed=0, points=5, step=1e-4, tol=1e-6):
    """Compare the analytic adjoint of ``op`` against central differences
    at ``points`` seeded random evaluations (64-bit mode)."""
    if op in FORWARD_ONLY_OPS:
        raise ContractViolation(f"finite_difference_check: {op} is forward-only")
    max_rel = 0.0
    with using_dtype(np.float64):
        for k in range(points):
            rng = np.random.default_rng([seed, k])
            fn, arrays = _fd_inputs(op, rng)
            tensors = [Tensor(a, requires_grad=True) for a in arrays]
            out = fn(tensors)
            r = rng.normal(0, 1, out.data.shape)
            loss = sum_reduce(mul(out, Tensor(r)))
            backward(loss)
            for ti, arr in zip(tensors, arrays):
                analytic = ti.grad.data
                numeric = np.empty_like(analytic)
                flat = np.asarray(arr, dtype=np.float64).reshape(-1)
                nflat = numeric.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = float((fn([Tensor(a) for a in arrays]).data * r).sum())
                    flat[i] = orig - step
                    fm = float((fn([Tensor(a) for a in arrays]).data * r).sum())
                    flat[i] = orig
                    nflat[i] = (fp - fm) / (2 * step)
                rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
                max_rel = max(max_rel, float(rel.max()))
    return CheckReport(op=op, max_rel_error=max_rel, passed=max_rel < tol,
                       points=points, tolerance=tol)


def run_gradcheck_suite(seed=0):
    """Finite-difference reports for every differentiable catalog op."""
    return [finite_difference_check(op, seed=seed) for op in DIFFERENTIABLE_OPS]
