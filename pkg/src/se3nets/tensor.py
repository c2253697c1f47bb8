"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the networks need are provided. Every op accepts either an
unbatched layout (``C x H x W`` images, plain matrices) or a batch with a
leading ``N`` axis; reductions over the batch happen inside the op in a fixed
order so gradients are reproducible bit for bit.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, reused graph, ...)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward_fn, op):
    """Wrap ``data`` as an op output; ``backward_fn(g)`` returns one grad per parent."""
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Graph:
    """The executed ops reachable from an output, in topological order."""

    def __init__(self, output):
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order
        self.output = output

    @property
    def ops(self):
        return [n.op for n in self.nodes if n.op is not None and n._parents]

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate ``dloss/dT`` into ``T.grad`` for every ``requires_grad`` ancestor."""
    if not isinstance(loss, Tensor):
        raise GraphError("backward() needs a Tensor")
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward(); rebuild it")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    graph = Graph(loss)
    for node in graph.nodes:
        if node._consumed:
            raise GraphError("graph shares ops with an already consumed graph")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._consumed = True


# ------------------------------------------------------------------- basics


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _record(ad @ bd, (a, b), bw, "matmul")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        if b.data.size == 1 and not b.requires_grad:
            return _record(a.data + b.data.reshape(()), (a,), lambda g: (g,), "add")
        raise ShapeError(f"add needs equal shapes: {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_bias(x, b):
    """Add a per-feature bias ``b`` (length of the last axis) to every row of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias of shape {b.shape} does not match {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def scale(x, c):
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,), "scale")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def reshape(x, shape):
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _record(data, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    inv = np.argsort(axes)
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "transpose")


def getitem(x, idx):
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] += g
        return (full,)

    return _record(x.data[idx].copy(), (x,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def sum(x):  # noqa: A001 - mirrors numpy
    shape = x.shape
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


# ---------------------------------------------------------------- conv ops


def _as_batch(x):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected C x H x W or N x C x H x W, got {x.shape}")


def conv2d(x, w, b, stride=1, pad=0):
    """Zero-padded cross-correlation. ``w`` is ``F x C x kh x kw``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, single = _as_batch(x)
    if w.ndim != 4 or w.shape[1] != xd.shape[1]:
        raise ShapeError(f"conv2d kernel {w.shape} does not match input {x.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias {b.shape} does not match {w.shape[0]} filters")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    _, _, h, wd = xd.shape
    kh, kw = w.shape[2:]
    ho = kernels.conv_output_size(h, kh, stride, pad)
    wo = kernels.conv_output_size(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0 or kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d output size {ho}x{wo} is not positive for input {x.shape}, kernel {w.shape}")
    wdat = w.data
    out = kernels.conv2d_forward(xd, wdat, stride, pad) + b.data[None, :, None, None]

    def bw(g):
        g4 = g[None] if single else g
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.conv2d_backward_input(g4, wdat, h, wd, stride, pad)
            gx = gx[0] if single else gx
        if w.requires_grad:
            gw = kernels.conv2d_backward_weight(xd, g4, kh, kw, stride, pad)
        if b.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _record(out[0] if single else out, (x, w, b), bw, "conv2d")


def deconv2d(x, w, b, stride=1, pad=0):
    """Transposed convolution, the adjoint of :func:`conv2d` with the same kernel.

    ``w`` is ``C_in x C_out x kh x kw``; output size is ``(H-1)*stride + kh - 2*pad``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, single = _as_batch(x)
    if w.ndim != 4 or w.shape[0] != xd.shape[1]:
        raise ShapeError(f"deconv2d kernel {w.shape} does not match input {x.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"deconv2d bias {b.shape} does not match {w.shape[1]} output channels")
    if stride < 1:
        raise ShapeError("deconv2d stride must be >= 1")
    _, _, h, wd = xd.shape
    kh, kw = w.shape[2:]
    ho = (h - 1) * stride + kh - 2 * pad
    wo = (wd - 1) * stride + kw - 2 * pad
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"deconv2d output size {ho}x{wo} is not positive for input {x.shape}, kernel {w.shape}")
    wdat = w.data
    out = kernels.conv2d_backward_input(xd, wdat, ho, wo, stride, pad) + b.data[None, :, None, None]

    def bw(g):
        g4 = g[None] if single else g
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.conv2d_forward(g4, wdat, stride, pad)
            gx = gx[0] if single else gx
        if w.requires_grad:
            gw = kernels.conv2d_backward_weight(g4, xd, kh, kw, stride, pad)
        if b.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _record(out[0] if single else out, (x, w, b), bw, "deconv2d")


# ----------------------------------------------------------- nonlinearities


def _channel_axis(ndim):
    # C x H x W and plain vectors carry channels first; batched layouts second.
    return 0 if ndim in (1, 3) else 1


def prelu(x, slope):
    """Parametric ReLU with one learnable slope per channel (or a single shared one)."""
    x, slope = as_tensor(x), as_tensor(slope)
    ax = _channel_axis(x.ndim)
    n_ch = x.shape[ax]
    if slope.ndim != 1 or slope.shape[0] not in (1, n_ch):
        raise ShapeError(f"prelu slope {slope.shape} does not match {n_ch} channels")
    bshape = [1] * x.ndim
    bshape[ax] = slope.shape[0]
    a = slope.data.reshape(bshape)
    xd = x.data
    pos = xd > 0
    out = np.where(pos, xd, a * xd)

    def bw(g):
        gx = np.where(pos, g, a * g) if x.requires_grad else None
        gs = None
        if slope.requires_grad:
            contrib = np.where(pos, 0.0, g * xd)
            if slope.shape[0] == 1:
                gs = np.array([contrib.sum()])
            else:
                axes = tuple(i for i in range(x.ndim) if i != ax)
                gs = contrib.sum(axis=axes)
        return gx, gs

    return _record(out, (x, slope), bw, "prelu")


def channel_softmax(x):
    """Softmax across the channel axis of ``k x H x W`` or ``N x k x H x W`` logits."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"channel_softmax expects 3-D or 4-D input, got {x.shape}")
    ax = _channel_axis(x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _record(s, (x,), bw, "channel_softmax")


# ------------------------------------------------------------------- losses


def mse_loss(pred, target, weight=None):
    """Mean squared error; with ``weight`` the mean is taken over weighted elements.

    ``weight`` is a constant array broadcastable to ``pred`` (e.g. a validity
    mask with a singleton coordinate axis).
    """
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    if weight is None:
        w = None
        denom = diff.size
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), diff.shape)
        denom = w.sum()
    if denom <= 0:
        return _record(np.array(0.0), (pred,), lambda g: (np.zeros(pred.shape),), "mse_loss")
    sq = diff * diff if w is None else w * diff * diff
    value = np.array(sq.sum() / denom)

    def bw(g):
        gd = 2.0 * diff / denom if w is None else 2.0 * w * diff / denom
        return (float(g) * gd,)

    return _record(value, (pred,), bw, "mse_loss")


# ------------------------------------------------------------- grad check


def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``x`` is a Tensor or a sequence of Tensors; ``f(*x)`` must return a
    scalar Tensor. The error per element is ``|analytic - numeric| /
    max(1, |numeric|)``.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.requires_grad:
        backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                fm = float(f(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                worst = max(worst, abs(a_flat[i] - num) / max(1.0, abs(num)))
    return worst
