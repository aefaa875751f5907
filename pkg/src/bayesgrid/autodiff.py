"""Small dense-tensor engine with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` holding a float64 array and a closure
that maps the output gradient to gradients of its parents. :func:`grad`
walks the resulting graph in reverse topological order.

Layout convention for images is ``(N, C, H, W)``; ops that take images also
accept a single ``(C, H, W)`` image.
"""

from __future__ import annotations

import numpy as np

from bayesgrid.errors import NonFiniteError, ShapeError

LEAKY_SLOPE = 0.1
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class Tensor:
    """Immutable value node in the autodiff graph."""

    __slots__ = ("data", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, op="const", requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class Parameter(Tensor):
    """Named leaf tensor holding learnable weights."""

    __slots__ = ("name", "trainable", "decay")

    def __init__(self, name, data, trainable=True, decay=True):
        super().__init__(data, op="param", requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        # batch-norm affine parameters and biases are excluded from weight decay
        self.decay = decay


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out, op):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    return out


def _node(out, parents, backward_fn, op):
    _check_finite(out, op)
    return Tensor(out, parents, backward_fn, op)


def _binary_operands(a, b, op):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    if ta and tb and a.shape != b.shape and a.ndim and b.ndim:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "add")


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), backward, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward, "mul")


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def leaky_relu(a, alpha=LEAKY_SLOPE):
    a = as_tensor(a)
    slope = np.where(a.data > 0, 1.0, alpha)
    return _node(a.data * slope, (a,), lambda g: (g * slope,), "leaky_relu")


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient passes straight through inside, zero outside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return _node(out, (a,), lambda g: (g * inside,), "clip")


_UNARY = {"sigmoid": sigmoid, "exp": exp, "log": log, "softplus": softplus, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op, a, b=None, **kwargs):
    """Dispatch an elementwise op by name, e.g. ``elementwise("clip", x, lo=-1, hi=1)``."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    if op == "leaky_relu":
        return leaky_relu(a, kwargs.get("alpha", LEAKY_SLOPE))
    if op == "clip":
        return clip(a, kwargs["lo"], kwargs["hi"])
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tensor_sum(a, axis=None):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), backward, "getitem")


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _node(out, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def _log_softmax_np(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a):
    """Softmax over the trailing axis (max-subtracted)."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError("softmax: trailing axis must have at least one entry")
    out = np.exp(_log_softmax_np(a.data))

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def log_softmax(a):
    a = as_tensor(a)
    out = _log_softmax_np(a.data)
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# convolution and friends
# ---------------------------------------------------------------------------


def _same_padding(n, k, stride):
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """2-D cross-correlation of ``(N, C, H, W)`` input with a ``(K, C, kh, kw)`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected (N,C,H,W) input and (K,C,kh,kw) kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = xd.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (k,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")
    _check_finite(xd, "conv2d input")

    if padding == "same":
        ho, pt, pb = _same_padding(h, kh, stride)
        wo, pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        if kh > h or kw > w:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, Ho, Wo, C, kh, kw) -> rows of patches
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, k)
        gk = (gmat.T @ cols).reshape(kernel.shape)
        dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                    dcols[..., i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, pt : pt + h, pl : pl + w]
        if squeeze:
            dx = dx[0]
        grads = [dx, gk]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(np.ascontiguousarray(out), parents, backward, "conv2d")


def nearest_upsample(x, factor):
    x = as_tensor(x)
    if factor < 1:
        raise ValueError("nearest_upsample: factor must be >= 1")
    if factor == 1:
        return _node(x.data.copy(), (x,), lambda g: (g,), "upsample")
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def backward(g):
        s = g.shape
        g = g.reshape(*s[:-2], s[-2] // factor, factor, s[-1] // factor, factor)
        return (g.sum(axis=(-3, -1)),)

    return _node(out, (x,), backward, "upsample")


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def splitmix64(values):
    """Vectorised SplitMix64 finaliser over a uint64 array."""
    z = np.asarray(values, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix_seed(*parts):
    """Combine integers into one 64-bit seed."""
    h = np.zeros(1, dtype=np.uint64)
    for p in parts:
        h = splitmix64(h ^ np.array([int(p) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    return int(h[0])


def uniform_stream(seed, n):
    """``n`` uniforms in [0, 1) that depend only on ``(seed, index)``."""
    base = splitmix64(np.array([int(seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    idx = np.arange(n, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15)
    z = splitmix64(idx ^ base)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def dropout_mask(shape, rate, seed):
    """Inverted-dropout multiplier array; ``seed`` may be one int or one per leading sample."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if np.ndim(seed) == 0:
        u = uniform_stream(seed, int(np.prod(shape))).reshape(shape)
    else:
        seeds = list(seed)
        if len(seeds) != shape[0]:
            raise ShapeError(f"dropout: {len(seeds)} seeds for batch of {shape[0]}")
        per = int(np.prod(shape[1:]))
        u = np.stack([uniform_stream(s, per) for s in seeds]).reshape(shape)
    return (u >= rate) / (1.0 - rate)


def dropout(x, rate, seed):
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = dropout_mask(x.shape, rate, seed)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


class RunningStats:
    """Mutable running mean/variance owned by one batch-norm layer."""

    def __init__(self, channels):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batch_norm(x, gamma, beta, stats, mode="train", momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalisation of ``(N, C, H, W)`` or ``(C, H, W)`` input.

    Train mode uses the statistics of ``x`` (over all axes but the channel)
    and updates ``stats`` in place; eval mode uses ``stats``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: expected ({c},) affine params")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)

    if mode == "train":
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if stats is not None:
            stats.mean = momentum * stats.mean + (1.0 - momentum) * mu
            stats.var = momentum * stats.var + (1.0 - momentum) * var
    elif mode == "eval":
        mu, var = stats.mean, stats.var
    else:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def backward(g):
        g4 = g[None] if squeeze else g
        dgamma = (g4 * xhat).sum(axis=axes)
        dbeta = g4.sum(axis=axes)
        gx = g4 * gamma.data.reshape(bshape)
        if mode == "train":
            dx = (inv.reshape(bshape) / m) * (
                m * gx - gx.sum(axis=axes, keepdims=True) - xhat * (gx * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = gx * inv.reshape(bshape)
        if squeeze:
            dx = dx[0]
        return dx, dgamma, dbeta

    if squeeze:
        out = out[0]
    return _node(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a dict mapping parameter name to gradient array. Parameters in
    ``params`` that the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    found = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            found[node.name] = found[node.name] + g if node.name in found else g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if params is None:
        return found
    out = {}
    for p in params:
        if not p.trainable:
            continue
        out[p.name] = found.get(p.name, np.zeros_like(p.data))
    return out


grad = backward


def numeric_gradient(fn, x, h=1e-5):
    """Central finite differences of scalar ``fn()`` with respect to array ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn())
        flat[i] = orig - h
        down = float(fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic, numeric, floor=1e-6):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
