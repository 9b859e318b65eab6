"""A small reverse-mode autodiff layer over numpy arrays.

Every op records a closure mapping the output gradient to gradients of its
inputs.  Ops are deliberately coarse (fused attention, layer norm, masked
cross-entropy) so that a transformer step is a few hundred graph nodes rather
than tens of thousands.

Arrays keep whatever dtype they were created with: float32 for training,
float64 for finite-difference checks.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # --- construction helpers -------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op):
        out = Tensor(data)
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # --- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mul(sum_(self), 1.0 / self.data.size)

    # --- backward ---------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topo(self)
        self.grad = grad
        for node in reversed(order):
            g = node.grad
            if node._backward is None or g is None:
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
            if node._parents:
                node.grad = None


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def parameter(data, name=None):
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise -------------------------------------------------------------
def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def neg(a):
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = b

        def bw_scalar(g):
            return (g * c,)

        return Tensor._make(a.data * c, (a,), bw_scalar, "scale")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def gelu(x):
    """tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    inner = c * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * xd**2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * d,)

    return Tensor._make(out, (x,), bw, "gelu")


def stop_gradient(x):
    """Forward identity that blocks gradient flow; shares the same buffer."""
    out = Tensor(x.data)
    out.op = "stop_gradient"
    return out


def cast(x, dtype):
    """Change dtype; the gradient is cast back to the input's dtype."""
    src = x.data.dtype
    if src == np.dtype(dtype):
        return x

    def bw(g):
        return (g.astype(src),)

    return Tensor._make(x.data.astype(dtype), (x,), bw, "cast")


# --- shape ops ----------------------------------------------------------------
def reshape(a, shape):
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def index(a, idx):
    src_shape, dtype = a.shape, a.dtype
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(a.data[idx], (a,), bw, "index")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(data, tuple(tensors), bw, "concat")


def sum_(a, axis=None):
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._make(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


# --- linear algebra ---------------------------------------------------------------
def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D (a weight) or both share leading batch dims."""
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else add(out, b)


# --- fused ops ------------------------------------------------------------------
def layer_norm(x, gain, bias, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def bw(g):
        gg = g * gain.data
        dx = rstd * (gg - gg.mean(axis=-1, keepdims=True)
                     - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        dgain = (flat_g * xhat.reshape(-1, n)).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        return dx, dgain, dbias

    return Tensor._make(out, (x, gain, bias), bw, "layer_norm")


def softmax(x, axis=-1):
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), bw, "softmax")


def attention(q, k, v, allowed):
    """Masked scaled dot-product attention.

    q: (B, H, c, dh); k, v: (B, H, n, dh); allowed: bool (B, 1, c, n).
    Returns the output tensor and the probability array (B, H, c, n).
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    s = np.where(allowed, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    out = p @ vd

    def bw(g):
        dv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(vd, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ kd
        dk = np.swapaxes(ds, -1, -2) @ qd
        return dq, dk, dv

    return Tensor._make(out, (q, k, v), bw, "attention"), p


def nll(logits, targets):
    """Per-row negative log-likelihood; rows with target < 0 give 0.

    logits: (N, V); targets: int (N,).  Returns a (N,) tensor.
    """
    ld = logits.data
    m = ld.max(axis=-1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    live = targets >= 0
    safe = np.where(live, targets, 0)
    rows = np.arange(ld.shape[0])
    out = np.where(live, -logp[rows, safe], 0.0).astype(ld.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, safe] -= 1.0
        return (p * (g * live)[:, None],)

    return Tensor._make(out, (logits,), bw, "nll")


def l2_norm(x, eps=1e-12):
    """Smoothed Euclidean norm over the last axis: sqrt(sum x^2 + eps)."""
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=-1) + eps)

    def bw(g):
        return (xd * (g / nrm)[..., None],)

    return Tensor._make(nrm, (x,), bw, "l2_norm")


def compose_rows(table, token_ids, sources, n_rows, dtype):
    """Build an (n_rows, d) matrix from embedding-table rows and latent rows.

    ``token_ids`` is an int array of length n_rows, -1 where the row is not
    a token.  ``sources`` is a list of ``(tensor, src_rows, dst_rows)``
    copying ``tensor[src_rows]`` into ``out[dst_rows]``.
    """
    d = table.shape[-1]
    out = np.zeros((n_rows, d), dtype=dtype)
    tok_dst = np.nonzero(token_ids >= 0)[0]
    tok_ids = token_ids[tok_dst]
    out[tok_dst] = table.data[tok_ids]
    for src, s_rows, d_rows in sources:
        out[d_rows] = src.data[s_rows]
    parents = (table,) + tuple(s[0] for s in sources)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, tok_ids, g[tok_dst])
        grads = [gt]
        for src, s_rows, d_rows in sources:
            gs = np.zeros_like(src.data)
            np.add.at(gs, s_rows, g[d_rows])
            grads.append(gs)
        return tuple(grads)

    return Tensor._make(out, parents, bw, "compose_rows")


# --- driver -----------------------------------------------------------------------
def loss_and_grads(loss, params):
    """Backpropagate a scalar loss and return ``(value, {name: grad})``.

    Raises NumericError naming the first op whose output went non-finite.
    Parameters with no differentiable path receive zero gradients.
    """
    value = float(loss.data)
    if not math.isfinite(value):
        for node in _topo(loss):
            if not np.all(np.isfinite(node.data)):
                raise NumericError(f"non-finite value produced by op '{node.op}'")
        raise NumericError("non-finite loss")
    for p in params.values():
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for name, p in params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return value, grads
