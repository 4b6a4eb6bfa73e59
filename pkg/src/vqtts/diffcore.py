"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the model needs are provided. Every op builds a node
holding its parents and a closure that maps the output gradient to parent
gradients. ``backward`` walks the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NonFiniteError, ShapeError

DTYPE = np.float64


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf", _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward, op):
    """Create an op output. ``backward(g)`` returns one gradient (or None) per parent."""
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, op=op, _backward=backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _require_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return make_node(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ----------------------------------------------------------------------
# reductions and shape manipulation
# ----------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1) if a.data.size else 1.0

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_node(out, (a,), backward, "mean")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    def backward_basic(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    basic = _is_basic_index(index)
    return make_node(np.array(out, copy=True), (a,), backward_basic if basic else backward, "getitem")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_node(out, tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: shape mismatch {tensors[0].shape} vs {t.shape}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_node(out, tensors, backward, "stack")


def embedding(table, indices):
    """Row lookup ``table[indices]``; repeated rows accumulate gradient."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(table.data[idx], (table,), backward, "embedding")


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 1:
                gb = np.tensordot(a.data, g, axes=(list(range(a.ndim - 1)), list(range(g.ndim))))
            elif b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def _conv_geometry(length, kernel, stride):
    out_len = -(-length // stride)
    left = (kernel - 1) // 2
    right = max((out_len - 1) * stride + kernel - left - length, 0)
    return out_len, left, right


def conv1d(x, weight, bias=None, stride=1):
    """Temporal convolution over (B, T, C_in) with weight (K, C_in, C_out).

    Left padding is fixed at (K-1)//2 so frame alignment does not depend on
    the padded batch length; output length is ceil(T / stride).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    B, T, C = x.shape
    K, _, O = weight.shape
    out_len, left, right = _conv_geometry(T, K, stride)
    padded = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    starts = np.arange(out_len) * stride
    gather = starts[:, None] + np.arange(K)[None, :]
    cols = padded[:, gather, :].reshape(B, out_len, K * C)
    w2 = weight.data.reshape(K * C, O)
    out = cols @ w2
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(B, out_len, K, C)
            gpad = np.zeros_like(padded)
            span = (out_len - 1) * stride + 1
            for k in range(K):
                gpad[:, k : k + span : stride] += gcols[:, :, k]
            gx = gpad[:, left : left + T, :]
        if weight.requires_grad:
            gw = (cols.reshape(-1, K * C).T @ g.reshape(-1, O)).reshape(K, C, O)
        if bias is not None:
            gb = g.sum(axis=(0, 1))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return make_node(out, parents, backward, "conv1d")


# ----------------------------------------------------------------------
# gated recurrence
# ----------------------------------------------------------------------


def _gru_forward(x, h, wx, wh, bx, bh, gx=None):
    H = h.shape[-1]
    if gx is None:
        gx = x @ wx + bx
    gh = h @ wh + bh
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    z = _sigmoid(gx[:, H : 2 * H] + gh[:, H : 2 * H])
    hn = gh[:, 2 * H :]
    n = np.tanh(gx[:, 2 * H :] + r * hn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (r, z, n, hn)


def _gru_gate_grads(g, h, cache):
    """Gradients w.r.t. the input and hidden pre-activations, and the direct hidden path."""
    r, z, n, hn = cache
    dn = g * (1.0 - z)
    dz = g * (h - n)
    dan = dn * (1.0 - n * n)
    dar = dan * hn * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dgx = np.concatenate([dar, daz, dan], axis=-1)
    dgh = np.concatenate([dar, daz, dan * r], axis=-1)
    return dgx, dgh, g * z


def _gru_backward(g, x, h, wx, wh, cache):
    dgx, dgh, dh = _gru_gate_grads(g, h, cache)
    dx = dgx @ wx.T
    dh = dh + dgh @ wh.T
    return dx, dh, x.T @ dgx, h.T @ dgh, dgx.sum(0), dgh.sum(0)


def _check_gru(x_shape, h_shape, wx, wh, bx, bh):
    H = h_shape[-1]
    ok = (
        wx.shape == (x_shape[-1], 3 * H)
        and wh.shape == (H, 3 * H)
        and bx.shape == (3 * H,)
        and bh.shape == (3 * H,)
    )
    if not ok:
        raise ShapeError(
            f"gru: input {x_shape}, hidden {h_shape} incompatible with "
            f"weights {wx.shape}, {wh.shape}, biases {bx.shape}, {bh.shape}"
        )


def gru_step(x, h, wx, wh, bx, bh):
    """One GRU cell update; x (B, I), h (B, H), gates ordered (reset, update, new)."""
    x, h, wx, wh, bx, bh = map(as_tensor, (x, h, wx, wh, bx, bh))
    _check_gru(x.shape, h.shape, wx, wh, bx, bh)
    out, cache = _gru_forward(x.data, h.data, wx.data, wh.data, bx.data, bh.data)

    def backward(g):
        return _gru_backward(g, x.data, h.data, wx.data, wh.data, cache)

    return make_node(out, (x, h, wx, wh, bx, bh), backward, "gru_step")


def gru_sequence(x, wx, wh, bx, bh, h0=None):
    """Run the GRU cell over (B, T, I) and return all hidden states (B, T, H)."""
    x, wx, wh, bx, bh = map(as_tensor, (x, wx, wh, bx, bh))
    B, T, _ = x.shape
    H = wh.shape[0]
    h0 = Tensor(np.zeros((B, H))) if h0 is None else as_tensor(h0)
    _check_gru(x.shape, h0.shape, wx, wh, bx, bh)
    hs = np.empty((B, T, H))
    gx_all = x.data @ wx.data + bx.data
    prev = np.empty((B, T, H))
    caches = []
    h = h0.data
    for t in range(T):
        prev[:, t] = h
        h, cache = _gru_forward(None, h, None, wh.data, None, bh.data, gx=gx_all[:, t])
        caches.append(cache)
        hs[:, t] = h

    def backward(g):
        dgx = np.empty_like(gx_all)
        dgh = np.empty_like(gx_all)
        dh = np.zeros((B, H))
        whT = wh.data.T
        for t in range(T - 1, -1, -1):
            a, b, direct = _gru_gate_grads(g[:, t] + dh, prev[:, t], caches[t])
            dgx[:, t] = a
            dgh[:, t] = b
            dh = direct + b @ whT
        dx = dgx @ wx.data.T
        dwx = x.data.reshape(-1, x.shape[2]).T @ dgx.reshape(-1, 3 * H)
        dwh = prev.reshape(-1, H).T @ dgh.reshape(-1, 3 * H)
        return dx, dwx, dwh, dgx.sum((0, 1)), dgh.sum((0, 1)), dh

    return make_node(hs, (x, wx, wh, bx, bh, h0), backward, "gru_sequence")


# ----------------------------------------------------------------------
# normalisation, distances, losses
# ----------------------------------------------------------------------


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), backward, "log_softmax")


def neg_l2_distance(h, e):
    """Negative Euclidean distance between frames h (..., D) and rows e (V, D).

    Returns (..., V). The gradient at zero distance is taken as zero.
    """
    h, e = as_tensor(h), as_tensor(e)
    if e.ndim != 2 or h.shape[-1] != e.shape[1]:
        raise ShapeError(f"neg_l2_distance: frames {h.shape} vs codebook {e.shape}")
    diff = h.data[..., None, :] - e.data
    dist = np.sqrt((diff * diff).sum(-1))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
        contrib = -g[..., None] * unit
        gh = contrib.sum(-2)
        ge = -contrib.reshape(-1, *e.shape).sum(0)
        return gh, ge

    return make_node(-dist, (h, e), backward, "neg_l2_distance")


def mse(pred, target, mask=None):
    """Mean squared error; with a 0/1 mask the mean runs over unmasked entries."""
    pred, target = as_tensor(pred), as_tensor(target)
    _require_same(pred, target, "mse")
    diff = pred.data - target.data
    if mask is None:
        w = None
        denom = max(diff.size, 1)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=DTYPE), diff.shape)
        denom = max(float(w.sum()), 1.0)
    sq = diff * diff if w is None else w * diff * diff
    out = sq.sum() / denom

    def backward(g):
        gd = 2.0 * g * diff / denom
        if w is not None:
            gd = gd * w
        return gd, -gd

    return make_node(out, (pred, target), backward, "mse")


def temporal_diff(a, axis=1):
    """First difference along the time axis: out[t] = a[t+1] - a[t]."""
    a = as_tensor(a)
    n = a.shape[axis]
    hi = [slice(None)] * a.ndim
    lo = [slice(None)] * a.ndim
    hi[axis] = slice(1, None)
    lo[axis] = slice(None, n - 1)
    hi, lo = tuple(hi), tuple(lo)
    out = a.data[hi] - a.data[lo]

    def backward(g):
        full = np.zeros_like(a.data)
        full[hi] += g
        full[lo] -= g
        return (full,)

    return make_node(out, (a,), backward, "temporal_diff")


def bce_with_logits(logits, targets, mask=None, pos_weight=1.0):
    """Mean binary cross-entropy from logits against constant 0/1 targets.

    ``pos_weight`` scales the loss of positive targets; with a 0/1 mask the
    mean runs over unmasked entries.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: shape mismatch {logits.shape} vs {t.shape}")
    x = logits.data
    softplus_neg = np.log1p(np.exp(-np.abs(x))) + np.maximum(-x, 0)  # -log sigmoid(x)
    per = pos_weight * t * softplus_neg + (1 - t) * (softplus_neg + x)
    w = np.ones_like(x) if mask is None else np.broadcast_to(np.asarray(mask, dtype=DTYPE), x.shape)
    denom = max(float(w.sum()), 1.0)
    out = (w * per).sum() / denom

    def backward(g):
        sig = _sigmoid(x)
        return (g * w * (pos_weight * t * (sig - 1) + (1 - t) * sig) / denom,)

    return make_node(out, (logits,), backward, "bce_with_logits")


def dropout(a, rate, rng):
    """Inverted dropout with a mask drawn from ``rng``; rate 0 is the identity."""
    a = as_tensor(a)
    if rate <= 0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# ----------------------------------------------------------------------
# straight-through substitution
# ----------------------------------------------------------------------


@dataclass
class _SubstitutionTape:
    """Records non-differentiable choices so finite differences can replay them."""

    mode: str | None = None
    records: list = field(default_factory=list)
    cursor: int = 0
    substitutions: int = 0


_TAPE = _SubstitutionTape()


@contextlib.contextmanager
def substitution_tape(mode):
    """Within ``mode='record'`` choices are stored; within ``'replay'`` they are reused."""
    prev_mode = _TAPE.mode
    if mode == "record":
        _TAPE.records = []
        _TAPE.substitutions = 0
    _TAPE.cursor = 0
    _TAPE.mode = mode
    try:
        yield _TAPE
    finally:
        _TAPE.mode = prev_mode


def frozen_choice(compute):
    """Evaluate ``compute()`` unless a replay tape supplies the recorded result."""
    if _TAPE.mode == "replay":
        if _TAPE.cursor >= len(_TAPE.records):
            raise RuntimeError("substitution tape exhausted during replay")
        value = _TAPE.records[_TAPE.cursor]
        _TAPE.cursor += 1
        return value
    value = compute()
    if _TAPE.mode == "record":
        _TAPE.records.append(value)
    return value


def straight_through(h, q, enabled=True):
    """Forward value is ``q``; the gradient passes to ``h`` unchanged.

    ``q`` never receives gradient through this op. With ``enabled=False`` the
    result is a constant, cutting the path to ``h`` entirely.
    """
    h = as_tensor(h)
    qd = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=DTYPE)
    if h.shape != qd.shape:
        raise ShapeError(f"straight_through: shape mismatch {h.shape} vs {qd.shape}")
    if _TAPE.mode == "record":
        _TAPE.substitutions += 1
    # replay evaluates the frozen surrogate h + (q - h)|base, whose Jacobian is the ST rule
    offset = frozen_choice(lambda: qd - h.data if enabled else qd)
    if _TAPE.mode == "replay":
        out = h.data + offset if enabled else np.array(offset, copy=True)
    else:
        out = np.array(qd, copy=True)
    if not enabled:
        return Tensor(out, op="straight_through_off")
    return make_node(out, (h,), lambda g: (g,), "straight_through")


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Returns a dict mapping each such leaf to the gradient added by this call.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ----------------------------------------------------------------------
# finite-difference verification
# ----------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_error: float
    worst: tuple | None
    checked: int
    skipped_paths: int

    def __float__(self):
        return self.max_error


def grad_check(fn, inputs, step=1e-5, max_coords=None, seed=0):
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    Straight-through substitutions are frozen at their recorded choice for
    the numeric evaluations and reported in ``skipped_paths``.
    ``max_coords`` caps the coordinates sampled per input.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with substitution_tape("record") as tape:
        loss = fn(*inputs)
    _check_finite(loss.data, "loss at base point")
    if loss.data.size != 1:
        raise ShapeError(f"grad_check: function must be scalar-valued, got {loss.shape}")
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)

    def evaluate():
        with substitution_tape("replay"):
            val = fn(*inputs).data
        return float(val)

    worst, max_err, checked = None, 0.0, 0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp = evaluate()
            flat[c] = orig - step
            fm = evaluate()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite value perturbing input {i} coordinate {int(c)}")
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[i].reshape(-1)[c]
            err = abs(a - numeric) / max(1.0, abs(a))
            checked += 1
            if worst is None or err > max_err:
                max_err = err
                worst = (i, int(c), float(a), float(numeric))
    return GradCheckResult(max_err, worst, checked, tape.substitutions)


def _check_finite(arr, what):
    bad = ~np.isfinite(arr)
    if bad.any():
        raise NonFiniteError(f"non-finite {what} at index {np.argwhere(bad)[0].tolist()}")
