"""Reverse-mode automatic differentiation over dense float64 arrays.

Eager define-by-run engine: every operation computes its value immediately
and records a backward closure on the output node, so a single evaluation
doubles as the recording that ``backward`` replays.  All storage is 64-bit.

Stability guards (applied in the forward pass, so finite differences agree
with the analytic gradients): ``log`` inputs are clamped below at
``LOG_FLOOR``, ``exp`` inputs are clamped into ``[EXP_MIN, EXP_MAX]``.
Softmax subtracts the row max before exponentiating.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

LOG_FLOOR = 1e-12
EXP_MIN = -30.0
EXP_MAX = 30.0

_GRAD_ENABLED = True


class ShapeMismatch(ValueError):
    """Raised when operand shapes cannot be combined; names both shapes."""

    def __init__(self, op, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.shapes = (tuple(shape_a), tuple(shape_b))


class no_grad:
    """Context manager that disables recording (inference-only passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense float64 array participating in a recorded computation.

    ``requires_grad`` marks trainable leaves; interior nodes inherit the
    flag from their parents so untracked (pure data) subtrees record
    nothing.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward
                break
    return out


def _acc(t, g):
    # Adopted arrays (first contribution) are never mutated in place; a
    # second contribution allocates a fresh owned sum.
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _acc_slice(t, index, g):
    # Scatter-accumulate into one owned buffer (used by slicing backward).
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
        t._grad_owned = True
    elif not t._grad_owned:
        t.grad = t.grad.copy()
        t._grad_owned = True
    t.grad[index] += g


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(op, a.data.shape, b.data.shape) from None


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    _check_broadcast("add", a, b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b):
    _check_broadcast("sub", a, b)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b):
    _check_broadcast("mul", a, b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def scale(a, c):
    """Multiply by a python constant (not a differentiable operand)."""
    c = float(c)
    out_data = a.data * c

    def bw(g):
        _acc(a, g * c)

    return _make(out_data, (a,), bw)


def tanh(a):
    out_data = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def sigmoid(a):
    out_data = expit(a.data)  # saturates cleanly, no explicit clamp needed

    def bw(g):
        _acc(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def exp(a):
    clipped = np.clip(a.data, EXP_MIN, EXP_MAX)
    out_data = np.exp(clipped)
    inside = (a.data > EXP_MIN) & (a.data < EXP_MAX)

    def bw(g):
        _acc(a, g * out_data * inside)

    return _make(out_data, (a,), bw)


def log(a):
    clamped = np.maximum(a.data, LOG_FLOOR)
    out_data = np.log(clamped)
    inside = a.data > LOG_FLOOR

    def bw(g):
        _acc(a, g * inside / clamped)

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _make(out_data, (a, b), bw)


def affine(x, w, b):
    """x @ w + b with the bias broadcast over rows."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch("affine", x.data.shape, w.data.shape)
    out_data = x.data @ w.data + b.data

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.T @ g)
        if b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _make(out_data, (x, w, b), bw)


def affine2(x, w, y, u, b):
    """x @ w + y @ u + b, the fused two-input linear map of a gated cell."""
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch("affine2", x.data.shape, w.data.shape)
    if y.data.shape[1] != u.data.shape[0]:
        raise ShapeMismatch("affine2", y.data.shape, u.data.shape)
    out_data = x.data @ w.data + y.data @ u.data + b.data

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.T @ g)
        if y.requires_grad:
            _acc(y, g @ u.data.T)
        if u.requires_grad:
            _acc(u, y.data.T @ g)
        if b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _make(out_data, (x, w, y, u, b), bw)


def gate_blend(prev, cand, keep):
    """keep * prev + (1 - keep) * cand, the convex hidden-state update."""
    out_data = keep.data * prev.data + (1.0 - keep.data) * cand.data

    def bw(g):
        if prev.requires_grad:
            _acc(prev, g * keep.data)
        if cand.requires_grad:
            _acc(cand, g * (1.0 - keep.data))
        if keep.requires_grad:
            _acc(keep, g * (prev.data - cand.data))

    return _make(out_data, (prev, cand, keep), bw)


def mix(weights, stack_):
    """Weighted sum over the middle axis: (B,M) x (B,M,D) -> (B,D)."""
    if weights.data.shape != stack_.data.shape[:2]:
        raise ShapeMismatch("mix", weights.data.shape, stack_.data.shape)
    out_data = np.einsum("bm,bmd->bd", weights.data, stack_.data)

    def bw(g):
        if weights.requires_grad:
            _acc(weights, np.einsum("bd,bmd->bm", g, stack_.data))
        if stack_.requires_grad:
            _acc(stack_, weights.data[:, :, None] * g[:, None, :])

    return _make(out_data, (weights, stack_), bw)


# ---------------------------------------------------------------------------
# normalization and gating


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _acc(a, out_data * (g - dot))

    return _make(out_data, (a,), bw)


def topm_softmax(a, m):
    """Row-wise softmax restricted to the m largest logits; rest are zero.

    Ties resolve to the lower column index.  The retained set is treated
    as constant under differentiation: gradients flow only through the
    m surviving logits.
    """
    logits = a.data
    if logits.ndim != 2:
        raise ValueError(f"topm_softmax: expected 2-D logits, got shape {logits.shape}")
    n = logits.shape[1]
    if not 1 <= m <= n:
        raise ValueError(f"topm_softmax: m={m} outside [1, {n}]")
    if m == n:
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=1, keepdims=True)
    else:
        # stable argsort on -logits keeps the lower index first on exact ties
        order = np.argsort(-logits, axis=1, kind="stable")
        keep_idx = order[:, :m]
        mask = np.zeros_like(logits, dtype=bool)
        np.put_along_axis(mask, keep_idx, True, axis=1)
        shifted = np.where(mask, logits, -np.inf)
        shifted = shifted - shifted.max(axis=1, keepdims=True)
        e = np.exp(shifted, where=mask, out=np.zeros_like(logits))
        out_data = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _acc(a, out_data * (g - dot))  # zero rows outside the retained set

    return _make(out_data, (a,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each row to zero mean / unit variance, then scale + shift.

    Variance uses the population (1/n) denominator.
    """
    if x.data.shape[-1] < 2:
        raise ValueError("layer_norm: need at least 2 features per row")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered * inv
    out_data = norm * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _acc(gain, _unbroadcast(g * norm, gain.data.shape))
        if bias.requires_grad:
            _acc(bias, _unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gg = g * gain.data
            n = x.data.shape[-1]
            dot1 = gg.mean(axis=-1, keepdims=True)
            dot2 = (gg * norm).mean(axis=-1, keepdims=True)
            _acc(x, inv * (gg - dot1 - norm * dot2))

    return _make(out_data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bw)


def concat(parts, axis=0):
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(p, g[tuple(idx)])

    return _make(out_data, tuple(parts), bw)


def stack(parts, axis=1):
    out_data = np.stack([p.data for p in parts], axis=axis)

    def bw(g):
        moved = np.moveaxis(g, axis, 0)
        for j, p in enumerate(parts):
            if p.requires_grad:
                _acc(p, moved[j])

    return _make(out_data, tuple(parts), bw)


def step_slice(a, t):
    """Select index t along axis 1 (one time step of a batched sequence)."""
    out_data = a.data[:, t]

    def bw(g):
        _acc_slice(a, (slice(None), t), g)

    return _make(out_data, (a,), bw)


def sum_all(a):
    out_data = np.asarray(a.data.sum())

    def bw(g):
        _acc(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), bw)


def mean_all(a):
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def bw(g):
        _acc(a, np.broadcast_to(g / n, a.data.shape))

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# parameters


GROUPS = ("base", "heads", "experts", "gate", "theta0")


class ParamSet:
    """Named trainable tensors partitioned into fixed groups.

    Names are unique across the whole set; every tensor lives in exactly
    one of ``GROUPS``.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._group_of: dict[str, str] = {}

    def add(self, group, name, data):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._group_of[name] = group
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def group_of(self, name):
        return self._group_of[name]

    def group(self, group):
        return [(n, t) for n, t in self._params.items() if self._group_of[n] == group]

    def arrays(self):
        return {n: t.data for n, t in self._params.items()}

    def groups(self):
        return dict(self._group_of)

    def n_values(self):
        return sum(t.data.size for t in self._params.values())


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def _topo_order(loss):
    order = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p._backward is not None or p.requires_grad:
                stack_.append((p, False))
    return order


def backward(loss, params):
    """Gradients of a scalar loss with respect to every ParamSet entry.

    Parameters not reachable from the loss map to zero arrays of the
    matching shape.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
        node._grad_owned = False
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad.reshape(node.data.shape))
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
        p._grad_owned = False
    return out


def finite_diff_check(loss_fn, params, eps=1e-5, samples=30, rng=None):
    """Compare analytic gradients against central differences.

    ``loss_fn`` takes no arguments, reads ``params`` and returns a scalar
    Tensor; it must be deterministic (fixed noise draws).  ``samples``
    scalar coordinates are probed, chosen uniformly over all parameters.
    Returns the maximum relative error (absolute error when both the
    analytic and numeric values are below 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"finite_diff_check: eps={eps} outside [1e-7, 1e-3]")
    v1 = float(loss_fn().data)
    v2 = float(loss_fn().data)
    if v1 != v2:
        raise ValueError(
            f"finite_diff_check: loss_fn is not deterministic ({v1!r} != {v2!r}); "
            "freeze all noise draws before checking"
        )
    grads = backward(loss_fn(), params)
    entries = [(name, t) for name, t in params.items()]
    coords = []
    for name, t in entries:
        coords.extend((name, k) for k in range(t.data.size))
    if rng is None:
        rng = np.random.default_rng(0)
    if samples < len(coords):
        chosen = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[int(i)] for i in chosen]
    worst = 0.0
    for name, k in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[k]
        flat[k] = orig + eps
        f_plus = float(loss_fn().data)
        flat[k] = orig - eps
        f_minus = float(loss_fn().data)
        flat[k] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        an = float(grads[name].reshape(-1)[k])
        scale_ = max(abs(an), abs(fd))
        err = abs(an - fd) if scale_ < 1e-8 else abs(an - fd) / scale_
        worst = max(worst, err)
    return worst
