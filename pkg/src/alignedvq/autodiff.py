"""Reverse-mode differentiation over a closed set of dense array kernels.

Values are row-major float32 numpy arrays by default; float64 graphs are
supported so numerical oracles can run the identical code path at higher
precision. Reductions (sums, means, variance) accumulate in float64 and cast
back to the operand dtype. There is no general broadcasting: the only
shape-bending ops are an explicit bias add over the last dimension, a batch
tile, and concatenation along the token axis.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class BackwardError(RuntimeError):
    """Misuse of the backward pass (non-scalar root, repeated call, ...)."""


# Graph recording is confined to one thread per training step; pure forward
# evaluation on other threads must not observe this thread's no_grad state.
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording. Computed values are bit-identical either way."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


def as_array(data, dtype=np.float32) -> np.ndarray:
    """Validate data from an external source: finite, contiguous, row-major."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values rejected at construction")
    return arr


class Var:
    """A node of the differentiation graph: value plus its operation record.

    Leaves are created from plain arrays; ops return derived nodes. After
    ``backward()`` on a scalar root, every reachable node carries a gradient
    of the same shape as its value.
    """

    __slots__ = ("value", "grad", "_parents", "_bwd", "_backward_done")

    def __init__(self, value, parents=(), bwd=None):
        if isinstance(value, np.ndarray):
            self.value = value
        elif isinstance(value, np.generic):
            self.value = np.asarray(value)  # 0-d, dtype preserved
        else:
            self.value = np.asarray(value, dtype=np.float32)
        self.grad = None
        self._parents = parents
        self._bwd = bwd
        self._backward_done = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


def leaf(data, dtype=np.float32) -> Var:
    """Wrap validated external data as a graph leaf."""
    return Var(as_array(data, dtype=dtype))


def _node(value, parents, bwd) -> Var:
    if not _recording():
        return Var(value)
    return Var(value, parents, bwd)


def _accum(node: Var, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=node.value.dtype, copy=True)
    else:
        node.grad += g


def _sum_to(g: np.ndarray, axes, dtype) -> np.ndarray:
    return np.sum(g, axis=axes, dtype=np.float64).astype(dtype)


def _check_same_shape(a: Var, b, op: str) -> None:
    bs = b.shape if isinstance(b, (Var, np.ndarray)) else np.shape(b)
    if a.shape != tuple(bs):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {tuple(bs)}")


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    _check_same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.value + b.value, (a, b), bwd)


def sub(a: Var, b: Var) -> Var:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.value - b.value, (a, b), bwd)


def add_bias(x: Var, b: Var) -> Var:
    """x + b where b spans the last dimension of x (the only broadcast add)."""
    if b.value.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last dim of {x.shape}")
    lead = tuple(range(x.value.ndim - 1))

    def bwd(g):
        _accum(x, g)
        _accum(b, _sum_to(g, lead, b.value.dtype))

    return _node(x.value + b.value, (x, b), bwd)


def tile_batch(p: Var, batch: int) -> Var:
    """Repeat a parameter along a new leading batch axis."""
    value = np.ascontiguousarray(np.broadcast_to(p.value, (batch,) + p.shape))

    def bwd(g):
        _accum(p, _sum_to(g, 0, p.value.dtype))

    return _node(value, (p,), bwd)


def concat(a: Var, b: Var, axis: int) -> Var:
    split = a.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accum(a, ga)
        _accum(b, gb)

    return _node(np.concatenate([a.value, b.value], axis=axis), (a, b), bwd)


def mul_scalar(x: Var, s: float) -> Var:
    s = float(s)

    def bwd(g):
        _accum(x, s * g)

    return _node(x.value * np.asarray(s, dtype=x.dtype), (x,), bwd)


def mul_const(x: Var, c: np.ndarray) -> Var:
    """Elementwise product with a constant array (no gradient into c)."""
    _check_same_shape(x, c, "mul_const")

    def bwd(g):
        _accum(x, c * g)

    return _node(x.value * c, (x, ), bwd)


def scale(s: Var, x: Var) -> Var:
    """Multiply a tensor by a learnable scalar."""
    if s.shape != ():
        raise ShapeError(f"scale: gate must be a scalar, got shape {s.shape}")

    def bwd(g):
        _accum(s, np.sum(g * x.value, dtype=np.float64).astype(s.dtype))
        _accum(x, s.value * g)

    return _node(s.value * x.value, (s, x), bwd)


def reshape(x: Var, shape) -> Var:
    shape = tuple(shape)

    def bwd(g):
        _accum(x, g.reshape(x.shape))

    return _node(x.value.reshape(shape), (x,), bwd)


def transpose(x: Var, axes) -> Var:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return _node(np.transpose(x.value, axes), (x,), bwd)


def first_token(x: Var) -> Var:
    """Select token 0 of a [B, N, C] stream (the pooled classification row)."""
    if x.value.ndim != 3:
        raise ShapeError(f"first_token expects [B, N, C], got {x.shape}")

    def bwd(g):
        full = np.zeros_like(x.value)
        full[:, 0, :] = g
        _accum(x, full)

    return _node(np.ascontiguousarray(x.value[:, 0, :]), (x,), bwd)


def straight_through(x: Var, replacement: np.ndarray) -> Var:
    """Forward the replacement value; pass the incoming gradient through to x."""
    _check_same_shape(x, replacement, "straight_through")

    def bwd(g):
        _accum(x, g)

    return _node(np.asarray(replacement, dtype=x.dtype), (x,), bwd)


# ---------------------------------------------------------------------------
# dense algebra
# ---------------------------------------------------------------------------

def matmul(a: Var, b: Var) -> Var:
    """a @ b for 2-D operands, [..., M, K] @ [K, N], or stacked batches with
    identical leading dimensions."""
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree {av.shape} @ {bv.shape}")
    if bv.ndim == 2:
        def bwd(g):
            _accum(a, g @ bv.swapaxes(-1, -2))
            a2 = av.reshape(-1, av.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            _accum(b, a2.T @ g2)
    elif av.shape[:-2] == bv.shape[:-2]:
        def bwd(g):
            _accum(a, g @ bv.swapaxes(-1, -2))
            _accum(b, av.swapaxes(-1, -2) @ g)
    else:
        raise ShapeError(f"matmul: leading dimensions disagree {av.shape} @ {bv.shape}")

    return _node(av @ bv, (a, b), bwd)


def tanh(x: Var) -> Var:
    t = np.tanh(x.value)

    def bwd(g):
        _accum(x, (1.0 - t * t) * g)

    return _node(t, (x,), bwd)


def gelu(x: Var) -> Var:
    """Exact (erf-based) GELU."""
    phi = 0.5 * (1.0 + erf(x.value * _INV_SQRT2))
    out = x.value * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x.value * x.value) * _INV_SQRT_2PI
        _accum(x, (phi + x.value * pdf) * g)

    return _node(out.astype(x.dtype, copy=False), (x,), bwd)


def softmax_rows(x: Var) -> Var:
    shifted = x.value - np.max(x.value, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)

    def bwd(g):
        inner = np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        _accum(x, y * (g - inner))

    return _node(y.astype(x.dtype, copy=False), (x,), bwd)


def layernorm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    """Per-row normalization over the last dimension, then affine."""
    c = x.shape[-1]
    if c < 1:
        raise ShapeError("layernorm: empty feature dimension")
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layernorm: affine shapes {gain.shape}/{bias.shape} do not match C={c}")
    x64 = x.value.astype(np.float64)
    mu = np.mean(x64, axis=-1, keepdims=True)
    var = np.mean((x64 - mu) ** 2, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((x64 - mu) * rstd).astype(x.dtype)
    out = xhat * gain.value + bias.value

    def bwd(g):
        lead = tuple(range(x.value.ndim - 1))
        _accum(gain, _sum_to(g * xhat, lead, gain.dtype))
        _accum(bias, _sum_to(g, lead, bias.dtype))
        dxhat = (g * gain.value).astype(np.float64)
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = rstd * (dxhat - m1 - xhat * m2)
        _accum(x, dx.astype(x.dtype))

    return _node(out.astype(x.dtype, copy=False), (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# reductions / losses
# ---------------------------------------------------------------------------

def sum_all(x: Var) -> Var:
    value = np.asarray(np.sum(x.value, dtype=np.float64), dtype=x.dtype)

    def bwd(g):
        _accum(x, np.full(x.shape, g, dtype=x.dtype))

    return _node(value, (x,), bwd)


def mse(a: Var, b) -> Var:
    """Mean over all elements of the squared difference. b may be a Var or a
    constant array (no gradient into the constant side)."""
    b_var = b if isinstance(b, Var) else None
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=a.dtype)
    _check_same_shape(a, bv, "mse")
    diff = a.value - bv
    n = diff.size
    value = np.asarray(np.sum(diff.astype(np.float64) ** 2) / n, dtype=a.dtype)

    def bwd(g):
        d = (2.0 / n) * diff * g
        _accum(a, d)
        if b_var is not None:
            _accum(b_var, -d)

    parents = (a, b_var) if b_var is not None else (a,)
    return _node(value, parents, bwd)


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean negative log-likelihood over the batch; labels are class indices."""
    if logits.value.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, num_classes], got {logits.shape}")
    labels = np.asarray(labels)
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for batch {batch}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"cross_entropy: label outside [0, {num_classes})")
    z = logits.value.astype(np.float64)
    zmax = np.max(z, axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=-1))
    picked = z[np.arange(batch), labels]
    value = np.asarray(np.mean(lse - picked), dtype=logits.dtype)

    def bwd(g):
        p = np.exp(z - zmax)
        p /= np.sum(p, axis=-1, keepdims=True)
        p[np.arange(batch), labels] -= 1.0
        _accum(logits, (p * (g / batch)).astype(logits.dtype))

    return _node(value, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Var) -> list[Var]:
    # Iterative post-order DFS; parents precede children in the result.
    VISITING, DONE = 0, 1
    state: dict[int, int] = {id(root): VISITING}
    order: list[Var] = []
    stack: list[tuple[Var, iter]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            s = state.get(id(p))
            if s == VISITING:
                raise AssertionError("cycle in differentiation graph")
            if s is None:
                state[id(p)] = VISITING
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            state[id(node)] = DONE
            order.append(node)
            stack.pop()
    return order


def backward(loss: Var) -> None:
    """Populate gradients on every node reachable from a scalar loss.

    Each node's backward rule fires exactly once, in reverse topological
    order. Calling backward twice on the same root is an error.
    """
    if loss.shape != ():
        raise BackwardError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise BackwardError("backward already ran on this graph; rebuild it or reset gradients")
    loss._backward_done = True
    order = _topo_order(loss)
    loss.grad = np.ones((), dtype=loss.dtype)
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
