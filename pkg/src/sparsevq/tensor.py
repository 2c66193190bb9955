"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: just enough operations for attention
blocks, linear layers, layer normalization, softmax, and straight-through
quantization. Values are row-major ``numpy`` arrays of 64-bit floats.

Gradients are recorded on an explicit :class:`Tape`. Operations executed
while a tape is active append nodes in execution order, which is already
a valid topological order, so the backward pass is a single reverse sweep
over the node list. A tape is meant to live for one training step:

    with Tape() as tape:
        loss = ...          # forward pass, nodes recorded
        backward(loss)      # grads accumulate into .grad buffers

Tapes are single-threaded. Tensors detached from any tape are plain
immutable values.

Broadcasting is restricted to the leading-axis form: two operands either
have identical shapes, or the smaller shape must equal the trailing axes
of the larger one (e.g. adding a ``[d]`` bias to ``[n, d]`` rows).
Size-1 axis stretching is not supported; materialize instead.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeMismatchError, UsageError

# When enabled, every created value is checked for NaN/Inf.
DEBUG_CHECK_FINITE = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array, optionally participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if DEBUG_CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional["_Node"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """A copy of the underlying values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, no grad requirement, no tape participation."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # Operator sugar; scalars route through scale / add_scalar.
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class _Node:
    """One recorded operation: output, parents, and a backward closure."""

    __slots__ = ("out", "parents", "backward_fn", "tape")

    def __init__(self, out: Tensor, parents: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], None], tape: "Tape"):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of operations for one backward pass.

    Nodes are appended in execution order; parents always precede their
    consumers, so reversing the list gives a valid backward schedule.
    A tape can be consumed by :func:`backward` exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STATE.stack.pop()
        assert popped is self
        return False


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _TapeState()


def _active_tape() -> Optional[Tape]:
    return _STATE.stack[-1] if _STATE.stack else None


def _record(data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Create a result tensor, recording a node if a tape is active."""
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    tape = _active_tape()
    tracked = [p for p in parents if p.requires_grad or p._node is not None]
    out.requires_grad = bool(tracked)
    if tape is not None and tracked:
        node = _Node(out, tracked, backward_fn, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` for every reachable tensor.

    ``loss`` must hold a single element and must have been computed under
    an active tape. Gradients add across multiple uses of a tensor.
    """
    if loss.size != 1:
        raise UsageError("backward requires a scalar loss")
    if loss._node is None:
        raise UsageError("loss is not attached to an active tape")
    tape = loss._node.tape
    if tape._consumed:
        raise UsageError("tape already consumed by a previous backward call")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    # Reverse visit; each node exactly once.
    for node in reversed(tape.nodes):
        if node.out.grad is None:
            continue
        node.backward_fn(node.out.grad)


# ---------------------------------------------------------------------------
# broadcasting helpers (leading-axis rule)
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    # Scalars (0-d) broadcast everywhere; otherwise the smaller shape must
    # equal the trailing axes of the larger one exactly.
    if len(small) == len(big) or (small and big[-len(small):] != small):
        raise ShapeMismatchError(
            f"shapes {sa} and {sb} are not leading-broadcast compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over the leading axes added by broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise family
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data + b.data

    def bw(g):
        a.accumulate_grad(_reduce_to(g, a.data.shape))
        b.accumulate_grad(_reduce_to(g, b.data.shape))

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data - b.data

    def bw(g):
        a.accumulate_grad(_reduce_to(g, a.data.shape))
        b.accumulate_grad(_reduce_to(-g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data * b.data

    def bw(g):
        a.accumulate_grad(_reduce_to(g * b.data, a.data.shape))
        b.accumulate_grad(_reduce_to(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data / b.data

    def bw(g):
        a.accumulate_grad(_reduce_to(g / b.data, a.data.shape))
        b.accumulate_grad(_reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bw(g):
        a.accumulate_grad(g * s)

    return _record(out, (a,), bw)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = a.data + s

    def bw(g):
        a.accumulate_grad(g)

    return _record(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def bw(g):
        a.accumulate_grad(g * mask)

    return _record(out, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """GELU in the exact erf form: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a.accumulate_grad(g * (cdf + x * pdf))

    return _record(out, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def bw(g):
        a.accumulate_grad(g * np.sign(a.data))

    return _record(out, (a,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; contributes zero gradient to its input."""
    return Tensor(a.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.data.shape).copy())

    return _record(np.asarray(out), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return _record(out, (a,), bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.ascontiguousarray(a.data.swapaxes(ax1, ax2))

    def bw(g):
        a.accumulate_grad(g.swapaxes(ax1, ax2))

    return _record(out, (a,), bw)


def patchify(a: Tensor, patch_len: int, stride: int) -> Tensor:
    """Sliding windows over the last axis.

    [..., L] -> [..., n_patches, patch_len] with patch i covering
    ``[i*stride, i*stride + patch_len)``. A trailing remainder shorter
    than ``patch_len`` is dropped. Overlapping patches accumulate
    gradient additively into shared positions.
    """
    L = a.data.shape[-1]
    if patch_len > L:
        raise ShapeMismatchError(
            f"patch length {patch_len} exceeds series length {L}")
    if patch_len < 1 or stride < 1:
        raise ShapeMismatchError("patch length and stride must be >= 1")
    n = (L - patch_len) // stride + 1
    out = np.stack([a.data[..., i * stride:i * stride + patch_len]
                    for i in range(n)], axis=-2)

    def bw(g):
        gx = np.zeros_like(a.data)
        for i in range(n):
            gx[..., i * stride:i * stride + patch_len] += g[..., i, :]
        a.accumulate_grad(gx)

    return _record(out, (a,), bw)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Row gather: output shape = index.shape + a.shape[1:].

    Backward scatter-adds into the gathered rows, so repeated indices
    accumulate.
    """
    idx = np.asarray(index)
    out = a.data[idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        a.accumulate_grad(ga)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes.

    Leading axes must be identical, or one operand must be a plain 2-D
    matrix (shared weights); in that case its gradient sums over the
    other operand's leading axes.
    """
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeMismatchError("matmul operands must be at least 2-D")
    if sa[-1] != sb[-2]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {sa} x {sb}")
    if len(sa) > 2 and len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ShapeMismatchError(
            f"matmul leading dimensions disagree: {sa} x {sb}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        a.accumulate_grad(_reduce_to(ga, a.data.shape))
        b.accumulate_grad(_reduce_to(gb, b.data.shape))

    return _record(out, (a, b), bw)


def linsolve(m: Tensor, b: Tensor) -> Tensor:
    """Solve m @ w = b for w (batched over leading axes of m).

    m: [..., k, k], b: [..., k, r]. Differentiates through the solve:
    for w = m^-1 b, grad_b = m^-T g and grad_m = -grad_b w^T.
    """
    if m.data.shape[-1] != m.data.shape[-2]:
        raise ShapeMismatchError("linsolve needs square systems")
    if m.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeMismatchError(
            f"linsolve shapes disagree: {m.data.shape} vs {b.data.shape}")
    try:
        w = np.linalg.solve(m.data, b.data)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular linear system: {exc}") from exc

    mt = m.data.swapaxes(-1, -2)

    def bw(g):
        gb = np.linalg.solve(mt, g)
        gm = -gb @ w.swapaxes(-1, -2)
        b.accumulate_grad(_reduce_to(gb, b.data.shape))
        m.accumulate_grad(_reduce_to(gm, m.data.shape))

    return _record(w, (m, b), bw)


# ---------------------------------------------------------------------------
# softmax / layernorm
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max subtraction."""
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatchError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out * (g - dot))

    return _record(out, (a,), bw)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Variance is biased (divide by the axis length). ``gain`` and ``bias``
    must match the last-axis extent.
    """
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatchError(
            f"layernorm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match last axis {d}")
    if eps <= 0:
        raise ShapeMismatchError("layernorm eps must be positive")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def bw(g):
        dxhat = g * gain.data
        # Classic layernorm backward, row-wise over the last axis.
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (dxhat - m1 - xhat * m2)
        a.accumulate_grad(ga)
        red = tuple(range(g.ndim - 1))
        gain.accumulate_grad((g * xhat).sum(axis=red))
        bias.accumulate_grad(g.sum(axis=red))

    return _record(out, (a, gain, bias), bw)


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, std: float = 1.0,
          requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)
