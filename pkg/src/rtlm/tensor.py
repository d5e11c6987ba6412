"""Dense float32 tensors with tape-based reverse-mode automatic differentiation.

Shapes are explicit and checked: binary elementwise ops require identical
shapes, except that a 1-d vector may broadcast over the rows of a 2-d operand
(bias, gain, and the like). The graph is rebuilt on every forward pass; a
GradTape is the topologically ordered record of the ops reached from a loss,
replayed in reverse by backward().
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32

# Large negative logit for masked attention entries. After row-max
# subtraction exp() underflows to exactly 0, so masked keys contribute
# nothing to the softmax.
MASK_FILL = -1e9


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


_tls = threading.local()


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


class Tensor:
    """Row-major float32 array, optionally participating in the gradient tape.

    Leaves constructed with requires_grad=True own a zero-initialized grad
    buffer that backward() accumulates into (repeated calls accumulate until
    zero_grad()). Intermediate results allocate their grad lazily during
    replay and are wiped at the start of each backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_inputs", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._inputs: tuple = ()
        self._backward: Optional[Callable[[], None]] = None
        self._op = ""

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._inputs

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> "GradTape":
        return backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Topologically ordered record of the ops reachable from one root.

    entries holds tensors in forward execution order; reverse iteration is a
    valid replay order (every input precedes its consumers). op_names exists
    for inspection in tests.
    """

    def __init__(self, entries: list):
        self.entries = entries

    @property
    def op_names(self) -> list:
        return [t._op for t in self.entries if t._op]

    def tensors(self) -> list:
        return self.entries

    @staticmethod
    def from_root(root: "Tensor") -> "GradTape":
        order: list = []
        seen: set = set()
        stack: list = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node._inputs:
                stack.append((inp, False))
        return GradTape(order)


def backward(loss: Tensor) -> GradTape:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf below loss.

    loss must be scalar. Returns the tape that was replayed so callers can
    inspect which ops contributed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return GradTape([])
    tape = GradTape.from_root(loss)
    for t in tape.entries:
        if not t.is_leaf:
            t.grad = None
    _accum(loss, np.ones_like(loss.data))
    for t in reversed(tape.entries):
        if t._backward is not None and t.grad is not None:
            t._backward()
    return tape


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, inputs: Sequence[Tensor], op: str,
            make_backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.grad = None
        out._inputs = tuple(inputs)
        out._op = op
        out._backward = make_backward(out)
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    """Returns (a_bcast, b_bcast) flags for the allowed vector-over-rows case."""
    if a.shape == b.shape:
        return False, False
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return False, True
    if a.data.ndim == 1 and b.data.ndim == 2 and b.shape[1] == a.shape[0]:
        return True, False
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a_vec, b_vec = _binary_shapes(a, b, "add")

    def make_backward(out):
        def _bwd():
            g = out.grad
            if a.requires_grad:
                _accum(a, g.sum(axis=0) if a_vec else g)
            if b.requires_grad:
                _accum(b, g.sum(axis=0) if b_vec else g)
        return _bwd

    return _result(a.data + b.data, (a, b), "add", make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a_vec, b_vec = _binary_shapes(a, b, "mul")

    def make_backward(out):
        def _bwd():
            g = out.grad
            if a.requires_grad:
                ga = g * b.data
                _accum(a, ga.sum(axis=0) if a_vec else ga)
            if b.requires_grad:
                gb = g * a.data
                _accum(b, gb.sum(axis=0) if b_vec else gb)
        return _bwd

    return _result(a.data * b.data, (a, b), "mul", make_backward)


def scale(x: Tensor, s: float) -> Tensor:
    s32 = DTYPE(s)

    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                _accum(x, out.grad * s32)
        return _bwd

    return _result(x.data * s32, (x,), "scale", make_backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def make_backward(out):
        def _bwd():
            g = out.grad
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        return _bwd

    return _result(a.data @ b.data, (a, b), "matmul", make_backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: need 2-d tensor, got {x.shape}")

    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                _accum(x, out.grad.T)
        return _bwd

    return _result(np.ascontiguousarray(x.data.T), (x,), "transpose", make_backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    if not parts:
        raise ShapeError("concat: empty input list")
    for p in parts:
        if p.data.ndim != 2:
            raise ShapeError(f"concat: need 2-d tensors, got {p.shape}")
    other = 1 - axis
    widths = {p.shape[other] for p in parts}
    if len(widths) > 1:
        raise ShapeError(f"concat: mismatched shapes {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_backward(out):
        def _bwd():
            g = out.grad
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    _accum(p, g[lo:hi, :] if axis == 0 else g[:, lo:hi])
        return _bwd

    return _result(np.concatenate([p.data for p in parts], axis=axis),
                   tuple(parts), "concat", make_backward)


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo <= hi <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{lo}:{hi}] invalid for shape {x.shape}")

    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                g[lo:hi, :] = out.grad
                _accum(x, g)
        return _bwd

    return _result(x.data[lo:hi, :].copy(), (x,), "slice_rows", make_backward)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo <= hi <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{lo}:{hi}] invalid for shape {x.shape}")

    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                g[:, lo:hi] = out.grad
                _accum(x, g)
        return _bwd

    return _result(x.data[:, lo:hi].copy(), (x,), "slice_cols", make_backward)


def slice_vec(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 1 or not (0 <= lo <= hi <= x.shape[0]):
        raise ShapeError(f"slice_vec: [{lo}:{hi}] invalid for shape {x.shape}")

    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                g[lo:hi] = out.grad
                _accum(x, g)
        return _bwd

    return _result(x.data[lo:hi].copy(), (x,), "slice_vec", make_backward)


def relu(x: Tensor) -> Tensor:
    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                _accum(x, out.grad * (x.data > 0))
        return _bwd

    return _result(np.maximum(x.data, DTYPE(0)), (x,), "relu", make_backward)


def sigmoid(x: Tensor) -> Tensor:
    y = DTYPE(1) / (DTYPE(1) + np.exp(-x.data))

    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                _accum(x, out.grad * out.data * (DTYPE(1) - out.data))
        return _bwd

    return _result(y, (x,), "sigmoid", make_backward)


def tanh(x: Tensor) -> Tensor:
    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                _accum(x, out.grad * (DTYPE(1) - out.data * out.data))
        return _bwd

    return _result(np.tanh(x.data), (x,), "tanh", make_backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Numerically stabilized row-wise softmax of a 2-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: need 2-d tensor, got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=1, keepdims=True, dtype=np.float64)).astype(DTYPE)

    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                g = out.grad
                dot = (g * out.data).sum(axis=1, keepdims=True)
                _accum(x, out.data * (g - dot))
        return _bwd

    return _result(y, (x,), "softmax_rows", make_backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by the affine transform gamma, beta."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: need 2-d tensor, got {x.shape}")
    n = x.shape[1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match row width {n}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = DTYPE(1) / np.sqrt(var + DTYPE(eps))
    xhat = (x.data - mu) * inv

    def make_backward(out):
        def _bwd():
            g = out.grad
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=0))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=0))
            if x.requires_grad:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                _accum(x, (dxhat - m1 - xhat * m2) * inv)
        return _bwd

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta),
                   "layer_norm", make_backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; the result is a constant leaf, so no gradient ever
    flows back through it. Shares the data buffer (ops never mutate data)."""
    return Tensor(x.data)


def sum_all(x: Tensor) -> Tensor:
    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                _accum(x, np.full_like(x.data, out.grad.reshape(())))
        return _bwd

    return _result(np.asarray(x.data.sum(), dtype=DTYPE), (x,), "sum_all", make_backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Rows of table selected by integer ids; gradients scatter-add back."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: need 2-d table, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: ids must be 1-d, got shape {idx.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx[(idx < 0) | (idx >= n)][0])
        raise IndexError(f"gather_rows: id {bad} out of range [0, {n})")

    def make_backward(out):
        def _bwd():
            if table.requires_grad:
                g = np.zeros_like(table.data)
                np.add.at(g, idx, out.grad)
                _accum(table, g)
        return _bwd

    return _result(table.data[idx], (table,), "gather_rows", make_backward)


def take_along_rows(x: Tensor, idx) -> Tensor:
    """out[i, j] = x[i, idx[i, j]] for an integer index matrix idx."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_along_rows: need 2-d tensor, got {x.shape}")
    ix = np.asarray(idx, dtype=np.int64)
    if ix.ndim != 2 or ix.shape[0] != x.shape[0]:
        raise ShapeError(
            f"take_along_rows: index shape {ix.shape} does not match rows of {x.shape}")
    if ix.size and (ix.min() < 0 or ix.max() >= x.shape[1]):
        raise IndexError("take_along_rows: column index out of range")
    rows = np.arange(x.shape[0])[:, None]

    def make_backward(out):
        def _bwd():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                np.add.at(g, (rows, ix), out.grad)
                _accum(x, g)
        return _bwd

    return _result(x.data[rows, ix], (x,), "take_along_rows", make_backward)


def cross_entropy_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of targets under row-wise softmax(logits).

    mask, when given, weights each position 0 or 1; masked positions
    contribute exactly zero to the loss and to the gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_logits: need 2-d logits, got {logits.shape}")
    t, v = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (t,):
        raise ShapeError(
            f"cross_entropy_logits: targets shape {tgt.shape} does not match {t} rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError("cross_entropy_logits: target id out of range")
    if mask is None:
        m = np.ones(t, dtype=DTYPE)
    else:
        m = np.asarray(mask, dtype=DTYPE)
        if m.shape != (t,):
            raise ShapeError(
                f"cross_entropy_logits: mask shape {m.shape} does not match {t} rows")
    n = m.sum()
    if n == 0:
        raise ValueError("cross_entropy_logits: mask excludes every position")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True, dtype=np.float64)
    probs = (e / denom).astype(DTYPE)
    logp = shifted - np.log(denom, dtype=np.float64).astype(DTYPE)
    rows = np.arange(t)
    loss = np.asarray(-(logp[rows, tgt] * m).sum() / n, dtype=DTYPE)

    def make_backward(out):
        def _bwd():
            if logits.requires_grad:
                g = probs.copy()
                g[rows, tgt] -= DTYPE(1)
                g *= (m / n)[:, None]
                _accum(logits, g * out.grad.reshape(()))
        return _bwd

    return _result(loss, (logits,), "cross_entropy_logits", make_backward)


def log_softmax_rows_f64(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax computed in float64, for score accumulation."""
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
