"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tape` records every op applied while it is active on the current
thread; :meth:`Tape.backward` walks the record in reverse and fills exact
analytic gradients. Tensors built directly from data are constants; the
tape silently registers them as leaves the first time an op consumes them,
so parameter gradients are always retrievable via :meth:`Tape.grad`.

Broadcasting is limited to scalar-with-tensor. Anything else (bias rows,
row gathers, column concatenation) is an explicit op, which keeps shape
bugs loud.

Numerical policy: ``log`` clamps its argument at ``LOG_EPS`` so entropies
of near-one-hot distributions stay finite; softmax subtracts the row max;
the Euclidean row-norm gradient guards its denominator with ``NORM_EPS``.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .backend import kernels as K

LOG_EPS = 1e-12
NORM_EPS = 1e-12


class AutodiffError(Exception):
    """Tape or op misuse (detached loss, repeated backward, bad scalar)."""


class ShapeError(AutodiffError):
    """Operand shapes do not conform for an op."""


class GradCheckError(AutodiffError):
    """A gradient estimate came out NaN during numerical checking."""


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense float64 array, optionally attached to a node of the active tape."""

    __slots__ = ("values", "node")

    def __init__(self, values, node: "Node | None" = None):
        self.values = _as_array(values)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no node: a constant from the tape's point of view."""
        return Tensor(self.values)

    def __repr__(self) -> str:
        tag = "attached" if self.node is not None else "constant"
        return f"Tensor(shape={self.values.shape}, {tag})"


class Node:
    """One recorded operation: kind, input nodes, and a backward closure."""

    __slots__ = ("op", "inputs", "backward_fn", "shape", "index", "tape")

    def __init__(self, op, inputs, backward_fn, shape, index, tape):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.shape = shape
        self.index = index
        self.tape = tape


_LOCAL = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Append-only op record with per-node gradient accumulators.

    Use as a context manager; one tape may be active per thread. After
    ``backward`` the tape refuses a second backward until ``reset`` so
    gradients never accumulate silently across calls.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: list[np.ndarray | None] | None = None
        self._leaves: dict[int, Node] = {}
        self._leaf_refs: list[Tensor] = []
        self._ran_backward = False

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise AutodiffError("a tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _LOCAL.tape = None
        return False

    def reset(self) -> None:
        """Drop all recorded nodes and gradients; the tape is reusable."""
        self.nodes.clear()
        self.grads = None
        self._leaves.clear()
        self._leaf_refs.clear()
        self._ran_backward = False

    # -- graph construction -------------------------------------------

    def watch(self, tensor: Tensor) -> Node:
        """Register a constant tensor as a gradient-receiving leaf."""
        node = self._leaves.get(id(tensor))
        if node is None:
            node = self._append("leaf", (), None, tensor.values.shape)
            self._leaves[id(tensor)] = node
            self._leaf_refs.append(tensor)  # keep id() stable
        return node

    def node_for(self, tensor: Tensor) -> Node:
        if tensor.node is not None and tensor.node.tape is self:
            return tensor.node
        # Constants and outputs of dead tapes both enter as leaves.
        return self.watch(tensor)

    def _append(self, op, inputs, backward_fn, shape) -> Node:
        node = Node(op, inputs, backward_fn, shape, len(self.nodes), self)
        self.nodes.append(node)
        return node

    # -- differentiation ----------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Fill gradients for every node reachable from ``loss``."""
        if loss.node is None or loss.node.tape is not self:
            raise AutodiffError("backward needs a loss recorded on this tape")
        if loss.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._ran_backward:
            raise AutodiffError("backward already ran on this tape; call reset() first")
        self._ran_backward = True

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node.index] = np.ones(loss.node.shape, dtype=np.float64)
        for idx in range(loss.node.index, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.backward_fn is None:
                continue
            parts = node.backward_fn(g)
            for parent, part in zip(node.inputs, parts):
                if part is None:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = part.copy()
                else:
                    grads[parent.index] += part
        self.grads = grads

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward's loss w.r.t. ``tensor``.

        Tensors the loss never touched get a zero gradient of their shape.
        """
        if self.grads is None:
            raise AutodiffError("no backward has run on this tape")
        node = None
        if tensor.node is not None and tensor.node.tape is self:
            node = tensor.node
        else:
            node = self._leaves.get(id(tensor))
        if node is None:
            return np.zeros(tensor.values.shape, dtype=np.float64)
        g = self.grads[node.index]
        if g is None:
            return np.zeros(node.shape, dtype=np.float64)
        return g


def _record(op: str, out_values: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is None:
        return Tensor(out_values)
    nodes = tuple(tape.node_for(p) for p in parents)
    node = tape._append(op, nodes, backward_fn, out_values.shape)
    return Tensor(out_values, node)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.values.shape != b.values.shape:
        raise ShapeError(f"{op}: operand shapes {a.values.shape} and {b.values.shape} differ")


# ---------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------

def constant(values) -> Tensor:
    return Tensor(values)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul: needs 2-D operands, got {a.values.shape} and {b.values.shape}")
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.values.shape} and {b.values.shape} differ")
    av, bv = a.values, b.values
    out = K.matmul(av, bv)

    def backward(g):
        return K.matmul_grads(g, av, bv)

    return _record("matmul", out, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("add", a, b)
        out = K.add(a.values, b.values)
        return _record("add", out, (a, b), lambda g: (g, g))
    return affine(a, 1.0, float(b))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("sub", a, b)
        out = K.sub(a.values, b.values)
        return _record("sub", out, (a, b), lambda g: (g, K.affine(g, -1.0, 0.0)))
    return affine(a, 1.0, -float(b))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("mul", a, b)
        av, bv = a.values, b.values
        out = K.mul(av, bv)
        return _record("mul", out, (a, b),
                       lambda g: (K.mul(g, bv), K.mul(g, av)))
    return affine(a, float(b), 0.0)


def affine(a: Tensor, scale: float, shift: float) -> Tensor:
    """Elementwise ``scale * a + shift`` with python-scalar coefficients."""
    scale = float(scale)
    shift = float(shift)
    out = K.affine(a.values, scale, shift)
    return _record("affine", out, (a,), lambda g: (K.affine(g, scale, 0.0),))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-n vector to every row of an (m, n) matrix."""
    if a.values.ndim != 2 or b.values.ndim != 1 or a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"add_bias: got matrix {a.values.shape} and vector {b.values.shape}")
    out = K.add_bias(a.values, b.values)
    return _record("add_bias", out, (a, b), lambda g: (g, K.bias_grad(g)))


def relu(a: Tensor) -> Tensor:
    av = a.values
    out = K.relu(av)
    return _record("relu", out, (a,), lambda g: (K.relu_grad(g, av),))


def sigmoid(a: Tensor) -> Tensor:
    out = K.sigmoid(a.values)
    return _record("sigmoid", out, (a,), lambda g: (K.sigmoid_grad(g, out),))


def exp(a: Tensor) -> Tensor:
    out = K.exp(a.values)
    return _record("exp", out, (a,), lambda g: (K.mul(g, out),))


def log(a: Tensor) -> Tensor:
    """Natural log of ``max(a, LOG_EPS)``; zero gradient on the clamped side."""
    av = a.values
    out = K.log_clamped(av, LOG_EPS)
    return _record("log", out, (a,), lambda g: (K.log_clamped_grad(g, av, LOG_EPS),))


def softmax_rows(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"softmax_rows: needs a 2-D operand, got {a.values.shape}")
    out = K.softmax_rows(a.values)
    return _record("softmax_rows", out, (a,), lambda g: (K.softmax_rows_grad(g, out),))


def sum_all(a: Tensor) -> Tensor:
    av = a.values
    out = np.asarray(K.sum_all(av))
    return _record("sum_all", out, (a,),
                   lambda g: (np.full(av.shape, float(g), dtype=np.float64),))


def mean_all(a: Tensor) -> Tensor:
    av = a.values
    out = np.asarray(K.mean_all(av))
    return _record("mean_all", out, (a,),
                   lambda g: (np.full(av.shape, float(g) / av.size, dtype=np.float64),))


def norm_rows(a: Tensor, q: int = 2) -> Tensor:
    """Per-row q-norm of an (m, n) matrix, q in {1, 2}."""
    if q not in (1, 2):
        raise ValueError(f"norm_rows: q must be 1 or 2, got {q}")
    if a.values.ndim != 2:
        raise ShapeError(f"norm_rows: needs a 2-D operand, got {a.values.shape}")
    av = a.values
    out = K.norm_rows(av, q)
    return _record("norm_rows", out, (a,),
                   lambda g: (K.norm_rows_grad(g, av, out, q, NORM_EPS),))


def hinge(a: Tensor, threshold: float) -> Tensor:
    """Elementwise ``max(0, threshold - a)``."""
    t = float(threshold)
    av = a.values
    out = K.hinge(av, t)
    return _record("hinge", out, (a,), lambda g: (K.hinge_grad(g, av, t),))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[0] != b.values.shape[0]:
        raise ShapeError(f"concat_cols: row counts of {a.values.shape} and {b.values.shape} differ")
    out = np.concatenate([a.values, b.values], axis=1)
    split = a.values.shape[1]

    def backward(g):
        return (np.ascontiguousarray(g[:, :split]),
                np.ascontiguousarray(g[:, split:]))

    return _record("concat_cols", out, (a, b), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows of an (m, n) matrix; backward scatter-adds."""
    if a.values.ndim != 2:
        raise ShapeError(f"take_rows: needs a 2-D operand, got {a.values.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: index must be 1-D, got {idx.shape}")
    n_rows = a.values.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError(f"take_rows: index out of range for {n_rows} rows")
    out = K.take_rows(a.values, idx)
    return _record("take_rows", out, (a,),
                   lambda g: (K.take_rows_grad(g, idx, n_rows),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.values.shape} as {shape}")
    old_shape = a.values.shape
    out = a.values.reshape(shape)
    return _record("reshape", out, (a,),
                   lambda g: (np.ascontiguousarray(g.reshape(old_shape)),))


def grad_reverse(a: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lam.

    The output shares the input's buffer, so the forward pass is
    bit-identical by construction.
    """
    lam = float(lam)
    if not math.isfinite(lam):
        raise ValueError("grad_reverse: lambda must be finite")
    if lam < 0.0:
        raise ValueError("grad_reverse: lambda is a reversal magnitude and must be >= 0")
    return _record("grad_reverse", a.values, (a,),
                   lambda g: (K.affine(g, -lam, 0.0),))


# ---------------------------------------------------------------------
# numerical gradient checking
# ---------------------------------------------------------------------

def _eval_scalar(f: Callable[[], Tensor]) -> float:
    out = f()
    if out.size != 1:
        raise AutodiffError("grad_check: f must return a scalar tensor")
    return out.item()


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a no-argument closure over ``params`` returning a scalar
    tensor; it must be deterministic. The error at each coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
        analytic = [np.array(tape.grad(p), copy=True) for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.values.reshape(-1)
        an = analytic[pi].reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + eps
            f_hi = _eval_scalar(f)
            flat[ci] = orig - eps
            f_lo = _eval_scalar(f)
            flat[ci] = orig
            numeric = (f_hi - f_lo) / (2.0 * eps)
            a = float(an[ci])
            if math.isnan(a) or math.isnan(numeric):
                raise GradCheckError(
                    f"NaN gradient estimate at parameter {pi}, coordinate {ci} "
                    f"(analytic={a}, numeric={numeric})")
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > worst:
                worst = rel
    return worst
