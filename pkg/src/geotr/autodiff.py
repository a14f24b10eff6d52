"""Dense float64 tensors with an optional reverse-mode tape.

Every op returns a :class:`Tensor`. When a :class:`Tape` is active and at
least one operand requires a gradient, the op appends a node holding its
inputs and a vector-Jacobian closure; :meth:`Tape.backward` then walks the
nodes in reverse once. Outside a tape the ops are plain numpy calls.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w @ w).sum()
    >>> grads = tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import _backend
from .errors import ContractError, DimensionError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output, inputs, vjp):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of differentiable ops, in execution order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, output, inputs, vjp):
        output.node_id = len(self.nodes)
        self.nodes.append(_Node(output, inputs, vjp))

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to every leaf.

        Leaves are tensors created with ``requires_grad=True`` rather than
        produced by a recorded op. Each leaf's ``grad`` attribute is set too.
        """
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.value)
        if loss.node_id is None:
            if not loss.requires_grad:
                return {}
            loss.grad = seed
            return {loss: seed}
        if loss.node_id >= len(self.nodes) or self.nodes[loss.node_id].output is not loss:
            raise ContractError("loss was not recorded on this tape")

        grads = {id(loss): seed}
        leaves = {}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if inp.node_id is None:
                    leaves[key] = inp
        out = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            out[leaf] = grads[key]
        return out


def backward(tape: Tape, loss: "Tensor") -> dict["Tensor", np.ndarray]:
    return tape.backward(loss)


class Tensor:
    """A float64 array, optionally tracked on the active tape."""

    __slots__ = ("value", "requires_grad", "node_id", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = None
        self.grad = None
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value.reshape(-1)[0])

    def detach(self):
        return Tensor(self.value)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.value, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.value**p, (a,), lambda g: (g * p * a.value ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _result(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.value > 0, 1.0, slope)
    return _result(a.value * scale, (a,), lambda g: (g * scale,))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant mask ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        np.where(cond, a.value, b.value),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product.

    ``b`` may be a single matrix applied to every trailing matrix of ``a``
    (``(..., k) @ (k, n)``), or both operands may carry equal batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        k, n = b.shape

        def vjp(g):
            ga = g @ b.value.T
            gb = a.value.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return _result(a.value @ b.value, (a, b), vjp)
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _result(np.matmul(a.value, b.value), (a, b), vjp)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum without ellipses.

    Every index of an operand must also appear in the output or in the other
    operand, so both gradients are themselves einsums.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = spec.replace(" ", "").split("->")
    a_sub, b_sub = lhs.split(",")
    for own, other in ((a_sub, b_sub), (b_sub, a_sub)):
        missing = set(own) - set(out_sub) - set(other)
        if missing:
            raise ContractError(f"einsum index {sorted(missing)} is reduced inside one operand")
    value = np.einsum(spec, a.value, b.value, optimize=True)
    return _result(
        value,
        (a, b),
        lambda g: (
            np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.value, optimize=True),
            np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.value, optimize=True),
        ),
    )


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return _result(
        a.value.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims).copy(),),
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod(
        [a.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    return _result(
        a.value.mean(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims) / count,),
    )


def max_(a, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    a = as_tensor(a)
    arg = np.expand_dims(np.argmax(a.value, axis=axis), axis)
    out = np.take_along_axis(a.value, arg, axis=axis).squeeze(axis)

    def vjp(g):
        ga = np.zeros_like(a.value)
        np.put_along_axis(ga, arg, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _result(out, (a,), vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True))
    out = lse if keepdims else lse.squeeze(axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(a.value - lse),)

    return _result(out, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by subtracting each row max."""
    return softmax(x, axis=-1)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result(a.value[idx], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.value for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _result(
        np.stack([t.value for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    return add(mul(div(xc, sqrt(add(var, eps))), gamma), beta)


def row_norms(x) -> Tensor:
    return sqrt(sum_(mul(x, x), axis=-1))


# ---------------------------------------------------------------------------
# fixed-size decompositions
# ---------------------------------------------------------------------------


def svd3(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix: ``m = U @ diag(s) @ V.T``, ``s`` descending.

    Computed from a Jacobi eigen-solve of ``m.T @ m``; rank-deficient inputs
    get an arbitrary orthonormal completion of ``U``.
    """
    m = m.value if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise DimensionError(f"svd3 expects a 3x3 matrix, got {m.shape}")
    return _backend.kernels.svd3(np.ascontiguousarray(m))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def numerical_gradient(fn: Callable[..., float], arrays: Sequence[np.ndarray], index: int, eps: float = 1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` wrt ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn(*base)
        flat[i] = old - eps
        fm = fn(*base)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradient_error(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``fn`` maps tensors to a scalar tensor. The error per input is
    ``|g_tape - g_fd| / max(|g_tape|, |g_fd|)`` in the Frobenius norm.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*leaves)
    grads = tape.backward(loss)

    def scalar(*arrs):
        return fn(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros_like(leaf.value))
        numeric = numerical_gradient(scalar, arrays, i, eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst

