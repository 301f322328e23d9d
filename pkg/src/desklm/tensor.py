"""Float32 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their inputs and a backward closure; :meth:`Tensor.backward`
walks that graph in reverse topological order. Only leaf tensors (those not
produced by a recorded operation) keep a ``grad`` array, and repeated
``backward`` calls add into it until :func:`zero_grads` is called.

Shapes are limited to rank 3, which is enough for (heads x seq x dim).
"""

from __future__ import annotations

import contextlib
import functools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError, VocabularyError

DTYPE = np.float32
MAX_RANK = 3


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily build new tensors in ``dtype``.

    The library runs in float32; float64 exists so test oracles can evaluate
    the same graph without float32 rounding noise.
    """
    global DTYPE
    previous, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = previous


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=DTYPE)
    if arr.ndim > MAX_RANK:
        raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    @classmethod
    def _from_op(cls, data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_lift(other)))

    def __rsub__(self, other) -> "Tensor":
        return add(_lift(other), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mul(sum_all(self), 1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    # -- differentiation ----------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar. Calling twice without :func:`zero_grads`
        adds the gradients a second time.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(
        a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    c, k = v.dtype.type(_GELU_C), v.dtype.type(0.044715)
    th = np.tanh(c * v * (1.0 + k * v2))
    out = 0.5 * v * (1.0 + th)

    def backward(g):
        dinner = c * (1.0 + 3 * k * v2)
        local = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner
        return (g * local,)

    return Tensor._from_op(out, (x,), backward, "gelu")


# -- shape ----------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            return a
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def slice_rows(a: Tensor, stop: int) -> Tensor:
    """``a[:stop]`` along the first axis."""
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[:stop] = g
        return (full,)

    return Tensor._from_op(a.data[:stop], (a,), backward, "slice")


def embedding(weight: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``weight`` (V x d) for each id."""
    idx = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise VocabularyError(f"token id out of range for vocabulary of size {vocab}")
    shape, dtype = weight.shape, weight.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(weight.data[idx], (weight,), backward, "embedding")


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with batch broadcasting."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# -- normalisation and probabilities -------------------------------------------


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} received non-finite input")


@functools.lru_cache(maxsize=8)
def _causal_mask(t_q: int, t_k: int) -> np.ndarray:
    return np.triu(np.ones((t_q, t_k), dtype=bool), k=1 + (t_k - t_q))


def softmax_rows(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max.

    With ``causal=True`` the last two axes are treated as (query, key) and
    entry (i, j) is forced to zero for j > i.
    """
    _check_finite(x.data, "softmax_rows")
    v = x.data
    if causal:
        v = np.where(_causal_mask(v.shape[-2], v.shape[-1]), -np.inf, v)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data
    n = v.shape[-1]

    def backward(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.sum(axis=-1, keepdims=True) / n
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n
        )
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        dbias = g.reshape(-1, n).sum(axis=0)
        return dx, dgain, dbias

    return Tensor._from_op(out, (x, gain, bias), backward, "layer_norm")


def cross_entropy_next_token(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean of -log softmax(logits[i])[targets[i]] over the rows of ``logits``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (t x V), got {logits.shape}")
    t, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (t,):
        raise DimensionError(f"expected {t} targets, got {tgt.shape[0] if tgt.ndim else 0}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise VocabularyError(f"target id out of range for vocabulary of size {vocab}")
    _check_finite(logits.data, "cross_entropy_next_token")
    logp = log_softmax_np(logits.data.astype(np.float64))
    rows = np.arange(t)
    loss = -logp[rows, tgt].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, tgt] -= 1.0
        return ((grad * (float(g) / t)).astype(logits.data.dtype),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target: float) -> Tensor:
    diff = pred - target
    return (diff * diff).mean()


# -- test oracle ------------------------------------------------------------------


def finite_difference_grad(
    f: Callable[[Tensor], Tensor | float],
    x: Tensor,
    eps: float = 1e-2,
    indices: Iterable[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place and restored. When ``indices`` (flat
    positions) is given only those coordinates are estimated; the rest stay 0.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if indices is None else indices

    def value() -> float:
        out = f(x)
        return float(out.data) if isinstance(out, Tensor) else float(out)

    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(flat[i])
        up = value()
        flat[i] = orig - eps
        lo = float(flat[i])
        down = value()
        flat[i] = orig
        # divide by the step actually taken after float32 rounding
        grad[i] = (up - down) / (hi - lo)
    return grad.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
