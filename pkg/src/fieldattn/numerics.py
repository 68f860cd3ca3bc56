"""Dense 64-bit kernels: a small reverse-mode tape over numpy arrays,
softmax / layer-norm primitives, a bias-corrected Adam step, and the
central-difference gradient oracle used to certify every analytic gradient.

Matrices throughout the package are C-order float64 numpy arrays.  The tape
is deliberately minimal: only the operations the attention stack needs, each
with a hand-derived vector-Jacobian product.  It is not a general autodiff
engine and does not try to be one.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError

Array = np.ndarray


def as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def require_finite(name: str, x: Array) -> Array:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} contains non-finite values")
    return x


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

class Tensor:
    """Node in a reverse-mode graph over float64 arrays.

    Leaves are created with ``parameter``; operations build new nodes whose
    ``_backward`` closures accumulate into ``grad``.  ``backward()`` on a
    scalar node runs the whole tape.  Gradients accumulate until the leaf's
    ``grad`` is reset to None.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None):
        self.data = as_f64(data)
        self.grad: Array | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise DomainError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Arithmetic sugar; scalars and arrays are promoted to constant nodes.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))


def parameter(data) -> Tensor:
    """Create a leaf tensor (a trainable parameter or graph input)."""
    return Tensor(np.array(data, dtype=np.float64))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def accumulate_grad(t: Tensor, g: Array) -> None:
    """Add ``g`` into ``t.grad``.  Exposed so other modules can define ops."""
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _sum_to_shape(g: Array, shape: tuple) -> Array:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data, (a, b))

    def bw(g):
        accumulate_grad(a, _sum_to_shape(g, a.data.shape))
        accumulate_grad(b, _sum_to_shape(g, b.data.shape))

    out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data, (a, b))

    def bw(g):
        accumulate_grad(a, _sum_to_shape(g * b.data, a.data.shape))
        accumulate_grad(b, _sum_to_shape(g * a.data, b.data.shape))

    out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; both operands must have ndim >= 2."""
    if a.ndim < 2 or b.ndim < 2:
        raise DomainError("matmul operands must have at least 2 dimensions")
    out = Tensor(a.data @ b.data, (a, b))

    def bw(g):
        accumulate_grad(a, _sum_to_shape(g @ b.data.swapaxes(-1, -2), a.data.shape))
        accumulate_grad(b, _sum_to_shape(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    out._backward = bw
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))

    def bw(g):
        accumulate_grad(a, g.reshape(a.data.shape))

    out._backward = bw
    return out


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes), (a,))

    def bw(g):
        accumulate_grad(a, g.transpose(inv))

    out._backward = bw
    return out


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bw(g):
        if axis is None:
            accumulate_grad(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        accumulate_grad(a, np.broadcast_to(g, a.data.shape))

    out._backward = bw
    return out


def mean_all(a: Tensor) -> Tensor:
    return mul(reduce_sum(a), 1.0 / a.data.size)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), (a,))

    def bw(g):
        accumulate_grad(a, g * (a.data > 0.0))

    out._backward = bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(val, (a,))

    def bw(g):
        accumulate_grad(a, g * val * (1.0 - val))

    out._backward = bw
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    out = Tensor(np.log(a.data), (a,))

    def bw(g):
        accumulate_grad(a, g / a.data)

    out._backward = bw
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through the interior only."""
    out = Tensor(np.clip(a.data, lo, hi), (a,))
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        accumulate_grad(a, g * inside)

    out._backward = bw
    return out


def _softmax_np(x: Array, axis: int = -1) -> Array:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(a.data, axis=axis)
    out = Tensor(y, (a,))

    def bw(g):
        # dL/dx = y * (g - sum(g * y)) along the softmax axis
        dot = (g * y).sum(axis=axis, keepdims=True)
        accumulate_grad(a, y * (g - dot))

    out._backward = bw
    return out


def layer_norm_t(x: Tensor, gain: Tensor, shift: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance,
    then apply the affine (gain, shift)."""
    if eps <= 0.0:
        raise DomainError("layer_norm epsilon must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + shift.data, (x, gain, shift))

    def bw(g):
        gy = g * gain.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        accumulate_grad(x, (gy - m1 - xhat * m2) * inv)
        accumulate_grad(gain, _sum_to_shape(g * xhat, gain.data.shape))
        accumulate_grad(shift, _sum_to_shape(g, shift.data.shape))

    out._backward = bw
    return out


def take_rows(a: Tensor, idx: Array) -> Tensor:
    """Gather along axis 0: output shape = idx.shape + a.shape[1:]."""
    idx = np.asarray(idx)
    out = Tensor(a.data[idx], (a,))

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx.reshape(-1), g.reshape((-1,) + a.data.shape[1:]))
        accumulate_grad(a, buf)

    out._backward = bw
    return out


def take_along(a: Tensor, idx: Array, axis: int) -> Tensor:
    """Gather with per-position indices, mirroring np.take_along_axis."""
    idx = np.asarray(idx)
    out = Tensor(np.take_along_axis(a.data, idx, axis=axis), (a,))

    def bw(g):
        buf = np.zeros_like(a.data)
        grids = list(np.ogrid[tuple(slice(s) for s in idx.shape)])
        grids[axis] = idx
        np.add.at(buf, tuple(grids), g)
        accumulate_grad(a, buf)

    out._backward = bw
    return out


def stack_t(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    out = Tensor(np.stack([t.data for t in parts], axis=axis), tuple(parts))

    def bw(g):
        for i, t in enumerate(parts):
            accumulate_grad(t, np.take(g, i, axis=axis))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# Public vector kernels
# ---------------------------------------------------------------------------

def softmax_row(logits) -> Array:
    """Numerically stable softmax of a single logit vector.

    Uses max-subtraction, so arbitrarily large finite logits cannot
    overflow.  Output entries are in (0, 1] and sum to 1.
    """
    x = as_f64(logits)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("softmax_row expects a non-empty 1-D vector")
    require_finite("softmax_row logits", x)
    return _softmax_np(x)


def layer_norm(x, gain, shift, epsilon: float) -> Array:
    """Layer normalization of one vector with population variance."""
    xv, gv, sv = as_f64(x), as_f64(gain), as_f64(shift)
    if not (xv.shape == gv.shape == sv.shape) or xv.ndim != 1:
        raise DomainError("layer_norm expects three 1-D vectors of equal length")
    if epsilon <= 0.0:
        raise DomainError("layer_norm epsilon must be positive")
    require_finite("layer_norm input", xv)
    mu = xv.mean()
    var = ((xv - mu) ** 2).mean()
    return (xv - mu) / np.sqrt(var + epsilon) * gv + sv


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class AdamState:
    """Per-parameter Adam moments plus hyperparameters.

    ``step`` counts completed updates; the bias correction uses step + 1
    during the update, so a fresh state starts at 0.
    """

    first_moment: Array
    second_moment: Array
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def for_param(cls, param: Array, learning_rate: float = 1e-3,
                  beta1: float = 0.9, beta2: float = 0.999,
                  epsilon: float = 1e-8) -> "AdamState":
        p = as_f64(param)
        return cls(first_moment=np.zeros_like(p), second_moment=np.zeros_like(p),
                   step=0, beta1=beta1, beta2=beta2, epsilon=epsilon,
                   learning_rate=learning_rate)


def adam_step(param: Array, grad: Array, state: AdamState) -> tuple[Array, AdamState]:
    """One bias-corrected Adam update.  Pure: returns a new (param, state).

    Deterministic by construction — identical inputs give bitwise-identical
    outputs.
    """
    p, g = as_f64(param), as_f64(grad)
    if p.shape != g.shape:
        raise DomainError(f"adam_step shape mismatch: param {p.shape} vs grad {g.shape}")
    if p.shape != state.first_moment.shape:
        raise DomainError("adam_step state shape does not match parameter")
    t = state.step + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_p = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = dataclasses.replace(state, first_moment=m, second_moment=v, step=t)
    return new_p, new_state


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Array], float], at, h: float) -> Array:
    """Central-difference gradient of a scalar function of a flat vector.

    This is the independent oracle every analytic gradient in the package
    is checked against; it never touches the tape.
    """
    if h <= 0.0:
        raise DomainError("finite_diff_grad requires h > 0")
    x = as_f64(at).copy()
    if x.ndim != 1:
        raise DomainError("finite_diff_grad expects a 1-D parameter vector")
    out = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x))
        x[i] = orig - h
        fm = float(f(x))
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"finite_diff_grad: non-finite evaluation at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out


def rel_error(a, b, floor: float = 1e-12) -> float:
    """Norm-based relative error between two gradient vectors."""
    av, bv = as_f64(a).ravel(), as_f64(b).ravel()
    denom = max(float(np.linalg.norm(av)), float(np.linalg.norm(bv)), floor)
    return float(np.linalg.norm(av - bv)) / denom
