"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D numpy array (scalars are 1x1). Each operation records
a backward closure on its output node; backward() replays the closures in
reverse topological order and accumulates gradients on the leaves.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "constant",
    "parameter",
    "add",
    "add_rowvec",
    "hadamard",
    "matmul",
    "scale",
    "transpose",
    "relu",
    "sigmoid",
    "log",
    "pow_const",
    "clamp",
    "sum_all",
    "abs_sum",
    "row_mean",
    "softmax_rows",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "trace_expm_hadamard",
    "matrix_exp",
    "gradient_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a scalar, vector, or matrix, got ndim={arr.ndim}")
    return arr


class Tensor:
    """A node in the computation graph holding a 2-D float64 matrix."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad for every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a 1x1 tensor, got {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones((1, 1))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad = node.grad + grad


def _unary(a: Tensor, value: np.ndarray, grad_fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    out = Tensor(value)
    if a.requires_grad:
        out.requires_grad = True
        out._parents = (a,)
        out._backward = lambda g: _accumulate(a, grad_fn(g))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two equal-shape matrices."""
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if a.requires_grad or b.requires_grad:
        out.requires_grad = True
        out._parents = (a, b)

        def bwd(g: np.ndarray) -> None:
            _accumulate(a, g)
            _accumulate(b, g)

        out._backward = bwd
    return out


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a 1xN row vector to every row of an MxN matrix."""
    if v.rows != 1 or v.cols != a.cols:
        raise ShapeError(f"add_rowvec: {a.shape} vs {v.shape}")
    out = Tensor(a.data + v.data)
    if a.requires_grad or v.requires_grad:
        out.requires_grad = True
        out._parents = (a, v)

        def bwd(g: np.ndarray) -> None:
            _accumulate(a, g)
            _accumulate(v, g.sum(axis=0, keepdims=True))

        out._backward = bwd
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two equal-shape matrices."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    if a.requires_grad or b.requires_grad:
        out.requires_grad = True
        out._parents = (a, b)

        def bwd(g: np.ndarray) -> None:
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

        out._backward = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product A @ B."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    if a.requires_grad or b.requires_grad:
        out.requires_grad = True
        out._parents = (a, b)

        def bwd(g: np.ndarray) -> None:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)

        out._backward = bwd
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every entry by the constant c."""
    c = float(c)
    return _unary(a, a.data * c, lambda g: g * c)


def transpose(a: Tensor) -> Tensor:
    return _unary(a, a.data.T.copy(), lambda g: g.T)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _unary(a, np.where(mask, a.data, 0.0), lambda g: g * mask)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0.0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _unary(a, s, lambda g: g * s * (1.0 - s))


def log(a: Tensor) -> Tensor:
    """Natural log; inputs must be strictly positive."""
    if a.data.size and a.data.min() <= 0.0:
        raise ValueError("log: inputs must be strictly positive")
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def pow_const(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    p = float(p)
    if p == 0.0:
        return _unary(a, np.ones_like(a.data), lambda g: np.zeros_like(a.data))
    x = a.data
    return _unary(a, x ** p, lambda g: g * p * x ** (p - 1.0))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip entries to [lo, hi]; gradient passes only strictly inside."""
    if not lo < hi:
        raise ValueError(f"clamp: lo={lo} must be < hi={hi}")
    mask = (a.data > lo) & (a.data < hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda g: g * mask)


def sum_all(a: Tensor) -> Tensor:
    return _unary(a, np.array([[a.data.sum()]]), lambda g: np.full(a.shape, g[0, 0]))


def abs_sum(a: Tensor) -> Tensor:
    """Sum of absolute values (L1 norm of the flattened matrix)."""
    return _unary(a, np.array([[np.abs(a.data).sum()]]), lambda g: g[0, 0] * np.sign(a.data))


def row_mean(a: Tensor) -> Tensor:
    """Mean over rows, producing a 1xN row vector."""
    if a.rows == 0:
        raise ShapeError("row_mean: matrix has no rows")
    m = a.rows
    return _unary(a, a.data.mean(axis=0, keepdims=True), lambda g: np.repeat(g, m, axis=0) / m)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    if a.cols == 0:
        return _unary(a, a.data.copy(), lambda g: np.zeros_like(a.data))
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g: np.ndarray) -> np.ndarray:
        dot = (g * s).sum(axis=1, keepdims=True)
        return s * (g - dot)

    return _unary(a, s, bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices vertically; all must share a column count."""
    if not parts:
        raise ShapeError("concat_rows: no inputs")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ShapeError(f"concat_rows: {p.shape} vs {cols} columns")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    if any(p.requires_grad for p in parts):
        out.requires_grad = True
        out._parents = tuple(parts)

        def bwd(g: np.ndarray) -> None:
            offset = 0
            for p in parts:
                _accumulate(p, g[offset:offset + p.rows])
                offset += p.rows

        out._backward = bwd
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices horizontally; all must share a row count."""
    if not parts:
        raise ShapeError("concat_cols: no inputs")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"concat_cols: {p.shape} vs {rows} rows")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    if any(p.requires_grad for p in parts):
        out.requires_grad = True
        out._parents = tuple(parts)

        def bwd(g: np.ndarray) -> None:
            offset = 0
            for p in parts:
                _accumulate(p, g[:, offset:offset + p.cols])
                offset += p.cols

        out._backward = bwd
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) as a new node; gradient scatters back."""
    if not 0 <= start <= stop <= a.rows:
        raise ShapeError(f"slice_rows: [{start}:{stop}) out of range for {a.shape}")

    def bwd(g: np.ndarray) -> np.ndarray:
        full = np.zeros(a.shape)
        full[start:stop] = g
        return full

    return _unary(a, a.data[start:stop].copy(), bwd)


def matrix_exp(b: np.ndarray, tol: float = 1e-14) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring with a truncated Taylor series."""
    n = b.shape[0]
    if b.shape != (n, n):
        raise ShapeError(f"matrix_exp: matrix must be square, got {b.shape}")
    if n == 0:
        return np.zeros((0, 0))
    norm = np.linalg.norm(b, 1)
    squarings = max(0, int(np.ceil(np.log2(norm)))) if norm > 1.0 else 0
    c = b / (2.0 ** squarings)
    result = np.eye(n) + c
    term = c.copy()
    k = 2
    while True:
        term = term @ c / k
        result = result + term
        if np.linalg.norm(term, 1) <= tol * max(1.0, np.linalg.norm(result, 1)):
            break
        k += 1
        if k > 80:
            raise FloatingPointError("matrix_exp: Taylor series failed to converge")
    for _ in range(squarings):
        result = result @ result
    return result


def trace_expm_hadamard(a: Tensor) -> Tensor:
    """tr(exp(A o A)) - n, the differentiable acyclicity penalty.

    Zero exactly when the support of A (nonzero entries) is a DAG; gradient
    is exp(A o A)^T o 2A.
    """
    if a.rows != a.cols:
        raise ShapeError(f"trace_expm_hadamard: matrix must be square, got {a.shape}")
    n = a.rows
    if n == 0:
        return _unary(a, np.zeros((1, 1)), lambda g: np.zeros_like(a.data))
    e = matrix_exp(a.data * a.data)
    value = np.array([[np.trace(e) - n]])
    return _unary(a, value, lambda g: g[0, 0] * (e.T * (2.0 * a.data)))


def gradient_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    f is re-invoked for each perturbation and must be deterministic. Returns
    the worst relative error max(|analytic - numeric| / max(1, |numeric|)).
    """
    out = f(params)
    if out.data.size != 1:
        raise ShapeError("gradient_check: f must return a 1x1 tensor")
    if not np.isfinite(out.data[0, 0]):
        raise FloatingPointError("gradient_check: f is non-finite at the base point")
    for p in params:
        p.grad = None
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros(p.shape) for p in params]
    worst = 0.0
    for p, a_grad in zip(params, analytic):
        for i in range(p.rows):
            for j in range(p.cols):
                orig = p.data[i, j]
                p.data[i, j] = orig + step
                f_plus = f(params).item()
                p.data[i, j] = orig - step
                f_minus = f(params).item()
                p.data[i, j] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise FloatingPointError(
                        f"gradient_check: non-finite value at perturbed entry ({i}, {j})"
                    )
                numeric = (f_plus - f_minus) / (2.0 * step)
                err = abs(a_grad[i, j] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
