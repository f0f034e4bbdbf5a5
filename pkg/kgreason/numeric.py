"""
Dense kernels and nonlinearities, each paired with its vector-Jacobian product.

Every function here is pure: inputs are never mutated and a fresh array is
returned. Matrices are 2-D float64 numpy arrays with embeddings stored as rows.
"""
from typing import Tuple, Union

import numpy as np

from .errors import ShapeError

Matrix = np.ndarray
Scalar = Union[float, np.ndarray]

DTYPE = np.float64


def as_matrix(x, name="matrix") -> Matrix:
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _check_matmul(a: Matrix, b: Matrix):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")


#
# Matrix Product
#

def matmul(a: Matrix, b: Matrix) -> Matrix:
    _check_matmul(a, b)
    return a @ b


def matmul_backward(grad_out: Matrix, a: Matrix, b: Matrix) -> Tuple[Matrix, Matrix]:
    """
    Adjoint of matmul: given dL/d(a @ b), returns (dL/da, dL/db).
    """
    _check_matmul(a, b)
    if grad_out.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(
            f"upstream gradient {grad_out.shape} does not match product of {a.shape} and {b.shape}"
        )
    return grad_out @ b.T, a.T @ grad_out


#
# Nonlinearities
#

def relu(x: Matrix) -> Matrix:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Matrix, x: Matrix) -> Matrix:
    # subgradient at exactly 0 is 0
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid(x: Scalar) -> Scalar:
    """
    Logistic function, branching on sign so neither exp() can overflow.
    Scalars in, float out; arrays in, array out.
    """
    arr = np.asarray(x, dtype=DTYPE)
    flat = np.atleast_1d(arr)
    out = np.empty_like(flat)

    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)

    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def sigmoid_grad(p: Scalar) -> Scalar:
    """Derivative of the sigmoid expressed through its output p."""
    return p * (1.0 - p)


def softmax_row(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(logits: Matrix) -> Matrix:
    z = as_matrix(logits, "logits")
    if z.shape[1] == 0:
        return z.copy()
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(grad_out: Matrix, probs: Matrix) -> Matrix:
    """Row-wise softmax adjoint: p * (g - <g, p>)."""
    if grad_out.shape != probs.shape:
        raise ShapeError(f"upstream gradient {grad_out.shape} does not match probabilities {probs.shape}")
    return probs * (grad_out - np.sum(grad_out * probs, axis=1, keepdims=True))


def glorot_uniform(shape, rng: np.random.Generator, fan=None) -> Matrix:
    fan_in, fan_out = fan if fan is not None else (shape[-2], shape[-1])
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)
