"""
Dense Numerical Core
Linear layers, the vanilla tanh recurrent cell, their analytic gradients
and a central finite-difference oracle. All math is float64; every op
accepts a single vector or a batch with one row per sample.
"""
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from interlace.errors import NonFiniteError, ShapeError

Vec64 = NDArray[np.float64]
Mat64 = NDArray[np.float64]

_debug_checks = False


def set_debug_checks(enabled):
    """Turn the non-finite assertions after forward ops on or off."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled():
    return _debug_checks


def check_finite(name, array):
    """Raise NonFiniteError when debug checks are on and ``array`` has NaN/Inf."""
    if _debug_checks and not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values produced by {name}")
    return array


def check_shape(name, array, expected):
    """
    Verify the trailing dimensions of ``array``.

    Args:
        name: Operand name used in the error message
        array: Array to check
        expected: Tuple of trailing sizes; None matches any size

    Raises:
        ShapeError: on mismatch
    """
    shape = np.shape(array)
    tail = shape[len(shape) - len(expected):] if len(shape) >= len(expected) else None
    if tail is None or any(e is not None and e != s for e, s in zip(expected, tail)):
        raise ShapeError(f"{name}: expected trailing shape {expected}, got {shape}")


@dataclass
class LinearLayer:
    """
    Fully connected layer y = W x + b.

    Attributes:
        W: (out, in) weights
        b: (out,) bias, or None for a bias-free layer
    """
    W: Mat64
    b: Optional[Vec64] = None

    @property
    def out_dim(self):
        return self.W.shape[0]

    @property
    def in_dim(self):
        return self.W.shape[1]

    @classmethod
    def gaussian(cls, out_dim, in_dim, rng, sigma=0.1, bias=True):
        return cls(
            W=rng.normal(0.0, sigma, size=(out_dim, in_dim)),
            b=np.zeros(out_dim) if bias else None,
        )

    @classmethod
    def xavier(cls, out_dim, in_dim, rng, bias=True):
        """Uniform init with bound 1/sqrt(fan_in)."""
        bound = 1.0 / np.sqrt(in_dim)
        return cls(
            W=rng.uniform(-bound, bound, size=(out_dim, in_dim)),
            b=rng.uniform(-bound, bound, size=out_dim) if bias else None,
        )


@dataclass
class RnnCell:
    """
    Vanilla recurrent cell new = tanh(W_state s + W_input x + b).

    Attributes:
        W_state: (n_out, n_out)
        W_input: (n_out, n_in)
        b: (n_out,)
        nonlinearity: Only 'tanh' is supported
    """
    W_state: Mat64
    W_input: Mat64
    b: Vec64
    nonlinearity: str = 'tanh'

    @property
    def n_out(self):
        return self.W_state.shape[0]

    @property
    def n_in(self):
        return self.W_input.shape[1]

    @classmethod
    def gaussian(cls, n_out, n_in, rng, sigma=0.1):
        return cls(
            W_state=rng.normal(0.0, sigma, size=(n_out, n_out)),
            W_input=rng.normal(0.0, sigma, size=(n_out, n_in)),
            b=np.zeros(n_out),
        )


class LinearGrads(NamedTuple):
    x: np.ndarray
    W: Mat64
    b: Optional[Vec64]


class RnnGrads(NamedTuple):
    state: np.ndarray
    input: np.ndarray
    W_state: Mat64
    W_input: Mat64
    b: Vec64


def _outer_sum(grad_out, x):
    """sum_r grad_out[r] x[r]^T for a batch, or the plain outer product."""
    if grad_out.ndim == 1:
        return np.outer(grad_out, x)
    return grad_out.T @ x


def _row_sum(grad_out):
    return grad_out if grad_out.ndim == 1 else grad_out.sum(axis=0)


# ==================================================================
# LINEAR LAYER
# ==================================================================
def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    """y = W x + b for a vector or each row of a batch."""
    check_shape('linear input', x, (layer.in_dim,))
    y = x @ layer.W.T
    if layer.b is not None:
        y = y + layer.b
    return check_finite('linear_forward', y)


def linear_backward(layer: LinearLayer, x: np.ndarray, grad_out: np.ndarray) -> LinearGrads:
    """
    Exact gradients of a linear layer.

    Args:
        layer: Layer used in the forward pass
        x: Forward input
        grad_out: dL/dy, same leading shape as x

    Returns:
        LinearGrads(x, W, b); b is None for a bias-free layer
    """
    check_shape('linear input', x, (layer.in_dim,))
    check_shape('linear grad_out', grad_out, (layer.out_dim,))
    return LinearGrads(
        x=grad_out @ layer.W,
        W=_outer_sum(grad_out, x),
        b=_row_sum(grad_out) if layer.b is not None else None,
    )


# ==================================================================
# RECURRENT CELL
# ==================================================================
def rnn_forward(cell: RnnCell, state: np.ndarray, inp: np.ndarray) -> np.ndarray:
    """new_state = tanh(W_state state + W_input input + b)."""
    check_shape('rnn state', state, (cell.n_out,))
    check_shape('rnn input', inp, (cell.n_in,))
    pre = state @ cell.W_state.T + inp @ cell.W_input.T + cell.b
    return check_finite('rnn_forward', np.tanh(pre))


def rnn_backward(cell: RnnCell, state, inp, grad_out, new_state=None) -> RnnGrads:
    """
    Exact gradients of the recurrent cell.

    Args:
        cell: Cell used in the forward pass
        state: Forward state input
        inp: Forward input vector(s)
        grad_out: dL/d new_state
        new_state: Forward output; recomputed when None

    Returns:
        RnnGrads(state, input, W_state, W_input, b)
    """
    if new_state is None:
        new_state = rnn_forward(cell, state, inp)
    check_shape('rnn grad_out', grad_out, (cell.n_out,))
    grad_pre = grad_out * (1.0 - new_state * new_state)
    return RnnGrads(
        state=grad_pre @ cell.W_state,
        input=grad_pre @ cell.W_input,
        W_state=_outer_sum(grad_pre, state),
        W_input=_outer_sum(grad_pre, inp),
        b=_row_sum(grad_pre),
    )


# ==================================================================
# SCALAR HELPERS
# ==================================================================
def l2_dist(a, b):
    """Euclidean distance; row-wise for batches."""
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"l2_dist: shapes {np.shape(a)} and {np.shape(b)} differ")
    return np.sqrt(np.sum((np.asarray(a) - np.asarray(b)) ** 2, axis=-1))


def l2_dist_backward(a, b, dist):
    """
    d dist / d a, using the subgradient 0 where the distance is exactly 0.

    The gradient with respect to b is the negation.
    """
    diff = np.asarray(a) - np.asarray(b)
    dist = np.asarray(dist, dtype=np.float64)
    safe = np.where(dist > 0, dist, 1.0)
    return np.where(np.expand_dims(dist > 0, -1), diff / np.expand_dims(safe, -1), 0.0)


def sigmoid(x):
    """Logistic function (overflow-safe)."""
    return expit(x)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step=1e-6):
    """
    Central-difference gradient of a scalar function.

    Args:
        f: Scalar function of an array shaped like x
        x: Point to differentiate at (not modified)
        step: Perturbation h

    Returns:
        Array shaped like x with (f(x + h e_i) - f(x - h e_i)) / 2h
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + step
        f_plus = f(x)
        flat[k] = original - step
        f_minus = f(x)
        flat[k] = original
        grad_flat[k] = (f_plus - f_minus) / (2.0 * step)
    return grad
