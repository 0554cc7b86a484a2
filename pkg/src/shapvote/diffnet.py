"""Hand-written forward/backward kernels and a finite-difference gradient checker.

Arrays are float64 numpy arrays. Layers act on the last axis, so a batch of
patch sets ``(B, N, I)`` goes through ``linear_forward`` unchanged.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .exceptions import DimensionError, DomainError, NumericError


class Parameter:
    """A trainable array and its gradient accumulator."""

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def glorot_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def linear_forward(x: np.ndarray, weight: Parameter, bias: Parameter) -> np.ndarray:
    if x.shape[-1] != weight.value.shape[0] or bias.value.shape != (1, weight.value.shape[1]):
        raise DimensionError(
            f"cannot apply {weight.value.shape} weight / {bias.value.shape} bias "
            f"to input with trailing dim {x.shape[-1]}"
        )
    return x @ weight.value + bias.value


def linear_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: Parameter, bias: Parameter
) -> np.ndarray:
    """Accumulate weight/bias gradients and return the input gradient."""
    n_in, n_out = weight.value.shape
    if grad_out.shape[-1] != n_out or x.shape[-1] != n_in or grad_out.shape[:-1] != x.shape[:-1]:
        raise DimensionError(
            f"grad {grad_out.shape} and input {x.shape} do not match weight {weight.value.shape}"
        )
    g2 = grad_out.reshape(-1, n_out)
    weight.grad += x.reshape(-1, n_in).T @ g2
    bias.grad += g2.sum(axis=0, keepdims=True)
    return grad_out @ weight.value.T


def tanh_forward(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Backward through tanh given its forward output."""
    return grad_out * (1.0 - out * out)


def masked_mean_rows(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean over the rows (axis -2) selected by ``mask``; keeps that axis.

    ``x`` is ``(..., N, L)`` and ``mask`` ``(..., N)``.
    """
    weights = np.asarray(mask, dtype=np.float64)
    if weights.shape != x.shape[:-1]:
        raise DimensionError(f"mask {weights.shape} does not match rows of {x.shape}")
    counts = weights.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise DomainError("masked mean over an empty row set")
    return (x * weights[..., None]).sum(axis=-2, keepdims=True) / counts[..., None]


def masked_mean_rows_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Scatter ``grad_out`` (``(..., 1, L)``) back to the selected rows."""
    weights = np.asarray(mask, dtype=np.float64)
    counts = weights.sum(axis=-1, keepdims=True)
    return grad_out * (weights / counts)[..., None]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``(B, K)`` logits against integer labels in ``[0, K)``.

    Returns the loss and its gradient with respect to the logits.
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"{labels.shape[0]} labels for {b} rows of logits")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / b


def finite_difference_check(
    func: Callable[[], float],
    params: Sequence[Parameter],
    h: float = 1e-5,
    n_coords: int = 200,
    rng: np.random.Generator | None = None,
    grads: Sequence[np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``func`` evaluates the scalar objective and, as a side effect, leaves its
    gradient in each ``param.grad`` (it must zero them itself). Unless
    ``grads`` is supplied, the analytic gradient is read after one call.
    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if h <= 0:
        raise DomainError(f"step h must be positive, got {h}")
    rng = np.random.default_rng(0) if rng is None else rng
    base = func()
    if not np.isfinite(base):
        raise NumericError(f"objective is not finite: {base}")
    if grads is None:
        grads = [p.grad.copy() for p in params]
    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[which], params[which].value.shape)
        value = params[which].value
        saved = value[idx]
        value[idx] = saved + h
        plus = func()
        value[idx] = saved - h
        minus = func()
        value[idx] = saved
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericError(f"objective not finite near {params[which].name}{idx}")
        numeric = (plus - minus) / (2.0 * h)
        analytic = grads[which][idx]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    func()  # restore the gradients of the unperturbed point
    return worst
