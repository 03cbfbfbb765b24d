"""Shared test helpers: the finite-difference gradient oracle.

The oracle only reruns forward passes on perturbed copies; it never touches
the backward machinery it is used to check.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from schedlab.autodiff import Tensor, backward  # noqa: E402


def central_difference(forward: Callable[[Sequence[np.ndarray]], float],
                       arrays: Sequence[np.ndarray],
                       step: float = 1e-5) -> list[np.ndarray]:
    """d(forward)/d(array) elementwise via (f(x+h) - f(x-h)) / 2h."""
    grads = []
    for k, base in enumerate(arrays):
        grad = np.zeros_like(base, dtype=np.float64)
        flat = grad.ravel()
        for i in range(base.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].ravel()[i] += step
            minus[k].ravel()[i] -= step
            flat[i] = (forward(plus) - forward(minus)) / (2.0 * step)
        grads.append(grad)
    return grads


def assert_close_grads(analytic: np.ndarray, numeric: np.ndarray,
                       rel: float = 1e-4, abs_near_zero: float = 1e-8) -> None:
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    tol = np.maximum(abs_near_zero, rel * scale)
    diff = np.abs(analytic - numeric)
    assert np.all(diff <= tol), (
        f"gradient mismatch: max abs diff {diff.max()} exceeds tolerance "
        f"(analytic={analytic.ravel()[diff.argmax()]}, "
        f"numeric={numeric.ravel()[diff.argmax()]})")


def check_gradients(build_loss: Callable[[Sequence[Tensor]], Tensor],
                    arrays: Sequence[np.ndarray],
                    step: float = 1e-5,
                    rel: float = 1e-4) -> None:
    """Compare autodiff gradients of a scalar loss against the FD oracle."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(tensors)
    backward(loss)

    def forward(perturbed: Sequence[np.ndarray]) -> float:
        fresh = [Tensor(p, requires_grad=False) for p in perturbed]
        return build_loss(fresh).item()

    numeric = central_difference(forward, arrays, step=step)
    for tensor, num in zip(tensors, numeric):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(num)
        assert_close_grads(np.asarray(analytic), num, rel=rel)
