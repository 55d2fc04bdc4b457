"""Central finite-difference checks for the autodiff ops."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, tsum


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place one entry at a time."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = f()
        flat[k] = orig - step
        lo = f()
        flat[k] = orig
        gflat[k] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
                    projection: np.ndarray | None = None) -> list[float]:
    """Relative error per input between autodiff and finite differences.

    The scalar checked is ``sum(fn(*inputs) * projection)``; a fixed random
    projection avoids symmetric cancellations that a plain sum can hide.
    """
    out = fn(*inputs)
    if projection is None:
        projection = np.random.default_rng(0).normal(size=out.shape)
    proj = Tensor(np.asarray(projection, dtype=out.dtype))

    def scalar() -> Tensor:
        return tsum(fn(*inputs) * proj)

    for t in inputs:
        t.grad = None
    backward(scalar(), [t for t in inputs if t.requires_grad])
    errs = []
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numeric_gradient(lambda: float(scalar().data), t.data, step)
        errs.append(relative_error(t.grad, num))
    return errs
