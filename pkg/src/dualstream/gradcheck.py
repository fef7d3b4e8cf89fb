"""Central finite-difference gradient checking, shared by the test suite
and the ``selftest`` CLI command."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward

DEFAULT_STEP = 1e-3
DEFAULT_RTOL = 1e-3


def fd_gradients(fn, tensors: list[Tensor], step: float = DEFAULT_STEP) -> list[np.ndarray]:
    """Central differences of a scalar-valued fn, 64-bit accumulation."""
    grads = []
    for t in tensors:
        g = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().data.item()
            flat[i] = orig - step
            f_minus = fn().data.item()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def check_gradients(fn, tensors: list[Tensor], step: float = DEFAULT_STEP,
                    rtol: float = DEFAULT_RTOL) -> float:
    """Backward vs finite differences; returns the worst relative error.

    The comparison is norm-level per tensor:
    ||fd - analytic|| / (||fd|| + ||analytic|| + eps).
    """
    for t in tensors:
        t.grad = None
    out = fn()
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
                for t in tensors]
    numeric = fd_gradients(fn, tensors, step=step)
    worst = 0.0
    for an, fd in zip(analytic, numeric):
        denom = np.linalg.norm(fd) + np.linalg.norm(an) + 1e-8
        err = np.linalg.norm(fd - an) / denom
        worst = max(worst, err)
    if worst >= rtol:
        raise AssertionError(f"gradient check failed: relative error {worst:.3e}")
    return worst
