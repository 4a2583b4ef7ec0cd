"""Finite-difference gradient checking used across the test suite.

Checks run in float64 with central differences (h=1e-5). The returned value
is the max relative error over all checked inputs, where relative means
|analytic - numeric| / max(1, |numeric|) elementwise.
"""

import numpy as np

from iterpose.diffengine import Tensor, backward, param

H = 1e-5


def numeric_grad(fn, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central-difference gradient of a scalar-valued fn at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(1.0, np.abs(b))
    return float(np.max(np.abs(a - b) / denom))


def check_grad(build_loss, arrays, h: float = H) -> float:
    """Compare backward() grads against finite differences.

    build_loss takes a list of Tensors (float64 params built from arrays) and
    returns a scalar Tensor. Returns the max relative error across inputs.
    """
    params = [param(np.array(a, dtype=np.float64)) for a in arrays]
    loss = build_loss(params)
    backward(loss)
    worst = 0.0
    for p, a in zip(params, arrays):
        # perturb the shared array in place, rebuilding the graph each call
        num = numeric_grad(lambda: _eval_at(build_loss, arrays), a, h)
        worst = max(worst, rel_err(p.grad, num))
    return worst


def _eval_at(build_loss, arrays) -> float:
    ps = [param(np.array(a, dtype=np.float64)) for a in arrays]
    return float(build_loss(ps).data)
