"""Gradient-descent optimizers over lists of parameter tensors.

Both optimizers take parameter groups so different parts of a network can run
at different learning rates (the progressive trainer relies on this). A group
is a dict with a "params" list and optional per-group hyperparameters.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def _as_groups(params, defaults):
    if isinstance(params, dict):
        params = [params]
    params = list(params)
    if params and isinstance(params[0], Tensor):
        params = [{"params": params}]
    groups = []
    for g in params:
        merged = dict(defaults)
        merged.update({k: v for k, v in g.items() if k != "params"})
        merged["params"] = list(g["params"])
        groups.append(merged)
    return groups


class SGD:
    """Plain stochastic gradient descent with optional momentum."""

    def __init__(self, params, lr: float = 1e-3, momentum: float = 0.0):
        self.groups = _as_groups(params, {"lr": lr, "momentum": momentum})
        self.velocity = {}

    def step(self):
        for group in self.groups:
            lr, mom = group["lr"], group["momentum"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                if mom:
                    v = self.velocity.get(id(p))
                    v = mom * v + p.grad if v is not None else p.grad.copy()
                    self.velocity[id(p)] = v
                    p.data -= lr * v
                else:
                    p.data -= lr * p.grad

    def zero_grad(self):
        for group in self.groups:
            for p in group["params"]:
                p.grad = None

    def state_arrays(self):
        out = []
        for group in self.groups:
            for p in group["params"]:
                v = self.velocity.get(id(p))
                out.append(v if v is not None else np.zeros_like(p.data))
        return out

    def load_state_arrays(self, arrays):
        it = iter(arrays)
        for group in self.groups:
            for p in group["params"]:
                self.velocity[id(p)] = next(it).copy()


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = _as_groups(params, {"lr": lr, "betas": betas, "eps": eps})
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self):
        self.t += 1
        for group in self.groups:
            lr, (b1, b2), eps = group["lr"], group["betas"], group["eps"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                key = id(p)
                m = self.m.get(key)
                v = self.v.get(key)
                if m is None:
                    m = np.zeros_like(p.data)
                    v = np.zeros_like(p.data)
                m = b1 * m + (1.0 - b1) * p.grad
                v = b2 * v + (1.0 - b2) * (p.grad * p.grad)
                self.m[key], self.v[key] = m, v
                mhat = m / (1.0 - b1 ** self.t)
                vhat = v / (1.0 - b2 ** self.t)
                p.data -= lr * mhat / (np.sqrt(vhat) + eps)

    def zero_grad(self):
        for group in self.groups:
            for p in group["params"]:
                p.grad = None

    def state_arrays(self):
        """Moment arrays in group/param order plus the step counter (for checkpoints)."""
        out = [np.asarray([self.t], dtype=np.float32)]
        for group in self.groups:
            for p in group["params"]:
                out.append(self.m.get(id(p), np.zeros_like(p.data)))
                out.append(self.v.get(id(p), np.zeros_like(p.data)))
        return out

    def load_state_arrays(self, arrays):
        it = iter(arrays)
        self.t = int(next(it)[0])
        for group in self.groups:
            for p in group["params"]:
                self.m[id(p)] = next(it).copy()
                self.v[id(p)] = next(it).copy()
