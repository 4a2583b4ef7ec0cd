"""Per-coordinate log-variance estimation and the attenuated losses.

The head predicts log-variances (alpha) for every 2D and 3D joint coordinate.
The losses trade error against confidence: overconfident wrong predictions pay
exp(-alpha) times their error, while hedging costs alpha/2. Mean predicted
variance doubles as the exit signal for threshold gating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffengine import Tensor, ops
from .diffengine.layers import Linear

ALPHA_MIN = -10.0
ALPHA_MAX = 10.0
N_COORDS_2D = 42
N_COORDS_3D = 63


@dataclass
class VarianceEstimate:
    f: Tensor         # (N, hidden) intermediate feature, gate input
    alpha_2d: Tensor  # (N, 42) log px^2
    alpha_3d: Tensor  # (N, 63) log unit^2


class VarianceHead:
    """Two-layer head: latent -> hidden (ReLU) -> concatenated alphas."""

    def __init__(self, latent_dim: int, fc_width: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.hidden = fc_width // 2
        self.fc1 = Linear(latent_dim, self.hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(self.hidden, N_COORDS_2D + N_COORDS_3D, rng=rng, dtype=dtype)

    def __call__(self, latent: Tensor) -> VarianceEstimate:
        f = ops.relu(self.fc1(latent))
        alpha = ops.clamp(self.fc2(f), ALPHA_MIN, ALPHA_MAX)
        return VarianceEstimate(f, alpha[:, :N_COORDS_2D], alpha[:, N_COORDS_2D:])

    def params(self):
        return self.fc1.params() + self.fc2.params()


def var_loss_3d(e: Tensor, alpha: Tensor) -> Tensor:
    """Mean over coordinates of exp(-alpha)/2 * e + alpha/2 (e = squared error)."""
    return ops.mean(ops.exp(-alpha) * 0.5 * e + alpha * 0.5)


def var_loss_2d(l1: Tensor, alpha: Tensor) -> Tensor:
    """Mean over coordinates of exp(-alpha) * (l - 1/2) + alpha/2 (l = smooth-L1)."""
    return ops.mean(ops.exp(-alpha) * (l1 - 0.5) + alpha * 0.5)


def mean_variance(alpha) -> np.ndarray:
    """Mean exp(alpha) over the last axis. (N,...) -> (N,) or 1D -> scalar."""
    a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    out = np.exp(a).mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def sample_mean_variance(est: VarianceEstimate) -> np.ndarray:
    """Per-sample mean variance across all 2D and 3D coordinates, (N,)."""
    a = np.concatenate([est.alpha_2d.data, est.alpha_3d.data], axis=1)
    return np.exp(a).mean(axis=1)


def per_joint_variance_2d(alpha_2d) -> np.ndarray:
    """Per-joint 2D variance: mean of the joint's two coordinate variances."""
    a = alpha_2d.data if isinstance(alpha_2d, Tensor) else np.asarray(alpha_2d)
    v = np.exp(a)
    return v.reshape(*v.shape[:-1], 21, 2).mean(axis=-1)


def confidence_heatmap(j2d: np.ndarray, var2d: np.ndarray, size: int) -> np.ndarray:
    """Per-joint isotropic Gaussian blobs (21, size, size), peak 1 at the joint."""
    j2d = np.asarray(j2d, dtype=np.float64)
    var2d = np.asarray(var2d, dtype=np.float64)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    maps = np.empty((len(j2d), size, size), dtype=np.float64)
    for j, ((x, y), v) in enumerate(zip(j2d, var2d)):
        d2 = (xs - x) ** 2 + (ys - y) ** 2
        maps[j] = np.exp(-d2 / (2.0 * max(v, 1e-12)))
    return maps


def write_pgm(path, img: np.ndarray):
    """8-bit binary PGM from a [0,1] grayscale array."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    pix = np.round(arr * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
