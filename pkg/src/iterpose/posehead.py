"""Articulated hand model: skeleton table, forward kinematics, projection, losses.

The skeleton is a fixed 21-joint tree (wrist + 5 fingers x MCP/PIP/DIP/TIP)
with a flat rest pose in the xy-plane. 20 articulated angles drive it: per
finger one abduction at the MCP (about z) and three flexions (MCP/PIP/DIP)
about the finger's in-plane normal. Global orientation is a separate
axis-angle vector applied only inside the weak-perspective projection, so
predicted 3D joints live in the canonical (camera-independent) frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffengine import Tensor, ops
from .diffengine.layers import Linear

NUM_JOINTS = 21
NUM_ANGLES = 20
# network/pose vector layout: theta(20), rotvec(3), beta(21), t(2), s(1)
POSE_VEC_LEN = NUM_ANGLES + 3 + NUM_JOINTS + 2 + 1

FINGERS = ("thumb", "index", "middle", "ring", "pinky")


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple
    parents: np.ndarray          # (21,) int, -1 for the wrist
    rest_offsets: np.ndarray     # (21, 3) offset from parent in the parent frame
    flex_axes: np.ndarray        # (5, 3) per-finger flexion axis (unit, in-plane normal)

    def bone_length(self, j: int) -> float:
        return float(np.linalg.norm(self.rest_offsets[j]))


def build_skeleton() -> Skeleton:
    # finger direction angles measured from +y toward +x, flat hand
    spread = {"thumb": 60.0, "index": 15.0, "middle": 0.0, "ring": -15.0, "pinky": -32.0}
    palm = {"thumb": 0.30, "index": 0.46, "middle": 0.48, "ring": 0.46, "pinky": 0.42}
    bones = {
        "thumb": (0.22, 0.16, 0.12),
        "index": (0.24, 0.14, 0.10),
        "middle": (0.26, 0.16, 0.11),
        "ring": (0.24, 0.15, 0.10),
        "pinky": (0.18, 0.12, 0.09),
    }
    names = ["wrist"]
    parents = [-1]
    offsets = [np.zeros(3)]
    axes = []
    for f, finger in enumerate(FINGERS):
        a = np.deg2rad(spread[finger])
        d = np.array([np.sin(a), np.cos(a), 0.0])
        axes.append(np.array([d[1], -d[0], 0.0]))  # in-plane normal; +flex curls toward +z
        mcp = 1 + 4 * f
        for k, (part, reach) in enumerate(zip(("mcp", "pip", "dip", "tip"),
                                              (palm[finger],) + bones[finger])):
            names.append(f"{finger}_{part}")
            parents.append(0 if k == 0 else mcp + k - 1)
            offsets.append(d * reach)
    return Skeleton(tuple(names), np.array(parents, dtype=np.int64),
                    np.stack(offsets), np.stack(axes))


SKELETON = build_skeleton()

_Z_AXIS = np.array([0.0, 0.0, 1.0])


def _skew(a: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -a[2], a[1]],
                     [a[2], 0.0, -a[0]],
                     [-a[1], a[0], 0.0]])


def axis_rotation(angle: Tensor, axis: np.ndarray) -> Tensor:
    """Rotation matrices (N,3,3) about a fixed unit axis, Rodrigues form."""
    n = angle.shape[0]
    dt = angle.dtype
    k = Tensor(_skew(axis).astype(dt))
    k2 = Tensor((_skew(axis) @ _skew(axis)).astype(dt))
    eye = Tensor(np.eye(3, dtype=dt))
    s = ops.reshape(ops.sin(angle), (n, 1, 1))
    c = ops.reshape(ops.cos(angle), (n, 1, 1))
    return eye + s * k + (1.0 - c) * k2


def rodrigues(rotvec: Tensor) -> Tensor:
    """Axis-angle vectors (N,3) to rotation matrices (N,3,3).

    Uses 1-cos(phi) = 2 sin^2(phi/2) so the small-angle limit is exact in
    float32; the epsilon under the square root keeps phi=0 differentiable.
    """
    n = rotvec.shape[0]
    dt = rotvec.dtype
    v2 = ops.sum_(rotvec * rotvec, axis=1, keepdims=True) + 1e-12
    phi = ops.sqrt(v2)
    a = ops.reshape(ops.sin(phi) / phi, (n, 1, 1))
    half = ops.sin(phi * 0.5)
    b = ops.reshape(2.0 * half * half / v2, (n, 1, 1))
    basis = [Tensor(_skew(e).astype(dt)) for e in np.eye(3)]
    k = (ops.reshape(rotvec[:, 0:1], (n, 1, 1)) * basis[0]
         + ops.reshape(rotvec[:, 1:2], (n, 1, 1)) * basis[1]
         + ops.reshape(rotvec[:, 2:3], (n, 1, 1)) * basis[2])
    eye = Tensor(np.eye(3, dtype=dt))
    return eye + a * k + b * ops.matmul(k, k)


@dataclass
class PoseParams:
    """Batched hand parameters; every field is a Tensor."""
    theta: Tensor    # (N, 20) articulated angles, radians
    rotvec: Tensor   # (N, 3) global axis-angle
    beta: Tensor     # (N, 21) per-bone length scales
    trans: Tensor    # (N, 2) pixels
    scale: Tensor    # (N, 1) pixels per model unit
    R: Tensor        # (N, 3, 3) global rotation from rotvec

    @classmethod
    def from_network_output(cls, y: Tensor) -> "PoseParams":
        """Raw 47-vector to parameters; all-zero raw output is the rest pose."""
        if y.shape[-1] != POSE_VEC_LEN:
            raise ValueError(f"pose vector must have {POSE_VEC_LEN} entries, "
                             f"got {y.shape[-1]}")
        theta = y[:, 0:20]
        rotvec = y[:, 20:23]
        beta = ops.clamp(y[:, 23:44] + 1.0, 0.5, 2.0)
        trans = y[:, 44:46]
        scale = ops.exp(y[:, 46:47])
        return cls(theta, rotvec, beta, trans, scale, rodrigues(rotvec))

    @classmethod
    def from_values(cls, vec: np.ndarray) -> "PoseParams":
        """Split a stored pose vector whose beta/scale are already effective."""
        vec = np.atleast_2d(vec)
        t = Tensor(vec[:, 0:20])
        r = Tensor(vec[:, 20:23])
        return cls(t, r, Tensor(vec[:, 23:44]), Tensor(vec[:, 44:46]),
                   Tensor(vec[:, 46:47]), rodrigues(r))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta.data, self.rotvec.data, self.beta.data,
                               self.trans.data, self.scale.data], axis=1)


class PoseHead:
    """Two fully-connected layers mapping the refiner latent to PoseParams."""

    def __init__(self, latent_dim: int, fc_width: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.fc1 = Linear(latent_dim, fc_width, rng=rng, dtype=dtype)
        self.fc2 = Linear(fc_width, POSE_VEC_LEN, rng=rng, dtype=dtype)

    def __call__(self, latent: Tensor) -> PoseParams:
        h = ops.relu(self.fc1(latent))
        return PoseParams.from_network_output(self.fc2(h))

    def params(self):
        return self.fc1.params() + self.fc2.params()


def forward_kinematics(theta: Tensor, beta: Tensor,
                       skeleton: Skeleton = SKELETON) -> Tensor:
    """Joint positions (N, 21, 3) in the canonical frame.

    Chains parent transforms: a joint's orientation is its parent's times the
    local rotation from its own theta entries; its position offsets the parent
    by the parent-frame rest vector scaled by beta.
    """
    if theta.shape[-1] != NUM_ANGLES:
        raise ValueError(f"theta must have {NUM_ANGLES} angles, got {theta.shape[-1]}")
    if beta.shape[-1] != NUM_JOINTS:
        raise ValueError(f"beta must have {NUM_JOINTS} entries, got {beta.shape[-1]}")
    n = theta.shape[0]
    dt = theta.dtype
    eye = Tensor(np.eye(3, dtype=dt))
    world_rot = [None] * NUM_JOINTS
    pos = [None] * NUM_JOINTS
    world_rot[0] = eye
    pos[0] = Tensor(np.zeros((n, 3), dtype=dt))
    for f in range(5):
        axis = skeleton.flex_axes[f]
        for k, j in enumerate(range(1 + 4 * f, 5 + 4 * f)):
            par = int(skeleton.parents[j])
            rest = Tensor(skeleton.rest_offsets[j].astype(dt))
            off = ops.reshape(beta[:, j:j + 1] * rest, (n, 3, 1))
            disp = ops.matmul(world_rot[par], off)
            pos[j] = pos[par] + ops.reshape(disp, (n, 3))
            if k == 0:  # MCP: abduction about z, then flexion
                local = ops.matmul(axis_rotation(theta[:, 4 * f], _Z_AXIS),
                                   axis_rotation(theta[:, 4 * f + 1], axis))
            elif k < 3:  # PIP / DIP: flexion only
                local = axis_rotation(theta[:, 4 * f + 1 + k], axis)
            else:        # TIP: no degrees of freedom
                local = None
            world_rot[j] = world_rot[par] if local is None else ops.matmul(
                world_rot[par], local)
    joints = [ops.reshape(p, (n, 1, 3)) for p in pos]
    return ops.concat(joints, axis=1)


def project_weak_perspective(j3d: Tensor, R: Tensor, trans: Tensor,
                             scale: Tensor) -> Tensor:
    """(N,21,3) canonical joints to (N,21,2) pixels: s * Pi(R J) + t."""
    n = j3d.shape[0]
    rotated = ops.matmul(j3d, ops.transpose(R, (0, 2, 1)))
    xy = rotated[:, :, 0:2]
    return ops.reshape(scale, (n, 1, 1)) * xy + ops.reshape(trans, (n, 1, 2))


def coordinate_losses(j2d_hat: Tensor, j3d_hat: Tensor,
                      j2d_gt, j3d_gt) -> tuple[Tensor, Tensor]:
    """Per-coordinate losses: smooth-L1 (N,42) in 2D, squared error (N,63) in 3D."""
    n = j2d_hat.shape[0]
    d2 = j2d_hat - j2d_gt
    d3 = j3d_hat - j3d_gt
    huber = ops.reshape(ops.smooth_l1(d2), (n, NUM_JOINTS * 2))
    sq = ops.reshape(d3 * d3, (n, NUM_JOINTS * 3))
    return huber, sq


def pose_loss(j2d_hat: Tensor, j3d_hat: Tensor, j2d_gt, j3d_gt) -> tuple[Tensor, Tensor]:
    """(L_2D, L_3D): mean smooth-L1 over 2D coordinates, mean squared
    Euclidean distance over joints."""
    huber, sq = coordinate_losses(j2d_hat, j3d_hat, j2d_gt, j3d_gt)
    return ops.mean(huber), ops.mean(sq) * 3.0


def regularizer(theta: Tensor, beta: Tensor,
                w_theta: float = 1e-3, w_beta: float = 1e-2) -> Tensor:
    """w_theta*||theta||^2 + w_beta*||beta-1||^2, summed per sample, batch mean."""
    bq = beta - 1.0
    per_sample = (w_theta * ops.sum_(theta * theta, axis=1)
                  + w_beta * ops.sum_(bq * bq, axis=1))
    return ops.mean(per_sample)


def joint_errors(j2d_hat, j3d_hat, j2d_gt, j3d_gt):
    """Euclidean errors per sample and joint: ((N,21) px, (N,21) units). numpy."""
    p2 = j2d_hat.data if isinstance(j2d_hat, Tensor) else j2d_hat
    p3 = j3d_hat.data if isinstance(j3d_hat, Tensor) else j3d_hat
    g2 = j2d_gt.data if isinstance(j2d_gt, Tensor) else j2d_gt
    g3 = j3d_gt.data if isinstance(j3d_gt, Tensor) else j3d_gt
    e2 = np.linalg.norm(p2 - g2, axis=2)
    e3 = np.linalg.norm(p3 - g3, axis=2)
    return e2, e3


def per_sample_losses(j2d_hat, j3d_hat, j2d_gt, j3d_gt):
    """Per-sample (L_2D, L_3D) as numpy vectors (N,), matching pose_loss averaging."""
    p2 = j2d_hat.data if isinstance(j2d_hat, Tensor) else j2d_hat
    p3 = j3d_hat.data if isinstance(j3d_hat, Tensor) else j3d_hat
    g2 = j2d_gt.data if isinstance(j2d_gt, Tensor) else j2d_gt
    g3 = j3d_gt.data if isinstance(j3d_gt, Tensor) else j3d_gt
    d2 = p2 - g2
    a = np.abs(d2)
    huber = np.where(a <= 1.0, 0.5 * d2 * d2, a - 0.5)
    l2d = huber.reshape(len(p2), -1).mean(axis=1)
    l3d = ((p3 - g3) ** 2).sum(axis=2).mean(axis=1)
    return l2d, l3d


def skeleton_table(skeleton: Skeleton = SKELETON) -> str:
    """Human-readable rest-geometry dump for the CLI."""
    lines = [f"{'joint':<12} {'parent':<12} {'rest offset (x, y, z)':<28} length"]
    for j, name in enumerate(skeleton.joint_names):
        par = skeleton.parents[j]
        pname = "-" if par < 0 else skeleton.joint_names[par]
        off = skeleton.rest_offsets[j]
        lines.append(f"{name:<12} {pname:<12} "
                     f"({off[0]: .4f}, {off[1]: .4f}, {off[2]: .4f})   "
                     f"{np.linalg.norm(off):.4f}")
    lines.append("")
    lines.append("angles per finger: [abduction@mcp about z, flex@mcp, flex@pip, "
                 "flex@dip] about the finger normal")
    for f, finger in enumerate(FINGERS):
        ax = skeleton.flex_axes[f]
        lines.append(f"  {finger}: flex axis ({ax[0]: .4f}, {ax[1]: .4f}, {ax[2]: .4f})")
    return "\n".join(lines)
