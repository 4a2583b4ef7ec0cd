"""Synthetic hand dataset: deterministic pose sampling and capsule rendering.

Every sample is generated from its own seed sequence derived from (global
seed, index), so generation is order-independent and parallelizable. Labels
are self-consistent by construction: the stored 2D joints are exactly the
weak-perspective projection of the stored 3D joints under the stored camera.

Container format: magic ``IPD1``, little-endian u32 version, one JSON header
line terminated by a newline, then per-sample float32 little-endian blocks in
index order: image (3*H*H), 2D joints (42), 3D joints (63), pose vector (47).
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .diffengine import Tensor
from .posehead import (NUM_JOINTS, POSE_VEC_LEN, SKELETON, PoseParams,
                       forward_kinematics, project_weak_perspective)

MAGIC = b"IPD1"
VERSION = 1
SAMPLE_FLOATS = 42 + 63 + POSE_VEC_LEN  # plus 3*H*H image floats

BACKGROUNDS = ("flat", "gradient", "noise", "clutter")


@dataclass
class GenConfig:
    n: int = 2500
    size: int = 64
    seed: int = 0
    abduction: tuple = (-0.25, 0.25)      # radians, MCP sideways
    flexion: tuple = (-1.047, 1.047)      # radians, all flexion angles, ~60 deg
    beta: tuple = (0.9, 1.1)              # bone length scales
    rot_xy: tuple = (-0.5236, 0.5236)     # out-of-plane tilt, ~30 deg
    rot_z: tuple = (-3.1416, 3.1416)      # full in-plane rotation
    trans_frac: tuple = (0.34, 0.66)      # wrist position as fraction of size
    scale_frac: tuple = (0.24, 0.36)      # pixels per unit as fraction of size
    background: str = "clutter"
    noise_sigma: float = 0.02
    thickness: float = 2.4                # capsule diameter, px
    joint_radius: float = 1.7             # joint disk radius, px
    max_attempts: int = 100

    def validate(self) -> "GenConfig":
        if self.n <= 0:
            raise ValueError(f"sample count must be positive, got {self.n}")
        if self.size % 32:
            raise ValueError(f"image size must be divisible by 32, got {self.size}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}, "
                             f"got {self.background!r}")
        for name in ("abduction", "flexion", "beta", "rot_xy", "rot_z",
                     "trans_frac", "scale_frac"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"range {name} is inverted: ({lo}, {hi})")
        return self


@dataclass
class Sample:
    index: int
    image: np.ndarray      # (3, H, H) float32 in [0,1]
    j2d: np.ndarray        # (21, 2) float32 px
    j3d: np.ndarray        # (21, 3) float32 canonical units
    pose_vec: np.ndarray   # (47,) float32: theta, rotvec, beta, t, s


def sample_rng(cfg_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg_seed, index]))


def _uniform(rng, rng_pair):
    return rng.uniform(rng_pair[0], rng_pair[1])


def sample_pose(rng: np.random.Generator, cfg: GenConfig):
    """Draw pose parameters with every projected joint inside the image."""
    margin = max(cfg.thickness, cfg.joint_radius) + 0.5
    for _ in range(cfg.max_attempts):
        theta = np.empty(20)
        for f in range(5):
            theta[4 * f] = _uniform(rng, cfg.abduction)
            theta[4 * f + 1:4 * f + 4] = rng.uniform(*cfg.flexion, size=3)
        beta = rng.uniform(*cfg.beta, size=21)
        beta[0] = 1.0
        rotvec = np.array([_uniform(rng, cfg.rot_xy), _uniform(rng, cfg.rot_xy),
                           _uniform(rng, cfg.rot_z)])
        trans = rng.uniform(*cfg.trans_frac, size=2) * cfg.size
        scale = _uniform(rng, cfg.scale_frac) * cfg.size
        vec = np.concatenate([theta, rotvec, beta, trans, [scale]])
        pose = PoseParams.from_values(vec.astype(np.float64))
        j3d = forward_kinematics(pose.theta, pose.beta).data[0]
        j2d = project_weak_perspective(Tensor(j3d[None]), pose.R, pose.trans,
                                       pose.scale).data[0]
        if (j2d >= margin).all() and (j2d <= cfg.size - 1 - margin).all():
            return vec, pose, j3d, j2d
    raise ValueError(f"could not place all joints inside a {cfg.size}px image in "
                     f"{cfg.max_attempts} attempts; widen trans_frac or lower "
                     "scale_frac")


def _gradient(rng: np.random.Generator, h: int) -> np.ndarray:
    v0, v1 = rng.uniform(0.05, 0.35, size=2)
    phi = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:h, 0:h] / (h - 1)
    ramp = np.cos(phi) * xs + np.sin(phi) * ys
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    return np.broadcast_to(v0 + (v1 - v0) * ramp, (3, h, h)).copy()


def _background(rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    h = cfg.size
    if cfg.background == "flat":
        val = rng.uniform(0.08, 0.30)
        return np.full((3, h, h), val)
    if cfg.background == "gradient":
        return _gradient(rng, h)
    if cfg.background == "clutter":
        # finger-like distractor capsules, skin-toned so the first pass cannot
        # trivially segment the hand by color; render() adds a few more in
        # front of the hand
        img = _gradient(rng, h)
        for _ in range(int(rng.integers(6, 11))):
            a = rng.uniform(0, h - 1, size=2)
            ang = rng.uniform(0, 2 * np.pi)
            b = a + rng.uniform(0.10, 0.35) * h * np.array([np.cos(ang), np.sin(ang)])
            radius = rng.uniform(0.4, 1.1) * cfg.thickness
            _draw_capsule(img, a, b, radius, _BASE_COLOR * rng.uniform(0.5, 1.0))
        return img
    return rng.uniform(0.05, 0.35, size=(3, h, h))


def _draw_capsule(img, a, b, radius, color):
    """Anti-aliased capsule from a to b with 0.5 px feather, painter-style."""
    h = img.shape[1]
    x0 = max(int(np.floor(min(a[0], b[0]) - radius - 1)), 0)
    x1 = min(int(np.ceil(max(a[0], b[0]) + radius + 1)), h - 1)
    y0 = max(int(np.floor(min(a[1], b[1]) - radius - 1)), 0)
    y1 = min(int(np.ceil(max(a[1], b[1]) + radius + 1)), h - 1)
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    dx, dy = b[0] - a[0], b[1] - a[1]
    denom = dx * dx + dy * dy
    if denom < 1e-12:
        t = np.zeros_like(xs, dtype=np.float64)
    else:
        t = np.clip(((xs - a[0]) * dx + (ys - a[1]) * dy) / denom, 0.0, 1.0)
    px, py = a[0] + t * dx, a[1] + t * dy
    d = np.hypot(xs - px, ys - py)
    alpha = np.clip(radius + 0.5 - d, 0.0, 1.0)
    region = img[:, y0:y1 + 1, x0:x1 + 1]
    region *= 1.0 - alpha
    region += alpha * np.asarray(color)[:, None, None]


_BASE_COLOR = np.array([0.88, 0.74, 0.62])


def render(pose_vec: np.ndarray, cfg: GenConfig,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Render a pose vector; rng drives background choice and pixel noise."""
    if rng is None:
        rng = np.random.default_rng(0)
    pose = PoseParams.from_values(np.asarray(pose_vec, dtype=np.float64))
    j3d = forward_kinematics(pose.theta, pose.beta).data[0]
    j2d = project_weak_perspective(Tensor(j3d[None]), pose.R, pose.trans,
                                   pose.scale).data[0]
    cam = (pose.R.data[0] @ j3d.T).T  # camera-frame joints; z = depth

    img = _background(rng, cfg)
    radius = cfg.thickness / 2.0

    # one entry per bone plus a wrist hub, sorted far-to-near so nearer
    # geometry is drawn last and wins overlaps
    layers = [(cam[0, 2], 0, None)]
    for j in range(1, NUM_JOINTS):
        par = int(SKELETON.parents[j])
        depth = 0.5 * (cam[j, 2] + cam[par, 2])
        layers.append((depth, j, par))
    layers.sort(key=lambda rec: -rec[0])

    for _, j, par in layers:
        finger = (j - 1) // 4
        seg = (j - 1) % 4
        shade = 0.70 + 0.06 * finger + 0.03 * seg
        color = np.clip(_BASE_COLOR * shade, 0.0, 1.0)
        if par is None:
            _draw_capsule(img, j2d[0], j2d[0], cfg.joint_radius * 1.6, color)
        else:
            _draw_capsule(img, j2d[par], j2d[j], radius, color)
            _draw_capsule(img, j2d[j], j2d[j], cfg.joint_radius, np.clip(color * 1.12, 0, 1))

    if cfg.background == "clutter":
        # foreground occluders crossing the hand region; joints stay labeled
        # at their exact projections even when hidden
        c = j2d.mean(axis=0)
        for _ in range(int(rng.integers(1, 4))):
            ang = rng.uniform(0, 2 * np.pi)
            v = np.array([np.cos(ang), np.sin(ang)])
            off = rng.uniform(-0.15, 0.15) * cfg.size * np.array([-v[1], v[0]])
            a = c + v * rng.uniform(0.15, 0.45) * cfg.size + off
            b = c - v * rng.uniform(0.15, 0.45) * cfg.size + off
            rad = rng.uniform(0.5, 1.0) * cfg.thickness
            _draw_capsule(img, a, b, rad, _BASE_COLOR * rng.uniform(0.55, 0.95))

    if cfg.noise_sigma > 0:
        img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_sample(cfg: GenConfig, index: int) -> Sample:
    rng = sample_rng(cfg.seed, index)
    vec, _, j3d, j2d = sample_pose(rng, cfg)
    image = render(vec, cfg, rng)
    return Sample(index, image,
                  j2d.astype(np.float32), j3d.astype(np.float32),
                  vec.astype(np.float32))


def _sample_bytes(cfg: GenConfig, index: int) -> bytes:
    s = make_sample(cfg, index)
    return (s.image.tobytes() + s.j2d.tobytes() + s.j3d.tobytes()
            + s.pose_vec.tobytes())


def _chunk_bytes(args) -> bytes:
    cfg_dict, lo, hi = args
    cfg = GenConfig(**cfg_dict)
    return b"".join(_sample_bytes(cfg, i) for i in range(lo, hi))


def split_ranges(n: int) -> dict:
    a, b = int(n * 0.8), int(n * 0.9)
    return {"train": [0, a], "val": [a, b], "test": [b, n]}


def header_dict(cfg: GenConfig) -> dict:
    return {
        "cfg": asdict(cfg),
        "n": cfg.n,
        "size": cfg.size,
        "splits": split_ranges(cfg.n),
        "layout": ["image", "j2d", "j3d", "pose"],
        "sample_floats": 3 * cfg.size * cfg.size + SAMPLE_FLOATS,
    }


def generate_dataset(cfg: GenConfig, path, jobs: int = 1):
    cfg.validate()
    header = json.dumps(header_dict(cfg), sort_keys=True).encode() + b"\n"
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(header)
            if jobs <= 1:
                for i in range(cfg.n):
                    fh.write(_sample_bytes(cfg, i))
            else:
                bounds = np.linspace(0, cfg.n, jobs * 4 + 1, dtype=int)
                tasks = [(asdict(cfg), int(lo), int(hi))
                         for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
                with ProcessPoolExecutor(max_workers=jobs) as pool:
                    for chunk in pool.map(_chunk_bytes, tasks):
                        fh.write(chunk)
    except OSError as e:
        raise OSError(f"cannot write dataset to {path}: {e}") from e


class Dataset:
    """In-memory dataset with split views."""

    def __init__(self, header: dict, images, j2d, j3d, pose):
        self.header = header
        self.images = images
        self.j2d = j2d
        self.j3d = j3d
        self.pose = pose

    def __len__(self):
        return len(self.images)

    def split(self, name: str):
        if name == "all":
            return self
        try:
            lo, hi = self.header["splits"][name]
        except KeyError:
            raise KeyError(f"dataset has no split {name!r}; "
                           f"available: {list(self.header['splits'])}")
        return Dataset(self.header, self.images[lo:hi], self.j2d[lo:hi],
                       self.j3d[lo:hi], self.pose[lo:hi])


def load_dataset(path) -> Dataset:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise ValueError(f"{path}: not a dataset file (magic {magic!r})")
            version = struct.unpack("<I", fh.read(4))[0]
            if version != VERSION:
                raise ValueError(f"{path}: unsupported dataset version {version}")
            header = json.loads(fh.readline().decode())
            n, h = header["n"], header["size"]
            per = header["sample_floats"]
            raw = np.frombuffer(fh.read(n * per * 4), dtype="<f4")
    except OSError as e:
        raise OSError(f"cannot read dataset {path}: {e}") from e
    if raw.size != n * per:
        raise ValueError(f"{path}: truncated (expected {n * per} floats, "
                         f"got {raw.size})")
    raw = raw.reshape(n, per)
    img_len = 3 * h * h
    images = raw[:, :img_len].reshape(n, 3, h, h)
    j2d = raw[:, img_len:img_len + 42].reshape(n, 21, 2)
    j3d = raw[:, img_len + 42:img_len + 105].reshape(n, 21, 3)
    pose = raw[:, img_len + 105:]
    return Dataset(header, images, j2d, j3d, pose)
