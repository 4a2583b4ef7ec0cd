import json
import struct

import numpy as np
import pytest

from iterpose.diffengine import Tensor
from iterpose.posehead import (SKELETON, PoseParams, forward_kinematics,
                               project_weak_perspective)
from iterpose.synthdata import (MAGIC, SAMPLE_FLOATS, GenConfig, _background,
                                generate_dataset, load_dataset, make_sample,
                                render, sample_pose, sample_rng, split_ranges)

SMALL = dict(n=12, size=32, seed=3)


def small_cfg(**kw):
    return GenConfig(**{**SMALL, **kw})


def test_config_validation():
    with pytest.raises(ValueError, match="positive"):
        GenConfig(n=0).validate()
    with pytest.raises(ValueError, match="divisible by 32"):
        GenConfig(size=48).validate()
    with pytest.raises(ValueError, match="background"):
        GenConfig(background="checker").validate()
    with pytest.raises(ValueError, match="inverted"):
        GenConfig(flexion=(1.0, -1.0)).validate()


def test_degenerate_ranges_give_single_pose():
    cfg = small_cfg(abduction=(0.1, 0.1), flexion=(0.4, 0.4), beta=(1.0, 1.0),
                    rot_xy=(0.0, 0.0), rot_z=(0.5, 0.5),
                    trans_frac=(0.5, 0.5), scale_frac=(0.3, 0.3))
    vec1, *_ = sample_pose(sample_rng(cfg.seed, 0), cfg)
    vec2, *_ = sample_pose(sample_rng(cfg.seed, 7), cfg)
    np.testing.assert_array_equal(vec1, vec2)


def test_pose_sequence_deterministic():
    cfg = small_cfg()
    a = [sample_pose(sample_rng(cfg.seed, i), cfg)[0] for i in range(5)]
    b = [sample_pose(sample_rng(cfg.seed, i), cfg)[0] for i in range(5)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_joints_inside_image():
    cfg = small_cfg(n=30)
    for i in range(cfg.n):
        s = make_sample(cfg, i)
        assert (s.j2d >= 0).all() and (s.j2d <= cfg.size - 1).all()


def test_impossible_placement_raises_advice():
    cfg = small_cfg(scale_frac=(3.0, 3.0))
    with pytest.raises(ValueError, match="widen trans_frac or lower scale_frac"):
        sample_pose(sample_rng(0, 0), cfg)


def test_render_deterministic():
    cfg = small_cfg(noise_sigma=0.0, background="flat")
    vec, *_ = sample_pose(sample_rng(cfg.seed, 0), cfg)
    a = render(vec, cfg, np.random.default_rng(5))
    b = render(vec, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_joints_brighter_than_background():
    cfg = small_cfg(noise_sigma=0.0, background="flat")
    rng = sample_rng(cfg.seed, 1)
    vec, _, _, j2d = sample_pose(rng, cfg)
    img = render(vec, cfg, np.random.default_rng(9))
    bg_mean = _background(np.random.default_rng(9), cfg).mean()
    for x, y in j2d:
        assert img[:, int(round(y)), int(round(x))].mean() > bg_mean


def _bone_layers(vec):
    """(a, b, radius-relevant 2D endpoints, depth, shade) per bone, oracle-side."""
    pose = PoseParams.from_values(np.asarray(vec, dtype=np.float64))
    j3d = forward_kinematics(pose.theta, pose.beta).data[0]
    j2d = project_weak_perspective(Tensor(j3d[None]), pose.R, pose.trans,
                                   pose.scale).data[0]
    cam = (pose.R.data[0] @ j3d.T).T
    bones = []
    for j in range(1, 21):
        par = int(SKELETON.parents[j])
        shade = 0.70 + 0.06 * ((j - 1) // 4) + 0.03 * ((j - 1) % 4)
        bones.append((j2d[par], j2d[j], 0.5 * (cam[j, 2] + cam[par, 2]), shade))
    return bones, j2d


def _segment_dist_maps(bones, size):
    """(20, size, size) distance from each pixel center to each bone segment."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    maps = np.empty((len(bones), size, size))
    for k, (a, b, _, _) in enumerate(bones):
        d = b - a
        denom = max(float(d @ d), 1e-12)
        t = np.clip(((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / denom, 0.0, 1.0)
        maps[k] = np.hypot(xs - (a[0] + t * d[0]), ys - (a[1] + t * d[1]))
    return maps


def test_crossing_bones_take_nearer_color():
    """Where two bones cross, the rendered pixel shows the nearer bone's color.

    Constructed pose: index and middle fingers abducted toward each other so
    their phalanges cross in 2D, with the middle finger flexed out of the palm
    plane to separate them in depth.
    """
    theta = np.zeros(20)
    theta[4] = 0.55          # index toward middle
    theta[8] = -0.55         # middle toward index
    theta[9] = 0.55          # middle MCP flexion: lifts it away in depth
    vec = np.concatenate([theta, np.zeros(3), np.ones(21), [32.0, 26.0], [30.0]])

    cfg = GenConfig(n=1, size=64, seed=0, noise_sigma=0.0, background="flat",
                    thickness=3.0, joint_radius=0.8)
    radius = cfg.thickness / 2.0
    bones, j2d = _bone_layers(vec)
    depths = np.array([b[2] for b in bones])
    dists = _segment_dist_maps(bones, cfg.size)
    ys, xs = np.mgrid[0:cfg.size, 0:cfg.size].astype(np.float64)
    joint_d = np.min(np.hypot(xs[None] - j2d[:, 0, None, None],
                              ys[None] - j2d[:, 1, None, None]), axis=0)
    full = dists < radius - 0.6
    touch = dists < radius + 0.6
    img = render(vec, cfg, np.random.default_rng(0))
    base = np.array([0.88, 0.74, 0.62])
    checked = 0
    for y, x in zip(*np.nonzero(full.sum(axis=0) >= 2)):
        if joint_d[y, x] < cfg.joint_radius * 1.6 + 1.6:
            continue  # joint disks overpaint bones; skip their surroundings
        covering = np.nonzero(full[:, y, x])[0]
        near = covering[np.argmin(depths[covering])]
        others = [k for k in np.nonzero(touch[:, y, x])[0] if k != near]
        if min(depths[k] for k in others) < depths[near] + 0.05:
            continue  # ambiguous layering (near-equal depths)
        expect = np.clip(base * bones[near][3], 0.0, 1.0)
        np.testing.assert_allclose(img[:, y, x], expect, atol=1e-5)
        checked += 1
    assert checked >= 1


def test_reprojection_consistency():
    cfg = small_cfg(n=16)
    for i in range(cfg.n):
        s = make_sample(cfg, i)
        pose = PoseParams.from_values(s.pose_vec.astype(np.float64))
        j3d = forward_kinematics(pose.theta, pose.beta)
        j2d = project_weak_perspective(j3d, pose.R, pose.trans, pose.scale).data[0]
        assert np.abs(j2d - s.j2d).max() < 1e-5
        assert np.abs(j3d.data[0] - s.j3d).max() < 1e-5


def test_split_ranges_80_10_10():
    assert split_ranges(20) == {"train": [0, 16], "val": [16, 18], "test": [18, 20]}
    assert split_ranges(2500) == {"train": [0, 2000], "val": [2000, 2250],
                                  "test": [2250, 2500]}


def test_generate_deterministic_and_sized(tmp_path):
    cfg = small_cfg()
    p1, p2 = tmp_path / "a.ipd", tmp_path / "b.ipd"
    generate_dataset(cfg, p1)
    generate_dataset(cfg, p2)
    raw = p1.read_bytes()
    assert raw == p2.read_bytes()
    header_len = raw.index(b"\n", 8) + 1 - 8
    per_sample = (3 * cfg.size ** 2 + SAMPLE_FLOATS) * 4
    assert len(raw) == 4 + 4 + header_len + cfg.n * per_sample
    assert raw[:4] == MAGIC


def test_parallel_generation_matches_serial(tmp_path):
    cfg = small_cfg()
    serial, parallel = tmp_path / "s.ipd", tmp_path / "p.ipd"
    generate_dataset(cfg, serial)
    generate_dataset(cfg, parallel, jobs=2)
    assert serial.read_bytes() == parallel.read_bytes()


def test_roundtrip_and_splits(tmp_path):
    cfg = small_cfg(n=20)
    path = tmp_path / "d.ipd"
    generate_dataset(cfg, path)
    ds = load_dataset(path)
    assert len(ds) == 20
    s7 = make_sample(cfg, 7)
    np.testing.assert_array_equal(ds.images[7], s7.image)
    np.testing.assert_array_equal(ds.j2d[7], s7.j2d)
    np.testing.assert_array_equal(ds.j3d[7], s7.j3d)
    np.testing.assert_array_equal(ds.pose[7], s7.pose_vec)
    assert len(ds.split("train")) == 16
    assert len(ds.split("val")) == 2
    np.testing.assert_array_equal(ds.split("test").images[0], ds.images[18])
    assert ds.split("all") is ds
    with pytest.raises(KeyError, match="no split"):
        ds.split("holdout")


def test_load_rejects_bad_files(tmp_path):
    good = tmp_path / "g.ipd"
    generate_dataset(small_cfg(n=3), good)
    raw = good.read_bytes()

    bad_magic = tmp_path / "m.ipd"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="not a dataset"):
        load_dataset(bad_magic)

    bad_version = tmp_path / "v.ipd"
    bad_version.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(ValueError, match="version"):
        load_dataset(bad_version)

    truncated = tmp_path / "t.ipd"
    truncated.write_bytes(raw[:-64])
    with pytest.raises(ValueError, match="truncated"):
        load_dataset(truncated)

    with pytest.raises(OSError, match="cannot read"):
        load_dataset(tmp_path / "absent.ipd")


def test_header_records_config(tmp_path):
    cfg = small_cfg(background="noise")
    path = tmp_path / "h.ipd"
    generate_dataset(cfg, path)
    with open(path, "rb") as fh:
        fh.read(8)
        header = json.loads(fh.readline())
    assert header["cfg"]["background"] == "noise"
    assert header["cfg"]["seed"] == cfg.seed
    assert header["splits"] == split_ranges(cfg.n)
