"""Training protocols, the gate trainer, and the checkpoint container.

Two protocols share the same per-batch objective (the loss summed over all
loops run so far): end-to-end runs every loop from the start, progressive
grows one loop at a time, freezing the feature extractor and dividing
learning rates by ten each phase (the attention decoder keeps the base rate).
The gate is trained afterwards with REINFORCE against the frozen network.

Checkpoint format: magic ``DIRN``, little-endian u32 version, u64 header
length, JSON header (config, named parameter/state shapes, training log, RNG
state), then float32 little-endian blobs in header order. No timestamps:
identical runs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from .backbone import ModelConfig
from .diffengine import SGD, Adam, Tensor, backward, no_grad, ops
from .gating import (CONTINUE, EXIT, RunningBaseline, TrajectoryStep,
                     policy_gradient_update, reward)
from .network import PoseNetwork
from .posehead import (coordinate_losses, joint_errors, per_sample_losses,
                       regularizer)
from .uncertainty import var_loss_2d, var_loss_3d

MAGIC = b"DIRN"
VERSION = 1

PROTOCOLS = ("e2e", "progressive")


@dataclass
class TrainConfig:
    protocol: str = "progressive"
    epochs_initial: int = 50
    epochs_per_loop: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    gamma_2d: float = 1.0
    gamma_3d: float = 1.0
    gamma_var: float = 1.0
    w_theta: float = 1e-3
    w_beta: float = 1e-2
    seed: int = 0
    early_stop: bool = False
    patience: int = 5
    noise_aug: float = 0.05
    gate_epochs: int = 5
    gate_lr: float = 1e-3

    def validate(self) -> "TrainConfig":
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, "
                             f"got {self.protocol!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        for name in ("epochs_initial", "epochs_per_loop", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.gate_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.noise_aug < 0:
            raise ValueError("noise_aug must be non-negative")
        return self


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, components):
        self.epoch, self.batch, self.components = epoch, batch, components
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: "
                         f"{components}")


def loop_terms(out, j2d_gt: Tensor, j3d_gt: Tensor, tcfg: TrainConfig) -> dict:
    """Loss pieces for one loop's outputs."""
    huber, sq = coordinate_losses(out.j2d, out.j3d, j2d_gt, j3d_gt)
    l2d = ops.mean(huber)
    l3d = ops.mean(sq) * 3.0
    lvar = var_loss_2d(huber, out.var.alpha_2d) + var_loss_3d(sq, out.var.alpha_3d)
    reg = regularizer(out.pose.theta, out.pose.beta, tcfg.w_theta, tcfg.w_beta)
    return {"l2d": l2d, "l3d": l3d, "lvar": lvar, "reg": reg}


def total_loss(terms: list, gamma_2d: float = 1.0, gamma_3d: float = 1.0,
               gamma_var: float = 1.0) -> Tensor:
    """Sum over loops of the weighted losses plus the per-loop regularizer."""
    if not terms:
        raise ValueError("total_loss needs at least one loop")
    total = None
    for t in terms:
        part = (gamma_2d * t["l2d"] + gamma_3d * t["l3d"]
                + gamma_var * t["lvar"] + t["reg"])
        total = part if total is None else total + part
    return total


def _make_optimizer(tcfg: TrainConfig, groups):
    cls = Adam if tcfg.optimizer == "adam" else SGD
    return cls(groups, lr=tcfg.lr)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    # partial tail batches are dropped: batch norm needs >1 row and epoch
    # shapes stay constant
    for i in range(n // batch_size):
        yield perm[i * batch_size:(i + 1) * batch_size]


def _validate(net: PoseNetwork, data, batch_size: int = 128) -> dict:
    """Mean per-loop 2D/3D errors over a split, eval mode."""
    net.eval()
    n = len(data.images)
    sums2 = np.zeros(net.cfg.l_max + 1)
    sums3 = np.zeros(net.cfg.l_max + 1)
    with no_grad():
        for i in range(0, n, batch_size):
            x = Tensor(data.images[i:i + batch_size])
            outs = net.forward_loop(x)
            for l, out in enumerate(outs):
                e2, e3 = joint_errors(out.j2d, out.j3d,
                                      data.j2d[i:i + batch_size],
                                      data.j3d[i:i + batch_size])
                sums2[l] += e2.mean(axis=1).sum()
                sums3[l] += e3.mean(axis=1).sum()
    return {"err2d": (sums2 / n).tolist(), "err3d": (sums3 / n).tolist()}


def _run_epochs(net: PoseNetwork, train, val, tcfg: TrainConfig, optimizer,
                epochs: int, l_stop: int, rng: np.random.Generator,
                log: list, phase: int | None = None):
    n = len(train.images)
    best, stale = np.inf, 0
    for epoch in range(epochs):
        net.train()
        losses = []
        for b, idx in enumerate(_batches(n, tcfg.batch_size, rng)):
            xb = train.images[idx]
            if tcfg.noise_aug > 0:
                # fresh pixel noise every batch: the fixed train set cannot be
                # memorized to zero error, so later loops keep a training
                # signal that the attention maps can act on
                xb = xb + rng.normal(0.0, tcfg.noise_aug,
                                     xb.shape).astype(xb.dtype)
            x = Tensor(xb)
            g2 = Tensor(train.j2d[idx])
            g3 = Tensor(train.j3d[idx])
            outs = net.forward_loop(x, l_stop)
            terms = [loop_terms(o, g2, g3, tcfg) for o in outs]
            loss = total_loss(terms, tcfg.gamma_2d, tcfg.gamma_3d, tcfg.gamma_var)
            if not np.isfinite(loss.data):
                comp = {k: float(t[k].data) for t in terms for k in t}
                raise TrainingDiverged(epoch, b, comp)
            backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            losses.append(float(loss.data))
        entry = {"epoch": len(log), "train_loss": float(np.mean(losses)),
                 "val": _validate(net, val)}
        if phase is not None:
            entry["phase"] = phase
        log.append(entry)
        if tcfg.early_stop:
            cur = entry["val"]["err3d"][l_stop]
            if cur < best - 1e-6:
                best, stale = cur, 0
            else:
                stale += 1
                if stale > tcfg.patience:
                    break


def train_end_to_end(mcfg: ModelConfig, tcfg: TrainConfig, train, val) -> tuple:
    """All loops from the first batch; epoch budget matches the progressive
    schedule (initial + per_loop * l_max)."""
    tcfg.validate()
    net = PoseNetwork(mcfg, seed=tcfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
    optimizer = _make_optimizer(tcfg, net.trainable_parameters())
    log = []
    epochs = tcfg.epochs_initial + tcfg.epochs_per_loop * mcfg.l_max
    _run_epochs(net, train, val, tcfg, optimizer, epochs, mcfg.l_max, rng, log)
    return net, optimizer, log, rng


def train_progressive(mcfg: ModelConfig, tcfg: TrainConfig, train, val) -> tuple:
    """Grow the loop count one phase at a time (fresh BN bank entry per phase,
    frozen feature extractor, learning rate /10 per phase except the attention
    decoder)."""
    tcfg.validate()
    target = mcfg.l_max
    run_cfg = replace(mcfg, l_max=0)
    net = PoseNetwork(run_cfg, seed=tcfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
    log = []
    optimizer = None
    for phase in range(target + 1):
        if phase > 0:
            net.grow_banks()
            if phase == 1:
                net.freeze_feature_extractor()
            scale = 0.1 ** phase
            amg = set(id(p) for p in net.backbone.amg_params())
            rest = [p for p in net.trainable_parameters() if id(p) not in amg]
            groups = [{"params": rest, "lr": tcfg.lr * scale},
                      {"params": net.backbone.amg_params(), "lr": tcfg.lr}]
            optimizer = _make_optimizer(tcfg, groups)
        else:
            optimizer = _make_optimizer(tcfg, net.trainable_parameters())
        epochs = tcfg.epochs_initial if phase == 0 else tcfg.epochs_per_loop
        _run_epochs(net, train, val, tcfg, optimizer, epochs, phase, rng, log,
                    phase=phase)
    return net, optimizer, log, rng


def train_model(mcfg: ModelConfig, tcfg: TrainConfig, train, val) -> tuple:
    if tcfg.protocol == "e2e":
        return train_end_to_end(mcfg, tcfg, train, val)
    return train_progressive(mcfg, tcfg, train, val)


# ---------------------------------------------------------------------------
# gate training
# ---------------------------------------------------------------------------

def collect_trajectories(net: PoseNetwork, images, j2d, j3d, lam: float,
                         per_loop_gflops: float, rng: np.random.Generator,
                         tau: float | None = None, cumulative: bool = True):
    """Sample gate decisions over a batch; returns (trajectories, exit loops).

    The reward credited to a decision is the reward of the loop that decision
    leads to: EXIT at loop l keeps loop l's losses, CONTINUE at loop l lands
    at loop l+1. The final loop never consults the policy (exit is forced).
    """
    gate = net.gate
    if gate is None:
        raise ValueError("network has no gate attached")
    l_max = net.cfg.l_max
    n = len(images)
    with no_grad():
        outs = net.forward_loop(Tensor(images), l_max)
    feats = np.stack([o.var.f.data for o in outs], axis=1)       # (N, L+1, fw)
    rew = np.empty((n, l_max + 1))
    for l, o in enumerate(outs):
        l2, l3 = per_sample_losses(o.j2d, o.j3d, j2d, j3d)
        for i in range(n):
            rew[i, l] = reward(l2[i], l3[i], l, per_loop_gflops, lam, cumulative)
    flat = feats.reshape(n * (l_max + 1), -1)
    probs = gate.probs(Tensor(flat)).reshape(n, l_max + 1, 2)

    trajectories, exits = [], np.full(n, l_max, dtype=int)
    for i in range(n):
        steps = []
        for l in range(l_max):
            action = EXIT if rng.random() < probs[i, l, EXIT] else CONTINUE
            r = rew[i, l] if action == EXIT else rew[i, l + 1]
            steps.append(TrajectoryStep(feats[i, l].copy(), action, float(r), l))
            if action == EXIT:
                exits[i] = l
                break
        trajectories.append(steps)
    return trajectories, exits


def train_gate(net: PoseNetwork, tcfg: TrainConfig, train, per_loop_gflops: float,
               lam: float, tau_gate: float = 1.0, cumulative: bool = True) -> list:
    """REINFORCE over sampled exit trajectories; main network untouched."""
    tcfg.validate()
    if net.cfg.l_max < 1:
        raise ValueError("gate training needs l_max >= 1")
    net.eval()
    for p in net.parameters():
        p.tracked = False
    gate = net.attach_gate(tau_gate, seed=tcfg.seed + 101)
    optimizer = Adam(gate.params(), lr=tcfg.gate_lr)
    baseline = RunningBaseline()
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 2]))
    n = len(train.images)
    log = []
    for epoch in range(tcfg.gate_epochs):
        stats, mean_exits = [], []
        for idx in _batches(n, tcfg.batch_size, rng):
            trajectories, exits = collect_trajectories(
                net, train.images[idx], train.j2d[idx], train.j3d[idx],
                lam, per_loop_gflops, rng, cumulative=cumulative)
            trajectories = [t for t in trajectories if t]
            if not trajectories:
                continue
            stats.append(policy_gradient_update(trajectories, gate, optimizer,
                                                baseline))
            mean_exits.append(exits.mean())
        log.append({"epoch": epoch,
                    "mean_reward": float(np.mean([s["mean_reward"] for s in stats])),
                    "mean_exit_loop": float(np.mean(mean_exits)),
                    "baseline": baseline.value})
    return log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, net: PoseNetwork, tcfg: TrainConfig | None = None,
                    log: list | None = None, optimizer=None,
                    rng: np.random.Generator | None = None,
                    inputs: dict | None = None):
    params = net.param_entries()
    states = net.state_entries()
    opt_arrays = optimizer.state_arrays() if optimizer is not None else []
    header = {
        "version": VERSION,
        "config": {
            "model": asdict(net.cfg),
            "train": asdict(tcfg) if tcfg is not None else None,
        },
        "inputs": inputs or {},
        "has_gate": net.gate is not None,
        "gate_tau": net.gate.tau if net.gate is not None else None,
        "params": [[name, list(t.shape)] for name, t in params],
        "states": [[name, list(a.shape)] for name, a in states],
        "opt_arrays": [list(a.shape) for a in opt_arrays],
        "log": log or [],
        "rng": rng.bit_generator.state if rng is not None else None,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for _, t in params:
                fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
            for _, a in states:
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
            for a in opt_arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    except OSError as e:
        raise OSError(f"cannot write checkpoint to {path}: {e}") from e


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        hlen = struct.unpack("<Q", fh.read(8))[0]
        return json.loads(fh.read(hlen).decode())


def load_checkpoint(path):
    """Rebuild the network (and optimizer arrays) from a checkpoint file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16:16 + hlen].decode())
    off = 16 + hlen

    mcfg = ModelConfig(**header["config"]["model"])
    net = PoseNetwork(mcfg, seed=0)
    if header["has_gate"]:
        net.attach_gate(header["gate_tau"] or 1.0, seed=0)

    def take(shape):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        off += count * 4
        return arr.reshape(shape).copy()

    entries = net.param_entries()
    declared = header["params"]
    if [n for n, _ in entries] != [n for n, _ in declared]:
        raise ValueError(f"{path}: parameter table mismatch with rebuilt network")
    for (name, t), (_, shape) in zip(entries, declared):
        if list(t.shape) != shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        t.data = take(shape).astype(np.float32)
    for (name, a), (_, shape) in zip(net.state_entries(), header["states"]):
        a[...] = take(shape)
    opt_arrays = [take(shape) for shape in header["opt_arrays"]]
    net.eval()
    return net, header, opt_arrays
