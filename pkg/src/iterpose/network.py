"""Full model: backbone + pose head + variance head (+ optional gate).

Owns deterministic parameter naming/ordering for checkpoints and the looped
forward pass that chains attention maps between refinement iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, ModelConfig
from .diffengine import Tensor
from .gating import GatePolicy
from .posehead import PoseHead, PoseParams, forward_kinematics, project_weak_perspective
from .uncertainty import VarianceEstimate, VarianceHead


@dataclass
class LoopOutput:
    loop: int
    latent: Tensor            # (N, 8C)
    prepool: Tensor           # (N, 8C, R, R)
    attention: Tensor | None  # map applied before this loop (None at loop 0)
    pose: PoseParams
    j3d: Tensor               # (N, 21, 3) canonical frame
    j2d: Tensor               # (N, 21, 2) pixels
    var: VarianceEstimate


class PoseNetwork:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg, rng, dtype)
        self.pose_head = PoseHead(cfg.latent_dim, cfg.fc_width, rng, dtype)
        self.var_head = VarianceHead(cfg.latent_dim, cfg.fc_width, rng, dtype)
        self.gate: GatePolicy | None = None
        self.fe_frozen = False
        self.training = True

    # -- modes ---------------------------------------------------------------

    def train(self):
        self.training = True
        for bn in self.backbone.norm_layers():
            bn.training = not bn.frozen
        return self

    def eval(self):
        self.training = False
        for bn in self.backbone.norm_layers():
            bn.training = False
        return self

    def freeze_feature_extractor(self):
        for p in self.backbone.fe_params():
            p.tracked = False
        for bn in self.backbone.fe_norm_layers():
            bn.frozen = True
            bn.training = False
        self.fe_frozen = True

    def grow_banks(self):
        self.backbone.grow_banks()

    def attach_gate(self, tau: float = 1.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.gate = GatePolicy(self.var_head.hidden, tau, rng, self.dtype)
        return self.gate

    # -- forward -------------------------------------------------------------

    def head_outputs(self, loop: int, latent: Tensor, prepool: Tensor,
                     attention: Tensor | None) -> LoopOutput:
        pose = self.pose_head(latent)
        j3d = forward_kinematics(pose.theta, pose.beta)
        j2d = project_weak_perspective(j3d, pose.R, pose.trans, pose.scale)
        var = self.var_head(latent)
        return LoopOutput(loop, latent, prepool, attention, pose, j3d, j2d, var)

    def forward_loop(self, x: Tensor, l_stop: int | None = None) -> list[LoopOutput]:
        """Run loops 0..l_stop, chaining attention maps between iterations."""
        if l_stop is None:
            l_stop = self.cfg.l_max
        if self.cfg.amg_mode == "none":
            l_stop = 0
        if l_stop > self.cfg.l_max:
            raise ValueError(f"l_stop {l_stop} exceeds l_max {self.cfg.l_max}")
        feats = self.backbone.extract_features(x)
        outs = []
        f_in, att = feats, None
        for l in range(l_stop + 1):
            if l > 0:
                att = self.backbone.attention_map(outs[-1].prepool)
                f_in = self.backbone.apply_attention(feats, att)
            latent, prepool = self.backbone.refine(f_in, l)
            outs.append(self.head_outputs(l, latent, prepool, att))
        return outs

    # -- parameter bookkeeping -------------------------------------------------

    def component_params(self) -> dict:
        groups = {
            "fe": self.backbone.fe_params(),
            "rf": self.backbone.rf_params(),
            "amg": self.backbone.amg_params(),
            "pose": self.pose_head.params(),
            "var": self.var_head.params(),
        }
        if self.gate is not None:
            groups["gate"] = self.gate.params()
        return groups

    def parameters(self):
        return [p for ps in self.component_params().values() for p in ps]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.tracked]

    def param_entries(self):
        """Deterministic (name, tensor) walk used by the checkpoint format."""
        entries = []

        def conv(name, layer):
            entries.append((f"{name}.weight", layer.weight))
            if layer.bias is not None:
                entries.append((f"{name}.bias", layer.bias))

        def linear(name, layer):
            entries.append((f"{name}.weight", layer.weight))
            entries.append((f"{name}.bias", layer.bias))

        def site(name, s):
            for i, bn in enumerate(s.layers):
                entries.append((f"{name}.{i}.gamma", bn.gamma))
                entries.append((f"{name}.{i}.beta", bn.beta))

        bb = self.backbone
        conv("stem.conv", bb.stem_conv)
        site("stem.bn", bb.stem_bn)
        for idx, stage in enumerate(bb.stages):
            base = f"stage{idx}"
            conv(f"{base}.conv1", stage.conv1)
            site(f"{base}.bn1", stage.bn1)
            conv(f"{base}.conv2", stage.conv2)
            site(f"{base}.bn2", stage.bn2)
            conv(f"{base}.conv_sc", stage.conv_sc)
            site(f"{base}.bn_sc", stage.bn_sc)
        if bb.decoder is not None:
            for i, c in enumerate(bb.decoder.convs):
                conv(f"amg.block{i}", c)
            conv("amg.final", bb.decoder.final)
        linear("pose.fc1", self.pose_head.fc1)
        linear("pose.fc2", self.pose_head.fc2)
        linear("var.fc1", self.var_head.fc1)
        linear("var.fc2", self.var_head.fc2)
        if self.gate is not None:
            linear("gate.fc1", self.gate.fc1)
            linear("gate.fc2", self.gate.fc2)
        return entries

    def state_entries(self):
        """(name, array) pairs for batch-norm running statistics."""
        entries = []

        def site(name, s):
            for i, bn in enumerate(s.layers):
                entries.append((f"{name}.{i}.running_mean", bn.running_mean))
                entries.append((f"{name}.{i}.running_var", bn.running_var))

        bb = self.backbone
        site("stem.bn", bb.stem_bn)
        for idx, stage in enumerate(bb.stages):
            site(f"stage{idx}.bn1", stage.bn1)
            site(f"stage{idx}.bn2", stage.bn2)
            site(f"stage{idx}.bn_sc", stage.bn_sc)
        return entries

    def load_state_entry(self, name: str, arr: np.ndarray):
        for ename, ref in self.state_entries():
            if ename == name:
                ref[...] = arr
                return
        raise KeyError(f"unknown state entry {name!r}")
