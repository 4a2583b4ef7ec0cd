"""Recursive convolutional backbone.

The network is a small residual net split at a configurable loop point into a
feature extractor (run once per image) and a refiner (re-run every loop with
shared conv weights but a separate batch-norm state per iteration). An
attention decoder lifts the refiner's deepest pre-pool map back to the
extractor's resolution with pixel-shuffle blocks, producing a [0,1] map that
gates the extractor features on the next loop.

Layout (base width C): stem 3x3/2 -> C, then four residual stages at stride 2
with channels C, 2C, 4C, 8C; global average pooling yields an 8C latent.
Downsampling stages sit at /2, /4, /8, /16, /32 of the input, and loop point
k in {1,2,3,4} splits after the stage at /2^k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffengine import Tensor, ops
from .diffengine.layers import BatchNorm2d, Conv2d

AMG_MODES = ("attention", "direct_upsample", "none")


@dataclass
class ModelConfig:
    input_size: int = 64
    base_channels: int = 8
    loop_point: int = 3
    l_max: int = 2
    fc_width: int = 128
    num_joints: int = 21
    amg_mode: str = "attention"

    def validate(self) -> "ModelConfig":
        if self.input_size % 32:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.loop_point not in (1, 2, 3, 4):
            raise ValueError(f"loop_point must be in 1..4, got {self.loop_point}")
        if self.l_max < 0:
            raise ValueError(f"l_max must be >= 0, got {self.l_max}")
        if self.amg_mode not in AMG_MODES:
            raise ValueError(f"amg_mode must be one of {AMG_MODES}, got {self.amg_mode!r}")
        if self.base_channels < 2:
            raise ValueError("base_channels must be at least 2")
        return self

    @property
    def latent_dim(self) -> int:
        return 8 * self.base_channels

    @property
    def feature_channels(self) -> int:
        """Channels of the extractor output at the configured loop point."""
        c = self.base_channels
        return (c, c, 2 * c, 4 * c)[self.loop_point - 1]

    @property
    def feature_size(self) -> int:
        return self.input_size // (2 ** self.loop_point)

    @property
    def deepest_size(self) -> int:
        return self.input_size // 32


class NormSite:
    """One normalization site: a single layer (extractor) or a per-loop bank."""

    def __init__(self, channels: int, copies: int = 1, dtype=np.float32):
        self.channels = channels
        self.dtype = dtype
        self.layers = [BatchNorm2d(channels, dtype=dtype) for _ in range(copies)]

    def __call__(self, x: Tensor, l: int = 0) -> Tensor:
        if l >= len(self.layers):
            raise ValueError(f"loop index {l} exceeds bank of {len(self.layers)} "
                             "batch-norm states")
        return self.layers[l](x)

    def grow(self):
        # warm-start the new entry from the last loop's statistics so a freshly
        # added loop normalizes like the one before it and training only has to
        # learn the per-loop correction
        bn = BatchNorm2d(self.channels, dtype=self.dtype)
        prev = self.layers[-1]
        bn.gamma.data[...] = prev.gamma.data
        bn.beta.data[...] = prev.beta.data
        bn.running_mean = prev.running_mean.copy()
        bn.running_var = prev.running_var.copy()
        self.layers.append(bn)

    def params(self):
        return [p for bn in self.layers for p in bn.params()]


class ResBlock:
    """Two 3x3 convs at stride 2/1 with a strided 1x1 shortcut, BN after each conv."""

    def __init__(self, in_ch: int, out_ch: int, copies: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.bn1 = NormSite(out_ch, copies, dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.bn2 = NormSite(out_ch, copies, dtype)
        self.conv_sc = Conv2d(in_ch, out_ch, 1, stride=2, padding=0, rng=rng, dtype=dtype)
        self.bn_sc = NormSite(out_ch, copies, dtype)

    def __call__(self, x: Tensor, l: int = 0) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x), l))
        h = self.bn2(self.conv2(h), l)
        sc = self.bn_sc(self.conv_sc(x), l)
        return ops.relu(h + sc)

    def conv_params(self):
        return self.conv1.params() + self.conv2.params() + self.conv_sc.params()

    def norm_sites(self):
        return [self.bn1, self.bn2, self.bn_sc]


class AttentionDecoder:
    """Pixel-shuffle decoder from the deepest refiner map to a [0,1] gate map."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.convs = []
        c = cfg.latent_dim
        for _ in range(5 - cfg.loop_point):
            if c % 4:
                raise ValueError(f"decoder channels {c} not divisible by 4")
            shuffled = c // 4
            out = max(shuffled, 4)
            self.convs.append(Conv2d(shuffled, out, 3, stride=1, padding=1,
                                     rng=rng, dtype=dtype))
            c = out
        self.final = Conv2d(c, cfg.feature_channels, 1, rng=rng, dtype=dtype)
        # zero weights + positive bias: gates start spatially uniform and open
        # (sigmoid(1) ~ 0.73), so a fresh decoder scales extractor features by
        # a constant the next normalization absorbs and refinement loops begin
        # at first-pass behavior. The bias stays near the sigmoid's linear
        # range so the maps keep a usable gradient, unlike a saturated start.
        self.final.weight.data[...] = 0.0
        self.final.bias.data[...] = 1.0

    def __call__(self, prepool: Tensor) -> Tensor:
        h = prepool
        for conv in self.convs:
            h = ops.relu(conv(ops.pixel_shuffle(h, 2)))
        return ops.sigmoid(self.final(h))

    def params(self):
        return [p for conv in self.convs for p in conv.params()] + self.final.params()


def _fit_channels(x: Tensor, target: int) -> Tensor:
    """Parameter-free channel adjustment: group-average down or tile up."""
    n, c, h, w = x.shape
    if c == target:
        return x
    if c % target == 0:
        g = c // target
        return ops.mean(ops.reshape(x, (n, target, g, h, w)), axis=2)
    if target % c == 0:
        return ops.concat([x] * (target // c), axis=1)
    raise ValueError(f"cannot fit {c} channels to {target} without parameters")


class Backbone:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        c = cfg.base_channels
        copies = cfg.l_max + 1
        k = cfg.loop_point

        self.stem_conv = Conv2d(3, c, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.stem_bn = NormSite(c, 1, dtype)
        # residual stages; stage i is part of the extractor when i < k-1
        specs = [(c, c), (c, 2 * c), (2 * c, 4 * c), (4 * c, 8 * c)]
        self.stages = [ResBlock(i, o, 1 if idx < k - 1 else copies, rng, dtype)
                       for idx, (i, o) in enumerate(specs)]
        self.split = k - 1
        if cfg.amg_mode == "attention":
            self.decoder = AttentionDecoder(cfg, rng, dtype)
        else:
            self.decoder = None

    # -- halves ------------------------------------------------------------

    def extract_features(self, x: Tensor) -> Tensor:
        n, ch, h, w = x.shape
        if ch != 3 or h != self.cfg.input_size or w != self.cfg.input_size:
            raise ValueError(f"expected (N, 3, {self.cfg.input_size}, "
                             f"{self.cfg.input_size}) input, got {x.shape}")
        h_ = ops.relu(self.stem_bn(self.stem_conv(x)))
        for stage in self.stages[:self.split]:
            h_ = stage(h_)
        return h_

    def refine(self, f_in: Tensor, l: int):
        """Run the shared refiner with BN bank entry l; returns (latent, prepool)."""
        if l > self.cfg.l_max:
            raise ValueError(f"loop index {l} exceeds l_max={self.cfg.l_max}")
        h = f_in
        for stage in self.stages[self.split:]:
            h = stage(h, l)
        return ops.global_avg_pool(h), h

    def attention_map(self, prepool: Tensor) -> Tensor:
        mode = self.cfg.amg_mode
        if mode == "attention":
            return self.decoder(prepool)
        if mode == "direct_upsample":
            h = ops.pixel_shuffle(prepool, 2)
            factor = 2 ** (4 - self.cfg.loop_point)
            if factor > 1:
                h = ops.nearest_upsample(h, factor)
            return _fit_channels(h, self.cfg.feature_channels)
        raise ValueError("attention map requested with amg_mode='none'")

    @staticmethod
    def apply_attention(f: Tensor, m: Tensor) -> Tensor:
        if f.shape != m.shape:
            raise ValueError(f"attention map shape {m.shape} does not match "
                             f"feature shape {f.shape}")
        return ops.hadamard(f, m)

    # -- bookkeeping ---------------------------------------------------------

    def grow_banks(self):
        for stage in self.stages[self.split:]:
            for site in stage.norm_sites():
                site.grow()
        self.cfg.l_max += 1

    def fe_params(self):
        out = self.stem_conv.params() + self.stem_bn.params()
        for stage in self.stages[:self.split]:
            out += stage.conv_params()
            for site in stage.norm_sites():
                out += site.params()
        return out

    def rf_params(self):
        out = []
        for stage in self.stages[self.split:]:
            out += stage.conv_params()
            for site in stage.norm_sites():
                out += site.params()
        return out

    def amg_params(self):
        return self.decoder.params() if self.decoder is not None else []

    def norm_layers(self):
        sites = [self.stem_bn] + [s for st in self.stages for s in st.norm_sites()]
        return [bn for site in sites for bn in site.layers]

    def fe_norm_layers(self):
        sites = [self.stem_bn] + [s for st in self.stages[:self.split]
                                  for s in st.norm_sites()]
        return [bn for site in sites for bn in site.layers]
