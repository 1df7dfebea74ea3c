"""Staged miniature residual CNN with optional motion blocks between stages.

Stage 1 is the stem (7x7 stride-2 conv, batch-norm, relu, 3x3 stride-2 max
pool). Stages 2..5 are residual stages, stage 6 is the head (global pool,
dropout, linear classifier). Motion blocks, when enabled, sit right after
stages 1..5 and never change activation shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .motion import (BatchNorm, DirectionSet, MotionBlock, MotionBlockSpec,
                     default_directions)
from .tensor import ConfigurationError, ParamRegistry, Tensor


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    num_residual_blocks: int
    downsample: bool


@dataclass
class ArchConfig:
    image_size: int = 64
    in_channels: int = 3
    stem_channels: int = 8
    stage_channels: tuple = (8, 16, 32, 64)
    blocks_per_stage: int = 1
    num_classes: int = 6
    dropout_keep: float = 0.5
    motion: str = "off"  # off | sum | concat
    reduction_factor: int = 4
    directions: DirectionSet = field(default_factory=default_directions)
    # one flag per insertion point: after stem, then after each residual stage
    motion_stages: tuple = (True, True, True, True, True)

    def stage_specs(self):
        specs = []
        for i, ch in enumerate(self.stage_channels):
            specs.append(StageSpec(ch, self.blocks_per_stage, downsample=i > 0))
        return specs


def _init_conv(rng, cout, cin, kh, kw, dtype):
    fan_in = cin * kh * kw
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(cout, cin, kh, kw)).astype(dtype)


class Conv2d:
    def __init__(self, registry, name, cin, cout, kernel, stride=1, padding=0,
                 bias=False, rng=None, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        self.weight = registry.add(
            f"{name}.weight", Tensor(_init_conv(rng, cout, cin, kernel, kernel, dtype))
        )
        self.bias = None
        if bias:
            self.bias = registry.add(
                f"{name}.bias", Tensor(np.zeros(cout, dtype=dtype)), weight_decay=False
            )

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear:
    def __init__(self, registry, name, fin, fout, rng, dtype=np.float32):
        bound = np.sqrt(6.0 / fin)
        w = rng.uniform(-bound, bound, size=(fout, fin)).astype(dtype)
        self.weight = registry.add(f"{name}.weight", Tensor(w))
        self.bias = registry.add(
            f"{name}.bias", Tensor(np.zeros(fout, dtype=dtype)), weight_decay=False
        )

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class ResidualBlock:
    """Two 3x3 conv/bn pairs with identity or 1x1-projection skip."""

    def __init__(self, registry, buffers, name, cin, cout, stride, rng, dtype):
        self.conv1 = Conv2d(registry, f"{name}.conv1", cin, cout, 3, stride, 1,
                            rng=rng, dtype=dtype)
        self.bn1 = BatchNorm(registry, buffers, f"{name}.bn1", cout, dtype)
        self.conv2 = Conv2d(registry, f"{name}.conv2", cout, cout, 3, 1, 1,
                            rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(registry, buffers, f"{name}.bn2", cout, dtype)
        self.proj = None
        self.proj_bn = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(registry, f"{name}.proj", cin, cout, 1, stride, 0,
                               rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm(registry, buffers, f"{name}.proj_bn", cout, dtype)

    def __call__(self, x, training):
        h = T.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        skip = x if self.proj is None else self.proj_bn(self.proj(x), training)
        return T.relu(T.add(h, skip))


class ModelGraph:
    """Assembled network with a flat named-parameter registry."""

    def __init__(self, arch, seed, dtype=np.float32):
        self.arch = arch
        self.dtype = dtype
        self.registry = ParamRegistry()
        self.buffers = {}
        rng = np.random.default_rng(seed)

        self._check_extents(arch)

        self.stem_conv = Conv2d(self.registry, "stem.conv", arch.in_channels,
                                arch.stem_channels, 7, 2, 3, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm(self.registry, self.buffers, "stem.bn",
                                 arch.stem_channels, dtype)

        self.stages = []
        cin = arch.stem_channels
        for i, spec in enumerate(arch.stage_specs()):
            blocks = []
            for j in range(spec.num_residual_blocks):
                stride = 2 if (spec.downsample and j == 0) else 1
                blocks.append(ResidualBlock(
                    self.registry, self.buffers, f"stage{i + 2}.block{j}",
                    cin, spec.out_channels, stride, rng, dtype,
                ))
                cin = spec.out_channels
            self.stages.append(blocks)

        self.motion_blocks = []
        insert_channels = [arch.stem_channels] + list(arch.stage_channels)
        for i, channels in enumerate(insert_channels):
            stage_flag = arch.motion_stages[i] if i < len(arch.motion_stages) else True
            enabled = arch.motion != "off" and stage_flag
            if not enabled:
                self.motion_blocks.append(None)
                continue
            spec = MotionBlockSpec(
                variant=arch.motion,
                in_channels=channels,
                reduction_factor=arch.reduction_factor,
                directions=arch.directions,
            )
            self.motion_blocks.append(MotionBlock(
                self.registry, self.buffers, f"motion{i + 1}", spec, rng, dtype
            ))

        self.head = Linear(self.registry, "head.fc", cin, arch.num_classes, rng, dtype)

    @staticmethod
    def _check_extents(arch):
        size = arch.image_size
        size = (size + 2 * 3 - 7) // 2 + 1       # stem conv
        size = (size + 2 * 1 - 3) // 2 + 1       # stem max pool
        for spec in arch.stage_specs():
            if spec.downsample:
                size = (size + 2 * 1 - 3) // 2 + 1
        if size < 1:
            raise ConfigurationError(
                f"image size {arch.image_size} collapses to zero spatial extent"
            )

    @property
    def has_motion(self):
        return any(b is not None for b in self.motion_blocks)

    def param_count(self):
        return self.registry.param_count()

    def _stem(self, x, training):
        h = T.relu(self.stem_bn(self.stem_conv(x), training))
        return T.maxpool2d(h, 3, 2, 1)

    def _head(self, x, training, rng):
        h = T.global_avg_pool(x)
        h = T.dropout(h, self.arch.dropout_keep, rng, training)
        return self.head(h)

    def forward_frames(self, x, training=False, rng=None):
        """Per-frame appearance path only (motion blocks bypassed)."""
        h = self._stem(x, training)
        for blocks in self.stages:
            for block in blocks:
                h = block(h, training)
        return self._head(h, training, rng)

    def forward_snippets(self, frames, training=False, rng=None):
        """(B, K, C, H, W) frames -> (B, K, num_classes) per-snippet logits.

        All frames share the appearance network (batch-norm statistics pool
        over the folded B*K batch); motion blocks fuse pairs (k, k+1).
        """
        B, K = frames.data.shape[0], frames.data.shape[1]
        if self.has_motion and K < 2:
            raise ConfigurationError("motion blocks require at least 2 snippets")
        h = T.reshape(frames, (B * K,) + frames.data.shape[2:])
        h = self._stem(h, training)
        if self.motion_blocks[0] is not None:
            h = self.motion_blocks[0].forward_folded(h, B, K, training)
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                h = block(h, training)
            mb = self.motion_blocks[i + 1]
            if mb is not None:
                h = mb.forward_folded(h, B, K, training)
        logits = self._head(h, training, rng)
        return T.reshape(logits, (B, K, self.arch.num_classes))


def build_model(arch, seed, dtype=np.float32):
    """Deterministic construction: same seed and config give the same registry."""
    if arch.motion != "off":
        for ch in [arch.stem_channels] + list(arch.stage_channels):
            MotionBlockSpec(arch.motion, ch, arch.reduction_factor, arch.directions)
    return ModelGraph(arch, seed, dtype)
