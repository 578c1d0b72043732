"""Multi-scale visual backbone with inter-branch attention fusion.

Three branches hold feature stacks of 32/64/128 channels at halving
resolutions.  Fusion resamples source branches to the target geometry,
flattens stacks to (channels, h*w), forms row-stochastic channel attention
softmax(C C^T) and applies it to the target stack.  Three-branch fusion
additionally projects the audio embedding to a spatial row vector that is
added to every channel row before the attention is formed.

The merge average-pools every branch onto a common grid, concatenates, and a
conv head plus adaptive average pooling yields one embedding per image patch.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .config import BRANCH_CHANNELS, FusionSpec, Geometry, StageSpec, validate_schedule
from .errors import ConfigError
from .nn import Conv2d, ConvBnRelu, Dropout, Linear, Module
from .tensor import Tensor


def channel_attention(flat: Tensor) -> Tensor:
    """Row-stochastic (channels x channels) attention from a flattened stack.

    Logits are the mean elementwise products between channel rows (the raw
    dot products scaled by 1/(h*w), the attention's inner dimension); without
    this the Gram diagonal grows with the spatial size and saturates the
    softmax.
    """
    gram = ops.matmul(flat, ops.transpose(flat))
    return ops.softmax(ops.affine(gram, scale=1.0 / flat.shape[1]), axis=1)


def _flatten_stack(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return ops.reshape(x, (c, h * w))


def apply_attention(source_flat: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
    """Re-mix target channels by the source attention; returns (mixed, weights)."""
    attn = channel_attention(source_flat)
    mixed = ops.matmul(attn, _flatten_stack(target))
    return ops.reshape(mixed, target.shape), attn


class Resample(Module):
    """Bring one branch's stack to another branch's channels and resolution.

    Downward: repeated stride-2 3x3 convolutions doubling the channels.
    Upward: a 1x1 channel projection followed by bilinear upsampling.
    """

    def __init__(self, src: int, dst: int, seed, dtype):
        super().__init__()
        self.convs = []
        if dst > src:
            seeds = seed.spawn(dst - src)
            for i, s in zip(range(src, dst), seeds):
                self.convs.append(Conv2d(BRANCH_CHANNELS[i], BRANCH_CHANNELS[i + 1],
                                         3, s, stride=(2, 2), padding=(1, 1),
                                         dtype=dtype))
            self.up_factor = 1
        else:
            self.convs.append(Conv2d(BRANCH_CHANNELS[src], BRANCH_CHANNELS[dst],
                                     1, seed.spawn(1)[0], dtype=dtype))
            self.up_factor = 1 << (src - dst)

    def __call__(self, x):
        for conv in self.convs:
            x = conv(x)
        if self.up_factor > 1:
            x = ops.bilinear_upsample(x, self.up_factor)
        return x


class TwoBranchFusion(Module):
    def __init__(self, spec: FusionSpec, seed, dtype):
        super().__init__()
        (self.src,), self.dst = spec.srcs, spec.dst
        self.resample = Resample(self.src, self.dst, seed, dtype)

    def __call__(self, states, audio_emb=None):
        mixed, _ = apply_attention(_flatten_stack(self.resample(states[self.src])),
                                   states[self.dst])
        return mixed


class ThreeBranchFusion(Module):
    """Two source branches plus (optionally) the audio embedding drive the mix."""

    def __init__(self, spec: FusionSpec, geo: Geometry, embed_dim, use_audio,
                 dropout, seed, dtype):
        super().__init__()
        self.srcs, self.dst = spec.srcs, spec.dst
        seeds = seed.spawn(4)
        self.resamples = [Resample(s, self.dst, seeds[i], dtype)
                          for i, s in enumerate(self.srcs)]
        self.audio_proj = None
        if use_audio:
            _, w, h = geo.branch_shape(self.dst)
            self.audio_proj = Linear(embed_dim, w * h, seeds[2], dtype=dtype)
            self.audio_drop = Dropout(dropout, seeds[3])

    def __call__(self, states, audio_emb=None):
        combined = ops.add(self.resamples[0](states[self.srcs[0]]),
                           self.resamples[1](states[self.srcs[1]]))
        flat = _flatten_stack(combined)
        if self.audio_proj is not None and audio_emb is not None:
            row = self.audio_drop(self.audio_proj(ops.transpose(audio_emb)))  # (1, h*w)
            flat = ops.add(flat, row)
        mixed, _ = apply_attention(flat, states[self.dst])
        return mixed


class ResidualUnit(Module):
    """Bottleneck unit: 1x1 down, 3x3, 1x1 up, identity skip."""

    def __init__(self, channels, seed, dtype):
        super().__init__()
        mid = max(channels // 4, 8)
        seeds = seed.spawn(3)
        self.reduce = ConvBnRelu(channels, mid, 1, seeds[0], dtype=dtype)
        self.conv = ConvBnRelu(mid, mid, 3, seeds[1], padding=(1, 1), dtype=dtype)
        self.expand = Conv2d(mid, channels, 1, seeds[2], bias=False, dtype=dtype)
        from .nn import BatchNorm2d

        self.expand_bn = BatchNorm2d(channels, dtype=dtype)

    def __call__(self, x):
        branch = self.expand_bn(self.expand(self.conv(self.reduce(x))))
        return ops.relu(ops.add(branch, x))


class ResidualStack(Module):
    """Four bottleneck units at constant channel count and resolution."""

    def __init__(self, channels, seed, dtype, units=4):
        super().__init__()
        self.units = [ResidualUnit(channels, s, dtype) for s in seed.spawn(units)]

    def __call__(self, x):
        for unit in self.units:
            x = unit(x)
        return x


class Stage(Module):
    def __init__(self, spec: StageSpec, known: set, geo: Geometry, embed_dim,
                 use_audio, dropout, seed, dtype):
        super().__init__()
        self.spec = spec
        seeds = iter(seed.spawn(len(spec.branches) * 2 + len(spec.fusions)))
        self.transitions = []
        for b in spec.branches:
            if b in known:
                self.transitions.append(None)
            else:
                self.transitions.append(
                    ConvBnRelu(BRANCH_CHANNELS[b - 1], BRANCH_CHANNELS[b], 3,
                               next(seeds), stride=(2, 2), padding=(1, 1), dtype=dtype))
        self.residuals = [ResidualStack(BRANCH_CHANNELS[b], next(seeds), dtype)
                          for b in spec.branches]
        self.fusions = []
        for fus in spec.fusions:
            if len(fus.srcs) == 1:
                self.fusions.append(TwoBranchFusion(fus, next(seeds), dtype))
            else:
                self.fusions.append(ThreeBranchFusion(fus, geo, embed_dim, use_audio,
                                                      dropout, next(seeds), dtype))

    def __call__(self, states, audio_emb, apply_fusion=True):
        for b, trans in zip(self.spec.branches, self.transitions):
            if trans is not None:
                states[b] = trans(states[b - 1])
        for b, res in zip(self.spec.branches, self.residuals):
            states[b] = res(states[b])
        if apply_fusion:
            for fusion in self.fusions:
                states[fusion.dst] = fusion(states, audio_emb)
        return states


class VisualBackbone(Module):
    """Image (3, W, H) -> per-patch embeddings (P, Z)."""

    MERGE_CHANNELS = 256

    def __init__(self, geo: Geometry, stages: tuple[StageSpec, ...], embed_dim,
                 seed, use_audio_in_fusion=True, dropout=0.3, dtype=np.float64):
        super().__init__()
        validate_schedule(stages)
        self.geo = geo
        s = geo.stem_stride
        seeds = seed.spawn(len(stages) + 5)
        self.stem1 = ConvBnRelu(3, BRANCH_CHANNELS[0], 3, seeds[0],
                                stride=(s, s), padding=(1, 1), dtype=dtype)
        self.stem2 = ConvBnRelu(BRANCH_CHANNELS[0], BRANCH_CHANNELS[0], 3, seeds[1],
                                stride=(s, s), padding=(1, 1), dtype=dtype)
        self.stages = []
        known: set[int] = {0}
        for i, spec in enumerate(stages):
            self.stages.append(Stage(spec, known, geo, embed_dim, use_audio_in_fusion,
                                     dropout, seeds[2 + i], dtype))
            known |= set(spec.branches)
        self.final_branches = stages[-1].branches
        merged_in = sum(BRANCH_CHANNELS[b] for b in self.final_branches)
        k = 2 + len(stages)
        self.merge = ConvBnRelu(merged_in, self.MERGE_CHANNELS, 3, seeds[k],
                                padding=(1, 1), dtype=dtype)
        self.head1 = ConvBnRelu(self.MERGE_CHANNELS, embed_dim, 3, seeds[k + 1],
                                padding=(1, 1), dtype=dtype)
        self.head2 = ConvBnRelu(embed_dim, embed_dim, 3, seeds[k + 2],
                                padding=(1, 1), dtype=dtype)
        self.embed_dim = embed_dim

    def stem(self, image: Tensor) -> Tensor:
        _, w, h = image.shape
        divisor = self.geo.stem_down * 4 * self.geo.merge_pool[2]
        if w % divisor or h % divisor:
            raise ConfigError(
                f"image {w}x{h} not divisible by the pipeline factor {divisor}")
        return self.stem2(self.stem1(image))

    def merge_branches(self, states) -> Tensor:
        pooled = []
        for b in self.final_branches:
            f = self.geo.merge_pool[b]
            pooled.append(ops.avg_pool2d(states[b], (f, f)) if f > 1 else states[b])
        return self.merge(ops.concat(pooled, axis=0))

    def patch_embeddings(self, merged: Tensor) -> Tensor:
        gw, gh = self.geo.grid
        x = ops.adaptive_avg_pool2d(self.head2(self.head1(merged)), (gw, gh))
        return ops.reshape(ops.permute(x, (1, 2, 0)), (gw * gh, self.embed_dim))

    def __call__(self, image: Tensor, audio_emb: Tensor | None = None,
                 apply_fusion: bool = True) -> Tensor:
        states = {0: self.stem(image)}
        for stage in self.stages:
            states = stage(states, audio_emb, apply_fusion)
        return self.patch_embeddings(self.merge_branches(states))
