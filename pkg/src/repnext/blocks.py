"""Composite blocks in training and fused inference form.

Chunk convolution splits channels into identity / small / medium / large
groups; copy convolution feeds the whole input to a small and a medium unit
at stride 2 and concatenates. MetaNeXt and downsampling blocks wrap these
token mixers with a batch norm and a two-layer pointwise channel mixer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import singledispatch
from typing import Optional, Union

import numpy as np

from .errors import AlreadyFused, DegenerateOutput, NonDivisibleChannels, OddSpatial, ShapeMismatch
from .ops import (DEFAULT_BN_EPS, BNParams, ConvParams, ConvSpec, batchnorm_infer, conv2d, gelu,
                  random_bn, random_conv)
from .reparam import (RepBranch, RepBranchSet, branch_forward, branch_set_forward, fold_bn,
                      fuse_rep_medium, fuse_rep_small)
from .tensor import SplitMix64, as_tensor, chunk_channels, concat_channels

Unit = Union[RepBranchSet, ConvParams, None]


def _apply_unit(unit: Unit, x: np.ndarray) -> np.ndarray:
    if unit is None:
        return x
    if isinstance(unit, RepBranchSet):
        return branch_set_forward(unit, x)
    return conv2d(unit, x)


def _unit_fused(unit) -> bool:
    return not isinstance(unit, RepBranchSet)


def _fuse_unit(unit: Unit, fuse) -> Unit:
    return fuse(unit) if isinstance(unit, RepBranchSet) else unit


# --- builders for the reparameterizable units ---------------------------------

def build_small_unit(rng: SplitMix64, channels: int, k_s: int = 3, stride: int = 1,
                     strips: str = "parallel", bias: bool = True) -> RepBranchSet:
    """k_s x k_s + (1 x k_s, k_s x 1 in parallel or in series) + 2x2 dilated by 2."""
    dw = ConvSpec.depthwise
    branches = [RepBranch.single(random_conv(rng, dw(channels, k_s, stride), bias))]
    if strips == "parallel":
        branches.append(RepBranch.single(random_conv(rng, dw(channels, (1, k_s), stride), bias)))
        branches.append(RepBranch.single(random_conv(rng, dw(channels, (k_s, 1), stride), bias)))
    elif strips == "serial":
        first = random_conv(rng, dw(channels, (1, k_s)), bias)
        second = random_conv(rng, dw(channels, (k_s, 1), stride), bias)
        branches.append(RepBranch.serial(first, second))
    else:
        raise ValueError(f"strips must be 'parallel' or 'serial', got {strips!r}")
    branches.append(RepBranch.single(random_conv(rng, dw(channels, 2, stride, dilation=2), bias)))
    return RepBranchSet(branches, (k_s, k_s), (stride, stride), channels)


def build_medium_unit(rng: SplitMix64, channels: int, k_m: int = 7, stride: int = 1,
                      bias: bool = True) -> RepBranchSet:
    """Five patterns: k_m x k_m, 3x5, 5x3, 1xk_m then k_m x1, 1x5 then 5x1."""
    if k_m < 5:
        raise ValueError("the medium unit needs k_m >= 5")
    dw = ConvSpec.depthwise
    branches = [RepBranch.single(random_conv(rng, dw(channels, k_m, stride), bias)),
                RepBranch.single(random_conv(rng, dw(channels, (3, 5), stride), bias)),
                RepBranch.single(random_conv(rng, dw(channels, (5, 3), stride), bias))]
    for k in (k_m, 5):
        first = random_conv(rng, dw(channels, (1, k)), bias)
        second = random_conv(rng, dw(channels, (k, 1), stride), bias)
        branches.append(RepBranch.serial(first, second))
    return RepBranchSet(branches, (k_m, k_m), (stride, stride), channels)


def build_large_strip(rng: SplitMix64, channels: int, k_l: int = 11, bias: bool = True) -> RepBranch:
    # First stage carries no bias: with zero intermediate padding that bias
    # would not be absorbable, and it is redundant with the second one.
    dw = ConvSpec.depthwise
    first = random_conv(rng, dw(channels, (1, k_l)), bias=False)
    second = random_conv(rng, dw(channels, (k_l, 1)), bias)
    return RepBranch.serial(first, second)


# --- chunk convolution ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChunkConvBlock:
    """Token mixer of the MetaNeXt block.

    A disabled group (``None``) passes its channels through unchanged, like
    the identity group. The large strip pair stays serial in both forms.
    """

    channels: int
    small: Unit
    medium: Unit
    large: Optional[RepBranch]

    def __post_init__(self):
        if self.channels % 4:
            raise NonDivisibleChannels(f"chunk convolution needs channels divisible by 4, got {self.channels}")

    @property
    def fused(self) -> bool:
        return _unit_fused(self.small) and _unit_fused(self.medium)


def build_chunk_conv(rng: SplitMix64, channels: int, k_s: int = 3, k_m: int = 7, k_l: int = 11,
                     use_small: bool = True, use_medium: bool = True, use_large: bool = True,
                     small_strips: str = "parallel", bias: bool = True) -> ChunkConvBlock:
    if channels % 4:
        raise NonDivisibleChannels(f"chunk convolution needs channels divisible by 4, got {channels}")
    c4 = channels // 4
    small = build_small_unit(rng, c4, k_s, 1, small_strips, bias) if use_small else None
    medium = build_medium_unit(rng, c4, k_m, 1, bias) if use_medium else None
    large = build_large_strip(rng, c4, k_l, bias) if use_large else None
    return ChunkConvBlock(channels, small, medium, large)


def chunk_conv_forward(block: ChunkConvBlock, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != block.channels:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, block expects {block.channels}")
    xi, xs, xm, xl = chunk_channels(x, 4)
    yl = xl if block.large is None else branch_forward(block.large, xl, serial_padding="per_stage")
    return concat_channels([xi, _apply_unit(block.small, xs), _apply_unit(block.medium, xm), yl])


# --- copy convolution ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CopyConvBlock:
    """Stride-2 token mixer: both units read the full input, outputs concatenate."""

    channels: int
    small: Union[RepBranchSet, ConvParams]
    medium: Union[RepBranchSet, ConvParams]
    adjust: Optional[ConvParams] = None

    @property
    def fused(self) -> bool:
        return _unit_fused(self.small) and _unit_fused(self.medium)

    @property
    def out_channels(self) -> int:
        return self.adjust.spec.out_channels if self.adjust is not None else 2 * self.channels


def build_copy_conv(rng: SplitMix64, channels: int, k_s: int = 3, k_m: int = 7,
                    small_strips: str = "serial", bias: bool = True,
                    adjust_to: Optional[int] = None) -> CopyConvBlock:
    small = build_small_unit(rng, channels, k_s, 2, small_strips, bias)
    medium = build_medium_unit(rng, channels, k_m, 2, bias)
    adjust = None
    if adjust_to is not None:
        adjust = random_conv(rng, ConvSpec.pointwise(2 * channels, adjust_to), bias)
    return CopyConvBlock(channels, small, medium, adjust)


def _require_even(x: np.ndarray) -> None:
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise OddSpatial(f"downsampling needs even spatial size, got {h}x{w}")


def copy_conv_forward(block: CopyConvBlock, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != block.channels:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, block expects {block.channels}")
    _require_even(x)
    y = concat_channels([_apply_unit(block.small, x), _apply_unit(block.medium, x)])
    return y if block.adjust is None else conv2d(block.adjust, y)


# --- channel mixer -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChannelMixer:
    expand: ConvParams
    squeeze: ConvParams

    def __post_init__(self):
        if self.expand.spec.out_channels != self.squeeze.spec.in_channels:
            raise ShapeMismatch("expand output channels must equal squeeze input channels")


def build_channel_mixer(rng: SplitMix64, channels: int, hidden: int,
                        out_channels: Optional[int] = None) -> ChannelMixer:
    out_channels = channels if out_channels is None else out_channels
    return ChannelMixer(random_conv(rng, ConvSpec.pointwise(channels, hidden)),
                        random_conv(rng, ConvSpec.pointwise(hidden, out_channels)))


def channel_mixer_forward(m: ChannelMixer, x: np.ndarray) -> np.ndarray:
    return conv2d(m.squeeze, gelu(conv2d(m.expand, x)))


def hidden_width(channels: int, mlp_ratio: float) -> int:
    return max(1, int(round(channels * mlp_ratio)))


# --- MetaNeXt block ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MetaNeXtBlock:
    """``y = x + mixer(bn(token_mixer(x)))``; fused form has ``norm=None``."""

    token_mixer: ChunkConvBlock
    norm: Optional[BNParams]
    channel_mixer: ChannelMixer

    @property
    def fused(self) -> bool:
        return self.norm is None and self.token_mixer.fused


def build_metanext(rng: SplitMix64, channels: int, mlp_ratio: float = 2.0, k_s: int = 3,
                   k_m: int = 7, k_l: int = 11, use_small: bool = True, use_medium: bool = True,
                   use_large: bool = True, small_strips: str = "parallel", bias: bool = True,
                   bn_eps: float = DEFAULT_BN_EPS) -> MetaNeXtBlock:
    tm = build_chunk_conv(rng, channels, k_s, k_m, k_l, use_small, use_medium, use_large,
                          small_strips, bias)
    norm = random_bn(rng, channels, bn_eps)
    mixer = build_channel_mixer(rng, channels, hidden_width(channels, mlp_ratio))
    return MetaNeXtBlock(tm, norm, mixer)


def metanext_forward(b: MetaNeXtBlock, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    y = chunk_conv_forward(b.token_mixer, x)
    if b.norm is not None:
        y = batchnorm_infer(b.norm, y)
    return x + channel_mixer_forward(b.channel_mixer, y)


# --- downsampling blocks -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DownsampleBlock:
    """``x_hat = bn(copy_conv(x)); y = x_hat + mixer(x_hat)``, then an optional 1x1."""

    token_mixer: CopyConvBlock
    norm: Optional[BNParams]
    channel_mixer: ChannelMixer
    out_proj: Optional[ConvParams] = None

    @property
    def fused(self) -> bool:
        return self.norm is None and self.token_mixer.fused

    @property
    def out_channels(self) -> int:
        if self.out_proj is not None:
            return self.out_proj.spec.out_channels
        return self.token_mixer.out_channels


def build_downsample(rng: SplitMix64, channels: int, out_channels: Optional[int] = None,
                     mlp_ratio: float = 2.0, k_s: int = 3, k_m: int = 7,
                     small_strips: str = "serial", bias: bool = True,
                     bn_eps: float = DEFAULT_BN_EPS) -> DownsampleBlock:
    tm = build_copy_conv(rng, channels, k_s, k_m, small_strips, bias)
    wide = tm.out_channels
    norm = random_bn(rng, wide, bn_eps)
    mixer = build_channel_mixer(rng, wide, hidden_width(wide, mlp_ratio))
    proj = None
    if out_channels is not None and out_channels != wide:
        proj = random_conv(rng, ConvSpec.pointwise(wide, out_channels))
    return DownsampleBlock(tm, norm, mixer, proj)


def downsample_forward(b: DownsampleBlock, x: np.ndarray) -> np.ndarray:
    x_hat = copy_conv_forward(b.token_mixer, x)
    if b.norm is not None:
        x_hat = batchnorm_infer(b.norm, x_hat)
    y = x_hat + channel_mixer_forward(b.channel_mixer, x_hat)
    return y if b.out_proj is None else conv2d(b.out_proj, y)


@dataclass(frozen=True, eq=False)
class PlainDownsample:
    """Ablation variant: a dense 3x3 stride-2 convolution followed by batch norm."""

    conv: ConvParams
    norm: Optional[BNParams]

    @property
    def fused(self) -> bool:
        return self.norm is None

    @property
    def out_channels(self) -> int:
        return self.conv.spec.out_channels


def build_plain_downsample(rng: SplitMix64, channels: int, out_channels: int, bias: bool = True,
                           bn_eps: float = DEFAULT_BN_EPS) -> PlainDownsample:
    spec = ConvSpec(channels, out_channels, 3, stride=2, padding=1)
    return PlainDownsample(random_conv(rng, spec, bias), random_bn(rng, out_channels, bn_eps))


def plain_downsample_forward(b: PlainDownsample, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    _require_even(x)
    y = conv2d(b.conv, x)
    return y if b.norm is None else batchnorm_infer(b.norm, y)


# --- stem ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Stem:
    """conv3x3/s2 -> BN -> GELU -> conv3x3/s2 -> BN (norms are None once folded)."""

    conv1: ConvParams
    norm1: Optional[BNParams]
    conv2: ConvParams
    norm2: Optional[BNParams]

    @property
    def fused(self) -> bool:
        return self.norm1 is None and self.norm2 is None

    @property
    def width(self) -> int:
        return self.conv2.spec.out_channels


def build_stem(width: int, rng: Optional[SplitMix64] = None, in_channels: int = 3,
               bn_eps: float = DEFAULT_BN_EPS) -> Stem:
    if width < 1:
        raise ValueError("stem width must be >= 1")
    rng = SplitMix64(0) if rng is None else rng
    half = math.ceil(width / 2)
    conv1 = random_conv(rng, ConvSpec(in_channels, half, 3, stride=2, padding=1), bias=False)
    norm1 = random_bn(rng, half, bn_eps)
    conv2 = random_conv(rng, ConvSpec(half, width, 3, stride=2, padding=1), bias=False)
    norm2 = random_bn(rng, width, bn_eps)
    return Stem(conv1, norm1, conv2, norm2)


def stem_forward(s: Stem, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[2] < 4 or x.shape[3] < 4:
        raise DegenerateOutput(f"stem needs at least 4x4 input, got {x.shape[2]}x{x.shape[3]}")
    y = conv2d(s.conv1, x)
    if s.norm1 is not None:
        y = batchnorm_infer(s.norm1, y)
    y = conv2d(s.conv2, gelu(y))
    return y if s.norm2 is None else batchnorm_infer(s.norm2, y)


# --- dispatch ------------------------------------------------------------------

@singledispatch
def block_forward(block, x: np.ndarray) -> np.ndarray:
    raise TypeError(f"no forward for {type(block).__name__}")


block_forward.register(ChunkConvBlock, chunk_conv_forward)
block_forward.register(CopyConvBlock, copy_conv_forward)
block_forward.register(ChannelMixer, channel_mixer_forward)
block_forward.register(MetaNeXtBlock, metanext_forward)
block_forward.register(DownsampleBlock, downsample_forward)
block_forward.register(PlainDownsample, plain_downsample_forward)
block_forward.register(Stem, stem_forward)


# --- fusion --------------------------------------------------------------------

def _fold_bn_into_expand(mixer: ChannelMixer, bn: BNParams) -> ChannelMixer:
    """Absorb a batch norm that precedes the expand 1x1 convolution."""
    s, t = bn.scale_shift()
    w = mixer.expand.weight
    weight = w * s[None, :, None, None]
    bias = np.zeros(w.shape[0]) if mixer.expand.bias is None else mixer.expand.bias
    bias = bias + w[:, :, 0, 0] @ t
    return ChannelMixer(ConvParams(mixer.expand.spec, weight, bias), mixer.squeeze)


def fuse_chunk_conv(block: ChunkConvBlock) -> ChunkConvBlock:
    if block.fused:
        raise AlreadyFused("chunk convolution is already fused")
    return ChunkConvBlock(block.channels, _fuse_unit(block.small, fuse_rep_small),
                          _fuse_unit(block.medium, fuse_rep_medium), block.large)


def fuse_copy_conv(block: CopyConvBlock, bn: Optional[BNParams] = None) -> CopyConvBlock:
    """Collapse both units; optionally fold a trailing batch norm into the result."""
    if block.fused:
        raise AlreadyFused("copy convolution is already fused")
    small = _fuse_unit(block.small, fuse_rep_small)
    medium = _fuse_unit(block.medium, fuse_rep_medium)
    adjust = block.adjust
    if bn is not None:
        if adjust is not None:
            adjust = fold_bn(adjust, bn)
        else:
            c = block.channels
            lo = BNParams(bn.gamma[:c], bn.beta[:c], bn.running_mean[:c], bn.running_var[:c], bn.eps)
            hi = BNParams(bn.gamma[c:], bn.beta[c:], bn.running_mean[c:], bn.running_var[c:], bn.eps)
            small, medium = fold_bn(small, lo), fold_bn(medium, hi)
    return CopyConvBlock(block.channels, small, medium, adjust)


@singledispatch
def fuse_block(block):
    """Return the fused inference form of a training-form block."""
    raise TypeError(f"cannot fuse {type(block).__name__}")


@fuse_block.register
def _(block: MetaNeXtBlock) -> MetaNeXtBlock:
    if block.fused:
        raise AlreadyFused("MetaNeXt block is already fused")
    tm = fuse_chunk_conv(block.token_mixer) if not block.token_mixer.fused else block.token_mixer
    mixer = block.channel_mixer
    if block.norm is not None:
        mixer = _fold_bn_into_expand(mixer, block.norm)
    return MetaNeXtBlock(tm, None, mixer)


@fuse_block.register
def _(block: DownsampleBlock) -> DownsampleBlock:
    if block.fused:
        raise AlreadyFused("downsample block is already fused")
    if block.norm is None:
        raise AlreadyFused("downsample block has a folded norm but unfused units")
    tm = fuse_copy_conv(block.token_mixer, block.norm)
    return DownsampleBlock(tm, None, block.channel_mixer, block.out_proj)


@fuse_block.register
def _(block: PlainDownsample) -> PlainDownsample:
    if block.fused:
        raise AlreadyFused("plain downsample is already fused")
    return PlainDownsample(fold_bn(block.conv, block.norm), None)


@fuse_block.register
def _(block: Stem) -> Stem:
    if block.fused:
        raise AlreadyFused("stem is already fused")
    return Stem(fold_bn(block.conv1, block.norm1), None, fold_bn(block.conv2, block.norm2), None)


@fuse_block.register
def _(block: ChunkConvBlock) -> ChunkConvBlock:
    return fuse_chunk_conv(block)


@fuse_block.register
def _(block: CopyConvBlock) -> CopyConvBlock:
    return fuse_copy_conv(block)
