"""Kernel-space algebra that collapses norm-free multi-branch depthwise units.

Every transform returns new parameters whose forward equals the original
unit's forward for all inputs (up to rounding). Serial branches are
evaluated with the pad-up-front convention: the summed padding of both
stages is applied to the input once and both stages then run unpadded.
That is the convention under which sequential composition is exact,
borders included.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import (EvenCanvas, GroupMismatch, ParityMismatch, ShapeMismatch,
                     SpecMismatch, StrideOnFirst)
from .ops import BNParams, ConvParams, ConvSpec, conv2d
from .tensor import as_tensor

BranchKind = Literal["identity", "single", "serial"]
SerialPadding = Literal["up_front", "per_stage"]


@dataclass(frozen=True, eq=False)
class RepBranch:
    """One branch of a reparameterizable unit: no normalization inside."""

    kind: BranchKind
    stages: tuple[ConvParams, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        expected = {"identity": 0, "single": 1, "serial": 2}[self.kind]
        if len(self.stages) != expected:
            raise ValueError(f"{self.kind} branch needs {expected} stage(s), got {len(self.stages)}")
        for st in self.stages:
            if not st.spec.is_depthwise:
                raise GroupMismatch("branch convolutions must be depthwise")
        if self.kind == "serial":
            first, second = self.stages
            if first.spec.stride != (1, 1):
                raise StrideOnFirst("the first stage of a serial branch must have stride 1")
            if first.spec.in_channels != second.spec.in_channels:
                raise GroupMismatch("serial stages disagree on channel count")

    @classmethod
    def single(cls, conv: ConvParams) -> "RepBranch":
        return cls("single", (conv,))

    @classmethod
    def serial(cls, first: ConvParams, second: ConvParams) -> "RepBranch":
        return cls("serial", (first, second))

    @property
    def stride(self) -> Optional[tuple[int, int]]:
        return self.stages[-1].spec.stride if self.stages else None

    @property
    def extent(self) -> tuple[int, int]:
        if not self.stages:
            return 1, 1
        hs, ws = zip(*(st.spec.extent for st in self.stages))
        return sum(hs) - len(hs) + 1, sum(ws) - len(ws) + 1

    @property
    def num_params(self) -> int:
        return sum(st.num_params for st in self.stages)


@dataclass(frozen=True, eq=False)
class RepBranchSet:
    """Training form of a reparameterizable depthwise unit (sum of branches)."""

    branches: tuple[RepBranch, ...]
    canvas: tuple[int, int]
    stride: tuple[int, int]
    channels: int

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "canvas", tuple(self.canvas))
        object.__setattr__(self, "stride", tuple(self.stride))
        if not self.branches:
            raise ValueError("a branch set needs at least one branch")
        for b in self.branches:
            if b.stages and b.stages[0].spec.in_channels != self.channels:
                raise GroupMismatch(f"branch on {b.stages[0].spec.in_channels} channels, set has {self.channels}")
            if b.stride is not None and b.stride != self.stride:
                raise SpecMismatch(f"branch stride {b.stride} differs from set stride {self.stride}")
            eh, ew = b.extent
            if eh > self.canvas[0] or ew > self.canvas[1]:
                raise SpecMismatch(f"branch extent {b.extent} exceeds canvas {self.canvas}")

    @property
    def num_params(self) -> int:
        return sum(b.num_params for b in self.branches)


def _valid(conv: ConvParams) -> ConvParams:
    return ConvParams(conv.spec.replace(padding=0), conv.weight, conv.bias)


def branch_forward(branch: RepBranch, x: np.ndarray, stride=(1, 1),
                   serial_padding: SerialPadding = "up_front") -> np.ndarray:
    if branch.kind == "identity":
        sh, sw = stride
        return np.array(x[:, :, ::sh, ::sw])
    if branch.kind == "single":
        return conv2d(branch.stages[0], x)
    first, second = branch.stages
    if serial_padding == "per_stage":
        return conv2d(second, conv2d(first, x))
    pad = np.add(first.spec.padding, second.spec.padding)
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[1]), (pad[2], pad[3])))
    return conv2d(_valid(second), conv2d(_valid(first), xp))


def branch_set_forward(bset: RepBranchSet, x: np.ndarray,
                       serial_padding: SerialPadding = "up_front") -> np.ndarray:
    """Sum of branch outputs, accumulated in branch order."""
    x = as_tensor(x)
    if x.shape[1] != bset.channels:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, unit expects {bset.channels}")
    out = None
    for b in bset.branches:
        y = branch_forward(b, x, bset.stride, serial_padding)
        if out is not None and y.shape != out.shape:
            raise ShapeMismatch(f"branch outputs disagree: {out.shape} vs {y.shape}")
        out = y if out is None else out + y
    return out


def fold_bn(conv: ConvParams, bn: BNParams) -> ConvParams:
    """Absorb an inference batch norm that follows ``conv``."""
    if bn.channels != conv.spec.out_channels:
        raise ShapeMismatch(f"batch norm over {bn.channels} channels, conv has {conv.spec.out_channels} outputs")
    s = bn.gamma / np.sqrt(bn.running_var + bn.eps)
    bias = np.zeros(conv.spec.out_channels) if conv.bias is None else conv.bias
    weight = conv.weight * s[:, None, None, None]
    return ConvParams(conv.spec, weight, s * (bias - bn.running_mean) + bn.beta)


def expand_dilated(conv: ConvParams) -> ConvParams:
    """Rewrite a dilated kernel as the equivalent dense kernel with zero gaps."""
    dh, dw = conv.spec.dilation
    if (dh, dw) == (1, 1):
        return conv
    eh, ew = conv.spec.extent
    o, cg, kh, kw = conv.weight.shape
    dense = np.zeros((o, cg, eh, ew), dtype=conv.weight.dtype)
    dense[:, :, ::dh, ::dw] = conv.weight
    return ConvParams(conv.spec.replace(kernel=(eh, ew), dilation=1), dense, conv.bias)


def embed_kernel(conv: ConvParams, canvas: tuple[int, int]) -> ConvParams:
    """Center ``conv``'s kernel on a larger zero canvas.

    Padding grows by the embedding offset on each side, which for a
    "same"-padded kernel lands on ``(K - 1) / 2`` per side.
    """
    KH, KW = canvas
    if conv.spec.dilation != (1, 1):
        raise ParityMismatch("densify dilated kernels with expand_dilated before embedding")
    kh, kw = conv.spec.kernel
    if kh > KH or kw > KW:
        raise SpecMismatch(f"kernel {kh}x{kw} larger than canvas {KH}x{KW}")
    if (KH - kh) % 2 or (KW - kw) % 2:
        raise ParityMismatch(f"kernel {kh}x{kw} cannot be centered on canvas {KH}x{KW}")
    oy, ox = (KH - kh) // 2, (KW - kw) // 2
    if (oy, ox) == (0, 0):
        return conv
    o, cg = conv.weight.shape[:2]
    weight = np.zeros((o, cg, KH, KW), dtype=conv.weight.dtype)
    weight[:, :, oy:oy + kh, ox:ox + kw] = conv.weight
    t, b, l, r = conv.spec.padding
    spec = conv.spec.replace(kernel=(KH, KW), padding=(t + oy, b + oy, l + ox, r + ox))
    return ConvParams(spec, weight, conv.bias)


def identity_as_dwconv(channels: int, canvas: tuple[int, int], stride=(1, 1)) -> ConvParams:
    KH, KW = canvas
    if KH % 2 == 0 or KW % 2 == 0:
        raise EvenCanvas(f"identity needs an odd canvas, got {KH}x{KW}")
    weight = np.zeros((channels, 1, KH, KW))
    weight[:, 0, KH // 2, KW // 2] = 1.0
    spec = ConvSpec.depthwise(channels, (KH, KW), stride=stride)
    return ConvParams(spec, weight, np.zeros(channels))


def compose_sequential_dw(first: ConvParams, second: ConvParams) -> ConvParams:
    """Merge ``second(first(x))`` into one depthwise convolution.

    The merged kernel is the full 2-D convolution of the two kernels and the
    merged bias is ``b2 + b1 * sum(w2)``. Equivalence holds under the
    pad-up-front convention.
    """
    for conv in (first, second):
        if not conv.spec.is_depthwise:
            raise GroupMismatch("compose_sequential_dw needs depthwise convolutions")
    if first.spec.in_channels != second.spec.in_channels:
        raise GroupMismatch(f"channel counts differ: {first.spec.in_channels} vs {second.spec.in_channels}")
    if first.spec.stride != (1, 1):
        raise StrideOnFirst("the first convolution must have stride 1")
    first, second = expand_dilated(first), expand_dilated(second)
    c = first.spec.in_channels
    (kh1, kw1), (kh2, kw2) = first.spec.kernel, second.spec.kernel
    w1 = first.weight[:, 0]
    w2 = second.weight[:, 0]
    merged = np.zeros((c, kh1 + kh2 - 1, kw1 + kw2 - 1), dtype=np.result_type(w1, w2))
    for u in range(kh2):
        for v in range(kw2):
            merged[:, u:u + kh1, v:v + kw1] += w2[:, u, v, None, None] * w1

    bias = None
    if first.bias is not None or second.bias is not None:
        bias = np.zeros(c) if second.bias is None else second.bias.astype(np.float64)
        if first.bias is not None:
            bias = bias + first.bias * w2.sum(axis=(1, 2))
    padding = tuple(np.add(first.spec.padding, second.spec.padding).tolist())
    spec = ConvSpec.depthwise(c, merged.shape[1:], stride=second.spec.stride, padding=padding)
    return ConvParams(spec, merged[:, None], bias)


def merge_parallel(branches: Sequence[ConvParams]) -> ConvParams:
    """Sum kernels and biases of convolutions that share one spec."""
    if not branches:
        raise SpecMismatch("nothing to merge")
    spec = branches[0].spec
    for b in branches:
        if b.spec != spec:
            raise SpecMismatch(f"spec {b.spec} differs from {spec}")
    if not spec.is_depthwise or spec.dilation != (1, 1):
        raise SpecMismatch("merge_parallel expects dense (dilation 1) depthwise convolutions")
    weight = np.sum([b.weight for b in branches], axis=0)
    bias = None
    if any(b.bias is not None for b in branches):
        bias = np.zeros(spec.out_channels)
        for b in branches:
            if b.bias is not None:
                bias = bias + b.bias
    return ConvParams(spec, weight, bias)


def branch_to_canvas(branch: RepBranch, canvas: tuple[int, int], channels: int,
                     stride=(1, 1)) -> ConvParams:
    """Express one branch as a single depthwise conv on ``canvas``."""
    if branch.kind == "identity":
        return identity_as_dwconv(channels, canvas, stride)
    if branch.kind == "single":
        conv = expand_dilated(branch.stages[0])
    else:
        conv = compose_sequential_dw(*branch.stages)
    return embed_kernel(conv, canvas)


def fuse_branch_set(bset: RepBranchSet) -> ConvParams:
    parts = [branch_to_canvas(b, bset.canvas, bset.channels, bset.stride) for b in bset.branches]
    pads = {p.spec.padding for p in parts}
    if len(pads) > 1:
        raise SpecMismatch(f"branches are not aligned on a common canvas (paddings {sorted(pads)})")
    return merge_parallel(parts)


def fuse_rep_small(bset: RepBranchSet) -> ConvParams:
    if bset.canvas[0] != bset.canvas[1] or bset.canvas[0] % 2 == 0:
        raise ParityMismatch(f"small unit needs an odd square canvas, got {bset.canvas}")
    if bset.stride not in ((1, 1), (2, 2)):
        raise SpecMismatch(f"small unit stride must be 1 or 2, got {bset.stride}")
    return fuse_branch_set(bset)


def fuse_rep_medium(bset: RepBranchSet) -> ConvParams:
    if bset.canvas[0] != bset.canvas[1] or bset.canvas[0] % 2 == 0:
        raise ParityMismatch(f"medium unit needs an odd square canvas, got {bset.canvas}")
    return fuse_branch_set(bset)
