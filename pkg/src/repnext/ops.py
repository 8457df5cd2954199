"""Reference forward operators: convolution, inference batch norm and GELU.

These are the oracles every fused form is checked against, so they favour
a fixed, documented evaluation order over speed.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import erfc

from .errors import DegenerateOutput, ShapeMismatch
from .tensor import SplitMix64, as_tensor

DEFAULT_BN_EPS = 1e-5


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _padding4(p) -> tuple[int, int, int, int]:
    if isinstance(p, (int, np.integer)):
        return (int(p),) * 4
    p = tuple(int(v) for v in p)
    if len(p) == 2:
        return p[0], p[0], p[1], p[1]
    if len(p) == 4:
        return p
    raise ValueError(f"padding must be an int, (ph, pw) or (top, bottom, left, right); got {p}")


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-D convolution.

    ``padding`` is (top, bottom, left, right) of implicit zeros.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "dilation", _pair(self.dilation))
        object.__setattr__(self, "padding", _padding4(self.padding))
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}")
        if min(self.kernel + self.stride + self.dilation) < 1:
            raise ValueError("kernel, stride and dilation must be >= 1")
        if min(self.padding) < 0:
            raise ValueError("padding must be >= 0")

    @classmethod
    def depthwise(cls, channels: int, kernel, stride=1, dilation=1, padding="same") -> "ConvSpec":
        kernel, dilation = _pair(kernel), _pair(dilation)
        if padding == "same":
            padding = same_padding(kernel, dilation)
        return cls(channels, channels, kernel, stride, padding, dilation, groups=channels)

    @classmethod
    def pointwise(cls, in_channels: int, out_channels: int) -> "ConvSpec":
        return cls(in_channels, out_channels, (1, 1))

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def extent(self) -> tuple[int, int]:
        """Receptive extent ``(k - 1) * d + 1`` per axis."""
        (kh, kw), (dh, dw) = self.kernel, self.dilation
        return (kh - 1) * dh + 1, (kw - 1) * dw + 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def replace(self, **changes) -> "ConvSpec":
        values = dict(in_channels=self.in_channels, out_channels=self.out_channels,
                      kernel=self.kernel, stride=self.stride, padding=self.padding,
                      dilation=self.dilation, groups=self.groups)
        values.update(changes)
        return ConvSpec(**values)


def same_padding(kernel, dilation=(1, 1)) -> tuple[int, int, int, int]:
    """Symmetric padding that keeps H, W at stride 1 for odd extents."""
    (kh, kw), (dh, dw) = _pair(kernel), _pair(dilation)
    ph, pw = (kh - 1) * dh // 2, (kw - 1) * dw // 2
    return ph, ph, pw, pw


@dataclass(frozen=True, eq=False)
class ConvParams:
    spec: ConvSpec
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.shape != self.spec.weight_shape:
            raise ShapeMismatch(f"weight shape {w.shape} does not match spec {self.spec.weight_shape}")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.asarray(self.bias)
            if b.shape != (self.spec.out_channels,):
                raise ShapeMismatch(f"bias shape {b.shape}, expected ({self.spec.out_channels},)")
            object.__setattr__(self, "bias", b)

    @property
    def num_params(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)


@dataclass(frozen=True, eq=False)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_BN_EPS

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.gamma, self.beta, self.running_mean, self.running_var)]
        if any(a.ndim != 1 or a.shape != arrays[0].shape for a in arrays):
            raise ShapeMismatch("batch-norm arrays must be 1-D and equally long")
        if np.any(arrays[3] < 0):
            raise ValueError("running_var must be non-negative")
        if not self.eps >= 0:
            raise ValueError("eps must be non-negative")
        for name, a in zip(("gamma", "beta", "running_mean", "running_var"), arrays):
            object.__setattr__(self, name, a)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels: int, eps: float = 0.0) -> "BNParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel ``(s, t)`` with ``bn(x) = s * x + t``."""
        s = self.gamma / np.sqrt(self.running_var + self.eps)
        return s, self.beta - s * self.running_mean


def output_shape(spec: ConvSpec, in_shape: Sequence[int]) -> tuple[int, int, int, int]:
    n, c, h, w = in_shape
    if c != spec.in_channels:
        raise ShapeMismatch(f"input has {c} channels, convolution expects {spec.in_channels}")
    top, bottom, left, right = spec.padding
    eh, ew = spec.extent
    sh, sw = spec.stride
    ho = (h + top + bottom - eh) // sh + 1
    wo = (w + left + right - ew) // sw + 1
    if ho < 1 or wo < 1 or h + top + bottom < eh or w + left + right < ew:
        raise DegenerateOutput(
            f"kernel extent {spec.extent} does not fit input {h}x{w} with padding {spec.padding}")
    return n, spec.out_channels, ho, wo


# Multiply counter used by the instrumented forward; a stack so nested scopes work.
_mac_counters: list[list[int]] = []


@contextlib.contextmanager
def count_multiplies() -> Iterator[list[int]]:
    """Count every multiply performed by ``conv2d`` inside the block.

    Yields a one-element list whose item holds the running total.
    """
    counter = [0]
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.pop()


def _record_multiplies(n: int) -> None:
    for counter in _mac_counters:
        counter[0] += n


def conv2d(params: ConvParams, x: np.ndarray) -> np.ndarray:
    """Direct cross-correlation with implicit zero padding.

    Each output element accumulates ``weight[o, c, u, v] * x[...]`` with c
    outermost, then u, then v, and adds the bias last. The loop runs over
    taps in Python and over all output positions in numpy, so the per-element
    summation order is fixed and results are bitwise reproducible.
    """
    spec = params.spec
    x = as_tensor(x)
    n, _, ho, wo = output_shape(spec, x.shape)
    dtype = np.result_type(x.dtype, params.weight.dtype)
    top, bottom, left, right = spec.padding
    xp = np.pad(x.astype(dtype, copy=False), ((0, 0), (0, 0), (top, bottom), (left, right)))
    g = spec.groups
    cg = spec.in_channels // g
    og = spec.out_channels // g
    xg = xp.reshape(n, g, cg, xp.shape[2], xp.shape[3])
    wg = params.weight.astype(dtype, copy=False).reshape(g, og, cg, *spec.kernel)
    (kh, kw), (sh, sw), (dh, dw) = spec.kernel, spec.stride, spec.dilation
    row_span = (ho - 1) * sh + 1
    col_span = (wo - 1) * sw + 1

    out = np.zeros((n, g, og, ho, wo), dtype=dtype)
    for c in range(cg):
        for u in range(kh):
            r0 = u * dh
            for v in range(kw):
                c0 = v * dw
                patch = xg[:, :, c, r0:r0 + row_span:sh, c0:c0 + col_span:sw]
                out += wg[:, :, c, u, v][None, :, :, None, None] * patch[:, :, None]
    if _mac_counters:
        _record_multiplies(n * spec.out_channels * ho * wo * cg * kh * kw)
    out = out.reshape(n, spec.out_channels, ho, wo)
    if params.bias is not None:
        out += params.bias.astype(dtype, copy=False)[None, :, None, None]
    return out


def batchnorm_infer(bn: BNParams, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != bn.channels:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, batch norm has {bn.channels}")
    shape = (1, -1, 1, 1)
    inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
    out = (x - bn.running_mean.reshape(shape)) * inv.reshape(shape)
    return (bn.gamma.reshape(shape) * out + bn.beta.reshape(shape)).astype(x.dtype, copy=False)


_INV_SQRT2 = 0.7071067811865475244


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with ``Phi(x) = erfc(-x / sqrt 2) / 2``.

    Using erfc rather than ``1 + erf`` avoids cancellation for large
    negative inputs.
    """
    x = np.asarray(x)
    return x * (0.5 * erfc(-x * _INV_SQRT2))


def random_conv(rng: SplitMix64, spec: ConvSpec, bias: bool = True) -> ConvParams:
    """Weights and bias uniform on [-1, 1) scaled by 1/sqrt(fan-in)."""
    fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
    scale = 1.0 / np.sqrt(fan_in)
    weight = rng.uniform_array(spec.weight_shape, scale)
    b = rng.uniform_array((spec.out_channels,), scale) if bias else None
    return ConvParams(spec, weight, b)


def random_bn(rng: SplitMix64, channels: int, eps: float = DEFAULT_BN_EPS) -> BNParams:
    """Non-trivial inference statistics so that folding is actually exercised."""
    gamma = 1.0 + 0.25 * rng.uniform(channels)
    beta = 0.1 * rng.uniform(channels)
    mean = 0.1 * rng.uniform(channels)
    var = 1.0 + 0.25 * rng.uniform(channels)
    return BNParams(gamma, beta, mean, var, eps)
