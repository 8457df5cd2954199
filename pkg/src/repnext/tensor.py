"""Dense NCHW feature maps and channel split/join.

Tensors are plain 4-D numpy arrays in C order, so element order is
N-major, then C, then H, then W. Helpers here mark results read-only to
keep the "immutable after construction" contract honest.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import NonDivisibleChannels, ShapeMismatch

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """SplitMix64 stream mapped to uniform doubles on [-1, 1).

    Output ``k`` (1-based) of a stream seeded with ``s`` is
    ``mix(s + k * 0x9E3779B97F4A7C15 mod 2**64)``; the top 53 bits become
    ``u`` in [0, 1) and the returned value is ``2u - 1``.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            k = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + k * _GAMMA
            out = _mix(z)
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        bits = self.next_u64(n) >> np.uint64(11)
        return bits.astype(np.float64) * (2.0 ** -53) * 2.0 - 1.0

    def uniform_array(self, shape: Sequence[int], scale: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return (self.uniform(n) * scale).reshape(tuple(shape))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically derive a sub-seed, e.g. one per verification trial."""
    z = int(seed) & _MASK64
    with np.errstate(over="ignore"):
        for key in keys:
            z = int(_mix(np.array([(z + (int(key) + 1) * int(_GAMMA)) & _MASK64], dtype=np.uint64))[0])
    return z


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeMismatch(f"expected a 4-D (N, C, H, W) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeMismatch(f"all shape components must be >= 1, got {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def random_tensor(shape: Sequence[int], seed: int, dtype=np.float64) -> np.ndarray:
    """Seeded uniform [-1, 1) tensor; identical across runs and platforms."""
    if len(shape) != 4:
        raise ShapeMismatch(f"expected a 4-D shape, got {tuple(shape)}")
    out = SplitMix64(seed).uniform_array(shape).astype(dtype)
    out.flags.writeable = False
    return out


def chunk_channels(x: np.ndarray, parts: int) -> list[np.ndarray]:
    x = as_tensor(x)
    if parts < 1:
        raise ValueError("parts must be positive")
    c = x.shape[1]
    if c % parts:
        raise NonDivisibleChannels(f"{c} channels cannot be split into {parts} equal parts")
    step = c // parts
    return [x[:, i * step:(i + 1) * step] for i in range(parts)]


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeMismatch("nothing to concatenate")
    parts = [as_tensor(p) for p in parts]
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeMismatch(
                f"cannot concatenate {parts[0].shape} with {p.shape}: N/H/W differ")
        if p.dtype != parts[0].dtype:
            raise ShapeMismatch(f"dtype mismatch: {parts[0].dtype} vs {p.dtype}")
    return np.concatenate(parts, axis=1)


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
