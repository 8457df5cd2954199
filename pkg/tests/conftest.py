"""Independent oracles shared by the test modules.

These deliberately take a different route from the engine: scipy's 2-D
correlation per (sample, output channel, input channel) with explicit
kernel dilation and stride slicing.
"""

import numpy as np
import pytest
from scipy.signal import correlate2d


def dilate_kernel(k: np.ndarray, d: tuple[int, int]) -> np.ndarray:
    kh, kw = k.shape
    out = np.zeros(((kh - 1) * d[0] + 1, (kw - 1) * d[1] + 1), dtype=k.dtype)
    out[::d[0], ::d[1]] = k
    return out


def oracle_conv(params, x: np.ndarray) -> np.ndarray:
    spec = params.spec
    top, bottom, left, right = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    sh, sw = spec.stride
    rows = []
    for n in range(x.shape[0]):
        chans = []
        for o in range(spec.out_channels):
            g = o // og
            acc = 0.0
            for c in range(cg):
                k = dilate_kernel(params.weight[o, c], spec.dilation)
                acc = acc + correlate2d(xp[n, g * cg + c], k, mode="valid")
            acc = acc[::sh, ::sw]
            if params.bias is not None:
                acc = acc + params.bias[o]
            chans.append(acc)
        rows.append(np.stack(chans))
    return np.stack(rows)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    from repnext.tensor import SplitMix64
    return SplitMix64(20240601)
