"""Parameter and multiply-accumulate accounting.

Two independent routes are kept side by side: closed-form formulas written
from the configuration (``analytic``), and enumeration of stored arrays or
multiplies actually executed by an instrumented forward (``enumerated`` /
``counted``). Batch-norm running statistics are buffers, not parameters;
MACs cover convolutions and the classifier projection only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import blocks as B
from .errors import ShapeMismatch
from .model import Model, ModelConfig, head_forward, named_arrays
from .ops import count_multiplies


# --- closed forms for single convolutions -----------------------------------

def standard_conv_cost(k: int, c: int, h: int, w: int) -> tuple[int, int]:
    """(params, MACs) of a bias-free k x k convolution, C -> C, stride 1 "same"."""
    return k * k * c * c, k * k * c * c * h * w


def depthwise_conv_cost(k: int, c: int, h: int, w: int) -> tuple[int, int]:
    return k * k * c, k * k * c * h * w


def chunk_conv_cost(c: int, h: int, w: int, k_m: int = 7, k_s: int = 3, k_l: int = 11) -> tuple[int, int]:
    """Fused, bias-free chunk convolution: (k_s^2 + k_m^2 + 2 k_l) C / 4 weights per pixel."""
    per = k_s * k_s + k_m * k_m + 2 * k_l
    return per * c // 4, per * c * h * w // 4


# --- per-channel unit formulas --------------------------------------------------

def _small_unit(cfg: ModelConfig, strips: str, h: int, w: int, stride: int, fused: bool):
    """(weights, biases, MACs) per channel of the small unit on an h x w input."""
    k = cfg.k_s
    ho, wo = -(-h // stride), -(-w // stride)
    b = int(cfg.bias)
    if fused:
        return k * k, b, k * k * ho * wo
    weights = k * k + 2 * k + 4
    if strips == "parallel":
        macs = weights * ho * wo
    else:
        # pad-up-front: the 1 x k stage runs over (h + k - 1) rows
        macs = (k * k + 4) * ho * wo + k * (h + k - 1) * w + k * ho * wo
    return weights, 4 * b, macs


def _medium_unit(cfg: ModelConfig, h: int, w: int, stride: int, fused: bool):
    k = cfg.k_m
    ho, wo = -(-h // stride), -(-w // stride)
    b = int(cfg.bias)
    if fused:
        return k * k, b, k * k * ho * wo
    weights = k * k + 15 + 15 + 2 * k + 10
    macs = ((k * k + 30) * ho * wo
            + k * (h + k - 1) * w + k * ho * wo
            + 5 * (h + 4) * w + 5 * ho * wo)
    return weights, 7 * b, macs


def chunk_block_cost(cfg: ModelConfig, c: int, h: int, w: int, fused: bool) -> tuple[int, int]:
    c4 = c // 4
    params = macs = 0
    if cfg.use_small:
        wt, bs, mc = _small_unit(cfg, cfg.chunk_small_strips, h, w, 1, fused)
        params += c4 * (wt + bs)
        macs += c4 * mc
    if cfg.use_medium:
        wt, bs, mc = _medium_unit(cfg, h, w, 1, fused)
        params += c4 * (wt + bs)
        macs += c4 * mc
    if cfg.use_large:
        params += c4 * (2 * cfg.k_l + int(cfg.bias))
        macs += c4 * 2 * cfg.k_l * h * w
    return params, macs


def _mixer_cost(c: int, hidden: int, h: int, w: int) -> tuple[int, int]:
    return 2 * c * hidden + hidden + c, 2 * c * hidden * h * w


def metanext_cost(cfg: ModelConfig, c: int, h: int, w: int, fused: bool) -> tuple[int, int]:
    p_tm, m_tm = chunk_block_cost(cfg, c, h, w, fused)
    p_mx, m_mx = _mixer_cost(c, B.hidden_width(c, cfg.mlp_ratio), h, w)
    norm = 0 if fused else 2 * c
    return p_tm + norm + p_mx, m_tm + m_mx


def downsample_cost(cfg: ModelConfig, c: int, c_out: int, h: int, w: int, fused: bool) -> tuple[int, int]:
    ho, wo = h // 2, w // 2
    if cfg.downsample == "plain3x3":
        params = 9 * c * c_out + (c_out if fused else int(cfg.bias) * c_out + 2 * c_out)
        return params, 9 * c * c_out * ho * wo
    ws, bs, ms = _small_unit(cfg, cfg.copy_small_strips, h, w, 2, fused)
    wm, bm, mm = _medium_unit(cfg, h, w, 2, fused)
    wide = 2 * c
    if fused:
        # the batch norm folds into both units, which therefore always carry a bias
        params = c * (ws + wm) + wide
    else:
        params = c * (ws + bs + wm + bm) + 2 * wide
    macs = c * (ms + mm)
    p_mx, m_mx = _mixer_cost(wide, B.hidden_width(wide, cfg.mlp_ratio), ho, wo)
    params += p_mx
    macs += m_mx
    if c_out != wide:
        params += wide * c_out + c_out
        macs += wide * c_out * ho * wo
    return params, macs


def stem_cost(cfg: ModelConfig, width: int, h: int, w: int, fused: bool) -> tuple[int, int]:
    half = math.ceil(width / 2)
    h1, w1 = -(-h // 2), -(-w // 2)
    h2, w2 = -(-h1 // 2), -(-w1 // 2)
    weights = 9 * cfg.in_channels * half + 9 * half * width
    extra = (half + width) if fused else 2 * (half + width)
    return weights + extra, 9 * cfg.in_channels * half * h1 * w1 + 9 * half * width * h2 * w2


def head_cost(c: int, classes: int) -> tuple[int, int]:
    return c * classes + classes, c * classes


# --- enumeration and instrumented counting ---------------------------------------

_BUFFERS = ("running_mean", "running_var")


def enumerate_params(obj) -> int:
    """Number of stored learnable values (running statistics excluded)."""
    return sum(arr.size for name, arr in named_arrays(obj) if not name.endswith(_BUFFERS))


def counted_macs(part, in_shape) -> int:
    """Multiplies executed by a forward of ``part`` on a zero input of ``in_shape``."""
    x = np.zeros(in_shape)
    with count_multiplies() as counter:
        if isinstance(part, Model):
            from .model import model_forward
            model_forward(part, x)
        elif isinstance(part, B.ConvParams):
            head_forward(part, x)
        else:
            B.block_forward(part, x)
    return counter[0]


@dataclass
class CostRow:
    name: str
    kind: str
    form: str
    in_shape: tuple
    params_analytic: int
    params_enumerated: int
    macs_analytic: int
    macs_counted: int | None = None

    @property
    def consistent(self) -> bool:
        return (self.params_analytic == self.params_enumerated
                and (self.macs_counted is None or self.macs_analytic == self.macs_counted))


@dataclass
class CostReport:
    form: str
    in_shape: tuple
    rows: list[CostRow] = field(default_factory=list)

    @property
    def params_analytic(self) -> int:
        return sum(r.params_analytic for r in self.rows)

    @property
    def params_enumerated(self) -> int:
        return sum(r.params_enumerated for r in self.rows)

    @property
    def macs_analytic(self) -> int:
        return sum(r.macs_analytic for r in self.rows)

    @property
    def macs_counted(self) -> int | None:
        if any(r.macs_counted is None for r in self.rows):
            return None
        return sum(r.macs_counted for r in self.rows)

    @property
    def consistent(self) -> bool:
        return all(r.consistent for r in self.rows)


def _ceil_half(n: int) -> int:
    return -(-n // 2)


def _kind(part) -> str:
    return {B.Stem: "stem", B.MetaNeXtBlock: "metanext", B.DownsampleBlock: "downsample",
            B.PlainDownsample: "plain3x3"}.get(type(part), "head")


def cost_report(m: Model, in_shape=(1, 3, 224, 224), instrumented: bool = True) -> CostReport:
    """Per-part analytic vs enumerated params and analytic vs counted MACs.

    MACs are per input image (batch index ignored).
    """
    cfg = m.config
    _, c, h, w = in_shape
    if c != cfg.in_channels or h % 32 or w % 32:
        raise ShapeMismatch(f"input shape {tuple(in_shape)} needs {cfg.in_channels} channels and "
                            "spatial size divisible by 32")
    fused = m.fused
    report = CostReport("fused" if fused else "training", tuple(in_shape))
    widths = cfg.stage_widths
    shape = (1, cfg.in_channels, h, w)
    for name, part in m.parts():
        kind = _kind(part)
        c, ph, pw = shape[1], shape[2], shape[3]
        if kind == "stem":
            p, mc = stem_cost(cfg, widths[0], ph, pw, part.fused)
            out = (1, widths[0], _ceil_half(_ceil_half(ph)), _ceil_half(_ceil_half(pw)))
        elif kind == "metanext":
            p, mc = metanext_cost(cfg, c, ph, pw, part.fused)
            out = shape
        elif kind in ("downsample", "plain3x3"):
            c_out = part.out_channels
            p, mc = downsample_cost(cfg, c, c_out, ph, pw, part.fused)
            out = (1, c_out, ph // 2, pw // 2)
        else:
            p, mc = head_cost(c, cfg.num_classes)
            out = (1, cfg.num_classes)
        form = "fused" if getattr(part, "fused", True) else "training"
        counted = counted_macs(part, shape) if instrumented else None
        report.rows.append(CostRow(name, kind, form, shape, p, enumerate_params(part), mc, counted))
        shape = out
    return report


def count_params(m: Model) -> tuple[int, int]:
    """(analytic, enumerated) parameter totals; the contract is their equality."""
    rep = cost_report(m, (1, m.config.in_channels, 32, 32), instrumented=False)
    return rep.params_analytic, rep.params_enumerated


def count_macs(m: Model, in_shape=(1, 3, 224, 224), instrumented: bool = True) -> tuple[int, int | None]:
    """(analytic, counted) MAC totals per image at ``in_shape``."""
    rep = cost_report(m, in_shape, instrumented)
    return rep.macs_analytic, rep.macs_counted
