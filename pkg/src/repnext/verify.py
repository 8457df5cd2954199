"""Equivalence audits between training and fused forms, plus algebraic law checks.

Reports are deterministic functions of (unit, seed, trials, tolerance): every
trial draws its input from a seed derived from the master seed, and weights
come from the same documented generator.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import blocks as B
from .errors import ShapeMismatch
from .model import Model, ModelConfig, build_model, fuse_model, model_forward
from .ops import BNParams, ConvParams, ConvSpec, batchnorm_infer, conv2d, random_bn, random_conv
from .reparam import (RepBranch, RepBranchSet, branch_forward, branch_set_forward,
                      compose_sequential_dw, embed_kernel, expand_dilated, fold_bn,
                      fuse_rep_medium, fuse_rep_small, identity_as_dwconv, merge_parallel)
from .tensor import SplitMix64, chunk_channels, concat_channels, derive_seed, max_abs_diff, random_tensor

TOL_TRANSFORM = 1e-12
TOL_BLOCK = 1e-10
TOL_MODEL = 1e-8

Shape = tuple[int, int, int, int]


@dataclass
class EquivalenceReport:
    unit: str
    trials: int
    input_shapes: list
    max_abs: float
    mean_abs: float
    tolerance: float
    passed: bool
    seed: int

    def to_line(self) -> str:
        shapes = ";".join("x".join(map(str, s)) for s in self.input_shapes)
        return (f"unit={self.unit} trials={self.trials} shapes={shapes} max_abs={self.max_abs!r} "
                f"mean_abs={self.mean_abs!r} tolerance={self.tolerance!r} "
                f"pass={str(self.passed).lower()} seed={self.seed}")


def as_forward(form) -> Callable[[np.ndarray], np.ndarray]:
    """Turn a block, unit, model or callable into ``x -> y``."""
    if isinstance(form, Model):
        return lambda x: model_forward(form, x)
    if isinstance(form, RepBranchSet):
        return lambda x: branch_set_forward(form, x)
    if isinstance(form, ConvParams):
        return lambda x: conv2d(form, x)
    if callable(form):
        return form
    return lambda x: B.block_forward(form, x)


def check_equivalence(train_form, fused_form, trials: int, tol: float, seed: int,
                      input_shape: Union[Shape, Sequence[Shape]], unit: str = "unit") -> EquivalenceReport:
    """Run ``trials`` seeded uniform inputs through both forms and record the worst divergence.

    ``input_shape`` may be a list of shapes; trial ``t`` uses shape ``t % len``.
    """
    shapes = [tuple(input_shape)] if isinstance(input_shape[0], int) else [tuple(s) for s in input_shape]
    f_train, f_fused = as_forward(train_form), as_forward(fused_form)
    worst, total, count = 0.0, 0.0, 0
    for t in range(trials):
        x = random_tensor(shapes[t % len(shapes)], derive_seed(seed, t))
        a, b = f_train(x), f_fused(x)
        if a.shape != b.shape:
            raise ShapeMismatch(f"{unit}: forms disagree on output shape {a.shape} vs {b.shape}")
        diff = np.abs(a - b)
        worst = max(worst, float(diff.max()))
        total += float(diff.sum())
        count += diff.size
    mean = total / count if count else 0.0
    used = shapes[:max(1, min(trials, len(shapes)))]
    return EquivalenceReport(unit, trials, [list(s) for s in used], worst, mean, tol,
                             worst <= tol, seed)


# --- algebraic laws --------------------------------------------------------------

@dataclass
class LawResult:
    law: str
    value: float
    threshold: float
    passed: bool


@dataclass
class LawReport:
    seed: int
    laws: list[LawResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(law.passed for law in self.laws)

    def add(self, law: str, value: float, threshold: float) -> None:
        self.laws.append(LawResult(law, float(value), threshold, float(value) <= threshold))


def _kernel_diff(a: ConvParams, b: ConvParams) -> float:
    if a.spec != b.spec:
        return float("inf")
    d = max_abs_diff(a.weight, b.weight)
    if (a.bias is None) != (b.bias is None):
        return float("inf")
    if a.bias is not None:
        d = max(d, max_abs_diff(a.bias, b.bias))
    return d


def check_conv_laws(seed: int = 0) -> LawReport:
    rng = SplitMix64(derive_seed(seed, 1))
    rep = LawReport(seed)
    dw = ConvSpec.depthwise
    x = random_tensor((2, 8, 16, 16), derive_seed(seed, 2))
    y = random_tensor((2, 8, 16, 16), derive_seed(seed, 3))

    for name, spec in (("linearity_depthwise", dw(8, 3)),
                       ("linearity_dense", ConvSpec(8, 6, 3, stride=2, padding=1))):
        conv = random_conv(rng, spec, bias=False)
        lhs = conv2d(conv, 2.0 * x - 1.0 * y)
        rhs = 2.0 * conv2d(conv, x) - 1.0 * conv2d(conv, y)
        rep.add(name, max_abs_diff(lhs, rhs), 1e-12)

    conv = random_conv(rng, dw(8, 3), bias=True)
    shifted = np.zeros_like(x)
    shifted[:, :, 1:, 1:] = x[:, :, :-1, :-1]
    a, b = conv2d(conv, x), conv2d(conv, shifted)
    # output (i, j) of the shifted input equals output (i-1, j-1) of the original
    # wherever neither window touches padding or the zero fill
    rep.add("translation_equivariance", max_abs_diff(b[:, :, 2:-1, 2:-1], a[:, :, 1:-2, 1:-2]), 0.0)

    for parts in (2, 4, 8):
        rep.add(f"chunk_concat_roundtrip_{parts}",
                max_abs_diff(concat_channels(chunk_channels(x, parts)), x), 0.0)

    k1 = random_conv(rng, dw(8, (1, 3)))
    k2 = random_conv(rng, dw(8, (3, 1)))
    k3 = random_conv(rng, dw(8, (3, 3)))
    left = compose_sequential_dw(compose_sequential_dw(k1, k2), k3)
    right = compose_sequential_dw(k1, compose_sequential_dw(k2, k3))
    rep.add("compose_associativity", _kernel_diff(left, right), 1e-12)

    m1, m2, m3 = (random_conv(rng, dw(8, 3)) for _ in range(3))
    rep.add("merge_commutativity",
            _kernel_diff(merge_parallel([m1, m2, m3]), merge_parallel([m3, m1, m2])), 1e-12)
    rep.add("merge_associativity",
            _kernel_diff(merge_parallel([merge_parallel([m1, m2]), m3]),
                         merge_parallel([m1, merge_parallel([m2, m3])])), 1e-12)
    return rep


# --- large strip pair diagnostic ----------------------------------------------------

@dataclass
class LargeBranchReport:
    seed: int
    outer_product_diff: float
    forward: EquivalenceReport
    serial_weights_per_channel: int
    dense_weights_per_channel: int

    @property
    def passed(self) -> bool:
        return (self.outer_product_diff == 0.0 and self.forward.passed
                and self.serial_weights_per_channel < self.dense_weights_per_channel)


def check_large_branch_fusion(seed: int = 0, k_l: int = 11, trials: int = 50,
                              tol: float = TOL_TRANSFORM) -> LargeBranchReport:
    """Collapse the 1 x k_l / k_l x 1 pair into a dense k_l x k_l kernel and compare.

    Diagnostic only: inference keeps the pair serial, which is far cheaper.
    """
    channels = 4
    rng = SplitMix64(derive_seed(seed, 11))
    pair = B.build_large_strip(rng, channels, k_l)
    first, second = pair.stages
    dense = compose_sequential_dw(first, second)
    outer = np.einsum("cu,cv->cuv", second.weight[:, 0, :, 0], first.weight[:, 0, 0, :])
    diff = max_abs_diff(dense.weight[:, 0], outer)
    fwd = check_equivalence(lambda x: branch_forward(pair, x, serial_padding="per_stage"), dense,
                            trials, tol, seed, [(1, channels, 16, 16), (2, channels, 13, 20)],
                            unit=f"large_strip_{k_l}_dense")
    per_channel = lambda conv: conv.weight[0].size  # noqa: E731
    return LargeBranchReport(seed, diff, fwd, per_channel(first) + per_channel(second),
                             per_channel(dense))


def serial_padding_mismatch(seed: int = 0, k: int = 7, size: int = 16) -> dict:
    """Border-ring gap between per-stage "same" padding and pad-up-front for a biased pair."""
    rng = SplitMix64(derive_seed(seed, 12))
    dw = ConvSpec.depthwise
    pair = RepBranch.serial(random_conv(rng, dw(4, (1, k))), random_conv(rng, dw(4, (k, 1))))
    x = random_tensor((1, 4, size, size), derive_seed(seed, 13))
    gap = np.abs(branch_forward(pair, x, serial_padding="per_stage")
                 - branch_forward(pair, x, serial_padding="up_front"))
    p = k // 2
    return {"border_max": float(gap.max()), "interior_max": float(gap[:, :, p:-p, :].max())}


# --- audit suite -------------------------------------------------------------------

def _transform_cases(cfg: ModelConfig, seed: int):
    """(name, training form, fused form, input shapes) for each kernel-space transform."""
    rng = SplitMix64(derive_seed(seed, 100))
    dw = ConvSpec.depthwise
    c = 8
    shapes = [(1, c, 12, 12), (2, c, 9, 14)]
    even = [(1, c, 12, 12), (2, c, 10, 16)]

    conv = random_conv(rng, ConvSpec(c, c, 3, padding=1))
    bn = random_bn(rng, c)
    yield "fold_bn", (lambda x: batchnorm_infer(bn, conv2d(conv, x))), fold_bn(conv, bn), shapes

    rect = random_conv(rng, dw(c, (3, 5)))
    yield "embed_kernel", rect, embed_kernel(rect, (cfg.k_m, cfg.k_m)), shapes

    for stride in (1, 2):
        dil = random_conv(rng, dw(c, 2, stride=stride, dilation=2))
        yield f"expand_dilated_s{stride}", dil, expand_dilated(dil), even

    ident = identity_as_dwconv(c, (cfg.k_s, cfg.k_s))
    yield "identity_as_dwconv", (lambda x: np.array(x)), ident, shapes

    for k, stride in ((cfg.k_m, 1), (5, 2)):
        pair = RepBranch.serial(random_conv(rng, dw(c, (1, k))), random_conv(rng, dw(c, (k, 1), stride)))
        yield (f"compose_sequential_1x{k}_s{stride}", (lambda x, p=pair: branch_forward(p, x)),
               compose_sequential_dw(*pair.stages), even)

    par = [embed_kernel(random_conv(rng, dw(c, kk)), (5, 5)) for kk in ((5, 5), (3, 3), (1, 5))]
    yield ("merge_parallel", (lambda x: sum(conv2d(p, x) for p in par)), merge_parallel(par), shapes)

    for strips, stride in (("parallel", 1), ("parallel", 2), ("serial", 1), ("serial", 2)):
        unit = B.build_small_unit(rng, c, cfg.k_s, stride, strips, cfg.bias)
        yield f"fuse_rep_small_{strips}_s{stride}", unit, fuse_rep_small(unit), even
    for stride in (1, 2):
        unit = B.build_medium_unit(rng, c, cfg.k_m, stride, cfg.bias)
        yield f"fuse_rep_medium_s{stride}", unit, fuse_rep_medium(unit), even


def _block_cases(cfg: ModelConfig, seed: int):
    rng = SplitMix64(derive_seed(seed, 200))
    c = 16
    same = [(1, c, 12, 12), (2, c, 9, 14)]
    even = [(1, c, 12, 12), (2, c, 10, 16)]
    kw = dict(k_s=cfg.k_s, k_m=cfg.k_m, k_l=cfg.k_l, use_small=cfg.use_small,
              use_medium=cfg.use_medium, use_large=cfg.use_large, bias=cfg.bias)

    cc = B.build_chunk_conv(rng, c, small_strips=cfg.chunk_small_strips, **kw)
    yield "chunk_conv", cc, B.fuse_block(cc), same
    cp = B.build_copy_conv(rng, c, cfg.k_s, cfg.k_m, cfg.copy_small_strips, cfg.bias)
    yield "copy_conv", cp, B.fuse_block(cp), even
    cpa = B.build_copy_conv(rng, c, cfg.k_s, cfg.k_m, cfg.copy_small_strips, cfg.bias, adjust_to=24)
    yield "copy_conv_adjust", cpa, B.fuse_block(cpa), even
    mn = B.build_metanext(rng, c, cfg.mlp_ratio, small_strips=cfg.chunk_small_strips,
                          bn_eps=cfg.bn_eps, **kw)
    yield "metanext", mn, B.fuse_block(mn), same
    ds = B.build_downsample(rng, c, 2 * c, cfg.mlp_ratio, cfg.k_s, cfg.k_m, cfg.copy_small_strips,
                            cfg.bias, cfg.bn_eps)
    yield "downsample", ds, B.fuse_block(ds), even
    dsp = B.build_downsample(rng, c, 24, cfg.mlp_ratio, cfg.k_s, cfg.k_m, cfg.copy_small_strips,
                             cfg.bias, cfg.bn_eps)
    yield "downsample_proj", dsp, B.fuse_block(dsp), even
    pd = B.build_plain_downsample(rng, c, 2 * c, cfg.bias, cfg.bn_eps)
    yield "plain_downsample", pd, B.fuse_block(pd), even
    st = B.build_stem(c, rng, cfg.in_channels, cfg.bn_eps)
    yield "stem", st, B.fuse_block(st), [(1, cfg.in_channels, 16, 16), (2, cfg.in_channels, 12, 20)]


@dataclass
class AuditReport:
    config: str
    seed: int
    transforms: list[EquivalenceReport]
    blocks: list[EquivalenceReport]
    model: list[EquivalenceReport]
    laws: LawReport
    large_branch: LargeBranchReport

    @property
    def passed(self) -> bool:
        reports = self.transforms + self.blocks + self.model
        return all(r.passed for r in reports) and self.laws.passed and self.large_branch.passed

    def to_dict(self) -> dict:
        lb = self.large_branch
        return {
            "config": self.config,
            "seed": self.seed,
            "passed": self.passed,
            "transforms": [asdict(r) for r in self.transforms],
            "blocks": [asdict(r) for r in self.blocks],
            "model": [asdict(r) for r in self.model],
            "laws": {"passed": self.laws.passed, "results": [asdict(r) for r in self.laws.laws]},
            "large_branch": {"passed": lb.passed, "outer_product_diff": lb.outer_product_diff,
                             "serial_weights_per_channel": lb.serial_weights_per_channel,
                             "dense_weights_per_channel": lb.dense_weights_per_channel,
                             "forward": asdict(lb.forward)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"config={self.config} seed={self.seed} passed={str(self.passed).lower()}"]
        for group, reports in (("transform", self.transforms), ("block", self.blocks),
                               ("model", self.model)):
            lines.extend(f"level={group} {r.to_line()}" for r in reports)
        for law in self.laws.laws:
            lines.append(f"level=law law={law.law} value={law.value!r} threshold={law.threshold!r} "
                         f"pass={str(law.passed).lower()}")
        lb = self.large_branch
        lines.append(f"level=diagnostic {lb.forward.to_line()} outer_product_diff={lb.outer_product_diff!r} "
                     f"serial_weights={lb.serial_weights_per_channel} dense_weights={lb.dense_weights_per_channel}")
        return "\n".join(lines) + "\n"


def run_audit(config: ModelConfig, trials: int = 100, model_trials: int = 20, seed: int = 0,
              tol_transform: float = TOL_TRANSFORM, tol_block: float = TOL_BLOCK,
              tol_model: float = TOL_MODEL, model_size: int = 64) -> AuditReport:
    """Every transform, every block type and the whole model, each at its own tolerance."""
    config.validate()
    transforms = [check_equivalence(tr, fu, trials, tol_transform, derive_seed(seed, 300 + i), shapes, name)
                  for i, (name, tr, fu, shapes) in enumerate(_transform_cases(config, seed))]
    blks = [check_equivalence(tr, fu, trials, tol_block, derive_seed(seed, 400 + i), shapes, name)
            for i, (name, tr, fu, shapes) in enumerate(_block_cases(config, seed))]
    model = build_model(config, seed)
    fused = fuse_model(model)
    model_reports = [check_equivalence(model, fused, model_trials, tol_model, derive_seed(seed, 500),
                                       (1, config.in_channels, model_size, model_size),
                                       f"model_{config.variant}")]
    laws = check_conv_laws(seed)
    large = check_large_branch_fusion(seed, config.k_l, tol=tol_transform)
    return AuditReport(config.variant, seed, transforms, blks, model_reports, laws, large)
