"""Acceptance criteria, one test each; every test emits a single PASS/FAIL line.

The lines are printed together in an "acceptance criteria" section at the end
of the pytest run, whether the criterion passed or failed.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import io
import itertools
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from repnext import blocks as B
from repnext.counting import (chunk_conv_cost, count_macs, count_params, counted_macs,
                              depthwise_conv_cost, enumerate_params, standard_conv_cost)
from repnext.model import (REFERENCE_TOTALS, VARIANTS, build_model, fuse_model, load_weights,
                           model_forward, save_weights, trace_shapes)
from repnext.ops import ConvParams, ConvSpec, conv2d, count_multiplies
from repnext.reparam import fuse_rep_medium
from repnext.tensor import SplitMix64, random_tensor
from repnext.verify import TOL_BLOCK, TOL_MODEL, TOL_TRANSFORM, check_conv_laws, run_audit

M1 = VARIANTS["M1"]


def report(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_1_fusion_equivalence_ladder():
    t0 = time.perf_counter()
    audit = run_audit(M1, trials=100, model_trials=20, seed=0, model_size=64)
    elapsed = time.perf_counter() - t0
    worst = {
        "transform": max(r.max_abs for r in audit.transforms),
        "block": max(r.max_abs for r in audit.blocks),
        "model": max(r.max_abs for r in audit.model),
    }
    ok = (all(r.passed and r.trials == 100 and r.tolerance == TOL_TRANSFORM for r in audit.transforms)
          and all(r.passed and r.trials == 100 and r.tolerance == TOL_BLOCK for r in audit.blocks)
          and all(r.passed and r.trials == 20 and r.tolerance == TOL_MODEL for r in audit.model)
          and elapsed < 300)
    failing = [r.unit for r in audit.transforms + audit.blocks + audit.model if not r.passed]
    report(1, ok, f"{len(audit.transforms)} transforms max {worst['transform']:.2e} <= 1e-12, "
                  f"{len(audit.blocks)} blocks max {worst['block']:.2e} <= 1e-10, "
                  f"M1 model max {worst['model']:.2e} <= 1e-8, {elapsed:.1f}s"
                  + (f", failing {failing}" if failing else ""))


def _macs(params, shape):
    with count_multiplies() as c:
        conv2d(params, np.zeros(shape))
    return c[0]


def test_criterion_2_closed_form_costs():
    mismatches = []
    for c, hw in itertools.product((32, 64), (14, 56)):
        shape = (1, c, hw, hw)
        k = 7
        std = ConvParams(ConvSpec(c, c, k, padding=k // 2), np.zeros((c, c, k, k)))
        dw = ConvParams(ConvSpec.depthwise(c, k), np.zeros((c, 1, k, k)))
        chunk = B.fuse_block(B.build_chunk_conv(SplitMix64(c * hw), c, bias=False))
        checks = {
            "standard": ((std.num_params, _macs(std, shape)), standard_conv_cost(k, c, hw, hw),
                         (k * k * c * c, k * k * c * c * hw * hw)),
            "depthwise": ((dw.num_params, _macs(dw, shape)), depthwise_conv_cost(k, c, hw, hw),
                          (k * k * c, k * k * c * hw * hw)),
            "chunk": ((enumerate_params(chunk), counted_macs(chunk, shape)), chunk_conv_cost(c, hw, hw),
                      ((9 + 49 + 22) * c // 4, (9 + 49 + 22) * c * hw * hw // 4)),
        }
        for name, (measured, analytic, expected) in checks.items():
            if not measured == analytic == expected:
                mismatches.append((name, c, hw, measured, analytic, expected))
    report(2, not mismatches, "standard, depthwise and fused chunk conv params/MACs equal enumeration "
                              "and instrumented counts for C in {32,64}, H=W in {14,56}"
                              + (f"; mismatches {mismatches}" if mismatches else ""))


def test_criterion_3_ablation_parity():
    full = build_model(M1, 0)
    unit_params = {
        "use_small": sum(enumerate_params(b.token_mixer.small) for st in full.stages for b in st),
        "use_medium": sum(enumerate_params(b.token_mixer.medium) for st in full.stages for b in st),
        "use_large": sum(enumerate_params(b.token_mixer.large) for st in full.stages for b in st),
    }
    base_analytic, base_enum = count_params(full)
    details, ok = [], base_analytic == base_enum
    for field, removed in unit_params.items():
        m = build_model(M1.replace(**{field: False}), 0)
        analytic, enumerated = count_params(m)
        good = analytic == enumerated and base_analytic - analytic == removed
        ok &= good
        details.append(f"-{field[4:]} {base_analytic - analytic}")
    plain = build_model(M1.replace(downsample="plain3x3"), 0)
    analytic, enumerated = count_params(plain)
    copy_ds = sum(enumerate_params(d) for d in full.downsamples)
    plain_ds = sum(enumerate_params(d) for d in plain.downsamples)
    ok &= analytic == enumerated and base_analytic - analytic == copy_ds - plain_ds
    x = random_tensor((1, 3, 32, 32), 0)
    ok &= model_forward(fuse_model(plain), x).shape == (1, 1000)
    details.append(f"plain3x3 {analytic - base_analytic:+d}")
    report(3, bool(ok), "ablation configs build; param deltas equal enumeration: " + ", ".join(details))


def test_criterion_4_shape_pyramid():
    rows = trace_shapes(M1, (1, 3, 224, 224))
    static = [(r["channels"], r["height"], r["width"]) for r in rows]
    shallow = build_model(M1.replace(stage_depths=(1, 1, 1, 1)), 0)
    trace = []
    model_forward(fuse_model(shallow), np.zeros((1, 3, 224, 224)), trace)
    observed = [tuple(s) for name, s in trace if name.startswith("stage")]
    expected = [(48, 56, 56), (96, 28, 28), (192, 14, 14), (384, 7, 7)]
    copy = B.fuse_block(B.build_copy_conv(SplitMix64(1), 64))
    copy_shape = B.copy_conv_forward(copy, np.zeros((2, 64, 56, 56))).shape
    ok = static == observed == expected and copy_shape == (2, 128, 28, 28)
    report(4, ok, f"224x224 stages {observed}; copy conv (2,64,56,56) -> {copy_shape}")


def test_criterion_5_fusion_reduces_cost():
    lines, ok = [], True
    for name, cfg in VARIANTS.items():
        m = build_model(cfg, 0)
        f = fuse_model(m)
        (pt, pte), (pf, pfe) = count_params(m), count_params(f)
        mt, mf = count_macs(m, instrumented=False)[0], count_macs(f, instrumented=False)[0]
        ok &= pt == pte and pf == pfe and pf < pt and mf < mt
        lines.append(f"{name} {pt}->{pf} params {mt}->{mf} MACs")
    unit = B.build_medium_unit(SplitMix64(0), 8, bias=False)
    before, after = enumerate_params(unit) // 8, fuse_rep_medium(unit).weight.size // 8
    ok &= (before, after) == (103, 49)
    report(5, bool(ok), "; ".join(lines) + f"; medium unit {before}->{after} weights/channel")


def test_criterion_6_serialization_and_determinism(tmp_path):
    m = build_model(M1, 11)
    a, b = io.BytesIO(), io.BytesIO()
    save_weights(m, a)
    save_weights(build_model(M1, 11), b)
    reproducible = a.getvalue() == b.getvalue()
    path = tmp_path / "m1.rpnx"
    path.write_bytes(a.getvalue())
    back = load_weights(M1, path)
    c = io.BytesIO()
    save_weights(back, c)
    lossless = c.getvalue() == a.getvalue()
    fused = fuse_model(m)
    fpath = tmp_path / "m1f.rpnx"
    save_weights(fused, fpath)
    x = random_tensor((1, 3, 64, 64), 2)
    fused_lossless = np.array_equal(model_forward(load_weights(M1, fpath), x), model_forward(fused, x))

    cmd = [sys.executable, "-m", "repnext", "verify", "--config", "M1", "--seed", "7",
           "--trials", "5", "--model-trials", "2", "--format", "json"]
    first = subprocess.run(cmd, capture_output=True)
    second = subprocess.run(cmd, capture_output=True)
    same_json = (first.returncode == second.returncode == 0 and first.stdout == second.stdout
                 and json.loads(first.stdout)["passed"])
    ok = reproducible and lossless and fused_lossless and same_json
    report(6, ok, f"build reproducible={reproducible}, roundtrip bitwise={lossless and fused_lossless}, "
                  f"verify json byte-identical={same_json} ({len(first.stdout)} bytes)")


def test_criterion_7_algebraic_laws():
    reports = [check_conv_laws(seed) for seed in range(5)]
    worst = {}
    for rep in reports:
        for law in rep.laws:
            worst[law.law] = max(worst.get(law.law, 0.0), law.value)
    ok = all(r.passed for r in reports)
    report(7, ok, ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def test_criterion_8_reference_totals():
    params_ref, gmacs_ref = REFERENCE_TOTALS["M1"]
    m = fuse_model(build_model(M1, 0))
    params = count_params(m)[0] / 1e6
    gmacs = count_macs(m, instrumented=False)[0] / 1e9
    dp, dm = params / params_ref - 1, gmacs / gmacs_ref - 1
    ok = abs(dp) <= 0.15 and abs(dm) <= 0.15
    report(8, ok, f"M1 fused {params:.2f} M params ({dp:+.1%} vs {params_ref}), "
                  f"{gmacs:.3f} GMACs ({dm:+.1%} vs {gmacs_ref}); approximate widths/depths")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
