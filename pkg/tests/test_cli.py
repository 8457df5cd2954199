import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from repnext.cli import BENCH_HEADER, main, parse_shape
from repnext.model import ModelConfig, read_records, write_records

TINY = ModelConfig("tiny", (8, 16, 24, 32), (1, 1, 1, 1), num_classes=10)


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(TINY.to_json())
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_parse_shape():
    assert parse_shape("224") == (1, 3, 224, 224)
    assert parse_shape("32x64") == (1, 3, 32, 64)
    assert parse_shape("2,3,32,32") == (2, 3, 32, 32)


def test_trace_text_and_json(capsys):
    code, out, _ = run(capsys, "trace", "--config", "M1")
    assert code == 0 and "H=56" in out and "H=7 " in out
    code, out, _ = run(capsys, "trace", "--config", "M1", "--format", "json")
    stages = json.loads(out)["stages"]
    assert [(s["channels"], s["height"], s["width"]) for s in stages] == [
        (48, 56, 56), (96, 28, 28), (192, 14, 14), (384, 7, 7)]


def test_trace_usage_errors(capsys, tmp_path):
    code, _, err = run(capsys, "trace", "--input-shape", "225")
    assert code == 2 and "spatial size must be divisible by 32" in err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stage_widths": [50, 96, 192, 384]}))
    code, _, err = run(capsys, "trace", "--config", str(bad))
    assert code == 2 and "stage_widths" in err
    code, _, _ = run(capsys, "trace", "--config", "M9")
    assert code == 2
    assert run(capsys, "nonsense")[0] == 2


def test_build_fuse_run(capsys, tmp_path, tiny_cfg):
    w, f, f2 = (str(tmp_path / n) for n in ("w.rpnx", "f.rpnx", "g.rpnx"))
    assert run(capsys, "build", "--config", tiny_cfg, "--seed", "3", "--out", w)[0] == 0
    code, out, _ = run(capsys, "fuse", "--config", tiny_cfg, "--weights", w, "--out", f,
                       "--input-shape", "64")
    assert code == 0
    before, after = map(int, out.splitlines()[0].split()[1::2])
    assert after < before
    code, _, err = run(capsys, "fuse", "--config", tiny_cfg, "--weights", f, "--out", f2)
    assert code == 1 and "AlreadyFused" in err

    x = str(tmp_path / "x.rpnx")
    write_records(x, [("input", np.zeros((1, 3, 32, 32)))])
    logits = []
    for weights, name in ((w, "lt.rpnx"), (f, "lf.rpnx")):
        out_path = str(tmp_path / name)
        code, out, _ = run(capsys, "run", "--config", tiny_cfg, "--weights", weights, "--input", x,
                           "--out", out_path)
        assert code == 0 and out.startswith("sample 0: top5")
        logits.append(read_records(out_path)[0][1])
    assert np.max(np.abs(logits[0] - logits[1])) <= 1e-8

    x4 = str(tmp_path / "x4.rpnx")
    write_records(x4, [("input", np.zeros((1, 4, 32, 32)))])
    assert run(capsys, "run", "--config", tiny_cfg, "--weights", w, "--input", x4)[0] == 1
    code, _, err = run(capsys, "fuse", "--config", "M1", "--weights", w, "--out", f2)
    assert code == 1 and "SchemaMismatch" in err
    corrupt = tmp_path / "c.rpnx"
    corrupt.write_bytes(open(w, "rb").read()[:100])
    assert run(capsys, "fuse", "--config", tiny_cfg, "--weights", str(corrupt), "--out", f2)[0] == 1


def test_run_deterministic_seeded(capsys, tmp_path, tiny_cfg):
    x = str(tmp_path / "x.rpnx")
    write_records(x, [("input", np.zeros((1, 3, 32, 32)))])
    first = run(capsys, "run", "--config", tiny_cfg, "--seed", "5", "--input", x)[1]
    assert first == run(capsys, "run", "--config", tiny_cfg, "--seed", "5", "--input", x)[1]


def test_verify_exit_codes_and_determinism(capsys, tiny_cfg, tmp_path):
    args = ["verify", "--config", tiny_cfg, "--trials", "2", "--model-trials", "1",
            "--model-size", "32", "--format", "json"]
    code, first, _ = run(capsys, *args)
    assert code == 0 and json.loads(first)["passed"] is True
    assert run(capsys, *args)[1] == first
    code, out, _ = run(capsys, *args, "--tol", "0")
    doc = json.loads(out)
    assert code == 1 and doc["passed"] is False
    assert any(r["max_abs"] > 0 for r in doc["transforms"])
    assert run(capsys, "verify", "--trials", "0")[0] == 2


def test_count(capsys, tiny_cfg):
    code, out, _ = run(capsys, "count", "--config", tiny_cfg, "--input-shape", "64", "--format", "json",
                       "--instrumented")
    doc = json.loads(out)
    assert code == 0
    for form in ("training", "fused"):
        rep = doc["forms"][form]
        assert rep["consistent"] and rep["macs_analytic"] == rep["macs_counted"]
        assert all(r["params_analytic"] == r["params_enumerated"] for r in rep["rows"])
    assert all(r["closed_form"] == r["enumerated"] for r in doc["fused_chunk_conv"])
    code, out, _ = run(capsys, "count", "--config", "M1")
    assert code == 0 and "4.8 M params, 0.8 GMACs" in out
    assert run(capsys, "count", "--input-shape", "100")[0] == 2
    code, out, _ = run(capsys, "count", "--config", tiny_cfg, "--input-shape", "32", "--format", "csv")
    assert code == 0 and out.splitlines()[0].startswith("form,name,kind")


def test_bench_csv(capsys, tiny_cfg):
    code, out, _ = run(capsys, "bench", "--config", tiny_cfg, "--input-shape", "32", "--repeats", "3")
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0
    assert out.splitlines()[0] == "form,params,macs,median_ms,p10_ms,p90_ms"
    assert rows[0] == BENCH_HEADER and [r[0] for r in rows[1:]] == ["training", "fused"]
    assert int(rows[2][1]) < int(rows[1][1]) and int(rows[2][2]) < int(rows[1][2])
    assert run(capsys, "bench", "--repeats", "0")[0] == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "repnext", "trace", "--input-shape", "225"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "divisible by 32" in proc.stderr
