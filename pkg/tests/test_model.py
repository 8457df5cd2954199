import io
import json
import struct

import numpy as np
import pytest

from repnext.errors import AlreadyFused, CorruptFile, InvalidConfig, SchemaMismatch, ShapeMismatch
from repnext.model import (VARIANTS, ModelConfig, build_model, fuse_model, load_config, load_weights,
                           model_forward, named_arrays, read_records, save_weights, trace_shapes,
                           write_records)
from repnext.tensor import derive_seed, max_abs_diff, random_tensor

TINY = ModelConfig("tiny", (8, 16, 24, 32), (1, 1, 1, 1), num_classes=10)


@pytest.fixture(scope="module")
def tiny():
    return build_model(TINY, 3)


def weight_bytes(m) -> bytes:
    buf = io.BytesIO()
    save_weights(m, buf)
    return buf.getvalue()


# --- config --------------------------------------------------------------------

def test_config_json_roundtrip():
    cfg = VARIANTS["M1"]
    assert ModelConfig.from_json(cfg.to_json()) == cfg


@pytest.mark.parametrize("change,field", [
    ({"stage_widths": (50, 96, 192, 384)}, "stage_widths"),
    ({"k_m": 6}, "k_m"),
    ({"k_s": 9}, "k_s"),
    ({"downsample": "pool"}, "downsample"),
    ({"mlp_ratio": 0}, "mlp_ratio"),
    ({"bn_eps": -1.0}, "bn_eps"),
    ({"stage_depths": (1, 1, 1)}, "stage_depths"),
])
def test_invalid_config_names_field(change, field):
    with pytest.raises(InvalidConfig) as exc:
        build_model(VARIANTS["M1"].replace(**change))
    assert exc.value.field == field


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    d = json.loads(VARIANTS["M1"].to_json())
    d["extra"] = 1
    path.write_text(json.dumps(d))
    with pytest.raises(InvalidConfig):
        load_config(str(path))
    d.pop("extra")
    path.write_text(json.dumps(d))
    assert load_config(str(path)) == VARIANTS["M1"]


# --- build / forward -------------------------------------------------------------------

def test_build_deterministic():
    assert weight_bytes(build_model(TINY, 7)) == weight_bytes(build_model(TINY, 7))
    assert weight_bytes(build_model(TINY, 7)) != weight_bytes(build_model(TINY, 8))


def test_forward_shapes_and_trace():
    m = build_model(VARIANTS["M1"].replace(stage_depths=(1, 1, 1, 1)), 0)
    trace = []
    y = model_forward(m, np.zeros((1, 3, 224, 224)), trace)
    assert y.shape == (1, 1000)
    assert [s for _, s in trace[1:]] == [(48, 56, 56), (96, 28, 28), (192, 14, 14), (384, 7, 7)]


def test_small_input_class_count(tiny):
    assert model_forward(tiny, random_tensor((2, 3, 32, 32), 1)).shape == (2, 10)


def test_input_validation(tiny):
    with pytest.raises(ShapeMismatch, match="divisible by 32"):
        model_forward(tiny, np.zeros((1, 3, 48, 48)))
    with pytest.raises(ShapeMismatch):
        model_forward(tiny, np.zeros((1, 4, 32, 32)))


@pytest.mark.parametrize("size", [64, 96, 128, 224, 320])
def test_trace_pyramid(size):
    rows = trace_shapes(VARIANTS["M1"], (1, 3, size, size))
    assert [(r["channels"], r["height"]) for r in rows] == [
        (48, size // 4), (96, size // 8), (192, size // 16), (384, size // 32)]


def test_fused_equivalence(tiny):
    fused = fuse_model(tiny)
    assert fused.form == "fused" and tiny.form == "training"
    worst = max(max_abs_diff(model_forward(tiny, x), model_forward(fused, x))
                for x in (random_tensor((1, 3, 64, 64), derive_seed(1, t)) for t in range(5)))
    assert worst <= 1e-8
    with pytest.raises(AlreadyFused):
        fuse_model(fused)


@pytest.mark.parametrize("change", [{"use_small": False}, {"use_large": False},
                                    {"downsample": "plain3x3"}, {"chunk_small_strips": "serial"},
                                    {"bias": False}])
def test_variants_fuse_exactly(change):
    m = build_model(TINY.replace(**change), 2)
    x = random_tensor((1, 3, 32, 32), 4)
    assert max_abs_diff(model_forward(m, x), model_forward(fuse_model(m), x)) <= 1e-8


def test_float32_forward(tiny):
    x = random_tensor((1, 3, 32, 32), 5)
    y32 = model_forward(fuse_model(tiny).astype(np.float32), x.astype(np.float32))
    assert y32.dtype == np.float32
    assert max_abs_diff(y32, model_forward(tiny, x)) <= 1e-3


# --- serialization -------------------------------------------------------------------

def test_names_unique_and_ordered(tiny):
    names = [n for n, _ in named_arrays(tiny)]
    assert len(names) == len(set(names))
    assert names[0].startswith("stem.") and names[-1].startswith("head.")


@pytest.mark.parametrize("fused", [False, True])
def test_roundtrip_bitwise(tiny, tmp_path, fused):
    m = fuse_model(tiny) if fused else tiny
    path = tmp_path / "w.rpnx"
    save_weights(m, path)
    back = load_weights(TINY, path)
    assert back.form == m.form
    assert weight_bytes(back) == weight_bytes(m)
    x = random_tensor((1, 3, 32, 32), 6)
    assert max_abs_diff(model_forward(back, x), model_forward(m, x)) == 0.0


def test_header_layout(tiny):
    data = weight_bytes(tiny)
    assert data[:4] == b"RPNX"
    version, count = struct.unpack("<II", data[4:12])
    assert version == 1 and count == len(named_arrays(tiny))
    (name_len,) = struct.unpack("<I", data[12:16])
    name = data[16:16 + name_len].decode()
    code, rank = struct.unpack("<BI", data[16 + name_len:21 + name_len])
    assert name == named_arrays(tiny)[0][0] and code == 2 and rank == 4


def test_records_float32_roundtrip():
    buf = io.BytesIO()
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_records(buf, [("a", a)])
    (name, back), = read_records(io.BytesIO(buf.getvalue()))
    assert name == "a" and back.dtype == np.float32 and back.tobytes() == a.tobytes()


def test_corrupt_files(tiny):
    data = weight_bytes(tiny)
    for bad in (data[:-3], b"XXXX" + data[4:], data + b"\0", data[:10]):
        with pytest.raises(CorruptFile):
            read_records(io.BytesIO(bad))


def test_schema_mismatch(tiny):
    fused = io.BytesIO(weight_bytes(fuse_model(tiny)))
    with pytest.raises(SchemaMismatch):
        load_weights(TINY, fused, form="training")
    with pytest.raises(SchemaMismatch, match="stem"):
        load_weights(TINY.replace(stage_widths=(12, 16, 24, 32)), io.BytesIO(weight_bytes(tiny)))
