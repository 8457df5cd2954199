"""Full four-stage models: configuration, construction, fusion and weight files."""

from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Optional, Sequence, Union

import numpy as np

from . import blocks as B
from .errors import AlreadyFused, CorruptFile, InvalidConfig, SchemaMismatch, ShapeMismatch
from .ops import DEFAULT_BN_EPS, ConvParams, ConvSpec, conv2d, random_conv
from .tensor import SplitMix64, as_tensor

PathOrFile = Union[str, os.PathLike, BinaryIO]


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "custom"
    stage_widths: tuple[int, int, int, int] = (48, 96, 192, 384)
    stage_depths: tuple[int, int, int, int] = (3, 3, 15, 2)
    k_s: int = 3
    k_m: int = 7
    k_l: int = 11
    mlp_ratio: float = 2.0
    use_small: bool = True
    use_medium: bool = True
    use_large: bool = True
    chunk_small_strips: str = "parallel"
    copy_small_strips: str = "serial"
    downsample: str = "copyconv"
    bias: bool = True
    bn_eps: float = DEFAULT_BN_EPS
    num_classes: int = 1000
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))

    def validate(self) -> "ModelConfig":
        def bad(name, msg):
            raise InvalidConfig(name, msg)

        def is_int(v):
            return isinstance(v, (int, np.integer)) and not isinstance(v, bool)

        if len(self.stage_widths) != 4 or not all(is_int(w) for w in self.stage_widths):
            bad("stage_widths", "expected four integer widths")
        for w in self.stage_widths:
            if w < 4 or w % 4:
                bad("stage_widths", f"width {w} is not a positive multiple of 4")
        if len(self.stage_depths) != 4 or not all(is_int(d) and d >= 0 for d in self.stage_depths):
            bad("stage_depths", "expected four non-negative integer depths")
        for name in ("k_s", "k_m", "k_l"):
            k = getattr(self, name)
            if not is_int(k) or k < 1 or k % 2 == 0:
                bad(name, f"kernel size must be a positive odd integer, got {k!r}")
        if self.k_s < 3:
            bad("k_s", "small kernel must be >= 3 to hold the dilated 2x2 pattern")
        if self.k_m < 5:
            bad("k_m", "medium kernel must be >= 5 to hold the 3x5/5x3 patterns")
        if self.k_s > self.k_m:
            bad("k_s", f"k_s={self.k_s} exceeds k_m={self.k_m}")
        if not (isinstance(self.mlp_ratio, (int, float)) and self.mlp_ratio > 0):
            bad("mlp_ratio", "must be positive")
        for name in ("chunk_small_strips", "copy_small_strips"):
            if getattr(self, name) not in ("parallel", "serial"):
                bad(name, "must be 'parallel' or 'serial'")
        if self.downsample not in ("copyconv", "plain3x3"):
            bad("downsample", "must be 'copyconv' or 'plain3x3'")
        for name in ("use_small", "use_medium", "use_large", "bias"):
            if not isinstance(getattr(self, name), bool):
                bad(name, "must be a boolean")
        if not (isinstance(self.bn_eps, (int, float)) and self.bn_eps >= 0):
            bad("bn_eps", "must be non-negative")
        if not is_int(self.num_classes) or self.num_classes < 1:
            bad("num_classes", "must be a positive integer")
        if not is_int(self.in_channels) or self.in_channels < 1:
            bad("in_channels", "must be a positive integer")
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["stage_depths"] = list(self.stage_depths)
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise InvalidConfig(key, "unknown key")
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise InvalidConfig("config", str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfig("config", f"not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise InvalidConfig("config", "expected a JSON object")
        return cls.from_dict(d)


# Widths/depths are not published; these are chosen so that the analytic
# counter lands near the reported totals (params M, GMACs at 224x224).
VARIANTS: dict[str, ModelConfig] = {
    "M1": ModelConfig("M1", (48, 96, 192, 384), (3, 3, 15, 2)),
    "M2": ModelConfig("M2", (56, 112, 224, 448), (3, 3, 15, 2)),
    "M3": ModelConfig("M3", (64, 128, 256, 512), (3, 3, 13, 2)),
    "M4": ModelConfig("M4", (64, 128, 256, 512), (5, 5, 25, 4)),
    "M5": ModelConfig("M5", (80, 160, 320, 640), (7, 7, 35, 2)),
}

# (params in millions, GMACs) as reported for each variant.
REFERENCE_TOTALS: dict[str, tuple[float, float]] = {
    "M1": (4.8, 0.8), "M2": (6.5, 1.1), "M3": (7.8, 1.3), "M4": (13.3, 2.3), "M5": (21.7, 4.5),
}


def load_config(name_or_path: str) -> ModelConfig:
    """A variant name (``M1``..``M5``) or a path to a JSON config."""
    if name_or_path in VARIANTS:
        return VARIANTS[name_or_path]
    try:
        with open(name_or_path, encoding="utf-8") as fh:
            return ModelConfig.from_json(fh.read())
    except OSError as exc:
        raise InvalidConfig("config", f"cannot read {name_or_path!r}: {exc.strerror}") from None


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    stem: B.Stem
    stages: tuple[tuple[B.MetaNeXtBlock, ...], ...]
    downsamples: tuple[Union[B.DownsampleBlock, B.PlainDownsample], ...]
    head: ConvParams

    @property
    def fused(self) -> bool:
        return self.stem.fused and all(b.fused for b in self.blocks() if not isinstance(b, ConvParams))

    @property
    def form(self) -> str:
        return "fused" if self.fused else "training"

    def parts(self) -> Iterator[tuple[str, object]]:
        """(name, part) pairs in forward order: stem, stage 0, downsample 0, ..., head."""
        yield "stem", self.stem
        for i, stage in enumerate(self.stages):
            for j, blk in enumerate(stage):
                yield f"stages.{i}.{j}", blk
            if i < len(self.downsamples):
                yield f"downsamples.{i}", self.downsamples[i]
        yield "head", self.head

    def blocks(self):
        return [p for _, p in self.parts()]

    def astype(self, dtype) -> "Model":
        return rebuild(self, {k: v.astype(dtype) for k, v in named_arrays(self)})


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    config.validate()
    cfg = config
    rng = SplitMix64(seed)
    widths = cfg.stage_widths
    stem = B.build_stem(widths[0], rng, cfg.in_channels, cfg.bn_eps)
    stages, downs = [], []
    for i in range(4):
        stage = tuple(
            B.build_metanext(rng, widths[i], cfg.mlp_ratio, cfg.k_s, cfg.k_m, cfg.k_l,
                             cfg.use_small, cfg.use_medium, cfg.use_large,
                             cfg.chunk_small_strips, cfg.bias, cfg.bn_eps)
            for _ in range(cfg.stage_depths[i]))
        stages.append(stage)
        if i < 3:
            if cfg.downsample == "copyconv":
                downs.append(B.build_downsample(rng, widths[i], widths[i + 1], cfg.mlp_ratio,
                                                cfg.k_s, cfg.k_m, cfg.copy_small_strips,
                                                cfg.bias, cfg.bn_eps))
            else:
                downs.append(B.build_plain_downsample(rng, widths[i], widths[i + 1], cfg.bias,
                                                      cfg.bn_eps))
    head = random_conv(rng, ConvSpec.pointwise(widths[3], cfg.num_classes))
    return Model(cfg, stem, tuple(stages), tuple(downs), head)


def _check_input(m: Model, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != m.config.in_channels:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, model expects {m.config.in_channels}")
    if x.shape[2] % 32 or x.shape[3] % 32:
        raise ShapeMismatch(f"spatial size must be divisible by 32, got {x.shape[2]}x{x.shape[3]}")
    return x


def head_forward(head: ConvParams, x: np.ndarray) -> np.ndarray:
    pooled = x.mean(axis=(2, 3), keepdims=True)
    return conv2d(head, pooled)[:, :, 0, 0]


def model_forward(m: Model, x: np.ndarray, trace: Optional[list] = None) -> np.ndarray:
    """Logits of shape (N, classes).

    If ``trace`` is a list, the (C, H, W) after the stem and after each
    stage is appended to it.
    """
    x = _check_input(m, x)
    y = B.stem_forward(m.stem, x)
    if trace is not None:
        trace.append(("stem", y.shape[1:]))
    for i, stage in enumerate(m.stages):
        for blk in stage:
            y = B.metanext_forward(blk, y)
        if trace is not None:
            trace.append((f"stage{i + 1}", y.shape[1:]))
        if i < len(m.downsamples):
            y = B.block_forward(m.downsamples[i], y)
    return head_forward(m.head, y)


def fuse_model(m: Model) -> Model:
    if m.fused:
        raise AlreadyFused("model is already fused")
    fuse = lambda b: b if b.fused else B.fuse_block(b)  # noqa: E731
    return Model(m.config, fuse(m.stem), tuple(tuple(fuse(b) for b in st) for st in m.stages),
                 tuple(fuse(d) for d in m.downsamples), m.head)


def trace_shapes(config: ModelConfig, in_shape: Sequence[int]) -> list[dict]:
    """Per-stage (C, H, W) from stride arithmetic alone, without running a forward."""
    config.validate()
    n, c, h, w = in_shape
    if c != config.in_channels:
        raise ShapeMismatch(f"input has {c} channels, model expects {config.in_channels}")
    if h % 32 or w % 32:
        raise ShapeMismatch(f"spatial size must be divisible by 32, got {h}x{w}")
    rows = []
    for i, (width, depth) in enumerate(zip(config.stage_widths, config.stage_depths)):
        scale = 2 ** (i + 2)
        rows.append({"stage": i + 1, "channels": width, "height": h // scale, "width": w // scale,
                     "depth": depth})
    return rows


# --- named parameter traversal --------------------------------------------------

def _walk(obj, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, (ConvSpec, ModelConfig)):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (tuple, list)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")


def named_arrays(obj) -> list[tuple[str, np.ndarray]]:
    """Every stored array with a dotted name; models are traversed in forward order."""
    if isinstance(obj, Model):
        out = []
        for name, part in obj.parts():
            out.extend(_walk(part, name))
        return out
    return list(_walk(obj, ""))


def _rebuild(obj, prefix: str, lookup: dict):
    if isinstance(obj, np.ndarray):
        return lookup[prefix]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, (ConvSpec, ModelConfig)):
        changes = {f.name: _rebuild(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name,
                                    lookup)
                   for f in dataclasses.fields(obj) if f.init}
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, tuple):
        return tuple(_rebuild(item, f"{prefix}.{i}", lookup) for i, item in enumerate(obj))
    if isinstance(obj, list):
        return [_rebuild(item, f"{prefix}.{i}", lookup) for i, item in enumerate(obj)]
    return obj


def rebuild(template, arrays: dict):
    """Copy of ``template`` with every named array replaced from ``arrays``."""
    if isinstance(template, Model):
        return Model(template.config, _rebuild(template.stem, "stem", arrays),
                     _rebuild(template.stages, "stages", arrays),
                     _rebuild(template.downsamples, "downsamples", arrays),
                     _rebuild(template.head, "head", arrays))
    return _rebuild(template, "", arrays)


# --- weight files -------------------------------------------------------------
#
# "RPNX" | u32 version | u32 record count | records...
# record: u32 name length | utf-8 name | u8 dtype (1=f32, 2=f64) | u32 rank |
#         u32 dims[rank] | raw little-endian values
# All integers little-endian.

MAGIC = b"RPNX"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_records(sink: PathOrFile, records: Sequence[tuple[str, np.ndarray]]) -> None:
    names = [n for n, _ in records]
    if len(set(names)) != len(names):
        raise ValueError("record names must be unique")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for record {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    data = buf.getvalue()
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        with open(sink, "wb") as fh:
            fh.write(data)


def read_records(source: PathOrFile) -> list[tuple[str, np.ndarray]]:
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CorruptFile(f"unexpected end of file at byte {pos} (need {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CorruptFile("bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CorruptFile(f"unsupported format version {version}")
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFile("record name is not valid UTF-8") from None
        code, rank = struct.unpack("<BI", take(5))
        if code not in _CODE_DTYPES:
            raise CorruptFile(f"record {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _CODE_DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        records.append((name, arr.astype(dt.newbyteorder("="))))
    if pos != len(view):
        raise CorruptFile(f"{len(view) - pos} trailing bytes after the last record")
    return records


def save_weights(m: Model, sink: PathOrFile) -> None:
    write_records(sink, named_arrays(m))


def _schema_problem(records, schema) -> Optional[str]:
    for i, (name, arr) in enumerate(records):
        if i >= len(schema):
            return f"unexpected extra record {name!r}"
        want_name, want = schema[i]
        if name != want_name:
            return f"record {i} is {name!r}, expected {want_name!r}"
        if arr.shape != want.shape:
            return f"record {name!r} has shape {arr.shape}, expected {want.shape}"
    if len(records) < len(schema):
        return f"missing record {schema[len(records)][0]!r}"
    return None


def load_weights(config: ModelConfig, source: PathOrFile, form: Optional[str] = None) -> Model:
    """Rebuild a model from a weight file.

    ``form`` is ``"training"``, ``"fused"`` or ``None`` to accept either.
    """
    records = read_records(source)
    template = build_model(config, 0)
    candidates = {"training": template}
    if form in (None, "fused"):
        candidates["fused"] = fuse_model(template)
    if form is not None:
        candidates = {form: candidates[form]}
    problems = []
    for name, tmpl in candidates.items():
        problem = _schema_problem(records, named_arrays(tmpl))
        if problem is None:
            return rebuild(tmpl, dict(records))
        problems.append(f"{name} schema: {problem}")
    raise SchemaMismatch("; ".join(problems))
