"""Task-vector arithmetic, per-layer parameter distances, and the FLRN checkpoint container."""
from __future__ import annotations

import json
import math
import os
import re
import struct
import tempfile
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import ConfigError, FormatError
from .lora import LoraAdapterSet, LoraConfig
from .model import ModelConfig, ParamSet, _TensorMap

FAMILIES = ("query", "key", "value", "output", "mlp_up", "mlp_down", "embedding", "head", "norm")
ATTENTION_FAMILIES = ("query", "key", "value", "output")
MLP_FAMILIES = ("mlp_up", "mlp_down")


class TaskVector(_TensorMap):
    """Parameter delta with a full model layout; ``source`` records its provenance."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray], source: str = ""):
        super().__init__(config, tensors, what="TaskVector")
        self.source = source

    def __repr__(self):
        return f"TaskVector(source={self.source!r}, n_params={self.n_params()})"


@dataclass(frozen=True)
class ForgettingRate:
    value: float

    def __post_init__(self):
        if not self.value >= 0:
            raise ConfigError(f"forgetting rate must be >= 0, got {self.value!r}")

    def __float__(self):
        return float(self.value)


def _check_layouts(a: _TensorMap, b: _TensorMap) -> None:
    if set(a) != set(b) or any(a[n].shape != b[n].shape for n in a):
        raise ConfigError("tensor layouts differ")


def extract_delta(theta_ft: ParamSet, theta: ParamSet, source: str = "") -> TaskVector:
    """Knowledge parameters: elementwise ``theta_ft - theta``."""
    _check_layouts(theta_ft, theta)
    delta = {
        n: (theta_ft[n].astype(np.float64) - theta[n].astype(np.float64)).astype(np.float32)
        for n in theta
    }
    return TaskVector(theta.config, delta, source=source)


def apply_forgetting(theta: ParamSet, delta: TaskVector, rate: Union[ForgettingRate, float]) -> ParamSet:
    """``theta - rate * delta``.

    A plain float is applied as given, so negative values re-add a delta
    (``-1`` reconstructs the fine-tuned model); use :class:`ForgettingRate`
    for a validated non-negative rate.
    """
    _check_layouts(theta, delta)
    lam = float(rate)
    out = {}
    for n in theta:
        step = lam * delta[n].astype(np.float64)
        # zero steps copy the weight through untouched, so rate 0 is bit-exact
        out[n] = np.where(step == 0, theta[n], (theta[n].astype(np.float64) - step).astype(np.float32))
    return ParamSet(theta.config, out)


def tensor_family(name: str) -> tuple[int | None, str]:
    """(layer index or None, family) for a canonical parameter name."""
    m = re.match(r"layers\.(\d+)\.(.+)$", name)
    if m is None:
        if name.startswith("embed."):
            return None, "embedding"
        if name == "head":
            return None, "head"
        if name == "final_norm":
            return None, "norm"
        raise ConfigError(f"unknown tensor name {name!r}")
    layer, rest = int(m.group(1)), m.group(2)
    if rest.startswith("attn."):
        proj = rest.split(".")[1]
        return layer, {"q": "query", "k": "key", "v": "value", "o": "output"}[proj]
    if rest.startswith("mlp.up"):
        return layer, "mlp_up"
    if rest.startswith("mlp.down"):
        return layer, "mlp_down"
    if rest.endswith("_norm"):
        return layer, "norm"
    raise ConfigError(f"unknown tensor name {name!r}")


@dataclass(frozen=True)
class LayerDistanceReport:
    """Frobenius distance of every named tensor, tagged with layer and family."""

    rows: tuple[tuple[int | None, str, str, float], ...]  # (layer, family, name, distance)

    def by_group(self) -> dict[tuple[int | None, str], float]:
        """Distance per (layer, family), pooling a family's weight and bias."""
        sq: dict[tuple[int | None, str], float] = {}
        for layer, fam, _, d in self.rows:
            sq[(layer, fam)] = sq.get((layer, fam), 0.0) + d * d
        return {k: float(np.sqrt(v)) for k, v in sq.items()}

    def family_mean(self, families) -> float:
        vals = [d for (layer, fam), d in self.by_group().items() if fam in families and layer is not None]
        return float(np.mean(vals)) if vals else 0.0

    def nonzero_families(self) -> set[str]:
        return {fam for _, fam, _, d in self.rows if d > 0}

    def to_csv(self) -> str:
        lines = ["layer,family,tensor,distance"]
        for layer, fam, name, d in self.rows:
            lines.append(f"{'' if layer is None else layer},{fam},{name},{d!r}")
        return "\n".join(lines) + "\n"


def layer_distances(a: _TensorMap, b: _TensorMap) -> LayerDistanceReport:
    _check_layouts(a, b)
    rows = []
    for n in a:
        layer, fam = tensor_family(n)
        diff = a[n].astype(np.float64) - b[n].astype(np.float64)
        rows.append((layer, fam, n, float(np.sqrt(np.sum(diff * diff)))))
    return LayerDistanceReport(tuple(rows))


# ---------------------------------------------------------------------------
# checkpoint container
#
# "FLRN" | u8 version | u8 kind | u32 count | entries | u64 crc64
# entry: u16 name_len | utf-8 name | u8 rank | rank * u32 dims | f32 values
# All integers and floats little-endian. A leading "__meta__" entry with a
# zero-length tensor carries the model / adapter config as JSON in its name.

MAGIC = b"FLRN"
VERSION = 1
KIND_PARAMS, KIND_DELTA, KIND_ADAPTERS = 0, 1, 2
_KIND_NAMES = {KIND_PARAMS: "params", KIND_DELTA: "delta", KIND_ADAPTERS: "adapters"}
META = "__meta__"

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected (CRC-64/XZ)


def _crc_table() -> list[int]:
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ _CRC64_POLY if c & 1 else c >> 1
        table.append(c)
    return table


_CRC_TABLE = _crc_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ (check value for b"123456789" is 0x995DC9BBDF1939FA)."""
    crc ^= 0xFFFFFFFFFFFFFFFF
    table = _CRC_TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


Checkpointable = Union[ParamSet, TaskVector, LoraAdapterSet]


def _model_meta(cfg: ModelConfig) -> dict:
    return {
        "vocab_size": cfg.vocab_size,
        "d_model": cfg.d_model,
        "n_layers": cfg.n_layers,
        "n_heads": cfg.n_heads,
        "d_ff": cfg.d_ff,
        "max_seq_len": cfg.max_seq_len,
        "seed": int(cfg.seed),
    }


def encode_checkpoint(obj: Checkpointable) -> bytes:
    if isinstance(obj, LoraAdapterSet):
        kind = KIND_ADAPTERS
        meta = {
            "model": _model_meta(obj.model_config),
            "lora": {
                "rank": obj.config.rank,
                "alpha": obj.config.alpha,
                "target_projections": list(obj.config.target_projections),
                "seed": int(obj.config.seed),
            },
        }
    elif isinstance(obj, TaskVector):
        kind = KIND_DELTA
        meta = {"model": _model_meta(obj.config), "source": obj.source}
    elif isinstance(obj, ParamSet):
        kind = KIND_PARAMS
        meta = {"model": _model_meta(obj.config)}
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    entries = [(META + json.dumps(meta, sort_keys=True, separators=(",", ":")), np.zeros((0,), np.float32))]
    entries += [(n, obj[n]) for n in obj]
    parts = [MAGIC, struct.pack("<BBI", VERSION, kind, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]!r}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} has too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def decode_checkpoint(data: bytes) -> Checkpointable:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated container while reading {what}", offset=pos)
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad magic", offset=0)
    version, kind, count = struct.unpack("<BBI", take(6, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if kind not in _KIND_NAMES:
        raise FormatError(f"unknown kind {kind}", offset=5)
    tensors: dict[str, np.ndarray] = {}
    meta = None
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=start + 2) from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        if rank > 32:
            raise FormatError(f"tensor rank {rank} is implausible", offset=pos - 1)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = math.prod(dims)  # exact: a corrupt header must not wrap around
        values = np.frombuffer(take(4 * n, f"values of {name!r}"), dtype="<f4").astype(np.float32)
        if name.startswith(META):
            if meta is not None:
                raise FormatError("duplicate metadata entry", offset=start)
            try:
                meta = json.loads(name[len(META):])
            except json.JSONDecodeError:
                raise FormatError("unreadable metadata entry", offset=start) from None
            continue
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", offset=start)
        tensors[name] = values.reshape(dims)
    crc_pos = pos
    (stored,) = struct.unpack("<Q", take(8, "checksum"))
    if pos != len(view):
        raise FormatError("trailing bytes after checksum", offset=pos)
    if crc64(bytes(view[:crc_pos])) != stored:
        raise FormatError("checksum mismatch", offset=crc_pos)
    if meta is None:
        raise FormatError("missing metadata entry", offset=10)
    try:
        model_cfg = ModelConfig(**meta["model"])
        if kind == KIND_PARAMS:
            return ParamSet(model_cfg, tensors)
        if kind == KIND_DELTA:
            return TaskVector(model_cfg, tensors, source=meta.get("source", ""))
        lcfg = meta["lora"]
        return LoraAdapterSet(model_cfg, LoraConfig(**{**lcfg, "target_projections": tuple(lcfg["target_projections"])}), tensors)
    except (ConfigError, KeyError, TypeError) as exc:
        raise FormatError(f"container content invalid: {exc}", offset=10) from None


def save_checkpoint(obj: Checkpointable, path: str | os.PathLike) -> None:
    """Write ``obj`` atomically (temp file + rename) in the FLRN container."""
    data = encode_checkpoint(obj)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".flrn-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpointable:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def checkpoint_kind(path: str | os.PathLike) -> str:
    with open(path, "rb") as fh:
        head = fh.read(6)
    if len(head) < 6 or head[:4] != MAGIC:
        raise FormatError("bad magic", offset=0)
    return _KIND_NAMES.get(head[5], "unknown")
