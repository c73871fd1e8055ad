"""Bit-exact binary container for tensors, calibration traces, and banks.

Layout (version 1, every integer little-endian regardless of host):

    magic      8 bytes   b"ASMTENS\\0"
    version    u32
    meta_len   u32       followed by meta_len bytes of UTF-8 "key=value" lines
    n_tensors  u32
    per tensor:
        name_len u32, name bytes (UTF-8, unique within the file)
        dtype    u8       0 = f32, 1 = f64, 2 = u32
        ndim     u32
        dims     ndim x u64
        data_len u64
        data     data_len bytes, row-major little-endian

write -> read -> write round-trips byte-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"ASMTENS\x00"
FORMAT_VERSION = 1

# Mandatory metadata keys for trace files.
TRACE_META_KEYS = ("n_layers", "h_q", "h_kv", "d_h", "prefix_len", "format_version")

_DTYPE_CODES = {"f32": 0, "f64": 1, "u32": 2}
_CODE_TO_NUMPY = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4")}
_NUMPY_TO_CODE = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint32): 2,
}

_MAX_NDIM = 32


class TensorFileError(Exception):
    """Base class for container format violations."""


class BadMagicError(TensorFileError):
    pass


class UnsupportedVersionError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class SchemaError(TensorFileError):
    """Structurally valid file whose contents violate a schema contract."""


def write_tensor_file(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    metadata: dict[str, str] | None = None,
) -> None:
    """Write named tensors plus a key=value metadata block to `path`.

    Tensor order and metadata order are preserved exactly as given, so the
    same inputs always produce the same bytes.
    """
    metadata = metadata or {}
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", FORMAT_VERSION)

    lines = []
    for key, value in metadata.items():
        key = str(key)
        value = str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise SchemaError(f"metadata key/value not encodable: {key!r}")
        lines.append(f"{key}={value}")
    meta_bytes = "\n".join(lines).encode("utf-8")
    buf += struct.pack("<I", len(meta_bytes))
    buf += meta_bytes

    seen: set[str] = set()
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        if name in seen:
            raise SchemaError(f"duplicate tensor name: {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        code = _NUMPY_TO_CODE.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise SchemaError(
                f"tensor {name!r} has unsupported dtype {arr.dtype}; "
                "only f32, f64, u32 are storable"
            )
        data = np.ascontiguousarray(arr).astype(_CODE_TO_NUMPY[code], copy=False)
        raw = data.tobytes()
        name_bytes = name.encode("utf-8")
        buf += struct.pack("<I", len(name_bytes))
        buf += name_bytes
        buf += struct.pack("<B", code)
        buf += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<Q", dim)
        buf += struct.pack("<Q", len(raw))
        buf += raw

    Path(path).write_bytes(bytes(buf))


def read_tensor_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read back tensors and metadata written by :func:`write_tensor_file`."""
    with open(path, "rb") as f:
        return _read_stream(f)


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"truncated data while reading {what}")
    return data


def _read_stream(f: BinaryIO) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise BadMagicError("bad magic: not an ASMTENS container")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")

    (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
    meta_bytes = _read_exact(f, meta_len, "metadata block")
    metadata: dict[str, str] = {}
    if meta_bytes:
        for line in meta_bytes.decode("utf-8").split("\n"):
            key, sep, value = line.partition("=")
            if not sep:
                raise SchemaError(f"malformed metadata line: {line!r}")
            metadata[key] = value

    (n_tensors,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", _read_exact(f, 4, "tensor name length"))
        name = _read_exact(f, name_len, "tensor name").decode("utf-8")
        if name in tensors:
            raise SchemaError(f"duplicate tensor name: {name!r}")
        (code,) = struct.unpack("<B", _read_exact(f, 1, "dtype"))
        if code not in _CODE_TO_NUMPY:
            raise SchemaError(f"tensor {name!r}: unknown dtype code {code}")
        dtype = _CODE_TO_NUMPY[code]
        (ndim,) = struct.unpack("<I", _read_exact(f, 4, "ndim"))
        if ndim > _MAX_NDIM:
            raise SchemaError(f"tensor {name!r}: ndim {ndim} exceeds limit")
        shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, "dims"))
        n_elem = 1
        for dim in shape:
            n_elem *= dim
        expected = n_elem * dtype.itemsize
        if expected >= 1 << 64:
            raise SchemaError(f"tensor {name!r}: dims overflow")
        (data_len,) = struct.unpack("<Q", _read_exact(f, 8, "data length"))
        if data_len != expected:
            raise SchemaError(
                f"tensor {name!r}: data length {data_len} does not match "
                f"shape {shape} ({expected} bytes expected)"
            )
        raw = _read_exact(f, data_len, f"tensor {name!r} data")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    if f.read(1):
        raise SchemaError("trailing bytes after last tensor")
    return tensors, metadata


@dataclass(frozen=True)
class ModelGeometry:
    """Head layout of the traced model.

    group_size G = h_q / h_kv query heads share one KV head.
    """

    n_layers: int
    h_q: int
    h_kv: int
    d_h: int

    def __post_init__(self) -> None:
        for name in ("n_layers", "h_q", "h_kv", "d_h"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.h_q % self.h_kv != 0:
            raise ValueError(
                f"h_q ({self.h_q}) must be divisible by h_kv ({self.h_kv})"
            )

    @property
    def group_size(self) -> int:
        return self.h_q // self.h_kv

    def kv_head_of(self, query_head: int) -> int:
        return query_head // self.group_size

    def meta(self) -> dict[str, str]:
        return {
            "n_layers": str(self.n_layers),
            "h_q": str(self.h_q),
            "h_kv": str(self.h_kv),
            "d_h": str(self.d_h),
        }

    @classmethod
    def from_meta(cls, metadata: dict[str, str]) -> "ModelGeometry":
        try:
            return cls(
                n_layers=int(metadata["n_layers"]),
                h_q=int(metadata["h_q"]),
                h_kv=int(metadata["h_kv"]),
                d_h=int(metadata["d_h"]),
            )
        except KeyError as exc:
            raise SchemaError(f"missing geometry metadata key: {exc}") from exc
        except ValueError as exc:
            raise SchemaError(f"non-integer geometry metadata: {exc}") from exc


# Per-layer tensor names inside a trace file.
_TRACE_FIELDS = ("pre_rope_q", "rope_q", "attn_out", "log_z")


@dataclass
class TraceSet:
    """Recorded calibration tensors for one prefix.

    Per layer, per response token: the query before rotary embedding, the
    query after it, and the token's attention state over the prefix
    (output vector per head plus log softmax mass per head).
    """

    geometry: ModelGeometry
    prefix_len: int
    pre_rope_q: list[np.ndarray] = field(default_factory=list)  # [T, h_q, d_h] f32
    rope_q: list[np.ndarray] = field(default_factory=list)      # [T, h_q, d_h] f32
    attn_out: list[np.ndarray] = field(default_factory=list)    # [T, h_q, d_h] f32
    log_z: list[np.ndarray] = field(default_factory=list)       # [T, h_q] f64

    @property
    def n_tokens(self) -> int:
        return 0 if not self.pre_rope_q else self.pre_rope_q[0].shape[0]

    def validate(self) -> None:
        g = self.geometry
        if len(self.pre_rope_q) != g.n_layers:
            raise SchemaError("layer count does not match geometry")
        n = self.n_tokens
        for layer in range(g.n_layers):
            for name, arrs, shape in (
                ("pre_rope_q", self.pre_rope_q, (n, g.h_q, g.d_h)),
                ("rope_q", self.rope_q, (n, g.h_q, g.d_h)),
                ("attn_out", self.attn_out, (n, g.h_q, g.d_h)),
                ("log_z", self.log_z, (n, g.h_q)),
            ):
                arr = arrs[layer]
                if arr.shape != shape:
                    raise SchemaError(
                        f"layer{layer}.{name} shape {arr.shape} != {shape}"
                    )
                if not np.isfinite(arr).all():
                    raise SchemaError(f"layer{layer}.{name} has non-finite values")


def save_trace_set(path: str | Path, traces: TraceSet) -> None:
    traces.validate()
    g = traces.geometry
    meta = dict(g.meta())
    meta["prefix_len"] = str(traces.prefix_len)
    meta["format_version"] = str(FORMAT_VERSION)
    meta["object"] = "trace"
    tensors: dict[str, np.ndarray] = {}
    for layer in range(g.n_layers):
        tensors[f"layer{layer}.pre_rope_q"] = traces.pre_rope_q[layer].astype(np.float32)
        tensors[f"layer{layer}.rope_q"] = traces.rope_q[layer].astype(np.float32)
        tensors[f"layer{layer}.attn_out"] = traces.attn_out[layer].astype(np.float32)
        tensors[f"layer{layer}.log_z"] = traces.log_z[layer].astype(np.float64)
    write_tensor_file(path, tensors, meta)


def load_trace_set(path: str | Path) -> TraceSet:
    """Load and validate a trace file; geometry comes from the metadata."""
    tensors, meta = read_tensor_file(path)
    for key in TRACE_META_KEYS:
        if key not in meta:
            raise SchemaError(f"missing required metadata key: {key}")
    geometry = ModelGeometry.from_meta(meta)
    traces = TraceSet(geometry=geometry, prefix_len=int(meta["prefix_len"]))
    for layer in range(geometry.n_layers):
        for name in _TRACE_FIELDS:
            full = f"layer{layer}.{name}"
            if full not in tensors:
                raise SchemaError(f"missing required tensor: {full}")
        traces.pre_rope_q.append(tensors[f"layer{layer}.pre_rope_q"])
        traces.rope_q.append(tensors[f"layer{layer}.rope_q"])
        traces.attn_out.append(tensors[f"layer{layer}.attn_out"])
        traces.log_z.append(tensors[f"layer{layer}.log_z"])
    traces.validate()
    return traces
