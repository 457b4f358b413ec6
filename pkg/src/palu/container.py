"""Binary tensor container: 4-byte magic "PALU", version byte, uint32-LE
header length, UTF-8 JSON header, then raw little-endian payloads.

Header schema:

    {"tensors": [{"name", "dtype": "f64"|"u8-packed", "shape": [...],
                  "bits" (packed only), "offset", "byte_len"}],
     "meta": {...}}

Offsets are relative to the start of the data section and 8-byte aligned;
payloads are row-major. Tensors are laid out sorted by name so the same
content always produces the same bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Matrix
from .errors import ValidationError

MAGIC = b"PALU"
VERSION = 1
_ALIGN = 8


@dataclass(frozen=True)
class PackedTensor:
    """Bit-packed unsigned integer payload plus its logical shape."""

    data: bytes
    shape: tuple[int, ...]
    bits: int

    def __post_init__(self):
        if self.bits not in (2, 3, 4, 8):
            raise ValidationError(f"packed bits must be 2/3/4/8, got {self.bits}")
        need = math.ceil(int(np.prod(self.shape)) * self.bits / 8) if self.shape else 0
        if len(self.data) != need:
            raise ValidationError(
                f"packed payload is {len(self.data)} bytes, expected {need} for shape {self.shape}"
            )

    @property
    def count(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class Container:
    tensors: dict[str, np.ndarray | PackedTensor]
    meta: dict

    def array(self, name: str) -> np.ndarray:
        t = self._get(name)
        if not isinstance(t, np.ndarray):
            raise ValidationError(f"tensor {name!r} is packed, not f64")
        return t

    def matrix(self, name: str) -> Matrix:
        return Matrix(self.array(name))

    def packed(self, name: str) -> PackedTensor:
        t = self._get(name)
        if not isinstance(t, PackedTensor):
            raise ValidationError(f"tensor {name!r} is f64, not packed")
        return t

    def _get(self, name: str):
        try:
            return self.tensors[name]
        except KeyError:
            raise ValidationError(f"container has no tensor named {name!r}") from None


def _normalize(value) -> np.ndarray | PackedTensor:
    if isinstance(value, PackedTensor):
        return value
    if isinstance(value, Matrix):
        return value.data
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        raise ValidationError("scalar tensors are not supported; use shape (1,)")
    return arr


def write_container(path, tensors: dict, meta: dict | None = None) -> None:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        value = _normalize(tensors[name])
        if isinstance(value, PackedTensor):
            payload = value.data
            entry = {
                "name": name,
                "dtype": "u8-packed",
                "shape": list(value.shape),
                "bits": value.bits,
            }
        else:
            payload = np.ascontiguousarray(value, dtype="<f8").tobytes()
            entry = {"name": name, "dtype": "f64", "shape": list(value.shape)}
        entry["offset"] = offset
        entry["byte_len"] = len(payload)
        entries.append(entry)
        payloads.append((offset, payload))
        offset += len(payload)
        offset += (-offset) % _ALIGN

    header = {"tensors": entries, "meta": meta or {}}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    blob = bytearray()
    blob += MAGIC
    blob.append(VERSION)
    blob += len(header_bytes).to_bytes(4, "little")
    blob += header_bytes
    data_start = len(blob)
    blob += bytes(offset)
    for off, payload in payloads:
        blob[data_start + off : data_start + off + len(payload)] = payload
    Path(path).write_bytes(bytes(blob))


def read_container(path) -> Container:
    raw = Path(path).read_bytes()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise ValidationError(f"{path}: not a PALU container")
    if raw[4] != VERSION:
        raise ValidationError(f"{path}: unsupported container version {raw[4]}")
    header_len = int.from_bytes(raw[5:9], "little")
    if 9 + header_len > len(raw):
        raise ValidationError(f"{path}: truncated header")
    try:
        header = json.loads(raw[9 : 9 + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: bad header JSON: {exc}") from None
    data = raw[9 + header_len :]

    if not isinstance(header, dict) or "tensors" not in header:
        raise ValidationError(f"{path}: header missing tensor list")
    spans = []
    tensors: dict[str, np.ndarray | PackedTensor] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        byte_len = int(entry["byte_len"])
        count = int(np.prod(shape)) if shape else 0
        if offset % _ALIGN:
            raise ValidationError(f"{path}: tensor {name!r} offset {offset} not 8-byte aligned")
        if offset < 0 or offset + byte_len > len(data):
            raise ValidationError(f"{path}: tensor {name!r} payload out of bounds")
        spans.append((offset, offset + byte_len, name))
        if entry["dtype"] == "f64":
            if byte_len != count * 8:
                raise ValidationError(f"{path}: tensor {name!r} byte_len inconsistent with shape")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            tensors[name] = arr.astype(np.float64)
        elif entry["dtype"] == "u8-packed":
            bits = int(entry["bits"])
            need = math.ceil(count * bits / 8)
            if byte_len != need:
                raise ValidationError(f"{path}: tensor {name!r} byte_len inconsistent with bits")
            tensors[name] = PackedTensor(
                data=bytes(data[offset : offset + byte_len]), shape=shape, bits=bits
            )
        else:
            raise ValidationError(f"{path}: tensor {name!r} has unknown dtype {entry['dtype']!r}")

    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ValidationError(f"{path}: tensors {n0!r} and {n1!r} overlap")
    return Container(tensors=tensors, meta=header.get("meta", {}))
