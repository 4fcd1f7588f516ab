"""SVOL: a minimal bit-exact container for volumes and displacement fields.

Layout (all integers little-endian):

    bytes 0..3    magic "SVOL"
    bytes 4..7    u32 version, currently 1
    bytes 8..15   u64 header length in bytes
    next          UTF-8 JSON header of exactly that length with keys
                  dtype  : "f32" | "u16"
                  shape  : [nx, ny, nz] or [D, nx, ny, nz] (2D drops nz)
                  spacing: mm per axis
                  kind   : "intensity" | "label" | "field"
    rest          raw little-endian payload, x fastest, channel-major for
                  fields (all of channel 0, then channel 1, ...)

Write then read returns bit-identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    SvolHeaderError,
    SvolMagicError,
    SvolTruncatedError,
    SvolVersionError,
    ValidationError,
)
from .grids import DisplacementField, Grid, Volume

MAGIC = b"SVOL"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}
_KINDS = ("intensity", "label", "field")


@dataclass
class VolumeContainer:
    dtype: str
    shape: tuple[int, ...]  # header order: [D,] nx, ny[, nz]
    spacing: tuple[float, ...]
    kind: str
    payload: np.ndarray  # array in numpy order (channels first, x last)

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise ValidationError(f"unsupported dtype {self.dtype!r}")
        if self.kind not in _KINDS:
            raise ValidationError(f"unsupported kind {self.kind!r}")
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        expected = self._numpy_shape()
        if self.payload.shape != expected:
            raise ValidationError(
                f"payload shape {self.payload.shape} does not match header shape {expected}"
            )
        self.payload = np.ascontiguousarray(self.payload, dtype=_DTYPES[self.dtype])

    def _numpy_shape(self) -> tuple[int, ...]:
        if self.kind == "field":
            d, *dims = self.shape
            return (d,) + tuple(dims[::-1])
        return tuple(self.shape[::-1])

    # conversions ------------------------------------------------------------

    @classmethod
    def from_volume(cls, vol: Volume) -> "VolumeContainer":
        if vol.kind == "label":
            if vol.values.max(initial=0) >= 2**16:
                raise ValidationError("label ids must fit in u16")
            return cls("u16", vol.grid.dims, vol.grid.spacing, "label",
                       vol.values.astype("<u2"))
        return cls("f32", vol.grid.dims, vol.grid.spacing, "intensity",
                   vol.values.astype("<f4"))

    @classmethod
    def from_field(cls, field: DisplacementField) -> "VolumeContainer":
        shape = (field.grid.ndim,) + field.grid.dims
        return cls("f32", shape, field.grid.spacing, "field",
                   field.components.astype("<f4"))

    def grid(self) -> Grid:
        dims = self.shape[1:] if self.kind == "field" else self.shape
        return Grid(dims, self.spacing)

    def to_volume(self) -> Volume:
        if self.kind == "field":
            raise ValidationError("container holds a field, not a volume")
        values = self.payload.astype(np.int64 if self.kind == "label" else np.float64)
        return Volume(self.grid(), values, self.kind)

    def to_field(self) -> DisplacementField:
        if self.kind != "field":
            raise ValidationError("container does not hold a field")
        return DisplacementField(self.grid(), self.payload.astype(np.float64))


def write_svol(path, container: VolumeContainer) -> None:
    header = {
        "dtype": container.dtype,
        "shape": list(container.shape),
        "spacing": list(container.spacing),
        "kind": container.kind,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(container.payload.tobytes())


def read_svol(path) -> VolumeContainer:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise SvolTruncatedError(f"file too short for a header: {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise SvolMagicError(f"bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise SvolVersionError(f"unsupported version {version}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if 16 + header_len > len(blob):
        raise SvolTruncatedError(
            f"header of {header_len} bytes extends past end of file"
        )
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SvolHeaderError(f"malformed JSON header: {exc}") from exc
    missing = {"dtype", "shape", "spacing", "kind"} - set(header)
    if missing:
        raise SvolHeaderError(f"header missing keys {sorted(missing)}")
    unknown = set(header) - {"dtype", "shape", "spacing", "kind"}
    if unknown:
        raise SvolHeaderError(f"header has unknown keys {sorted(unknown)}")
    dtype = header["dtype"]
    kind = header["kind"]
    if dtype not in _DTYPES:
        raise SvolHeaderError(f"unsupported dtype {dtype!r}")
    if kind not in _KINDS:
        raise SvolHeaderError(f"unsupported kind {kind!r}")
    shape = tuple(int(s) for s in header["shape"])
    spacing = tuple(float(s) for s in header["spacing"])
    count = int(np.prod(shape))
    itemsize = _DTYPES[dtype].itemsize
    payload_bytes = blob[16 + header_len :]
    if len(payload_bytes) < count * itemsize:
        raise SvolTruncatedError(
            f"payload has {len(payload_bytes)} bytes, expected {count * itemsize}"
        )
    if len(payload_bytes) > count * itemsize:
        raise SvolHeaderError(
            f"payload has {len(payload_bytes)} bytes but header implies {count * itemsize}"
        )
    data = np.frombuffer(payload_bytes, dtype=_DTYPES[dtype])
    if kind == "field":
        d, *dims = shape
        arr = data.reshape((d,) + tuple(dims[::-1]))
    else:
        arr = data.reshape(shape[::-1])
    try:
        return VolumeContainer(dtype, shape, spacing, kind, arr)
    except ValidationError as exc:
        raise SvolHeaderError(str(exc)) from exc
