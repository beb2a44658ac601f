"""Standalone writer/reader for the SWTA tensor-archive byte format.

This is the interchange surface with the inference engine; the layout is:
magic "SWTA", u32 LE version=1, u32 LE tensor count, then per tensor a
u16 LE name length + UTF-8 name, u8 dtype code (0=f32, 1=f16, 2=i8, 3=u8,
4=i32), u8 ndim, ndim x u32 LE dims, u8 has_qparams flag (with f32 scale,
i32 zero_point, u8 bits, u8 scheme when set), and the raw little-endian
element bytes. Deliberately independent of the engine's own implementation.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SWTA"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f2"): 1,
    np.dtype("<i1"): 2,
    np.dtype("<u1"): 3,
    np.dtype("<i4"): 4,
}
DTYPES_BY_CODE = {v: k for k, v in DTYPE_CODES.items()}


def write_archive(entries: list[tuple[str, np.ndarray]]) -> bytes:
    """entries: ordered (name, array) pairs; arrays carry no qparams here
    (checkpoints and fixtures are float data)."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(entries))
    seen = set()
    for name, array in entries:
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(array)
        if arr.dtype not in DTYPE_CODES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += b"\x00"  # no quantization parameters
        out += arr.tobytes()
    return bytes(out)


def read_archive(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("bad SWTA magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported SWTA version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        (has_qp,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        if has_qp:
            pos += 10  # scale + zero_point + bits + scheme
        dtype = DTYPES_BY_CODE[code]
        nbytes = int(np.prod(dims)) * dtype.itemsize
        out[name] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
        pos += nbytes
    return out


def save_archive(entries: list[tuple[str, np.ndarray]], path) -> None:
    with open(path, "wb") as f:
        f.write(write_archive(entries))


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return read_archive(f.read())
