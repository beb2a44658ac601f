"""Core n-dimensional array type, math kernels, and the binary tensor archive.

Everything downstream computes on contiguous row-major numpy arrays. The
:class:`Tensor` wrapper adds the dtype tag and (for quantized data) the
quantization parameters that the archive byte format serializes. Math kernels
are dtype-generic free functions: production code feeds them float32 and gets
float32 back (matmul accumulates in f32 via BLAS sgemm); tests may feed f64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

MAGIC = b"SWTA"
ARCHIVE_VERSION = 1

# dtype tag <-> archive code <-> numpy dtype
DTYPE_CODES = {"f32": 0, "f16": 1, "i8": 2, "u8": 3, "i32": 4}
DTYPE_FROM_CODE = {v: k for k, v in DTYPE_CODES.items()}
NUMPY_DTYPES = {
    "f32": np.dtype("<f4"),
    "f16": np.dtype("<f2"),
    "i8": np.dtype("<i1"),
    "u8": np.dtype("<u1"),
    "i32": np.dtype("<i4"),
}
DTYPE_FROM_NUMPY = {np.dtype(v): k for k, v in NUMPY_DTYPES.items()}

SCHEME_CODES = {"affine": 0, "symmetric": 1, "log2": 2, "pot_channel": 3}
SCHEME_FROM_CODE = {v: k for k, v in SCHEME_CODES.items()}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ArchiveFormatError(ValueError):
    """Malformed archive bytes; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class QuantParams:
    """Quantizer description for one tensor site.

    ``scale`` is the uniform step (per-channel schemes keep a shared scale
    here; channel data travels separately because the archive trailer has a
    single scalar slot). ``per_channel_factors`` holds power-of-two exponents
    for the pot_channel scheme.
    """

    scheme: str
    bits: int
    scale: float
    zero_point: int
    per_channel_factors: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.scheme not in SCHEME_CODES:
            raise ValueError(f"unknown quantization scheme {self.scheme!r}")
        if self.bits not in (4, 8):
            raise ValueError(f"unsupported bit width {self.bits}")
        # canonicalize to f32 so constructed params equal deserialized ones
        object.__setattr__(self, "scale", float(np.float32(self.scale)))
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.scheme in ("symmetric", "pot_channel") and self.zero_point != 0:
            raise ValueError(f"{self.scheme} quantization requires zero_point == 0")
        if self.scheme == "log2" and (self.scale != 1.0 or self.zero_point != 0):
            raise ValueError("log2 quantization requires scale == 1 and zero_point == 0")
        if self.per_channel_factors is not None and self.scheme != "pot_channel":
            raise ValueError("per_channel_factors only valid for pot_channel")


@dataclass(frozen=True)
class Tensor:
    """Contiguous row-major array with a dtype tag and optional quant params.

    i8/u8 tensors must carry :class:`QuantParams`; f16 data is stored as IEEE
    binary16 (already rounded to nearest-even when built from f32). Instances
    are immutable: the wrapped array is made non-writeable.
    """

    data: np.ndarray
    qparams: QuantParams | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if arr.dtype not in DTYPE_FROM_NUMPY:
            raise ValueError(f"unsupported element dtype {arr.dtype}")
        if arr.ndim < 1:
            raise ValueError("tensors must have at least one dimension")
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"extents must be positive, got {arr.shape}")
        if self.dtype_of(arr) in ("i8", "u8") and self.qparams is None:
            raise ValueError("i8/u8 tensors must carry quantization parameters")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @staticmethod
    def dtype_of(arr: np.ndarray) -> str:
        return DTYPE_FROM_NUMPY[arr.dtype]

    @property
    def dtype(self) -> str:
        return self.dtype_of(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @classmethod
    def f32(cls, values) -> "Tensor":
        return cls(np.asarray(values, dtype=np.float32))

    @classmethod
    def f16_from_f32(cls, values) -> "Tensor":
        """Round f32 data to binary16 storage (round-to-nearest-even)."""
        return cls(np.asarray(values, dtype=np.float32).astype(np.float16))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.qparams == other.qparams
            and self.data.tobytes() == other.data.tobytes()
        )

    def __hash__(self):
        return hash((self.dtype, self.shape, self.qparams, self.data.tobytes()))


@dataclass
class TensorArchive:
    """Ordered, uniquely named tensor collection; round-trips byte-exactly."""

    entries: list[tuple[str, Tensor]] = field(default_factory=list)
    version: int = ARCHIVE_VERSION

    def add(self, name: str, tensor: Tensor) -> None:
        if any(n == name for n, _ in self.entries):
            raise ValueError(f"duplicate tensor name {name!r}")
        self.entries.append((name, tensor))

    def get(self, name: str) -> Tensor:
        for n, t in self.entries:
            if n == name:
                return t
        raise KeyError(name)

    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def __contains__(self, name: str) -> bool:
        return any(n == name for n, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# math kernels


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with accumulation in the operand dtype (f32 for f32 in).

    Inner extents must agree; batched leading dimensions follow numpy matmul
    broadcasting for >=2-d operands.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``; NaN inputs yield NaN outputs."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layernorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Layer normalization over the last axis with population variance."""
    x = np.asarray(x)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    return xhat * gamma + beta


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-CDF GELU: x * Phi(x) using erf (not the tanh fit)."""
    x = np.asarray(x)
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# archive byte format
#
# magic "SWTA", u32 LE version, u32 LE tensor count; per tensor:
#   u16 LE name length, UTF-8 name, u8 dtype code, u8 ndim, ndim x u32 LE dims,
#   u8 has_qparams; if 1: f32 LE scale, i32 LE zero_point, u8 bits, u8 scheme;
#   raw little-endian element bytes.


def archive_write(archive: TensorArchive) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", archive.version, len(archive.entries))
    seen = set()
    for name, tensor in archive.entries:
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        out += struct.pack("<H", len(raw_name))
        out += raw_name
        out += struct.pack("<BB", DTYPE_CODES[tensor.dtype], tensor.data.ndim)
        out += struct.pack(f"<{tensor.data.ndim}I", *tensor.shape)
        if tensor.qparams is None:
            out += b"\x00"
        else:
            qp = tensor.qparams
            out += b"\x01"
            out += struct.pack(
                "<fiBB", qp.scale, qp.zero_point, qp.bits, SCHEME_CODES[qp.scheme]
            )
        out += np.ascontiguousarray(tensor.data, dtype=NUMPY_DTYPES[tensor.dtype]).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArchiveFormatError(f"truncated payload while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def archive_read(buf: bytes) -> TensorArchive:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ArchiveFormatError("bad magic", 0)
    version, count = r.unpack("<II", "header")
    if version != ARCHIVE_VERSION:
        raise ArchiveFormatError(f"unsupported version {version}", 4)
    archive = TensorArchive(version=version)
    seen = set()
    for _ in range(count):
        name_start = r.pos
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        if name in seen:
            raise ArchiveFormatError(f"duplicate tensor name {name!r}", name_start)
        seen.add(name)
        dtype_code, ndim = r.unpack("<BB", "dtype/ndim")
        if dtype_code not in DTYPE_FROM_CODE:
            raise ArchiveFormatError(f"unknown dtype code {dtype_code}", r.pos - 2)
        if ndim < 1:
            raise ArchiveFormatError("ndim must be >= 1", r.pos - 1)
        dims = r.unpack(f"<{ndim}I", "dims")
        if any(d <= 0 for d in dims):
            raise ArchiveFormatError(f"non-positive extent in {dims}", r.pos - 4 * ndim)
        (has_qp,) = r.unpack("<B", "qparams flag")
        qparams = None
        if has_qp == 1:
            scale, zero_point, bits, scheme_code = r.unpack("<fiBB", "qparams")
            if scheme_code not in SCHEME_FROM_CODE:
                raise ArchiveFormatError(f"unknown scheme code {scheme_code}", r.pos - 1)
            qparams = QuantParams(
                scheme=SCHEME_FROM_CODE[scheme_code],
                bits=bits,
                scale=scale,
                zero_point=zero_point,
            )
        elif has_qp != 0:
            raise ArchiveFormatError(f"bad qparams flag {has_qp}", r.pos - 1)
        dtype = DTYPE_FROM_CODE[dtype_code]
        np_dtype = NUMPY_DTYPES[dtype]
        nbytes = int(np.prod(dims)) * np_dtype.itemsize
        raw = r.take(nbytes, f"data of {name!r}")
        data = np.frombuffer(raw, dtype=np_dtype).reshape(dims).copy()
        archive.add(name, Tensor(data, qparams=qparams))
    if r.pos != len(buf):
        raise ArchiveFormatError("trailing bytes after last tensor", r.pos)
    return archive


def archive_save(archive: TensorArchive, path) -> None:
    with open(path, "wb") as f:
        f.write(archive_write(archive))


def archive_load(path) -> TensorArchive:
    with open(path, "rb") as f:
        return archive_read(f.read())
