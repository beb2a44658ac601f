import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swinq.tensor import (
    ArchiveFormatError,
    QuantParams,
    ShapeError,
    Tensor,
    TensorArchive,
    archive_read,
    archive_write,
    gelu,
    layernorm,
    matmul,
    softmax,
)


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32)
        assert np.array_equal(matmul(np.eye(3, dtype=np.float32), a), a)

    def test_zeros(self):
        b = np.random.default_rng(1).standard_normal((3, 4)).astype(np.float32)
        out = matmul(np.zeros((2, 3), np.float32), b)
        assert out.shape == (2, 4)
        assert np.all(out == 0)

    def test_hand_case_against_triple_loop(self):
        a = np.array([[1, 2, 3], [4, 5, 6]], dtype=np.float32)
        b = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.float32)
        expected = np.zeros((2, 2), np.float32)
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    expected[i, j] += a[i, k] * b[k, j]
        out = matmul(a, b)
        assert np.array_equal(out, np.array([[4, 5], [10, 11]], np.float32))
        assert np.array_equal(out, expected)

    def test_identity_associativity(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((4, 5)).astype(np.float32)
        b = rng.standard_normal((5, 3)).astype(np.float32)
        assert np.array_equal(matmul(matmul(a, np.eye(5, dtype=np.float32)), b), matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3), np.float32), np.zeros((4, 2), np.float32))

    def test_f32_dtype_preserved(self):
        out = matmul(np.ones((2, 2), np.float32), np.ones((2, 2), np.float32))
        assert out.dtype == np.float32


class TestSoftmax:
    def test_constant_row_is_uniform(self):
        out = softmax(np.full(4, 3.7, dtype=np.float32))
        assert np.allclose(out, 0.25, atol=1e-7)

    def test_shift_invariance(self):
        x = np.random.default_rng(3).standard_normal(8).astype(np.float32)
        assert np.allclose(softmax(x), softmax(x + 100.0), atol=1e-6)

    def test_closed_form(self):
        out = softmax(np.array([0.0, math.log(2.0)], dtype=np.float32))
        assert np.allclose(out, [1 / 3, 2 / 3], atol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rows_sum_to_one(self, seed):
        x = np.random.default_rng(seed).uniform(-50, 50, size=(5, 9)).astype(np.float32)
        sums = softmax(x, axis=-1).sum(axis=-1)
        assert np.all(np.abs(sums - 1.0) <= 1e-6)

    def test_nan_propagates(self):
        out = softmax(np.array([0.0, np.nan], dtype=np.float32))
        assert np.all(np.isnan(out))


class TestLayernorm:
    def test_constant_slice_gives_zeros(self):
        x = np.full((3, 5), 2.5, dtype=np.float32)
        out = layernorm(x, np.ones(5, np.float32), np.zeros(5, np.float32))
        assert np.allclose(out, 0.0, atol=1e-5)

    def test_two_point_closed_form(self):
        out = layernorm(
            np.array([1.0, 3.0], np.float32),
            np.ones(2, np.float32), np.zeros(2, np.float32), eps=1e-12,
        )
        assert np.allclose(out, [-1.0, 1.0], atol=1e-5)

    def test_beta_shift(self):
        x = np.array([[0.0, 1.0, 2.0]], np.float32)
        beta = np.array([5.0, 5.0, 5.0], np.float32)
        base = layernorm(x, np.ones(3, np.float32), np.zeros(3, np.float32))
        assert np.allclose(layernorm(x, np.ones(3, np.float32), beta), base + 5.0, atol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_normalized_moments(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 16)).astype(np.float32) * 3 + 1
        out = layernorm(x, np.ones(16, np.float32), np.zeros(16, np.float32))
        assert np.all(np.abs(out.mean(axis=-1)) <= 1e-5)
        assert np.all(np.abs(out.var(axis=-1) - 1.0) <= 1e-4)


class TestGelu:
    def test_zero(self):
        assert gelu(np.float32(0.0)) == 0.0

    def test_large_input_asymptote(self):
        assert abs(float(gelu(np.float32(10.0))) - 10.0) <= 1e-6

    def test_erf_value_at_one(self):
        # x * Phi(x) at 1: Phi(1) = 0.841344746...
        assert abs(float(gelu(np.float32(1.0))) - 0.8413447) <= 1e-5

    def test_negative_tail(self):
        assert abs(float(gelu(np.float32(-10.0)))) <= 1e-6


def _quantized_tensor(rng):
    qp = QuantParams(scheme="affine", bits=8, scale=0.05, zero_point=12)
    return Tensor(rng.integers(0, 255, size=(3, 2), dtype=np.uint8).astype(np.uint8), qparams=qp)


class TestTensorType:
    def test_quantized_requires_qparams(self):
        with pytest.raises(ValueError, match="quantization parameters"):
            Tensor(np.zeros((2, 2), np.int8))

    def test_f16_rounding_is_nearest_even(self):
        t = Tensor.f16_from_f32(np.array([1.0009765625], np.float32))
        # halfway between 1.0 and 1.0009765625's f16 neighbors rounds to even
        assert t.data.dtype == np.float16

    def test_positive_extents_enforced(self):
        with pytest.raises(ValueError, match="extents"):
            Tensor(np.zeros((0, 3), np.float32))

    def test_immutable(self):
        t = Tensor.f32(np.zeros(3))
        with pytest.raises(ValueError):
            t.data[0] = 1.0


class TestQuantParamsInvariants:
    def test_symmetric_requires_zero_zp(self):
        with pytest.raises(ValueError):
            QuantParams(scheme="symmetric", bits=8, scale=0.1, zero_point=3)

    def test_log2_requires_unit_scale(self):
        with pytest.raises(ValueError):
            QuantParams(scheme="log2", bits=4, scale=0.5, zero_point=0)

    def test_scale_positive(self):
        with pytest.raises(ValueError):
            QuantParams(scheme="affine", bits=8, scale=0.0, zero_point=0)


class TestArchive:
    def test_empty_archive_is_header_only(self):
        blob = archive_write(TensorArchive())
        assert blob == b"SWTA" + (1).to_bytes(4, "little") + (0).to_bytes(4, "little")
        assert len(blob) == 12

    def test_single_f32_payload_size(self):
        archive = TensorArchive()
        archive.add("w", Tensor.f32(np.arange(4, dtype=np.float32).reshape(2, 2)))
        blob = archive_write(archive)
        # header 12 + name(2+1) + dtype/ndim 2 + dims 8 + qflag 1 + 16 payload
        assert len(blob) == 12 + 3 + 2 + 8 + 1 + 16
        assert blob[-16:] == np.arange(4, dtype="<f4").tobytes()

    def test_round_trip_identity(self):
        rng = np.random.default_rng(0)
        archive = TensorArchive()
        archive.add("a", Tensor.f32(rng.standard_normal((2, 3))))
        archive.add("b", Tensor.f16_from_f32(rng.standard_normal(5)))
        archive.add("q", _quantized_tensor(rng))
        blob = archive_write(archive)
        again = archive_read(blob)
        assert archive_write(again) == blob
        assert again.get("q").qparams == archive.get("q").qparams

    def test_bad_magic(self):
        with pytest.raises(ArchiveFormatError, match="magic"):
            archive_read(b"NOPE" + b"\x00" * 8)

    def test_truncated_payload_reports_offset(self):
        archive = TensorArchive()
        archive.add("w", Tensor.f32(np.zeros((2, 2))))
        blob = archive_write(archive)
        with pytest.raises(ArchiveFormatError, match="offset") as err:
            archive_read(blob[:-3])
        assert err.value.offset > 0

    def test_duplicate_names_rejected(self):
        archive = TensorArchive()
        archive.add("w", Tensor.f32(np.zeros(2)))
        with pytest.raises(ValueError, match="duplicate"):
            archive.add("w", Tensor.f32(np.zeros(2)))

    def test_trailing_garbage_rejected(self):
        blob = archive_write(TensorArchive()) + b"x"
        with pytest.raises(ArchiveFormatError, match="trailing"):
            archive_read(blob)


_dtypes = st.sampled_from(["f32", "f16", "i8", "u8", "i32"])


@st.composite
def tensors(draw):
    dtype = draw(_dtypes)
    shape = tuple(draw(st.lists(st.integers(1, 4), min_size=1, max_size=3)))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    if dtype in ("f32", "f16"):
        data = rng.standard_normal(shape).astype(np.float32)
        return Tensor.f16_from_f32(data) if dtype == "f16" else Tensor(data)
    if dtype == "i32":
        return Tensor(rng.integers(-1000, 1000, size=shape, dtype=np.int32))
    qp = QuantParams(
        scheme=draw(st.sampled_from(["affine", "symmetric"])),
        bits=8,
        scale=draw(st.floats(1e-3, 10.0)),
        zero_point=0,
    )
    if dtype == "i8":
        return Tensor(rng.integers(-127, 128, size=shape, dtype=np.int8), qparams=qp)
    return Tensor(rng.integers(0, 256, size=shape, dtype=np.uint8), qparams=qp)


@given(st.lists(tensors(), min_size=0, max_size=10))
@settings(max_examples=40, deadline=None)
def test_archive_round_trip_bytes_identical(tensor_list):
    archive = TensorArchive()
    for i, t in enumerate(tensor_list):
        archive.add(f"tensor.{i}", t)
    blob = archive_write(archive)
    assert archive_write(archive_read(blob)) == blob
