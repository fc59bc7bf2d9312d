"""Group-wise RTN and sign-binarization quantizers with bit packing.

All single-group operations treat the LAST axis of their input as the group, so
the same code quantizes one group (1-D input) or a stack of equally sized groups
(2-D input, one group per row).
"""

import logging
import math

import numpy as np
from numpy.typing import NDArray

from lorapack.errors import QuantizationError
from lorapack.models import (
    GroupBinParams,
    GroupRtnParams,
    Matrix,
    Orientation,
    QuantizedMatrix,
    Scheme,
    as_matrix,
)

logger = logging.getLogger(__name__)

# Minimum range used for degenerate (constant) groups.
RANGE_EPSILON = 1e-12

# Smallest positive binary16 value (subnormal).
_F16_TINY = np.float16(2.0**-24)

MAX_RTN_BITS = 8


def round_half_away(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Round to nearest integer, ties away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _scale_to_f16(scale: NDArray[np.float64], levels: int) -> NDArray[np.float16]:
    # Rounding down keeps span / S >= q_max - q_min, so the group maximum lands on
    # q_max and re-quantizing a dequantized group is the identity. Below the
    # binary16 normal range the downward step can exceed 1 / (2 * levels) of S,
    # which would push clipped elements past S; those scales round up instead.
    if np.any(np.asarray(scale) > float(np.finfo(np.float16).max)):
        raise QuantizationError("Group range exceeds the binary16 scale range")
    scale = np.asarray(scale, dtype=np.float64)
    nearest = scale.astype(np.float16)
    down = np.where(nearest.astype(np.float64) > scale, np.nextafter(nearest, np.float16(0)), nearest)
    up = np.where(nearest.astype(np.float64) < scale, np.nextafter(nearest, np.float16(np.inf)), nearest)
    down64 = down.astype(np.float64)
    too_coarse = 2 * levels * (scale - down64) > down64
    scale16 = np.where(too_coarse, up, down)
    return np.maximum(scale16, _F16_TINY).astype(np.float16)


def _check_rtn_bits(bits: int) -> None:
    if not 1 <= bits <= MAX_RTN_BITS:
        raise QuantizationError(f"RTN bits must lie in [1, {MAX_RTN_BITS}], got {bits}")


def rtn_quantize(values: NDArray[np.floating], bits: int) -> tuple[NDArray[np.int64], GroupRtnParams]:
    """Round-to-nearest affine quantization of one group (or a stack of groups).

    The group range is widened to include 0 before S = (max - min) / (q_max - q_min)
    and Z = round(q_min - min / S), so Z always lies in the code domain and every
    element of a one-sided group stays within S of its reconstruction.
    code = clamp(round(v / S) + Z). S is stored as binary16 and the stored value is
    the one used for Z and the codes. An all-zero group uses a 1e-12 range.

    Raises:
        QuantizationError: If the scale does not fit binary16

    Args:
        values: Finite weights; the last axis is the group
        bits: Code width in [1, 8]

    Returns:
        Integer codes with the shape of ``values`` and the group parameters
    """
    _check_rtn_bits(bits)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise QuantizationError("Cannot quantize an empty group")
    if not np.all(np.isfinite(x)):
        raise QuantizationError("Group contains non-finite values")

    q_min, q_max = 0, (1 << bits) - 1
    vmin = np.minimum(x.min(axis=-1), 0.0)
    vmax = np.maximum(x.max(axis=-1), 0.0)
    span = np.maximum(vmax - vmin, RANGE_EPSILON)

    scale16 = _scale_to_f16(span / (q_max - q_min), q_max - q_min)
    scale = scale16.astype(np.float64)
    zero_point = np.clip(round_half_away(q_min - vmin / scale), q_min, q_max)
    codes = np.clip(round_half_away(x / scale[..., None]) + zero_point[..., None], q_min, q_max)

    params = GroupRtnParams(scale=scale16, zero_point=zero_point.astype(np.int64), bits=bits)
    return codes.astype(np.int64), params


def rtn_dequantize(codes: NDArray[np.integer], params: GroupRtnParams) -> NDArray[np.float32]:
    """Return S * (code - Z) per element, using the stored binary16 scale.

    Raises:
        QuantizationError: If any code lies outside [q_min, q_max]
    """
    c = np.asarray(codes, dtype=np.int64)
    if c.size and (c.min() < params.q_min or c.max() > params.q_max):
        raise QuantizationError(
            f"RTN code out of range [{params.q_min}, {params.q_max}] for {params.bits} bits"
        )
    scale = np.asarray(params.scale, dtype=np.float64)[..., None]
    zero_point = np.asarray(params.zero_point, dtype=np.int64)[..., None]
    return (scale * (c - zero_point)).astype(np.float32)


def bin_quantize(values: NDArray[np.floating]) -> tuple[NDArray[np.int8], GroupBinParams]:
    """Sign binarization with the Frobenius-optimal scale S = mean |v|.

    sign(0) is +1.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise QuantizationError("Cannot binarize an empty group")
    if not np.all(np.isfinite(x)):
        raise QuantizationError("Group contains non-finite values")
    signs = np.where(x >= 0, 1, -1).astype(np.int8)
    scale = np.abs(x).mean(axis=-1).astype(np.float16)
    if not np.all(np.isfinite(scale)):
        raise QuantizationError("Group mean |v| exceeds the binary16 scale range")
    return signs, GroupBinParams(scale=scale)


def bin_dequantize(signs: NDArray[np.integer], params: GroupBinParams) -> NDArray[np.float32]:
    """Return S * sign per element."""
    s = np.asarray(signs)
    if s.size and not np.all((s == 1) | (s == -1)):
        raise QuantizationError("Binary codes must be -1 or +1")
    scale = np.asarray(params.scale, dtype=np.float64)[..., None]
    return (scale * s).astype(np.float32)


def pack_bits(codes: NDArray[np.integer], bits: int) -> bytes:
    """Pack non-negative codes LSB-first, little-endian across bytes.

    Codes may straddle byte boundaries; the final byte is zero-padded.

    Example:
        >>> pack_bits(np.array([3, 0, 1, 2]), 2)
        b'\\x93'
    """
    if not 1 <= bits <= 32:
        raise QuantizationError(f"bits must lie in [1, 32], got {bits}")
    c = np.asarray(codes).ravel()
    if c.size == 0:
        return b""
    if not np.issubdtype(c.dtype, np.integer) and c.dtype != np.bool_:
        raise QuantizationError(f"Codes must be integers, got {c.dtype}")
    c = c.astype(np.int64)
    if c.min() < 0 or c.max() >= (1 << bits):
        raise QuantizationError(f"Code overflow: values must lie in [0, {(1 << bits) - 1}]")
    shifts = np.arange(bits, dtype=np.uint64)
    bit_array = (c.astype(np.uint64)[:, None] >> shifts) & np.uint64(1)
    return np.packbits(bit_array.astype(np.uint8).ravel(), bitorder="little").tobytes()


def unpack_bits(data: bytes, bits: int, n: int) -> NDArray[np.int64]:
    """Inverse of pack_bits for ``n`` codes.

    Raises:
        QuantizationError: If ``data`` holds fewer than ceil(n * bits / 8) bytes
    """
    if not 1 <= bits <= 32:
        raise QuantizationError(f"bits must lie in [1, 32], got {bits}")
    if n < 0:
        raise QuantizationError(f"Code count must be non-negative, got {n}")
    needed = math.ceil(n * bits / 8)
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size < needed:
        raise QuantizationError(f"Truncated bit stream: need {needed} bytes, got {raw.size}")
    bit_array = np.unpackbits(raw[:needed], bitorder="little")[: n * bits].reshape(n, bits)
    weights = np.uint64(1) << np.arange(bits, dtype=np.uint64)
    return (bit_array.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64).astype(np.int64)


def _group_starts(length: int, group_size: int) -> range:
    return range(0, length, group_size)


def fake_quantize(
    values: NDArray[np.floating], scheme: Scheme, bits: int, group_size: int
) -> NDArray[np.float32]:
    """Quantize then dequantize a 1-D vector in contiguous groups.

    Matches dequantize_matrix(quantize_matrix(...)) on a single column or row.
    """
    x = np.asarray(values, dtype=np.float32)
    if scheme is Scheme.PASSTHROUGH or x.size == 0:
        return x.copy()
    out = np.empty(x.shape, dtype=np.float32)
    for start in _group_starts(x.shape[0], group_size):
        block = x[start : start + group_size]
        if scheme is Scheme.RTN:
            codes, rtn_params = rtn_quantize(block, bits)
            out[start : start + group_size] = rtn_dequantize(codes, rtn_params)
        else:
            signs, bin_params = bin_quantize(block)
            out[start : start + group_size] = bin_dequantize(signs, bin_params)
    return out


def _as_lines(matrix: NDArray[np.generic], orientation: Orientation) -> NDArray[np.generic]:
    return matrix.T if orientation is Orientation.COLUMN else matrix


def quantize_matrix(
    M: Matrix,
    scheme: Scheme,
    bits: int,
    group_size: int,
    orientation: Orientation,
) -> QuantizedMatrix:
    """Quantize a matrix group-wise along columns or rows.

    Each line is cut into contiguous groups of ``group_size`` (the last one may
    be shorter); groups never span lines.

    Args:
        M: Finite binary32 matrix
        scheme: RTN, BINARY (bits must be 1) or PASSTHROUGH (stored as binary32)
        bits: Code width
        group_size: Weights per group, >= 1
        orientation: COLUMN groups run down columns, ROW groups along rows

    Returns:
        The packed QuantizedMatrix
    """
    M = as_matrix(M)
    rows, cols = M.shape
    if group_size < 1:
        raise QuantizationError(f"group_size must be >= 1, got {group_size}")

    if scheme is Scheme.PASSTHROUGH:
        return QuantizedMatrix(
            rows=rows,
            cols=cols,
            scheme=scheme,
            bits=32,
            group_size=group_size,
            orientation=orientation,
            packed_codes=M.astype("<f4").tobytes(),
            scales=np.empty(0, dtype=np.float16),
        )
    if scheme is Scheme.BINARY and bits != 1:
        raise QuantizationError(f"Binary scheme requires bits == 1, got {bits}")
    if scheme is Scheme.RTN:
        _check_rtn_bits(bits)

    lines = np.ascontiguousarray(_as_lines(M, orientation))
    line_count, length = lines.shape
    groups_per_line = math.ceil(length / group_size) if length else 0

    codes = np.empty(lines.shape, dtype=np.int64)
    scales = np.empty((line_count, groups_per_line), dtype=np.float16)
    zero_points = np.empty((line_count, groups_per_line), dtype=np.int64)

    if line_count:
        for j, start in enumerate(_group_starts(length, group_size)):
            block = lines[:, start : start + group_size]
            if scheme is Scheme.RTN:
                block_codes, rtn_params = rtn_quantize(block, bits)
                scales[:, j] = rtn_params.scale
                zero_points[:, j] = rtn_params.zero_point
            else:
                signs, bin_params = bin_quantize(block)
                block_codes = (signs > 0).astype(np.int64)
                scales[:, j] = bin_params.scale
            codes[:, start : start + group_size] = block_codes

    row_major = _as_lines(codes, orientation)
    return QuantizedMatrix(
        rows=rows,
        cols=cols,
        scheme=scheme,
        bits=bits,
        group_size=group_size,
        orientation=orientation,
        packed_codes=pack_bits(row_major.ravel(), bits),
        scales=scales.ravel(),
        zero_points=zero_points.ravel() if scheme is Scheme.RTN else None,
    )


def dequantize_matrix(Q: QuantizedMatrix) -> Matrix:
    """Invert the group layout of a QuantizedMatrix and dequantize it.

    Raises:
        QuantizationError: If the packed stream or the group parameters do not
            match the declared shape
    """
    if len(Q.packed_codes) != Q.packed_length:
        raise QuantizationError(
            f"Corrupt packing length: expected {Q.packed_length} bytes, got {len(Q.packed_codes)}"
        )
    if Q.scheme is Scheme.PASSTHROUGH:
        values = np.frombuffer(Q.packed_codes, dtype="<f4").reshape(Q.rows, Q.cols)
        return values.astype(np.float32)
    if Q.scales.size != Q.group_count:
        raise QuantizationError(f"Expected {Q.group_count} scales, got {Q.scales.size}")
    if Q.scheme is Scheme.RTN and (Q.zero_points is None or Q.zero_points.size != Q.group_count):
        raise QuantizationError(f"Expected {Q.group_count} zero points")

    codes = unpack_bits(Q.packed_codes, Q.bits, Q.element_count).reshape(Q.rows, Q.cols)
    lines = _as_lines(codes, Q.orientation)
    out = np.empty(lines.shape, dtype=np.float32)
    scales = Q.scales.reshape(Q.line_count, Q.groups_per_line)
    zero_points = None
    if Q.zero_points is not None:
        zero_points = Q.zero_points.reshape(Q.line_count, Q.groups_per_line)

    for j, start in enumerate(_group_starts(Q.line_length, Q.group_size)):
        block = lines[:, start : start + Q.group_size]
        if zero_points is not None:
            params = GroupRtnParams(scale=scales[:, j], zero_point=zero_points[:, j], bits=Q.bits)
            out[:, start : start + Q.group_size] = rtn_dequantize(block, params)
        else:
            signs = np.where(block == 1, 1, -1)
            out[:, start : start + Q.group_size] = bin_dequantize(
                signs, GroupBinParams(scale=scales[:, j])
            )

    return np.ascontiguousarray(_as_lines(out, Q.orientation))
