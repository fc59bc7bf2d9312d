"""Average-bits accounting and multi-adapter memory projection.

Stored bits per matrix are its code bits (elements x bits), 16 bits per group
scale and, for RTN groups, ``bits`` per zero point. AvgBits divides the total
by the source adapter's (m + n) * r weights; container framing is excluded.
"""

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Optional, Union

from lorapack.errors import ConfigError, ContainerFormatError
from lorapack.models import (
    BitReport,
    LayerBits,
    Orientation,
    ProjectionPoint,
    QuantConfig,
    QuantizedAdapter,
    QuantizedMatrix,
    Scheme,
    Strategy,
)
from lorapack.tensor_store import CODES_SUFFIX, LQZ_KEY, SCALES_SUFFIX, ZEROS_SUFFIX, read_tensors

logger = logging.getLogger(__name__)

SCALE_BITS = 16
PASSTHROUGH_STORAGE_BITS = 32

# (rows, cols, rank) of one layer
LayerShape = tuple[int, int, int]


def matrix_bits(q: QuantizedMatrix) -> tuple[int, int, int]:
    """(code_bits, scale_bits, zero_point_bits) stored for one matrix."""
    groups = q.group_count
    zp_bits = groups * q.bits if q.scheme is Scheme.RTN else 0
    return q.code_bit_length, groups * SCALE_BITS, zp_bits


def layer_bits(q: QuantizedAdapter) -> LayerBits:
    """Bit accounting of one quantized layer."""
    code = scale = zp = 0
    for _, matrix in q.matrices():
        c, s, z = matrix_bits(matrix)
        code += c
        scale += s
        zp += z
    return LayerBits(
        layer_name=q.layer_name,
        weights=q.param_count,
        code_bits=code,
        scale_bits=scale,
        zp_bits=zp,
    )


def avg_bits(q: Union[QuantizedAdapter, Iterable[QuantizedAdapter]]) -> BitReport:
    """AvgBits of one quantized layer or a whole artifact.

    Layers are reported in name order, so the result does not depend on the
    order of the input.

    Args:
        q: A QuantizedAdapter or any iterable of them

    Returns:
        BitReport with per-layer rows and the pooled aggregate
    """
    adapters = [q] if isinstance(q, QuantizedAdapter) else list(q)
    layers = sorted((layer_bits(a) for a in adapters), key=lambda b: b.layer_name)
    return BitReport(layers=layers)


def avg_bits_by_artifact(artifacts: Mapping[str, Iterable[QuantizedAdapter]]) -> BitReport:
    """Per-artifact (per-task) subtotals plus the pooled aggregate over all of them.

    Layer rows are named '<artifact>/<layer>' so layers from different
    artifacts never collide.
    """
    layers: list[LayerBits] = []
    subtotals: dict[str, LayerBits] = {}
    for artifact, adapters in sorted(artifacts.items()):
        report = avg_bits(adapters)
        for bits in report.layers:
            layers.append(
                LayerBits(
                    layer_name=f"{artifact}/{bits.layer_name}",
                    weights=bits.weights,
                    code_bits=bits.code_bits,
                    scale_bits=bits.scale_bits,
                    zp_bits=bits.zp_bits,
                )
            )
        total = report.total
        total.layer_name = artifact
        subtotals[artifact] = total
    return BitReport(layers=layers, artifacts=subtotals)


def group_count(rows: int, cols: int, group_size: int, orientation: Orientation) -> int:
    """Number of quantization groups of a rows x cols matrix."""
    lines, length = (cols, rows) if orientation is Orientation.COLUMN else (rows, cols)
    if lines == 0 or length == 0:
        return 0
    return lines * math.ceil(length / group_size)


def _part_bits(
    rows: int,
    cols: int,
    scheme: Scheme,
    bits: int,
    group_size: int,
    orientation: Orientation,
) -> tuple[int, int, int]:
    elements = rows * cols
    if elements == 0:
        return 0, 0, 0
    if scheme is Scheme.PASSTHROUGH:
        return elements * PASSTHROUGH_STORAGE_BITS, 0, 0
    groups = group_count(rows, cols, group_size, orientation)
    zp = groups * bits if scheme is Scheme.RTN else 0
    return elements * bits, groups * SCALE_BITS, zp


def _schemes(cfg: QuantConfig) -> tuple[tuple[Scheme, int], Optional[tuple[Scheme, int]]]:
    """(scheme, bits) of the high part and of the low part (None when dropped)."""
    if cfg.strategy is Strategy.BASELINE_BIN:
        return (Scheme.BINARY, 1), None
    if cfg.strategy is Strategy.BASELINE_RTN:
        return (Scheme.RTN, cfg.bits_high), None

    high = (Scheme.PASSTHROUGH, PASSTHROUGH_STORAGE_BITS) if cfg.passthrough else (Scheme.RTN, cfg.bits_high)
    if cfg.strategy is Strategy.PRUNE:
        return high, None
    if cfg.strategy is Strategy.LOW_RTN1:
        return high, (Scheme.RTN, 1)
    return high, (Scheme.BINARY, 1)


def loraquant_bits(
    h_per_layer: Mapping[str, int],
    shapes: Mapping[str, LayerShape],
    cfg: QuantConfig,
) -> BitReport:
    """Closed-form accounting from the split ranks alone.

    The high part (m x h and h x n) carries bits_high RTN codes with scale and
    zero point per group; the low part ((r - h) components) carries 1-bit codes
    with a scale per group. Baselines use h = r. The result equals avg_bits of
    the corresponding artifact bit for bit.

    Args:
        h_per_layer: Split rank per layer name
        shapes: (m, n, r) per layer name
        cfg: Configuration the artifact was produced with

    Returns:
        BitReport computed without touching any weights

    Raises:
        ConfigError: If a layer lacks a shape or its h lies outside [0, r]
    """
    high, low = _schemes(cfg)
    layers: list[LayerBits] = []
    for name in sorted(h_per_layer):
        if name not in shapes:
            raise ConfigError(f"No shape given for layer {name}")
        m, n, r = shapes[name]
        h = r if cfg.strategy.is_baseline else h_per_layer[name]
        if not 0 <= h <= r:
            raise ConfigError(f"h={h} outside [0, {r}] for layer {name}")

        parts = [
            _part_bits(m, h, high[0], high[1], cfg.group_size, cfg.b_orientation),
            _part_bits(h, n, high[0], high[1], cfg.group_size, cfg.a_orientation),
        ]
        if low is not None:
            parts.append(_part_bits(m, r - h, low[0], low[1], cfg.group_size, cfg.b_orientation))
            parts.append(_part_bits(r - h, n, low[0], low[1], cfg.group_size, cfg.a_orientation))

        layers.append(
            LayerBits(
                layer_name=name,
                weights=(m + n) * r,
                code_bits=sum(p[0] for p in parts),
                scale_bits=sum(p[1] for p in parts),
                zp_bits=sum(p[2] for p in parts),
            )
        )
    return BitReport(layers=layers)


def fp16_bits(shapes: Iterable[LayerShape]) -> int:
    """Bits of an unquantized binary16 adapter with the given layer shapes."""
    return sum(16 * (m + n) * r for m, n, r in shapes)


def memory_projection(
    adapter_bits_total: int, count: int, base_bytes: int, header_bytes: int = 0
) -> int:
    """Bytes needed for the base model plus ``count`` adapters.

    Each adapter costs ceil(bits / 8) payload bytes plus ``header_bytes`` of
    container framing.

    Example:
        >>> memory_projection(8 * 1000, 3, 500, header_bytes=24)
        3572
    """
    if count < 0:
        raise ConfigError(f"Adapter count must be non-negative, got {count}")
    if adapter_bits_total < 0 or base_bytes < 0 or header_bytes < 0:
        raise ConfigError("Bit and byte sizes must be non-negative")
    per_adapter = -(-adapter_bits_total // 8) + header_bytes
    return base_bytes + count * per_adapter


def projection_curve(
    fp16_bits_total: int,
    quantized_bits_total: int,
    counts: Sequence[int],
    base_bytes: int,
    fp16_header_bytes: int = 0,
    quantized_header_bytes: int = 0,
) -> list[ProjectionPoint]:
    """Memory of fp16 and quantized adapters side by side for each N in ``counts``."""
    points = [
        ProjectionPoint(
            n_adapters=n,
            bytes_fp16=memory_projection(fp16_bits_total, n, base_bytes, fp16_header_bytes),
            bytes_quantized=memory_projection(
                quantized_bits_total, n, base_bytes, quantized_header_bytes
            ),
        )
        for n in counts
    ]
    logger.debug(f"Projected memory for {len(points)} adapter count(s)")
    return points


def _stream_bits(data: bytes, count: int, width: int, name: str) -> int:
    """Bits occupied by ``count`` codes of ``width`` bits, checking the zero padding."""
    stored = 8 * len(data)
    padding = stored - count * width
    if not 0 <= padding < 8:
        raise ContainerFormatError(
            f"{name} holds {len(data)} bytes for {count} codes of {width} bits"
        )
    if padding and data[-1] >> (8 - padding):
        raise ContainerFormatError(f"Non-zero padding bits in {name}")
    return stored - padding


def walk_payload(path: Union[str, Path]) -> BitReport:
    """Count stored bits from the payload byte ranges of a .lqz file.

    Scales are counted from the byte length of their binary16 tensors, zero
    points from the packed stream sized by that scale count, and codes from the
    packed stream with its zero padding removed. The result must equal
    avg_bits of the decoded artifact.

    Raises:
        ContainerFormatError: If a stream's length or padding disagrees with the header
    """
    raw = read_tensors(path)
    lqz = raw.layout
    if not isinstance(lqz, dict) or not isinstance(lqz.get("layers"), dict):
        raise ContainerFormatError(f"{path} has no {LQZ_KEY} layer table")

    def tensor_data(name: str) -> bytes:
        if name not in raw.tensors:
            raise ContainerFormatError(f"Missing tensor {name}")
        return raw.tensors[name].tobytes()

    layers: list[LayerBits] = []
    for layer_name, entry in sorted(lqz["layers"].items()):
        try:
            weights = (int(entry["rows"]) + int(entry["cols"])) * int(entry["rank"])
            matrices = dict(entry["matrices"])
        except (KeyError, TypeError, ValueError) as e:
            raise ContainerFormatError(f"Invalid layer entry {layer_name}: {e}") from e

        code = scale = zp = 0
        for role, layout in sorted(matrices.items()):
            prefix = f"{layer_name}.{role}"
            try:
                elements = int(layout["rows"]) * int(layout["cols"])
                width = int(layout["bits"])
            except (KeyError, TypeError, ValueError) as e:
                raise ContainerFormatError(f"Invalid layout of {prefix}: {e}") from e
            code += _stream_bits(tensor_data(prefix + CODES_SUFFIX), elements, width, prefix)
            if prefix + SCALES_SUFFIX in raw.tensors:
                scale_bytes = int(raw.tensors[prefix + SCALES_SUFFIX].nbytes)
                scale += 8 * scale_bytes
                if prefix + ZEROS_SUFFIX in raw.tensors:
                    groups = scale_bytes // 2
                    zp += _stream_bits(tensor_data(prefix + ZEROS_SUFFIX), groups, width, prefix)
        layers.append(LayerBits(layer_name, weights, code, scale, zp))

    logger.debug(f"Walked the payload of {len(layers)} layer(s) in {path}")
    return BitReport(layers=layers)
