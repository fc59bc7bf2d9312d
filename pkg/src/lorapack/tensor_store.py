"""Adapter containers (.qla) and quantized artifacts (.lqz) in safetensors files.

Both formats are plain safetensors files written and parsed by the
``safetensors`` package. A .lqz file also stores its run configuration, its
metadata and every matrix layout as one sorted-key JSON string under the
"__lqz__" entry of "__metadata__", so equal inputs always produce equal bytes.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from numpy.typing import NDArray
from safetensors import SafetensorError, safe_open
from safetensors.numpy import save, save_file

from lorapack import FORMAT_VERSION
from lorapack.errors import ConfigError, ContainerFormatError, QuantizationError
from lorapack.models import (
    LORA_A_SUFFIX,
    LORA_B_SUFFIX,
    AdapterContainer,
    LoraAdapter,
    Orientation,
    QuantConfig,
    QuantizedAdapter,
    QuantizedContainer,
    QuantizedMatrix,
    Scheme,
)
from lorapack.quant.quantizers import pack_bits, unpack_bits

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LQZ_KEY = "__lqz__"

# Storage dtype code -> little-endian numpy dtype
ADAPTER_DTYPES = {"F16": np.dtype("<f2"), "F32": np.dtype("<f4")}

ROLES = ("B_high", "A_high", "B_low", "A_low")
CODES_SUFFIX = ".codes"
SCALES_SUFFIX = ".scales"
ZEROS_SUFFIX = ".zeros"


@dataclass
class RawFile:
    """A parsed file: tensors by name, the text metadata and the .lqz layout if any."""

    tensors: dict[str, NDArray[Any]] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    layout: Optional[dict[str, Any]] = None
    header_bytes: int = 0


def write_tensors(
    path: PathLike,
    tensors: dict[str, NDArray[Any]],
    metadata: dict[str, str],
    layout: Optional[dict[str, Any]] = None,
) -> int:
    """Write named arrays as a safetensors file.

    Args:
        path: Destination file
        tensors: Arrays by tensor name
        metadata: Text-to-text map stored under "__metadata__"
        layout: .lqz layout table, stored as JSON under "__lqz__"

    Returns:
        Number of bytes written
    """
    if LQZ_KEY in metadata:
        raise ContainerFormatError(f"{LQZ_KEY} is a reserved metadata key")
    text = dict(metadata)
    if layout is not None:
        text[LQZ_KEY] = json.dumps(layout, sort_keys=True, separators=(",", ":"))
    arrays = {name: np.ascontiguousarray(array) for name, array in tensors.items()}
    try:
        save_file(arrays, str(path), metadata=text)
    except SafetensorError as e:
        raise ContainerFormatError(f"Cannot write {path}: {e}") from e
    size = Path(path).stat().st_size
    logger.debug(f"Wrote {len(arrays)} tensor(s), {size} bytes to {path}")
    return size


def read_tensors(path: PathLike) -> RawFile:
    """Load every tensor, the metadata and the .lqz layout of a file.

    Raises:
        ContainerFormatError: If safetensors rejects the file or the layout is not JSON
        OSError: If the file cannot be read
    """
    path = Path(path)
    size = path.stat().st_size
    try:
        with safe_open(str(path), framework="numpy") as f:
            metadata = dict(f.metadata() or {})
            tensors = {name: f.get_tensor(name) for name in f.keys()}
    except SafetensorError as e:
        raise ContainerFormatError(f"Malformed header in {path}: {e}") from e

    layout = None
    if LQZ_KEY in metadata:
        try:
            layout = json.loads(metadata.pop(LQZ_KEY))
        except json.JSONDecodeError as e:
            raise ContainerFormatError(f"Malformed {LQZ_KEY} layout in {path}: {e}") from e
    payload = sum(int(t.nbytes) for t in tensors.values())
    return RawFile(tensors=tensors, metadata=metadata, layout=layout, header_bytes=size - payload)


def _layer_of(name: str) -> tuple[str, str]:
    for suffix in (LORA_B_SUFFIX, LORA_A_SUFFIX):
        if name.endswith(suffix) and len(name) > len(suffix):
            return name[: -len(suffix)], suffix
    raise ContainerFormatError(
        f"Unrecognized tensor name {name!r}: expected '<layer>{LORA_B_SUFFIX}' or '<layer>{LORA_A_SUFFIX}'"
    )


def read_container(path: PathLike) -> AdapterContainer:
    """Read a .qla file and pair its factors by shared layer prefix.

    Values stored as binary16 or binary32 are widened to binary32.

    Args:
        path: .qla file

    Returns:
        AdapterContainer with adapters in lexicographic layer order

    Raises:
        ContainerFormatError: Malformed file, dtype other than F16/F32,
            unpaired tensor, non-2-D tensor or B.cols != A.rows
    """
    raw = read_tensors(path)
    if raw.layout is not None:
        raise ContainerFormatError(f"{path} is a quantized .lqz artifact, not an adapter container")

    pairs: dict[str, dict[str, NDArray[Any]]] = {}
    for name, tensor in raw.tensors.items():
        if tensor.dtype not in ADAPTER_DTYPES.values():
            raise ContainerFormatError(f"Tensor {name} has dtype {tensor.dtype}; expected F16 or F32")
        if tensor.ndim != 2:
            raise ContainerFormatError(f"Tensor {name} must be 2-D, got shape {list(tensor.shape)}")
        layer, suffix = _layer_of(name)
        pairs.setdefault(layer, {})[suffix] = tensor

    adapters = []
    for layer in sorted(pairs):
        factors = pairs[layer]
        missing = [s for s in (LORA_B_SUFFIX, LORA_A_SUFFIX) if s not in factors]
        if missing:
            present = f"{layer}{next(iter(factors))}"
            raise ContainerFormatError(f"Unpaired tensor {present}: no {layer}{missing[0]}")
        b = factors[LORA_B_SUFFIX].astype(np.float32)
        a = factors[LORA_A_SUFFIX].astype(np.float32)
        try:
            adapters.append(LoraAdapter(layer, b, a))
        except ValueError as e:
            raise ContainerFormatError(str(e)) from e

    logger.debug(f"Read {len(adapters)} adapter(s) from {path}")
    return AdapterContainer(adapters=adapters, metadata=raw.metadata)


def write_container(container: AdapterContainer, path: PathLike, dtype: str = "F32") -> int:
    """Write adapters as a .qla file.

    binary16 storage narrows with round-to-nearest-even.

    Args:
        container: Adapters and metadata to store
        path: Destination file
        dtype: "F32" (exact) or "F16"

    Returns:
        Number of bytes written

    Raises:
        ConfigError: If dtype is not F16/F32
        ContainerFormatError: If a value is non-finite or overflows binary16
    """
    if dtype not in ADAPTER_DTYPES:
        raise ConfigError(f"Storage dtype must be F16 or F32, got {dtype!r}")
    tensors = {}
    for adapter in container.adapters:
        for suffix, matrix in ((LORA_B_SUFFIX, adapter.B), (LORA_A_SUFFIX, adapter.A)):
            name = f"{adapter.layer_name}{suffix}"
            if not np.all(np.isfinite(matrix)):
                raise ContainerFormatError(f"Tensor {name} contains non-finite values")
            with np.errstate(over="ignore"):
                stored = matrix.astype(ADAPTER_DTYPES[dtype])
            if not np.all(np.isfinite(stored)):
                raise ContainerFormatError(f"Tensor {name} overflows {dtype}")
            tensors[name] = stored
    return write_tensors(path, tensors, container.metadata)


def collect_lora_pairs(container: AdapterContainer) -> list[LoraAdapter]:
    """Adapters of ``container`` in lexicographic layer-name order."""
    return sorted(container.adapters, key=lambda adapter: adapter.layer_name)


def _matrix_tensors(prefix: str, q: QuantizedMatrix) -> dict[str, NDArray[Any]]:
    out = {f"{prefix}{CODES_SUFFIX}": np.frombuffer(q.packed_codes, dtype=np.uint8)}
    if q.scheme is not Scheme.PASSTHROUGH:
        out[f"{prefix}{SCALES_SUFFIX}"] = np.asarray(q.scales, dtype="<f2")
    if q.scheme is Scheme.RTN:
        if q.zero_points is None:
            raise QuantizationError(f"{prefix} is RTN-coded but has no zero points")
        zeros = pack_bits(q.zero_points, q.bits)
        out[f"{prefix}{ZEROS_SUFFIX}"] = np.frombuffer(zeros, dtype=np.uint8)
    return out


def write_quantized(path: PathLike, artifact: QuantizedContainer) -> int:
    """Write a .lqz artifact.

    Per matrix the payload holds the packed code stream, the binary16 scales
    and (RTN only) the zero points bit-packed at the code width, all as flat
    tensors. The "__lqz__" layout records the configuration, the metadata and
    every matrix layout.

    Returns:
        Number of bytes written
    """
    tensors: dict[str, NDArray[Any]] = {}
    layers: dict[str, Any] = {}
    for q in artifact.adapters:
        matrices: dict[str, Any] = {}
        for role, matrix in q.matrices():
            matrices[role] = matrix.describe()
            tensors.update(_matrix_tensors(f"{q.layer_name}.{role}", matrix))
        layers[q.layer_name] = {
            "h": q.h,
            "rows": q.rows,
            "cols": q.cols,
            "rank": q.rank,
            "matrices": matrices,
        }
    layout = {
        "format_version": FORMAT_VERSION,
        "config": artifact.config.to_json_dict(),
        "metadata": dict(artifact.metadata),
        "layers": layers,
    }
    return write_tensors(path, tensors, {}, layout)


def _require(mapping: dict[str, Any], key: str, kind: type, where: str) -> Any:
    value = mapping.get(key)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is int:
        raise ContainerFormatError(f"Missing or invalid {key!r} in {where}")
    return value


def _read_matrix(
    raw: RawFile, prefix: str, layout: Any, claimed: set[str]
) -> QuantizedMatrix:
    if not isinstance(layout, dict):
        raise ContainerFormatError(f"Layout of {prefix} is not an object")
    try:
        scheme = Scheme(layout.get("scheme"))
        orientation = Orientation(layout.get("orientation"))
    except ValueError as e:
        raise ContainerFormatError(f"Invalid layout of {prefix}: {e}") from e

    def tensor(suffix: str, dtype: str) -> NDArray[Any]:
        name = f"{prefix}{suffix}"
        if name not in raw.tensors:
            raise ContainerFormatError(f"Missing tensor {name}")
        array = raw.tensors[name]
        if array.dtype != np.dtype(dtype) or array.ndim != 1:
            raise ContainerFormatError(
                f"Tensor {name} must be a flat {np.dtype(dtype)} array, got {array.dtype}{list(array.shape)}"
            )
        claimed.add(name)
        return array

    q = QuantizedMatrix(
        rows=_require(layout, "rows", int, prefix),
        cols=_require(layout, "cols", int, prefix),
        scheme=scheme,
        bits=_require(layout, "bits", int, prefix),
        group_size=_require(layout, "group_size", int, prefix),
        orientation=orientation,
        packed_codes=tensor(CODES_SUFFIX, "u1").tobytes(),
        scales=np.empty(0, dtype=np.float16),
    )
    if q.group_size < 1 or q.bits < 1:
        raise ContainerFormatError(f"Invalid bits/group_size for {prefix}")
    if len(q.packed_codes) != q.packed_length:
        raise ContainerFormatError(
            f"Corrupt packing length for {prefix}: expected {q.packed_length} bytes, "
            f"got {len(q.packed_codes)}"
        )
    if scheme is Scheme.PASSTHROUGH:
        return q

    scales = tensor(SCALES_SUFFIX, "<f2").astype(np.float16)
    if scales.size != q.group_count:
        raise ContainerFormatError(f"{prefix} stores {scales.size} scales, expected {q.group_count}")
    q.scales = scales
    if scheme is Scheme.RTN:
        zeros = tensor(ZEROS_SUFFIX, "u1").tobytes()
        try:
            q.zero_points = unpack_bits(zeros, q.bits, q.group_count)
        except QuantizationError as e:
            raise ContainerFormatError(f"Corrupt zero points for {prefix}: {e}") from e
        if len(zeros) != math.ceil(q.group_count * q.bits / 8):
            raise ContainerFormatError(f"Corrupt packing length for {prefix}{ZEROS_SUFFIX}")
    return q


def _text_map(value: Any, where: str) -> dict[str, str]:
    if not isinstance(value, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in value.items()
    ):
        raise ContainerFormatError(f"{where} must map text to text")
    return dict(value)


def read_quantized(path: PathLike) -> QuantizedContainer:
    """Read a .lqz artifact written by write_quantized.

    Raises:
        ContainerFormatError: On a malformed file, a missing or foreign "__lqz__"
            layout, tensors that do not match the recorded layout, or stray tensors
    """
    raw = read_tensors(path)
    lqz = raw.layout
    if not isinstance(lqz, dict):
        raise ContainerFormatError(f"{path} has no {LQZ_KEY} layout table")
    version = lqz.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"Unsupported .lqz format_version {version!r}")
    config_data = lqz.get("config")
    if not isinstance(config_data, dict):
        raise ContainerFormatError("Missing config in .lqz layout")
    try:
        config = QuantConfig.from_json_dict(config_data)
    except ConfigError as e:
        raise ContainerFormatError(f"Invalid config in .lqz layout: {e}") from e
    metadata = _text_map(lqz.get("metadata", {}), "metadata in .lqz layout")
    layers = lqz.get("layers")
    if not isinstance(layers, dict):
        raise ContainerFormatError("Missing layers in .lqz layout")

    claimed: set[str] = set()
    adapters = []
    for layer_name, entry in layers.items():
        if not isinstance(entry, dict):
            raise ContainerFormatError(f"Layer entry {layer_name} is not an object")
        matrices = _require(entry, "matrices", dict, layer_name)
        unknown = set(matrices) - set(ROLES)
        if unknown:
            raise ContainerFormatError(f"Unknown matrix role(s) {sorted(unknown)} in {layer_name}")
        decoded = {
            role: _read_matrix(raw, f"{layer_name}.{role}", layout, claimed)
            for role, layout in matrices.items()
        }
        try:
            adapters.append(
                QuantizedAdapter(
                    layer_name=layer_name,
                    rows=_require(entry, "rows", int, layer_name),
                    cols=_require(entry, "cols", int, layer_name),
                    rank=_require(entry, "rank", int, layer_name),
                    h=_require(entry, "h", int, layer_name),
                    config=config,
                    **decoded,
                )
            )
        except ValueError as e:
            if isinstance(e, ContainerFormatError):
                raise
            raise ContainerFormatError(str(e)) from e

    stray = sorted(set(raw.tensors) - claimed)
    if stray:
        raise ContainerFormatError(f"Tensors not described by the layout: {', '.join(stray)}")
    logger.debug(f"Read {len(adapters)} quantized layer(s) from {path}")
    return QuantizedContainer(config=config, adapters=adapters, metadata=metadata)


def adapter_header_bytes(shapes: list[tuple[str, int, int, int]], dtype: str = "F16") -> int:
    """Header bytes (length prefix, JSON and padding) of a .qla with these layers.

    Args:
        shapes: (layer_name, m, n, r) per layer
        dtype: Storage dtype recorded in the header
    """
    tensors: dict[str, NDArray[Any]] = {}
    for layer, m, n, r in shapes:
        tensors[f"{layer}{LORA_B_SUFFIX}"] = np.zeros((m, r), dtype=ADAPTER_DTYPES[dtype])
        tensors[f"{layer}{LORA_A_SUFFIX}"] = np.zeros((r, n), dtype=ADAPTER_DTYPES[dtype])
    payload = sum(int(t.nbytes) for t in tensors.values())
    return len(save(tensors, metadata={})) - payload
