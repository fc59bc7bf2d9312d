"""Data models for lorapack."""

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Optional

import numpy as np
from numpy.typing import NDArray

from lorapack import FORMAT_VERSION, __version__
from lorapack.errors import ConfigError

# A Matrix is a 2-D binary32 array in row-major order.
Matrix = NDArray[np.float32]

LORA_B_SUFFIX = ".lora_B"
LORA_A_SUFFIX = ".lora_A"

# bits_high value that stores the high sub-LoRA unquantized.
PASSTHROUGH_BITS = 16


class Scheme(Enum):
    """Quantization scheme of a single matrix."""

    RTN = "rtn"
    BINARY = "binary"
    PASSTHROUGH = "passthrough"


class Orientation(Enum):
    """Axis along which groups of contiguous weights are formed."""

    COLUMN = "column"
    ROW = "row"

    @classmethod
    def from_string(cls, value: str) -> "Orientation":
        """Parse 'col'/'column'/'row' (case-insensitive)."""
        value = value.strip().lower()
        if value in ("col", "column"):
            return cls.COLUMN
        if value == "row":
            return cls.ROW
        raise ConfigError(f"Invalid orientation: {value}")

    @property
    def short(self) -> str:
        """Short name used in sweep labels."""
        return "col" if self is Orientation.COLUMN else "row"


class Strategy(Enum):
    """How an adapter is split and quantized."""

    SVD_RATIO = "svd_ratio"
    SVD_STATIC_H = "svd_static_h"
    RANDOM_SPLIT = "random_split"
    NORM_SPLIT = "norm_split"
    PRUNE = "prune"
    LOW_RTN1 = "low_rtn1"
    BASELINE_RTN = "baseline_rtn"
    BASELINE_BIN = "baseline_bin"

    @property
    def is_baseline(self) -> bool:
        """Baselines quantize B and A directly, without any split."""
        return self in (Strategy.BASELINE_RTN, Strategy.BASELINE_BIN)

    @property
    def uses_seed(self) -> bool:
        """Only the random split consumes randomness."""
        return self is Strategy.RANDOM_SPLIT


def as_matrix(values: Any, name: str = "matrix") -> Matrix:
    """Coerce to a finite 2-D binary32 matrix.

    Raises:
        ValueError: If the input is not 2-D or contains NaN/Inf
    """
    array = np.ascontiguousarray(values, dtype=np.float32)
    if array.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite values")
    return array


@dataclass
class LoraAdapter:
    """A named pair of factor matrices B (m x r) and A (r x n)."""

    layer_name: str
    B: Matrix
    A: Matrix

    def __post_init__(self) -> None:
        """Validate factor shapes."""
        self.B = as_matrix(self.B, f"{self.layer_name}{LORA_B_SUFFIX}")
        self.A = as_matrix(self.A, f"{self.layer_name}{LORA_A_SUFFIX}")
        if self.B.shape[1] != self.A.shape[0]:
            raise ValueError(
                f"Shape mismatch for layer {self.layer_name}: "
                f"B is {self.B.shape}, A is {self.A.shape}"
            )
        r = self.B.shape[1]
        if r < 1 or r > min(self.B.shape[0], self.A.shape[1]):
            raise ValueError(
                f"Rank {r} of layer {self.layer_name} must lie in "
                f"[1, min({self.B.shape[0]}, {self.A.shape[1]})]"
            )

    @property
    def rows(self) -> int:
        """Output dimension m."""
        return int(self.B.shape[0])

    @property
    def cols(self) -> int:
        """Input dimension n."""
        return int(self.A.shape[1])

    @property
    def rank(self) -> int:
        """Inner rank r."""
        return int(self.B.shape[1])

    @property
    def param_count(self) -> int:
        """Number of adapter weights, (m + n) * r."""
        return (self.rows + self.cols) * self.rank


@dataclass
class AdapterContainer:
    """An ordered collection of adapters plus free-form text metadata."""

    adapters: list[LoraAdapter] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Enforce unique layer names and text-only metadata."""
        seen: set[str] = set()
        for adapter in self.adapters:
            if adapter.layer_name in seen:
                raise ValueError(f"Duplicate layer name: {adapter.layer_name}")
            seen.add(adapter.layer_name)
        for key, value in self.metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ValueError("Container metadata must map text to text")

    def __len__(self) -> int:
        return len(self.adapters)


@dataclass
class SvdFactors:
    """Rank-r truncated SVD of a product B @ A."""

    U: Matrix  # m x r, orthonormal columns
    singular_values: NDArray[np.float32]  # descending, non-negative
    V: Matrix  # n x r, orthonormal columns

    @property
    def rank(self) -> int:
        return int(self.singular_values.shape[0])


@dataclass
class SubLoraSplit:
    """An adapter reparameterized and split into high/low importance parts."""

    B_high: Matrix  # m x h
    A_high: Matrix  # h x n
    B_low: Matrix  # m x (r - h)
    A_low: Matrix  # (r - h) x n
    h: int
    singular_values: NDArray[np.float32]

    @property
    def rank(self) -> int:
        return int(self.B_high.shape[1] + self.B_low.shape[1])

    @property
    def rows(self) -> int:
        return int(self.B_high.shape[0])

    @property
    def cols(self) -> int:
        return int(self.A_high.shape[1])


@dataclass
class GroupRtnParams:
    """Per-group RTN parameters. Arrays share the leading (group) shape."""

    scale: NDArray[np.float16]
    zero_point: NDArray[np.int64]
    bits: int

    @property
    def q_min(self) -> int:
        return 0

    @property
    def q_max(self) -> int:
        return (1 << self.bits) - 1


@dataclass
class GroupBinParams:
    """Per-group binary scale S = mean |v|."""

    scale: NDArray[np.float16]


@dataclass
class QuantizedMatrix:
    """A bit-packed quantized matrix with its group parameters.

    Codes are packed in row-major element order. Groups are enumerated line by
    line (columns for COLUMN orientation, rows for ROW), then along the line.
    """

    rows: int
    cols: int
    scheme: Scheme
    bits: int
    group_size: int
    orientation: Orientation
    packed_codes: bytes
    scales: NDArray[np.float16]
    zero_points: Optional[NDArray[np.int64]] = None

    @property
    def line_count(self) -> int:
        """Number of lines along which groups are formed."""
        return self.cols if self.orientation is Orientation.COLUMN else self.rows

    @property
    def line_length(self) -> int:
        """Length of the group axis."""
        return self.rows if self.orientation is Orientation.COLUMN else self.cols

    @property
    def groups_per_line(self) -> int:
        if self.line_length == 0:
            return 0
        return math.ceil(self.line_length / self.group_size)

    @property
    def group_count(self) -> int:
        if self.scheme is Scheme.PASSTHROUGH:
            return 0
        return self.groups_per_line * self.line_count

    @property
    def element_count(self) -> int:
        return self.rows * self.cols

    @property
    def code_bit_length(self) -> int:
        """Bits occupied by codes before byte padding."""
        return self.element_count * self.bits

    @property
    def packed_length(self) -> int:
        """Expected byte length of the packed code stream."""
        return math.ceil(self.code_bit_length / 8)

    def describe(self) -> dict[str, Any]:
        """Header fields for the .lqz codec."""
        return {
            "rows": self.rows,
            "cols": self.cols,
            "scheme": self.scheme.value,
            "bits": self.bits,
            "group_size": self.group_size,
            "orientation": self.orientation.value,
        }


@dataclass
class OptConfig:
    """Configuration of the per-rank straight-through refinement."""

    steps: int = 100
    learning_rate: float = 1e-3
    scheme: Scheme = Scheme.RTN
    bits: int = 2
    group_size: int = 128

    def __post_init__(self) -> None:
        """Validate optimizer settings."""
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if self.scheme is Scheme.BINARY and self.bits != 1:
            raise ConfigError("binary scheme requires bits == 1")


@dataclass
class QuantConfig:
    """Full configuration of one quantization run.

    The defaults correspond to the 2@0.9 headline configuration.
    """

    rho: float = 0.9
    bits_high: int = 2
    bits_low: int = 1
    group_size: int = 128
    opt_steps: int = 100
    learning_rate: float = 1e-3
    strategy: Strategy = Strategy.SVD_RATIO
    static_h: Optional[int] = None
    seed: int = 0
    b_orientation: Orientation = Orientation.COLUMN
    a_orientation: Orientation = Orientation.ROW

    def __post_init__(self) -> None:
        """Validate the configuration."""
        if not (0.0 < self.rho <= 1.0):
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if self.bits_low != 1:
            raise ConfigError(f"bits_low must be 1, got {self.bits_low}")
        if self.strategy is Strategy.BASELINE_BIN:
            # sign binarization has no other width
            self.bits_high = 1
        elif self.strategy is Strategy.BASELINE_RTN:
            if not 1 <= self.bits_high <= 8:
                raise ConfigError(f"baseline_rtn bits must lie in [1, 8], got {self.bits_high}")
        elif self.bits_high not in (2, 3, 4, PASSTHROUGH_BITS):
            raise ConfigError(
                f"bits_high must be one of 2, 3, 4 (or {PASSTHROUGH_BITS}), got {self.bits_high}"
            )
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if self.opt_steps < 0:
            raise ConfigError(f"opt_steps must be non-negative, got {self.opt_steps}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.strategy is Strategy.SVD_STATIC_H and self.static_h is None:
            raise ConfigError("svd_static_h requires static_h")
        if self.static_h is not None and self.static_h < 0:
            raise ConfigError(f"static_h must be non-negative, got {self.static_h}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @property
    def passthrough(self) -> bool:
        """True when the high sub-LoRA is stored unquantized."""
        return self.bits_high == PASSTHROUGH_BITS and not self.strategy.is_baseline

    @property
    def label(self) -> str:
        """Short human label, e.g. '2@0.9' or 'norm_split(h=4)'."""
        if self.strategy is Strategy.SVD_RATIO:
            return f"{self.bits_high}@{self.rho:g}"
        if self.strategy is Strategy.BASELINE_RTN:
            return f"rtn{self.bits_high}"
        if self.strategy is Strategy.BASELINE_BIN:
            return "bin"
        if self.static_h is not None:
            return f"{self.strategy.value}(h={self.static_h})"
        return f"{self.strategy.value}({self.bits_high}@{self.rho:g})"

    def to_json_dict(self) -> dict[str, Any]:
        """Stable JSON form (enum values as strings)."""
        data = asdict(self)
        data["strategy"] = self.strategy.value
        data["b_orientation"] = self.b_orientation.value
        data["a_orientation"] = self.a_orientation.value
        data["label"] = self.label
        return data

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "QuantConfig":
        """Inverse of to_json_dict; unknown keys are ignored."""
        try:
            return cls(
                rho=float(data["rho"]),
                bits_high=int(data["bits_high"]),
                bits_low=int(data.get("bits_low", 1)),
                group_size=int(data["group_size"]),
                opt_steps=int(data["opt_steps"]),
                learning_rate=float(data["learning_rate"]),
                strategy=Strategy(data["strategy"]),
                static_h=None if data.get("static_h") is None else int(data["static_h"]),
                seed=int(data.get("seed", 0)),
                b_orientation=Orientation(data.get("b_orientation", "column")),
                a_orientation=Orientation(data.get("a_orientation", "row")),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Invalid stored config: {e}") from e


@dataclass
class QuantizedAdapter:
    """Quantized sub-LoRA factors of one layer, sufficient for reconstruction.

    A missing pair contributes zero: the low pair is absent when h == r or when
    it was pruned, the high pair when h == 0.
    """

    layer_name: str
    rows: int
    cols: int
    rank: int
    h: int
    config: QuantConfig
    B_high: Optional[QuantizedMatrix] = None
    A_high: Optional[QuantizedMatrix] = None
    B_low: Optional[QuantizedMatrix] = None
    A_low: Optional[QuantizedMatrix] = None

    def __post_init__(self) -> None:
        """Check that every present pair reconstructs to (rows, cols)."""
        if not 0 <= self.h <= self.rank:
            raise ValueError(f"h={self.h} outside [0, {self.rank}] for {self.layer_name}")
        for b, a in ((self.B_high, self.A_high), (self.B_low, self.A_low)):
            if (b is None) != (a is None):
                raise ValueError(f"Half of a factor pair is missing for {self.layer_name}")
            if b is None or a is None:
                continue
            if b.rows != self.rows or a.cols != self.cols or b.cols != a.rows:
                raise ValueError(
                    f"Quantized pair of {self.layer_name} does not reconstruct to "
                    f"({self.rows}, {self.cols})"
                )

    @property
    def param_count(self) -> int:
        """Weights of the source adapter, (m + n) * r."""
        return (self.rows + self.cols) * self.rank

    def matrices(self) -> list[tuple[str, QuantizedMatrix]]:
        """Present matrices with their role names, in a fixed order."""
        named = (
            ("B_high", self.B_high),
            ("A_high", self.A_high),
            ("B_low", self.B_low),
            ("A_low", self.A_low),
        )
        return [(role, matrix) for role, matrix in named if matrix is not None]


@dataclass
class LayerError:
    """Reconstruction error of one layer's weight update."""

    layer_name: str
    rank: int
    h: int
    abs_error: float
    rel_error: Optional[float]  # None for zero adapters
    avg_bits: float
    weights: int = 0
    total_bits: int = 0


@dataclass
class ErrorReport:
    """Per-layer and aggregate reconstruction errors for one configuration."""

    config: QuantConfig
    layers: list[LayerError] = field(default_factory=list)

    @property
    def label(self) -> str:
        return self.config.label

    def _rel_errors(self) -> list[float]:
        return [layer.rel_error for layer in self.layers if layer.rel_error is not None]

    @property
    def mean_rel_error(self) -> Optional[float]:
        values = self._rel_errors()
        return math.fsum(values) / len(values) if values else None

    @property
    def max_rel_error(self) -> Optional[float]:
        values = self._rel_errors()
        return max(values) if values else None

    @property
    def mean_abs_error(self) -> float:
        if not self.layers:
            return 0.0
        return math.fsum(layer.abs_error for layer in self.layers) / len(self.layers)

    @property
    def max_abs_error(self) -> float:
        return max((layer.abs_error for layer in self.layers), default=0.0)

    @property
    def avg_bits(self) -> float:
        """Pooled AvgBits: total stored bits over total weights."""
        weights = sum(layer.weights for layer in self.layers)
        if weights == 0:
            return 0.0
        return float(Fraction(sum(layer.total_bits for layer in self.layers), weights))

    @property
    def mean_h(self) -> float:
        if not self.layers:
            return 0.0
        return sum(layer.h for layer in self.layers) / len(self.layers)

    def to_json_dict(self) -> dict[str, Any]:
        """JSON-serializable form with aggregate statistics."""
        return {
            "config": self.config.to_json_dict(),
            "seed": self.config.seed,
            "layers": [asdict(layer) for layer in self.layers],
            "aggregate": {
                "mean_rel_error": self.mean_rel_error,
                "max_rel_error": self.max_rel_error,
                "mean_abs_error": self.mean_abs_error,
                "max_abs_error": self.max_abs_error,
                "avg_bits": self.avg_bits,
                "mean_h": self.mean_h,
            },
        }


@dataclass
class LayerBits:
    """Bit accounting of one quantized layer (or a pooled total)."""

    layer_name: str
    weights: int
    code_bits: int
    scale_bits: int
    zp_bits: int

    @property
    def total_bits(self) -> int:
        return self.code_bits + self.scale_bits + self.zp_bits

    @property
    def avg_bits_exact(self) -> Fraction:
        """Exact total_bits / weights (0 for an empty layer)."""
        if self.weights == 0:
            return Fraction(0)
        return Fraction(self.total_bits, self.weights)

    @property
    def avg_bits(self) -> float:
        return float(self.avg_bits_exact)

    def __add__(self, other: "LayerBits") -> "LayerBits":
        return LayerBits(
            layer_name=self.layer_name,
            weights=self.weights + other.weights,
            code_bits=self.code_bits + other.code_bits,
            scale_bits=self.scale_bits + other.scale_bits,
            zp_bits=self.zp_bits + other.zp_bits,
        )


@dataclass
class BitReport:
    """Per-layer bit accounting, per-artifact subtotals and the pooled aggregate."""

    layers: list[LayerBits] = field(default_factory=list)
    artifacts: dict[str, LayerBits] = field(default_factory=dict)

    @property
    def total(self) -> LayerBits:
        pooled = LayerBits("*", 0, 0, 0, 0)
        for layer in self.layers:
            pooled = pooled + layer
        return pooled

    @property
    def avg_bits_exact(self) -> Fraction:
        return self.total.avg_bits_exact

    @property
    def avg_bits(self) -> float:
        return self.total.avg_bits

    def to_json_dict(self) -> dict[str, Any]:
        """JSON form; avg_bits is given both as float and exact fraction."""

        def row(bits: LayerBits) -> dict[str, Any]:
            return {
                "layer": bits.layer_name,
                "weights": bits.weights,
                "code_bits": bits.code_bits,
                "scale_bits": bits.scale_bits,
                "zp_bits": bits.zp_bits,
                "avg_bits": bits.avg_bits,
                "avg_bits_exact": str(bits.avg_bits_exact),
            }

        return {
            "layers": [row(layer) for layer in self.layers],
            "artifacts": {name: row(bits) for name, bits in sorted(self.artifacts.items())},
            "aggregate": row(self.total),
        }


@dataclass
class RunManifest:
    """Provenance record written next to every output file."""

    command: str
    config: dict[str, Any]
    inputs: list[str]
    outputs: list[str]
    seed: Optional[int]
    duration_seconds: float
    tool_version: str = __version__
    format_version: str = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.duration_seconds < 0:
            raise ValueError("duration_seconds must be non-negative")

    def to_json(self, indent: int = 2) -> str:
        """Serialize with stable key order."""
        return json.dumps(asdict(self), indent=indent, sort_keys=True)


@dataclass
class QuantizedContainer:
    """Contents of a .lqz file: the run configuration and every quantized layer."""

    config: QuantConfig
    adapters: list[QuantizedAdapter] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Keep layers in lexicographic order and reject duplicates."""
        self.adapters = sorted(self.adapters, key=lambda q: q.layer_name)
        names = [q.layer_name for q in self.adapters]
        if len(names) != len(set(names)):
            raise ValueError("Duplicate layer name in quantized container")

    def __len__(self) -> int:
        return len(self.adapters)


@dataclass
class ProjectionPoint:
    """Projected memory with N adapters loaded next to the base model."""

    n_adapters: int
    bytes_fp16: int
    bytes_quantized: int

