"""Synthetic adapters with a controlled singular spectrum.

Each layer's update B @ A has singular values decay**i (i = 0..r-1). The native
factors are mixed by a random well-conditioned r x r matrix, so individual
columns of B are not singular directions, as in trained adapters.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from lorapack.errors import ConfigError
from lorapack.models import AdapterContainer, LoraAdapter

logger = logging.getLogger(__name__)

DEFAULT_DECAY = 0.7

# Range of the diagonal of the mixing matrix.
MIX_SCALE_RANGE = (0.3, 3.0)


@dataclass
class SyntheticSpec:
    """Shape, size and spectrum of a synthetic adapter container."""

    rows: int
    cols: int
    rank: int
    layers: int
    seed: int
    decay: float = DEFAULT_DECAY

    def __post_init__(self) -> None:
        """Validate the request."""
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"Dimensions must be positive, got {self.rows}x{self.cols}")
        if not 1 <= self.rank <= min(self.rows, self.cols):
            raise ConfigError(f"rank must lie in [1, {min(self.rows, self.cols)}], got {self.rank}")
        if self.layers < 0:
            raise ConfigError(f"layers must be non-negative, got {self.layers}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")

    @classmethod
    def from_string(cls, text: str) -> "SyntheticSpec":
        """Parse 'm,n,r,layers,seed[,decay]'.

        Example:
            >>> SyntheticSpec.from_string("256,256,16,4,0,0.6").decay
            0.6
        """
        parts = [p.strip() for p in text.split(",")]
        if len(parts) not in (5, 6):
            raise ConfigError(f"Expected m,n,r,layers,seed[,decay], got {text!r}")
        try:
            m, n, r, layers, seed = (int(p) for p in parts[:5])
            decay = float(parts[5]) if len(parts) == 6 else DEFAULT_DECAY
        except ValueError as e:
            raise ConfigError(f"Invalid synthetic spec {text!r}: {e}") from e
        return cls(rows=m, cols=n, rank=r, layers=layers, seed=seed, decay=decay)


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> NDArray[np.float64]:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # sign fix makes q Haar-distributed
    signs: NDArray[np.float64] = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs


def synthesize_adapter(
    rng: np.random.Generator, layer_name: str, rows: int, cols: int, rank: int, decay: float
) -> LoraAdapter:
    """One adapter whose product has singular values decay**0, decay**1, ..."""
    u = _orthonormal(rng, rows, rank)
    v = _orthonormal(rng, cols, rank)
    root = np.sqrt(decay ** np.arange(rank, dtype=np.float64))

    mix_q = _orthonormal(rng, rank, rank)
    mix_d = rng.uniform(*MIX_SCALE_RANGE, size=rank)
    b = (u * root) @ (mix_q * mix_d)
    a = (mix_q.T / mix_d[:, None]) @ (v * root).T
    return LoraAdapter(layer_name, b.astype(np.float32), a.astype(np.float32))


def layer_names(count: int) -> list[str]:
    """Zero-padded names so lexicographic order matches layer index."""
    width = max(1, len(str(max(count - 1, 0))))
    return [f"layers.{i:0{width}d}.proj" for i in range(count)]


def synthesize_container(spec: SyntheticSpec) -> AdapterContainer:
    """Generate ``spec.layers`` adapters; the same spec always yields the same values."""
    adapters = []
    for index, name in enumerate(layer_names(spec.layers)):
        rng = np.random.default_rng([spec.seed, index])
        adapters.append(synthesize_adapter(rng, name, spec.rows, spec.cols, spec.rank, spec.decay))
    logger.debug(
        f"Synthesized {spec.layers} layer(s) of {spec.rows}x{spec.rank}x{spec.cols}, decay {spec.decay:g}"
    )
    metadata = {
        "source": "synthetic",
        "spec": f"{spec.rows},{spec.cols},{spec.rank},{spec.layers},{spec.seed},{spec.decay:g}",
    }
    return AdapterContainer(adapters=adapters, metadata=metadata)
