"""Utility functions for lorapack."""

import math
import os
import zlib
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from lorapack.errors import ConfigError

THREADS_ENV_VAR = "LORAPACK_THREADS"
MAX_DEFAULT_THREADS = 8


def resolve_thread_count(explicit: Optional[int] = None) -> int:
    """Pick the worker count for layer-level parallelism.

    Args:
        explicit: Value of a --threads flag, which wins over the environment

    Returns:
        A positive thread count

    Raises:
        ConfigError: If the flag or LORAPACK_THREADS is not a positive integer
    """
    if explicit is not None:
        if explicit < 1:
            raise ConfigError(f"--threads must be >= 1, got {explicit}")
        return explicit

    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is not None and raw.strip():
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from None
        if value < 1:
            raise ConfigError(f"{THREADS_ENV_VAR} must be >= 1, got {value}")
        return value

    return min(MAX_DEFAULT_THREADS, os.cpu_count() or 1)


def layer_rng(seed: int, layer_name: str) -> np.random.Generator:
    """Independent generator for one layer, stable across runs and thread counts."""
    return np.random.default_rng([seed, zlib.crc32(layer_name.encode("utf-8"))])


def parse_float_range(text: str) -> list[float]:
    """Parse '0.8,0.9' or an inclusive 'start:stop:step' sweep.

    Example:
        >>> parse_float_range("0.1:0.3:0.1")
        [0.1, 0.2, 0.3]
    """
    text = text.strip()
    if not text:
        raise ConfigError("Empty range")
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise ConfigError(f"Range must be start:stop:step, got {text!r}")
            start, stop, step = parts
            if step <= 0 or stop < start:
                raise ConfigError(f"Invalid range {text!r}")
            count = math.floor((stop - start) / step + 1e-9) + 1
            return [round(start + i * step, 10) for i in range(count)]
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid number in range {text!r}") from e


def parse_int_range(text: str) -> list[int]:
    """Parse '1,2,4' or an inclusive '1-12'."""
    text = text.strip()
    if not text:
        raise ConfigError("Empty range")
    values: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                low, high = part.split("-", 1)
                start, stop = int(low), int(high)
                if stop < start:
                    raise ConfigError(f"Invalid range {part!r}")
                values.extend(range(start, stop + 1))
            else:
                values.append(int(part))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid integer in range {text!r}") from e
    return values


def factored_frobenius(left: NDArray[np.floating], right: NDArray[np.floating]) -> float:
    """||left @ right||_F through the triangular factors of both sides.

    With left = Q_L R_L and right^T = Q_R R_R the norm equals ||R_L R_R^T||_F, so the
    m x n product is never formed.
    """
    left64 = np.asarray(left, dtype=np.float64)
    right64 = np.asarray(right, dtype=np.float64)
    if left64.shape[1] == 0 or left64.shape[0] == 0 or right64.shape[1] == 0:
        return 0.0
    r_left = np.linalg.qr(left64, mode="r")
    r_right = np.linalg.qr(right64.T, mode="r")
    return float(np.linalg.norm(r_left @ r_right.T))


def factored_difference_norm(
    b: NDArray[np.floating],
    a: NDArray[np.floating],
    b_rec: NDArray[np.floating],
    a_rec: NDArray[np.floating],
) -> float:
    """||b @ a - b_rec @ a_rec||_F via the stacked factors [b, -b_rec] and [a; a_rec]."""
    left = np.hstack([np.asarray(b, np.float64), -np.asarray(b_rec, np.float64)])
    right = np.vstack([np.asarray(a, np.float64), np.asarray(a_rec, np.float64)])
    return factored_frobenius(left, right)
