"""Per-rank straight-through refinement of sub-LoRA factor pairs.

Each (column of B, row of A) pair is optimized on its own so singular
directions are never mixed. The descent objective is the squared Frobenius
error of the rank-1 product, evaluated through the factored identity

    ||b a^T - b_hat a_hat^T||^2 = |b|^2 |a|^2 - 2 (b.b_hat)(a.a_hat) + |b_hat|^2 |a_hat|^2

so no m x n outer product is ever formed.
"""

import logging
import math

import numpy as np
from numpy.typing import NDArray

from lorapack.errors import ConfigError, QuantizationError
from lorapack.models import OptConfig, Scheme, SubLoraSplit
from lorapack.quant.quantizers import fake_quantize

logger = logging.getLogger(__name__)

Vector = NDArray[np.float32]


def _dequantized(x: NDArray[np.floating], cfg: OptConfig) -> NDArray[np.float64]:
    return fake_quantize(x, cfg.scheme, cfg.bits, cfg.group_size).astype(np.float64)


def squared_rank_one_error(
    b: NDArray[np.floating],
    a: NDArray[np.floating],
    b_hat: NDArray[np.floating],
    a_hat: NDArray[np.floating],
) -> float:
    """||b a^T - b_hat a_hat^T||_F^2 in O(m + n)."""
    b64, a64 = np.asarray(b, np.float64), np.asarray(a, np.float64)
    bh, ah = np.asarray(b_hat, np.float64), np.asarray(a_hat, np.float64)
    value = (b64 @ b64) * (a64 @ a64) - 2.0 * (b64 @ bh) * (a64 @ ah) + (bh @ bh) * (ah @ ah)
    return max(float(value), 0.0)


def reconstruction_loss(
    b: Vector, a: Vector, b_star: Vector, a_star: Vector, cfg: OptConfig
) -> float:
    """||b a^T - D(Q(b*)) D(Q(a*))^T||_F with group-wise quantization along each vector."""
    if b.shape != b_star.shape or a.shape != a_star.shape:
        raise ConfigError(
            f"Dimension mismatch: b {b.shape} vs b* {b_star.shape}, a {a.shape} vs a* {a_star.shape}"
        )
    return math.sqrt(squared_rank_one_error(b, a, _dequantized(b_star, cfg), _dequantized(a_star, cfg)))


def ste_gradients(
    b: NDArray[np.floating],
    a: NDArray[np.floating],
    b_hat: NDArray[np.floating],
    a_hat: NDArray[np.floating],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Gradients of the squared rank-1 error w.r.t. b* and a*.

    Rounding and sign are treated as the identity and the group parameters as
    constants, so d b_hat / d b* = I.
    """
    b64, a64 = np.asarray(b, np.float64), np.asarray(a, np.float64)
    bh, ah = np.asarray(b_hat, np.float64), np.asarray(a_hat, np.float64)
    grad_b = 2.0 * (bh * (ah @ ah) - b64 * (a64 @ ah))
    grad_a = 2.0 * (ah * (bh @ bh) - a64 * (b64 @ bh))
    return grad_b, grad_a


def optimize_rank_one_pair(b: Vector, a: Vector, cfg: OptConfig) -> tuple[Vector, Vector]:
    """Run ``cfg.steps`` plain gradient-descent steps on one factor pair.

    Iterates are kept in binary32. Every iterate, including the starting point,
    is scored and the one with the lowest loss is returned, so the result is
    never worse than (b, a). A non-finite loss stops the descent early.

    Args:
        b: Column of B (length m)
        a: Row of A (length n)
        cfg: Optimizer and quantizer settings

    Returns:
        (b*, a*) as binary32 vectors
    """
    b0 = np.array(b, dtype=np.float32)
    a0 = np.array(a, dtype=np.float32)
    if cfg.steps == 0 or cfg.scheme is Scheme.PASSTHROUGH:
        return b0, a0

    b_star, a_star = b0, a0
    best_loss, best_b, best_a = math.inf, b0, a0
    for step in range(cfg.steps + 1):
        try:
            b_hat = _dequantized(b_star, cfg)
            a_hat = _dequantized(a_star, cfg)
        except QuantizationError as e:
            if step == 0:
                raise
            logger.warning(f"Iterate left the quantizer range at step {step} ({e}); keeping the best iterate")
            break
        loss = squared_rank_one_error(b0, a0, b_hat, a_hat)
        if not math.isfinite(loss):
            logger.warning(f"Non-finite loss at step {step}; keeping the best iterate")
            break
        if loss < best_loss:
            best_loss, best_b, best_a = loss, b_star, a_star
        if step == cfg.steps or loss == 0.0:
            break

        grad_b, grad_a = ste_gradients(b0, a0, b_hat, a_hat)
        with np.errstate(over="ignore", invalid="ignore"):
            next_b = (b_star.astype(np.float64) - cfg.learning_rate * grad_b).astype(np.float32)
            next_a = (a_star.astype(np.float64) - cfg.learning_rate * grad_a).astype(np.float32)
        if not (np.all(np.isfinite(next_b)) and np.all(np.isfinite(next_a))):
            logger.warning(f"Non-finite iterate at step {step}; keeping the best iterate")
            break
        b_star, a_star = next_b, next_a

    return best_b, best_a


def optimize_split(split: SubLoraSplit, cfg_high: OptConfig, cfg_low: OptConfig) -> SubLoraSplit:
    """Optimize every high pair under ``cfg_high`` and every low pair under ``cfg_low``."""
    b_high, a_high = split.B_high.copy(), split.A_high.copy()
    b_low, a_low = split.B_low.copy(), split.A_low.copy()

    for i in range(b_high.shape[1]):
        b_high[:, i], a_high[i, :] = optimize_rank_one_pair(b_high[:, i], a_high[i, :], cfg_high)
    for i in range(b_low.shape[1]):
        b_low[:, i], a_low[i, :] = optimize_rank_one_pair(b_low[:, i], a_low[i, :], cfg_low)

    logger.debug(
        f"Optimized {b_high.shape[1]} high and {b_low.shape[1]} low pair(s) "
        f"for {max(cfg_high.steps, cfg_low.steps)} step(s)"
    )
    return SubLoraSplit(
        B_high=b_high,
        A_high=a_high,
        B_low=b_low,
        A_low=a_low,
        h=split.h,
        singular_values=split.singular_values,
    )
