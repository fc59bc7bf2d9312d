"""End-to-end adapter quantization, baselines, ablations and error reports."""

import logging
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from functools import partial
from typing import Optional, TypeVar

import numpy as np
from numpy.typing import NDArray

from lorapack.errors import ConfigError, DegenerateSpectrumError
from lorapack.models import (
    AdapterContainer,
    ErrorReport,
    LayerError,
    LoraAdapter,
    Matrix,
    OptConfig,
    Orientation,
    QuantConfig,
    QuantizedAdapter,
    QuantizedContainer,
    QuantizedMatrix,
    Scheme,
    Strategy,
    SubLoraSplit,
)
from lorapack.quant.accounting import layer_bits
from lorapack.quant.quantizers import dequantize_matrix, quantize_matrix
from lorapack.quant.ste_opt import optimize_split
from lorapack.quant.svd_split import (
    economy_svd_of_product,
    select_rank_h,
    split_static,
    split_subloras,
)
from lorapack.tensor_store import collect_lora_pairs
from lorapack.utils import (
    factored_difference_norm,
    factored_frobenius,
    layer_rng,
    resolve_thread_count,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def _high_scheme(cfg: QuantConfig) -> Scheme:
    return Scheme.PASSTHROUGH if cfg.passthrough else Scheme.RTN


def _quantize_pair(
    b: Matrix, a: Matrix, scheme: Scheme, bits: int, cfg: QuantConfig
) -> tuple[QuantizedMatrix, QuantizedMatrix]:
    return (
        quantize_matrix(b, scheme, bits, cfg.group_size, cfg.b_orientation),
        quantize_matrix(a, scheme, bits, cfg.group_size, cfg.a_orientation),
    )


def _quantize_split(
    adapter: LoraAdapter,
    split: SubLoraSplit,
    cfg: QuantConfig,
    low_scheme: Optional[Scheme],
) -> QuantizedAdapter:
    """Refine and quantize a split. ``low_scheme`` None drops the low pair."""
    if low_scheme is None:
        split = replace(
            split,
            B_low=np.zeros((adapter.rows, 0), dtype=np.float32),
            A_low=np.zeros((0, adapter.cols), dtype=np.float32),
        )

    high_scheme = _high_scheme(cfg)
    high_opt = OptConfig(
        steps=cfg.opt_steps,
        learning_rate=cfg.learning_rate,
        scheme=high_scheme,
        bits=cfg.bits_high,
        group_size=cfg.group_size,
    )
    low_opt = OptConfig(
        steps=cfg.opt_steps,
        learning_rate=cfg.learning_rate,
        scheme=low_scheme or Scheme.BINARY,
        bits=cfg.bits_low,
        group_size=cfg.group_size,
    )
    split = optimize_split(split, high_opt, low_opt)

    b_high = a_high = b_low = a_low = None
    if split.B_high.shape[1] > 0:
        b_high, a_high = _quantize_pair(split.B_high, split.A_high, high_scheme, cfg.bits_high, cfg)
    if low_scheme is not None and split.B_low.shape[1] > 0:
        b_low, a_low = _quantize_pair(split.B_low, split.A_low, low_scheme, cfg.bits_low, cfg)

    return QuantizedAdapter(
        layer_name=adapter.layer_name,
        rows=adapter.rows,
        cols=adapter.cols,
        rank=adapter.rank,
        h=split.h,
        config=cfg,
        B_high=b_high,
        A_high=a_high,
        B_low=b_low,
        A_low=a_low,
    )


def quantize_lora(adapter: LoraAdapter, cfg: QuantConfig) -> QuantizedAdapter:
    """Quantize one adapter with the SVD variance-ratio split.

    SVD of B @ A, reparameterization, smallest h covering ``cfg.rho`` of the
    energy, per-rank STE refinement, then bits_high RTN for the high pair and
    sign binarization for the low pair. B-factors are grouped along
    ``cfg.b_orientation`` (columns by default) and A-factors along
    ``cfg.a_orientation`` (rows by default).

    Args:
        adapter: Source adapter
        cfg: Run configuration; only its rho/bits/optimizer fields are used

    Returns:
        QuantizedAdapter with h >= 1
    """
    split = split_subloras(adapter, cfg.rho)
    logger.debug(f"{adapter.layer_name}: r={adapter.rank}, h={split.h} at rho={cfg.rho:g}")
    return _quantize_split(adapter, split, cfg, Scheme.BINARY)


def _svd_split(adapter: LoraAdapter, cfg: QuantConfig) -> SubLoraSplit:
    if cfg.static_h is not None:
        return split_static(adapter, cfg.static_h)
    return split_subloras(adapter, cfg.rho)


def prune_variant(adapter: LoraAdapter, cfg: QuantConfig) -> QuantizedAdapter:
    """quantize_lora with the low sub-LoRA dropped (it contributes zero)."""
    split = _svd_split(adapter, cfg)
    if split.h == 0:
        raise ConfigError(f"Pruning with h=0 would drop every component of {adapter.layer_name}")
    return _quantize_split(adapter, split, cfg, None)


def low_rtn1_variant(adapter: LoraAdapter, cfg: QuantConfig) -> QuantizedAdapter:
    """quantize_lora with the low sub-LoRA coded by 1-bit RTN instead of signs."""
    return _quantize_split(adapter, _svd_split(adapter, cfg), cfg, Scheme.RTN)


def component_importance(adapter: LoraAdapter) -> NDArray[np.float64]:
    """||b_i|| * ||a_i|| for each native component, i.e. the norm of b_i a_i^T."""
    b = adapter.B.astype(np.float64)
    a = adapter.A.astype(np.float64)
    importance: NDArray[np.float64] = np.linalg.norm(b, axis=0) * np.linalg.norm(a, axis=1)
    return importance


def matched_h(adapter: LoraAdapter, cfg: QuantConfig) -> int:
    """h for a native split: ``cfg.static_h`` if set, else what the SVD ratio rule picks."""
    if cfg.static_h is not None:
        if cfg.static_h > adapter.rank:
            raise ConfigError(
                f"h={cfg.static_h} exceeds the rank {adapter.rank} of {adapter.layer_name}"
            )
        return cfg.static_h
    try:
        return select_rank_h(economy_svd_of_product(adapter).singular_values, cfg.rho)
    except DegenerateSpectrumError:
        return min(1, adapter.rank)


def native_split(adapter: LoraAdapter, high: Sequence[int]) -> SubLoraSplit:
    """Split the un-reparameterized factors, taking components ``high`` in that order.

    The remaining components form the low part in ascending index order. The
    split's ``singular_values`` carry the component importances in split order.
    """
    chosen = [int(i) for i in high]
    if len(set(chosen)) != len(chosen) or any(not 0 <= i < adapter.rank for i in chosen):
        raise ConfigError(f"Invalid component selection {chosen} for rank {adapter.rank}")
    taken = set(chosen)
    rest = [i for i in range(adapter.rank) if i not in taken]
    order = chosen + rest
    importance = component_importance(adapter)[order].astype(np.float32)
    h = len(chosen)
    return SubLoraSplit(
        B_high=np.ascontiguousarray(adapter.B[:, chosen]),
        A_high=np.ascontiguousarray(adapter.A[chosen, :]),
        B_low=np.ascontiguousarray(adapter.B[:, rest]),
        A_low=np.ascontiguousarray(adapter.A[rest, :]),
        h=h,
        singular_values=importance,
    )


def ablation_split(adapter: LoraAdapter, cfg: QuantConfig) -> QuantizedAdapter:
    """Quantize with an alternative choice of the high-precision components.

    - svd_static_h: SVD split at the fixed ``cfg.static_h``
    - norm_split: the h native components with the largest ||b_i|| * ||a_i||
    - random_split: h native components drawn with the layer's seeded generator

    Native splits use ``matched_h``. The low part is binarized as in quantize_lora.

    Raises:
        ConfigError: If h exceeds the rank or the strategy is not an ablation
    """
    if cfg.strategy is Strategy.SVD_STATIC_H:
        if cfg.static_h is None:
            raise ConfigError("svd_static_h requires static_h")
        split = split_static(adapter, cfg.static_h)
    elif cfg.strategy is Strategy.NORM_SPLIT:
        h = matched_h(adapter, cfg)
        ranking = np.argsort(-component_importance(adapter), kind="stable")
        split = native_split(adapter, ranking[:h].tolist())
    elif cfg.strategy is Strategy.RANDOM_SPLIT:
        h = matched_h(adapter, cfg)
        rng = layer_rng(cfg.seed, adapter.layer_name)
        split = native_split(adapter, rng.permutation(adapter.rank)[:h].tolist())
    else:
        raise ConfigError(f"{cfg.strategy.value} is not an ablation strategy")
    return _quantize_split(adapter, split, cfg, Scheme.BINARY)


def baseline_config(
    method: str,
    group_size: int = 128,
    b_orientation: Orientation = Orientation.COLUMN,
    a_orientation: Orientation = Orientation.ROW,
) -> QuantConfig:
    """QuantConfig for a baseline named 'bin' or 'rtn<k>' (k in 1..8)."""
    method = method.strip().lower()
    if method == "bin":
        strategy, bits = Strategy.BASELINE_BIN, 1
    elif method.startswith("rtn") and method[3:].isdigit():
        strategy, bits = Strategy.BASELINE_RTN, int(method[3:])
    else:
        raise ConfigError(f"Unknown baseline method {method!r}; use 'bin' or 'rtn<bits>'")
    return QuantConfig(
        bits_high=bits,
        group_size=group_size,
        opt_steps=0,
        strategy=strategy,
        b_orientation=b_orientation,
        a_orientation=a_orientation,
    )


def _baseline(adapter: LoraAdapter, cfg: QuantConfig) -> QuantizedAdapter:
    if cfg.strategy is Strategy.BASELINE_BIN:
        scheme, bits = Scheme.BINARY, 1
    else:
        scheme, bits = Scheme.RTN, cfg.bits_high
    b_q, a_q = _quantize_pair(adapter.B, adapter.A, scheme, bits, cfg)
    return QuantizedAdapter(
        layer_name=adapter.layer_name,
        rows=adapter.rows,
        cols=adapter.cols,
        rank=adapter.rank,
        h=adapter.rank,
        config=cfg,
        B_high=b_q,
        A_high=a_q,
    )


def baseline_quantize(
    adapter: LoraAdapter,
    method: str,
    group_size: int = 128,
    b_orientation: Orientation = Orientation.COLUMN,
    a_orientation: Orientation = Orientation.ROW,
) -> QuantizedAdapter:
    """Quantize B and A directly, without SVD or refinement (h = r).

    Args:
        adapter: Source adapter
        method: 'bin' for sign binarization, 'rtn1', 'rtn2', ... for k-bit RTN
        group_size: Weights per group

    Returns:
        QuantizedAdapter holding the quantized B and A as its high pair
    """
    cfg = baseline_config(method, group_size, b_orientation, a_orientation)
    return _baseline(adapter, cfg)


_STRATEGIES: dict[Strategy, Callable[[LoraAdapter, QuantConfig], QuantizedAdapter]] = {
    Strategy.SVD_RATIO: quantize_lora,
    Strategy.SVD_STATIC_H: ablation_split,
    Strategy.NORM_SPLIT: ablation_split,
    Strategy.RANDOM_SPLIT: ablation_split,
    Strategy.PRUNE: prune_variant,
    Strategy.LOW_RTN1: low_rtn1_variant,
    Strategy.BASELINE_RTN: _baseline,
    Strategy.BASELINE_BIN: _baseline,
}


def quantize_with_strategy(adapter: LoraAdapter, cfg: QuantConfig) -> QuantizedAdapter:
    """Quantize ``adapter`` with whatever ``cfg.strategy`` names."""
    return _STRATEGIES[cfg.strategy](adapter, cfg)


def _dequantized_pair(
    b: Optional[QuantizedMatrix], a: Optional[QuantizedMatrix]
) -> Optional[tuple[Matrix, Matrix]]:
    if b is None or a is None:
        return None
    return dequantize_matrix(b), dequantize_matrix(a)


def reconstruct_factors(q: QuantizedAdapter) -> tuple[Matrix, Matrix]:
    """Dequantized factors [B_high | B_low] (m x r') and [A_high; A_low] (r' x n)."""
    pairs = [
        pair
        for pair in (
            _dequantized_pair(q.B_high, q.A_high),
            _dequantized_pair(q.B_low, q.A_low),
        )
        if pair is not None
    ]
    if not pairs:
        return np.zeros((q.rows, 0), dtype=np.float32), np.zeros((0, q.cols), dtype=np.float32)
    b = np.hstack([p[0] for p in pairs]).astype(np.float32)
    a = np.vstack([p[1] for p in pairs]).astype(np.float32)
    return np.ascontiguousarray(b), np.ascontiguousarray(a)


def reconstruct_adapter(q: QuantizedAdapter) -> Matrix:
    """Dense m x n update D(B_high) D(A_high) + D(B_low) D(A_low)."""
    b, a = reconstruct_factors(q)
    dense: Matrix = (b.astype(np.float64) @ a.astype(np.float64)).astype(np.float32)
    return dense


def layer_error(adapter: LoraAdapter, q: QuantizedAdapter) -> LayerError:
    """Absolute and relative Frobenius error of the reconstructed update.

    The relative error is None for an all-zero adapter.
    """
    if (q.rows, q.cols) != (adapter.rows, adapter.cols):
        raise ConfigError(
            f"Quantized layer {q.layer_name} is {q.rows}x{q.cols}, "
            f"reference is {adapter.rows}x{adapter.cols}"
        )
    b_rec, a_rec = reconstruct_factors(q)
    abs_error = factored_difference_norm(adapter.B, adapter.A, b_rec, a_rec)
    reference = factored_frobenius(adapter.B, adapter.A)
    bits = layer_bits(q)
    return LayerError(
        layer_name=adapter.layer_name,
        rank=adapter.rank,
        h=q.h,
        abs_error=abs_error,
        rel_error=abs_error / reference if reference > 0 else None,
        avg_bits=bits.avg_bits,
        weights=bits.weights,
        total_bits=bits.total_bits,
    )


def _map_layers(fn: Callable[[T], R], items: Sequence[T], threads: int) -> list[R]:
    """Apply ``fn`` to every item, keeping input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def error_report(
    adapters: Iterable[LoraAdapter],
    quantized: Iterable[QuantizedAdapter],
    config: QuantConfig,
    threads: int = 1,
) -> ErrorReport:
    """Pair reference adapters with quantized layers by name and measure errors.

    Raises:
        ConfigError: If the two sides do not cover the same layers
    """
    references = {adapter.layer_name: adapter for adapter in adapters}
    by_name = {q.layer_name: q for q in quantized}
    if set(references) != set(by_name):
        missing = sorted(set(references) ^ set(by_name))
        raise ConfigError(f"Reference and artifact disagree on layers: {', '.join(missing)}")
    names = sorted(references)
    layers = _map_layers(lambda name: layer_error(references[name], by_name[name]), names, threads)
    return ErrorReport(config=config, layers=layers)


class ContainerQuantizer:
    """Quantizes and evaluates every adapter of a container under one config."""

    def __init__(self, config: QuantConfig, threads: Optional[int] = None):
        """Initialize the quantizer.

        Args:
            config: Run configuration
            threads: Worker count; None defers to LORAPACK_THREADS or the CPU count
        """
        self.config = config
        self.threads = resolve_thread_count(threads)

    def quantize(self, container: AdapterContainer) -> QuantizedContainer:
        """Quantize all layers (in parallel) into a QuantizedContainer."""
        start = time.time()
        adapters = collect_lora_pairs(container)
        quantized = _map_layers(
            lambda adapter: quantize_with_strategy(adapter, self.config), adapters, self.threads
        )
        logger.info(
            f"Quantized {len(quantized)} layer(s) as {self.config.label} "
            f"in {time.time() - start:.2f}s on {self.threads} thread(s)"
        )
        return QuantizedContainer(
            config=self.config, adapters=quantized, metadata=dict(container.metadata)
        )

    def evaluate(self, container: AdapterContainer, artifact: QuantizedContainer) -> ErrorReport:
        """Reconstruction errors of ``artifact`` against the source ``container``."""
        return error_report(
            collect_lora_pairs(container), artifact.adapters, self.config, self.threads
        )

    def run(self, container: AdapterContainer) -> tuple[QuantizedContainer, ErrorReport]:
        """Quantize and evaluate in one go."""
        artifact = self.quantize(container)
        return artifact, self.evaluate(container, artifact)


def compare_methods(
    container: AdapterContainer,
    configs: Sequence[QuantConfig],
    threads: Optional[int] = None,
) -> list[ErrorReport]:
    """Run every config over all adapters; one ErrorReport per config, in input order."""
    reports = []
    for cfg in configs:
        _, report = ContainerQuantizer(cfg, threads).run(container)
        reports.append(report)
        logger.debug(f"{cfg.label}: mean rel error {report.mean_rel_error}")
    return reports


_NATIVE = (Strategy.RANDOM_SPLIT, Strategy.NORM_SPLIT)


def sweep_configs(
    strategies: Sequence[Strategy],
    ratios: Sequence[float],
    bits: Sequence[int],
    static_hs: Sequence[int] = (),
    orientations: Sequence[tuple[Orientation, Orientation]] = (
        (Orientation.COLUMN, Orientation.ROW),
    ),
    seeds: Sequence[int] = (0,),
    group_size: int = 128,
    opt_steps: int = 100,
    learning_rate: float = 1e-3,
) -> list[QuantConfig]:
    """Expand a comparison grid into concrete configurations.

    - svd_static_h runs once per static h (and bits)
    - random/norm splits use the static h list when given, otherwise the ratio list
    - baseline_rtn runs once per bits value, baseline_bin once
    - only random_split is repeated per seed; everything else uses the first seed

    Raises:
        ConfigError: If a strategy needs a list that is empty
    """
    if not seeds:
        raise ConfigError("At least one seed is required")
    configs: list[QuantConfig] = []
    for b_orientation, a_orientation in orientations:
        base = partial(
            QuantConfig,
            group_size=group_size,
            opt_steps=opt_steps,
            learning_rate=learning_rate,
            b_orientation=b_orientation,
            a_orientation=a_orientation,
        )
        for strategy in strategies:
            strategy_seeds = seeds if strategy.uses_seed else seeds[:1]
            if strategy is Strategy.BASELINE_BIN:
                configs.append(base(strategy=strategy, seed=seeds[0]))
                continue
            if strategy is Strategy.BASELINE_RTN:
                configs.extend(
                    base(strategy=strategy, bits_high=k, seed=seeds[0]) for k in bits
                )
                continue
            by_h = strategy is Strategy.SVD_STATIC_H or (strategy in _NATIVE and static_hs)
            if by_h and not static_hs:
                raise ConfigError(f"{strategy.value} needs at least one static h")
            if not by_h and not ratios:
                raise ConfigError(f"{strategy.value} needs at least one ratio")
            for k in bits:
                for seed in strategy_seeds:
                    if by_h:
                        configs.extend(
                            base(strategy=strategy, bits_high=k, static_h=h, seed=seed)
                            for h in static_hs
                        )
                    else:
                        configs.extend(
                            base(strategy=strategy, bits_high=k, rho=rho, seed=seed)
                            for rho in ratios
                        )
    return configs
