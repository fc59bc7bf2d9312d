"""Tests for end-to-end quantization, baselines, ablations and sweeps."""

import numpy as np
import pytest

from lorapack.errors import ConfigError, QuantizationError
from lorapack.models import (
    AdapterContainer,
    LoraAdapter,
    QuantConfig,
    QuantizedAdapter,
    Scheme,
    Strategy,
)
from lorapack.pipeline import (
    ContainerQuantizer,
    ablation_split,
    baseline_config,
    baseline_quantize,
    compare_methods,
    component_importance,
    error_report,
    layer_error,
    low_rtn1_variant,
    matched_h,
    prune_variant,
    quantize_lora,
    quantize_with_strategy,
    reconstruct_adapter,
    reconstruct_factors,
    sweep_configs,
)
from lorapack.quant.quantizers import dequantize_matrix
from lorapack.quant.svd_split import split_subloras
from lorapack.synthetic import SyntheticSpec, synthesize_adapter, synthesize_container
from lorapack.utils import layer_rng


def orthogonal_adapter() -> LoraAdapter:
    """B @ A has singular values 2 and 1 along unit vectors."""
    b = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    a = np.array([[2.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    return LoraAdapter("l0", b, a)


def synthetic(seed: int, m: int = 64, n: int = 64, r: int = 8, decay: float = 0.7) -> LoraAdapter:
    return synthesize_adapter(np.random.default_rng(seed), f"layers.{seed}", m, n, r, decay)


def rel_error(adapter: LoraAdapter, q: QuantizedAdapter) -> float:
    value = layer_error(adapter, q).rel_error
    assert value is not None
    return value


def high_product(q: QuantizedAdapter) -> np.ndarray:
    assert q.B_high is not None and q.A_high is not None
    return dequantize_matrix(q.B_high).astype(np.float64) @ dequantize_matrix(q.A_high)


class TestQuantizeLora:
    """Test the SVD variance-ratio pipeline."""

    def test_orthogonal_example(self) -> None:
        """Test that 2@0.8 keeps the dominant component in the high pair."""
        cfg = QuantConfig(rho=0.8, bits_high=2, opt_steps=0)
        q = quantize_lora(orthogonal_adapter(), cfg)

        assert q.h == 1
        expected = np.zeros((3, 4))
        expected[0, 0] = 2.0
        np.testing.assert_allclose(high_product(q), expected, atol=5e-3)
        assert q.B_low is not None and q.B_low.scheme is Scheme.BINARY

    def test_zero_adapter(self) -> None:
        """Test that an all-zero adapter reconstructs to zero with no relative error."""
        adapter = LoraAdapter("zero", np.zeros((4, 2)), np.zeros((2, 4)))
        q = quantize_lora(adapter, QuantConfig())
        error = layer_error(adapter, q)

        assert q.h == 1
        assert error.abs_error == pytest.approx(0.0, abs=1e-12)
        assert error.rel_error is None

    def test_passthrough_is_lossless(self) -> None:
        """Test that rho = 1 with unquantized high factors reproduces B @ A."""
        adapter = synthetic(0, 32, 24, 4)
        q = quantize_lora(adapter, QuantConfig(rho=1.0, bits_high=16, opt_steps=0))

        assert q.h == 4
        assert q.B_low is None
        assert rel_error(adapter, q) < 1e-4

    def test_orientation_recorded(self) -> None:
        """Test that B groups run along columns and A groups along rows by default."""
        q = quantize_lora(synthetic(1, 32, 32, 4), QuantConfig(opt_steps=0))
        assert q.B_high is not None and q.A_high is not None
        assert q.B_high.orientation.value == "column"
        assert q.A_high.orientation.value == "row"

    def test_refinement_does_not_hurt(self) -> None:
        """Test that STE refinement does not worsen the error on a synthetic layer."""
        adapter = synthetic(2)
        plain = rel_error(adapter, quantize_lora(adapter, QuantConfig(opt_steps=0)))
        refined = rel_error(adapter, quantize_lora(adapter, QuantConfig(opt_steps=50)))
        # per-rank refinement is not joint, so allow a little slack
        assert refined <= plain * 1.05


class TestBaselines:
    """Test direct quantization of B and A."""

    def test_bin_exact_on_sign_scaled_factors(self) -> None:
        """Test that factors already of the form S * sign reconstruct exactly."""
        b = np.array([[0.5, -2.0], [-0.5, 2.0], [0.5, 2.0]])
        a = np.array([[1.0, -1.0, 1.0], [3.0, 3.0, -3.0]])
        adapter = LoraAdapter("l", b, a)
        q = baseline_quantize(adapter, "bin")

        assert q.h == 2
        np.testing.assert_allclose(reconstruct_adapter(q), b @ a, atol=1e-6)

    def test_rtn2_exact_on_grid(self) -> None:
        """Test that factors on the 2-bit grid reconstruct exactly."""
        adapter = LoraAdapter("l", np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([[3.0, 2.0, 1.0, 0.0]]))
        q = baseline_quantize(adapter, "rtn2")
        assert layer_error(adapter, q).abs_error == pytest.approx(0.0, abs=1e-9)

    def test_bin_beats_rtn1(self) -> None:
        """Test that sign binarization is more accurate than 1-bit RTN."""
        for seed in range(5):
            adapter = synthetic(seed)
            bin_error = rel_error(adapter, baseline_quantize(adapter, "bin"))
            rtn1_error = rel_error(adapter, baseline_quantize(adapter, "rtn1"))
            assert bin_error < rtn1_error

    def test_bin_rejects_scales_beyond_binary16(self) -> None:
        """Test that factors with mean |v| above 65504 fail instead of storing inf."""
        rng = np.random.default_rng(9)
        adapter = LoraAdapter("l", rng.standard_normal((256, 4)) * 1e5, rng.standard_normal((4, 32)))
        with pytest.raises(QuantizationError, match="binary16"):
            baseline_quantize(adapter, "bin")

    @pytest.mark.parametrize("method", ["rtn0", "rtn9", "fp8", ""])
    def test_invalid_method(self, method: str) -> None:
        """Test that unknown baseline names are rejected."""
        with pytest.raises(ConfigError):
            baseline_config(method)

    def test_config(self) -> None:
        """Test the configuration a baseline name expands to."""
        cfg = baseline_config("RTN3", group_size=64)
        assert cfg.strategy is Strategy.BASELINE_RTN
        assert cfg.bits_high == 3
        assert cfg.group_size == 64
        assert cfg.opt_steps == 0
        assert baseline_config("bin").bits_high == 1


class TestAblations:
    """Test the alternative high-component choices."""

    @staticmethod
    def norm_adapter() -> LoraAdapter:
        b = np.array([[1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 2.0], [0.0, 0.0, 0.0]])
        a = np.eye(3, 4)
        return LoraAdapter("n", b, a)

    def test_component_importance(self) -> None:
        """Test ||b_i|| * ||a_i|| per native component."""
        np.testing.assert_allclose(component_importance(self.norm_adapter()), [1.0, 5.0, 2.0])

    def test_norm_split_keeps_dominant_component(self) -> None:
        """Test that norm_split with h = 1 puts column 1 in the high pair."""
        adapter = self.norm_adapter()
        cfg = QuantConfig(strategy=Strategy.NORM_SPLIT, static_h=1, bits_high=16, opt_steps=0)
        q = ablation_split(adapter, cfg)

        assert q.h == 1
        assert q.B_high is not None
        np.testing.assert_array_equal(dequantize_matrix(q.B_high), adapter.B[:, [1]])

    def test_random_split_follows_layer_rng(self) -> None:
        """Test that random_split takes the first h entries of the layer permutation."""
        adapter = synthetic(3, 16, 16, 6)
        cfg = QuantConfig(
            strategy=Strategy.RANDOM_SPLIT, static_h=2, bits_high=16, opt_steps=0, seed=7
        )
        q = ablation_split(adapter, cfg)
        chosen = layer_rng(7, adapter.layer_name).permutation(6)[:2]

        assert q.B_high is not None
        np.testing.assert_array_equal(dequantize_matrix(q.B_high), adapter.B[:, chosen])

    def test_random_split_is_deterministic(self) -> None:
        """Test that equal seeds give equal artifacts."""
        adapter = synthetic(4, 32, 32, 6)
        cfg = QuantConfig(strategy=Strategy.RANDOM_SPLIT, rho=0.8, opt_steps=5, seed=3)
        first, second = ablation_split(adapter, cfg), ablation_split(adapter, cfg)
        for (_, x), (_, y) in zip(first.matrices(), second.matrices()):
            assert x.packed_codes == y.packed_codes

    def test_matched_h(self) -> None:
        """Test that native splits use the SVD rule's h unless a static h is given."""
        adapter = synthetic(5)
        cfg = QuantConfig(strategy=Strategy.NORM_SPLIT, rho=0.85)
        assert matched_h(adapter, cfg) == split_subloras(adapter, 0.85).h
        static = QuantConfig(strategy=Strategy.NORM_SPLIT, static_h=3)
        assert matched_h(adapter, static) == 3

    def test_static_h_above_rank(self) -> None:
        """Test that a static h beyond the rank is rejected."""
        cfg = QuantConfig(strategy=Strategy.NORM_SPLIT, static_h=9)
        with pytest.raises(ConfigError):
            ablation_split(synthetic(6), cfg)

    def test_not_an_ablation(self) -> None:
        """Test that ablation_split refuses other strategies."""
        with pytest.raises(ConfigError):
            ablation_split(synthetic(7), QuantConfig())


class TestVariants:
    """Test the prune and low_rtn1 variants."""

    def test_prune_at_full_ratio_matches_quantize_lora(self) -> None:
        """Test that with h = r pruning changes nothing."""
        adapter = synthetic(8, 32, 32, 4)
        lora = quantize_lora(adapter, QuantConfig(rho=1.0, opt_steps=5))
        pruned = prune_variant(adapter, QuantConfig(strategy=Strategy.PRUNE, rho=1.0, opt_steps=5))

        assert pruned.h == lora.h == 4
        assert pruned.B_low is None and lora.B_low is None
        for (_, x), (_, y) in zip(lora.matrices(), pruned.matrices()):
            assert x.packed_codes == y.packed_codes

    def test_prune_drops_tail_energy(self) -> None:
        """Test that pruning the orthogonal example costs the dropped singular value."""
        adapter = orthogonal_adapter()
        q = prune_variant(adapter, QuantConfig(strategy=Strategy.PRUNE, rho=0.8, opt_steps=0))

        assert q.h == 1
        assert q.B_low is None and q.A_low is None
        assert layer_error(adapter, q).abs_error == pytest.approx(1.0, abs=5e-3)

    def test_prune_with_zero_h(self) -> None:
        """Test that pruning every component is a configuration error."""
        cfg = QuantConfig(strategy=Strategy.PRUNE, static_h=0)
        with pytest.raises(ConfigError):
            prune_variant(synthetic(9), cfg)

    def test_low_rtn1_codes_low_part_with_rtn(self) -> None:
        """Test that the low pair is 1-bit RTN coded with zero points."""
        q = low_rtn1_variant(synthetic(10), QuantConfig(strategy=Strategy.LOW_RTN1, opt_steps=0))
        assert q.B_low is not None
        assert q.B_low.scheme is Scheme.RTN
        assert q.B_low.bits == 1
        assert q.B_low.zero_points is not None


class TestReconstruction:
    """Test dequantized factors and dense updates."""

    def test_factors_concatenate_high_and_low(self) -> None:
        """Test that reconstruct_factors stacks both pairs to the full rank."""
        q = quantize_lora(synthetic(11, 32, 40, 5), QuantConfig(opt_steps=0))
        b, a = reconstruct_factors(q)
        assert b.shape == (32, 5)
        assert a.shape == (5, 40)
        np.testing.assert_allclose(b @ a, reconstruct_adapter(q), rtol=1e-5, atol=1e-6)

    def test_no_pairs(self) -> None:
        """Test that a layer without factors reconstructs to an empty rank."""
        q = QuantizedAdapter("empty", rows=3, cols=2, rank=1, h=0, config=QuantConfig())
        b, a = reconstruct_factors(q)
        assert b.shape == (3, 0)
        assert a.shape == (0, 2)
        np.testing.assert_array_equal(reconstruct_adapter(q), np.zeros((3, 2)))

    def test_shape_mismatch(self) -> None:
        """Test that errors against a differently shaped reference are refused."""
        q = baseline_quantize(synthetic(12, 16, 16, 2), "bin")
        with pytest.raises(ConfigError):
            layer_error(synthetic(12, 16, 20, 2), q)

    def test_error_report_layer_mismatch(self) -> None:
        """Test that reference and artifact must cover the same layers."""
        adapter = synthetic(13, 16, 16, 2)
        q = baseline_quantize(synthetic(14, 16, 16, 2), "bin")
        with pytest.raises(ConfigError, match="disagree"):
            error_report([adapter], [q], q.config)


class TestContainerQuantizer:
    """Test container-level runs."""

    def test_thread_count_does_not_change_output(self) -> None:
        """Test that one and several threads produce identical artifacts."""
        container = synthesize_container(SyntheticSpec(32, 32, 4, 5, seed=1))
        cfg = QuantConfig(opt_steps=10)
        serial = ContainerQuantizer(cfg, threads=1).quantize(container)
        parallel = ContainerQuantizer(cfg, threads=3).quantize(container)

        assert [q.layer_name for q in serial.adapters] == [q.layer_name for q in parallel.adapters]
        for x, y in zip(serial.adapters, parallel.adapters):
            for (_, mx), (_, my) in zip(x.matrices(), y.matrices()):
                assert mx.packed_codes == my.packed_codes

    def test_run_reports_every_layer(self) -> None:
        """Test that run() evaluates each layer and keeps metadata."""
        container = synthesize_container(SyntheticSpec(32, 32, 4, 3, seed=2))
        artifact, report = ContainerQuantizer(QuantConfig(opt_steps=0), threads=1).run(container)

        assert artifact.metadata["source"] == "synthetic"
        assert [layer.layer_name for layer in report.layers] == [
            q.layer_name for q in artifact.adapters
        ]
        assert report.mean_rel_error is not None

    def test_empty_container(self) -> None:
        """Test that an empty container gives an empty artifact and report."""
        artifact, report = ContainerQuantizer(QuantConfig(), threads=1).run(AdapterContainer())
        assert len(artifact) == 0
        assert report.layers == []
        assert report.mean_rel_error is None


class TestCompareMethods:
    """Test multi-configuration comparison."""

    def test_no_configs(self) -> None:
        """Test that an empty config list gives no reports."""
        container = synthesize_container(SyntheticSpec(16, 16, 2, 1, seed=0))
        assert compare_methods(container, [], threads=1) == []

    def test_baseline_bits(self) -> None:
        """Test AvgBits of BIN and 2-bit RTN on 128x128 layers."""
        container = synthesize_container(SyntheticSpec(128, 128, 4, 2, seed=0))
        configs = [baseline_config("bin"), baseline_config("rtn2")]
        reports = compare_methods(container, configs, threads=1)

        assert [r.label for r in reports] == ["bin", "rtn2"]
        assert reports[0].avg_bits == 1.125
        assert reports[1].avg_bits == 2.140625


class TestSweepConfigs:
    """Test expansion of comparison grids."""

    def test_grid_size_and_seeds(self) -> None:
        """Test that only random_split is repeated per seed."""
        configs = sweep_configs(
            [Strategy.SVD_RATIO, Strategy.RANDOM_SPLIT, Strategy.BASELINE_BIN, Strategy.BASELINE_RTN],
            ratios=[0.8, 0.9],
            bits=[2, 3],
            seeds=[0, 1],
        )
        by_strategy: dict[Strategy, list[QuantConfig]] = {}
        for cfg in configs:
            by_strategy.setdefault(cfg.strategy, []).append(cfg)

        assert len(by_strategy[Strategy.SVD_RATIO]) == 4
        assert len(by_strategy[Strategy.RANDOM_SPLIT]) == 8
        assert len(by_strategy[Strategy.BASELINE_BIN]) == 1
        assert [c.bits_high for c in by_strategy[Strategy.BASELINE_RTN]] == [2, 3]
        assert {c.seed for c in by_strategy[Strategy.RANDOM_SPLIT]} == {0, 1}
        assert {c.seed for c in by_strategy[Strategy.SVD_RATIO]} == {0}

    def test_static_h_strategies(self) -> None:
        """Test that svd_static_h and native splits expand over static h values."""
        configs = sweep_configs(
            [Strategy.SVD_STATIC_H, Strategy.NORM_SPLIT], ratios=[0.9], bits=[2], static_hs=[1, 2]
        )
        assert [(c.strategy, c.static_h) for c in configs] == [
            (Strategy.SVD_STATIC_H, 1),
            (Strategy.SVD_STATIC_H, 2),
            (Strategy.NORM_SPLIT, 1),
            (Strategy.NORM_SPLIT, 2),
        ]

    def test_static_h_required(self) -> None:
        """Test that svd_static_h without static h values is rejected."""
        with pytest.raises(ConfigError):
            sweep_configs([Strategy.SVD_STATIC_H], ratios=[0.9], bits=[2])

    def test_seeds_required(self) -> None:
        """Test that an empty seed list is rejected."""
        with pytest.raises(ConfigError):
            sweep_configs([Strategy.SVD_RATIO], ratios=[0.9], bits=[2], seeds=[])

    def test_seed_isolation(self) -> None:
        """Test that the seed does not affect deterministic strategies."""
        adapter = synthetic(15, 32, 32, 4)
        first = quantize_with_strategy(adapter, QuantConfig(strategy=Strategy.NORM_SPLIT, opt_steps=3, seed=0))
        second = quantize_with_strategy(adapter, QuantConfig(strategy=Strategy.NORM_SPLIT, opt_steps=3, seed=1))
        for (_, x), (_, y) in zip(first.matrices(), second.matrices()):
            assert x.packed_codes == y.packed_codes


@pytest.mark.slow
class TestStatisticalBehaviour:
    """Error orderings over many seeded synthetic adapters."""

    TRIALS = 100

    def test_mixed_precision_beats_binarization(self) -> None:
        """Test that 3@0.9 is more accurate than BIN on at least 95 of 100 adapters."""
        wins = 0
        for seed in range(self.TRIALS):
            adapter = synthetic(seed)
            lora = rel_error(adapter, quantize_lora(adapter, QuantConfig(rho=0.9, bits_high=3, opt_steps=20)))
            binary = rel_error(adapter, baseline_quantize(adapter, "bin"))
            wins += lora < binary
        assert wins >= 95

    def test_two_bit_beats_binarization_on_average(self) -> None:
        """Test that 2@0.9 has a lower mean error than BIN."""
        lora: list[float] = []
        binary: list[float] = []
        for seed in range(50):
            adapter = synthetic(seed)
            lora.append(rel_error(adapter, quantize_lora(adapter, QuantConfig(rho=0.9, bits_high=2))))
            binary.append(rel_error(adapter, baseline_quantize(adapter, "bin")))
        assert np.mean(lora) < np.mean(binary)

    def test_split_choice_ordering(self) -> None:
        """Test svd_static_h <= norm_split <= random_split on at least 80 of 100 adapters."""
        ordered = 0
        for seed in range(self.TRIALS):
            adapter = synthetic(seed, decay=0.5)
            errors = [
                rel_error(
                    adapter,
                    ablation_split(
                        adapter,
                        QuantConfig(strategy=strategy, static_h=2, bits_high=4, opt_steps=0, seed=seed),
                    ),
                )
                for strategy in (Strategy.SVD_STATIC_H, Strategy.NORM_SPLIT, Strategy.RANDOM_SPLIT)
            ]
            ordered += errors[0] <= errors[1] + 1e-9 and errors[1] <= errors[2] + 1e-9
        assert ordered >= 80

    def test_binarized_low_part_beats_pruning(self) -> None:
        """Test that keeping the binarized low part beats dropping it on 95 of 100 adapters."""
        wins = 0
        for seed in range(self.TRIALS):
            adapter = synthetic(seed)
            lora = rel_error(adapter, quantize_lora(adapter, QuantConfig(rho=0.5, opt_steps=0)))
            pruned = rel_error(
                adapter,
                prune_variant(adapter, QuantConfig(strategy=Strategy.PRUNE, rho=0.5, opt_steps=0)),
            )
            wins += lora < pruned
        assert wins >= 95

    def test_binarized_low_part_beats_rtn1(self) -> None:
        """Test that sign coding of the low part beats 1-bit RTN on 90 of 100 adapters."""
        wins = 0
        for seed in range(self.TRIALS):
            adapter = synthetic(seed)
            lora = rel_error(adapter, quantize_lora(adapter, QuantConfig(opt_steps=0)))
            rtn1 = rel_error(
                adapter,
                low_rtn1_variant(adapter, QuantConfig(strategy=Strategy.LOW_RTN1, opt_steps=0)),
            )
            wins += lora < rtn1
        assert wins >= 90

    def test_error_falls_as_ratio_grows(self) -> None:
        """Test that the mean 3-bit error decreases with rho."""
        means = []
        for rho in (0.3, 0.6, 0.9):
            errors = [
                rel_error(a, quantize_lora(a, QuantConfig(rho=rho, bits_high=3, opt_steps=0)))
                for a in (synthetic(seed) for seed in range(20))
            ]
            means.append(float(np.mean(errors)))
        assert means[0] > means[1] > means[2]
