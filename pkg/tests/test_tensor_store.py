"""Tests for the .qla and .lqz container formats."""

import json
import struct
from pathlib import Path
from tempfile import TemporaryDirectory
from typing import Any

import numpy as np
import pytest
from safetensors import safe_open
from safetensors.numpy import load_file, save_file

from lorapack.errors import ConfigError, ContainerFormatError
from lorapack.models import AdapterContainer, LoraAdapter, QuantConfig, QuantizedContainer
from lorapack.pipeline import quantize_lora
from lorapack.synthetic import synthesize_adapter
from lorapack.tensor_store import (
    adapter_header_bytes,
    collect_lora_pairs,
    read_container,
    read_quantized,
    read_tensors,
    write_container,
    write_quantized,
    write_tensors,
)


def sample_container() -> AdapterContainer:
    rng = np.random.default_rng(0)
    adapters = [
        synthesize_adapter(rng, "model.layers.1.q_proj", 24, 16, 4, 0.7),
        synthesize_adapter(rng, "model.layers.0.q_proj", 24, 16, 4, 0.7),
    ]
    return AdapterContainer(adapters=adapters, metadata={"base_model": "tiny"})


class TestReadContainer:
    """Test reading adapter containers."""

    def test_pairs_by_prefix(self) -> None:
        """Test that l0.lora_B (8x2) and l0.lora_A (2x4) form one adapter of rank 2."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            tensors = {
                "l0.lora_B": np.ones((8, 2), dtype=np.float32),
                "l0.lora_A": np.ones((2, 4), dtype=np.float16),
            }
            save_file(tensors, str(path), metadata={"base_model": "tiny"})
            container = read_container(path)

        assert len(container) == 1
        assert container.metadata == {"base_model": "tiny"}
        adapter = container.adapters[0]
        assert adapter.layer_name == "l0"
        assert adapter.rank == 2
        assert adapter.B.shape == (8, 2)
        assert adapter.A.dtype == np.float32

    def test_unpaired_tensor(self) -> None:
        """Test that a B without its A is rejected."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            save_file({"l0.lora_B": np.zeros((8, 2), dtype=np.float32)}, str(path))
            with pytest.raises(ContainerFormatError, match="Unpaired tensor"):
                read_container(path)

    def test_rank_mismatch(self) -> None:
        """Test that B.cols != A.rows is rejected."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            tensors = {
                "l0.lora_B": np.zeros((8, 2), dtype=np.float32),
                "l0.lora_A": np.zeros((3, 4), dtype=np.float32),
            }
            save_file(tensors, str(path))
            with pytest.raises(ContainerFormatError):
                read_container(path)

    def test_unknown_suffix(self) -> None:
        """Test that tensors other than lora_A/lora_B are rejected."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            save_file({"l0.bias": np.zeros((1, 2), dtype=np.float32)}, str(path))
            with pytest.raises(ContainerFormatError, match="Unrecognized"):
                read_container(path)

    def test_unsupported_dtype(self) -> None:
        """Test that integer tensors are rejected."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            save_file({"l0.lora_B": np.zeros((1, 1), dtype=np.int32)}, str(path))
            with pytest.raises(ContainerFormatError, match="dtype"):
                read_container(path)

    def test_non_2d_tensor(self) -> None:
        """Test that 1-D factors are rejected."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            save_file({"l0.lora_B": np.zeros(4, dtype=np.float32)}, str(path))
            with pytest.raises(ContainerFormatError, match="2-D"):
                read_container(path)

    def test_truncated_file(self) -> None:
        """Test that a file shorter than the length prefix is rejected."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            path.write_bytes(b"\x01\x02")
            with pytest.raises(ContainerFormatError, match="Malformed header"):
                read_container(path)

    def test_malformed_json(self) -> None:
        """Test that a header that is not JSON is rejected."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            path.write_bytes(struct.pack("<Q", 8) + b"{nope   ")
            with pytest.raises(ContainerFormatError, match="Malformed header"):
                read_container(path)

    def test_missing_file(self) -> None:
        """Test that a missing path raises OSError."""
        with TemporaryDirectory() as tmpdir, pytest.raises(OSError):
            read_container(Path(tmpdir) / "missing.qla")

    def test_rejects_quantized_artifact(self) -> None:
        """Test that an .lqz file is not accepted as adapters."""
        container = sample_container()
        cfg = QuantConfig(opt_steps=0)
        artifact = QuantizedContainer(cfg, [quantize_lora(a, cfg) for a in container.adapters])
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.lqz"
            write_quantized(path, artifact)
            with pytest.raises(ContainerFormatError, match="quantized"):
                read_container(path)


class TestWriteContainer:
    """Test writing adapter containers."""

    def test_round_trip_f32(self) -> None:
        """Test that binary32 storage is exact and metadata survives."""
        container = sample_container()
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            write_container(container, path)
            loaded = read_container(path)

        assert loaded.metadata == {"base_model": "tiny"}
        assert [a.layer_name for a in loaded.adapters] == [
            "model.layers.0.q_proj",
            "model.layers.1.q_proj",
        ]
        original = {a.layer_name: a for a in container.adapters}
        for adapter in loaded.adapters:
            np.testing.assert_array_equal(adapter.B, original[adapter.layer_name].B)
            np.testing.assert_array_equal(adapter.A, original[adapter.layer_name].A)

    def test_round_trip_f16(self) -> None:
        """Test that binary16 storage rounds to nearest even."""
        container = sample_container()
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            write_container(container, path, "F16")
            loaded = read_container(path)

        expected = container.adapters[1].B.astype(np.float16).astype(np.float32)
        np.testing.assert_array_equal(loaded.adapters[0].B, expected)

    def test_readable_by_safetensors(self) -> None:
        """Test that a written container loads with safetensors alone."""
        container = sample_container()
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            write_container(container, path)
            tensors = load_file(str(path))

        assert sorted(tensors) == [
            "model.layers.0.q_proj.lora_A",
            "model.layers.0.q_proj.lora_B",
            "model.layers.1.q_proj.lora_A",
            "model.layers.1.q_proj.lora_B",
        ]
        np.testing.assert_array_equal(
            tensors["model.layers.1.q_proj.lora_B"], container.adapters[0].B
        )

    def test_empty_container(self) -> None:
        """Test that an empty container is a valid file with no tensors."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "empty.qla"
            write_container(AdapterContainer(), path)
            raw = read_tensors(path)
            loaded = read_container(path)

        assert raw.tensors == {}
        assert len(loaded) == 0

    def test_single_value_size(self) -> None:
        """Test that a 1x1 binary32 factor takes 4 data bytes."""
        container = AdapterContainer([LoraAdapter("l", np.ones((1, 1)), np.ones((1, 1)))])
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            size = write_container(container, path)
            raw = read_tensors(path)

        assert raw.tensors["l.lora_B"].nbytes == 4
        assert size == raw.header_bytes + 8

    def test_f16_data_section_size(self) -> None:
        """Test that a 16x4096 binary16 tensor occupies 131072 bytes."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "t.qla"
            size = write_tensors(path, {"t.lora_A": np.zeros((16, 4096), dtype="<f2")}, {})
            raw = read_tensors(path)

        assert size - raw.header_bytes == 131072

    def test_deterministic_bytes(self) -> None:
        """Test that equal containers produce equal files regardless of adapter order."""
        container = sample_container()
        reordered = AdapterContainer(list(reversed(container.adapters)), container.metadata)
        with TemporaryDirectory() as tmpdir:
            first, second = Path(tmpdir) / "1.qla", Path(tmpdir) / "2.qla"
            write_container(container, first)
            write_container(reordered, second)
            assert first.read_bytes() == second.read_bytes()

    def test_f16_overflow(self) -> None:
        """Test that values beyond the binary16 range are rejected."""
        container = AdapterContainer([LoraAdapter("l", np.full((2, 1), 1e6), np.ones((1, 2)))])
        with TemporaryDirectory() as tmpdir, pytest.raises(ContainerFormatError, match="overflows"):
            write_container(container, Path(tmpdir) / "a.qla", "F16")

    def test_invalid_dtype(self) -> None:
        """Test that storage dtypes other than F16/F32 are a configuration error."""
        with TemporaryDirectory() as tmpdir, pytest.raises(ConfigError):
            write_container(sample_container(), Path(tmpdir) / "a.qla", "F64")

    def test_reserved_metadata_key(self) -> None:
        """Test that user metadata cannot claim the layout key."""
        with TemporaryDirectory() as tmpdir, pytest.raises(ContainerFormatError, match="reserved"):
            write_tensors(Path(tmpdir) / "a.qla", {}, {"__lqz__": "{}"})

    def test_header_size_prediction(self) -> None:
        """Test adapter_header_bytes against a written binary16 container."""
        container = AdapterContainer(sample_container().adapters)
        shapes = [(a.layer_name, a.rows, a.cols, a.rank) for a in container.adapters]
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            write_container(container, path, "F16")
            assert read_tensors(path).header_bytes == adapter_header_bytes(shapes)


class TestCollectLoraPairs:
    """Test adapter ordering."""

    def test_lexicographic(self) -> None:
        """Test that layers come back sorted by name."""
        b, a = np.ones((2, 1)), np.ones((1, 2))
        container = AdapterContainer([LoraAdapter("b", b, a), LoraAdapter("a", b, a)])
        assert [x.layer_name for x in collect_lora_pairs(container)] == ["a", "b"]

    def test_empty(self) -> None:
        """Test that an empty container yields no pairs."""
        assert collect_lora_pairs(AdapterContainer()) == []

    def test_duplicate_layer(self) -> None:
        """Test that duplicate layer names fail at construction."""
        b, a = np.ones((2, 1)), np.ones((1, 2))
        with pytest.raises(ValueError, match="Duplicate"):
            AdapterContainer([LoraAdapter("a", b, a), LoraAdapter("a", b, a)])


class TestQuantizedArtifact:
    """Test the .lqz codec."""

    @staticmethod
    def artifact(cfg: QuantConfig) -> QuantizedContainer:
        container = sample_container()
        return QuantizedContainer(
            cfg, [quantize_lora(a, cfg) for a in container.adapters], container.metadata
        )

    def test_round_trip(self) -> None:
        """Test that every stored field survives a write and read."""
        cfg = QuantConfig(rho=0.8, bits_high=3, group_size=8, opt_steps=0)
        artifact = self.artifact(cfg)
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.lqz"
            write_quantized(path, artifact)
            loaded = read_quantized(path)

        assert loaded.config == cfg
        assert loaded.metadata == artifact.metadata
        for before, after in zip(artifact.adapters, loaded.adapters):
            assert after.layer_name == before.layer_name
            assert after.h == before.h
            for (role, q_before), (role_after, q_after) in zip(before.matrices(), after.matrices()):
                assert role == role_after
                assert q_after.packed_codes == q_before.packed_codes
                np.testing.assert_array_equal(q_after.scales, q_before.scales)
                if q_before.zero_points is not None:
                    assert q_after.zero_points is not None
                    np.testing.assert_array_equal(q_after.zero_points, q_before.zero_points)

    def test_layout_is_metadata_json(self) -> None:
        """Test that the layout sits in the safetensors metadata as one JSON string."""
        artifact = self.artifact(QuantConfig(opt_steps=0))
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.lqz"
            write_quantized(path, artifact)
            with safe_open(str(path), framework="numpy") as f:
                metadata = f.metadata()
                names = set(f.keys())

        assert set(metadata) == {"__lqz__"}
        layout = json.loads(metadata["__lqz__"])
        assert layout["metadata"] == {"base_model": "tiny"}
        assert sorted(layout["layers"]) == ["model.layers.0.q_proj", "model.layers.1.q_proj"]
        assert "model.layers.0.q_proj.B_high.codes" in names

    def test_rewrite_is_byte_identical(self) -> None:
        """Test that reading and rewriting an artifact reproduces its bytes."""
        artifact = self.artifact(QuantConfig(opt_steps=0))
        with TemporaryDirectory() as tmpdir:
            first, second = Path(tmpdir) / "1.lqz", Path(tmpdir) / "2.lqz"
            write_quantized(first, artifact)
            write_quantized(second, read_quantized(first))
            assert first.read_bytes() == second.read_bytes()

    def test_passthrough_round_trip(self) -> None:
        """Test that 16-bit passthrough matrices need no scales."""
        artifact = self.artifact(QuantConfig(rho=1.0, bits_high=16, opt_steps=0))
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.lqz"
            write_quantized(path, artifact)
            raw = read_tensors(path)
            loaded = read_quantized(path)

        assert not any(name.endswith(".scales") for name in raw.tensors)
        assert loaded.adapters[0].B_high is not None
        assert loaded.adapters[0].B_high.bits == 32

    def test_not_an_artifact(self) -> None:
        """Test that a plain .qla is rejected by read_quantized."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.qla"
            write_container(sample_container(), path)
            with pytest.raises(ContainerFormatError, match="__lqz__"):
                read_quantized(path)

    def _rewrite(self, source: Path, target: Path, edit: Any) -> None:
        raw = read_tensors(source)
        write_tensors(target, edit(dict(raw.tensors)), raw.metadata, raw.layout)

    def test_corrupt_packing_length(self) -> None:
        """Test that a shortened code stream is reported."""
        artifact = self.artifact(QuantConfig(opt_steps=0))
        with TemporaryDirectory() as tmpdir:
            good, bad = Path(tmpdir) / "good.lqz", Path(tmpdir) / "bad.lqz"
            write_quantized(good, artifact)

            def shorten(tensors: dict[str, Any]) -> dict[str, Any]:
                name = "model.layers.0.q_proj.B_high.codes"
                tensors[name] = tensors[name][:-1]
                return tensors

            self._rewrite(good, bad, shorten)
            with pytest.raises(ContainerFormatError, match="Corrupt packing length"):
                read_quantized(bad)

    def test_codes_must_be_bytes(self) -> None:
        """Test that a code stream stored with another dtype is rejected."""
        artifact = self.artifact(QuantConfig(opt_steps=0))
        with TemporaryDirectory() as tmpdir:
            good, bad = Path(tmpdir) / "good.lqz", Path(tmpdir) / "bad.lqz"
            write_quantized(good, artifact)

            def widen(tensors: dict[str, Any]) -> dict[str, Any]:
                name = "model.layers.0.q_proj.B_high.codes"
                tensors[name] = tensors[name].astype(np.float32)
                return tensors

            self._rewrite(good, bad, widen)
            with pytest.raises(ContainerFormatError, match="flat"):
                read_quantized(bad)

    def test_stray_tensor(self) -> None:
        """Test that tensors not described by the layout are rejected."""
        artifact = self.artifact(QuantConfig(opt_steps=0))
        with TemporaryDirectory() as tmpdir:
            good, bad = Path(tmpdir) / "good.lqz", Path(tmpdir) / "bad.lqz"
            write_quantized(good, artifact)
            self._rewrite(good, bad, lambda t: {**t, "extra.codes": np.zeros(1, dtype=np.uint8)})
            with pytest.raises(ContainerFormatError, match="not described"):
                read_quantized(bad)

    def test_missing_tensor(self) -> None:
        """Test that a missing scale tensor is reported."""
        artifact = self.artifact(QuantConfig(opt_steps=0))
        with TemporaryDirectory() as tmpdir:
            good, bad = Path(tmpdir) / "good.lqz", Path(tmpdir) / "bad.lqz"
            write_quantized(good, artifact)
            self._rewrite(
                good, bad, lambda t: {k: v for k, v in t.items() if not k.endswith("A_low.scales")}
            )
            with pytest.raises(ContainerFormatError, match="Missing tensor"):
                read_quantized(bad)

    def test_unknown_format_version(self) -> None:
        """Test that a foreign format_version is rejected."""
        artifact = self.artifact(QuantConfig(opt_steps=0))
        with TemporaryDirectory() as tmpdir:
            good, bad = Path(tmpdir) / "good.lqz", Path(tmpdir) / "bad.lqz"
            write_quantized(good, artifact)
            raw = read_tensors(good)
            assert raw.layout is not None
            layout = {**raw.layout, "format_version": "99"}
            write_tensors(bad, raw.tensors, raw.metadata, layout)
            with pytest.raises(ContainerFormatError, match="format_version"):
                read_quantized(bad)

    def test_malformed_layout(self) -> None:
        """Test that a layout entry that is not JSON is rejected."""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "a.lqz"
            save_file({}, str(path), metadata={"__lqz__": "{broken"})
            with pytest.raises(ContainerFormatError, match="Malformed __lqz__"):
                read_quantized(path)
