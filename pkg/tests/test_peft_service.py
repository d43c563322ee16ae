"""Tests for LoRA/DoRA knowledge adapter densification."""

import json
import os
import tempfile

import numpy as np
import pytest

from src.models.adapter import AdapterKind, DoraModule, LoraModule
from src.models.checkpoint import Checkpoint
from src.models.errors import (
    DegenerateColumn,
    FormatError,
    ShapeMismatch,
    UnresolvedTarget,
    UsageError,
)
from src.models.tensor import NamedTensor
from src.services import peft_service
from src.services.checkpoint_io import CheckpointStore
from src.services.peft_service import PeftService

TARGET = "model.layers.0.self_attn.q_proj"
STORED = "base_model.model." + TARGET

A = np.array([[1.0, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, -1.0]])
B = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
W = np.array([[1.0, 2.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0], [2.0, 0.0, 0.0, 1.0]])


@pytest.fixture
def temp_dir():
    """Create a temporary adapter directory."""
    with tempfile.TemporaryDirectory() as path:
        yield path


@pytest.fixture
def service():
    """PEFT service over a single-threaded store."""
    return PeftService(CheckpointStore(threads=1), threads=1)


@pytest.fixture
def base():
    """Base checkpoint holding the adapted weight."""
    return Checkpoint([NamedTensor.from_values(TARGET + ".weight", W)])


def write_adapter(directory, config, a=A, b=B, magnitude=None):
    with open(os.path.join(directory, peft_service.CONFIG_FILENAME), "w") as f:
        json.dump(config, f)
    tensors = [
        NamedTensor.from_values(STORED + ".lora_A.weight", a),
        NamedTensor.from_values(STORED + ".lora_B.weight", b),
    ]
    if magnitude is not None:
        tensors.append(NamedTensor.from_values(STORED + ".lora_magnitude_vector", magnitude))
    weights = os.path.join(directory, peft_service.WEIGHTS_FILENAME)
    CheckpointStore().write_container(weights, tensors)


LORA_CONFIG = {"r": 2, "lora_alpha": 4, "target_modules": ["q_proj"], "use_dora": False}
DORA_CONFIG = dict(LORA_CONFIG, use_dora=True)


class TestDensifyLora:
    """Test plain low-rank updates."""

    def test_scaled_product(self):
        """Test (alpha / r) * B @ A."""
        update = peft_service.densify_lora(LoraModule(TARGET + ".weight", A, B, 4.0))
        np.testing.assert_allclose(update.to_float32(), 2.0 * B @ A)

    def test_inner_dims(self):
        """Test that B and A must chain."""
        with pytest.raises(ShapeMismatch):
            peft_service.densify_lora(LoraModule("w", A, np.ones((3, 3)), 4.0))

    def test_zero_b_is_zero_update(self):
        """Test that a freshly initialised adapter (B = 0) changes nothing."""
        update = peft_service.densify_lora(LoraModule("w", A, np.zeros_like(B), 4.0))
        assert update.shape == (3, 4)
        assert not update.to_float32().any()

    def test_linear_in_alpha(self):
        """Test that the update scales linearly with alpha."""
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 16))
        b = rng.standard_normal((16, 4))
        once = peft_service.densify_lora(LoraModule("w", a, b, 8.0)).to_float32()
        for factor in (0.5, 2.0, 3.0):
            scaled = peft_service.densify_lora(LoraModule("w", a, b, 8.0 * factor)).to_float32()
            np.testing.assert_allclose(scaled, factor * once, rtol=1e-5, atol=1e-6)


class TestDensifyDora:
    """Test magnitude/direction updates."""

    def test_unit_magnitude_ratio(self):
        """Test that magnitudes equal to the direction norms reduce to the low-rank update."""
        direction = W + 2.0 * B @ A
        magnitude = np.linalg.norm(direction, axis=1)
        mod = DoraModule(LoraModule(TARGET + ".weight", A, B, 4.0), magnitude)
        delta = peft_service.densify_dora(mod, NamedTensor.from_values(TARGET + ".weight", W))
        np.testing.assert_allclose(delta.to_float32(), 2.0 * B @ A, atol=1e-5)

    def test_doubled_magnitude(self):
        """Test that doubling every magnitude doubles the merged weight."""
        direction = W + 2.0 * B @ A
        magnitude = 2.0 * np.linalg.norm(direction, axis=1)
        mod = DoraModule(LoraModule(TARGET + ".weight", A, B, 4.0), magnitude)
        delta = peft_service.densify_dora(mod, NamedTensor.from_values(TARGET + ".weight", W))
        np.testing.assert_allclose(delta.to_float32(), 2.0 * direction - W, atol=1e-5)

    def test_magnitude_axis(self):
        """Test which axis the magnitude vector indexes."""
        assert peft_service.magnitude_axis((3, 4), 3) == 1
        assert peft_service.magnitude_axis((3, 4), 4) == 0
        assert peft_service.magnitude_axis((4, 4), 4) == 1

    def test_degenerate_column(self):
        """Test that a zero direction vector is a numeric error."""
        mod = DoraModule(LoraModule("w", A, np.zeros((3, 2)), 4.0), np.ones(3))
        with pytest.raises(DegenerateColumn):
            peft_service.densify_dora(mod, NamedTensor.from_values("w", np.zeros((3, 4))))

    def test_merged_rows_carry_magnitudes(self):
        """Test that every row of the merged 16x16 weight has the trained magnitude as its norm."""
        rng = np.random.default_rng(11)
        weight = rng.standard_normal((16, 16))
        for _ in range(20):
            a = rng.standard_normal((4, 16))
            b = rng.standard_normal((16, 4))
            magnitude = rng.uniform(0.1, 5.0, size=16)
            mod = DoraModule(LoraModule("w", a, b, 8.0), magnitude)
            delta = peft_service.densify_dora(mod, NamedTensor.from_values("w", weight))
            merged = weight.astype(np.float32).astype(np.float64) + delta.to_float32()
            np.testing.assert_allclose(np.linalg.norm(merged, axis=1), magnitude, rtol=1e-5)

    def test_untrained_module_is_near_zero(self):
        """Test that B = 0 with base row norms as magnitudes leaves the weight unchanged."""
        rng = np.random.default_rng(12)
        weight = rng.standard_normal((16, 16)).astype(np.float32)
        magnitude = np.linalg.norm(weight.astype(np.float64), axis=1)
        lora = LoraModule("w", rng.standard_normal((4, 16)), np.zeros((16, 4)), 8.0)
        mod = DoraModule(lora, magnitude)
        delta = peft_service.densify_dora(mod, NamedTensor.from_values("w", weight))
        assert np.linalg.norm(delta.to_float32()) < 1e-5 * np.linalg.norm(weight)


class TestLoadAdapterDirectory:
    """Test reading adapter directories."""

    def test_lora_directory(self, service, temp_dir, base):
        """Test densifying a LoRA directory against the base."""
        write_adapter(temp_dir, LORA_CONFIG)
        bundle = service.load_dir(temp_dir, base.names)
        assert not bundle.config.use_dora
        knowledge = service.densify(bundle, base)
        assert knowledge.kind is AdapterKind.KNOWLEDGE_ADAPTER
        assert knowledge.names == [TARGET + ".weight"]
        assert knowledge.base_digest == base.source_digest
        np.testing.assert_allclose(knowledge[TARGET + ".weight"].to_float32(), 2.0 * B @ A)
        assert json.loads(knowledge.metadata["adapter_config"])["r"] == 2

    def test_lora_without_base(self, service, temp_dir):
        """Test that LoRA densifies without a base, stripping the wrapper prefix."""
        write_adapter(temp_dir, LORA_CONFIG)
        knowledge = service.densify(service.load_dir(temp_dir))
        assert knowledge.names == [TARGET + ".weight"]

    def test_dora_directory(self, service, temp_dir, base):
        """Test densifying a DoRA directory."""
        magnitude = np.linalg.norm(W + 2.0 * B @ A, axis=1)
        write_adapter(temp_dir, DORA_CONFIG, magnitude=magnitude)
        bundle = service.load_dir(temp_dir, base.names)
        knowledge = service.densify(bundle, base)
        np.testing.assert_allclose(
            knowledge[TARGET + ".weight"].to_float32(), 2.0 * B @ A, atol=1e-5
        )

    def test_dora_needs_base(self, service, temp_dir):
        """Test that DoRA densification requires the base."""
        write_adapter(temp_dir, DORA_CONFIG, magnitude=np.ones(3))
        bundle = service.load_dir(temp_dir)
        with pytest.raises(UsageError):
            service.densify(bundle)

    def test_dora_missing_magnitude(self, service, temp_dir):
        """Test that a DoRA module without magnitudes is malformed."""
        write_adapter(temp_dir, DORA_CONFIG)
        with pytest.raises(FormatError):
            service.load_dir(temp_dir)

    def test_rank_mismatch(self, service, temp_dir):
        """Test that the config rank must match the stored factors."""
        write_adapter(temp_dir, dict(LORA_CONFIG, r=4))
        with pytest.raises(FormatError):
            service.load_dir(temp_dir)

    def test_missing_config(self, service, temp_dir):
        """Test that a directory without a config is rejected."""
        with pytest.raises(FormatError):
            service.load_dir(temp_dir)

    def test_unresolved_pattern(self, service, temp_dir, base):
        """Test that a target pattern matching nothing is reported."""
        write_adapter(temp_dir, dict(LORA_CONFIG, target_modules=["q_proj", "v_proj"]))
        with pytest.raises(UnresolvedTarget) as info:
            service.load_dir(temp_dir, base.names)
        assert info.value.patterns == ["v_proj"]

    def test_unresolved_module(self, service, temp_dir):
        """Test that a module without a base tensor is reported."""
        write_adapter(temp_dir, LORA_CONFIG)
        other = Checkpoint([NamedTensor.from_values("model.embed.weight", np.zeros((3, 4)))])
        with pytest.raises(UnresolvedTarget) as info:
            service.load_dir(temp_dir, other.names)
        assert info.value.patterns == ["q_proj"]
        assert info.value.modules == [STORED]
