import json
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cfdebug.exceptions import FormatError, InputError, NumericError
from cfdebug.model import (
    ClassifierHandle,
    MaskableCNN,
    PredictionRecord,
    binary_activation_map,
    load_classifier,
    read_records,
    save_classifier,
    write_records,
)

from conftest import make_tiny_handle, tiny_image

GOLDEN_PATH = Path(__file__).parent / "golden" / "golden_record.json"


class TestPredict:
    def test_uniform_logits_tie_breaks_to_smallest_index(self):
        handle = make_tiny_handle(0, label_count=5)
        with torch.no_grad():
            handle.net.head.weight.zero_()
            handle.net.head.bias.zero_()
        record = handle.predict(tiny_image(1))
        assert record.inferred_class == 0
        assert record.confidence == pytest.approx(1 / 5)

    def test_all_ones_mask_equals_no_mask(self):
        handle = make_tiny_handle(1)
        img = tiny_image(2)
        assert np.array_equal(handle.masked_logits(img, np.ones(8)), handle.logits(img))

    def test_record_fields_consistent(self):
        handle = make_tiny_handle(2)
        record = handle.predict(tiny_image(3), image_id="a", true_class=2)
        assert 0 <= record.inferred_class < 4
        assert 0.0 <= record.confidence <= 1.0
        assert record.gap_features.shape == (8,)
        assert set(np.unique(record.activation_map)) <= {0, 1}
        assert (record.gap_features >= 0).all()

    def test_golden_record(self):
        torch.manual_seed(123)
        net = MaskableCNN(label_count=5, filter_count=8, widths=(8,), in_channels=3, image_size=8)
        image = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(456))
        record = ClassifierHandle(net).predict(image, image_id="golden")
        golden = json.loads(GOLDEN_PATH.read_text())
        assert record.inferred_class == golden["inferred_class"]
        assert record.confidence == pytest.approx(golden["confidence"], abs=1e-6)
        np.testing.assert_allclose(record.gap_features, golden["gap_features"], atol=1e-6)
        assert record.activation_map.tolist() == golden["activation_map"]

    def test_shape_mismatch_raises_input_error(self):
        handle = make_tiny_handle(3)
        with pytest.raises(InputError):
            handle.predict(torch.rand(3, 16, 16))

    def test_nonfinite_input_raises_numeric_error(self):
        handle = make_tiny_handle(4)
        img = tiny_image(5)
        img[0, 0, 0] = float("nan")
        with pytest.raises(NumericError):
            handle.predict(img)

    def test_determinism(self):
        handle = make_tiny_handle(5)
        img = tiny_image(6)
        a = handle.logits(img)
        b = handle.logits(img)
        assert np.array_equal(a, b)


class TestBinaryActivationMap:
    def test_zeros_stay_zero_at_default_threshold(self):
        # sigmoid(0) = 0.5 is not strictly greater than 0.5
        assert binary_activation_map(np.zeros(5), 0.5).tolist() == [0] * 5

    def test_saturation(self):
        assert binary_activation_map(np.array([10.0, 0.0, 0.0]), 0.5).tolist() == [1, 0, 0]

    def test_matches_elementwise_evaluation(self):
        rng = np.random.default_rng(0)
        g = rng.uniform(0, 5, size=32)
        t = 0.7
        expected = [1 if 1 / (1 + np.exp(-v)) > t else 0 for v in g]
        assert binary_activation_map(g, t).tolist() == expected

    def test_invalid_threshold(self):
        with pytest.raises(InputError):
            binary_activation_map(np.zeros(3), 0.0)

    def test_nonfinite_raises(self):
        with pytest.raises(NumericError):
            binary_activation_map(np.array([1.0, np.inf]), 0.5)

    @settings(max_examples=30, deadline=None)
    @given(
        scale=st.floats(min_value=0.1, max_value=10.0),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    def test_invariant_to_monotone_rescaling_preserving_sides(self, scale, seed):
        # Rescaling that keeps each entry on its side of the threshold
        # (here: positive scaling of non-negative inputs against t=0.5,
        # whose g-space boundary is 0) cannot change the map.
        rng = np.random.default_rng(seed)
        g = rng.uniform(0, 3, size=16)
        base = binary_activation_map(g, 0.5)
        assert binary_activation_map(g * scale, 0.5).tolist() == base.tolist()


class TestMaskedLogits:
    def test_zero_mask_gives_zero_gap(self):
        handle = make_tiny_handle(6)
        x = tiny_image(7).unsqueeze(0)
        with torch.no_grad():
            _, gap, _ = handle.net.forward_parts(x, mask=torch.zeros(8))
        assert gap.abs().sum().item() == 0.0

    def test_zero_mask_logits_equal_head_on_zero_features(self):
        handle = make_tiny_handle(7)
        logits = handle.masked_logits(tiny_image(8), np.zeros(8))
        w, b = handle.head_weights()
        np.testing.assert_allclose(logits, b, atol=1e-7)

    def test_mask_length_checked(self):
        handle = make_tiny_handle(8)
        with pytest.raises(InputError):
            handle.masked_logits(tiny_image(9), np.ones(5))

    def test_masked_out_channels_upstream_values_irrelevant(self):
        # Zeroed channels must silence their upstream parameters entirely.
        handle = make_tiny_handle(9)
        img = tiny_image(10)
        mask = np.ones(8)
        mask[3] = 0.0
        before = handle.masked_logits(img, mask)
        final_conv = [m for m in handle.net.features if isinstance(m, torch.nn.Conv2d)][-1]
        with torch.no_grad():
            final_conv.weight[3] += 7.0
            final_conv.bias[3] -= 2.0
        after = handle.masked_logits(img, mask)
        assert np.array_equal(before, after)

    def test_fractional_mask_matches_head_space_reduction(self):
        # Gate after the final ReLU + linear pooling/head means gated logits
        # equal W (mask * gap) + b; the optimizer relies on this identity.
        handle = make_tiny_handle(10)
        img = tiny_image(11)
        gap = handle.gap_features(img).astype(np.float64)
        w, b = handle.head_weights()
        rng = np.random.default_rng(1)
        for _ in range(5):
            mask = rng.uniform(0, 1, size=8)
            np.testing.assert_allclose(
                handle.masked_logits(img, mask), w @ (mask * gap) + b, atol=1e-5
            )


class TestRecordSerialization:
    def test_jsonl_round_trip(self, tmp_path):
        handle = make_tiny_handle(11)
        records = [handle.predict(tiny_image(s), image_id=f"img{s}", true_class=s % 4) for s in range(4)]
        path = tmp_path / "records.jsonl"
        assert write_records(records, path) == 4
        loaded = read_records(path)
        for a, b in zip(records, loaded):
            assert a.image_id == b.image_id
            assert a.inferred_class == b.inferred_class
            assert a.true_class == b.true_class
            assert a.confidence == b.confidence
            np.testing.assert_array_equal(a.activation_map, b.activation_map)
            np.testing.assert_allclose(a.gap_features, b.gap_features, rtol=1e-6)

    def test_version_checked(self):
        bad = PredictionRecord("x", 0, 0.5, np.zeros(2), np.zeros(2, dtype=np.uint8)).to_dict()
        bad["record_version"] = 0
        with pytest.raises(FormatError):
            PredictionRecord.from_dict(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_records(tmp_path / "absent.jsonl")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        handle = make_tiny_handle(12)
        img = tiny_image(13)
        save_classifier(handle, tmp_path / "m.pt")
        loaded = load_classifier(tmp_path / "m.pt")
        assert np.array_equal(loaded.logits(img), handle.logits(img))
        assert loaded.filter_count == handle.filter_count

    def test_not_a_checkpoint(self, tmp_path):
        torch.save({"seed": 1}, tmp_path / "junk.pt")
        with pytest.raises(FormatError):
            load_classifier(tmp_path / "junk.pt")
