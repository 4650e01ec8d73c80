"""
Unit tests for langswitch core types, geometry and file formats.
Run with: python -m pytest tests/ -v
"""

import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import sequence_io
from geometry import center_error, clip_box_to_frame, crop_resize, iou, zncc
from models import (
    ATTRIBUTES,
    OBSERVATION_STRIDE,
    BoundingBox,
    Frame,
    LanguageSentence,
    MetricCurve,
    Modality,
    SequenceAnnotation,
    SequenceRecord,
    TrackerObservation,
)


def _cell_iou(a, b):
    """Unit-cell counting over the integer lattice."""
    xs = range(int(min(a[0], b[0])), int(max(a[0] + a[2], b[0] + b[2])))
    ys = range(int(min(a[1], b[1])), int(max(a[1] + a[3], b[1] + b[3])))
    inter = union = 0
    for x in xs:
        for y in ys:
            in_a = a[0] <= x < a[0] + a[2] and a[1] <= y < a[1] + a[3]
            in_b = b[0] <= x < b[0] + b[2] and b[1] <= y < b[1] + b[3]
            inter += in_a and in_b
            union += in_a or in_b
    return inter / union if union else 0.0


def _record(name="seq0001", n=4, thermal_at=None):
    rng = np.random.default_rng(3)
    frames = []
    for t in range(n):
        pixels = np.round(rng.random((12, 16, 3)) * 255) / 255
        modality = Modality.THERMAL if t == thermal_at else Modality.RGB
        if modality == Modality.THERMAL:
            pixels[:] = pixels[:, :, :1]
        frames.append(Frame(pixels, modality))
    return SequenceRecord(
        name=name,
        frames=frames,
        gt=[BoundingBox(1.5 + t, 2.0, 5.25, 4.0) for t in range(n)],
        absent=[t == 2 for t in range(n)],
        attributes={"FOC", "SV"},
        sentence=LanguageSentence.from_text("the red circle on the left"),
    )


class TestBoundingBox:
    """Tests for the box type."""

    def test_derived_fields(self):
        box = BoundingBox(1, 2, 10, 4)
        assert box.x2 == 11
        assert box.y2 == 6
        assert box.center == (6, 4)
        assert box.area == 40

    def test_zero_area_is_valid(self):
        assert BoundingBox(3, 3, 0, 5).area == 0

    def test_negative_size_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(0, 0, -1, 2)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(float("nan"), 0, 1, 1)

    def test_scaled_keeps_center(self):
        box = BoundingBox(10, 10, 20, 10).scaled(2.0)
        assert box.center == (20, 15)
        assert (box.w, box.h) == (40, 20)


class TestFrameAndSentence:
    def test_frame_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            Frame(np.full((2, 2, 3), 1.5))

    def test_frame_rejects_wrong_channels(self):
        with pytest.raises(ValueError):
            Frame(np.zeros((2, 2)))

    def test_frame_is_read_only(self):
        frame = Frame(np.zeros((2, 2, 3)))
        with pytest.raises(ValueError):
            frame.pixels[0, 0, 0] = 1.0

    def test_sentence_from_text(self):
        sentence = LanguageSentence.from_text("The Blue  square")
        assert sentence.tokens == ("the", "blue", "square")
        assert len(sentence) == 3

    def test_empty_sentence_rejected(self):
        with pytest.raises(ValueError):
            LanguageSentence(())

    def test_record_length_mismatch(self):
        with pytest.raises(ValueError):
            SequenceRecord(
                name="x",
                frames=[Frame(np.zeros((2, 2, 3)))],
                gt=[BoundingBox(0, 0, 1, 1)] * 2,
                absent=[False] * 2,
                attributes=(),
                sentence=LanguageSentence.from_text("the box"),
            )

    def test_unknown_attribute_rejected(self):
        with pytest.raises(ValueError):
            SequenceAnnotation(
                "x", [BoundingBox(0, 0, 1, 1)], [False], {"XX"}, LanguageSentence.from_text("a")
            )


class TestObservation:
    def test_vector_layout(self):
        obs = TrackerObservation(
            confidence=0.25,
            box=BoundingBox(1, 2, 3, 4),
            result_image=np.full((30, 30, 3), 0.5),
            response_map=np.zeros((23, 23)),
        )
        vector = obs.to_vector()
        assert vector.shape == (OBSERVATION_STRIDE,) == (3746,)
        assert vector[0] == 0.25
        assert list(vector[1:5]) == [1, 2, 3, 4]
        assert np.all(vector[5:2705] == 0.5)

    def test_wrong_map_shape(self):
        with pytest.raises(ValueError):
            TrackerObservation(0.5, BoundingBox(0, 0, 1, 1), np.zeros((30, 30, 3)), np.zeros((22, 22)))

    def test_metric_curve_requires_increasing(self):
        with pytest.raises(ValueError):
            MetricCurve([0.0, 0.0], [1.0, 1.0])


class TestIoU:
    def test_identity(self):
        assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 5, 5)) == 0.0

    def test_partial_overlap(self):
        value = iou(BoundingBox(0, 0, 10, 10), BoundingBox(5, 5, 10, 10))
        assert value == pytest.approx(25 / 175, abs=1e-15)

    def test_degenerate_union(self):
        assert iou(BoundingBox(1, 1, 0, 0), BoundingBox(1, 1, 0, 0)) == 0.0

    def test_matches_cell_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = [int(v) for v in rng.integers(0, 12, 2)] + [int(v) for v in rng.integers(0, 8, 2)]
            b = [int(v) for v in rng.integers(0, 12, 2)] + [int(v) for v in rng.integers(0, 8, 2)]
            got = iou(BoundingBox(*a), BoundingBox(*b))
            assert abs(got - _cell_iou(a, b)) < 1e-12
            assert got == iou(BoundingBox(*b), BoundingBox(*a))


class TestCenterError:
    def test_identity(self):
        box = BoundingBox(3, 4, 5, 6)
        assert center_error(box, box) == 0.0

    def test_diagonal(self):
        assert center_error(BoundingBox(0, 0, 10, 10), BoundingBox(5, 5, 10, 10)) == pytest.approx(math.sqrt(50))

    def test_horizontal(self):
        assert center_error(BoundingBox(0, 0, 2, 2), BoundingBox(3, 0, 2, 2)) == 3.0


class TestCropResize:
    def test_uniform_region(self):
        frame = Frame(np.full((20, 20, 3), 0.4))
        out = crop_resize(frame, BoundingBox(2, 3, 7, 9), 5, 4)
        assert out.shape == (4, 5, 3)
        np.testing.assert_allclose(out, 0.4)

    def test_off_frame_is_zero(self):
        frame = Frame(np.full((20, 20, 3), 0.4))
        out = crop_resize(frame, BoundingBox(50, 50, 5, 5), 3, 3)
        assert np.all(out == 0.0)

    def test_checkerboard_to_single_pixel(self):
        pixels = np.zeros((2, 2, 3))
        pixels[0, 0] = pixels[1, 1] = 1.0
        out = crop_resize(Frame(pixels), BoundingBox(0, 0, 2, 2), 1, 1)
        np.testing.assert_allclose(out, 0.5)

    def test_identity_resample(self):
        rng = np.random.default_rng(1)
        pixels = rng.random((6, 8, 3))
        out = crop_resize(Frame(pixels), BoundingBox(0, 0, 8, 6), 8, 6)
        np.testing.assert_allclose(out, pixels, atol=1e-12)

    def test_clip_box(self):
        assert clip_box_to_frame(BoundingBox(-5, 2, 10, 30), 20, 20) == BoundingBox(0, 2, 5, 18)

    def test_zncc_flat_template_invalid(self):
        corr, valid = zncc(np.random.default_rng(0).random((3, 4, 4)), np.ones((4, 4)))
        assert not valid.any()
        assert np.all(corr == 0)


class TestSequenceFiles:
    """Round-trips and parse errors for the on-disk formats."""

    def test_sequence_round_trip(self):
        record = _record(thermal_at=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / record.name
            sequence_io.write_sequence(record, path)
            loaded = sequence_io.read_sequence(path)
            assert loaded.gt == record.gt
            assert loaded.absent == record.absent
            assert loaded.attributes == record.attributes
            assert loaded.sentence == record.sentence
            assert loaded.frames == record.frames
            assert loaded.frames[1].modality == Modality.THERMAL

    def test_rewrite_is_byte_stable(self):
        record = _record()
        with tempfile.TemporaryDirectory() as tmp:
            first, second = Path(tmp) / "a", Path(tmp) / "b"
            sequence_io.write_sequence(record, first)
            sequence_io.write_sequence(sequence_io.read_sequence(first), second)
            for name in ("groundtruth.txt", "absent.txt", "language.txt", "attributes.txt"):
                assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_groundtruth_count_mismatch(self):
        record = _record(n=4)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "seq"
            sequence_io.write_sequence(record, path)
            lines = (path / "groundtruth.txt").read_text().splitlines()
            (path / "groundtruth.txt").write_text("\n".join(lines[:3]) + "\n")
            with pytest.raises(sequence_io.ParseError) as exc:
                sequence_io.read_annotation(path)
            assert "groundtruth.txt" in str(exc.value)
            assert "3 ground-truth lines but 4 frames" in str(exc.value)

    def test_absent_single_line(self):
        record = _record(n=4)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "seq"
            sequence_io.write_sequence(record, path)
            (path / "absent.txt").write_text("0,0,1,0\n")
            assert sequence_io.read_annotation(path).absent == (False, False, True, False)

    def test_results_decoding(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "r.txt"
            path.write_text("3.5,2.0,10,12,0.91\n1,2,3,4\n")
            results = sequence_io.read_results(path)
            assert results[0] == (BoundingBox(3.5, 2, 10, 12), 0.91)
            assert results[1] == (BoundingBox(1, 2, 3, 4), 1.0)

    def test_results_round_trip(self):
        results = [(BoundingBox(0.1, 0.2, 3.3, 4.4), 0.5), (BoundingBox(1, 1, 1, 1), 1.0)]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "r.txt"
            sequence_io.write_results(path, results)
            assert sequence_io.read_results(path) == results

    def test_malformed_result_line(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "r.txt"
            path.write_text("1,2,3,4,0.5\n1,2,x,4,0.5\n")
            with pytest.raises(sequence_io.ParseError) as exc:
                sequence_io.read_results(path)
            assert exc.value.line == 2

    def test_observation_log(self):
        obs = TrackerObservation(0.75, BoundingBox(1, 2, 3, 4), np.zeros((30, 30, 3)), np.ones((23, 23)))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "s.obs"
            sequence_io.write_observation_log(path, [obs, obs])
            data = sequence_io.read_observation_log(path)
            assert data.shape == (2, 3746)
            assert data.dtype == np.float32
            assert data[1, 0] == 0.75

    def test_observation_log_bad_magic(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "s.obs"
            path.write_bytes(b"XXXX" + bytes(12))
            with pytest.raises(sequence_io.ParseError):
                sequence_io.read_observation_log(path)

    def test_manifest_listing_is_sorted(self):
        with tempfile.TemporaryDirectory() as tmp:
            sequence_io.write_manifest(tmp, [{"name": "b"}, {"name": "a"}], {"seed": 1})
            assert [p.name for p in sequence_io.list_sequences(tmp)] == ["a", "b"]
            assert sequence_io.read_manifest(tmp)["seed"] == 1

    def test_attribute_codes(self):
        assert len(ATTRIBUTES) == 17
