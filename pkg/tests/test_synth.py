"""Tests for the synthetic scene generator and sentence templates."""

import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import sequence_io
from geometry import iou
from models import LanguageSentence, Modality
from synth import (
    DISTRACTOR_CONFIDENCE,
    DISTRACTOR_IOU,
    VOCABULARY,
    ChallengeEvent,
    SceneRenderer,
    SceneSpec,
    SceneValidationError,
    ShapeSpec,
    Trajectory,
    balanced_attribute_plan,
    describe,
    generate,
    has_spatial_clause,
    is_unambiguous,
    make_distractor_windows,
    make_grounding_samples,
    make_switch_corpus,
    matching_objects,
    random_scene,
    twin_scene,
)


def _static_spec(events=(), length=6, distractors=(), x=40.0, y=60.0, size=16.0):
    target = ShapeSpec("square", "red", size, Trajectory.static(x, y))
    return SceneSpec(seed=7, length=length, target=target, frame_size=(96, 96),
                     distractors=distractors, events=events)


class TestTrajectory:
    def test_static(self):
        assert Trajectory.static(3, 4).position(10) == (3.0, 4.0)

    def test_piecewise_linear(self):
        path = Trajectory(((0, 0), (10, 0), (10, 10)), (2.0, 5.0))
        assert path.position(0) == (0.0, 0.0)
        assert path.position(2.5) == (5.0, 0.0)
        assert path.position(6) == (10.0, 5.0)
        assert path.position(100) == (10.0, 10.0)

    def test_speed_count_mismatch(self):
        with pytest.raises(SceneValidationError):
            Trajectory(((0, 0), (1, 1)), ())


class TestGenerate:
    def test_static_scene(self):
        record = generate(_static_spec())
        assert len(set(record.gt)) == 1
        assert not any(record.absent)
        assert record.attributes == frozenset()

    def test_full_occlusion_marks_absent(self):
        spec = _static_spec([ChallengeEvent("FOC", 10, 20, {"gray": 0.15})], length=25)
        record = generate(spec)
        assert all(record.absent[10:21])
        assert not any(record.absent[:10])
        assert not any(record.absent[21:])
        assert "FOC" in record.attributes

    def test_event_outside_range(self):
        spec = _static_spec([ChallengeEvent("SV", 3, 10)], length=6)
        with pytest.raises(SceneValidationError):
            SceneRenderer(spec)

    def test_same_seed_same_png_bytes(self):
        spec = random_scene(5, ["BC", "AS"], (64, 64), length=5)
        with tempfile.TemporaryDirectory() as tmp:
            a, b = Path(tmp) / "a", Path(tmp) / "b"
            sequence_io.write_sequence(generate(spec, "s"), a)
            sequence_io.write_sequence(generate(spec, "s"), b)
            for i in range(5):
                path_a = sequence_io.frame_path(a, i)
                assert path_a.read_bytes() == sequence_io.frame_path(b, i).read_bytes()

    def test_modality_switch(self):
        record = generate(_static_spec([ChallengeEvent("MS", 2, 3)]))
        assert record.frames[2].modality == Modality.THERMAL
        assert record.frames[1].modality == Modality.RGB
        pixels = record.frames[3].pixels
        assert np.array_equal(pixels[..., 0], pixels[..., 1])
        assert "MS" in record.attributes

    def test_fast_motion_is_derived(self):
        record = generate(_static_spec([ChallengeEvent("FM", 2, 2, {"dx": 30.0})]))
        assert "FM" in record.attributes

    def test_absent_implies_occlusion_or_out_of_view(self):
        for attributes in (["FOC"], ["OV"], ["FM"], ["CM", "POC"]):
            for seed in range(3):
                spec = random_scene(seed, attributes, (96, 96), length=40)
                renderer = SceneRenderer(spec)
                for t in range(spec.length):
                    if renderer.absent(t):
                        assert any(
                            e.attribute in ("FOC", "OV") and e.active(t) for e in spec.events
                        ), (attributes, seed, t)

    def test_boxes_never_negative(self):
        spec = random_scene(11, ["SV", "DEF", "ROT", "ARC"], (96, 96), length=30)
        for box in generate(spec).gt:
            assert box.w >= 0 and box.h >= 0


class TestDescribe:
    def test_spatial_clause_tie_goes_horizontal(self):
        spec = SceneSpec(7, 1, ShapeSpec("square", "red", 10, Trajectory.static(10, 10)), (100, 100))
        assert describe(spec).text == "the red square on the left"

    def test_centered_target_has_no_spatial_clause(self):
        spec = SceneSpec(7, 1, ShapeSpec("square", "red", 10, Trajectory.static(50, 50)), (100, 100))
        assert describe(spec).text == "the red square"

    def test_relation_clause(self):
        target = ShapeSpec("circle", "green", 12, Trajectory.static(30, 50))
        other = ShapeSpec("square", "blue", 12, Trajectory.static(70, 52))
        spec = SceneSpec(7, 1, target, (100, 100), distractors=(other,))
        assert describe(spec).text == "the green circle to the left of the blue square"

    def test_twin_is_disambiguated(self):
        twin = ShapeSpec("square", "red", 16, Trajectory.static(75, 60))
        spec = _static_spec(distractors=(twin,), x=20, y=60)
        sentence = describe(spec)
        assert has_spatial_clause(sentence)
        assert matching_objects(spec, sentence) == [0]

    def test_ambiguous_sentence_detected(self):
        twin = ShapeSpec("square", "red", 16, Trajectory.static(75, 60))
        spec = _static_spec(distractors=(twin,), x=20, y=60)
        assert not is_unambiguous(spec, LanguageSentence.from_text("the red square"))

    def test_random_scenes_are_unambiguous(self):
        for seed in range(20):
            spec = random_scene(seed, (), (96, 96), length=1, static=True)
            sentence = describe(spec)
            assert is_unambiguous(spec, sentence)
            assert all(token in VOCABULARY for token in sentence.tokens)

    def test_vocabulary_is_closed(self):
        assert len(VOCABULARY) <= 64


class TestDatasets:
    def test_plan_covers_every_attribute(self):
        plan = balanced_attribute_plan(0, 40)
        counts = {code: sum(code in p for p in plan) for code in {c for p in plan for c in p}}
        assert len(counts) == 17
        assert min(counts.values()) >= 2

    def test_grounding_samples(self):
        samples = make_grounding_samples(3, 4, (64, 64))
        assert len(samples) == 4
        frame, sentence, gt = samples[0]
        assert (frame.width, frame.height) == (64, 64)
        assert sentence.tokens[0] == "the"
        assert gt.area > 0

    def test_empty_switch_corpus(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = make_switch_corpus(0, 0, tmp)
            assert sequence_io.read_manifest(out)["sequences"] == []

    def test_switch_corpus_layout(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = make_switch_corpus(1, 2, tmp, length=8, frame_size=(64, 64))
            for entry in sequence_io.read_manifest(out)["sequences"]:
                name = entry["name"]
                log = sequence_io.read_observation_log(out / "logs" / f"{name}.obs")
                ious = sequence_io.read_values(out / "logs" / f"{name}.iou.txt")
                assert log.shape == (8, 3746)
                assert len(ious) == 8
                assert all(0.0 <= v <= 1.0 for v in ious)

    def test_static_corpus_is_tracked_exactly(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = make_switch_corpus(0, 2, tmp, length=12, plan=[[], []], static=True)
            for entry in sequence_io.read_manifest(out)["sequences"]:
                ious = sequence_io.read_values(out / "logs" / f"{entry['name']}.iou.txt")
                assert all(v == 1.0 for v in ious)

    def test_full_occlusion_loses_the_target(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = make_switch_corpus(0, 2, tmp, plan=[["FOC"], ["FOC"]])
            lowest = min(
                min(sequence_io.read_values(out / "logs" / f"{entry['name']}.iou.txt"))
                for entry in sequence_io.read_manifest(out)["sequences"]
            )
        assert lowest < 0.5


class TestDistractors:
    def test_twin_matches_the_target(self):
        spec = twin_scene(3)
        twin = spec.distractors[0]
        target = spec.target
        assert (twin.kind, twin.color, twin.size) == (target.kind, target.color, target.size)
        renderer = SceneRenderer(spec)
        assert iou(renderer.gt(0), renderer.distractor_states[0][0].box()) == 0.0

    def test_windows_follow_the_twin(self):
        windows = make_distractor_windows(0, 3, clip_len=6)
        assert len(windows) == 3
        for window in windows:
            assert window.observations.shape == (6, 3746)
            assert window.observations[:, 0].min() > DISTRACTOR_CONFIDENCE
            assert window.ious.max() < DISTRACTOR_IOU

    def test_too_few_windows(self):
        with pytest.raises(RuntimeError):
            make_distractor_windows(0, 1, clip_len=4, max_attempts=0)
