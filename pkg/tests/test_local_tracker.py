"""Tests for the NCC local tracker."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import local_tracker
from local_tracker import NccTracker, TrackerInitError, make_tracker
from models import EMBEDDING_DIM, BoundingBox, Frame


def _noise_frame(seed=0, size=128):
    return Frame(np.random.default_rng(seed).uniform(size=(size, size, 3)))


BOX = BoundingBox(40.0, 40.0, 44.0, 44.0)


class TestInit:
    def test_zero_area(self):
        with pytest.raises(TrackerInitError):
            local_tracker.init(_noise_frame(), BoundingBox(10, 10, 0, 5))

    def test_outside_frame(self):
        with pytest.raises(TrackerInitError):
            local_tracker.init(_noise_frame(), BoundingBox(500, 500, 10, 10))

    def test_template_shape(self):
        state = local_tracker.init(_noise_frame(), BOX)
        assert state.template.shape == (32, 32, 3)

    def test_track_before_init(self):
        with pytest.raises(RuntimeError):
            NccTracker().track(_noise_frame())

    def test_unknown_tracker(self):
        with pytest.raises(ValueError):
            make_tracker("kcf")


class TestTrack:
    def test_self_match(self):
        frame = _noise_frame()
        tracker = make_tracker("ncc")
        tracker.init(frame, BOX)
        observation = tracker.track(frame)
        assert observation.confidence == pytest.approx(1.0)
        assert observation.box == BOX

    def test_shift_by_one_grid_step(self):
        # 44 px box, 2.5x window, 23 placements: one step is 3 px
        frame = _noise_frame(1)
        tracker = NccTracker()
        tracker.init(frame, BOX)
        shifted = Frame(np.roll(frame.pixels, 3, axis=1))
        observation = tracker.track(shifted)
        assert observation.box.x1 == pytest.approx(BOX.x1 + 3.0)
        assert observation.box.y1 == pytest.approx(BOX.y1)
        assert observation.confidence == pytest.approx(1.0)

    def test_uniform_frame_scores_zero(self):
        tracker = NccTracker()
        tracker.init(_noise_frame(), BOX)
        observation = tracker.track(Frame(np.full((128, 128, 3), 0.4)))
        assert observation.confidence == 0.0
        assert not observation.response_map.any()

    def test_occluded_target_scores_low(self):
        frame = _noise_frame(2)
        tracker = NccTracker()
        tracker.init(frame, BOX)
        occluded = frame.pixels.copy()
        # gray occluder over the whole search window
        occluded[2:126, 2:126] = 0.5
        assert tracker.track(Frame(occluded)).confidence < 0.5

    def test_response_range(self):
        tracker = NccTracker()
        tracker.init(_noise_frame(3), BOX)
        observation = tracker.track(_noise_frame(4))
        response = observation.response_map
        assert response.shape == (23, 23)
        assert response.min() >= 0.0 and response.max() <= 1.0
        assert observation.confidence == response.max()

    def test_observation_layout(self):
        tracker = NccTracker()
        tracker.init(_noise_frame(), BOX)
        observation = tracker.track(_noise_frame())
        assert observation.result_image.shape == (30, 30, 3)
        assert np.array_equal(observation.lang_embedding, np.zeros(EMBEDDING_DIM))

    def test_embedding_is_passed_through(self):
        tracker = NccTracker()
        tracker.init(_noise_frame(), BOX)
        embedding = np.full(EMBEDDING_DIM, 0.25)
        assert np.array_equal(tracker.track(_noise_frame(), embedding).lang_embedding, embedding)

    def test_center_stays_in_frame(self):
        frame = _noise_frame(5, size=64)
        tracker = NccTracker()
        tracker.init(frame, BoundingBox(0, 0, 20, 20))
        for _ in range(5):
            cx, cy = tracker.track(_noise_frame(6, size=64)).box.center
            assert 0.0 <= cx <= 64 and 0.0 <= cy <= 64

    def test_relocate_keeps_template(self):
        frame = _noise_frame()
        tracker = NccTracker()
        tracker.init(frame, BOX)
        template = tracker.template
        tracker.relocate(BoundingBox(10, 10, 44, 44))
        assert tracker.box == BoundingBox(10, 10, 44, 44)
        assert np.array_equal(tracker.template, template)
