"""Tests for sentence grounding and template attention."""

import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import GroundingTrainConfig
from grounding import (
    COORD_DIM,
    EMBEDDING_FILE,
    FEATURE_DIM,
    GROUNDING_FILE,
    VOCABULARY_FILE,
    GroundingModel,
    Vocabulary,
    attended_search_box,
    embed_sentence,
    evaluate_grounding,
    grid_features,
    ground,
    grounding_target,
    is_uniform,
    spatial_coords,
    tanet_attention,
    train_grounding,
    yolo_ground_loss,
)
from models import BoundingBox, Frame, LanguageSentence
from nn import grad_check
from synth import make_grounding_samples


class _ModelAdapter:
    """Adapts GroundingModel to the grad_check interface."""

    def __init__(self, model):
        self.model = model

    def named_parameters(self):
        return self.model.named_parameters()

    def loss(self, inputs):
        return self.model.loss(inputs["sample"])

    def loss_and_grads(self, inputs):
        loss, grads = self.model.loss_and_grads(inputs["sample"])
        return loss, grads, {}


def _sample():
    return make_grounding_samples(0, 1, (128, 128))[0]


def _square_frame(x=48, y=48, size=16):
    pixels = np.full((128, 128, 3), 0.5)
    pixels[y : y + size, x : x + size] = (1.0, 0.0, 0.0)
    return Frame(pixels)


def _head_only_model(**kwargs):
    """Random grounding head over an all-zero sentence encoder."""
    model = GroundingModel(seed=0, **kwargs)
    for param in model.encoder.named_parameters().values():
        param[...] = 0.0
    return model


class TestTargets:
    def test_aligned_box(self):
        target = grounding_target(BoundingBox(56, 56, 8, 8), 128, 128)
        assert target.cell == 7 * 16 + 7
        assert np.allclose(target.offsets, [0.5, 0.5, 0.0, 0.0])

    def test_tie_takes_lowest_cell(self):
        target = grounding_target(BoundingBox(4, 0, 8, 8), 128, 128)
        assert target.cell == 0
        assert target.offsets[0] == 0.99

    def test_center_outside_frame(self):
        with pytest.raises(ValueError):
            grounding_target(BoundingBox(130, 10, 8, 8), 128, 128)

    def test_zero_area(self):
        with pytest.raises(ValueError):
            grounding_target(BoundingBox(10, 10, 0, 8), 128, 128)


class TestLoss:
    def test_zero_prediction(self):
        target = grounding_target(BoundingBox(56, 56, 8, 8), 128, 128)
        loss, grad = yolo_ground_loss(np.zeros((256, 5)), target)
        assert loss == pytest.approx(math.log(256))
        assert grad[:, 0].sum() == pytest.approx(0.0)
        assert not grad[target.cell, 1:].any()

    def test_confident_correct_cell(self):
        target = grounding_target(BoundingBox(56, 56, 8, 8), 128, 128)
        prediction = np.zeros((256, 5))
        prediction[target.cell, 0] = 20.0
        loss, _ = yolo_ground_loss(prediction, target)
        assert loss == pytest.approx(math.log(255 + math.exp(20)) - 20)
        assert loss < 1e-5

    def test_box_term_only_at_target_cell(self):
        target = grounding_target(BoundingBox(56, 56, 8, 8), 128, 128)
        prediction = np.zeros((256, 5))
        prediction[3, 1:] = 7.0
        _, grad = yolo_ground_loss(prediction, target)
        assert not grad[3, 1:].any()


class TestFeatures:
    def test_shapes(self):
        frame = Frame(np.random.default_rng(0).uniform(size=(128, 128, 3)))
        assert grid_features(frame).shape == (256, FEATURE_DIM)
        assert spatial_coords().shape == (256, 8)

    def test_coords_range(self):
        coords = spatial_coords()
        assert coords.min() >= 0.0 and coords.max() <= 1.0
        assert np.allclose(coords[0, :4], [0, 0, 1 / 16, 1 / 16])


class TestGroundingModel:
    def test_zero_model_picks_first_cell(self):
        model = GroundingModel(seed=None)
        frame, sentence, _ = _sample()
        box, scores = ground(frame, embed_sentence(sentence.tokens, model), model)
        assert np.allclose(scores, 1 / 256)
        assert box == BoundingBox(0.0, 0.0, 8.0, 8.0)

    def test_out_of_vocabulary_token(self):
        assert Vocabulary().ids(["the", "zebra"])[1] == 0

    def test_pooled_embedding_size(self):
        model = GroundingModel(seed=0)
        embedding = model.embed_sentence(LanguageSentence.from_text("the red square"))
        assert embedding.pooled.shape == (512,)
        assert np.abs(embedding.pooled).max() <= 1.0

    def test_grad_check(self):
        model = GroundingModel(seed=3)
        frame, sentence, gt = _sample()
        inputs = {"sample": model.prepare(frame, sentence, gt)}
        report = grad_check(_ModelAdapter(model), inputs, tolerance=1e-4, max_checks_per_array=6)
        assert report.passed, report

    def test_checkpoint_round_trip(self):
        model = GroundingModel(seed=1)
        frame, sentence, _ = _sample()
        with tempfile.TemporaryDirectory() as tmp:
            model.save(tmp)
            restored = GroundingModel.from_checkpoints(
                Path(tmp) / EMBEDDING_FILE, Path(tmp) / GROUNDING_FILE, Path(tmp) / VOCABULARY_FILE
            )
        assert restored.predict(frame, sentence) == model.predict(frame, sentence)

    def test_training_runs(self):
        samples = make_grounding_samples(2, 4, (64, 64))
        config = GroundingTrainConfig(epochs=2, batch_size=2, learning_rate=1e-3)
        model, history = train_grounding(samples, config)
        assert len(history) == 2
        assert all(math.isfinite(v) for v in history)
        metrics = evaluate_grounding(model, samples)
        assert 0.0 <= metrics["overall"] <= 1.0
        assert metrics["n_spatial"] + metrics["n_plain"] == 4

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            train_grounding([], GroundingTrainConfig())

    def test_overfits_single_sample(self):
        # only the red cell differs; the sentence channel stays zero
        model = _head_only_model(grid=8, use_spatial_coords=False)
        frame, sentence = _square_frame(), LanguageSentence.from_text("the red square")
        config = GroundingTrainConfig(
            epochs=40, learning_rate=1e-2, batch_size=1, freeze_embedding=True
        )
        samples = [(frame, sentence, BoundingBox(48, 48, 16, 16))] * 50
        model, history = train_grounding(samples, config, model=model)
        assert history[-1] < 0.05
        _, scores = model.ground(frame, model.embed_sentence(sentence))
        assert int(np.argmax(scores)) == 3 * 8 + 3

    def test_frozen_embedding_does_not_move(self):
        model = _head_only_model()
        config = GroundingTrainConfig(
            epochs=1, learning_rate=1e-2, batch_size=1, freeze_embedding=True
        )
        train_grounding(make_grounding_samples(0, 2, (64, 64)), config, model=model)
        assert not any(p.any() for p in model.encoder.named_parameters().values())

    def test_same_seed_same_checkpoint_bytes(self):
        samples = make_grounding_samples(5, 3, (64, 64))
        config = GroundingTrainConfig(epochs=2, batch_size=2, learning_rate=1e-2)
        with tempfile.TemporaryDirectory() as tmp:
            for run in ("a", "b"):
                model, _ = train_grounding(samples, config)
                model.save(Path(tmp) / run)
            for name in (EMBEDDING_FILE, GROUNDING_FILE, VOCABULARY_FILE):
                first, second = (Path(tmp) / run / name for run in ("a", "b"))
                assert first.read_bytes() == second.read_bytes()


class TestSpatialCoords:
    def test_coords_off_zeroes_the_coordinate_columns(self):
        model = GroundingModel(seed=2, use_spatial_coords=False)
        features = grid_features(_square_frame())
        pooled = model.embed_sentence(LanguageSentence.from_text("the red square")).pooled
        _, cache = model.head.forward(features, pooled, model.coords())
        assert not cache.fused_in[:, -COORD_DIM:].any()
        assert cache.fused_in[:, -COORD_DIM:].shape == (256, COORD_DIM)

    def test_coords_off_ignores_coordinate_weights(self):
        model = GroundingModel(seed=2, use_spatial_coords=False)
        features = grid_features(_square_frame())
        embedding = model.embed_sentence(LanguageSentence.from_text("the red square"))
        before = model.cell_predictions(features, embedding)
        noise = np.random.default_rng(0).normal(size=(128, COORD_DIM))
        model.head.fusion.W[:, -COORD_DIM:] += noise
        assert np.array_equal(model.cell_predictions(features, embedding), before)

    def test_coords_on_uses_coordinate_weights(self):
        model = GroundingModel(seed=2)
        features = grid_features(_square_frame())
        embedding = model.embed_sentence(LanguageSentence.from_text("the red square"))
        before = model.cell_predictions(features, embedding)
        model.head.fusion.W[:, -COORD_DIM:] += 1.0
        assert not np.array_equal(model.cell_predictions(features, embedding), before)

    def test_coords_off_grounding_follows_translation(self):
        model = GroundingModel(seed=4, use_spatial_coords=False)
        embedding = model.embed_sentence(LanguageSentence.from_text("the red square"))
        _, scores = ground(_square_frame(x=40, y=40, size=8), embedding, model)
        _, shifted = ground(_square_frame(x=48, y=40, size=8), embedding, model)
        assert np.allclose(shifted, np.roll(scores, 1, axis=1), rtol=0.0, atol=1e-12)
        assert not np.allclose(scores, scores.flat[0])


class TestTemplateAttention:
    def test_flat_template_is_uniform(self):
        frame = Frame(np.random.default_rng(0).uniform(size=(128, 128, 3)))
        attention = tanet_attention(frame, np.full((32, 32, 3), 0.3))
        assert is_uniform(attention)
        assert attention.sum() == pytest.approx(1.0)

    def test_finds_the_template(self):
        pixels = np.full((128, 128, 3), 0.5)
        patch = np.random.default_rng(1).uniform(size=(8, 8, 3))
        pixels[32:40, 64:72] = patch
        attention = tanet_attention(Frame(pixels), patch)
        assert not is_uniform(attention)
        assert int(np.argmax(attention)) == 4 * 16 + 8
        assert attended_search_box(attention, 128, 128) == BoundingBox(60.0, 28.0, 16.0, 16.0)

    def test_noisy_template_copy_peaks_at_the_source(self):
        rng = np.random.default_rng(7)
        pixels = rng.uniform(size=(128, 128, 3))
        template = np.clip(pixels[32:40, 64:72] + rng.normal(0.0, 0.05, size=(8, 8, 3)), 0.0, 1.0)
        attention = tanet_attention(Frame(pixels), template)
        assert int(np.argmax(attention)) == 4 * 16 + 8
