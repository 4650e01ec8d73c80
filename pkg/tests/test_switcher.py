"""Tests for the history buffer, switcher network and clip harvesting."""

import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import sequence_io
from config import SwitcherTrainConfig
from models import OBSERVATION_STRIDE, BoundingBox, TrackerObservation, observation_slices
from nn import grad_check
from switcher import (
    Clip,
    ClipDataset,
    HistoryBuffer,
    SwitchDecision,
    SwitcherNet,
    decide,
    encode_history,
    evaluate_switcher,
    firing_rates,
    frame_attention,
    harvest_clips,
    harvest_windows,
    load_clip_dataset,
    naive_decide,
    split_by_sequence,
    train_switcher,
    window_label,
)

SMALL_DIMS = {"score": 2, "bbox": 2, "image": 3, "map": 3, "embedding": 3}
MID_DIMS = {"score": 8, "bbox": 4, "image": 4, "map": 4, "embedding": 4}


def _small_net(seed=0, **kwargs):
    return SwitcherNet(seed, encoder_dims=SMALL_DIMS, gru_hidden=3, attention_hidden=3, head_hidden=3, **kwargs)


def _observation(confidence=0.9, seed=0):
    rng = np.random.default_rng(seed)
    return TrackerObservation(
        confidence=confidence,
        box=BoundingBox(10, 20, 30, 40),
        result_image=rng.uniform(size=(30, 30, 3)),
        response_map=rng.uniform(size=(23, 23)),
    )


class _NetAdapter:
    def __init__(self, net, label):
        self.net = net
        self.label = label

    def named_parameters(self):
        return self.net.named_parameters()

    def loss(self, inputs):
        return self.net.loss(inputs["X"], None, self.label)

    def loss_and_grads(self, inputs):
        loss, grads, d_X = self.net.loss_and_grads(inputs["X"], None, self.label)
        return loss, grads, {"X": d_X}


class TestHistoryBuffer:
    def test_front_padding(self):
        buffer = HistoryBuffer(4)
        buffer.append(_observation(0.1))
        buffer.append(_observation(0.2))
        X, mask = buffer.arrays()
        assert X.shape == (4, OBSERVATION_STRIDE)
        assert mask.tolist() == [False, False, True, True]
        assert not X[:2].any()
        assert X[2, 0] == 0.1 and X[3, 0] == 0.2

    def test_keeps_latest(self):
        buffer = HistoryBuffer(3)
        for i in range(6):
            buffer.append(_observation(i / 10))
        assert len(buffer) == 3
        assert [o.confidence for o in buffer.observations] == [0.3, 0.4, 0.5]
        assert buffer.latest.confidence == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            HistoryBuffer(3).latest
        with pytest.raises(ValueError):
            HistoryBuffer(0)


class TestSwitcherNet:
    def test_probability_range(self):
        net = _small_net()
        X = np.stack([_observation(seed=i).to_vector() for i in range(5)])
        assert 0.0 < net.probability(X) < 1.0

    def test_frame_attention_off_is_uniform(self):
        net = _small_net(use_frame_attention=False)
        temporal = np.random.default_rng(0).normal(size=(4, 6))
        alpha, attended = frame_attention(net, temporal)
        assert np.array_equal(alpha, np.full(4, 0.25))
        assert np.array_equal(attended, 0.25 * temporal)

    def test_frame_attention_ignores_padding(self):
        net = _small_net()
        temporal = np.random.default_rng(1).normal(size=(4, 6))
        alpha, _ = frame_attention(net, temporal, np.array([False, True, True, True]))
        assert alpha[0] == 0.0
        assert alpha.sum() == pytest.approx(1.0)

    def test_ablated_component_is_ignored(self):
        net = _small_net(ablate=["image"])
        rng = np.random.default_rng(2)
        X = rng.uniform(size=(5, OBSERVATION_STRIDE))
        before = net.probability(X)
        X[:, observation_slices()["image"]] = rng.uniform(size=(5, 2700))
        assert net.probability(X) == before
        _, grads, d_X = net.loss_and_grads(X, None, 1)
        assert not grads["enc_image.W"].any()
        assert not d_X[:, observation_slices()["image"]].any()

    def test_unknown_ablation(self):
        with pytest.raises(ValueError):
            _small_net(ablate=["colour"])

    def test_encode_history_shape(self):
        net = _small_net()
        buffer = HistoryBuffer(6)
        buffer.append(_observation())
        assert encode_history(buffer, net).shape == (6, sum(SMALL_DIMS.values()))

    def test_grad_check(self):
        for seed in range(20):
            label, attention = seed % 2, seed % 3 != 0
            net = _small_net(seed=seed, use_frame_attention=attention)
            inputs = {"X": np.random.default_rng(seed).uniform(size=(5, OBSERVATION_STRIDE))}
            report = grad_check(_NetAdapter(net, label), inputs, tolerance=1e-4, max_checks_per_array=20, seed=seed)
            assert report.passed, (seed, report)

    def test_checkpoint_round_trip(self):
        net = _small_net(seed=3)
        X = np.random.default_rng(3).uniform(size=(4, OBSERVATION_STRIDE))
        with tempfile.TemporaryDirectory() as tmp:
            net.save(Path(tmp) / "switcher.ckpt")
            restored = SwitcherNet(
                None, encoder_dims=SMALL_DIMS, gru_hidden=3, attention_hidden=3, head_hidden=3
            )
            restored.load(Path(tmp) / "switcher.ckpt")
        assert restored.probability(X) == net.probability(X)

    def test_full_net_frame_attention_off_is_exactly_uniform(self):
        net = SwitcherNet(seed=0, use_frame_attention=False)
        X = np.random.default_rng(4).uniform(size=(20, OBSERVATION_STRIDE))
        _, cache = net.forward(X)
        assert np.array_equal(cache.alpha, np.full(20, 1 / 20))

    def test_identical_frames_get_uniform_attention(self):
        net = _small_net()
        X = np.tile(_observation(seed=5).to_vector(), (6, 1))
        features = net.encode(X)[0]
        assert np.allclose(features, features[0], rtol=0.0, atol=1e-15)
        temporal = np.tile(np.random.default_rng(5).normal(size=6), (6, 1))
        alpha, attended = frame_attention(net, temporal)
        assert np.allclose(alpha, 1 / 6, rtol=0.0, atol=1e-15)
        reordered = frame_attention(net, temporal[::-1])[1]
        assert np.allclose(reordered.sum(axis=0), attended.sum(axis=0), rtol=0.0, atol=1e-15)

    def test_attention_follows_frame_order(self):
        net = _small_net(seed=6)
        temporal = np.random.default_rng(6).normal(size=(5, 6))
        order = np.array([3, 0, 4, 1, 2])
        alpha, attended = frame_attention(net, temporal)
        permuted_alpha, permuted = frame_attention(net, temporal[order])
        assert np.allclose(permuted_alpha, alpha[order])
        assert np.allclose(permuted.sum(axis=0), attended.sum(axis=0))


class TestDecisions:
    def test_threshold_is_strict(self):
        assert not SwitchDecision.from_probability(0.7, 0.7).switched
        assert SwitchDecision.from_probability(0.71, 0.7).switched

    def test_threshold_above_one_never_switches(self):
        buffer = HistoryBuffer(4)
        for i in range(4):
            buffer.append(_observation(0.0, seed=i))
        for seed in range(5):
            assert not decide(buffer, _small_net(seed), threshold=1.2).switched

    def test_decide_on_empty_history(self):
        with pytest.raises(ValueError):
            decide(HistoryBuffer(4), _small_net())

    def test_naive(self):
        buffer = HistoryBuffer(4)
        buffer.append(_observation(0.9))
        buffer.append(_observation(0.3))
        decision = naive_decide(buffer, 0.5)
        assert decision.switched
        assert decision.probability == pytest.approx(0.7)
        buffer.append(_observation(0.6))
        assert not naive_decide(buffer, 0.5).switched

    def test_firing_rates(self):
        net = _small_net()
        healthy = np.stack([_observation(0.95, seed=i).to_vector() for i in range(4)])
        faded = healthy.copy()
        faded[-1, 0] = 0.2
        rates = firing_rates([healthy, faded], net, threshold=-1.0)
        assert rates["n_windows"] == 2
        assert rates["naive_fired"] == 1 and rates["naive_rate"] == 0.5
        assert rates["learned_fired"] == 2 and rates["learned_rate"] == 1.0
        assert firing_rates([healthy, faded], net, threshold=1.2)["learned_fired"] == 0

    def test_firing_rates_need_windows(self):
        with pytest.raises(ValueError):
            firing_rates([], _small_net())


class TestClips:
    def test_window_label(self):
        assert window_label([0.8] * 20) == 0
        assert window_label([0.2] * 20) == 1
        assert window_label([0.6] * 20) is None
        assert window_label([0.7] * 20) is None

    def test_harvest_windows(self):
        ious = [0.9] * 20 + [0.1] * 20
        windows = harvest_windows(ious, clip_len=20)
        assert [(s, label) for s, label, _ in windows] == [(0, 0), (20, 1)]
        assert windows[0][2] == pytest.approx(0.9)

    def test_short_sequence_has_no_windows(self):
        assert harvest_windows([0.9] * 5, clip_len=20) == []

    def test_split_by_sequence(self):
        clips = [Clip(f"seq{i % 10}", i, i % 2, 0.5) for i in range(40)]
        train, test = split_by_sequence(clips, 0.2, seed=0)
        assert len(train) + len(test) == 40
        assert not {c.sequence for c in train} & {c.sequence for c in test}
        assert len({c.sequence for c in test}) == 2

    def test_split_without_held_out(self):
        clips = [Clip("a", 0, 0, 0.9), Clip("b", 0, 1, 0.1)]
        assert split_by_sequence(clips, 0.0, seed=0) == (clips, [])


def _write_corpus(root: Path):
    """Two sequences: one tracked well, one lost halfway."""
    entries = []
    for name, ious in (("good", [0.9] * 8), ("lost", [0.9] * 4 + [0.1] * 4)):
        observations = [_observation(v, seed=i) for i, v in enumerate(ious)]
        sequence_io.write_observation_log(root / "logs" / f"{name}.obs", observations)
        sequence_io.write_values(root / "logs" / f"{name}.iou.txt", ious)
        entries.append({"name": name})
    sequence_io.write_manifest(root, entries)


class TestHarvestAndTrain:
    def test_harvest_and_reload(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            _write_corpus(root)
            dataset = harvest_clips(root, clip_len=4)
            assert [(c.sequence, c.start, c.label) for c in dataset.clips] == [
                ("good", 0, 0), ("good", 2, 0), ("good", 4, 0),
                ("lost", 0, 0), ("lost", 4, 1),
            ]
            assert dataset.window(dataset.clips[-1]).shape == (4, OBSERVATION_STRIDE)
            reloaded = load_clip_dataset(root, clip_len=4)
            assert reloaded.clips == dataset.clips

    def test_training_needs_both_classes(self):
        dataset = ClipDataset({"a": np.zeros((4, OBSERVATION_STRIDE))}, [Clip("a", 0, 0, 0.9)], 4)
        with pytest.raises(ValueError, match="both classes"):
            train_switcher(dataset, SwitcherTrainConfig(epochs=1), net=_small_net())

    def test_training_runs(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            _write_corpus(root)
            dataset = harvest_clips(root, clip_len=4)
        config = SwitcherTrainConfig(epochs=3, learning_rate=1e-2)
        net, history = train_switcher(dataset, config, net=_small_net())
        assert [h["epoch"] for h in history] == [1, 2, 3]
        metrics = evaluate_switcher(net, dataset)
        assert metrics["n_clips"] == 5
        assert 0.0 <= metrics["accuracy"] <= 1.0

    def test_overfits_two_windows(self):
        # confidence is the only live input
        healthy, failed = np.zeros((8, OBSERVATION_STRIDE)), np.zeros((8, OBSERVATION_STRIDE))
        healthy[:, 0], failed[:, 0] = 0.95, 0.05
        clips = [Clip("healthy", 0, 0, 0.9)] * 10 + [Clip("failed", 0, 1, 0.1)] * 10
        dataset = ClipDataset({"healthy": healthy, "failed": failed}, clips, 8)
        ablate = ["image", "map", "embedding"]
        net = SwitcherNet(
            0, ablate=ablate, encoder_dims=MID_DIMS, gru_hidden=16, attention_hidden=8, head_hidden=16
        )
        config = SwitcherTrainConfig(epochs=30, learning_rate=1e-2, ablate=ablate)
        net, history = train_switcher(dataset, config, net=net)
        assert history[-1]["loss"] < 0.05
        assert history[-1]["accuracy"] == 1.0
        assert net.probability(failed) > 0.5 > net.probability(healthy)

    def test_same_seed_same_checkpoint_bytes(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            _write_corpus(root)
            dataset = harvest_clips(root, clip_len=4)
            config = SwitcherTrainConfig(epochs=2, learning_rate=1e-2, seed=3)
            for run in ("a", "b"):
                net, _ = train_switcher(dataset, config, net=_small_net(seed=3))
                net.save(root / f"{run}.ckpt")
            assert (root / "a.ckpt").read_bytes() == (root / "b.ckpt").read_bytes()
