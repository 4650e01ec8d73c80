"""
Learned local/global switch.

An N-frame history of tracker observations is encoded per component
(score, box, result image, response map, language embedding), run
through a bidirectional GRU, weighted by a frame-attention MLP and pooled;
two dense layers and a sigmoid give the probability that local tracking
has failed. Label 1 means "failed, switch"; label 0 means "healthy".
"""

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from tqdm import tqdm

import sequence_io
from config import SWITCHER_COMPONENTS, SwitcherTrainConfig
from models import OBSERVATION_LAYOUT, OBSERVATION_STRIDE, TrackerObservation, observation_slices
from nn import (
    Adagrad,
    BiGru,
    Dense,
    Layer,
    bce,
    bce_backward,
    prefixed,
    sigmoid,
    softmax,
    softmax_backward,
    tanh_backward,
)

logger = logging.getLogger(__name__)

HISTORY_SIZE = 20
ENCODER_DIMS = {"score": 10, "bbox": 10, "image": 512, "map": 512, "embedding": 512}
GRU_HIDDEN = 128
ATTENTION_HIDDEN = 64
HEAD_HIDDEN = 64
BOX_SCALE = 128.0
DEFAULT_THRESHOLD = 0.7

_INPUT_DIMS = dict(OBSERVATION_LAYOUT)
_SLICES = observation_slices()


class HistoryBuffer:
    """Last N observations, oldest first."""

    def __init__(self, capacity: int = HISTORY_SIZE):
        if capacity < 1:
            raise ValueError(f"history capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def append(self, observation: TrackerObservation):
        self._items.append(observation)

    def clear(self):
        self._items.clear()

    def __len__(self) -> int:
        return len(self._items)

    @property
    def observations(self) -> list[TrackerObservation]:
        return list(self._items)

    @property
    def latest(self) -> TrackerObservation:
        if not self._items:
            raise ValueError("history buffer is empty")
        return self._items[-1]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(capacity, 3746) observation matrix, front-padded with zeros, plus the real-frame mask."""
        X = np.zeros((self.capacity, OBSERVATION_STRIDE))
        mask = np.zeros(self.capacity, dtype=bool)
        n = len(self._items)
        for i, obs in enumerate(self._items):
            X[self.capacity - n + i] = obs.to_vector()
        mask[self.capacity - n :] = True
        return X, mask


@dataclass(frozen=True)
class SwitchDecision:
    probability: float
    switched: bool
    threshold: float

    @classmethod
    def from_probability(cls, probability: float, threshold: float) -> "SwitchDecision":
        return cls(float(probability), bool(probability > threshold), float(threshold))


@dataclass
class _ForwardCache:
    inputs: dict
    encoded: dict
    features: np.ndarray
    gru_cache: object
    temporal: np.ndarray
    att_hidden: np.ndarray
    alpha: np.ndarray
    mask: np.ndarray
    pooled: np.ndarray
    head_hidden: np.ndarray
    probability: float


def _zero_grads(prefix: str, layer: Layer) -> dict:
    return prefixed(prefix, {k: np.zeros_like(v) for k, v in layer.named_parameters().items()})


class SwitcherNet(Layer):
    """Encoders -> BiGRU -> frame attention -> mean pooling -> head -> sigmoid."""

    def __init__(
        self,
        seed: Optional[int] = 0,
        use_frame_attention: bool = True,
        ablate: Iterable[str] = (),
        encoder_dims: Optional[dict] = None,
        gru_hidden: int = GRU_HIDDEN,
        attention_hidden: int = ATTENTION_HIDDEN,
        head_hidden: int = HEAD_HIDDEN,
    ):
        rng = np.random.default_rng(seed) if seed is not None else None
        self.encoder_dims = dict(ENCODER_DIMS if encoder_dims is None else encoder_dims)
        self.use_frame_attention = use_frame_attention
        self.ablate = frozenset(ablate)
        unknown = sorted(self.ablate - set(SWITCHER_COMPONENTS))
        if unknown:
            raise ValueError(f"unknown switcher components to ablate: {unknown}")
        self.encoders = {
            name: Dense(_INPUT_DIMS[name], self.encoder_dims[name], rng)
            for name in SWITCHER_COMPONENTS
        }
        self.feature_dim = sum(self.encoder_dims[name] for name in SWITCHER_COMPONENTS)
        self.bigru = BiGru(self.feature_dim, gru_hidden, rng)
        self.attention_hidden = Dense(2 * gru_hidden, attention_hidden, rng)
        self.attention_out = Dense(attention_hidden, 1, rng)
        self.head_hidden = Dense(2 * gru_hidden, head_hidden, rng)
        self.head_out = Dense(head_hidden, 1, rng)

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for name in SWITCHER_COMPONENTS:
            params.update(prefixed(f"enc_{name}", self.encoders[name].named_parameters()))
        params.update(prefixed("bigru", self.bigru.named_parameters()))
        params.update(prefixed("att1", self.attention_hidden.named_parameters()))
        params.update(prefixed("att2", self.attention_out.named_parameters()))
        params.update(prefixed("head1", self.head_hidden.named_parameters()))
        params.update(prefixed("head2", self.head_out.named_parameters()))
        return params

    def component_offsets(self) -> dict[str, slice]:
        """Column range of each component inside the per-frame feature vector."""
        offsets, start = {}, 0
        for name in SWITCHER_COMPONENTS:
            offsets[name] = slice(start, start + self.encoder_dims[name])
            start += self.encoder_dims[name]
        return offsets

    def _split(self, X: np.ndarray) -> dict:
        inputs = {name: X[:, _SLICES[name]] for name in SWITCHER_COMPONENTS}
        inputs["bbox"] = inputs["bbox"] / BOX_SCALE
        return inputs

    def encode(self, X: np.ndarray) -> tuple[np.ndarray, dict, dict]:
        """Per-frame features F = [F_s, F_b, F_img, F_map, F_emb]; ablated parts are zero."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != OBSERVATION_STRIDE:
            raise ValueError(f"observations must have shape (N, {OBSERVATION_STRIDE}), got {X.shape}")
        inputs = self._split(X)
        encoded = {}
        for name in SWITCHER_COMPONENTS:
            if name in self.ablate:
                encoded[name] = np.zeros((X.shape[0], self.encoder_dims[name]))
            else:
                encoded[name] = np.tanh(self.encoders[name].forward(inputs[name]))
        features = np.hstack([encoded[name] for name in SWITCHER_COMPONENTS])
        return features, inputs, encoded

    def attention(self, temporal: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Frame weights over real frames; uniform when frame attention is off."""
        att_hidden = np.tanh(self.attention_hidden.forward(temporal))
        if self.use_frame_attention:
            scores = self.attention_out.forward(att_hidden)[:, 0]
            alpha = softmax(scores, mask)
        else:
            alpha = mask / mask.sum()
        return alpha, att_hidden

    def forward(self, X: np.ndarray, mask: Optional[np.ndarray] = None) -> tuple[float, _ForwardCache]:
        features, inputs, encoded = self.encode(X)
        n = features.shape[0]
        mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if mask.shape != (n,) or not mask.any():
            raise ValueError("mask must mark at least one real frame")
        temporal, gru_cache = self.bigru.forward(features)
        alpha, att_hidden = self.attention(temporal, mask)
        attended = alpha[:, None] * temporal
        pooled = (attended * mask[:, None]).sum(axis=0) / mask.sum()
        head_hidden = np.tanh(self.head_hidden.forward(pooled))
        logit = self.head_out.forward(head_hidden)[0]
        probability = float(sigmoid(logit))
        cache = _ForwardCache(
            inputs, encoded, features, gru_cache, temporal, att_hidden, alpha, mask, pooled,
            head_hidden, probability,
        )
        return probability, cache

    def probability(self, X: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
        return self.forward(X, mask)[0]

    def loss(self, X: np.ndarray, mask: Optional[np.ndarray], label: int) -> float:
        return bce(self.probability(X, mask), label)

    def loss_and_grads(
        self, X: np.ndarray, mask: Optional[np.ndarray], label: int
    ) -> tuple[float, dict, np.ndarray]:
        """BCE loss, parameter gradients and the gradient w.r.t. the observation matrix."""
        _, loss, grads, d_X = self.forward_backward(X, mask, label)
        return loss, grads, d_X

    def forward_backward(
        self, X: np.ndarray, mask: Optional[np.ndarray], label: int
    ) -> tuple[float, float, dict, np.ndarray]:
        """(probability, loss, grads, d_X) from a single forward pass."""
        p, c = self.forward(X, mask)
        loss = bce(p, label)
        d_logit = np.array([bce_backward(p, label) * p * (1.0 - p)])
        grads = {}

        d_head_hidden, g = self.head_out.backward(c.head_hidden, d_logit)
        grads.update(prefixed("head2", g))
        d_pooled, g = self.head_hidden.backward(c.pooled, tanh_backward(c.head_hidden, d_head_hidden))
        grads.update(prefixed("head1", g))

        n_real = c.mask.sum()
        d_attended = (c.mask[:, None] / n_real) * d_pooled[None, :]
        d_temporal = c.alpha[:, None] * d_attended
        if self.use_frame_attention:
            d_alpha = np.sum(d_attended * c.temporal, axis=1)
            d_scores = softmax_backward(c.alpha, d_alpha)
            d_att_hidden, g = self.attention_out.backward(c.att_hidden, d_scores[:, None])
            grads.update(prefixed("att2", g))
            d_temp_att, g = self.attention_hidden.backward(c.temporal, tanh_backward(c.att_hidden, d_att_hidden))
            grads.update(prefixed("att1", g))
            d_temporal = d_temporal + d_temp_att
        else:
            grads.update(_zero_grads("att2", self.attention_out))
            grads.update(_zero_grads("att1", self.attention_hidden))

        d_features, g = self.bigru.backward(c.gru_cache, d_temporal)
        grads.update(prefixed("bigru", g))

        d_X = np.zeros((d_features.shape[0], OBSERVATION_STRIDE))
        offsets = self.component_offsets()
        for name in SWITCHER_COMPONENTS:
            encoder = self.encoders[name]
            if name in self.ablate:
                grads.update(_zero_grads(f"enc_{name}", encoder))
                continue
            d_pre = tanh_backward(c.encoded[name], d_features[:, offsets[name]])
            d_in, g = encoder.backward(c.inputs[name], d_pre)
            grads.update(prefixed(f"enc_{name}", g))
            if name == "bbox":
                d_in = d_in / BOX_SCALE
            d_X[:, _SLICES[name]] = d_in
        return p, loss, grads, d_X


def encode_history(buffer: HistoryBuffer, net: SwitcherNet) -> np.ndarray:
    X, _ = buffer.arrays()
    return net.encode(X)[0]


def frame_attention(
    net: SwitcherNet, temporal: np.ndarray, mask: Optional[np.ndarray] = None
) -> tuple[np.ndarray, np.ndarray]:
    """(alpha, attended features alpha_i * F_i) for BiGRU outputs ``temporal``."""
    mask = np.ones(temporal.shape[0], dtype=bool) if mask is None else mask
    alpha, _ = net.attention(temporal, mask)
    return alpha, alpha[:, None] * temporal


def decide(buffer: HistoryBuffer, net: SwitcherNet, threshold: float = DEFAULT_THRESHOLD) -> SwitchDecision:
    if len(buffer) == 0:
        raise ValueError("cannot decide on an empty history")
    X, mask = buffer.arrays()
    return SwitchDecision.from_probability(net.probability(X, mask), threshold)


def naive_decide(buffer: HistoryBuffer, threshold_score: float) -> SwitchDecision:
    """Switch when the latest confidence falls below ``threshold_score``."""
    confidence = buffer.latest.confidence
    return SwitchDecision(1.0 - confidence, confidence < threshold_score, float(threshold_score))


def firing_rates(
    windows: Sequence[np.ndarray],
    net: SwitcherNet,
    threshold: float = DEFAULT_THRESHOLD,
    naive_threshold: float = 0.5,
) -> dict:
    """
    How often the naive score rule and the learned switch fire on whole
    observation windows, each decided at the window's last frame.
    """
    if not windows:
        raise ValueError("no windows to decide on")
    naive_fired = learned_fired = 0
    for X in windows:
        buffer = HistoryBuffer(len(X))
        for row in X:
            buffer.append(TrackerObservation.from_vector(row))
        naive_fired += naive_decide(buffer, naive_threshold).switched
        learned_fired += decide(buffer, net, threshold).switched
    n = len(windows)
    return {
        "n_windows": n,
        "naive_fired": int(naive_fired),
        "learned_fired": int(learned_fired),
        "naive_rate": naive_fired / n,
        "learned_rate": learned_fired / n,
    }


# -- clip harvesting -------------------------------------------------------------------


@dataclass(frozen=True)
class Clip:
    sequence: str
    start: int
    label: int
    mean_iou: float


def window_label(ious: Sequence[float], healthy_iou: float = 0.7, failed_iou: float = 0.5) -> Optional[int]:
    """0 when mean IoU > healthy_iou, 1 when < failed_iou, None in between."""
    mean = float(np.mean(ious))
    if mean > healthy_iou:
        return 0
    if mean < failed_iou:
        return 1
    return None


def harvest_windows(
    ious: Sequence[float],
    clip_len: int = HISTORY_SIZE,
    healthy_iou: float = 0.7,
    failed_iou: float = 0.5,
) -> list[tuple[int, int, float]]:
    """(start, label, mean IoU) for every kept window of stride clip_len / 2."""
    stride = max(1, clip_len // 2)
    windows = []
    for start in range(0, len(ious) - clip_len + 1, stride):
        window = ious[start : start + clip_len]
        label = window_label(window, healthy_iou, failed_iou)
        if label is not None:
            windows.append((start, label, float(np.mean(window))))
    return windows


class ClipDataset:
    """Labeled clips referencing per-sequence observation logs."""

    def __init__(self, observations: dict[str, np.ndarray], clips: list[Clip], clip_len: int):
        self.observations = observations
        self.clips = clips
        self.clip_len = clip_len

    def window(self, clip: Clip) -> np.ndarray:
        return self.observations[clip.sequence][clip.start : clip.start + self.clip_len].astype(np.float64)

    def labels(self, clips: Optional[Sequence[Clip]] = None) -> np.ndarray:
        return np.array([c.label for c in (self.clips if clips is None else clips)], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.clips)


def harvest_clips(
    corpus_dir,
    clip_len: int = HISTORY_SIZE,
    healthy_iou: float = 0.7,
    failed_iou: float = 0.5,
) -> ClipDataset:
    """Label sliding windows of a switch corpus and write one label sidecar per sequence."""
    corpus_dir = Path(corpus_dir)
    log_dir = corpus_dir / "logs"
    manifest = sequence_io.read_manifest(corpus_dir)
    observations, clips = {}, []
    for name in sorted(entry["name"] for entry in manifest["sequences"]):
        records = sequence_io.read_observation_log(log_dir / f"{name}.obs")
        ious = sequence_io.read_values(log_dir / f"{name}.iou.txt")
        if len(ious) != records.shape[0]:
            raise ValueError(f"{name}: {records.shape[0]} observations but {len(ious)} IoU values")
        if len(ious) < clip_len:
            logger.warning(f"Skipping {name}: {len(ious)} frames is shorter than the clip length {clip_len}")
            continue
        windows = harvest_windows(ious, clip_len, healthy_iou, failed_iou)
        sequence_io.write_labels(log_dir / f"{name}.labels.txt", [(s, label) for s, label, _ in windows])
        observations[name] = records
        clips.extend(Clip(name, s, label, mean) for s, label, mean in windows)
    n_failed = sum(c.label for c in clips)
    n_healthy = len(clips) - n_failed
    logger.info(f"Harvested {len(clips)} clips ({n_failed} failed, {n_healthy} healthy) from {corpus_dir}")
    return ClipDataset(observations, clips, clip_len)


def load_clip_dataset(corpus_dir, clip_len: int = HISTORY_SIZE) -> ClipDataset:
    """Re-read clips from the label sidecars written by harvest_clips."""
    corpus_dir = Path(corpus_dir)
    log_dir = corpus_dir / "logs"
    manifest = sequence_io.read_manifest(corpus_dir)
    observations, clips = {}, []
    for name in sorted(entry["name"] for entry in manifest["sequences"]):
        label_path = log_dir / f"{name}.labels.txt"
        if not label_path.exists():
            continue
        records = sequence_io.read_observation_log(log_dir / f"{name}.obs")
        ious = sequence_io.read_values(log_dir / f"{name}.iou.txt")
        observations[name] = records
        for start, label in sequence_io.read_labels(label_path):
            clips.append(Clip(name, start, label, float(np.mean(ious[start : start + clip_len]))))
    return ClipDataset(observations, clips, clip_len)


def split_by_sequence(
    clips: Sequence[Clip], held_out_fraction: float, seed: int
) -> tuple[list[Clip], list[Clip]]:
    """Hold out whole sequences so no window overlaps between the two sides."""
    names = sorted({c.sequence for c in clips})
    rng = np.random.default_rng(seed)
    n_held = int(round(len(names) * held_out_fraction))
    held = set(rng.permutation(names)[:n_held].tolist()) if n_held else set()
    train = [c for c in clips if c.sequence not in held]
    test = [c for c in clips if c.sequence in held]
    return train, test


def train_switcher(
    dataset: ClipDataset,
    config: SwitcherTrainConfig,
    clips: Optional[Sequence[Clip]] = None,
    use_frame_attention: bool = True,
    net: Optional[SwitcherNet] = None,
) -> tuple[SwitcherNet, list[dict]]:
    """BCE + Adagrad with batch size 1; returns the net and per-epoch {loss, accuracy}."""
    clips = list(dataset.clips if clips is None else clips)
    labels = {c.label for c in clips}
    if not clips:
        raise ValueError("switcher training set is empty")
    if labels != {0, 1}:
        raise ValueError(f"switcher training needs both classes, got only {sorted(labels)}")
    net = net or SwitcherNet(config.seed, use_frame_attention, config.ablate)
    params = net.named_parameters()
    optimizer = Adagrad(config.learning_rate)
    rng = np.random.default_rng(config.seed)
    windows = [dataset.window(c) for c in clips]
    mask = np.ones(dataset.clip_len, dtype=bool)
    history = []
    for epoch in range(1, config.epochs + 1):
        total, correct = 0.0, 0
        for index in tqdm(rng.permutation(len(clips)), desc=f"epoch {epoch}", disable=None, leave=False):
            p, loss, grads, _ = net.forward_backward(windows[index], mask, clips[index].label)
            total += loss
            correct += int((p > 0.5) == bool(clips[index].label))
            optimizer.update(params, grads)
        stats = {"epoch": epoch, "loss": total / len(clips), "accuracy": correct / len(clips)}
        history.append(stats)
        logger.info(
            f"switcher epoch {epoch}/{config.epochs}: loss {stats['loss']:.4f} acc {stats['accuracy']:.3f}"
        )
    return net, history


def evaluate_switcher(
    net: SwitcherNet,
    dataset: ClipDataset,
    clips: Optional[Sequence[Clip]] = None,
    threshold: float = 0.5,
) -> dict:
    """Accuracy overall and per class at ``threshold``."""
    clips = list(dataset.clips if clips is None else clips)
    if not clips:
        raise ValueError("no clips to evaluate")
    mask = np.ones(dataset.clip_len, dtype=bool)
    predicted = np.array([net.probability(dataset.window(c), mask) > threshold for c in clips])
    labels = dataset.labels(clips).astype(bool)
    healthy, failed = ~labels, labels

    def rate(selection):
        return float(np.mean(predicted[selection] == labels[selection])) if selection.any() else float("nan")

    return {
        "accuracy": float(np.mean(predicted == labels)),
        "healthy_accuracy": rate(healthy),
        "failed_accuracy": rate(failed),
        "n_clips": len(clips),
    }
