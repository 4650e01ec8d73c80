"""
Language grounding over a 16x16 cell grid, and template attention for
global re-detection.

A learned word table plus two dense layers turns the sentence into a
512-d vector. That vector is copied to every cell, joined with a 38-d
hand-crafted cell descriptor and an 8-d cell-coordinate block, fused by a
per-cell dense layer, and scored. Softmax over cells picks the target
cell; the cell's anchor is shifted and scaled by the predicted offsets.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from tqdm import tqdm

from config import GroundingTrainConfig
from geometry import crop_resize, iou, sample_grid_patches, zncc
from models import EMBEDDING_DIM, BoundingBox, Frame, LanguageSentence
from nn import (
    Adagrad,
    Dense,
    Layer,
    cross_entropy,
    cross_entropy_backward,
    load_params,
    prefixed,
    save_params,
    sigmoid,
    tanh_backward,
)
from synth import OOV_TOKEN, VOCABULARY, has_spatial_clause

logger = logging.getLogger(__name__)

GRID_SIZE = 16
CELL_PX = 8
FEATURE_DIM = 38
COORD_DIM = 8
WORD_DIM = 64
SENTENCE_HIDDEN = 256
FUSION_DIM = 128
OUTPUT_DIM = 5
MAX_LOG_SCALE = 5.0
OFFSET_CLIP = (0.01, 0.99)
FOREGROUND_DELTA = 0.1
EDGE_THRESHOLD = 0.1
TANET_PATCH = 16

EMBEDDING_FILE = "embedding.ckpt"
GROUNDING_FILE = "grounding.ckpt"
VOCABULARY_FILE = "vocab.txt"


class Vocabulary:
    """Closed token list; row 0 is the out-of-vocabulary row."""

    def __init__(self, tokens: Sequence[str] = VOCABULARY):
        tokens = tuple(tokens)
        if not tokens or tokens[0] != OOV_TOKEN:
            raise ValueError(f"vocabulary must start with {OOV_TOKEN!r}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary has duplicate tokens")
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self._index.get(t, 0) for t in tokens], dtype=np.int64)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([line.strip() for line in Path(path).read_text().splitlines() if line.strip()])


# -- cell inputs ----------------------------------------------------------------------


def _cells(array: np.ndarray, grid: int) -> np.ndarray:
    """(grid*c, grid*c, ...) -> (grid*grid, c*c, ...) in row-major cell order."""
    c = array.shape[0] // grid
    rest = array.shape[2:]
    split = array.reshape(grid, c, grid, c, *rest)
    order = (0, 2, 1, 3) + tuple(range(4, 4 + len(rest)))
    return split.transpose(order).reshape(grid * grid, c * c, *rest)


def grid_features(frame: Frame, grid: int = GRID_SIZE) -> np.ndarray:
    """
    38-d descriptor per cell, row-major: mean RGB, RGB std, 8-bin
    saturation-weighted hue histogram, 8-bin magnitude-weighted gradient
    orientation histogram, edge density, then 15 contrast/shape moments.
    """
    side = grid * CELL_PX
    full = BoundingBox(0, 0, frame.width, frame.height)
    pixels = crop_resize(frame, full, side, side)
    cells = _cells(pixels, grid)  # (C, 64, 3)
    n_px = cells.shape[1]

    mean_rgb = cells.mean(axis=1)
    std_rgb = cells.std(axis=1)

    hsv = cv2.cvtColor(pixels.astype(np.float32), cv2.COLOR_RGB2HSV).astype(np.float64)
    hue_bin = (np.floor(hsv[..., 0] / 45.0).astype(np.int64)) % 8
    hue_hist = (np.eye(8)[hue_bin] * hsv[..., 1:2])
    hue_hist = _cells(hue_hist, grid).sum(axis=1) / n_px

    gray = pixels @ np.array([0.299, 0.587, 0.114])
    gray32 = gray.astype(np.float32)
    gx = cv2.Sobel(gray32, cv2.CV_32F, 1, 0, ksize=3).astype(np.float64) / 8.0
    gy = cv2.Sobel(gray32, cv2.CV_32F, 0, 1, ksize=3).astype(np.float64) / 8.0
    magnitude = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    orient_bin = np.minimum((angle / (np.pi / 4)).astype(np.int64), 7)
    orient_hist = _cells(np.eye(8)[orient_bin] * magnitude[..., None], grid).sum(axis=1) / n_px
    edge_density = _cells((magnitude > EDGE_THRESHOLD).astype(np.float64), grid).mean(axis=1)[:, None]

    contrast = cells.max(axis=1) - cells.min(axis=1)
    gray_cells = _cells(gray, grid)
    gray_offset = (gray_cells.mean(axis=1) - gray.mean())[:, None]
    saturation = _cells(hsv[..., 1], grid).mean(axis=1)[:, None]

    median = np.median(pixels.reshape(-1, 3), axis=0)
    foreground = (np.abs(pixels - median).max(axis=2) > FOREGROUND_DELTA).astype(np.float64)
    fg = _cells(foreground, grid)  # (C, 64)
    count = fg.sum(axis=1)
    safe = np.maximum(count, 1.0)
    local = (np.arange(CELL_PX) + 0.5) / CELL_PX
    v_loc, u_loc = np.meshgrid(local, local, indexing="ij")
    u_loc, v_loc = u_loc.ravel(), v_loc.ravel()
    mu_u = (fg @ u_loc) / safe
    mu_v = (fg @ v_loc) / safe
    du = u_loc[None, :] - mu_u[:, None]
    dv = v_loc[None, :] - mu_v[:, None]
    var_u = (fg * du * du).sum(axis=1) / safe
    var_v = (fg * dv * dv).sum(axis=1) / safe
    cov_uv = (fg * du * dv).sum(axis=1) / safe
    has_fg = count > 0
    centroid = np.where(has_fg[:, None], np.stack([mu_u - 0.5, mu_v - 0.5], axis=1), 0.0)
    half = CELL_PX // 2
    quad = fg.reshape(-1, 2, half, 2, half).mean(axis=(2, 4)).reshape(-1, 4)

    moments = np.hstack([
        contrast, gray_offset, saturation, (count / n_px)[:, None], centroid,
        np.stack([var_u, var_v, cov_uv], axis=1), quad,
    ])
    features = np.hstack([mean_rgb, std_rgb, hue_hist, orient_hist, edge_density, moments])
    return features


def spatial_coords(grid: int = GRID_SIZE) -> np.ndarray:
    """(grid*grid, 8): x_min, y_min, x_max, y_max, x_center, y_center, cell_w, cell_h in [0, 1]."""
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    size = 1.0 / grid
    x_min, y_min = cols * size, rows * size
    return np.stack([
        x_min, y_min, x_min + size, y_min + size, x_min + size / 2, y_min + size / 2,
        np.full(grid * grid, size), np.full(grid * grid, size),
    ], axis=1)


# -- sentence encoder ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SentenceEmbedding:
    word_vectors: np.ndarray  # (T, word_dim)
    pooled: np.ndarray        # (embed_dim,)


@dataclass
class _EncoderCache:
    ids: np.ndarray
    mean: np.ndarray
    hidden: np.ndarray
    pooled: np.ndarray


class SentenceEncoder(Layer):
    """Word table, mean pooling, then tanh(dense) twice: 64 -> 256 -> 512."""

    def __init__(
        self,
        vocab_size: int,
        rng: Optional[np.random.Generator] = None,
        word_dim: int = WORD_DIM,
        hidden_dim: int = SENTENCE_HIDDEN,
        embed_dim: int = EMBEDDING_DIM,
    ):
        self.table = rng.normal(0.0, 0.5, size=(vocab_size, word_dim)) if rng is not None \
            else np.zeros((vocab_size, word_dim))
        self.hidden = Dense(word_dim, hidden_dim, rng)
        self.out = Dense(hidden_dim, embed_dim, rng)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {
            "table": self.table,
            **prefixed("hidden", self.hidden.named_parameters()),
            **prefixed("out", self.out.named_parameters()),
        }

    def forward(self, ids: np.ndarray) -> tuple[SentenceEmbedding, _EncoderCache]:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("cannot embed an empty sentence")
        words = self.table[ids]
        mean = words.mean(axis=0)
        hidden = np.tanh(self.hidden.forward(mean))
        pooled = np.tanh(self.out.forward(hidden))
        return SentenceEmbedding(words, pooled), _EncoderCache(ids, mean, hidden, pooled)

    def backward(self, cache: _EncoderCache, d_pooled: np.ndarray) -> dict[str, np.ndarray]:
        d_out = tanh_backward(cache.pooled, d_pooled)
        d_hidden, g_out = self.out.backward(cache.hidden, d_out)
        d_hidden_pre = tanh_backward(cache.hidden, d_hidden)
        d_mean, g_hidden = self.hidden.backward(cache.mean, d_hidden_pre)
        d_table = np.zeros_like(self.table)
        np.add.at(d_table, cache.ids, d_mean / len(cache.ids))
        return {
            "table": d_table,
            **prefixed("hidden", g_hidden),
            **prefixed("out", g_out),
        }


# -- grounding head -----------------------------------------------------------------


@dataclass
class _HeadCache:
    fused_in: np.ndarray
    fused: np.ndarray
    feature_dim: int


class GroundingHead(Layer):
    """Per-cell fusion (the 1x1 convolution) then a per-cell 5-way output."""

    def __init__(
        self,
        rng: Optional[np.random.Generator] = None,
        feature_dim: int = FEATURE_DIM,
        embed_dim: int = EMBEDDING_DIM,
        coord_dim: int = COORD_DIM,
        fusion_dim: int = FUSION_DIM,
    ):
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.fusion = Dense(feature_dim + embed_dim + coord_dim, fusion_dim, rng)
        self.output = Dense(fusion_dim, OUTPUT_DIM, rng)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {
            **prefixed("fusion", self.fusion.named_parameters()),
            **prefixed("output", self.output.named_parameters()),
        }

    def forward(
        self, features: np.ndarray, pooled: np.ndarray, coords: np.ndarray
    ) -> tuple[np.ndarray, _HeadCache]:
        n_cells = features.shape[0]
        duplicated = np.broadcast_to(pooled, (n_cells, pooled.shape[0]))
        fused_in = np.hstack([features, duplicated, coords])
        fused = np.tanh(self.fusion.forward(fused_in))
        return self.output.forward(fused), _HeadCache(fused_in, fused, features.shape[1])

    def backward(self, cache: _HeadCache, d_out: np.ndarray) -> tuple[np.ndarray, dict]:
        """Returns (gradient w.r.t. the pooled sentence vector, parameter grads)."""
        d_fused, g_output = self.output.backward(cache.fused, d_out)
        d_pre = tanh_backward(cache.fused, d_fused)
        d_in, g_fusion = self.fusion.backward(cache.fused_in, d_pre)
        start = cache.feature_dim
        d_pooled = d_in[:, start : start + self.embed_dim].sum(axis=0)
        return d_pooled, {**prefixed("fusion", g_fusion), **prefixed("output", g_output)}


# -- loss ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundingTarget:
    cell: int
    offsets: np.ndarray  # sigmoid-space x/y targets, log-scale w/h targets


def cell_anchor(cell: int, grid: int, frame_width: float, frame_height: float) -> BoundingBox:
    row, col = divmod(cell, grid)
    cw, ch = frame_width / grid, frame_height / grid
    return BoundingBox(col * cw, row * ch, cw, ch)


def grounding_target(
    gt: BoundingBox, frame_width: float, frame_height: float, grid: int = GRID_SIZE
) -> GroundingTarget:
    """One-hot max-IoU cell (lowest row-major index on ties) and its offset targets."""
    cx, cy = gt.center
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError(f"ground-truth box {gt.as_list()} has zero area")
    if not (0.0 <= cx < frame_width and 0.0 <= cy < frame_height):
        raise ValueError(f"ground-truth center ({cx:.1f}, {cy:.1f}) lies outside the frame")
    overlaps = [iou(gt, cell_anchor(c, grid, frame_width, frame_height)) for c in range(grid * grid)]
    cell = int(np.argmax(overlaps))
    row, col = divmod(cell, grid)
    cw, ch = frame_width / grid, frame_height / grid
    offsets = np.array([
        np.clip(cx / cw - col, *OFFSET_CLIP),
        np.clip(cy / ch - row, *OFFSET_CLIP),
        math.log(gt.w / cw),
        math.log(gt.h / ch),
    ])
    return GroundingTarget(cell, offsets)


def yolo_ground_loss(
    prediction: np.ndarray, target: GroundingTarget, box_weight: float = 1.0
) -> tuple[float, np.ndarray]:
    """
    Softmax cross-entropy of the cell logits against the target cell, plus
    squared error of the four offsets at that cell only.

    Returns (loss, gradient w.r.t. prediction).
    """
    logits = prediction[:, 0]
    ce, probs = cross_entropy(logits, target.cell)
    grad = np.zeros_like(prediction)
    grad[:, 0] = cross_entropy_backward(probs, target.cell)

    raw = prediction[target.cell, 1:]
    predicted = np.array([sigmoid(raw[0]), sigmoid(raw[1]), raw[2], raw[3]])
    diff = predicted - target.offsets
    box_loss = float(box_weight * np.sum(diff * diff))
    d_pred = 2.0 * box_weight * diff
    d_pred[:2] *= predicted[:2] * (1.0 - predicted[:2])
    grad[target.cell, 1:] = d_pred
    return ce + box_loss, grad


def decode_cell(
    prediction: np.ndarray, cell: int, grid: int, frame_width: float, frame_height: float
) -> BoundingBox:
    row, col = divmod(cell, grid)
    cw, ch = frame_width / grid, frame_height / grid
    tx, ty, tw, th = prediction[cell, 1:]
    cx = (col + float(sigmoid(tx))) * cw
    cy = (row + float(sigmoid(ty))) * ch
    w = cw * math.exp(float(np.clip(tw, -MAX_LOG_SCALE, MAX_LOG_SCALE)))
    h = ch * math.exp(float(np.clip(th, -MAX_LOG_SCALE, MAX_LOG_SCALE)))
    return BoundingBox.from_center(cx, cy, w, h)


# -- model --------------------------------------------------------------------------


@dataclass
class PreparedSample:
    features: np.ndarray
    ids: np.ndarray
    target: GroundingTarget
    spatial: bool


class GroundingModel(Layer):
    """Sentence encoder plus grounding head over a fixed cell grid."""

    def __init__(
        self,
        vocabulary: Optional[Vocabulary] = None,
        seed: Optional[int] = 0,
        use_spatial_coords: bool = True,
        grid: int = GRID_SIZE,
        box_weight: float = 1.0,
    ):
        self.vocabulary = vocabulary or Vocabulary()
        rng = np.random.default_rng(seed) if seed is not None else None
        self.encoder = SentenceEncoder(len(self.vocabulary), rng)
        self.head = GroundingHead(rng)
        self.grid = grid
        self.use_spatial_coords = use_spatial_coords
        self.box_weight = box_weight

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {
            **prefixed("embedding", self.encoder.named_parameters()),
            **prefixed("grounding", self.head.named_parameters()),
        }

    def coords(self) -> np.ndarray:
        coords = spatial_coords(self.grid)
        return coords if self.use_spatial_coords else np.zeros_like(coords)

    def embed_sentence(self, sentence: LanguageSentence) -> SentenceEmbedding:
        embedding, _ = self.encoder.forward(self.vocabulary.ids(sentence.tokens))
        return embedding

    def cell_predictions(self, features: np.ndarray, embedding: SentenceEmbedding) -> np.ndarray:
        out, _ = self.head.forward(features, embedding.pooled, self.coords())
        return out

    def ground(self, frame: Frame, embedding: SentenceEmbedding) -> tuple[BoundingBox, np.ndarray]:
        prediction = self.cell_predictions(grid_features(frame, self.grid), embedding)
        scores = np.exp(prediction[:, 0] - prediction[:, 0].max())
        scores /= scores.sum()
        cell = int(np.argmax(scores))
        box = decode_cell(prediction, cell, self.grid, frame.width, frame.height)
        return box, scores.reshape(self.grid, self.grid)

    def predict(self, frame: Frame, sentence: LanguageSentence) -> tuple[BoundingBox, float]:
        """Grounded box plus the winning cell's probability."""
        box, scores = self.ground(frame, self.embed_sentence(sentence))
        return box, float(scores.max())

    def prepare(self, frame: Frame, sentence: LanguageSentence, gt: BoundingBox) -> PreparedSample:
        return PreparedSample(
            features=grid_features(frame, self.grid),
            ids=self.vocabulary.ids(sentence.tokens),
            target=grounding_target(gt, frame.width, frame.height, self.grid),
            spatial=has_spatial_clause(sentence),
        )

    def loss(self, sample: PreparedSample) -> float:
        embedding, _ = self.encoder.forward(sample.ids)
        out, _ = self.head.forward(sample.features, embedding.pooled, self.coords())
        return yolo_ground_loss(out, sample.target, self.box_weight)[0]

    def loss_and_grads(self, sample: PreparedSample) -> tuple[float, dict]:
        embedding, enc_cache = self.encoder.forward(sample.ids)
        out, head_cache = self.head.forward(sample.features, embedding.pooled, self.coords())
        loss, d_out = yolo_ground_loss(out, sample.target, self.box_weight)
        d_pooled, head_grads = self.head.backward(head_cache, d_out)
        enc_grads = self.encoder.backward(enc_cache, d_pooled)
        return loss, {**prefixed("embedding", enc_grads), **prefixed("grounding", head_grads)}

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_params(directory / EMBEDDING_FILE, self.encoder.named_parameters())
        save_params(directory / GROUNDING_FILE, self.head.named_parameters())
        self.vocabulary.save(directory / VOCABULARY_FILE)

    @classmethod
    def from_checkpoints(
        cls,
        embedding_path,
        grounding_path,
        vocabulary_path=None,
        use_spatial_coords: bool = True,
    ) -> "GroundingModel":
        vocabulary = Vocabulary.load(vocabulary_path) if vocabulary_path else Vocabulary()
        model = cls(vocabulary, seed=None, use_spatial_coords=use_spatial_coords)
        load_params(embedding_path, model.encoder.named_parameters())
        load_params(grounding_path, model.head.named_parameters())
        return model


def embed_sentence(tokens: Sequence[str], model: GroundingModel) -> SentenceEmbedding:
    return model.embed_sentence(LanguageSentence(tuple(tokens)))


def ground(frame: Frame, embedding: SentenceEmbedding, model: GroundingModel) -> tuple[BoundingBox, np.ndarray]:
    return model.ground(frame, embedding)


def train_grounding(
    samples: Sequence[tuple[Frame, LanguageSentence, BoundingBox]],
    config: GroundingTrainConfig,
    use_spatial_coords: bool = True,
    model: Optional[GroundingModel] = None,
) -> tuple[GroundingModel, list[float]]:
    """
    Mini-batch Adagrad over (frame, sentence, gt) triples; returns the model and
    per-epoch mean loss. With ``freeze_embedding`` only the grounding head moves.
    """
    if not samples:
        raise ValueError("grounding corpus is empty")
    model = model or GroundingModel(
        seed=config.seed, use_spatial_coords=use_spatial_coords, box_weight=config.box_weight
    )
    prepared = [model.prepare(frame, sentence, gt) for frame, sentence, gt in
                tqdm(samples, desc="features", disable=None)]
    params = model.named_parameters()
    optimizer = Adagrad(config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(prepared))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            summed = None
            for index in batch:
                loss, grads = model.loss_and_grads(prepared[index])
                total += loss
                if summed is None:
                    summed = grads
                else:
                    for name in summed:
                        summed[name] += grads[name]
            if config.freeze_embedding:
                summed = {name: g for name, g in summed.items() if not name.startswith("embedding.")}
            optimizer.update(params, {name: g / len(batch) for name, g in summed.items()})
        mean_loss = total / len(prepared)
        history.append(mean_loss)
        logger.info(f"grounding epoch {epoch}/{config.epochs}: loss {mean_loss:.4f}")
    return model, history


def evaluate_grounding(
    model: GroundingModel,
    samples: Sequence[tuple[Frame, LanguageSentence, BoundingBox]],
    iou_threshold: float = 0.5,
) -> dict:
    """Hit rate (IoU >= threshold) overall and split by presence of a spatial clause."""
    hits = {"spatial": [], "plain": []}
    for frame, sentence, gt in samples:
        box, _ = model.predict(frame, sentence)
        key = "spatial" if has_spatial_clause(sentence) else "plain"
        hits[key].append(iou(box, gt) >= iou_threshold)
    everything = hits["spatial"] + hits["plain"]

    def rate(values):
        return float(np.mean(values)) if values else float("nan")

    return {
        "overall": rate(everything),
        "spatial": rate(hits["spatial"]),
        "plain": rate(hits["plain"]),
        "n_spatial": len(hits["spatial"]),
        "n_plain": len(hits["plain"]),
    }


# -- template attention ---------------------------------------------------------------


def tanet_attention(
    frame: Frame,
    template: np.ndarray,
    grid: int = GRID_SIZE,
    window: Optional[tuple[float, float]] = None,
) -> np.ndarray:
    """
    (grid, grid) attention map from template correlation.

    Each cell compares the template with a window centered on the cell
    (the cell itself unless ``window`` gives a (w, h) size). Correlation is
    mapped to [0, 1] and normalized to sum 1; a map with no usable
    correlation (flat template or flat frame) is uniform.
    """
    cw, ch = frame.width / grid, frame.height / grid
    w, h = window if window is not None else (cw, ch)
    centers_x = (np.arange(grid) + 0.5) * cw
    centers_y = (np.arange(grid) + 0.5) * ch
    patches = sample_grid_patches(
        frame.pixels, centers_x - w / 2, w, centers_y - h / 2, h, TANET_PATCH, TANET_PATCH
    )
    template = np.asarray(template, dtype=np.float64)
    small = crop_resize(template, BoundingBox(0, 0, template.shape[1], template.shape[0]), TANET_PATCH, TANET_PATCH)
    corr, valid = zncc(patches, small)
    attention = np.where(valid, (corr + 1.0) / 2.0, 0.0)
    total = attention.sum()
    if total <= 0:
        return np.full((grid, grid), 1.0 / (grid * grid))
    return attention / total


def is_uniform(attention: np.ndarray) -> bool:
    return bool(np.allclose(attention, attention.flat[0], rtol=0.0, atol=1e-15))


def attended_search_box(attention: np.ndarray, frame_width: float, frame_height: float) -> BoundingBox:
    """Argmax cell (first in row-major order) expanded 2x about its center."""
    grid = attention.shape[0]
    cell = int(np.argmax(attention))
    return cell_anchor(cell, grid, frame_width, frame_height).scaled(2.0)
