"""
Domain models for langswitch.

Boxes, frames, sentences, annotated sequences, the per-frame tracker
observation bundle and metric curves. All of them are immutable once
constructed; validation happens in ``__post_init__`` and raises
``ValueError`` with the offending value in the message.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

# Challenge attributes, in the canonical order used for files and reports.
ATTRIBUTES = (
    "CM", "ROT", "DEF", "FOC", "IV", "OV", "POC", "VC", "SV",
    "BC", "MB", "ARC", "LR", "FM", "AS", "TC", "MS",
)

ATTRIBUTE_DESCRIPTIONS = {
    "CM": "Abrupt motion of the camera",
    "ROT": "Target object rotates in the video",
    "DEF": "The target is deformable",
    "FOC": "Target is fully occluded",
    "IV": "Illumination variation",
    "OV": "The target completely leaves the video sequence",
    "POC": "Partially occluded",
    "VC": "Viewpoint change",
    "SV": "Scale variation",
    "BC": "Background clutter",
    "MB": "Motion blur",
    "ARC": "The ratio of bounding box aspect ratio is outside the range [0.5, 2]",
    "LR": "Low resolution",
    "FM": "The motion of the target is larger than the size of its bounding box",
    "AS": "Influence of adversarial samples",
    "TC": "Two targets with similar intensity cross each other",
    "MS": "Video contain both color and thermal images",
}

RESULT_IMAGE_SIZE = 30
RESPONSE_MAP_SIZE = 23
EMBEDDING_DIM = 512

# confidence, box, result image, response map, language embedding
OBSERVATION_LAYOUT = (
    ("score", 1),
    ("bbox", 4),
    ("image", RESULT_IMAGE_SIZE * RESULT_IMAGE_SIZE * 3),
    ("map", RESPONSE_MAP_SIZE * RESPONSE_MAP_SIZE),
    ("embedding", EMBEDDING_DIM),
)
OBSERVATION_STRIDE = sum(size for _, size in OBSERVATION_LAYOUT)


def observation_slices() -> dict[str, slice]:
    """Column ranges of each component inside a flattened observation."""
    slices = {}
    start = 0
    for name, size in OBSERVATION_LAYOUT:
        slices[name] = slice(start, start + size)
        start += size
    return slices


class Modality(str, Enum):
    RGB = "RGB"
    THERMAL = "THERMAL"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box [x1, y1, w, h] in pixels."""

    x1: float
    y1: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x1", "y1", "w", "h"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"BoundingBox.{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.w < 0 or self.h < 0:
            raise ValueError(f"BoundingBox width/height must be >= 0, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x1 + self.w

    @property
    def y2(self) -> float:
        return self.y1 + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.w / 2, self.y1 + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.w, self.h]

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        if len(values) != 4:
            raise ValueError(f"BoundingBox needs 4 values, got {len(values)}")
        return cls(*values)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2, cy - h / 2, w, h)

    def scaled(self, factor: float) -> "BoundingBox":
        """Box scaled about its own center."""
        cx, cy = self.center
        return BoundingBox.from_center(cx, cy, self.w * factor, self.h * factor)

    def intersects_frame(self, width: int, height: int) -> bool:
        return (
            min(self.x2, width) - max(self.x1, 0.0) > 0
            and min(self.y2, height) - max(self.y1, 0.0) > 0
        )


@dataclass(frozen=True, eq=False)
class Frame:
    """An H x W x 3 image with intensities in [0, 1]."""

    pixels: np.ndarray
    modality: Modality = Modality.RGB

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"Frame pixels must have shape (H, W, 3), got {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError(f"Frame must be at least 1x1, got {pixels.shape[:2]}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("Frame intensities must lie in [0, 1]")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return self.modality == other.modality and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class LanguageSentence:
    """An ordered list of lowercase tokens."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        tokens = tuple(self.tokens)
        if not tokens:
            raise ValueError("LanguageSentence needs at least one token")
        for token in tokens:
            if not token or any(ch.isspace() for ch in token) or token != token.lower():
                raise ValueError(f"Invalid token {token!r}: tokens are lowercase without whitespace")
        object.__setattr__(self, "tokens", tokens)

    @classmethod
    def from_text(cls, text: str) -> "LanguageSentence":
        return cls(tuple(text.lower().split()))

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


def _check_attributes(attributes) -> frozenset:
    attributes = frozenset(attributes)
    unknown = sorted(attributes - set(ATTRIBUTES))
    if unknown:
        raise ValueError(f"Unknown attribute codes: {', '.join(unknown)}")
    return attributes


def sorted_attributes(attributes) -> list[str]:
    """Attribute codes in canonical order."""
    return [code for code in ATTRIBUTES if code in attributes]


@dataclass(frozen=True)
class SequenceAnnotation:
    """Everything about a sequence except its pixels."""

    name: str
    gt: tuple[BoundingBox, ...]
    absent: tuple[bool, ...]
    attributes: frozenset
    sentence: LanguageSentence

    def __post_init__(self):
        object.__setattr__(self, "gt", tuple(self.gt))
        object.__setattr__(self, "absent", tuple(bool(a) for a in self.absent))
        object.__setattr__(self, "attributes", _check_attributes(self.attributes))
        if len(self.gt) < 1:
            raise ValueError(f"Sequence {self.name!r} has no frames")
        if len(self.gt) != len(self.absent):
            raise ValueError(
                f"Sequence {self.name!r}: {len(self.gt)} gt boxes but {len(self.absent)} absent flags"
            )

    def __len__(self) -> int:
        return len(self.gt)


@dataclass(frozen=True)
class SequenceRecord:
    """Frames plus per-frame annotation; one synthetic stand-in video."""

    name: str
    frames: tuple[Frame, ...]
    gt: tuple[BoundingBox, ...]
    absent: tuple[bool, ...]
    attributes: frozenset
    sentence: LanguageSentence

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        # reuse the annotation checks
        annotation = SequenceAnnotation(
            self.name, self.gt, self.absent, self.attributes, self.sentence
        )
        object.__setattr__(self, "gt", annotation.gt)
        object.__setattr__(self, "absent", annotation.absent)
        object.__setattr__(self, "attributes", annotation.attributes)
        if len(self.frames) != len(self.gt):
            raise ValueError(
                f"Sequence {self.name!r}: {len(self.frames)} frames but {len(self.gt)} gt boxes"
            )

    @property
    def annotation(self) -> SequenceAnnotation:
        return SequenceAnnotation(self.name, self.gt, self.absent, self.attributes, self.sentence)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True, eq=False)
class TrackerObservation:
    """Per-frame bundle a local tracker hands to the switcher."""

    confidence: float
    box: BoundingBox
    result_image: np.ndarray
    response_map: np.ndarray
    lang_embedding: np.ndarray = field(default_factory=lambda: np.zeros(EMBEDDING_DIM))

    def __post_init__(self):
        confidence = float(self.confidence)
        if not 0.0 <= confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {confidence}")
        object.__setattr__(self, "confidence", confidence)
        expected = {
            "result_image": (RESULT_IMAGE_SIZE, RESULT_IMAGE_SIZE, 3),
            "response_map": (RESPONSE_MAP_SIZE, RESPONSE_MAP_SIZE),
            "lang_embedding": (EMBEDDING_DIM,),
        }
        for name, shape in expected.items():
            array = np.asarray(getattr(self, name), dtype=np.float64)
            if array.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {array.shape}")
            object.__setattr__(self, name, array)

    def to_vector(self) -> np.ndarray:
        """Flatten to the fixed 3746-long record layout."""
        return np.concatenate([
            [self.confidence],
            self.box.as_list(),
            self.result_image.ravel(),
            self.response_map.ravel(),
            self.lang_embedding,
        ])

    @classmethod
    def from_vector(cls, vector) -> "TrackerObservation":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (OBSERVATION_STRIDE,):
            raise ValueError(f"observation vector must have length {OBSERVATION_STRIDE}, got {vector.shape}")
        s = observation_slices()
        x1, y1, w, h = vector[s["bbox"]]
        return cls(
            confidence=float(np.clip(vector[0], 0.0, 1.0)),
            box=BoundingBox(x1, y1, max(w, 0.0), max(h, 0.0)),
            result_image=vector[s["image"]].reshape(RESULT_IMAGE_SIZE, RESULT_IMAGE_SIZE, 3),
            response_map=vector[s["map"]].reshape(RESPONSE_MAP_SIZE, RESPONSE_MAP_SIZE),
            lang_embedding=vector[s["embedding"]],
        )


@dataclass(frozen=True, eq=False)
class MetricCurve:
    """Threshold axis paired with fraction-of-frames values."""

    thresholds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        thresholds = np.asarray(self.thresholds, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if thresholds.shape != values.shape or thresholds.ndim != 1:
            raise ValueError(
                f"thresholds and values must be 1-D of equal length, got {thresholds.shape} and {values.shape}"
            )
        if np.any(np.diff(thresholds) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("curve values must lie in [0, 1]")
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "values", values)

    def value_at(self, threshold: float) -> Optional[float]:
        """Curve value at an exact grid threshold, or None if off-grid."""
        idx = np.flatnonzero(np.isclose(self.thresholds, threshold, rtol=0.0, atol=1e-9))
        if idx.size == 0:
            return None
        return float(self.values[idx[0]])

    def __len__(self) -> int:
        return len(self.thresholds)
