"""
Synthetic annotated-video generator.

Moving colored shapes on a textured gray background, with challenge
events for every attribute code, exact ground truth, absent labels and a
template-grammar sentence that refers to the target unambiguously.

Everything here is a pure function of the SceneSpec: the same seed gives
byte-identical PNG frames.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import cv2
import numpy as np
from tqdm import tqdm

from geometry import iou
from models import (
    ATTRIBUTES,
    BoundingBox,
    Frame,
    LanguageSentence,
    Modality,
    SequenceRecord,
    sorted_attributes,
)
import sequence_io

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("square", "circle", "triangle")
COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.12, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.88, 0.10),
    "white": (0.96, 0.96, 0.96),
    "black": (0.04, 0.04, 0.04),
}
SPATIAL_WORDS = ("left", "right", "top", "bottom")
RELATION_WORDS = ("to", "of", "above", "below")
OOV_TOKEN = "<oov>"

# Closed vocabulary; row 0 is the out-of-vocabulary row.
VOCABULARY = (OOV_TOKEN, "the", "on", *COLORS, *SHAPE_KINDS, *SPATIAL_WORDS, *RELATION_WORDS)

DEFAULT_FRAME_SIZE = (128, 128)
BACKGROUND_GRAY = 0.45
BACKGROUND_TEXTURE = 0.04
FULL_OCCLUSION_COVERAGE = 0.99
TC_INTENSITY_GAP = 0.05
# Derived from the boxes, never copied from events.
DERIVED_ATTRIBUTES = frozenset({"FM", "ARC"})


class SceneValidationError(ValueError):
    """A SceneSpec violates its invariants."""


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear path through waypoints, one speed (px/frame) per segment."""

    waypoints: tuple
    speeds: tuple = ()

    def __post_init__(self):
        waypoints = tuple((float(x), float(y)) for x, y in self.waypoints)
        speeds = tuple(float(s) for s in self.speeds)
        if not waypoints:
            raise SceneValidationError("trajectory needs at least one waypoint")
        if len(speeds) != len(waypoints) - 1:
            raise SceneValidationError(
                f"trajectory has {len(waypoints)} waypoints but {len(speeds)} segment speeds"
            )
        if any(s <= 0 or not math.isfinite(s) for s in speeds):
            raise SceneValidationError("segment speeds must be positive")
        object.__setattr__(self, "waypoints", waypoints)
        object.__setattr__(self, "speeds", speeds)

    @classmethod
    def static(cls, x: float, y: float) -> "Trajectory":
        return cls(((x, y),))

    def position(self, t: float) -> tuple[float, float]:
        remaining = float(t)
        x, y = self.waypoints[0]
        for (x0, y0), (x1, y1), speed in zip(self.waypoints, self.waypoints[1:], self.speeds):
            length = math.hypot(x1 - x0, y1 - y0)
            duration = length / speed
            if remaining <= duration:
                frac = 0.0 if duration == 0 else remaining / duration
                return (x0 + (x1 - x0) * frac, y0 + (y1 - y0) * frac)
            remaining -= duration
            x, y = x1, y1
        return (x, y)

    def to_dict(self) -> dict:
        return {"waypoints": [list(p) for p in self.waypoints], "speeds": list(self.speeds)}


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    size: float
    trajectory: Trajectory

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise SceneValidationError(f"unknown shape kind {self.kind!r}")
        if self.color not in COLORS:
            raise SceneValidationError(f"unknown color {self.color!r}")
        if not self.size > 0:
            raise SceneValidationError(f"shape size must be positive, got {self.size}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "color": self.color,
            "size": self.size,
            "trajectory": self.trajectory.to_dict(),
        }


@dataclass(frozen=True)
class ChallengeEvent:
    """One challenge attribute active over the inclusive frame range [start, end]."""

    attribute: str
    start: int
    end: int
    params: dict = field(default_factory=dict)

    def param(self, name: str, default):
        return self.params.get(name, default)

    def active(self, t: int) -> bool:
        return self.start <= t <= self.end

    def progress(self, t: int) -> float:
        """0 before the event, ramps to 1 at its last frame, 1 afterwards."""
        if t < self.start:
            return 0.0
        if t >= self.end:
            return 1.0
        return (t - self.start) / (self.end - self.start)

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "start": self.start, "end": self.end, "params": dict(self.params)}


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    length: int
    target: ShapeSpec
    frame_size: tuple = DEFAULT_FRAME_SIZE
    distractors: tuple = ()
    events: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "distractors", tuple(self.distractors))
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "frame_size", tuple(int(v) for v in self.frame_size))

    def validate(self):
        width, height = self.frame_size
        if width < 1 or height < 1:
            raise SceneValidationError(f"frame size must be positive, got {self.frame_size}")
        if self.length < 1:
            raise SceneValidationError(f"length must be >= 1, got {self.length}")
        for shape in (self.target, *self.distractors):
            for x, y in shape.trajectory.waypoints:
                if not (-width <= x <= 2 * width and -height <= y <= 2 * height):
                    raise SceneValidationError(f"waypoint ({x}, {y}) outside the expanded frame region")
        for event in self.events:
            if event.attribute not in ATTRIBUTES:
                raise SceneValidationError(f"unknown event attribute {event.attribute!r}")
            if not 0 <= event.start <= event.end < self.length:
                raise SceneValidationError(
                    f"{event.attribute} event range [{event.start}, {event.end}] outside [0, {self.length - 1}]"
                )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "length": self.length,
            "frame_size": list(self.frame_size),
            "target": self.target.to_dict(),
            "distractors": [d.to_dict() for d in self.distractors],
            "events": [e.to_dict() for e in self.events],
        }


@dataclass
class _ShapeState:
    kind: str
    rgb: tuple
    cx: float
    cy: float
    size_x: float
    size_y: float
    angle: float = 0.0

    def corners(self) -> np.ndarray:
        hx, hy = self.size_x / 2, self.size_y / 2
        if self.kind == "triangle":
            local = np.array([[0.0, -hy], [-hx, hy], [hx, hy]])
        else:
            local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        c, s = math.cos(self.angle), math.sin(self.angle)
        rot = local @ np.array([[c, s], [-s, c]])
        return rot + np.array([self.cx, self.cy])

    def box(self) -> BoundingBox:
        if self.kind == "circle":
            a, b = self.size_x / 2, self.size_y / 2
            c, s = math.cos(self.angle), math.sin(self.angle)
            hw = math.sqrt((a * c) ** 2 + (b * s) ** 2)
            hh = math.sqrt((a * s) ** 2 + (b * c) ** 2)
            return BoundingBox(self.cx - hw, self.cy - hh, 2 * hw, 2 * hh)
        pts = self.corners()
        x1, y1 = pts.min(axis=0)
        x2, y2 = pts.max(axis=0)
        return BoundingBox(x1, y1, x2 - x1, y2 - y1)


def coverage(box: BoundingBox, cover: BoundingBox) -> float:
    """Fraction of ``box`` area lying inside ``cover``."""
    if box.area <= 0:
        return 0.0
    inter_w = max(0.0, min(box.x2, cover.x2) - max(box.x1, cover.x1))
    inter_h = max(0.0, min(box.y2, cover.y2) - max(box.y1, cover.y1))
    return inter_w * inter_h / box.area


def _ov_profile(event: ChallengeEvent, t: int) -> float:
    """Out-and-back displacement profile: 0 -> 1 over the first third, 1, then back."""
    duration = event.end - event.start + 1
    k = t - event.start
    if duration < 3:
        return 1.0
    third = duration / 3.0
    if k < third:
        return k / third
    if k < 2 * third:
        return 1.0
    return max(0.0, (duration - 1 - k) / third)


class SceneRenderer:
    """Precomputes per-frame object states for one SceneSpec and renders frames."""

    def __init__(self, spec: SceneSpec):
        spec.validate()
        self.spec = spec
        self.width, self.height = spec.frame_size
        rng = np.random.default_rng(spec.seed)

        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        self._px = xs + 0.5
        self._py = ys + 0.5

        coarse = rng.random((self.height // 8 + 2, self.width // 8 + 2)).astype(np.float32)
        texture = cv2.resize(coarse, (self.width, self.height), interpolation=cv2.INTER_LINEAR)
        self._texture = BACKGROUND_GRAY + BACKGROUND_TEXTURE * (texture.astype(np.float64) - 0.5) * 2

        self.camera = [self._camera_offset(t) for t in range(spec.length)]
        self.target_states = [self._target_state(t) for t in range(spec.length)]
        self.distractor_states = [
            [self._distractor_state(d, t) for d in spec.distractors] for t in range(spec.length)
        ]
        self._occluders = {}
        self._clutter = {}
        for index, event in enumerate(spec.events):
            if event.attribute == "FOC":
                self._occluders[index] = self._full_occluder(event)
            elif event.attribute == "BC":
                self._clutter[index] = self._make_clutter(event, rng)

    # -- state ------------------------------------------------------------------

    def _active(self, attribute: str, t: int) -> list[ChallengeEvent]:
        return [e for e in self.spec.events if e.attribute == attribute and e.active(t)]

    def _camera_offset(self, t: int) -> tuple[float, float]:
        dx = dy = 0.0
        for event in self._active("CM", t):
            dx += float(event.param("dx", 10.0))
            dy += float(event.param("dy", 6.0))
        return (dx, dy)

    def _target_state(self, t: int) -> _ShapeState:
        target = self.spec.target
        cx, cy = target.trajectory.position(t)
        kind, color = target.kind, target.color
        scale_x = scale_y = 1.0
        angle = 0.0
        for event in self.spec.events:
            a = event.attribute
            if a == "SV":
                factor = 1.0 + (float(event.param("factor", 1.6)) - 1.0) * event.progress(t)
                scale_x *= factor
                scale_y *= factor
            elif a == "ARC":
                scale_x *= 1.0 + (float(event.param("factor", 2.5)) - 1.0) * event.progress(t)
            elif a == "ROT":
                frames = min(max(t, event.start), event.end) - event.start
                angle += math.radians(float(event.param("speed", 6.0))) * frames
            elif a == "DEF" and event.active(t):
                amp = float(event.param("amplitude", 0.3))
                period = float(event.param("period", 8.0))
                wave = amp * math.sin(2 * math.pi * (t - event.start) / period)
                scale_x *= 1.0 + wave
                scale_y *= 1.0 - wave
            elif a == "VC" and event.active(t):
                kind = event.param("kind", kind)
                color = event.param("color", color)
            elif a == "FM" and event.active(t):
                dx = float(event.param("dx", 30.0))
                if event.param("toward_center", False):
                    dx = abs(dx) if cx < self.width / 2 else -abs(dx)
                cx += dx
                cy += float(event.param("dy", 0.0))
        state = _ShapeState(
            kind, COLORS[color], cx, cy, target.size * scale_x, target.size * scale_y, angle
        )
        for event in self._active("OV", t):
            box = state.box()
            direction = event.param("direction", "left")
            profile = _ov_profile(event, t)
            if direction == "left":
                state.cx -= (box.x2 + 2.0) * profile
            elif direction == "right":
                state.cx += (self.width - box.x1 + 2.0) * profile
            elif direction == "top":
                state.cy -= (box.y2 + 2.0) * profile
            else:
                state.cy += (self.height - box.y1 + 2.0) * profile
        dx, dy = self.camera[t]
        state.cx += dx
        state.cy += dy
        return state

    def _distractor_state(self, shape: ShapeSpec, t: int) -> _ShapeState:
        cx, cy = shape.trajectory.position(t)
        dx, dy = self.camera[t]
        return _ShapeState(shape.kind, COLORS[shape.color], cx + dx, cy + dy, shape.size, shape.size)

    def _full_occluder(self, event: ChallengeEvent) -> BoundingBox:
        margin = float(event.param("margin", 3.0))
        boxes = [self.target_states[t].box() for t in range(event.start, event.end + 1)]
        x1 = min(b.x1 for b in boxes) - margin
        y1 = min(b.y1 for b in boxes) - margin
        x2 = max(b.x2 for b in boxes) + margin
        y2 = max(b.y2 for b in boxes) + margin
        return BoundingBox(x1, y1, x2 - x1, y2 - y1)

    def _make_clutter(self, event: ChallengeEvent, rng: np.random.Generator) -> list[_ShapeState]:
        names = list(COLORS)
        clutter = []
        for _ in range(int(event.param("count", 8))):
            size = float(rng.uniform(5.0, 10.0))
            clutter.append(_ShapeState(
                SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))],
                COLORS[names[int(rng.integers(len(names)))]],
                float(rng.uniform(0, self.width)),
                float(rng.uniform(0, self.height)),
                size,
                size,
            ))
        return clutter

    def _crossing_state(self, event: ChallengeEvent, t: int) -> _ShapeState:
        target = self.target_states[t]
        span = float(event.param("span", 2.5)) * self.spec.target.size
        frac = 0.5 if event.end == event.start else (t - event.start) / (event.end - event.start)
        return _ShapeState(
            target.kind, target.rgb, target.cx - span + 2 * span * frac, target.cy,
            target.size_x, target.size_y, target.angle,
        )

    # -- annotation ---------------------------------------------------------------

    def gt(self, t: int) -> BoundingBox:
        return self.target_states[t].box()

    def occluders(self, t: int) -> list[tuple[BoundingBox, float]]:
        """(rectangle, gray level) of every occluder drawn at frame t."""
        result = []
        for index, event in enumerate(self.spec.events):
            if not event.active(t):
                continue
            if event.attribute == "FOC":
                result.append((self._occluders[index], float(event.param("gray", 0.2))))
            elif event.attribute == "POC":
                box = self.gt(t)
                fraction = float(event.param("fraction", 0.5))
                result.append((BoundingBox(box.x1 - 1, box.y1 - 1, box.w * fraction + 1, box.h + 2),
                               float(event.param("gray", 0.2))))
        return result

    def absent(self, t: int) -> bool:
        box = self.gt(t)
        if not box.intersects_frame(self.width, self.height):
            return True
        if box.area <= 0:
            return False
        for index, event in enumerate(self.spec.events):
            if event.attribute == "FOC" and event.active(t):
                if coverage(box, self._occluders[index]) >= FULL_OCCLUSION_COVERAGE:
                    return True
        return False

    def modality(self, t: int) -> Modality:
        return Modality.THERMAL if self._active("MS", t) else Modality.RGB

    def attributes(self) -> frozenset:
        tags = {e.attribute for e in self.spec.events} - DERIVED_ATTRIBUTES
        boxes = [self.gt(t) for t in range(self.spec.length)]
        for prev, cur in zip(boxes, boxes[1:]):
            (px, py), (cx, cy) = prev.center, cur.center
            if math.hypot(cx - px, cy - py) > max(prev.w, prev.h):
                tags.add("FM")
                break
        if boxes[0].h > 0 and boxes[0].w > 0:
            base = boxes[0].w / boxes[0].h
            for box in boxes:
                if box.h > 0 and not 0.5 <= (box.w / box.h) / base <= 2.0:
                    tags.add("ARC")
                    break
        if any(not b.intersects_frame(self.width, self.height) for b in boxes):
            tags.add("OV")
        if any(self.modality(t) == Modality.THERMAL for t in range(self.spec.length)):
            tags.add("MS")
        return frozenset(tags)

    # -- rendering ----------------------------------------------------------------

    def _draw(self, canvas: np.ndarray, state: _ShapeState, invert_shade: bool = False):
        u = self._px - state.cx
        v = self._py - state.cy
        c, s = math.cos(state.angle), math.sin(state.angle)
        ur = (u * c + v * s) / (state.size_x / 2)
        vr = (-u * s + v * c) / (state.size_y / 2)
        if state.kind == "square":
            mask = (np.abs(ur) <= 1) & (np.abs(vr) <= 1)
        elif state.kind == "circle":
            mask = ur ** 2 + vr ** 2 <= 1
        else:
            mask = (vr >= -1) & (vr <= 1) & (np.abs(ur) <= (vr + 1) / 2)
        shade = np.clip((ur + vr + 2) / 4, 0.0, 1.0)
        if invert_shade:
            shade = 1.0 - shade
        rgb = np.asarray(state.rgb)
        colored = 0.8 * rgb[None, None, :] + 0.2 * shade[..., None]
        canvas[mask] = colored[mask]

    def _fill_rect(self, canvas: np.ndarray, box: BoundingBox, value):
        inside = (
            (self._px >= box.x1) & (self._px < box.x2) & (self._py >= box.y1) & (self._py < box.y2)
        )
        canvas[inside] = value

    def render(self, t: int) -> Frame:
        if not 0 <= t < self.spec.length:
            raise IndexError(f"frame {t} outside [0, {self.spec.length})")
        dx, dy = self.camera[t]
        texture = np.roll(self._texture, (int(round(dy)), int(round(dx))), axis=(0, 1))
        canvas = np.repeat(texture[..., None], 3, axis=2)

        for index, event in enumerate(self.spec.events):
            if event.attribute == "BC" and event.active(t):
                for state in self._clutter[index]:
                    self._draw(canvas, state)
        for state in self.distractor_states[t]:
            self._draw(canvas, state)
        self._draw(canvas, self.target_states[t])
        for event in self._active("TC", t):
            self._draw(canvas, self._crossing_state(event, t), invert_shade=True)
        for box, gray in self.occluders(t):
            self._fill_rect(canvas, box, gray)

        for event in self._active("AS", t):
            noise_rng = np.random.default_rng([self.spec.seed, t, 15])
            amplitude = float(event.param("amplitude", 0.25))
            box = self.gt(t)
            inside = (
                (self._px >= box.x1) & (self._px < box.x2) & (self._py >= box.y1) & (self._py < box.y2)
            )
            noise = noise_rng.uniform(-amplitude, amplitude, size=canvas.shape)
            canvas[inside] += noise[inside]
        for event in self._active("IV", t):
            gain = float(event.param("gain", 0.55))
            frac = 0.5 if event.end == event.start else (t - event.start) / (event.end - event.start)
            canvas *= 1.0 + (gain - 1.0) * math.sin(math.pi * frac)
        canvas = np.clip(canvas, 0.0, 1.0)
        for event in self._active("MB", t):
            length = int(event.param("length", 7))
            canvas = cv2.blur(canvas.astype(np.float32), (length, 1)).astype(np.float64)
        for event in self._active("LR", t):
            factor = int(event.param("factor", 4))
            small = cv2.resize(
                canvas.astype(np.float32),
                (max(1, self.width // factor), max(1, self.height // factor)),
                interpolation=cv2.INTER_AREA,
            )
            canvas = cv2.resize(small, (self.width, self.height), interpolation=cv2.INTER_NEAREST)
            canvas = canvas.astype(np.float64)

        modality = self.modality(t)
        if modality == Modality.THERMAL:
            gray = canvas @ np.array([0.299, 0.587, 0.114])
            canvas = np.repeat(gray[..., None], 3, axis=2)
        canvas = np.round(np.clip(canvas, 0.0, 1.0) * 255.0) / 255.0
        return Frame(canvas, modality)


def generate(spec: SceneSpec, name: Optional[str] = None) -> SequenceRecord:
    """Render every frame of a scene together with its annotation."""
    renderer = SceneRenderer(spec)
    n = spec.length
    return SequenceRecord(
        name=name or f"scene{spec.seed}",
        frames=[renderer.render(t) for t in range(n)],
        gt=[renderer.gt(t) for t in range(n)],
        absent=[renderer.absent(t) for t in range(n)],
        attributes=renderer.attributes(),
        sentence=describe(spec),
    )


# -- language ---------------------------------------------------------------------


@dataclass(frozen=True)
class _SceneObject:
    color: str
    kind: str
    cx: float
    cy: float


@dataclass(frozen=True)
class _Referring:
    color: str
    kind: str
    spatial: Optional[str] = None
    relation: Optional[str] = None  # left_of | right_of | above | below
    relation_color: Optional[str] = None
    relation_kind: Optional[str] = None


def _first_frame_objects(spec: SceneSpec) -> list[_SceneObject]:
    objects = []
    for shape in (spec.target, *spec.distractors):
        x, y = shape.trajectory.position(0)
        objects.append(_SceneObject(shape.color, shape.kind, x, y))
    return objects


def _spatial_word(obj: _SceneObject, width: int, height: int) -> Optional[str]:
    dx = (obj.cx - width / 2) / width
    dy = (obj.cy - height / 2) / height
    if dx == 0 and dy == 0:
        return None
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "top" if dy < 0 else "bottom"


def _satisfies_spatial(obj: _SceneObject, word: str, width: int, height: int) -> bool:
    return {
        "left": obj.cx < width / 2,
        "right": obj.cx > width / 2,
        "top": obj.cy < height / 2,
        "bottom": obj.cy > height / 2,
    }[word]


def _relation(obj: _SceneObject, other: _SceneObject) -> Optional[str]:
    dx = other.cx - obj.cx
    dy = other.cy - obj.cy
    if dx == 0 and dy == 0:
        return None
    if abs(dx) >= abs(dy):
        return "left_of" if dx > 0 else "right_of"
    return "above" if dy > 0 else "below"


def _relation_tokens(relation: str, color: str, kind: str) -> list[str]:
    if relation == "left_of":
        return ["to", "the", "left", "of", "the", color, kind]
    if relation == "right_of":
        return ["to", "the", "right", "of", "the", color, kind]
    return [relation, "the", color, kind]


def describe(spec: SceneSpec) -> LanguageSentence:
    """
    Template sentence for the target:
    "the <color> <kind> [on the <left|right|top|bottom>] [<relation clause>]".

    The spatial clause comes from the first-frame center against the frame
    midlines and is used when there are no distractors or when another
    object shares the target's color and kind. The relation clause names
    the nearest distractor.
    """
    width, height = spec.frame_size
    objects = _first_frame_objects(spec)
    target, others = objects[0], objects[1:]
    tokens = ["the", target.color, target.kind]

    has_twin = any(o.color == target.color and o.kind == target.kind for o in others)
    if not others or has_twin:
        word = _spatial_word(target, width, height)
        if word is not None:
            tokens += ["on", "the", word]
    if others:
        nearest = min(others, key=lambda o: math.hypot(o.cx - target.cx, o.cy - target.cy))
        relation = _relation(target, nearest)
        if relation is not None:
            tokens += _relation_tokens(relation, nearest.color, nearest.kind)
    return LanguageSentence(tuple(tokens))


def _parse_referring(tokens: Sequence[str]) -> _Referring:
    tokens = list(tokens)
    if len(tokens) < 3 or tokens[0] != "the":
        raise ValueError(f"not a referring expression: {' '.join(tokens)!r}")
    color, kind = tokens[1], tokens[2]
    rest = tokens[3:]
    spatial = relation = rel_color = rel_kind = None
    if rest[:2] == ["on", "the"] and len(rest) >= 3:
        spatial = rest[2]
        rest = rest[3:]
    if rest:
        if rest[0] == "to" and len(rest) == 7:
            relation = "left_of" if rest[2] == "left" else "right_of"
            rel_color, rel_kind = rest[5], rest[6]
        elif rest[0] in ("above", "below") and len(rest) == 4:
            relation = rest[0]
            rel_color, rel_kind = rest[2], rest[3]
        else:
            raise ValueError(f"cannot parse relation clause {' '.join(rest)!r}")
    return _Referring(color, kind, spatial, relation, rel_color, rel_kind)


def matching_objects(spec: SceneSpec, sentence: LanguageSentence) -> list[int]:
    """Indices (0 = target) of the first-frame objects satisfying every clause."""
    width, height = spec.frame_size
    ref = _parse_referring(sentence.tokens)
    objects = _first_frame_objects(spec)
    matches = []
    for i, obj in enumerate(objects):
        if (obj.color, obj.kind) != (ref.color, ref.kind):
            continue
        if ref.spatial is not None and not _satisfies_spatial(obj, ref.spatial, width, height):
            continue
        if ref.relation is not None and not any(
            j != i
            and (other.color, other.kind) == (ref.relation_color, ref.relation_kind)
            and _relation(obj, other) == ref.relation
            for j, other in enumerate(objects)
        ):
            continue
        matches.append(i)
    return matches


def is_unambiguous(spec: SceneSpec, sentence: Optional[LanguageSentence] = None) -> bool:
    """True when exactly one object, the target, satisfies the sentence."""
    sentence = sentence or describe(spec)
    return matching_objects(spec, sentence) == [0]


def has_spatial_clause(sentence: LanguageSentence) -> bool:
    return sentence.tokens[3:5] == ("on", "the")


# -- scene sampling ---------------------------------------------------------------


def _event_params(attribute: str, rng: np.random.Generator, target: ShapeSpec) -> dict:
    if attribute == "FOC":
        return {"gray": float(rng.choice([0.15, 0.8])), "margin": 3.0}
    if attribute == "POC":
        return {"fraction": float(rng.uniform(0.4, 0.6)), "gray": 0.2}
    if attribute == "OV":
        return {"direction": str(rng.choice(["left", "right", "top", "bottom"]))}
    if attribute == "CM":
        return {"dx": float(rng.choice([-1, 1]) * rng.uniform(6, 12)),
                "dy": float(rng.choice([-1, 1]) * rng.uniform(3, 8))}
    if attribute == "ROT":
        return {"speed": float(rng.uniform(4.0, 9.0))}
    if attribute == "DEF":
        return {"amplitude": float(rng.uniform(0.2, 0.35)), "period": 8.0}
    if attribute == "IV":
        return {"gain": float(rng.uniform(0.4, 0.65))}
    if attribute == "VC":
        kinds = [k for k in SHAPE_KINDS if k != target.kind]
        return {"kind": str(rng.choice(kinds))}
    if attribute == "SV":
        return {"factor": float(rng.choice([0.6, 1.6]))}
    if attribute == "BC":
        return {"count": int(rng.integers(6, 12))}
    if attribute == "MB":
        return {"length": int(rng.choice([5, 7, 9]))}
    if attribute == "ARC":
        return {"factor": float(rng.uniform(2.2, 2.8))}
    if attribute == "LR":
        return {"factor": int(rng.choice([3, 4]))}
    if attribute == "FM":
        return {"dx": float(target.size + 12), "dy": 0.0, "toward_center": True}
    if attribute == "AS":
        return {"amplitude": float(rng.uniform(0.2, 0.35))}
    if attribute == "TC":
        return {"span": 2.5}
    return {}


def _random_trajectory(rng, x, y, margin, width, height, speed_range) -> Trajectory:
    points = [(x, y)]
    for _ in range(2):
        points.append((float(rng.uniform(margin, width - margin)), float(rng.uniform(margin, height - margin))))
    speeds = tuple(float(rng.uniform(*speed_range)) for _ in range(len(points) - 1))
    return Trajectory(tuple(points), speeds)


def random_scene(
    seed: int,
    attributes: Iterable[str] = (),
    frame_size: tuple = DEFAULT_FRAME_SIZE,
    length: int = 60,
    max_distractors: int = 2,
    twin_probability: float = 0.35,
    static: bool = False,
) -> SceneSpec:
    """Sample a scene whose description is unambiguous, with one event per attribute."""
    attributes = sorted_attributes(set(attributes))
    width, height = frame_size
    rng = np.random.default_rng(seed)
    for _ in range(200):
        size = float(rng.integers(14, 23))
        margin = size + 8
        kind = str(rng.choice(SHAPE_KINDS))
        color = str(rng.choice(list(COLORS)))
        x = float(rng.uniform(margin, width - margin))
        y = float(rng.uniform(margin, height - margin))
        trajectory = Trajectory.static(x, y) if static else _random_trajectory(
            rng, x, y, margin, width, height, (0.4, 1.2)
        )
        target = ShapeSpec(kind, color, size, trajectory)

        distractors = []
        placed = [(x, y)]
        for d in range(int(rng.integers(0, max_distractors + 1))):
            if d == 0 and rng.random() < twin_probability:
                d_kind, d_color = kind, color
            else:
                while True:
                    d_kind = str(rng.choice(SHAPE_KINDS))
                    d_color = str(rng.choice(list(COLORS)))
                    if (d_kind, d_color) != (kind, color):
                        break
            d_size = float(rng.integers(12, 23))
            dx = float(rng.uniform(margin, width - margin))
            dy = float(rng.uniform(margin, height - margin))
            if min(math.hypot(dx - px, dy - py) for px, py in placed) < 1.6 * max(size, d_size):
                continue
            placed.append((dx, dy))
            d_traj = Trajectory.static(dx, dy) if static else _random_trajectory(
                rng, dx, dy, d_size + 6, width, height, (0.2, 0.6)
            )
            distractors.append(ShapeSpec(d_kind, d_color, d_size, d_traj))

        events = []
        for attribute in attributes:
            duration = int(rng.integers(8, 15))
            start = int(rng.integers(2, max(3, length - duration - 2)))
            end = min(start + duration, length - 1)
            if start > end:
                start = end
            events.append(ChallengeEvent(attribute, start, end, _event_params(attribute, rng, target)))

        spec = SceneSpec(
            seed=seed, length=length, target=target, frame_size=frame_size,
            distractors=tuple(distractors), events=tuple(events),
        )
        spec.validate()
        if is_unambiguous(spec):
            return spec
    raise RuntimeError(f"could not sample an unambiguous scene for seed {seed}")


def balanced_attribute_plan(seed: int, n_sequences: int, extra_probability: float = 0.5) -> list[list[str]]:
    """Round-robin over the 17 codes plus an optional random extra attribute."""
    rng = np.random.default_rng(seed)
    plan = []
    for i in range(n_sequences):
        codes = {ATTRIBUTES[i % len(ATTRIBUTES)]}
        if rng.random() < extra_probability:
            codes.add(ATTRIBUTES[int(rng.integers(len(ATTRIBUTES)))])
        plan.append(sorted_attributes(codes))
    return plan


def sequence_seed(seed: int, index: int) -> int:
    return seed ^ index


def generate_dataset(
    out_dir,
    seed: int,
    n_sequences: int,
    length: int = 60,
    frame_size: tuple = DEFAULT_FRAME_SIZE,
    plan: Optional[list[list[str]]] = None,
    workers: int = 1,
    prefix: str = "seq",
    static: bool = False,
) -> list[dict]:
    """Write ``n_sequences`` sequences plus a manifest; returns the manifest entries."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = plan if plan is not None else balanced_attribute_plan(seed, n_sequences)

    def build(index: int) -> dict:
        sub_seed = sequence_seed(seed, index)
        spec = random_scene(sub_seed, plan[index], frame_size, length, static=static)
        name = f"{prefix}{index:04d}"
        record = generate(spec, name)
        sequence_io.write_sequence(record, out_dir / name)
        return {
            "name": name,
            "seed": sub_seed,
            "attributes": sorted_attributes(record.attributes),
            "requested": list(plan[index]),
        }

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        entries = list(tqdm(pool.map(build, range(n_sequences)), total=n_sequences,
                            desc="synth", disable=None))
    sequence_io.write_manifest(out_dir, entries, {"seed": seed, "length": length,
                                                  "frame_size": list(frame_size)})
    logger.info(f"Generated {n_sequences} sequences in {out_dir}")
    return entries


def make_grounding_samples(
    seed: int,
    n_samples: int,
    frame_size: tuple = DEFAULT_FRAME_SIZE,
    twin_probability: float = 0.35,
) -> list[tuple[Frame, LanguageSentence, BoundingBox]]:
    """(first frame, sentence, gt box) triples from independent static scenes."""
    samples = []
    for i in range(n_samples):
        spec = random_scene(
            sequence_seed(seed, i), (), frame_size, length=1,
            twin_probability=twin_probability, static=True,
        )
        renderer = SceneRenderer(spec)
        samples.append((renderer.render(0), describe(spec), renderer.gt(0)))
    return samples


def make_switch_corpus(
    seed: int,
    n_sequences: int,
    out_dir,
    length: int = 60,
    frame_size: tuple = DEFAULT_FRAME_SIZE,
    embedder: Optional[Callable[[LanguageSentence], np.ndarray]] = None,
    tracker_factory: Optional[Callable] = None,
    workers: int = 1,
    plan: Optional[list[list[str]]] = None,
    static: bool = False,
) -> Path:
    """
    Generate sequences, run the local tracker from the first gt box, and log
    per-frame observations plus IoU against ground truth.

    Layout: ``sequences/<name>/``, ``logs/<name>.obs``, ``logs/<name>.iou.txt``
    and ``manifest.json`` at the corpus root.
    """
    from local_tracker import NccTracker

    out_dir = Path(out_dir)
    seq_dir = out_dir / "sequences"
    log_dir = out_dir / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    entries = generate_dataset(seq_dir, seed, n_sequences, length, frame_size, plan, workers, static=static)
    tracker_factory = tracker_factory or NccTracker

    def run(entry: dict):
        record = sequence_io.read_sequence(seq_dir / entry["name"])
        embedding = embedder(record.sentence) if embedder is not None else None
        tracker = tracker_factory()
        tracker.init(record.frames[0], record.gt[0])
        observations, ious = [], []
        for frame, gt in zip(record.frames, record.gt):
            obs = tracker.track(frame, embedding)
            observations.append(obs)
            ious.append(iou(obs.box, gt))
        sequence_io.write_observation_log(log_dir / f"{entry['name']}.obs", observations)
        sequence_io.write_values(log_dir / f"{entry['name']}.iou.txt", ious)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(tqdm(pool.map(run, entries), total=len(entries), desc="corpus", disable=None))
    sequence_io.write_manifest(out_dir, entries, {"seed": seed, "length": length})
    logger.info(f"Switch corpus with {len(entries)} sequences written to {out_dir}")
    return out_dir


# -- high-confidence failures -------------------------------------------------------

DISTRACTOR_CONFIDENCE = 0.9
DISTRACTOR_IOU = 0.3


@dataclass(frozen=True, eq=False)
class DistractorWindow:
    """Observations of a tracker locked onto the target's identical twin."""

    name: str
    observations: np.ndarray  # (clip_len, observation stride)
    ious: np.ndarray          # IoU of each tracked box with the real target


def twin_scene(seed: int, frame_size: tuple = DEFAULT_FRAME_SIZE, length: int = 20) -> SceneSpec:
    """Static target and an identical static twin mirrored across the frame center."""
    width, height = frame_size
    rng = np.random.default_rng(seed)
    size = float(rng.integers(10, max(11, min(width, height) // 6)))
    kind = str(rng.choice(SHAPE_KINDS))
    color = str(rng.choice(list(COLORS)))
    if rng.random() < 0.5:
        x = float(rng.uniform(size, width / 2 - size))
        y = float(rng.uniform(size, height - size))
        twin = (width - x, float(rng.uniform(size, height - size)))
    else:
        x = float(rng.uniform(size, width - size))
        y = float(rng.uniform(size, height / 2 - size))
        twin = (float(rng.uniform(size, width - size)), height - y)
    target = ShapeSpec(kind, color, size, Trajectory.static(x, y))
    distractor = ShapeSpec(kind, color, size, Trajectory.static(*twin))
    return SceneSpec(seed=seed, length=length, target=target, frame_size=frame_size,
                     distractors=(distractor,))


def make_distractor_windows(
    seed: int,
    n: int,
    clip_len: int = 20,
    frame_size: tuple = DEFAULT_FRAME_SIZE,
    embedder: Optional[Callable[[LanguageSentence], np.ndarray]] = None,
    tracker_factory: Optional[Callable] = None,
    max_attempts: Optional[int] = None,
) -> list[DistractorWindow]:
    """
    ``n`` windows in which the local tracker follows the target's twin:
    every frame has confidence above 0.9 and IoU with the target below 0.3.
    A scene failing either bound is skipped.
    """
    from local_tracker import NccTracker

    tracker_factory = tracker_factory or NccTracker
    max_attempts = max_attempts if max_attempts is not None else 10 * max(n, 1)
    windows = []
    for attempt in range(max_attempts):
        if len(windows) == n:
            break
        spec = twin_scene(sequence_seed(seed, attempt), frame_size, clip_len)
        renderer = SceneRenderer(spec)
        embedding = embedder(describe(spec)) if embedder is not None else None
        tracker = tracker_factory()
        tracker.init(renderer.render(0), renderer.distractor_states[0][0].box())
        observations, ious = [], []
        for t in range(clip_len):
            obs = tracker.track(renderer.render(t), embedding)
            observations.append(obs.to_vector())
            ious.append(iou(obs.box, renderer.gt(t)))
        confidences = np.array([o[0] for o in observations])
        if confidences.min() <= DISTRACTOR_CONFIDENCE or max(ious) >= DISTRACTOR_IOU:
            logger.debug(f"twin scene {spec.seed} rejected: min confidence {confidences.min():.3f}")
            continue
        windows.append(DistractorWindow(f"twin{attempt:04d}", np.stack(observations), np.array(ious)))
    if len(windows) < n:
        raise RuntimeError(f"only {len(windows)} of {n} distractor windows after {max_attempts} scenes")
    logger.info(f"Built {n} distractor windows of {clip_len} frames")
    return windows
