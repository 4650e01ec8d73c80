"""
Local-search template tracker.

Zero-normalized cross-correlation of a fixed 32x32 template against a
23x23 grid of placements covering a window 2.5x the current box, at
three scales. The 23x23 correlation grid of the winning scale is the
response map the switcher consumes.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from geometry import crop_resize, sample_grid_patches, zncc
from models import (
    EMBEDDING_DIM,
    RESPONSE_MAP_SIZE,
    RESULT_IMAGE_SIZE,
    BoundingBox,
    Frame,
    TrackerObservation,
)

logger = logging.getLogger(__name__)

TEMPLATE_SIZE = 32
SEARCH_SCALE = 2.5
# first entry wins ties
SCALE_STEPS = (1.0, 0.95, 1.05)
MIN_VARIANCE = 1e-12


class TrackerInitError(ValueError):
    """Initialization box is empty or does not touch the frame."""


@dataclass(frozen=True, eq=False)
class LocalTrackerState:
    template: np.ndarray
    box: BoundingBox
    frame_width: int
    frame_height: int
    search_scale: float = SEARCH_SCALE
    scale_steps: tuple = SCALE_STEPS


def init(
    frame: Frame,
    box: BoundingBox,
    search_scale: float = SEARCH_SCALE,
    scale_steps: tuple = SCALE_STEPS,
) -> LocalTrackerState:
    if box.w <= 0 or box.h <= 0:
        raise TrackerInitError(f"cannot initialize on zero-area box {box.as_list()}")
    if not box.intersects_frame(frame.width, frame.height):
        raise TrackerInitError(
            f"box {box.as_list()} lies outside the {frame.width}x{frame.height} frame"
        )
    template = crop_resize(frame, box, TEMPLATE_SIZE, TEMPLATE_SIZE)
    return LocalTrackerState(
        template=template,
        box=box,
        frame_width=frame.width,
        frame_height=frame.height,
        search_scale=float(search_scale),
        scale_steps=tuple(scale_steps),
    )


def reinit(state: LocalTrackerState, frame: Frame, box: BoundingBox) -> LocalTrackerState:
    """Fresh template at ``box``, keeping the search configuration."""
    return init(frame, box, state.search_scale, state.scale_steps)


def relocate(state: LocalTrackerState, box: BoundingBox) -> LocalTrackerState:
    """Move the search center without touching the template."""
    return replace(state, box=box)


def offset_grid(state: LocalTrackerState, scale: float) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Left/top edges of the candidate placements for one scale, plus their size."""
    box = state.box
    w, h = box.w * scale, box.h * scale
    half = RESPONSE_MAP_SIZE // 2
    steps = np.arange(RESPONSE_MAP_SIZE, dtype=np.float64) - half
    step_x = (state.search_scale - 1.0) * box.w / (RESPONSE_MAP_SIZE - 1)
    step_y = (state.search_scale - 1.0) * box.h / (RESPONSE_MAP_SIZE - 1)
    lo_x = box.x1 + (box.w - w) / 2 + steps * step_x
    lo_y = box.y1 + (box.h - h) / 2 + steps * step_y
    return lo_x, lo_y, w, h


def response_map(state: LocalTrackerState, frame: Frame, scale: float) -> np.ndarray:
    """23x23 correlation grid mapped to [0, 1]; degenerate candidates score 0."""
    lo_x, lo_y, w, h = offset_grid(state, scale)
    patches = sample_grid_patches(frame.pixels, lo_x, w, lo_y, h, TEMPLATE_SIZE, TEMPLATE_SIZE)
    corr, valid = zncc(patches, state.template, MIN_VARIANCE)
    return np.where(valid, (corr + 1.0) / 2.0, 0.0)


def _clamp_center(box: BoundingBox, width: int, height: int) -> BoundingBox:
    cx, cy = box.center
    if 0.0 <= cx <= width and 0.0 <= cy <= height:
        return box
    cx = min(max(cx, 0.0), float(width))
    cy = min(max(cy, 0.0), float(height))
    return BoundingBox.from_center(cx, cy, box.w, box.h)


def track(
    state: LocalTrackerState,
    frame: Frame,
    lang_embedding: Optional[np.ndarray] = None,
) -> tuple[TrackerObservation, LocalTrackerState]:
    best = None
    for scale in state.scale_steps:
        response = response_map(state, frame, scale)
        peak = float(response.max())
        if best is None or peak > best[0]:
            best = (peak, scale, response)
    confidence, scale, response = best

    i, j = np.unravel_index(int(np.argmax(response)), response.shape)
    lo_x, lo_y, w, h = offset_grid(state, scale)
    box = _clamp_center(BoundingBox(lo_x[j], lo_y[i], w, h), frame.width, frame.height)

    if lang_embedding is None:
        lang_embedding = np.zeros(EMBEDDING_DIM)
    observation = TrackerObservation(
        confidence=confidence,
        box=box,
        result_image=crop_resize(frame, box, RESULT_IMAGE_SIZE, RESULT_IMAGE_SIZE),
        response_map=response,
        lang_embedding=lang_embedding,
    )
    return observation, replace(state, box=box)


class NccTracker:
    """Stateful wrapper over init/track/reinit for one sequence."""

    name = "ncc"

    def __init__(self, search_scale: float = SEARCH_SCALE, scale_steps: tuple = SCALE_STEPS):
        self.search_scale = search_scale
        self.scale_steps = tuple(scale_steps)
        self.state: Optional[LocalTrackerState] = None

    def init(self, frame: Frame, box: BoundingBox):
        self.state = init(frame, box, self.search_scale, self.scale_steps)

    def reinit(self, frame: Frame, box: BoundingBox):
        self.state = init(frame, box, self.search_scale, self.scale_steps)

    def relocate(self, box: BoundingBox):
        self._require_state()
        self.state = relocate(self.state, box)

    def track(self, frame: Frame, lang_embedding: Optional[np.ndarray] = None) -> TrackerObservation:
        self._require_state()
        observation, self.state = track(self.state, frame, lang_embedding)
        return observation

    @property
    def box(self) -> BoundingBox:
        self._require_state()
        return self.state.box

    @property
    def template(self) -> np.ndarray:
        self._require_state()
        return self.state.template

    def _require_state(self):
        if self.state is None:
            raise RuntimeError("tracker used before init()")


TRACKERS = {NccTracker.name: NccTracker}


def make_tracker(name: str, **kwargs):
    """Instantiate a registered local tracker by name."""
    try:
        factory = TRACKERS[name]
    except KeyError:
        raise ValueError(f"Unknown tracker {name!r}; available: {', '.join(sorted(TRACKERS))}") from None
    return factory(**kwargs)
