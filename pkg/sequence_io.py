"""
Readers and writers for the on-disk formats.

Sequence directory:
    imgs/%08d.png     frames, 1-indexed
    groundtruth.txt   x1,y1,w,h per frame
    absent.txt        0/1 per frame
    language.txt      the sentence
    attributes.txt    comma-separated attribute codes
    modality.txt      RGB/THERMAL per frame (only written when a thermal frame exists)

Result file: x1,y1,w,h,conf per frame, frame 1 first.
Observation log: binary header + little-endian float32 records.
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Iterable, Optional, Union

import cv2
import numpy as np

from models import (
    ATTRIBUTES,
    OBSERVATION_STRIDE,
    BoundingBox,
    Frame,
    LanguageSentence,
    Modality,
    SequenceAnnotation,
    SequenceRecord,
    TrackerObservation,
    sorted_attributes,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

IMAGE_DIR = "imgs"
GROUNDTRUTH_FILE = "groundtruth.txt"
ABSENT_FILE = "absent.txt"
LANGUAGE_FILE = "language.txt"
ATTRIBUTES_FILE = "attributes.txt"
MODALITY_FILE = "modality.txt"
MANIFEST_FILE = "manifest.json"

OBS_MAGIC = b"LSOB"
OBS_VERSION = 1
_OBS_HEADER = struct.Struct("<4sIII")


class ParseError(ValueError):
    """A file could not be decoded; names the file and the 1-based line."""

    def __init__(self, path: PathLike, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


def format_number(value: float) -> str:
    """Shortest text that parses back to the same float; integers lose the '.0'."""
    text = repr(float(value))
    if text.endswith(".0"):
        text = text[:-2]
    return text


def _read_lines(path: Path) -> list[str]:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _write_lines(path: Path, lines: Iterable[str]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def _parse_floats(path: Path, line_no: int, text: str, counts: tuple[int, ...]) -> list[float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) not in counts:
        expected = " or ".join(str(c) for c in counts)
        raise ParseError(path, line_no, f"expected {expected} comma-separated values, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ParseError(path, line_no, f"non-numeric value in {text!r}") from None


def frame_path(dir_path: PathLike, index: int) -> Path:
    """Image path of 0-based frame ``index``."""
    return Path(dir_path) / IMAGE_DIR / f"{index + 1:08d}.png"


def write_frame(path: PathLike, frame: Frame):
    data = np.round(frame.pixels * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(data, cv2.COLOR_RGB2BGR)):
        raise OSError(f"Failed to write image {path}")


def read_frame(path: PathLike, modality: Modality = Modality.RGB) -> Frame:
    data = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if data is None:
        raise OSError(f"Failed to read image {path}")
    rgb = cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
    return Frame(rgb.astype(np.float64) / 255.0, modality)


def _count_images(dir_path: Path) -> int:
    image_dir = dir_path / IMAGE_DIR
    if not image_dir.is_dir():
        raise ParseError(image_dir, 0, "missing image directory")
    return len([p for p in image_dir.iterdir() if p.suffix == ".png"])


def _read_absent(path: Path) -> list[bool]:
    values = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        for part in line.split(","):
            part = part.strip()
            if part == "":
                continue
            if part not in ("0", "1"):
                raise ParseError(path, line_no, f"absent flag must be 0 or 1, got {part!r}")
            values.append(part == "1")
    return values


def _read_attributes(path: Path) -> frozenset:
    if not path.exists():
        return frozenset()
    codes = set()
    for line_no, line in enumerate(_read_lines(path), start=1):
        for part in line.split(","):
            part = part.strip()
            if not part:
                continue
            if part not in ATTRIBUTES:
                raise ParseError(path, line_no, f"unknown attribute code {part!r}")
            codes.add(part)
    return frozenset(codes)


def read_annotation(dir_path: PathLike) -> SequenceAnnotation:
    """Read every text file of a sequence directory, checking counts against the images."""
    dir_path = Path(dir_path)
    n_frames = _count_images(dir_path)

    gt_path = dir_path / GROUNDTRUTH_FILE
    gt_lines = _read_lines(gt_path)
    if len(gt_lines) != n_frames:
        raise ParseError(
            gt_path, len(gt_lines),
            f"{len(gt_lines)} ground-truth lines but {n_frames} frames",
        )
    gt = []
    for line_no, line in enumerate(gt_lines, start=1):
        values = _parse_floats(gt_path, line_no, line, (4,))
        try:
            gt.append(BoundingBox(*values))
        except ValueError as e:
            raise ParseError(gt_path, line_no, str(e)) from None

    absent_path = dir_path / ABSENT_FILE
    if absent_path.exists():
        absent = _read_absent(absent_path)
        if len(absent) != n_frames:
            raise ParseError(absent_path, len(absent), f"{len(absent)} absent flags but {n_frames} frames")
    else:
        absent = [False] * n_frames

    language_path = dir_path / LANGUAGE_FILE
    lines = _read_lines(language_path)
    if not lines or not lines[0].strip():
        raise ParseError(language_path, 1, "empty language description")
    try:
        sentence = LanguageSentence.from_text(lines[0])
    except ValueError as e:
        raise ParseError(language_path, 1, str(e)) from None

    return SequenceAnnotation(
        name=dir_path.name,
        gt=gt,
        absent=absent,
        attributes=_read_attributes(dir_path / ATTRIBUTES_FILE),
        sentence=sentence,
    )


def _read_modalities(path: Path, n_frames: int) -> list[Modality]:
    if not path.exists():
        return [Modality.RGB] * n_frames
    modalities = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        try:
            modalities.append(Modality(line.strip()))
        except ValueError:
            raise ParseError(path, line_no, f"unknown modality {line.strip()!r}") from None
    if len(modalities) != n_frames:
        raise ParseError(path, len(modalities), f"{len(modalities)} modality lines but {n_frames} frames")
    return modalities


def read_sequence(dir_path: PathLike) -> SequenceRecord:
    """Load a full sequence, frames included."""
    dir_path = Path(dir_path)
    annotation = read_annotation(dir_path)
    modalities = _read_modalities(dir_path / MODALITY_FILE, len(annotation))
    frames = [read_frame(frame_path(dir_path, i), modalities[i]) for i in range(len(annotation))]
    return SequenceRecord(
        name=annotation.name,
        frames=frames,
        gt=annotation.gt,
        absent=annotation.absent,
        attributes=annotation.attributes,
        sentence=annotation.sentence,
    )


def write_sequence(record: SequenceRecord, dir_path: PathLike):
    """Write a sequence directory; an existing directory is overwritten file by file."""
    dir_path = Path(dir_path)
    (dir_path / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for stale in (dir_path / IMAGE_DIR).glob("*.png"):
        stale.unlink()
    for i, frame in enumerate(record.frames):
        write_frame(frame_path(dir_path, i), frame)
    _write_lines(
        dir_path / GROUNDTRUTH_FILE,
        (",".join(format_number(v) for v in box.as_list()) for box in record.gt),
    )
    _write_lines(dir_path / ABSENT_FILE, ("1" if a else "0" for a in record.absent))
    _write_lines(dir_path / LANGUAGE_FILE, [record.sentence.text])
    _write_lines(dir_path / ATTRIBUTES_FILE, [",".join(sorted_attributes(record.attributes))])
    modality_path = dir_path / MODALITY_FILE
    if any(frame.modality == Modality.THERMAL for frame in record.frames):
        _write_lines(modality_path, (frame.modality.value for frame in record.frames))
    elif modality_path.exists():
        modality_path.unlink()
    logger.debug(f"Wrote sequence {record.name} ({len(record)} frames) to {dir_path}")


def read_results(path: PathLike) -> list[tuple[BoundingBox, float]]:
    """Parse a result file into (box, confidence) pairs."""
    path = Path(path)
    results = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        values = _parse_floats(path, line_no, line, (4, 5))
        conf = values[4] if len(values) == 5 else 1.0
        try:
            results.append((BoundingBox(*values[:4]), conf))
        except ValueError as e:
            raise ParseError(path, line_no, str(e)) from None
    return results


def write_results(path: PathLike, results: Iterable[tuple[BoundingBox, float]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_lines(
        path,
        (
            ",".join(format_number(v) for v in (*box.as_list(), conf))
            for box, conf in results
        ),
    )


def write_observation_log(path: PathLike, observations: Iterable[TrackerObservation]):
    """Binary log: header (magic, version, frame count, stride) then float32 records."""
    rows = [obs.to_vector() for obs in observations]
    data = np.asarray(rows, dtype="<f4").reshape(len(rows), OBSERVATION_STRIDE)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_OBS_HEADER.pack(OBS_MAGIC, OBS_VERSION, len(rows), OBSERVATION_STRIDE))
        f.write(data.tobytes())


def read_observation_log(path: PathLike) -> np.ndarray:
    """Return the (frames, 3746) float32 matrix of an observation log."""
    path = Path(path)
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _OBS_HEADER.size:
        raise ParseError(path, 0, "truncated observation-log header")
    magic, version, count, stride = _OBS_HEADER.unpack_from(blob)
    if magic != OBS_MAGIC:
        raise ParseError(path, 0, f"bad magic {magic!r}")
    if version != OBS_VERSION:
        raise ParseError(path, 0, f"unsupported observation-log version {version}")
    if stride != OBSERVATION_STRIDE:
        raise ParseError(path, 0, f"record stride {stride}, expected {OBSERVATION_STRIDE}")
    payload = np.frombuffer(blob, dtype="<f4", offset=_OBS_HEADER.size)
    if payload.size != count * stride:
        raise ParseError(path, 0, f"expected {count} records, found {payload.size / stride:g}")
    return payload.reshape(count, stride)


def write_values(path: PathLike, values: Iterable[float]):
    """One number per line (IoU logs)."""
    _write_lines(Path(path), (format_number(v) for v in values))


def read_values(path: PathLike) -> list[float]:
    path = Path(path)
    return [_parse_floats(path, i, line, (1,))[0] for i, line in enumerate(_read_lines(path), start=1)]


def write_labels(path: PathLike, labels: Iterable[tuple[int, int]]):
    """Clip label sidecar: 'window_start,label' per line."""
    _write_lines(Path(path), (f"{start},{label}" for start, label in labels))


def read_labels(path: PathLike) -> list[tuple[int, int]]:
    path = Path(path)
    labels = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        start, label = _parse_floats(path, line_no, line, (2,))
        if label not in (0.0, 1.0) or start < 0 or start != int(start):
            raise ParseError(path, line_no, f"bad label line {line!r}")
        labels.append((int(start), int(label)))
    return labels


def write_manifest(dir_path: PathLike, entries: list[dict], extra: Optional[dict] = None):
    """Dataset manifest: sequence names, seeds and attribute tags."""
    data = {"sequences": entries}
    if extra:
        data.update(extra)
    path = Path(dir_path) / MANIFEST_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(dir_path: PathLike) -> dict:
    path = Path(dir_path) / MANIFEST_FILE
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, e.msg) from None
    if not isinstance(data.get("sequences"), list):
        raise ParseError(path, 1, "manifest has no 'sequences' list")
    return data


def list_sequences(dir_path: PathLike) -> list[Path]:
    """Sequence directories of a dataset, from its manifest or by listing, name-sorted."""
    dir_path = Path(dir_path)
    if (dir_path / MANIFEST_FILE).exists():
        names = [entry["name"] for entry in read_manifest(dir_path)["sequences"]]
        return [dir_path / name for name in sorted(names)]
    return sorted(p for p in dir_path.iterdir() if (p / GROUNDTRUTH_FILE).exists())
