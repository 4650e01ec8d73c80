"""
One-pass evaluation: precision, normalized precision and success plots.

Frames are pooled across sequences. Frame 1 is skipped by default (it is
the initialization frame in box-initialized modes) and absent frames are
skipped unless ``skip_absent`` is False.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

import sequence_io  # noqa: E402
from geometry import center_error, iou  # noqa: E402
from models import (  # noqa: E402
    ATTRIBUTE_DESCRIPTIONS,
    ATTRIBUTES,
    BoundingBox,
    MetricCurve,
    SequenceAnnotation,
)

logger = logging.getLogger(__name__)

# stable SVG element ids
matplotlib.rcParams["svg.hashsalt"] = "langswitch"
matplotlib.rcParams["svg.fonttype"] = "none"

PRECISION_AT = 20.0
CSV_HEADER = "tracker,metric,threshold,value"
METRICS_FILE = "metrics.csv"
RANKING_FILE = "ranking.txt"
TRACES_DIR = "traces"
LINE_STYLES = ("-", "--", "-.", ":")


class EvaluationError(ValueError):
    """Inputs cannot be scored (length mismatch or no counted frames)."""


@dataclass(frozen=True, eq=False)
class EvalConfig:
    precision_thresholds: np.ndarray = field(default_factory=lambda: np.arange(0, 51, dtype=np.float64))
    norm_precision_thresholds: np.ndarray = field(default_factory=lambda: np.round(np.arange(51) * 0.01, 2))
    success_thresholds: np.ndarray = field(default_factory=lambda: np.round(np.arange(101) * 0.01, 2))
    skip_absent: bool = True
    skip_first_frame: bool = True
    attribute_filter: Optional[str] = None

    def __post_init__(self):
        if self.attribute_filter is not None and self.attribute_filter not in ATTRIBUTES:
            raise ValueError(f"unknown attribute filter {self.attribute_filter!r}")


def _boxes(results) -> list[BoundingBox]:
    return [r[0] if isinstance(r, tuple) else r for r in results]


def _confidences(results) -> list[float]:
    return [float(r[1]) if isinstance(r, tuple) else 1.0 for r in results]


def counted_frames(n_frames: int, absent: Sequence[bool], config: EvalConfig) -> np.ndarray:
    """Indices of the frames that are scored."""
    keep = np.ones(n_frames, dtype=bool)
    if config.skip_first_frame and n_frames:
        keep[0] = False
    if config.skip_absent:
        keep &= ~np.asarray(absent, dtype=bool)
    return np.flatnonzero(keep)


@dataclass
class FrameScores:
    """Per counted frame: center error (px), normalized center error and IoU."""

    center_errors: np.ndarray
    norm_errors: np.ndarray
    ious: np.ndarray
    skipped: int = 0

    @classmethod
    def concatenate(cls, parts: Sequence["FrameScores"]) -> "FrameScores":
        if not parts:
            return cls(np.zeros(0), np.zeros(0), np.zeros(0), 0)
        return cls(
            np.concatenate([p.center_errors for p in parts]),
            np.concatenate([p.norm_errors for p in parts]),
            np.concatenate([p.ious for p in parts]),
            sum(p.skipped for p in parts),
        )


def frame_scores(results, gt: Sequence[BoundingBox], absent: Sequence[bool], config: EvalConfig) -> FrameScores:
    boxes = _boxes(results)
    if not len(boxes) == len(gt) == len(absent):
        raise EvaluationError(
            f"length mismatch: {len(boxes)} results, {len(gt)} gt boxes, {len(absent)} absent flags"
        )
    frames = counted_frames(len(gt), absent, config)
    centers, norms = [], []
    for t in frames:
        centers.append(center_error(boxes[t], gt[t]))
        g = gt[t]
        if g.w > 0 and g.h > 0:
            (px, py), (gx, gy) = boxes[t].center, g.center
            norms.append(float(np.hypot((px - gx) / g.w, (py - gy) / g.h)))
        else:
            logger.warning(f"Frame {t + 1}: zero-area ground truth skipped for normalized precision")
            norms.append(np.nan)
    ious = [iou(boxes[t], gt[t]) for t in frames]
    return FrameScores(np.array(centers), np.array(norms), np.array(ious), len(gt) - len(frames))


def _require_frames(count: int):
    if count == 0:
        raise EvaluationError("no counted frames to evaluate")


def precision_from_errors(errors: np.ndarray, thresholds: np.ndarray) -> MetricCurve:
    """Fraction of errors <= each threshold."""
    _require_frames(errors.size)
    values = (errors[None, :] <= thresholds[:, None]).mean(axis=1)
    return MetricCurve(thresholds, values)


def success_from_ious(ious: np.ndarray, thresholds: np.ndarray) -> MetricCurve:
    """Fraction of IoUs strictly above each threshold."""
    _require_frames(ious.size)
    values = (ious[None, :] > thresholds[:, None]).mean(axis=1)
    return MetricCurve(thresholds, values)


def precision_curve(results, gt, absent, config: Optional[EvalConfig] = None) -> tuple[MetricCurve, float]:
    config = config or EvalConfig()
    scores = frame_scores(results, gt, absent, config)
    curve = precision_from_errors(scores.center_errors, config.precision_thresholds)
    return curve, _precision_at(curve)


def success_curve(results, gt, absent, config: Optional[EvalConfig] = None) -> tuple[MetricCurve, float]:
    config = config or EvalConfig()
    scores = frame_scores(results, gt, absent, config)
    curve = success_from_ious(scores.ious, config.success_thresholds)
    return curve, float(np.mean(curve.values))


def normalized_precision(results, gt, absent, config: Optional[EvalConfig] = None) -> tuple[MetricCurve, float]:
    config = config or EvalConfig()
    scores = frame_scores(results, gt, absent, config)
    curve = _norm_curve(scores.norm_errors, config)
    return curve, float(np.mean(curve.values))


def _norm_curve(norm_errors: np.ndarray, config: EvalConfig) -> MetricCurve:
    return precision_from_errors(norm_errors[~np.isnan(norm_errors)], config.norm_precision_thresholds)


def _precision_at(curve: MetricCurve) -> float:
    value = curve.value_at(PRECISION_AT)
    if value is None:
        raise EvaluationError(f"precision grid does not contain {PRECISION_AT:g} px")
    return value


@dataclass
class TrackerScores:
    tracker: str
    precision: MetricCurve
    precision_at_20: float
    norm_precision: MetricCurve
    norm_precision_score: float
    success: MetricCurve
    success_auc: float
    frames_used: int
    frames_skipped: int
    n_sequences: int

    @classmethod
    def from_frames(
        cls, tracker: str, scores: FrameScores, config: EvalConfig, n_sequences: int
    ) -> "TrackerScores":
        precision = precision_from_errors(scores.center_errors, config.precision_thresholds)
        norm = _norm_curve(scores.norm_errors, config)
        success = success_from_ious(scores.ious, config.success_thresholds)
        return cls(
            tracker=tracker,
            precision=precision,
            precision_at_20=_precision_at(precision),
            norm_precision=norm,
            norm_precision_score=float(np.mean(norm.values)),
            success=success,
            success_auc=float(np.mean(success.values)),
            frames_used=int(scores.ious.size),
            frames_skipped=int(scores.skipped),
            n_sequences=n_sequences,
        )


@dataclass
class EvalReport:
    trackers: dict = field(default_factory=dict)       # tracker -> TrackerScores
    per_attribute: dict = field(default_factory=dict)  # attribute -> {tracker -> TrackerScores}


def _score_sequences(
    tracker: str,
    annotations: Sequence[SequenceAnnotation],
    results: Mapping[str, list],
    config: EvalConfig,
) -> Optional[TrackerScores]:
    ordered = sorted(annotations, key=lambda a: a.name)
    parts = []
    for annotation in ordered:
        if annotation.name not in results:
            raise EvaluationError(f"tracker {tracker!r} has no results for sequence {annotation.name!r}")
        parts.append(frame_scores(results[annotation.name], annotation.gt, annotation.absent, config))
    if not parts:
        return None
    return TrackerScores.from_frames(tracker, FrameScores.concatenate(parts), config, len(parts))


def attribute_report(
    annotations: Sequence[SequenceAnnotation],
    results: Mapping[str, list],
    config: Optional[EvalConfig] = None,
    tracker: str = "tracker",
) -> dict:
    """Scores per attribute over the sequences carrying it; empty attributes are omitted."""
    config = config or EvalConfig()
    report = {}
    for code in ATTRIBUTES:
        tagged = [a for a in annotations if code in a.attributes]
        if tagged:
            report[code] = _score_sequences(tracker, tagged, results, config)
    return report


def evaluate(
    annotations: Sequence[SequenceAnnotation],
    results_by_tracker: Mapping[str, Mapping[str, list]],
    config: Optional[EvalConfig] = None,
    tracker_configs: Optional[Mapping[str, EvalConfig]] = None,
) -> EvalReport:
    """
    Score every tracker over the dataset, overall and per attribute.

    ``tracker_configs`` overrides the config for individual trackers (for
    instance to score frame 1 of language-initialized runs).
    """
    config = config or EvalConfig()
    tracker_configs = tracker_configs or {}
    if config.attribute_filter is not None:
        annotations = [a for a in annotations if config.attribute_filter in a.attributes]
    report = EvalReport()
    for tracker in sorted(results_by_tracker):
        cfg = tracker_configs.get(tracker, config)
        results = results_by_tracker[tracker]
        overall = _score_sequences(tracker, annotations, results, cfg)
        if overall is None:
            continue
        report.trackers[tracker] = overall
        for code, scores in attribute_report(annotations, results, cfg, tracker).items():
            report.per_attribute.setdefault(code, {})[tracker] = scores
        logger.info(
            f"{tracker}: prec@20 {overall.precision_at_20:.3f} "
            f"norm {overall.norm_precision_score:.3f} auc {overall.success_auc:.3f}"
        )
    report.per_attribute = {code: report.per_attribute[code] for code in ATTRIBUTES if code in report.per_attribute}
    return report


def load_results_dir(results_dir, annotations: Sequence[SequenceAnnotation]) -> dict[str, list]:
    """Read ``<name>.txt`` for every annotated sequence from a tracker's result directory."""
    results_dir = Path(results_dir)
    return {a.name: sequence_io.read_results(results_dir / f"{a.name}.txt") for a in annotations}


def score_trace(results, annotation: SequenceAnnotation) -> list[tuple[int, float, float, bool]]:
    """(frame number, confidence, IoU, absent) per frame, for spotting confident failures."""
    if len(results) != len(annotation):
        raise EvaluationError(f"{annotation.name}: {len(results)} results for {len(annotation)} frames")
    return [
        (t + 1, conf, iou(box, annotation.gt[t]), annotation.absent[t])
        for t, (box, conf) in enumerate(zip(_boxes(results), _confidences(results)))
    ]


def write_score_trace(path, trace):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["frame,confidence,iou,absent"] + [
        f"{frame},{sequence_io.format_number(conf)},{sequence_io.format_number(overlap)},{int(absent)}"
        for frame, conf, overlap, absent in trace
    ]
    path.write_text("\n".join(lines) + "\n")


def emit_score_traces(
    results_by_tracker: Mapping[str, Mapping[str, list]],
    annotations: Sequence[SequenceAnnotation],
    out_dir,
):
    """One ``traces/<tracker>/<sequence>.csv`` per scored pair."""
    out_dir = Path(out_dir) / TRACES_DIR
    for tracker in sorted(results_by_tracker):
        results = results_by_tracker[tracker]
        for annotation in annotations:
            trace = score_trace(results[annotation.name], annotation)
            write_score_trace(out_dir / tracker / f"{annotation.name}.csv", trace)


# -- emission -------------------------------------------------------------------------


def _csv_rows(trackers: Mapping[str, TrackerScores]) -> list[str]:
    rows = [CSV_HEADER]
    fmt = sequence_io.format_number
    for name in sorted(trackers):
        scores = trackers[name]
        for metric, curve in (
            ("precision", scores.precision),
            ("norm_precision", scores.norm_precision),
            ("success", scores.success),
        ):
            rows.extend(f"{name},{metric},{fmt(t)},{fmt(v)}" for t, v in zip(curve.thresholds, curve.values))
    return rows


def _legend_order(trackers: Mapping[str, TrackerScores], key) -> list[str]:
    return sorted(trackers, key=lambda name: (-key(trackers[name]), name))


def _plot(path: Path, trackers: Mapping[str, TrackerScores], metric: str, title: str):
    curve_of = {
        "precision": (lambda s: s.precision, lambda s: s.precision_at_20, "Location error threshold (px)", "Precision"),
        "norm_precision": (lambda s: s.norm_precision, lambda s: s.norm_precision_score,
                           "Normalized distance threshold", "Normalized precision"),
        "success": (lambda s: s.success, lambda s: s.success_auc, "Overlap threshold", "Success rate"),
    }
    get_curve, get_score, xlabel, ylabel = curve_of[metric]
    fig, ax = plt.subplots(figsize=(5, 4))
    lines, legends = [], []
    for k, name in enumerate(_legend_order(trackers, get_score)):
        curve = get_curve(trackers[name])
        (line,) = ax.plot(curve.thresholds, curve.values, LINE_STYLES[k % len(LINE_STYLES)])
        lines.append(line)
        legends.append(f"{name} [{get_score(trackers[name]):.3f}]")
    ax.legend(lines, legends, loc="lower right" if metric != "success" else "lower left", fontsize=7)
    ax.set(xlabel=xlabel, ylabel=ylabel, ylim=(0, 1), title=title)
    ax.grid(True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _ranking_lines(trackers: Mapping[str, TrackerScores]) -> list[str]:
    order = _legend_order(trackers, lambda s: s.success_auc)
    width = max([len("tracker")] + [len(n) for n in order])
    lines = [f"{'rank':>4}  {'tracker':<{width}}  {'prec@20':>7}  {'norm':>7}  {'auc':>7}  {'frames':>7}"]
    for rank, name in enumerate(order, start=1):
        s = trackers[name]
        lines.append(
            f"{rank:>4}  {name:<{width}}  {s.precision_at_20:>7.3f}  {s.norm_precision_score:>7.3f}  "
            f"{s.success_auc:>7.3f}  {s.frames_used:>7d}"
        )
    return lines


def _emit_block(
    out_dir: Path, trackers: Mapping[str, TrackerScores], title_suffix: str = "", heading: Optional[str] = None
):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / METRICS_FILE).write_text("\n".join(_csv_rows(trackers)) + "\n")
    if not trackers:
        return
    ranking = ([heading] if heading else []) + _ranking_lines(trackers)
    (out_dir / RANKING_FILE).write_text("\n".join(ranking) + "\n")
    _plot(out_dir / "precision.svg", trackers, "precision", f"Precision plots{title_suffix}")
    _plot(out_dir / "norm_precision.svg", trackers, "norm_precision", f"Normalized precision plots{title_suffix}")
    _plot(out_dir / "success.svg", trackers, "success", f"Success plots{title_suffix}")


def emit_report(report: EvalReport, out_dir):
    """CSV, ranking table and SVG plots, overall and under attributes/<CODE>/."""
    out_dir = Path(out_dir)
    _emit_block(out_dir, report.trackers)
    for code, trackers in report.per_attribute.items():
        heading = f"{code}: {ATTRIBUTE_DESCRIPTIONS[code]}"
        _emit_block(out_dir / "attributes" / code, trackers, f" - {code}", heading)
    logger.info(f"Report for {len(report.trackers)} trackers written to {out_dir}")
