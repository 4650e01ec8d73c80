"""
Tracking pipeline: the three inference settings and the benchmark loop.

- ``bbox``: local tracker initialized from the first gt box; a switch
  re-detects with template attention (language unused).
- ``nl``: the first box comes from grounding; a switch re-grounds.
- ``nl_bbox``: initialized from the first gt box; a switch re-detects with
  template attention, falling back to grounding when the map is uniform.
"""

import copy
import logging
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from tqdm import tqdm

import sequence_io
from config import PipelineConfig
from evaluation import (
    EvalConfig,
    EvalReport,
    emit_report,
    emit_score_traces,
    evaluate,
    load_results_dir,
)
from grounding import (
    GRID_SIZE,
    GroundingModel,
    attended_search_box,
    is_uniform,
    tanet_attention,
)
from local_tracker import make_tracker
from models import BoundingBox, Frame, SequenceRecord
from switcher import HistoryBuffer, SwitcherNet, decide, firing_rates, naive_decide
from synth import generate_dataset, make_distractor_windows

logger = logging.getLogger(__name__)

# switching policies
LOCAL_ONLY = "local"
NAIVE = "naive"
LEARNED = "learned"
GLOBAL_ONLY = "global"
POLICIES = (LOCAL_ONLY, NAIVE, LEARNED, GLOBAL_ONLY)

RESULTS_DIR = "results"
CONFIG_FILE = "config.json"
SWEEP_FILE = "thresholds.txt"
DISTRACTOR_FILE = "distractors.txt"


@dataclass
class Models:
    """Trained networks shared read-only by every sequence worker."""

    grounding: Optional[GroundingModel] = None
    switcher: Optional[SwitcherNet] = None


def load_models(config: PipelineConfig) -> Models:
    models = Models()
    if config.mode in ("nl", "nl_bbox"):
        models.grounding = GroundingModel.from_checkpoints(
            config.embedding_checkpoint,
            config.grounding_checkpoint,
            config.vocabulary,
            use_spatial_coords=config.use_spatial_coords,
        )
        logger.info(f"Loaded grounding model from {config.grounding_checkpoint}")
    if config.use_switcher:
        net = SwitcherNet(seed=None, use_frame_attention=config.use_frame_attention,
                          ablate=config.switcher_train.ablate)
        net.load(config.switcher_checkpoint)
        models.switcher = net
        logger.info(f"Loaded switcher from {config.switcher_checkpoint}")
    return models


def policy_for(config: PipelineConfig) -> str:
    if config.naive_switch:
        return NAIVE
    if config.use_switcher:
        return LEARNED
    return LOCAL_ONLY


@dataclass
class TrackResult:
    name: str
    results: list = field(default_factory=list)   # (BoundingBox, confidence) per frame
    switches: list = field(default_factory=list)  # 0-based frame indices


class SequenceRunner:
    """Runs one sequence under one mode and switching policy."""

    def __init__(self, config: PipelineConfig, policy: str, models: Models):
        if policy not in POLICIES:
            raise ValueError(f"unknown switching policy {policy!r}")
        if config.mode in ("nl", "nl_bbox") and models.grounding is None:
            raise ValueError(f"mode {config.mode} needs a grounding model")
        if policy == LEARNED and models.switcher is None:
            raise ValueError("learned switching needs a switcher network")
        self.config = config
        self.policy = policy
        self.models = models
        self.min_history = max(1, config.history // 2)

    def run(self, record: SequenceRecord) -> TrackResult:
        config = self.config
        tracker = make_tracker(config.tracker)
        buffer = HistoryBuffer(config.history)
        out = TrackResult(record.name)

        embedding = None
        lang = None
        if self.models.grounding is not None and config.mode != "bbox":
            embedding = self.models.grounding.embed_sentence(record.sentence)
            lang = embedding.pooled

        first = record.frames[0]
        if config.mode == "nl":
            box, scores = self.models.grounding.ground(first, embedding)
            confidence = float(scores.max())
            if confidence < 2.0 / GRID_SIZE**2:
                logger.warning(f"{record.name}: weak first-frame grounding ({confidence:.4f}), tracking anyway")
        else:
            box, confidence = record.gt[0], 1.0
        tracker.init(first, box)
        template = tracker.template
        out.results.append((box, confidence))

        for t in range(1, len(record.frames)):
            frame = record.frames[t]
            if self.policy == GLOBAL_ONLY:
                found = self._global_search(tracker, template, frame, embedding, lang)
                if found is None:
                    found = _as_result(tracker.track(frame, lang))
                out.results.append(found)
                continue

            observation = tracker.track(frame, lang)
            buffer.append(observation)
            result = _as_result(observation)
            if len(buffer) >= self.min_history and self._should_switch(buffer):
                found = self._global_search(tracker, template, frame, embedding, lang)
                if found is not None:
                    result = found
                    out.switches.append(t)
                buffer.clear()
            out.results.append(result)

        logger.debug(f"{record.name}: {len(out.switches)} switches at {out.switches}")
        return out

    def _should_switch(self, buffer: HistoryBuffer) -> bool:
        if self.policy == NAIVE:
            return naive_decide(buffer, self.config.naive_score_threshold).switched
        if self.policy == LEARNED:
            return decide(buffer, self.models.switcher, self.config.switch_threshold).switched
        return False

    def _global_search(self, tracker, template, frame: Frame, embedding, lang) -> Optional[tuple]:
        """Re-detect the target over the whole frame; None when nothing can search."""
        mode = self.config.mode
        if mode != "nl" and self.config.use_tanet:
            current = tracker.box
            attention = tanet_attention(frame, template, window=(current.w, current.h))
            if not is_uniform(attention):
                cx, cy = attended_search_box(attention, frame.width, frame.height).center
                tracker.relocate(BoundingBox.from_center(cx, cy, current.w, current.h))
                return _as_result(tracker.track(frame, lang))
        if mode == "bbox":
            return None
        box, scores = self.models.grounding.ground(frame, embedding)
        tracker.reinit(frame, box)
        return box, float(scores.max())


def _as_result(observation) -> tuple[BoundingBox, float]:
    return observation.box, float(observation.confidence)


def track_sequence(record: SequenceRecord, config: PipelineConfig, models: Models,
                   policy: Optional[str] = None) -> TrackResult:
    return SequenceRunner(config, policy or policy_for(config), models).run(record)


def _publish(staging: Path, destination: Path):
    if destination.exists():
        shutil.rmtree(destination)
    staging.rename(destination)


def run_track(
    config: PipelineConfig,
    name: Optional[str] = None,
    policy: Optional[str] = None,
    models: Optional[Models] = None,
) -> Path:
    """
    Track every sequence of ``config.dataset`` and write
    ``<output>/results/<name>/<sequence>.txt`` plus the effective config.

    Checkpoints are validated before any tracking starts; results appear
    only when every sequence succeeded.
    """
    policy = policy or policy_for(config)
    if models is None:
        config.validate(need_checkpoints=True)
        models = load_models(config)
    else:
        config.validate(need_checkpoints=False)
    if not config.dataset:
        raise ValueError("run_track needs a dataset directory")
    name = name or f"{config.mode}-{policy}"
    sequences = sequence_io.list_sequences(config.dataset)
    if not sequences:
        raise ValueError(f"no sequences under {config.dataset}")

    results_root = Path(config.output) / RESULTS_DIR
    results_root.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{name}-", dir=results_root))
    runner = SequenceRunner(config, policy, models)

    def work(path: Path) -> int:
        record = sequence_io.read_sequence(path)
        outcome = runner.run(record)
        sequence_io.write_results(staging / f"{record.name}.txt", outcome.results)
        return len(outcome.switches)

    try:
        with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
            switches = list(tqdm(pool.map(work, sequences), total=len(sequences), desc=name, disable=None))
        config.save(staging / CONFIG_FILE)
        destination = results_root / name
        _publish(staging, destination)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    logger.info(f"{name}: {len(sequences)} sequences, {sum(switches)} switches -> {destination}")
    return destination


# -- benchmark ----------------------------------------------------------------------------


def suite_plan(config: PipelineConfig) -> list[list[str]]:
    """Round-robin over the suite attributes, one per sequence."""
    codes = config.bench.suite_attributes
    return [[codes[i % len(codes)]] for i in range(config.bench.n_sequences)]


def prepare_suite(config: PipelineConfig) -> Path:
    """Reuse ``config.dataset`` if it holds a manifest, otherwise generate the suite there."""
    suite = Path(config.dataset) if config.dataset else Path(config.output) / "suite"
    if (suite / sequence_io.MANIFEST_FILE).exists():
        logger.info(f"Reusing benchmark suite at {suite}")
        return suite
    generate_dataset(
        suite,
        config.seed,
        config.bench.n_sequences,
        config.synth.length,
        config.synth.frame_size,
        plan=suite_plan(config),
        workers=config.workers,
        prefix="bench",
    )
    return suite


@dataclass(frozen=True)
class Variant:
    name: str
    mode: str
    policy: str
    frame_attention: bool = True
    threshold: Optional[float] = None


def benchmark_variants(config: PipelineConfig) -> list[Variant]:
    """Ablation rows per mode plus the threshold sweep on the first mode."""
    variants = []
    for mode in config.bench.modes:
        variants += [
            Variant(f"{mode}-local-only", mode, LOCAL_ONLY),
            Variant(f"{mode}-ground-only", mode, GLOBAL_ONLY),
            Variant(f"{mode}-naive", mode, NAIVE),
            Variant(f"{mode}-as", mode, LEARNED, frame_attention=False),
            Variant(f"{mode}-as-fa", mode, LEARNED),
        ]
    if config.bench.modes:
        mode = config.bench.modes[0]
        variants += [
            Variant(f"{mode}-as-fa-t{threshold:g}", mode, LEARNED, threshold=threshold)
            for threshold in config.bench.thresholds
        ]
    return variants


def _variant_models(models: Models, variant: Variant) -> Models:
    if models.switcher is None or models.switcher.use_frame_attention == variant.frame_attention:
        return models
    switcher = copy.copy(models.switcher)
    switcher.use_frame_attention = variant.frame_attention
    return Models(models.grounding, switcher)


def run_full_benchmark(config: PipelineConfig, models: Optional[Models] = None) -> EvalReport:
    """
    Run every benchmark variant over the suite, evaluate, and emit the
    report under ``<output>/report`` with the threshold sweep beside it.
    """
    need_grounding = any(mode in ("nl", "nl_bbox") for mode in config.bench.modes)
    base = replace(
        config,
        use_switcher=True,
        naive_switch=False,
        mode="nl_bbox" if need_grounding else "bbox",
    )
    if models is None:
        base.validate(need_checkpoints=True)
        models = load_models(base)
    else:
        base.validate(need_checkpoints=False)
    base = replace(base, dataset=str(prepare_suite(config)))
    annotations = [sequence_io.read_annotation(p) for p in sequence_io.list_sequences(base.dataset)]

    results_by_tracker, tracker_configs = {}, {}
    for variant in benchmark_variants(config):
        run_config = replace(
            base,
            mode=variant.mode,
            use_frame_attention=variant.frame_attention,
            switch_threshold=config.switch_threshold if variant.threshold is None else variant.threshold,
        )
        results_dir = run_track(run_config, variant.name, variant.policy, _variant_models(models, variant))
        results_by_tracker[variant.name] = load_results_dir(results_dir, annotations)
        if variant.mode == "nl":
            tracker_configs[variant.name] = EvalConfig(skip_first_frame=False)

    report = evaluate(annotations, results_by_tracker, EvalConfig(), tracker_configs)
    report_dir = Path(config.output) / "report"
    emit_report(report, report_dir)
    emit_score_traces(results_by_tracker, annotations, report_dir)
    _write_sweep(report_dir / SWEEP_FILE, config, report)
    if config.bench.distractor_windows > 0:
        rates = distractor_check(config, models)
        lines = [f"{key} {rates[key]:g}" for key in sorted(rates)]
        (report_dir / DISTRACTOR_FILE).write_text("\n".join(lines) + "\n")
    config.save(report_dir / CONFIG_FILE)
    return report


def distractor_check(config: PipelineConfig, models: Models) -> dict:
    """Naive and learned firing rates on windows where the tracker follows an identical twin."""
    grounding = models.grounding

    def embedder(sentence):
        return grounding.embed_sentence(sentence).pooled

    windows = make_distractor_windows(
        config.seed,
        config.bench.distractor_windows,
        config.history,
        config.synth.frame_size,
        embedder=embedder if grounding is not None else None,
    )
    rates = firing_rates(
        [w.observations for w in windows],
        models.switcher,
        config.switch_threshold,
        config.naive_score_threshold,
    )
    logger.info(
        f"Distractor windows: naive fired {rates['naive_fired']}, "
        f"learned fired {rates['learned_fired']} of {rates['n_windows']}"
    )
    return rates


def _write_sweep(path: Path, config: PipelineConfig, report: EvalReport):
    if not config.bench.modes:
        return
    mode = config.bench.modes[0]
    lines = ["threshold auc"]
    aucs = {}
    for threshold in config.bench.thresholds:
        scores = report.trackers.get(f"{mode}-as-fa-t{threshold:g}")
        if scores is not None:
            aucs[threshold] = scores.success_auc
            lines.append(f"{threshold:g} {scores.success_auc:.4f}")
    lines += [f"{key} {value:.4f}" for key, value in sweep_summary(aucs).items()]
    path.write_text("\n".join(lines) + "\n")


def sweep_summary(aucs: dict) -> dict:
    """
    ``band``: AUC spread among thresholds in [0, 1]; ``never_switch_gap``:
    best AUC minus the best AUC of thresholds above 1, which never switch.
    """
    summary = {}
    in_band = [auc for threshold, auc in aucs.items() if threshold <= 1.0]
    never = [auc for threshold, auc in aucs.items() if threshold > 1.0]
    if in_band:
        summary["band"] = max(in_band) - min(in_band)
    if never:
        summary["never_switch_gap"] = max(aucs.values()) - max(never)
    return summary
