#!/usr/bin/env python3
"""
langswitch CLI - synthetic data, training, tracking and evaluation.

Usage:
    python cli.py synth --split train           # Generate a synthetic split
    python cli.py train-ground                  # Train the grounding model
    python cli.py harvest                       # Build the switch corpus and label clips
    python cli.py train-switch                  # Train the switcher on harvested clips
    python cli.py track --mode nl_bbox          # Run one tracking setting over a dataset
    python cli.py eval --results runs/results/* # Score result directories
    python cli.py bench                         # Ablation rows, threshold sweep, report
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import sequence_io
from config import MODES, Config, PipelineConfig
from evaluation import EvalConfig, emit_report, emit_score_traces, evaluate, load_results_dir
from grounding import GroundingModel, evaluate_grounding, train_grounding
from pipeline import CONFIG_FILE, Models, distractor_check, run_full_benchmark, run_track
from switcher import (
    evaluate_switcher,
    harvest_clips,
    load_clip_dataset,
    split_by_sequence,
    train_switcher,
)
from synth import generate_dataset, make_grounding_samples, make_switch_corpus

logger = logging.getLogger("langswitch")

SWITCHER_FILE = "switcher.ckpt"
# test split seeds are offset so the two splits never share a scene
TEST_SEED_OFFSET = 1_000_003


def setup_logging(level: str = Config.LOG_LEVEL, log_dir: str = Config.LOG_DIR):
    os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(os.path.join(log_dir, "langswitch.log")),
        ],
        force=True,
    )


def load_config(args) -> PipelineConfig:
    """Config file (if any) with command-line overrides applied."""
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "switch_threshold": args.threshold,
        "output": args.out,
        "dataset": args.dataset,
        "workers": args.workers,
    }
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})


def _write_json(path: Path, data: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_synth(args, config: PipelineConfig):
    """Generate the train or test split under <data dir>/<split>."""
    synth = config.synth
    count = args.count if args.count is not None else (
        synth.train_sequences if args.split == "train" else synth.test_sequences
    )
    seed = config.seed if args.split == "train" else config.seed + TEST_SEED_OFFSET
    out_dir = Path(config.dataset or os.path.join(Config.DATA_DIR, args.split))
    generate_dataset(out_dir, seed, count, synth.length, synth.frame_size, workers=config.workers)
    print(f"✅ {count} {args.split} sequences written to {out_dir}")


def _coords_key(use_spatial_coords: bool) -> str:
    return "with_coords" if use_spatial_coords else "without_coords"


def cmd_train_ground(args, config: PipelineConfig):
    """Train the grounding model on first-frame samples and score held-out cases."""
    cfg = config.grounding
    samples = make_grounding_samples(cfg.seed, cfg.n_samples + cfg.held_out, config.synth.frame_size)
    train, held_out = samples[: cfg.n_samples], samples[cfg.n_samples :]
    out_dir = Path(config.output) / "grounding"

    model, losses = train_grounding(train, cfg, use_spatial_coords=config.use_spatial_coords)
    model.save(out_dir)
    metrics = {"losses": losses, _coords_key(config.use_spatial_coords): evaluate_grounding(model, held_out)}
    if args.compare_coords:
        ablated, _ = train_grounding(train, cfg, use_spatial_coords=not config.use_spatial_coords)
        metrics[_coords_key(not config.use_spatial_coords)] = evaluate_grounding(ablated, held_out)
    _write_json(out_dir / "metrics.json", metrics)
    config.save(out_dir / CONFIG_FILE)

    for key in ("with_coords", "without_coords"):
        if key in metrics:
            m = metrics[key]
            print(f"{key:<15} hit rate {m['overall']:.3f} (spatial {m['spatial']:.3f}, plain {m['plain']:.3f})")
    print(f"✅ Checkpoints written to {out_dir}")


def _grounding_model(config: PipelineConfig):
    if not (config.grounding_checkpoint and config.embedding_checkpoint):
        return None
    return GroundingModel.from_checkpoints(
        config.embedding_checkpoint, config.grounding_checkpoint, config.vocabulary,
        use_spatial_coords=config.use_spatial_coords,
    )


def _grounding_embedder(config: PipelineConfig):
    model = _grounding_model(config)
    if model is None:
        return None
    return lambda sentence: model.embed_sentence(sentence).pooled


def _corpus_dir(args, config: PipelineConfig) -> Path:
    return Path(args.corpus) if args.corpus else Path(config.output) / "corpus"


def cmd_harvest(args, config: PipelineConfig):
    """Run the local tracker over fresh sequences and label sliding windows."""
    corpus = _corpus_dir(args, config)
    count = args.count if args.count is not None else config.synth.train_sequences
    make_switch_corpus(
        config.seed,
        count,
        corpus,
        config.synth.length,
        config.synth.frame_size,
        embedder=_grounding_embedder(config),
        workers=config.workers,
    )
    train_cfg = config.switcher_train
    dataset = harvest_clips(corpus, config.history, train_cfg.healthy_iou, train_cfg.failed_iou)
    n_failed = int(dataset.labels().sum())
    print(f"✅ {len(dataset)} clips ({n_failed} failed) harvested into {corpus}")


def cmd_train_switch(args, config: PipelineConfig):
    """Train the switcher on harvested clips, optionally comparing frame attention on/off."""
    train_cfg = config.switcher_train
    dataset = load_clip_dataset(_corpus_dir(args, config), config.history)
    train, held_out = split_by_sequence(dataset.clips, train_cfg.held_out_fraction, train_cfg.seed)
    out_dir = Path(config.output) / "switcher"

    net, history = train_switcher(dataset, train_cfg, train, config.use_frame_attention)
    out_dir.mkdir(parents=True, exist_ok=True)
    net.save(out_dir / SWITCHER_FILE)
    metrics = {"history": history}
    if held_out:
        metrics["held_out"] = evaluate_switcher(net, dataset, held_out)
    if args.compare_attention:
        other, other_history = train_switcher(dataset, train_cfg, train, not config.use_frame_attention)
        key = "frame_attention_off" if config.use_frame_attention else "frame_attention_on"
        metrics[key] = {"history": other_history}
        if held_out:
            metrics[key]["held_out"] = evaluate_switcher(other, dataset, held_out)
    if config.bench.distractor_windows > 0:
        metrics["distractors"] = distractor_check(config, Models(_grounding_model(config), net))
    _write_json(out_dir / "metrics.json", metrics)
    config.save(out_dir / CONFIG_FILE)

    if "held_out" in metrics:
        held = metrics["held_out"]
        print(f"held-out accuracy {held['accuracy']:.3f} over {held['n_clips']} clips")
    if "distractors" in metrics:
        d = metrics["distractors"]
        print(
            f"distractor windows: naive fired {d['naive_fired']}, "
            f"switcher fired {d['learned_fired']} of {d['n_windows']}"
        )
    print(f"✅ Switcher written to {out_dir / SWITCHER_FILE}")


def cmd_track(args, config: PipelineConfig):
    """Track every sequence of the dataset in the configured mode."""
    results = run_track(config, args.name)
    print(f"✅ Results written to {results}")


def _results_mode(results_dir: Path):
    path = results_dir / CONFIG_FILE
    if not path.exists():
        return None
    return PipelineConfig.load(path).mode


def cmd_eval(args, config: PipelineConfig):
    """Score result directories against the dataset and emit the report."""
    if not config.dataset:
        raise ValueError("eval needs --dataset")
    annotations = [sequence_io.read_annotation(p) for p in sequence_io.list_sequences(config.dataset)]
    results, tracker_configs = {}, {}
    for results_dir in map(Path, args.results):
        name = results_dir.name
        results[name] = load_results_dir(results_dir, annotations)
        if _results_mode(results_dir) == "nl":
            tracker_configs[name] = EvalConfig(skip_first_frame=False)
    base = EvalConfig(skip_absent=not args.keep_absent, attribute_filter=args.attribute)
    report = evaluate(annotations, results, base, tracker_configs)
    out_dir = Path(config.output) / "report"
    emit_report(report, out_dir)
    emit_score_traces(results, annotations, out_dir)
    print((out_dir / "ranking.txt").read_text() if report.trackers else "No trackers scored.")


def cmd_bench(args, config: PipelineConfig):
    """Benchmark variants over the FOC/OV suite."""
    report = run_full_benchmark(config)
    print(f"✅ {len(report.trackers)} variants scored; report in {Path(config.output) / 'report'}")


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--threshold", type=float, help="switch threshold")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("--workers", type=int)
    common.add_argument("--log-level", default=Config.LOG_LEVEL)

    parser = argparse.ArgumentParser(
        description="langswitch - adaptive local/global tracking by natural language"
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    p = subparsers.add_parser("synth", parents=[common], help="Generate a synthetic split")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--count", type=int)

    p = subparsers.add_parser("train-ground", parents=[common], help="Train the grounding model")
    p.add_argument("--compare-coords", action="store_true", help="also train without spatial coordinates")

    p = subparsers.add_parser("harvest", parents=[common], help="Build the switch corpus and label clips")
    p.add_argument("--corpus")
    p.add_argument("--count", type=int)

    p = subparsers.add_parser("train-switch", parents=[common], help="Train the switcher")
    p.add_argument("--corpus")
    p.add_argument("--compare-attention", action="store_true", help="also train with frame attention toggled")

    p = subparsers.add_parser("track", parents=[common], help="Run tracking over a dataset")
    p.add_argument("--name", help="results subdirectory name")

    p = subparsers.add_parser("eval", parents=[common], help="Evaluate result directories")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--keep-absent", action="store_true", help="score absent frames too")
    p.add_argument("--attribute", help="restrict to sequences with this attribute code")

    subparsers.add_parser("bench", parents=[common], help="Run the full benchmark")

    args = parser.parse_args(argv)

    commands = {
        "synth": cmd_synth,
        "train-ground": cmd_train_ground,
        "harvest": cmd_harvest,
        "train-switch": cmd_train_switch,
        "track": cmd_track,
        "eval": cmd_eval,
        "bench": cmd_bench,
    }

    if args.command not in commands:
        parser.print_help()
        return 1

    setup_logging(args.log_level.upper())
    try:
        Config.validate()
        config = load_config(args)
        config.validate(need_checkpoints=False)
        commands[args.command](args, config)
    except (ValueError, OSError, RuntimeError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
