#!/usr/bin/env python3
"""
RCTrans Desk - Command Line Interface

Batch entry point: generate synthetic scenes, train, evaluate, run inference,
track, sweep sensor dropouts and decoder depths. Every command takes
``--config``, ``--seed`` and ``--out`` and writes JSON / JSONL artifacts.

Exit codes: 0 success, 1 usage or configuration error, 2 IO error,
3 checkpoint mismatch, 4 numerical abort.
"""

import argparse
import logging
import statistics
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.checkpoint import CheckpointMismatchError, restore_into, save_checkpoint
from src.configuration import ConfigurationValidationError, RunConfig, load_run_config
from src.decoder import query_spread
from src.evaluation import evaluate_detections, ground_truth_tracks, pr_curves, tracking_metrics
from src.models import Detection, Scene
from src.network import RCTransNet
from src.reporting import JsonlWriter, plot_loss_curve, plot_pr_curves, write_json
from src.scene_io import SceneFormatError, read_scenes, write_scenes
from src.scene_sim import drop_patterns, dropout_harness, gen_scene, sequence, sparsity_report
from src.tensor import no_grad
from src.tracker import run_tracker
from src.training import NumericalAbortError, Trainer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_CHECKPOINT = 3
EXIT_NUMERICAL = 4

logger = logging.getLogger("src.cli")


class UsageError(Exception):
    """Bad command-line usage."""
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sibling(path: Path, suffix: str) -> Path:
    """``out/metrics.json`` -> ``out/metrics<suffix>``."""
    return path.with_name(path.stem + suffix)


def resolve_config(args) -> RunConfig:
    config = load_run_config(args.config)
    if args.seed is not None:
        data = config.to_dict()
        data["seed"] = args.seed
        config = RunConfig.from_dict(data)
    if not args.log_level:
        logging.getLogger().setLevel(getattr(logging, config.log_level.upper(), logging.INFO))
    return config


def load_model(config: RunConfig, checkpoint: Optional[str]) -> RCTransNet:
    if checkpoint is None:
        raise UsageError("--checkpoint is required for this command")
    model = RCTransNet(config)
    manifest = restore_into(model, checkpoint)
    if manifest.get("config_hash") and manifest["config_hash"] != config.model_hash():
        logger.warning(f"Checkpoint {checkpoint} was trained with a different model configuration hash")
    return model


def require_data(args) -> List[Scene]:
    if args.data is None:
        raise UsageError("--data is required for this command")
    return read_scenes(args.data)


def detect_all(model: RCTransNet, scenes: Sequence[Scene], layers: Optional[int] = None) -> List[List[Detection]]:
    return [model.detect(scene, layers=layers) for scene in scenes]


def timed_detect(model: RCTransNet, scenes: Sequence[Scene], layers: Optional[int] = None):
    """Detections and per-scene wall-clock latency in milliseconds."""
    detections, latencies = [], []
    for scene in scenes:
        start = time.perf_counter()
        detections.append(model.detect(scene, layers=layers))
        latencies.append((time.perf_counter() - start) * 1000.0)
    return detections, latencies


def write_detections(path: Path, scenes: Sequence[Scene], detections: Sequence[Sequence[Detection]]) -> None:
    with JsonlWriter(path) as writer:
        for i, (scene, dets) in enumerate(zip(scenes, detections)):
            writer.write({
                "scene": i,
                "seed": scene.seed,
                "frame_index": scene.frame_index,
                "detections": [d.to_dict() for d in dets],
            })


def latency_summary(latencies: Sequence[float]) -> Dict[str, float]:
    if not latencies:
        return {"median_ms": 0.0, "mean_ms": 0.0, "scenes": 0}
    return {
        "median_ms": float(statistics.median(latencies)),
        "mean_ms": float(statistics.fmean(latencies)),
        "scenes": len(latencies),
    }


def cmd_gen_data(args):
    """Generate synthetic scenes (or one sequence with --frames) plus a manifest."""
    config = resolve_config(args)
    out = Path(args.out)
    if args.frames is not None:
        scenes = sequence(config.seed, args.frames, config) if args.frames > 0 else []
        mode = "sequence"
    else:
        count = config.scene.num_scenes if args.scenes is None else args.scenes
        scenes = [gen_scene(config.seed + i, config) for i in range(count)]
        mode = "scenes"

    count = write_scenes(out, scenes)
    manifest = {
        "format_version": 1,
        "mode": mode,
        "seed": config.seed,
        "count": count,
        "config_hash": config.config_hash(),
        "sparsity": sparsity_report(scenes, config.world, config.scene.stats_grid_size),
    }
    write_json(sibling(out, ".manifest.json"), manifest)
    print(f"✅ Wrote {count} scenes to {out}")
    empty = manifest["sparsity"]["mean_empty_fraction"]
    print(f"   Empty BEV cells ({config.scene.stats_grid_size}x{config.scene.stats_grid_size}): {empty:.1%}")
    return EXIT_OK


def cmd_train(args):
    """Train on a scene file and save the checkpoint."""
    config = resolve_config(args)
    scenes = require_data(args)
    out = Path(args.out)
    metrics_path = sibling(out, ".metrics.jsonl")
    trainer = Trainer(config, metrics_path=metrics_path, dump_dir=out.parent)
    result = trainer.train(scenes, steps=args.steps)
    save_checkpoint(out, trainer.model.state_dict(), config.model_hash())
    write_json(sibling(out, ".train.json"), {
        "steps": result.steps,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "seconds": result.seconds,
        "config_hash": config.config_hash(),
    })
    if args.plot:
        plot_loss_curve(result.losses, sibling(out, ".loss.png"))
    print(f"✅ Trained {result.steps} steps, loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    print(f"   Checkpoint: {out}")
    return EXIT_OK


def cmd_eval(args):
    """Detection metrics of a checkpoint on a scene file."""
    config = resolve_config(args)
    model = load_model(config, args.checkpoint)
    scenes = require_data(args)
    detections = detect_all(model, scenes, args.layers)
    metrics = evaluate_detections(
        detections, [s.objects for s in scenes], config.model.num_classes, config.evaluation.distance_thresholds
    )
    out = Path(args.out)
    write_json(out, metrics.to_dict())
    write_detections(sibling(out, ".detections.jsonl"), scenes, detections)
    if args.plot:
        plot_pr_curves(pr_curves(detections, [s.objects for s in scenes], config.model.num_classes),
                       sibling(out, ".pr.png"))
    print(f"📊 mAP {metrics.mAP:.3f}  mATE {metrics.mATE:.3f} m  mAVE {metrics.mAVE:.3f} m/s")
    return EXIT_OK


def cmd_infer(args):
    """Detections with per-scene latency and the query spread diagnostic."""
    config = resolve_config(args)
    model = load_model(config, args.checkpoint)
    scenes = require_data(args)
    detections, latencies = timed_detect(model, scenes, args.layers)

    spreads = []
    with no_grad():
        for scene in scenes:
            output = model.forward(scene, mode="infer", layers=args.layers)
            spreads.append(query_spread(output.states, config.world))
    per_layer = []
    for i in range(len(spreads[0]) if spreads else 0):
        per_layer.append({
            "layer": spreads[0][i]["layer"],
            "mean_distance": float(statistics.fmean(s[i]["mean_distance"] for s in spreads)),
            "min_distance": float(min(s[i]["min_distance"] for s in spreads)),
        })

    out = Path(args.out)
    write_detections(sibling(out, ".detections.jsonl"), scenes, detections)
    summary = {
        "layers": args.layers or config.model.inference_layers,
        "latency": latency_summary(latencies),
        "latency_ms": latencies,
        "query_spread": per_layer,
        "detections": sum(len(d) for d in detections),
    }
    write_json(out, summary)
    print(f"⏱️  median latency {summary['latency']['median_ms']:.1f} ms over {len(scenes)} scenes")
    return EXIT_OK


def cmd_track(args):
    """Track a scene sequence with model (or --oracle ground-truth) detections."""
    config = resolve_config(args)
    scenes = sorted(require_data(args), key=lambda s: s.frame_index)
    if args.oracle:
        frames = [
            [Detection.from_box(box, 1.0, label) for box, label in zip(s.objects.boxes, s.objects.labels)]
            for s in scenes
        ]
    else:
        model = load_model(config, args.checkpoint)
        frames = detect_all(model, scenes, args.layers)

    records = run_tracker(frames, config.scene.frame_interval, config.tracker)
    metrics = tracking_metrics(ground_truth_tracks(scenes), records, config.evaluation.tracking_threshold)

    out = Path(args.out)
    with JsonlWriter(sibling(out, ".tracks.jsonl")) as writer:
        for record in records:
            writer.write(record.to_dict())
    write_json(out, metrics.to_dict())
    print(f"🛰️  accuracy {metrics.accuracy:.3f}  IDS {metrics.ids}  MOTP {metrics.motp:.3f} m")
    return EXIT_OK


def cmd_robust(args):
    """Detection metrics for every sensor drop pattern."""
    config = resolve_config(args)
    model = load_model(config, args.checkpoint)
    scenes = require_data(args)
    gts = [s.objects for s in scenes]
    num_cameras = scenes[0].num_cameras if scenes else config.scene.num_cameras

    grid = {}
    for name, pattern in drop_patterns(num_cameras).items():
        dropped = [dropout_harness(s, cameras=pattern["cameras"], radar=pattern["radar"]) for s in scenes]
        metrics = evaluate_detections(
            detect_all(model, dropped, args.layers), gts,
            config.model.num_classes, config.evaluation.distance_thresholds,
        )
        grid[name] = {"drop": pattern, **metrics.to_dict()}
        print(f"   {name:<12} mAP {metrics.mAP:.3f}")
    write_json(Path(args.out), {"patterns": grid})
    return EXIT_OK


def cmd_prune_sweep(args):
    """mAP and median latency for every inference depth."""
    config = resolve_config(args)
    model = load_model(config, args.checkpoint)
    scenes = require_data(args)
    gts = [s.objects for s in scenes]

    rows = []
    for depth in range(1, config.model.num_layers + 1):
        detections, latencies = timed_detect(model, scenes, depth)
        metrics = evaluate_detections(detections, gts, config.model.num_classes,
                                      config.evaluation.distance_thresholds)
        rows.append({"layers": depth, "mAP": metrics.mAP, "mAVE": metrics.mAVE, **latency_summary(latencies)})
        print(f"   layers {depth}: mAP {metrics.mAP:.3f}  median {rows[-1]['median_ms']:.1f} ms")
    write_json(Path(args.out), {"depths": rows})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(description="RCTrans Desk - radar-camera 3D detection at desk scale")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    def add_command(name, func, help_text, data=True, checkpoint=True):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", help="Run configuration JSON (default: config/run_config.json)")
        sub.add_argument("--seed", type=int, help="Override the configured seed")
        sub.add_argument("--out", required=True, help="Output path")
        sub.add_argument("--log-level", help="Logging level (default from the configuration)")
        if data:
            sub.add_argument("--data", help="Scene JSONL file")
        if checkpoint:
            sub.add_argument("--checkpoint", help="Checkpoint manifest path")
            sub.add_argument("--layers", type=int, help="Decoder layers to run at inference")
        sub.set_defaults(func=func)
        return sub

    gen = add_command("gen-data", cmd_gen_data, "Generate synthetic scenes", data=False, checkpoint=False)
    gen.add_argument("--scenes", type=int, help="Number of independent scenes")
    gen.add_argument("--frames", type=int, help="Generate one sequence of this many frames instead")

    train = add_command("train", cmd_train, "Train a model", checkpoint=False)
    train.add_argument("--steps", type=int, help="Override the configured step count")
    train.add_argument("--plot", action="store_true", help="Render the loss curve as PNG")

    ev = add_command("eval", cmd_eval, "Evaluate detection metrics")
    ev.add_argument("--plot", action="store_true", help="Render precision-recall curves as PNG")

    add_command("infer", cmd_infer, "Run inference with latency and query spread")

    track = add_command("track", cmd_track, "Track a scene sequence")
    track.add_argument("--oracle", action="store_true", help="Use ground-truth boxes as detections")

    add_command("robust", cmd_robust, "Evaluate under every sensor drop pattern")
    add_command("prune-sweep", cmd_prune_sweep, "Evaluate every inference depth")
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_USAGE

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    try:
        configure_logging(args.log_level or "INFO")
        return args.func(args)
    except CheckpointMismatchError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        for name in e.mismatched:
            print(f"   {name}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericalAbortError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        if e.dump_path is not None:
            print(f"   Diagnostic dump: {e.dump_path}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SceneFormatError as e:
        print(f"❌ Error: unreadable scene data: {e}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigurationValidationError, ValueError) as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
