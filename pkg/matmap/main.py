import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from matmap.cafusion import demo_fusion, train_toy
from matmap.config import RunConfig, configure_logging
from matmap.constants import CLASSIFIER_MODES, CONNECTIVITIES, EXIT_OK
from matmap.exceptions import MatmapError
from matmap.pipeline import evaluate_files, report_summary, run, segment
from matmap.synthetic import load_rooms, make_fixture


def _add_segmentation_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument(
        "--scales", type=float, nargs="+", help="voxel sizes, coarse to fine"
    )
    parser.add_argument("--connectivity", type=int, choices=CONNECTIVITIES)
    parser.add_argument("--label-cutoff", type=float)
    parser.add_argument("--color-threshold", type=float)
    parser.add_argument("--origin", type=float, nargs=3)
    parser.add_argument("--palette", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matmap",
        description="Material-labeled 3D maps from recorded RGB-D sequences.",
    )
    parser.add_argument("--log-level", help="logging level name")
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="-v for INFO, -vv for DEBUG",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="map a recorded sequence")
    run_parser.add_argument("manifest", type=Path, nargs="?")
    _add_segmentation_flags(run_parser)
    run_parser.add_argument("--stride", type=int)
    run_parser.add_argument("--min-depth", type=float)
    run_parser.add_argument("--max-depth", type=float)
    run_parser.add_argument("--classifier", choices=CLASSIFIER_MODES)
    run_parser.add_argument("--output-dir", type=Path)
    run_parser.add_argument("--keyframe-interval", type=int)
    run_parser.add_argument(
        "--incremental", action="store_true", default=None
    )
    run_parser.add_argument("--iou-threshold", type=float)
    run_parser.add_argument("--seed", type=int)
    run_parser.add_argument("--cafn-weights", type=Path)
    run_parser.add_argument("--groundtruth", type=Path)
    run_parser.add_argument(
        "--floor-height", type=float, help="floor height for object boxes"
    )
    run_parser.add_argument(
        "--workers", type=int, help="threads segmenting the scales"
    )
    run_parser.add_argument(
        "--include-timings",
        action="store_true",
        default=None,
        help="also write stage timings into metrics.json",
    )

    segment_parser = commands.add_parser(
        "segment", help="segment and label a stored cloud"
    )
    segment_parser.add_argument("cloud", type=Path)
    segment_parser.add_argument("boxes", type=Path)
    segment_parser.add_argument("--output", type=Path, required=True)
    _add_segmentation_flags(segment_parser)

    evaluate_parser = commands.add_parser(
        "evaluate",
        help="score a labeled map against ground truth",
        description="Score a labeled map against ground truth. Stage "
        "timings of a run are in its profile.json, or in metrics.json "
        "with run --include-timings.",
    )
    evaluate_parser.add_argument("prediction", type=Path)
    evaluate_parser.add_argument("groundtruth", type=Path)
    evaluate_parser.add_argument("--boxes", type=Path)
    evaluate_parser.add_argument("--iou-threshold", type=float)
    evaluate_parser.add_argument("--output", type=Path)

    demo_parser = commands.add_parser(
        "demo-fusion", help="exercise the attention fusion on toy tensors"
    )
    demo_parser.add_argument("--seed", type=int, default=0)
    demo_parser.add_argument("--channels", type=int, default=2)
    demo_parser.add_argument("--height", type=int, default=4)
    demo_parser.add_argument("--width", type=int, default=4)
    demo_parser.add_argument("--zero-weights", action="store_true")
    demo_parser.add_argument("--train-steps", type=int)

    fixture_parser = commands.add_parser(
        "make-fixture", help="write a synthetic recording of a room"
    )
    fixture_parser.add_argument("room", choices=sorted(load_rooms()))
    fixture_parser.add_argument("output_dir", type=Path)
    fixture_parser.add_argument("--seed", type=int, default=0)
    fixture_parser.add_argument("--noise-rate", type=float, default=0.0)
    fixture_parser.add_argument("--noise-seed", type=int, default=0)
    return parser


def _log_level(args: argparse.Namespace) -> Optional[str]:
    if args.log_level:
        return args.log_level.upper()
    if args.verbose >= 2:
        return "DEBUG"
    if args.verbose == 1:
        return "INFO"
    return None


def _overrides(args: argparse.Namespace, *names: str) -> dict[str, Any]:
    return {name: getattr(args, name, None) for name in names}


SEGMENTATION_KEYS = (
    "scales",
    "connectivity",
    "label_cutoff",
    "color_threshold",
    "origin",
    "palette",
)


def _run(args: argparse.Namespace) -> None:
    config = RunConfig.from_file(
        args.config,
        **_overrides(
            args,
            "manifest",
            *SEGMENTATION_KEYS,
            "stride",
            "min_depth",
            "max_depth",
            "classifier",
            "output_dir",
            "keyframe_interval",
            "incremental",
            "iou_threshold",
            "seed",
            "cafn_weights",
            "groundtruth",
            "floor_height",
            "workers",
            "include_timings",
        ),
    )
    result = run(config)
    sys.stdout.write(report_summary(result.report))
    sys.stdout.write(f"Outputs written to {config.output_dir}\n")


def _segment(args: argparse.Namespace) -> None:
    config = RunConfig.from_file(
        args.config, **_overrides(args, *SEGMENTATION_KEYS)
    )
    semantic_map = segment(args.cloud, args.boxes, config, args.output)
    sys.stdout.write(
        f"{len(semantic_map)} points in {semantic_map.n_clusters} clusters\n"
    )


def _evaluate(args: argparse.Namespace) -> None:
    config = RunConfig.from_file(None, **_overrides(args, "iou_threshold"))
    report = evaluate_files(
        args.prediction,
        args.groundtruth,
        args.boxes,
        config.iou_threshold,
        args.output,
    )
    sys.stdout.write(json.dumps(report.to_dict(), indent=2) + "\n")


def _demo_fusion(args: argparse.Namespace) -> None:
    report = demo_fusion(
        args.seed, args.channels, args.height, args.width, args.zero_weights
    )
    sys.stdout.write(report.render())
    if args.train_steps is not None:
        _, training = train_toy(args.seed, args.train_steps)
        sys.stdout.write(
            f"toy training loss {training.losses[0]:.6f} -> "
            f"{training.losses[-1]:.6f} over {len(training.losses)} steps\n"
        )


def _make_fixture(args: argparse.Namespace) -> None:
    manifest = make_fixture(
        args.room, args.output_dir, args.seed, args.noise_rate, args.noise_seed
    )
    sys.stdout.write(f"{manifest}\n")


COMMANDS = {
    "run": _run,
    "segment": _segment,
    "evaluate": _evaluate,
    "demo-fusion": _demo_fusion,
    "make-fixture": _make_fixture,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Main entrypoint to the command-line application.

    :return: process exit code, the error's own code on domain errors.
    """
    args = build_parser().parse_args(argv)
    configure_logging(_log_level(args))
    try:
        COMMANDS[args.command](args)
    except MatmapError as exception:
        sys.stderr.write(f"error: {exception}\n")
        return exception.exit_code
    return EXIT_OK


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
