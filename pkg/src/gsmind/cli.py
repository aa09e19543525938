"""Command line surface.

Subcommands: synth, map, update, graph, ground, render, eval. Exit codes:
0 success, 1 usage error, 2 data error (missing or malformed files),
3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .bundle import load_bundle
from .clients import (
    ColorHistogramEmbedder,
    FilePoseProvider,
    HttpAnnotatorClient,
    HttpPoseProvider,
    HttpVlmClient,
    MockAnnotator,
    MockPoseProvider,
    MockTextEmbedder,
    MockVlm,
    ANNOTATOR_URL_ENV,
)
from .config import PipelineConfig
from .errors import DataError, GsmindError
from .fsio import atomic_write_bytes, atomic_write_text
from .geometry import Intrinsics, Pose
from .grounding import ground as ground_pipeline
from .mapfile import load_map, save_map
from .mapstate import GaussianMap
from .pipeline import MappingPipeline
from .renderer import render_frame
from .scenegraph import GraphBuilder, from_json as graph_from_json, to_json as graph_to_json
from .synth import SceneSpec, SceneObject, generate_bundle, load_truth
from .updater import Updater, report_to_json

logger = logging.getLogger(__name__)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def default_scene_spec(seed: int = 0) -> SceneSpec:
    """Built-in 5-object desk-scale demo scene."""
    return SceneSpec(
        seed=seed,
        room=(2.4, 1.6, 2.4),
        objects=[
            SceneObject("box", (0.7, 0.35, 0.5), (1.2, 0.175, 1.2), (0.55, 0.27, 0.07), "table", "Asset"),
            SceneObject("box", (0.16, 0.2, 0.16), (1.05, 0.45, 1.1), (0.82, 0.12, 0.1), "mug", "Ordinary"),
            SceneObject("sphere", (0.11,), (1.45, 0.46, 1.3), (0.1, 0.35, 0.85), "ball", "Ordinary"),
            SceneObject("box", (0.3, 0.5, 0.3), (0.45, 0.25, 1.85), (0.13, 0.55, 0.13), "plant", "Standalone"),
            SceneObject("sphere", (0.14,), (1.85, 0.14, 0.55), (0.9, 0.75, 0.1), "lamp", "Standalone"),
        ],
        n_frames=60,
        image_size=(64, 64),
        feature_dim=64,
    )


def _annotator_for(bundle_dir: str | None):
    if os.environ.get(ANNOTATOR_URL_ENV):
        return HttpAnnotatorClient()
    if bundle_dir:
        truth_path = os.path.join(bundle_dir, "truth.json")
        if os.path.exists(truth_path):
            return MockAnnotator(load_truth(truth_path).annotator_table())
    # total fallback: everything becomes an unknown Standalone node
    return MockAnnotator([((0.5, 0.5, 0.5), "unknown", "", "Standalone")])


def _build_graph(gmap: GaussianMap, K: Intrinsics, bundle_dir: str | None):
    annotator = _annotator_for(bundle_dir)
    if bundle_dir:
        bundle = load_bundle(bundle_dir, validate=False)
        loader = lambda frame_id: bundle.frame(frame_id).color
    else:
        loader = lambda frame_id: np.zeros((K.height, K.width, 3))
    return GraphBuilder(gmap, K, annotator, loader).build()


def _intrinsics_from_args(args) -> Intrinsics:
    f = args.width / (2.0 * np.tan(np.radians(args.fov) / 2.0))
    return Intrinsics(f, f, args.width / 2.0, args.height / 2.0, args.width, args.height)


def _save_png(path: str, array: np.ndarray) -> None:
    import io as _io

    from PIL import Image

    buf = _io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# -- subcommand implementations ------------------------------------------------


def _cmd_synth(args) -> int:
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = SceneSpec.from_dict(json.load(fh))
    else:
        spec = default_scene_spec()
    if args.seed is not None:
        spec.seed = args.seed
    generate_bundle(spec, args.out)
    print(f"bundle written to {args.out}")
    return 0


def _cmd_map(args) -> int:
    config = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    if args.iters is not None:
        config.optimizer.final_iters = args.iters
    bundle = load_bundle(args.bundle)
    gmap, _ = MappingPipeline(config).run(bundle)
    save_map(gmap, args.out_map)
    if args.out_graph:
        graph = _build_graph(gmap, bundle.intrinsics, args.bundle)
        atomic_write_text(args.out_graph, graph_to_json(graph))
    print(f"map: {gmap.gaussians.n_alive} gaussians, {len(gmap.records)} instances")
    return 0


def _cmd_update(args) -> int:
    config = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    gmap = load_map(args.map)
    bundle = load_bundle(args.frames, validate=False)
    K = bundle.intrinsics

    if args.pose_source == "file":
        provider = FilePoseProvider(os.path.join(args.frames, "frames"))
    elif args.pose_source == "mock":
        provider = MockPoseProvider(args.noise_trans, args.noise_rot, seed=args.seed or 0)
    else:
        if not args.pose_url:
            raise _UsageError("--pose-source url requires --pose-url")
        provider = HttpPoseProvider(args.pose_url)

    updater = Updater(gmap, K, ColorHistogramEmbedder(),
                      refine_cfg=config.refine, opt_cfg=config.optimizer,
                      tau=config.association.tau,
                      refine_iters=config.change.refine_iters)
    frame_ids = [args.frame] if args.frame is not None else range(bundle.meta.frame_count)
    report = None
    for i in frame_ids:
        report = updater.run_update(bundle.frame(i), provider)
    save_map(gmap, args.out_map)
    if args.out_report and report is not None:
        atomic_write_text(args.out_report, report_to_json(report))
    if args.out_graph:
        graph = _build_graph(gmap, K, args.frames)
        atomic_write_text(args.out_graph, graph_to_json(graph))
    if report is not None:
        print(f"update: removed {report.removed}, new {report.new}")
    return 0


def _cmd_graph(args) -> int:
    gmap = load_map(args.map)
    if args.bundle:
        K = load_bundle(args.bundle, validate=False).intrinsics
    else:
        K = _intrinsics_from_args(args)
    graph = _build_graph(gmap, K, args.bundle)
    atomic_write_text(args.out, graph_to_json(graph))
    print(f"graph: {len(graph.nodes)} nodes -> {args.out}")
    return 0


def _cmd_ground(args) -> int:
    gmap = load_map(args.map)
    with open(args.graph, "r", encoding="utf-8") as fh:
        graph = graph_from_json(fh.read())
    if args.vlm == "mock":
        client = MockVlm()
    else:
        client = HttpVlmClient(url=None if args.vlm == "url" else args.vlm)
    truth_path = args.truth
    if truth_path is None:
        candidate = os.path.join(os.path.dirname(os.path.abspath(args.map)), "truth.json")
        truth_path = candidate if os.path.exists(candidate) else None
    if truth_path:
        embedder = MockTextEmbedder(load_truth(truth_path).category_features)
    else:
        # categories double as one-hot axes when no aligned text encoder is wired
        cats = sorted({n.category for n in graph.nodes.values()})
        table = {c: np.eye(len(cats))[i] for i, c in enumerate(cats)}
        embedder = MockTextEmbedder(table)
    K = _intrinsics_from_args(args)

    result = ground_pipeline(args.query, gmap, graph, client, embedder, K, k=args.k)
    if args.roi_dir:
        os.makedirs(args.roi_dir, exist_ok=True)
        for i, img in enumerate(result.roi_images):
            path = os.path.join(args.roi_dir, f"roi_{i:02d}.png")
            _save_png(path, img)
            result.roi_paths.append(path)
    atomic_write_text(args.out, json.dumps(result.to_json_dict(), sort_keys=True))
    print(f"grounded instance {result.instance_id} -> {args.out}")
    return 0


def _cmd_render(args) -> int:
    gmap = load_map(args.map)
    if args.pose_file:
        with open(args.pose_file, "r", encoding="utf-8") as fh:
            pose = Pose.from_text(fh.read())
    elif args.pose:
        pose = Pose.from_text(args.pose)
    else:
        raise _UsageError("render needs --pose or --pose-file")
    K = _intrinsics_from_args(args)
    out = render_frame(gmap.gaussians, pose, K)
    color8 = (np.clip(out.color, 0, 1) * 255).round().astype(np.uint8)
    depth16 = np.clip(np.round(out.depth * 1000.0), 0, 65535).astype(np.uint16)
    _save_png(args.out_prefix + ".color.png", color8)
    _save_png(args.out_prefix + ".depth.png", depth16)
    print(f"rendered -> {args.out_prefix}.color.png / .depth.png")
    return 0


def _cmd_eval(args) -> int:
    from .evals import eval_photometric, eval_segmentation

    gmap = load_map(args.map)
    bundle = load_bundle(args.bundle, validate=False)
    truth = load_truth(os.path.join(args.bundle, "truth.json"))
    frames = [bundle.frame(i) for i in range(0, bundle.meta.frame_count, args.stride)]
    metrics = {
        "segmentation": eval_segmentation(gmap, truth),
        "photometric": eval_photometric(
            gmap, [f.pose for f in frames], frames, bundle.intrinsics
        ),
    }
    text = json.dumps(metrics, sort_keys=True, indent=2)
    if args.out:
        atomic_write_text(args.out, text)
    print(text)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="gsmind", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", default=None, help="JSON config overriding defaults")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic bundle")
    p.add_argument("--spec", default=None, help="scene spec JSON (default: demo scene)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("map", help="build a map and scene graph from a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out-map", required=True)
    p.add_argument("--out-graph", default=None)
    p.add_argument("--iters", type=int, default=None, help="final optimization iterations")
    p.set_defaults(func=_cmd_map)

    p = sub.add_parser("update", help="apply dynamic updates from new frames")
    p.add_argument("--map", required=True)
    p.add_argument("--frames", required=True, help="bundle directory with update frames")
    p.add_argument("--frame", type=int, default=None, help="single frame index to apply")
    p.add_argument("--out-map", required=True)
    p.add_argument("--out-graph", default=None)
    p.add_argument("--out-report", default=None)
    p.add_argument("--pose-source", choices=("file", "mock", "url"), default="mock")
    p.add_argument("--pose-url", default=None)
    p.add_argument("--noise-trans", type=float, default=0.0, help="mock noise, meters")
    p.add_argument("--noise-rot", type=float, default=0.0, help="mock noise, degrees")
    p.set_defaults(func=_cmd_update)

    p = sub.add_parser("graph", help="build the scene graph JSON from a map")
    p.add_argument("--map", required=True)
    p.add_argument("--bundle", default=None, help="bundle for best-view crops")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov", type=float, default=70.0)
    p.set_defaults(func=_cmd_graph)

    p = sub.add_parser("ground", help="ground a language query")
    p.add_argument("--map", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--vlm", default="mock", help="mock | url | explicit endpoint")
    p.add_argument("--truth", default=None, help="truth.json for the mock text embedder")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", default="grounding.json")
    p.add_argument("--roi-dir", default=None)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov", type=float, default=70.0)
    p.set_defaults(func=_cmd_ground)

    p = sub.add_parser("render", help="render a map from a pose")
    p.add_argument("--map", required=True)
    p.add_argument("--pose", default=None, help="16 numbers, row-major camera-to-world")
    p.add_argument("--pose-file", default=None)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov", type=float, default=70.0)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="evaluate a map against a synthetic bundle")
    p.add_argument("--map", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--stride", type=int, default=10, help="evaluate every Nth frame")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (GsmindError, Exception) as exc:  # noqa: BLE001 - CLI boundary
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())
