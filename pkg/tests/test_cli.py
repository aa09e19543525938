"""CLI surface: exit codes and the synth -> map -> graph -> ground -> eval loop."""

from __future__ import annotations

import json
import os

import numpy as np
import pytest

from gsmind.cli import main
from gsmind.config import PipelineConfig


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Tiny scene driven entirely through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    spec = {
        "seed": 5,
        "room": [1.8, 1.2, 1.8],
        "objects": [
            {"shape": "box", "size": [0.5, 0.3, 0.4], "position": [0.9, 0.15, 0.9],
             "color": [0.55, 0.27, 0.07], "category": "table", "role": "Asset"},
            {"shape": "sphere", "size": [0.11], "position": [1.15, 0.41, 1.0],
             "color": [0.1, 0.35, 0.85], "category": "ball", "role": "Ordinary"},
        ],
        "n_frames": 10,
        "image_size": [40, 40],
        "feature_dim": 16,
    }
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec))
    config = {
        "voxel": {"resolution": 0.04},
        "optimizer": {"iters_per_keyframe": 10, "final_iters": 60},
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    return root, spec_path, config_path


def test_full_pipeline_exits_zero(cli_workspace, capsys):
    root, spec_path, config_path = cli_workspace
    bundle_dir = root / "bundle"
    map_path = root / "map.gsm"
    graph_path = root / "graph.json"

    assert main(["synth", "--spec", str(spec_path), "--out", str(bundle_dir)]) == 0
    assert (bundle_dir / "metadata.json").exists()

    assert main([
        "--config", str(config_path), "map",
        "--bundle", str(bundle_dir), "--out-map", str(map_path),
        "--out-graph", str(graph_path),
    ]) == 0
    assert map_path.exists() and graph_path.exists()

    assert main([
        "eval", "--map", str(map_path), "--bundle", str(bundle_dir),
        "--out", str(root / "metrics.json"),
    ]) == 0
    metrics = json.loads((root / "metrics.json").read_text())
    assert "segmentation" in metrics and "photometric" in metrics

    result_path = root / "ground.json"
    assert main([
        "ground", "--map", str(map_path), "--graph", str(graph_path),
        "--query", "the ball", "--truth", str(bundle_dir / "truth.json"),
        "--out", str(result_path), "--width", "40", "--height", "40",
    ]) == 0
    result = json.loads(result_path.read_text())
    graph = json.loads(graph_path.read_text())
    chosen = next(n for n in graph["nodes"] if n["id"] == result["instance_id"])
    assert chosen["category"] == "ball"

    # render from the first bundle pose
    pose_text = (bundle_dir / "frames" / "000000.pose.txt").read_text()
    assert main([
        "render", "--map", str(map_path), "--pose", pose_text,
        "--out-prefix", str(root / "render"), "--width", "40", "--height", "40",
    ]) == 0
    assert (root / "render.color.png").exists()
    assert (root / "render.depth.png").exists()


def test_update_subcommand(cli_workspace):
    root, spec_path, config_path = cli_workspace
    # mutate: drop the ball, re-render, then update the map from one frame
    from gsmind.synth import Edit, EditScript, mutate

    mutated_dir = root / "mutated"
    mutate(root / "bundle", EditScript(edits=[Edit("remove", label=2)]), mutated_dir)
    out_map = root / "updated.gsm"
    report_path = root / "report.json"
    code = main([
        "--config", str(config_path), "update",
        "--map", str(root / "map.gsm"), "--frames", str(mutated_dir),
        "--frame", "3", "--out-map", str(out_map),
        "--out-report", str(report_path),
        "--pose-source", "mock", "--noise-trans", "0.005", "--noise-rot", "0.5",
    ])
    assert code == 0
    report = json.loads(report_path.read_text())
    assert isinstance(report["removed"], list)


def test_unknown_flag_exits_one(capsys):
    assert main(["--bogus-flag"]) == 1

def test_unknown_command_exits_one():
    assert main(["frobnicate"]) == 1

def test_no_command_exits_one():
    assert main([]) == 1


def test_missing_map_is_data_error(tmp_path):
    code = main([
        "ground", "--map", str(tmp_path / "absent.gsm"),
        "--graph", str(tmp_path / "absent.json"), "--query", "the mug",
    ])
    assert code == 2


def test_bad_bundle_is_data_error(tmp_path):
    assert main(["map", "--bundle", str(tmp_path / "nope"), "--out-map", str(tmp_path / "m.gsm")]) == 2


def test_config_sections_validate():
    with pytest.raises(KeyError):
        PipelineConfig.from_dict({"nonexistent": {"a": 1}})
    with pytest.raises(KeyError):
        PipelineConfig.from_dict({"voxel": {"bogus_key": 1}})
    cfg = PipelineConfig.from_dict({"voxel": {"resolution": 0.07}})
    assert cfg.voxel.resolution == 0.07
    assert cfg.association.tau == 0.4
