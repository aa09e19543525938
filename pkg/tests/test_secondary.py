"""Secondary extractor-adapter contract: its bundles satisfy the primary loader.

Drives the TypeScript package under frontend/ through its CLI on a synthetic
5-frame recording and validates the output with the primary's own loader.
Skipped when node or the built adapter is unavailable.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import subprocess

import numpy as np
import pytest

from gsmind.bundle import load_bundle
from gsmind.fsio import atomic_write_bytes, atomic_write_text
from gsmind.geometry import Pose

FRONTEND = os.path.join(os.path.dirname(__file__), "..", "frontend")

VOCAB = [
    {"name": "mug", "color": [0.82, 0.12, 0.1]},
    {"name": "ball", "color": [0.1, 0.35, 0.85]},
]


def _node_available() -> bool:
    return shutil.which("node") is not None


def _built() -> bool:
    return os.path.exists(os.path.join(FRONTEND, "dist", "cli.js"))


def _ensure_built():
    if not _node_available():
        pytest.skip("node is not installed")
    if not _built():
        npm = shutil.which("npm")
        if npm is None:
            pytest.skip("npm is not installed and frontend/dist is missing")
        subprocess.run([npm, "run", "build"], cwd=FRONTEND, check=True,
                       capture_output=True, timeout=300)


def _write_png(path, array: np.ndarray):
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def write_recording(path, n_frames=5, size=40):
    """Flat-shaded recording with a mug disc and a ball disc per frame."""
    os.makedirs(path, exist_ok=True)
    meta = {
        "intrinsics": {"fx": 40.0, "fy": 40.0, "cx": 20.0, "cy": 20.0,
                       "width": size, "height": size},
        "depth_scale": 1000.0,
    }
    atomic_write_text(os.path.join(path, "recording.json"), json.dumps(meta))
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n_frames):
        color = np.full((size, size, 3), (0.7, 0.68, 0.64))
        depth = np.full((size, size), 2000, dtype=np.uint16)
        shade = 0.7 + 0.05 * i
        mug = (xx - (12 + i)) ** 2 + (yy - 14) ** 2 <= 6**2
        ball = (xx - 28) ** 2 + (yy - (24 - i)) ** 2 <= 5**2
        color[mug] = np.array(VOCAB[0]["color"]) * shade
        color[ball] = np.array(VOCAB[1]["color"]) * shade
        depth[mug | ball] = 1500
        _write_png(os.path.join(path, f"{i:06d}.color.png"),
                   (np.clip(color, 0, 1) * 255).round().astype(np.uint8))
        _write_png(os.path.join(path, f"{i:06d}.depth.png"), depth)
        atomic_write_text(os.path.join(path, f"{i:06d}.pose.txt"),
                          Pose.identity().to_text())


def run_extract(in_dir, out_dir, cfg_path):
    proc = subprocess.run(
        ["node", os.path.join(FRONTEND, "dist", "cli.js"), "extract",
         "--in", str(in_dir), "--out", str(out_dir), "--config", str(cfg_path)],
        capture_output=True, text=True, timeout=180,
    )
    assert proc.returncode == 0, proc.stderr
    return proc


def test_extractor_contract(tmp_path, caplog):
    """[SECONDARY] acceptance: bundle valid, features unit norm, cosines sane."""
    _ensure_built()
    rec = tmp_path / "recording"
    out = tmp_path / "bundle"
    write_recording(rec)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"vocabulary": VOCAB, "feature_dim": 64}))
    run_extract(rec, out, cfg_path)

    with caplog.at_level(logging.WARNING):
        bundle = load_bundle(out)
    warnings = [r for r in caplog.records if r.levelno >= logging.WARNING]
    assert not warnings, [r.message for r in warnings]
    assert bundle.meta.frame_count == 5

    # unit norms and per-frame instance coverage
    for i in range(5):
        frame = bundle.frame(i)
        assert len(frame.observations) == 2
        for obs in frame.observations:
            assert abs(np.linalg.norm(obs.feature) - 1.0) < 1e-3
        hints = sorted(o.class_hint for o in frame.observations)
        assert hints == ["ball", "mug"]

    # sanity fixture: same-object image-text cosine beats mismatched
    rows_path = tmp_path / "text.bin"
    proc = subprocess.run(
        ["node", os.path.join(FRONTEND, "dist", "cli.js"), "embed-text",
         "--config", str(cfg_path), "--words", "mug,ball", "--out", str(rows_path)],
        capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 0, proc.stderr
    text_rows = np.fromfile(rows_path, dtype="<f4").reshape(2, 64)
    frame = bundle.frame(0)
    by_hint = {o.class_hint: o.feature for o in frame.observations}
    same = by_hint["mug"] @ text_rows[0]
    mismatched = by_hint["mug"] @ text_rows[1]
    assert same > mismatched
    assert by_hint["ball"] @ text_rows[1] > by_hint["ball"] @ text_rows[0]
    print(f"[PASS] secondary-extractor-contract: 5 frames, 0 warnings, "
          f"same-cos {same:.3f} > cross-cos {mismatched:.3f}")


def test_extractor_empty_frame(tmp_path):
    """A frame with no detections still yields a loadable bundle."""
    _ensure_built()
    rec = tmp_path / "recording"
    os.makedirs(rec)
    meta = {"intrinsics": {"fx": 24.0, "fy": 24.0, "cx": 12.0, "cy": 12.0,
                           "width": 24, "height": 24}}
    atomic_write_text(os.path.join(rec, "recording.json"), json.dumps(meta))
    _write_png(os.path.join(rec, "000000.color.png"),
               np.full((24, 24, 3), 170, dtype=np.uint8))
    _write_png(os.path.join(rec, "000000.depth.png"),
               np.full((24, 24), 1800, dtype=np.uint16))
    atomic_write_text(os.path.join(rec, "000000.pose.txt"), Pose.identity().to_text())
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"vocabulary": VOCAB, "feature_dim": 64}))
    out = tmp_path / "bundle"
    run_extract(rec, out, cfg_path)
    bundle = load_bundle(out)
    frame = bundle.frame(0)
    assert frame.observations == []
    assert not frame.label_image.any()
