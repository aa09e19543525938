"""Mock client behaviors plus the HTTP wire protocols against a live thread server."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from gsmind.clients import (
    ColorHistogramEmbedder,
    HttpAnnotatorClient,
    HttpPoseProvider,
    HttpVlmClient,
    MockAnnotator,
    MockPoseProvider,
    MockTextEmbedder,
    MockVlm,
)
from gsmind.geometry import Pose
from gsmind.observations import FrameObservation


class TestMockAnnotator:
    TABLE = [
        ((0.8, 0.1, 0.1), "mug", "a red mug", "Ordinary"),
        ((0.1, 0.1, 0.8), "ball", "a blue ball", "Standalone"),
    ]

    def test_picks_nearest_chromaticity(self):
        client = MockAnnotator(self.TABLE)
        crop = np.full((6, 6, 3), (0.7, 0.12, 0.12))
        mask = np.ones((6, 6), bool)
        assert client.annotate(crop, mask)[0] == "mug"

    def test_shading_invariant(self):
        client = MockAnnotator(self.TABLE)
        mask = np.ones((4, 4), bool)
        dim = np.full((4, 4, 3), np.array([0.8, 0.1, 0.1]) * 0.6)
        assert client.annotate(dim, mask)[0] == "mug"

    def test_pure_function(self):
        client = MockAnnotator(self.TABLE)
        crop = np.random.default_rng(0).random((5, 5, 3))
        mask = np.ones((5, 5), bool)
        assert client.annotate(crop, mask) == client.annotate(crop.copy(), mask.copy())


class TestMockVlm:
    GRAPH = json.dumps(
        {
            "nodes": [
                {"id": 0, "category": "mug", "center": [0, 0, 0]},
                {"id": 1, "category": "mug", "center": [2, 0, 0]},
                {"id": 2, "category": "desk", "center": [2.2, 0, 0]},
            ]
        }
    )

    def test_parse_extracts_target_and_anchor(self):
        reply = MockVlm().complete(f"PARSE_QUERY\nQUERY: the mug on the desk\nGRAPH: {self.GRAPH}\n")
        doc = json.loads(reply)
        assert doc == {"target": "mug", "anchors": ["desk"]}

    def test_ground_prefers_anchor_proximity(self):
        prompt = (
            "GROUND\nQUERY: the mug on the desk\n"
            f"GRAPH: {self.GRAPH}\nCANDIDATES: [0, 1]\nreply with one id"
        )
        # mug 1 sits next to the desk at (2.2, 0, 0)
        assert MockVlm().complete(prompt) == "1"

    def test_ground_without_match_says_none(self):
        prompt = f"GROUND\nQUERY: the xylophone\nGRAPH: {self.GRAPH}\nCANDIDATES: [0, 1]\n"
        assert MockVlm().complete(prompt) == "none"


class TestEmbedders:
    def test_text_embedder_longest_match(self):
        table = {"mug": np.eye(3)[0], "coffee mug": np.eye(3)[1]}
        emb = MockTextEmbedder(table)
        np.testing.assert_array_equal(emb.embed("the coffee mug there"), np.eye(3)[1])
        np.testing.assert_array_equal(emb.embed("a mug"), np.eye(3)[0])

    def test_text_embedder_unknown_is_zero(self):
        emb = MockTextEmbedder({"mug": np.eye(2)[0]})
        assert not emb.embed("spaceship").any()

    def test_histogram_unit_norm(self):
        emb = ColorHistogramEmbedder()
        rng = np.random.default_rng(0)
        vec = emb(rng.random((8, 8, 3)), np.ones((8, 8), bool))
        assert np.linalg.norm(vec) == pytest.approx(1.0)

    def test_histogram_same_colors_align(self):
        emb = ColorHistogramEmbedder()
        img = np.full((6, 6, 3), (0.8, 0.1, 0.1))
        mask = np.ones((6, 6), bool)
        a = emb(img, mask)
        b = emb(img * 0.999, mask)
        assert a @ b == pytest.approx(1.0)


class TestPoseProviders:
    def _frame(self, pose=None):
        return FrameObservation(0, np.zeros((4, 4, 3)), np.ones((4, 4)),
                                pose or Pose.identity())

    def test_mock_zero_noise_returns_gt(self):
        provider = MockPoseProvider()
        frame = self._frame()
        np.testing.assert_array_equal(provider.pose_for(frame).matrix(), np.eye(4))

    def test_mock_noise_magnitudes(self):
        provider = MockPoseProvider(noise_trans=0.05, noise_rot_deg=5.0, seed=3)
        frame = self._frame()
        noisy = provider.pose_for(frame)
        assert np.linalg.norm(noisy.translation) == pytest.approx(0.05)
        ang = np.degrees(np.arccos(np.clip((np.trace(noisy.rotation) - 1) / 2, -1, 1)))
        assert ang == pytest.approx(5.0, abs=1e-6)

    def test_file_provider_roundtrip(self, tmp_path):
        from gsmind.clients import FilePoseProvider

        pose = Pose(np.eye(3), [1.0, 2.0, 3.0])
        (tmp_path / "000007.pose.txt").write_text(pose.to_text())
        frame = self._frame()
        frame.frame_id = 7
        loaded = FilePoseProvider(tmp_path).pose_for(frame)
        np.testing.assert_array_equal(loaded.matrix(), pose.matrix())


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        if self.path == "/annotate":
            reply = {"category": "chair", "caption": "a chair", "role": "Ordinary"}
            assert "image" in body and "prompt" in body
        elif self.path == "/vlm":
            n_images = sum(
                1 for part in body["messages"][0]["content"] if part["type"] == "image_url"
            )
            reply = {"choices": [{"message": {"content": f"saw {n_images} images"}}]}
        else:  # pose
            reply = {"pose": list(np.eye(4).reshape(-1))}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture(scope="module")
def http_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


class TestWireProtocols:
    def test_annotator_roundtrip(self, http_server):
        client = HttpAnnotatorClient(url=http_server + "/annotate")
        out = client.annotate(np.zeros((4, 4, 3)), np.ones((4, 4), bool))
        assert out == ("chair", "a chair", "Ordinary")

    def test_vlm_roundtrip_with_images(self, http_server):
        client = HttpVlmClient(url=http_server + "/vlm", model="test")
        reply = client.complete("hello", [np.zeros((4, 4, 3)), np.ones((4, 4, 3))])
        assert reply == "saw 2 images"

    def test_pose_provider_roundtrip(self, http_server):
        provider = HttpPoseProvider(http_server + "/pose")
        frame = FrameObservation(0, np.zeros((4, 4, 3)), np.ones((4, 4)), Pose.identity())
        np.testing.assert_array_equal(provider.pose_for(frame).matrix(), np.eye(4))

    def test_missing_env_raises(self, monkeypatch):
        monkeypatch.delenv("GSMIND_ANNOTATOR_URL", raising=False)
        with pytest.raises(ValueError):
            HttpAnnotatorClient()
