"""External model interfaces: annotator, VLM, pose provider, embedders.

Every interface ships a wire-protocol HTTP client and a deterministic mock.
The mocks are pure functions of their inputs so the whole pipeline stays
reproducible offline; real deployments point the env vars at live services:

  GSMIND_ANNOTATOR_URL   annotator endpoint, JSON {image, prompt} in,
                         {category, caption, role} out
  GSMIND_VLM_URL/KEY/MODEL   chat-completions style endpoint with base64
                             images embedded in the message content
"""

from __future__ import annotations

import base64
import io
import json
import os
import re
import urllib.request

import numpy as np

from .geometry import Pose

ANNOTATOR_URL_ENV = "GSMIND_ANNOTATOR_URL"
VLM_URL_ENV = "GSMIND_VLM_URL"
VLM_KEY_ENV = "GSMIND_VLM_KEY"
VLM_MODEL_ENV = "GSMIND_VLM_MODEL"


def image_to_base64_png(image: np.ndarray) -> str:
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _post_json(url: str, payload: dict, headers: dict | None = None, timeout: float = 60.0) -> dict:
    data = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(url, data=data, method="POST")
    req.add_header("Content-Type", "application/json")
    for k, v in (headers or {}).items():
        req.add_header(k, v)
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode("utf-8"))


# -- annotator ------------------------------------------------------------


class HttpAnnotatorClient:
    """POST {image: base64, prompt} -> {category, caption, role}."""

    def __init__(self, url: str | None = None, timeout: float = 60.0):
        self.url = url or os.environ.get(ANNOTATOR_URL_ENV)
        if not self.url:
            raise ValueError(f"no annotator url; set {ANNOTATOR_URL_ENV}")
        self.timeout = timeout

    def annotate(self, crop: np.ndarray, mask: np.ndarray) -> tuple:
        reply = _post_json(
            self.url,
            {
                "image": image_to_base64_png(crop),
                "prompt": "Describe the masked object: category, caption, role.",
            },
            timeout=self.timeout,
        )
        return reply["category"], reply["caption"], reply["role"]


class MockAnnotator:
    """Deterministic annotator keyed by object color.

    `table` rows are (color, category, caption, role); the chromaticity
    (unit-normalized color) of the masked crop's mean picks the nearest
    entry, which makes the match invariant to shading. Pure function of its
    inputs.
    """

    def __init__(self, table):
        self.table = [
            (np.asarray(color, dtype=np.float64), str(cat), str(cap), str(role))
            for color, cat, cap, role in table
        ]

    @staticmethod
    def _chroma(color: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(color)
        return color / norm if norm > 0 else color

    def annotate(self, crop: np.ndarray, mask: np.ndarray) -> tuple:
        crop = np.asarray(crop, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if mask.any():
            mean = crop[mask].mean(axis=0)
        else:
            mean = crop.reshape(-1, 3).mean(axis=0)
        mean = self._chroma(mean)
        dists = [
            float(np.linalg.norm(mean - self._chroma(color)))
            for color, _, _, _ in self.table
        ]
        _, cat, cap, role = self.table[int(np.argmin(dists))]
        return cat, cap, role


# -- VLM -------------------------------------------------------------------


class HttpVlmClient:
    """Chat-completions style endpoint; images ride along as data URLs."""

    def __init__(self, url: str | None = None, api_key: str | None = None,
                 model: str | None = None, timeout: float = 120.0):
        self.url = url or os.environ.get(VLM_URL_ENV)
        if not self.url:
            raise ValueError(f"no VLM url; set {VLM_URL_ENV}")
        self.api_key = api_key or os.environ.get(VLM_KEY_ENV, "")
        self.model = model or os.environ.get(VLM_MODEL_ENV, "default")
        self.timeout = timeout

    def complete(self, prompt: str, images=()) -> str:
        content = [{"type": "text", "text": prompt}]
        for img in images:
            content.append(
                {
                    "type": "image_url",
                    "image_url": {"url": "data:image/png;base64," + image_to_base64_png(img)},
                }
            )
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        reply = _post_json(
            self.url,
            {"model": self.model, "messages": [{"role": "user", "content": content}]},
            headers=headers,
            timeout=self.timeout,
        )
        return reply["choices"][0]["message"]["content"]


class MockVlm:
    """Keyword reasoner over the scene-graph JSON embedded in the prompt.

    Parsing prompts get a JSON {target, anchors} reply built from category
    names found in the query. Grounding prompts get the candidate id whose
    category matches the target, disambiguated by distance to the anchor.
    Pure function of the prompt text and images.
    """

    def complete(self, prompt: str, images=()) -> str:
        graph = self._graph_from_prompt(prompt)
        query = self._field(prompt, "QUERY")
        if prompt.startswith("PARSE_QUERY"):
            return self._parse_reply(query, graph)
        if prompt.startswith("GROUND"):
            return self._ground_reply(prompt, query, graph)
        return ""

    @staticmethod
    def _field(prompt: str, name: str) -> str:
        m = re.search(rf"^{name}: (.*)$", prompt, flags=re.MULTILINE)
        return m.group(1) if m else ""

    @staticmethod
    def _graph_from_prompt(prompt: str):
        m = re.search(r"^GRAPH: (.*)$", prompt, flags=re.MULTILINE)
        if not m:
            return {"nodes": []}
        try:
            return json.loads(m.group(1))
        except json.JSONDecodeError:
            return {"nodes": []}

    @staticmethod
    def _categories_in_order(query: str, graph) -> list:
        cats = sorted({n["category"] for n in graph.get("nodes", [])})
        text = query.lower()
        hits = []
        for cat in cats:
            m = re.search(rf"\b{re.escape(cat.lower())}\b", text)
            if m:
                hits.append((m.start(), cat))
        hits.sort()
        out = []
        for _, cat in hits:
            if cat not in out:
                out.append(cat)
        return out

    def _parse_reply(self, query: str, graph) -> str:
        found = self._categories_in_order(query, graph)
        if not found:
            # fall back to the first noun-ish token so the reply stays valid
            tokens = re.findall(r"[a-zA-Z]+", query)
            target = tokens[-1] if tokens else ""
            return json.dumps({"target": target, "anchors": []})
        return json.dumps({"target": found[0], "anchors": found[1:]})

    def _ground_reply(self, prompt: str, query: str, graph) -> str:
        m = re.search(r"^CANDIDATES: (.*)$", prompt, flags=re.MULTILINE)
        if not m:
            return "none"
        candidates = [int(tok) for tok in re.findall(r"-?\d+", m.group(1))]
        nodes = {n["id"]: n for n in graph.get("nodes", [])}
        found = self._categories_in_order(query, graph)
        if not found:
            return "none"
        target_cat = found[0]
        anchor = None
        if len(found) > 1:
            anchors = [n for n in nodes.values() if n["category"] == found[1]]
            if anchors:
                anchor = min(anchors, key=lambda n: n["id"])
        matches = [
            cid for cid in candidates
            if cid in nodes and nodes[cid]["category"].lower() == target_cat.lower()
        ]
        if not matches:
            return "none"
        if anchor is not None and len(matches) > 1:
            matches.sort(
                key=lambda cid: (
                    float(np.linalg.norm(np.array(nodes[cid]["center"]) - np.array(anchor["center"]))),
                    cid,
                )
            )
        else:
            matches.sort()
        return str(matches[0])


# -- text embedding ---------------------------------------------------------


class MockTextEmbedder:
    """Category one-hot table: longest category name found in the text wins."""

    def __init__(self, category_features: dict):
        self.table = {
            str(k).lower(): np.asarray(v, dtype=np.float64) for k, v in category_features.items()
        }
        dims = {len(v) for v in self.table.values()}
        self.dim = dims.pop() if len(dims) == 1 else 0

    def embed(self, text: str) -> np.ndarray:
        text = text.lower()
        best = None
        for cat, vec in sorted(self.table.items(), key=lambda kv: (-len(kv[0]), kv[0])):
            if cat in text:
                best = vec
                break
        if best is None:
            return np.zeros(self.dim if self.dim else 1)
        return best.copy()


class ColorHistogramEmbedder:
    """Mock crop embedder: unit-norm 4x4x4 RGB histogram of masked pixels."""

    bins = 4

    def __call__(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        pixels = image[mask] if mask.any() else image.reshape(-1, 3)
        if len(pixels) == 0:
            return np.zeros(self.bins**3)
        q = np.clip((pixels * self.bins).astype(np.int64), 0, self.bins - 1)
        flat = q[:, 0] * self.bins**2 + q[:, 1] * self.bins + q[:, 2]
        hist = np.bincount(flat, minlength=self.bins**3).astype(np.float64)
        norm = np.linalg.norm(hist)
        return hist / norm if norm > 0 else hist


# -- pose providers ----------------------------------------------------------


class FilePoseProvider:
    """Reads `<frame_id:06d>.pose.txt` files (16 numbers, row-major c2w)."""

    def __init__(self, directory):
        self.directory = str(directory)

    def pose_for(self, frame) -> Pose:
        path = os.path.join(self.directory, f"{frame.frame_id:06d}.pose.txt")
        with open(path, "r", encoding="utf-8") as fh:
            return Pose.from_text(fh.read())


class MockPoseProvider:
    """Ground truth plus seeded Gaussian noise on translation and rotation."""

    def __init__(self, noise_trans: float = 0.0, noise_rot_deg: float = 0.0, seed: int = 0):
        self.noise_trans = float(noise_trans)
        self.noise_rot = float(np.radians(noise_rot_deg))
        self.rng = np.random.default_rng(seed)

    def pose_for(self, frame) -> Pose:
        pose = frame.pose
        if self.noise_trans == 0.0 and self.noise_rot == 0.0:
            return pose
        v = self.rng.normal(size=3)
        v = v / np.linalg.norm(v) * self.noise_trans
        axis = self.rng.normal(size=3)
        axis = axis / np.linalg.norm(axis) * self.noise_rot
        return Pose(pose.rotation, pose.translation).perturbed(v, axis)


class HttpPoseProvider:
    """POST {image: base64} -> {pose: [16 floats]} (external relocalizer)."""

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url
        self.timeout = timeout

    def pose_for(self, frame) -> Pose:
        reply = _post_json(
            self.url, {"image": image_to_base64_png(frame.color)}, timeout=self.timeout
        )
        return Pose.from_matrix(np.array(reply["pose"], dtype=np.float64).reshape(4, 4))
