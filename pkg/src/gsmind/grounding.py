"""Zero-shot grounding over rendered RoI views.

A language query is parsed into target and anchor descriptions against the
serialized scene graph, candidates are retrieved by feature cosine, and each
target candidate gets a relation-aware RoI render: camera at the candidate's
best-view position, re-aimed at the target-anchor midpoint with a widened
field of view, candidate boxes drawn with numeric id overlays. One VLM call
over all RoI images plus the graph JSON picks the final instance id.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateLookAt,
    EmptyScene,
    GroundingFailure,
    ParseFailure,
    RoiUnrenderable,
)
from .geometry import Intrinsics, Pose, look_at, project_point
from .mapstate import GaussianMap
from .renderer import render_frame
from .scenegraph import SceneGraph, SceneNode, to_json

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 5
FOV_WIDEN_STEPS = (1.3, 1.475, 1.65, 1.825, 2.0)
MAX_VLM_RETRIES = 2

_BOX_EDGES = (
    (0, 1), (0, 2), (1, 3), (2, 3),
    (4, 5), (4, 6), (5, 7), (6, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
)
_BOX_COLORS = ((255, 64, 64), (64, 160, 255), (64, 220, 96), (255, 200, 64), (210, 90, 240))


@dataclass
class ParsedQuery:
    target: str
    anchors: list = dataclass_field(default_factory=list)
    raw: str = ""


@dataclass
class GroundingResult:
    instance_id: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    candidates: list
    raw_reply: str = ""
    roi_images: list = dataclass_field(default_factory=list)
    roi_paths: list = dataclass_field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "instance_id": int(self.instance_id),
            "bbox": {
                "min": [float(v) for v in self.bbox_min],
                "max": [float(v) for v in self.bbox_max],
            },
            "candidates": [int(c) for c in self.candidates],
            "raw_reply": self.raw_reply,
            "roi_paths": list(self.roi_paths),
        }


def parse_query(text: str, graph_json: str, client) -> ParsedQuery:
    """Target and anchor descriptions via the VLM parser.

    The serialized graph rides along as structured context. Retries twice on
    malformed replies before raising ParseFailure.
    """
    if not text or not text.strip():
        raise ValueError("empty query")
    prompt = f"PARSE_QUERY\nQUERY: {text}\nGRAPH: {graph_json}\n" \
             "Reply with JSON {\"target\": str, \"anchors\": [str]}."
    last = ""
    for _ in range(MAX_VLM_RETRIES + 1):
        last = client.complete(prompt, [])
        try:
            doc = json.loads(last)
            target = str(doc["target"]).strip()
            anchors = [str(a).strip() for a in doc.get("anchors", [])]
            if target:
                return ParsedQuery(target=target, anchors=[a for a in anchors if a], raw=text)
        except (json.JSONDecodeError, KeyError, TypeError):
            pass
    raise ParseFailure(f"unparseable parser reply: {last!r}")


def retrieve(description: str, graph: SceneGraph, k: int, embedder) -> list:
    """Top-k nodes by cosine between the text embedding and stored features."""
    if not graph.nodes:
        raise EmptyScene("scene graph has no nodes")
    query = np.asarray(embedder.embed(description), dtype=np.float64)
    qn = np.linalg.norm(query)
    scored = []
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        if node.feature is None:
            scored.append((0.0, nid))
            continue
        fn = np.linalg.norm(node.feature)
        if qn == 0 or fn == 0 or len(node.feature) != len(query):
            scored.append((0.0, nid))
        else:
            scored.append((float(query @ node.feature / (qn * fn)), nid))
    scored.sort(key=lambda sv: (-sv[0], sv[1]))
    return [graph.nodes[nid] for _, nid in scored[:k]]


def _bbox_corners(node: SceneNode) -> np.ndarray:
    lo, hi = node.bbox_min, node.bbox_max
    return np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )


def _visible_corners(node: SceneNode, pose: Pose, K: Intrinsics) -> list:
    pts = []
    for corner in _bbox_corners(node):
        try:
            px = project_point(corner, pose, K)
        except BehindCamera:
            continue
        pts.append(px)
    return pts


def _any_corner_in_frame(node: SceneNode, pose: Pose, K: Intrinsics) -> bool:
    for px in _visible_corners(node, pose, K):
        if 0 <= px[0] < K.width and 0 <= px[1] < K.height:
            return True
    return False


def _draw_annotations(image: np.ndarray, boxes: list, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Wireframe bbox overlays with id labels at the visual centers."""
    from PIL import Image, ImageDraw

    img = Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for i, node in enumerate(boxes):
        color = _BOX_COLORS[i % len(_BOX_COLORS)]
        corners = _bbox_corners(node)
        projected = {}
        for ci, corner in enumerate(corners):
            try:
                projected[ci] = project_point(corner, pose, K)
            except BehindCamera:
                continue
        for a, b in _BOX_EDGES:
            if a in projected and b in projected:
                draw.line(
                    [tuple(projected[a]), tuple(projected[b])], fill=color, width=1
                )
        visible = [
            p for p in projected.values()
            if 0 <= p[0] < K.width and 0 <= p[1] < K.height
        ]
        if visible:
            cx, cy = np.mean(visible, axis=0)
            label = str(node.id)
            tw = 6 * len(label) + 4
            draw.rectangle([cx - tw / 2, cy - 7, cx + tw / 2, cy + 7], fill=(0, 0, 0))
            draw.text((cx - tw / 2 + 2, cy - 6), label, fill=(255, 255, 255))
    return np.asarray(img)


def roi_render(gmap: GaussianMap, K: Intrinsics, target: SceneNode,
               anchor: SceneNode | None = None, extra_boxes=()) -> tuple:
    """Annotated RoI view framing target (and anchor) with id overlays.

    The camera sits at the target's best-view position, re-aimed at the
    midpoint of the target and anchor centers; the field of view widens
    stepwise until both boxes are at least partially in frame.
    """
    if target.best_view_pose is None:
        raise RoiUnrenderable(f"node {target.id} has no best view")
    eye = target.best_view_pose.translation
    aim = target.center if anchor is None else 0.5 * (target.center + anchor.center)
    try:
        pose = look_at(eye, aim, np.array([0.0, 1.0, 0.0]))
    except DegenerateLookAt:
        try:
            pose = look_at(eye, aim, np.array([0.0, 0.0, 1.0]))
        except DegenerateLookAt as exc:
            raise RoiUnrenderable(f"cannot aim at node {target.id}: {exc}") from exc

    boxes = [target] + ([anchor] if anchor is not None else [])
    boxes += [b for b in extra_boxes if b.id not in {n.id for n in boxes}]
    chosen = None
    for factor in FOV_WIDEN_STEPS:
        K_wide = K.widened(factor)
        if all(_any_corner_in_frame(node, pose, K_wide) for node in boxes[: 2 if anchor else 1]):
            chosen = K_wide
            break
    if chosen is None:
        K_max = K.widened(FOV_WIDEN_STEPS[-1])
        if not _any_corner_in_frame(target, pose, K_max):
            raise RoiUnrenderable(f"target {target.id} not visible at maximum field of view")
        chosen = K_max

    out = render_frame(gmap.gaussians, pose, chosen)
    annotated = _draw_annotations(out.color, boxes, pose, chosen)
    return annotated, {node.id: node for node in boxes}, pose, chosen


def ground(query: str, gmap: GaussianMap, graph: SceneGraph, client, embedder,
           K: Intrinsics, k: int = DEFAULT_TOP_K) -> GroundingResult:
    """Full grounding pipeline: parse, retrieve, RoI render, one VLM call."""
    graph_json = to_json(graph)
    parsed = parse_query(query, graph_json, client)
    target_candidates = retrieve(parsed.target, graph, k, embedder)
    anchor = None
    if parsed.anchors:
        anchor = retrieve(parsed.anchors[0], graph, 1, embedder)[0]

    images = []
    candidate_ids = []
    for cand in target_candidates:
        try:
            annotated, _, _, _ = roi_render(gmap, K, cand, anchor)
        except RoiUnrenderable:
            continue
        images.append(annotated)
        candidate_ids.append(cand.id)
    if not candidate_ids:
        raise GroundingFailure("no candidate could be rendered")

    prompt = (
        "GROUND\n"
        f"QUERY: {query}\n"
        f"GRAPH: {graph_json}\n"
        f"CANDIDATES: {candidate_ids}\n"
        "Each attached image shows one candidate (and the anchor) with numeric instance ids. "
        "Reply with exactly one numeric id from CANDIDATES."
    )
    last = ""
    for _ in range(MAX_VLM_RETRIES + 1):
        last = client.complete(prompt, images)
        m = re.search(r"-?\d+", last)
        if m:
            chosen = int(m.group(0))
            if chosen in candidate_ids:
                node = graph.nodes[chosen]
                return GroundingResult(
                    instance_id=chosen,
                    bbox_min=node.bbox_min.copy(),
                    bbox_max=node.bbox_max.copy(),
                    candidates=candidate_ids,
                    raw_reply=last,
                    roi_images=images,
                )
    raise GroundingFailure(f"VLM reply {last!r} names no candidate id")
