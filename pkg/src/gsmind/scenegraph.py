"""Hierarchical scene graph over map instances.

Nodes carry center, bbox, category, caption, best view and one functional
role (Asset / Ordinary / Standalone). Assets and Standalones hang off the
virtual root; Ordinary nodes attach to the supporting or containing Asset
with the strongest predicate score, falling back to the root. The vertical
axis for support tests is +y (up).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import (
    AnnotationInvalid,
    AnnotationUnavailable,
    EmptyInstance,
    NoObservations,
)
from .geometry import Intrinsics, Pose, NEAR_PLANE
from .mapstate import GaussianMap, ObservingView
from .renderer import render_instance_mask

logger = logging.getLogger(__name__)

ROLES = ("Asset", "Ordinary", "Standalone")
ROOT_ID = -1
TOP_K_VIEWS = 5
SUPPORT_FOOTPRINT_IOU = 0.3
SUPPORT_BAND = (-0.02, 0.10)  # m, bottom-of-b relative to top-of-a
CONTAINMENT_FRACTION = 0.9
UP_AXIS = 1  # +y up


@dataclass
class SceneNode:
    id: int
    center: np.ndarray  # (3,)
    bbox_min: np.ndarray  # (3,)
    bbox_max: np.ndarray  # (3,)
    category: str = "unknown"
    caption: str = ""
    role: str = "Standalone"
    best_view_frame: int = -1
    best_view_pose: Pose | None = None
    parent: int = ROOT_ID
    relation: str = "root-link"
    feature: np.ndarray | None = None  # fused instance feature for retrieval


@dataclass
class SceneGraph:
    nodes: dict = dataclass_field(default_factory=dict)  # id -> SceneNode
    edges: list = dataclass_field(default_factory=list)  # (parent, child, relation)

    def children(self, node_id: int) -> list:
        return sorted(child for parent, child, _ in self.edges if parent == node_id)

    def is_acyclic_and_rooted(self) -> bool:
        """Every node reachable from the root exactly once, no cycles."""
        seen: set[int] = set()
        frontier = [ROOT_ID]
        while frontier:
            nid = frontier.pop()
            for child in self.children(nid):
                if child in seen:
                    return False
                seen.add(child)
                frontier.append(child)
        return seen == set(self.nodes)


def node_geometry(gmap: GaussianMap, instance_id: int) -> tuple:
    """(center, bbox_min, bbox_max): Gaussian-center mean and 2-sigma AABB."""
    ids = gmap.alive_instance_gaussians(instance_id)
    if len(ids) == 0:
        raise EmptyInstance(f"instance {instance_id} owns no gaussians")
    centers = gmap.gaussians.centers[ids]
    cov = gmap.gaussians.covariances()[ids]
    extent = 2.0 * np.sqrt(np.maximum(np.diagonal(cov, axis1=1, axis2=2), 0.0))
    return (
        centers.mean(axis=0),
        (centers - extent).min(axis=0),
        (centers + extent).max(axis=0),
    )


def view_quality(gmap: GaussianMap, K: Intrinsics, view: ObservingView,
                 instance_id: int) -> float:
    """Mask-coverage fraction times visible-Gaussian fraction."""
    ids = gmap.alive_instance_gaussians(instance_id)
    if len(ids) == 0:
        raise EmptyInstance(f"instance {instance_id} owns no gaussians")
    p_cam = (gmap.gaussians.centers[ids] - view.pose.translation) @ view.pose.rotation
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = K.fx * p_cam[:, 0] / z + K.cx
        py = K.fy * p_cam[:, 1] / z + K.cy
    visible = (z > NEAR_PLANE) & (px >= 0) & (px < K.width) & (py >= 0) & (py < K.height)
    mask_frac = view.mask_pixels / max(view.image_pixels, 1)
    return float(mask_frac * np.count_nonzero(visible) / len(ids))


def best_view(gmap: GaussianMap, K: Intrinsics, instance_id: int) -> ObservingView:
    """Argmax view quality among the top-K views nearest the view centroid."""
    rec = gmap.records[instance_id]
    if not rec.views:
        raise NoObservations(f"instance {instance_id} was never observed")
    positions = np.array([v.pose.translation for v in rec.views])
    centroid = positions.mean(axis=0)
    dist = np.linalg.norm(positions - centroid, axis=1)
    candidates = np.argsort(dist, kind="stable")[:TOP_K_VIEWS]
    best = None
    best_q = -1.0
    for i in sorted(candidates.tolist()):
        view = rec.views[i]
        q = view_quality(gmap, K, view, instance_id)
        if q > best_q or (q == best_q and best is not None and view.frame_id < best.frame_id):
            best, best_q = view, q
    return best


def annotate(gmap: GaussianMap, K: Intrinsics, instance_id: int, client,
             frame_loader, view: ObservingView) -> tuple:
    """(category, caption, role) from the annotator on the best-view crop.

    Client failures degrade to ("unknown", "", "Standalone"); a syntactically
    invalid role raises AnnotationInvalid.
    """
    try:
        color = frame_loader(view.frame_id)
        mask = render_instance_mask(gmap, instance_id, view.pose, K)
        if not mask.any():
            raise AnnotationUnavailable("instance renders to an empty mask")
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        crop = color[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        crop_mask = mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        category, caption, role = client.annotate(crop, crop_mask)
    except AnnotationInvalid:
        raise
    except Exception as exc:
        logger.warning("annotation unavailable for instance %d: %s", instance_id, exc)
        return "unknown", "", "Standalone"
    if role not in ROLES:
        raise AnnotationInvalid(f"role {role!r} not in {ROLES}")
    return str(category), str(caption), role


def _footprint_iou(a: SceneNode, b: SceneNode) -> float:
    axes = [i for i in range(3) if i != UP_AXIS]
    inter = 1.0
    area_a = 1.0
    area_b = 1.0
    for ax in axes:
        lo = max(a.bbox_min[ax], b.bbox_min[ax])
        hi = min(a.bbox_max[ax], b.bbox_max[ax])
        inter *= max(0.0, hi - lo)
        area_a *= max(0.0, a.bbox_max[ax] - a.bbox_min[ax])
        area_b *= max(0.0, b.bbox_max[ax] - b.bbox_min[ax])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def _contained_fraction(a: SceneNode, b: SceneNode) -> float:
    """Fraction of b's bbox volume inside a's bbox."""
    inter = 1.0
    vol_b = 1.0
    for ax in range(3):
        lo = max(a.bbox_min[ax], b.bbox_min[ax])
        hi = min(a.bbox_max[ax], b.bbox_max[ax])
        inter *= max(0.0, hi - lo)
        vol_b *= max(0.0, b.bbox_max[ax] - b.bbox_min[ax])
    return inter / vol_b if vol_b > 0 else 0.0


def infer_edges(nodes) -> list:
    """Directed predicate hits (a, b, relation, strength), deterministic order."""
    nodes = sorted(nodes, key=lambda n: n.id)
    out = []
    for a in nodes:
        for b in nodes:
            if a.id == b.id:
                continue
            iou = _footprint_iou(a, b)
            gap = b.bbox_min[UP_AXIS] - a.bbox_max[UP_AXIS]
            if iou > SUPPORT_FOOTPRINT_IOU and SUPPORT_BAND[0] <= gap <= SUPPORT_BAND[1]:
                out.append((a.id, b.id, "supports", iou))
            frac = _contained_fraction(a, b)
            if frac >= CONTAINMENT_FRACTION:
                out.append((a.id, b.id, "contains", frac))
    return out


def build_hierarchy(nodes, predicate_edges) -> SceneGraph:
    """Assets/Standalones under the root; Ordinary under its best Asset."""
    graph = SceneGraph()
    by_id = {n.id: n for n in nodes}
    for n in sorted(nodes, key=lambda n: n.id):
        graph.nodes[n.id] = n
    for n in sorted(nodes, key=lambda n: n.id):
        if n.role in ("Asset", "Standalone"):
            n.parent, n.relation = ROOT_ID, "root-link"
        else:
            best = None
            for a_id, b_id, relation, strength in predicate_edges:
                if b_id != n.id:
                    continue
                parent = by_id.get(a_id)
                if parent is None or parent.role != "Asset":
                    continue
                if best is None or strength > best[2]:
                    best = (a_id, relation, strength)
            if best is None:
                n.parent, n.relation = ROOT_ID, "root-link"
            else:
                n.parent, n.relation = best[0], best[1]
        graph.edges.append((n.parent, n.id, n.relation))
    return graph


class GraphBuilder:
    """Builds and synchronizes the scene graph against a GaussianMap."""

    def __init__(self, gmap: GaussianMap, K: Intrinsics, annotator, frame_loader):
        self.map = gmap
        self.K = K
        self.annotator = annotator
        self.frame_loader = frame_loader

    def make_node(self, instance_id: int) -> SceneNode:
        center, bb_min, bb_max = node_geometry(self.map, instance_id)
        view = best_view(self.map, self.K, instance_id)
        category, caption, role = annotate(
            self.map, self.K, instance_id, self.annotator, self.frame_loader, view
        )
        return SceneNode(
            id=instance_id,
            center=center,
            bbox_min=bb_min,
            bbox_max=bb_max,
            category=category,
            caption=caption,
            role=role,
            best_view_frame=view.frame_id,
            best_view_pose=view.pose,
            feature=self.map.records[instance_id].unit_feature(),
        )

    def build(self) -> SceneGraph:
        nodes = []
        for iid in sorted(self.map.records):
            try:
                nodes.append(self.make_node(iid))
            except (EmptyInstance, NoObservations) as exc:
                logger.warning("skipping instance %d in graph: %s", iid, exc)
        return build_hierarchy(nodes, infer_edges(nodes))

    def sync(self, graph: SceneGraph, report) -> SceneGraph:
        """Apply a ChangeReport: delete removed subtrees, insert new nodes."""
        for iid in report.removed:
            node = graph.nodes.get(iid)
            if node is None:
                continue
            doomed = {iid}
            if node.role == "Asset":
                frontier = [iid]
                while frontier:
                    cur = frontier.pop()
                    for child in graph.children(cur):
                        doomed.add(child)
                        frontier.append(child)
            for dead in doomed:
                graph.nodes.pop(dead, None)
            graph.edges = [
                (p, c, r) for p, c, r in graph.edges if p not in doomed and c not in doomed
            ]
        # orphaned Ordinary nodes (parent vanished for non-Asset removals) re-root
        for node in graph.nodes.values():
            if node.parent != ROOT_ID and node.parent not in graph.nodes:
                graph.edges = [(p, c, r) for p, c, r in graph.edges if c != node.id]
                node.parent, node.relation = ROOT_ID, "root-link"
                graph.edges.append((ROOT_ID, node.id, "root-link"))

        for iid in report.new:
            if iid not in self.map.records:
                continue
            node = self.make_node(iid)
            existing = [n for n in graph.nodes.values() if n.id != node.id]
            pred = infer_edges(existing + [node])
            if node.role in ("Asset", "Standalone"):
                node.parent, node.relation = ROOT_ID, "root-link"
            else:
                best = None
                for a_id, b_id, relation, strength in pred:
                    if b_id != node.id:
                        continue
                    parent = graph.nodes.get(a_id)
                    if parent is None or parent.role != "Asset":
                        continue
                    if best is None or strength > best[2]:
                        best = (a_id, relation, strength)
                node.parent, node.relation = (best[0], best[1]) if best else (ROOT_ID, "root-link")
            graph.nodes[node.id] = node
            graph.edges.append((node.parent, node.id, node.relation))
        return graph


def to_json(graph: SceneGraph) -> str:
    """Deterministic sorted-key serialization; round-trips via from_json."""
    nodes = []
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        nodes.append(
            {
                "id": int(n.id),
                "center": [float(v) for v in n.center],
                "bbox": {
                    "min": [float(v) for v in n.bbox_min],
                    "max": [float(v) for v in n.bbox_max],
                },
                "category": n.category,
                "caption": n.caption,
                "role": n.role,
                "parent": int(n.parent),
                "relation": n.relation,
                "best_view": {
                    "frame": int(n.best_view_frame),
                    "pose": (
                        [float(v) for v in n.best_view_pose.matrix().reshape(-1)]
                        if n.best_view_pose is not None
                        else None
                    ),
                },
                "feature": (
                    [float(v) for v in n.feature] if n.feature is not None else None
                ),
            }
        )
    edges = [
        {"parent": int(p), "child": int(c), "relation": r}
        for p, c, r in sorted(graph.edges, key=lambda e: (e[0], e[1], e[2]))
    ]
    doc = {"root": ROOT_ID, "nodes": nodes, "edges": edges}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def from_json(text: str) -> SceneGraph:
    doc = json.loads(text)
    graph = SceneGraph()
    for nd in doc["nodes"]:
        pose = None
        if nd["best_view"]["pose"] is not None:
            pose = Pose.from_matrix(np.array(nd["best_view"]["pose"]).reshape(4, 4))
        graph.nodes[nd["id"]] = SceneNode(
            id=nd["id"],
            center=np.array(nd["center"]),
            bbox_min=np.array(nd["bbox"]["min"]),
            bbox_max=np.array(nd["bbox"]["max"]),
            category=nd["category"],
            caption=nd["caption"],
            role=nd["role"],
            best_view_frame=nd["best_view"]["frame"],
            best_view_pose=pose,
            parent=nd["parent"],
            relation=nd["relation"],
            feature=np.array(nd["feature"]) if nd["feature"] is not None else None,
        )
    graph.edges = [(e["parent"], e["child"], e["relation"]) for e in doc["edges"]]
    return graph
