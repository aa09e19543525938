"""Cross-modal association of 2D instance observations to map instances.

Each observation is scored against the candidate instances found in its
back-projected voxels: probabilistic voxel overlap (S_geo), rendered-mask IoU
(S_iou, rendered from the candidate's own Gaussians only) and feature cosine
(S_sem), combined as 0.4 S_geo + 0.4 S_iou + 0.2 S_sem. The argmax candidate
wins when the joint score reaches tau, otherwise a new instance is spawned.
Fusion updates the instance feature as a visibility-weighted running average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyObservation, InconsistentRecord, ShapeMismatch, ZeroFeature
from .geometry import Intrinsics, Pose
from .mapstate import GaussianMap, InstanceRecord, ObservingView
from .observations import FrameObservation, InstanceObservation
from .renderer import render_instance_mask

LAMBDA_GEO = 0.4  # lambda1
LAMBDA_IOU = 0.4  # lambda2
LAMBDA_SEM = 0.2  # lambda3
DEFAULT_TAU = 0.4


@dataclass
class AssociationOutcome:
    matched: bool
    instance_id: int
    score: float = 0.0
    s_geo: float = 0.0
    s_iou: float = 0.0
    s_sem: float = 0.0


def sem_similarity(f: np.ndarray, F: np.ndarray) -> float:
    """Cosine similarity between an observation feature and a global one."""
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    F = np.asarray(F, dtype=np.float64).reshape(-1)
    nf = np.linalg.norm(f)
    nF = np.linalg.norm(F)
    if nf == 0 or nF == 0:
        raise ZeroFeature("cosine similarity of a zero vector")
    return float(f @ F / (nf * nF))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when the union is empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def joint_score(s_geo: float, s_iou: float, s_sem: float,
                weights: tuple = (LAMBDA_GEO, LAMBDA_IOU, LAMBDA_SEM)) -> float:
    return weights[0] * s_geo + weights[1] * s_iou + weights[2] * s_sem


MIN_OBSERVATION_AREA = 10  # px; smaller detections are noise, never spawned


def touches_border(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


class InstanceEngine:
    """Stateless-by-convention association/fusion logic over a GaussianMap."""

    def __init__(self, gmap: GaussianMap, K: Intrinsics, tau: float = DEFAULT_TAU,
                 weights: tuple = (LAMBDA_GEO, LAMBDA_IOU, LAMBDA_SEM),
                 min_area: int = MIN_OBSERVATION_AREA,
                 block_border_spawns: bool = True):
        self.map = gmap
        self.K = K
        self.tau = tau
        self.weights = weights
        self.min_area = min_area
        # border-truncated observations may fuse but never initialize an
        # instance: an object sliding into the frame would otherwise spawn a
        # fresh record per frame until its first sliver becomes matchable
        self.block_border_spawns = block_border_spawns

    def candidate_scores(self, obs: InstanceObservation, voxels, pose: Pose) -> dict:
        """Score every candidate instance found in the observation's voxels."""
        candidates = self.map.voxels.candidate_instances(voxels)
        scores = {}
        for iid in sorted(candidates):
            if iid not in self.map.records:
                continue
            s_geo = self.map.voxels.geo_similarity(voxels, iid)
            rendered = render_instance_mask(self.map, iid, pose, self.K)
            s_iou = mask_iou(rendered, obs.mask)
            s_sem = sem_similarity(obs.feature, self.map.records[iid].unit_feature())
            scores[iid] = (joint_score(s_geo, s_iou, s_sem, self.weights), s_geo, s_iou, s_sem)
        return scores

    def associate(self, obs: InstanceObservation, depth: np.ndarray, pose: Pose) -> AssociationOutcome:
        """Match the observation to the argmax candidate, or flag it new.

        Ties break toward the lower instance id. Raises EmptyObservation when
        no valid-depth pixel falls under the mask.
        """
        voxels = self.map.voxels.backproject_mask(obs.mask, depth, pose, self.K)
        if not voxels:
            raise EmptyObservation("no valid depth under the observation mask")
        scores = self.candidate_scores(obs, voxels, pose)
        if scores:
            best = min(scores.items(), key=lambda kv: (-kv[1][0], kv[0]))
            iid, (s, s_geo, s_iou, s_sem) = best
            if s >= self.tau:
                return AssociationOutcome(True, iid, s, s_geo, s_iou, s_sem)
        return AssociationOutcome(False, -1)

    def fuse(self, obs: InstanceObservation, instance_id: int, score: float,
             voxels=None, depth: np.ndarray | None = None, pose: Pose | None = None) -> float:
        """Weighted feature update (Eq. of the running average) plus voxel hits.

        w = (|V_i^t| / V_hat) * S; F <- (F W + f w) / (W + w); W <- W + w.
        Returns the applied weight w.
        """
        rec = self.map.records[instance_id]
        if voxels is None:
            voxels = self.map.voxels.backproject_mask(obs.mask, depth, pose, self.K)
        v_size = len(voxels)
        v_hat = self.map.voxels.instance_voxel_count(instance_id)
        if v_hat <= 0:
            raise InconsistentRecord(f"instance {instance_id} owns no voxels")
        w = (v_size / v_hat) * score
        rec.feature = (rec.feature * rec.weight + obs.feature * w) / (rec.weight + w)
        rec.weight += w
        self.map.voxels.record_hits(voxels, instance_id)
        if pose is not None:
            rec.views.append(
                ObservingView(obs.frame_id, pose, obs.area, int(obs.mask.size))
            )
        return w

    def spawn_instance(self, obs: InstanceObservation, depth: np.ndarray, pose: Pose,
                       voxels=None) -> InstanceRecord:
        """Create a fresh record seeded with the observation's feature."""
        if voxels is None:
            voxels = self.map.voxels.backproject_mask(obs.mask, depth, pose, self.K)
        iid = self.map.new_instance_id()
        rec = InstanceRecord(id=iid, feature=obs.feature.copy(), weight=1.0)
        rec.views.append(ObservingView(obs.frame_id, pose, obs.area, int(obs.mask.size)))
        self.map.records[iid] = rec
        self.map.voxels.record_hits(voxels, iid)
        return rec

    def process_frame(self, frame: FrameObservation) -> list:
        """Associate then fuse-or-spawn every observation of a frame.

        Observations are processed in descending mask-area order so large
        objects claim voxels first. Per-observation errors are recorded as
        unmatched outcomes without aborting the frame. The frame must already
        be integrated into the voxel map.
        """
        order = sorted(
            range(len(frame.observations)),
            key=lambda i: (-frame.observations[i].area, i),
        )
        outcomes: list[AssociationOutcome | None] = [None] * len(frame.observations)
        for i in order:
            obs = frame.observations[i]
            if obs.area < self.min_area:
                outcomes[i] = AssociationOutcome(False, -1)
                continue
            try:
                voxels = self.map.voxels.backproject_mask(obs.mask, frame.depth, frame.pose, self.K)
                if not voxels:
                    raise EmptyObservation("no valid depth under the observation mask")
                scores = self.candidate_scores(obs, voxels, frame.pose)
                outcome = AssociationOutcome(False, -1)
                if scores:
                    best = min(scores.items(), key=lambda kv: (-kv[1][0], kv[0]))
                    iid, (s, s_geo, s_iou, s_sem) = best
                    if s >= self.tau:
                        outcome = AssociationOutcome(True, iid, s, s_geo, s_iou, s_sem)
                if outcome.matched:
                    self.fuse(obs, outcome.instance_id, outcome.score,
                              voxels=voxels, pose=frame.pose)
                elif self.block_border_spawns and touches_border(obs.mask):
                    pass  # clipped first sighting; wait for a full view
                else:
                    rec = self.spawn_instance(obs, frame.depth, frame.pose, voxels=voxels)
                    outcome = AssociationOutcome(False, rec.id)
                outcomes[i] = outcome
            except EmptyObservation:
                outcomes[i] = AssociationOutcome(False, -1)
        return outcomes
