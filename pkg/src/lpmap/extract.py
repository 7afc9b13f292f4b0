"""From labeled point clouds and odometry to keyframes and landmarks.

Pole points are clustered (DBSCAN) and fit as line segments; planar labels
are voxelized and each dense voxel is PCA-checked for a plane patch, kept as
a rhombus of terminal points. Per-keyframe observations are associated into
persistent landmarks by centroid nearest-neighbor search, and every landmark
keeps its minimal parameter block consistent with its point-normal form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import DBSCAN

from . import geom
from .config import LINE_LABELS, PLANE_LABELS, PipelineConfig
from .errors import EmptyStream, NotLinear, SingularDirection


@dataclass
class LabeledCloud:
    points: np.ndarray          # (N, 3) meters
    labels: list[str]           # semantic category per point

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels must have equal length")

    def subset(self, category: str) -> np.ndarray:
        mask = np.array([l == category for l in self.labels], dtype=bool)
        return self.points[mask] if mask.size else self.points[:0]


@dataclass
class LineObservation:
    label: str
    p_a: np.ndarray
    p_b: np.ndarray


@dataclass
class PlaneObservation:
    label: str
    centroid: np.ndarray
    terminals: np.ndarray       # (4, 3): centroid +-2s1 v1, +-2s2 v2


@dataclass
class Keyframe:
    id: int
    pose: geom.RigidPose        # odometry pose, world-from-sensor
    line_obs: list[LineObservation] = field(default_factory=list)
    plane_obs: list[PlaneObservation] = field(default_factory=list)


@dataclass
class Landmark:
    kind: str                   # "line" | "plane"
    label: str
    centroid: np.ndarray        # world frame
    normal: np.ndarray          # direction (line) or normal (plane)
    params: np.ndarray          # minimal block: 4 (line) or 3 (plane)
    observations: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class LandmarkMap:
    landmarks: list[Landmark] = field(default_factory=list)
    processed_keyframes: set[int] = field(default_factory=set)
    dropped_singular: int = 0
    # (kind, kf_id, obs_idx) -> world-frame observation points, kept so
    # landmark re-fits can stack all past observations cheaply
    obs_points: dict = field(default_factory=dict, repr=False)


def select_keyframes(
    poses: list[geom.RigidPose],
    trans_threshold: float = 2.0,
    rot_threshold_deg: float = 10.0,
) -> list[int]:
    """Indices of poses that become keyframes.

    The first pose is always one; afterwards a pose qualifies when it has
    moved >= trans_threshold or rotated >= rot_threshold since the last
    keyframe.
    """
    if not poses:
        raise EmptyStream("no poses")
    rot_threshold = np.deg2rad(rot_threshold_deg)
    anchors = [0]
    last = poses[0]
    eps = 1e-9  # keep exact-boundary steps on the keyframe side despite rounding
    for idx in range(1, len(poses)):
        delta = last.inverse().compose(poses[idx])
        dt = float(np.linalg.norm(delta.translation))
        dr = float(np.linalg.norm(geom.so3_log(delta.rotation)))
        if dt >= trans_threshold - eps or dr >= rot_threshold - eps:
            anchors.append(idx)
            last = poses[idx]
    return anchors


def cluster_poles(points: np.ndarray, eps: float = 0.5, min_pts: int = 10) -> list[np.ndarray]:
    """Density-based clusters of pole-labeled points; noise discarded."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < min_pts:
        return []
    labels = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(points)
    return [points[labels == cid] for cid in sorted(set(labels) - {-1})]


def _pca(points: np.ndarray):
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    sigma = np.sqrt(np.maximum(evals[order], 0.0))
    return centroid, sigma, evecs[:, order]


def fit_line_observation(
    cluster: np.ndarray,
    label: str = "pole",
    linearity_min: float = 0.9,
    min_segment_len: float = 0.5,
) -> LineObservation:
    """PCA line fit of one cluster; endpoints are the extreme projections."""
    cluster = np.asarray(cluster, dtype=float)
    centroid, sigma, vecs = _pca(cluster)
    if sigma[0] <= 0:
        raise NotLinear("degenerate cluster")
    linearity = (sigma[0] - sigma[1]) / sigma[0]
    if linearity <= linearity_min:
        raise NotLinear(f"linearity {linearity:.3f} below threshold")
    direction, _ = geom.canonical_direction(vecs[:, 0])
    proj = (cluster - centroid) @ direction
    p_a = centroid + direction * proj.min()
    p_b = centroid + direction * proj.max()
    if np.linalg.norm(p_b - p_a) <= min_segment_len:
        raise NotLinear("segment shorter than the minimum length")
    return LineObservation(label=label, p_a=p_a, p_b=p_b)


def extract_plane_observations(
    points: np.ndarray,
    label: str,
    voxel_size: float = 1.0,
    min_points: int = 20,
    planarity_min: float = 0.6,
    rhombus_scale: float = 2.0,
) -> list[PlaneObservation]:
    """Voxel-hashed PCA plane patches from one planar-label point set."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return []
    keys = np.floor(points / voxel_size).astype(np.int64)
    voxels: dict[tuple[int, int, int], list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        voxels.setdefault(key, []).append(i)
    out = []
    for key in sorted(voxels):
        idx = voxels[key]
        if len(idx) < min_points:
            continue
        pts = points[idx]
        centroid, sigma, vecs = _pca(pts)
        if sigma[0] <= 0:
            continue
        planarity = (sigma[1] - sigma[2]) / sigma[0]
        if planarity <= planarity_min:
            continue
        v1, v2 = vecs[:, 0], vecs[:, 1]
        terms = np.stack([
            centroid + rhombus_scale * sigma[0] * v1,
            centroid - rhombus_scale * sigma[0] * v1,
            centroid + rhombus_scale * sigma[1] * v2,
            centroid - rhombus_scale * sigma[1] * v2,
        ])
        out.append(PlaneObservation(label=label, centroid=centroid, terminals=terms))
    return out


def extract_keyframe(
    kf_id: int,
    pose: geom.RigidPose,
    cloud: LabeledCloud,
    config: PipelineConfig | None = None,
) -> Keyframe:
    """All line and plane observations of one keyframe (local coordinates)."""
    cfg = config or PipelineConfig()
    kf = Keyframe(id=kf_id, pose=pose)
    for label in LINE_LABELS:
        for cluster in cluster_poles(cloud.subset(label), cfg.dbscan_eps_m, cfg.dbscan_min_pts):
            try:
                kf.line_obs.append(
                    fit_line_observation(cluster, label, cfg.linearity_min, cfg.min_segment_len_m)
                )
            except NotLinear:
                continue
    for label in PLANE_LABELS:
        kf.plane_obs.extend(
            extract_plane_observations(
                cloud.subset(label), label, cfg.voxel_size_m, cfg.min_voxel_points,
                cfg.planarity_min, cfg.rhombus_scale,
            )
        )
    return kf


def refit_line_landmark(lm: Landmark, obs_points: dict) -> None:
    """Re-fit direction/centroid/params from all stacked endpoint pairs."""
    pts = np.vstack([obs_points[("line",) + key] for key in lm.observations])
    centroid, _, vecs = _pca(pts)
    direction, _ = geom.canonical_direction(vecs[:, 0])
    lp = geom.point_normal_to_line(direction, centroid)
    lm.centroid = centroid
    lm.normal = direction
    lm.params = lp.as_array()


def refit_plane_landmark(lm: Landmark, obs_points: dict) -> None:
    """Re-fit normal/centroid/params from all stacked terminal points."""
    pts = np.vstack([obs_points[("plane",) + key] for key in lm.observations])
    centroid, _, vecs = _pca(pts)
    normal, _ = geom.canonical_direction(vecs[:, 2])
    pp = geom.point_normal_to_plane(normal, float(normal @ centroid))
    lm.centroid = centroid
    lm.normal = normal
    lm.params = pp.as_array()


def associate_and_update(
    keyframe: Keyframe,
    lmap: LandmarkMap,
    world_pose: geom.RigidPose,
    config: PipelineConfig | None = None,
) -> LandmarkMap:
    """Match a keyframe's observations into the landmark map (world frame).

    Matched observations are appended and the landmark re-fit from all of its
    stacked observation points; unmatched ones seed new landmarks. Processing
    is idempotent per keyframe id; observations whose fitted direction falls
    into the chart singularity are dropped and counted.
    """
    cfg = config or PipelineConfig()
    if keyframe.id in lmap.processed_keyframes:
        return lmap
    lmap.processed_keyframes.add(keyframe.id)
    angle_gate = np.deg2rad(cfg.match_angle_deg)

    def nearest(kind, label, centroid, normal, gate):
        lms = lmap.landmarks
        if not lms:
            return -1
        ok = np.fromiter(
            (lm.kind == kind and lm.label == label for lm in lms), bool, len(lms)
        )
        if not ok.any():
            return -1
        cents = np.array([lm.centroid for lm in lms])
        norms = np.array([lm.normal for lm in lms])
        d = np.linalg.norm(cents - centroid, axis=1)
        cos = np.abs(norms @ normal)
        cos /= np.linalg.norm(norms, axis=1) * np.linalg.norm(normal)
        ok &= (d < gate) & (np.arccos(np.clip(cos, -1.0, 1.0)) < angle_gate)
        if not ok.any():
            return -1
        cand = np.flatnonzero(ok)
        return int(cand[np.argmin(d[cand])])

    for obs_idx, obs in enumerate(keyframe.line_obs):
        pa = world_pose.transform(obs.p_a)
        pb = world_pose.transform(obs.p_b)
        centroid = 0.5 * (pa + pb)
        direction = pb - pa
        direction = direction / np.linalg.norm(direction)
        direction, _ = geom.canonical_direction(direction)
        key = (keyframe.id, obs_idx)
        lmap.obs_points[("line",) + key] = np.stack([pa, pb])
        try:
            match = nearest("line", obs.label, centroid, direction, cfg.line_match_dist_m)
            if match >= 0:
                lm = lmap.landmarks[match]
                lm.observations.append(key)
                refit_line_landmark(lm, lmap.obs_points)
            else:
                lp = geom.point_normal_to_line(direction, centroid)
                lmap.landmarks.append(
                    Landmark("line", obs.label, centroid, direction, lp.as_array(), [key])
                )
        except SingularDirection:
            lmap.dropped_singular += 1
            lmap.obs_points.pop(("line",) + key, None)

    for obs_idx, obs in enumerate(keyframe.plane_obs):
        centroid = world_pose.transform(obs.centroid)
        terms = world_pose.transform(obs.terminals)
        rel = terms - centroid
        normal = np.cross(rel[0] - rel[1], rel[2] - rel[3])
        normal /= np.linalg.norm(normal)
        normal, _ = geom.canonical_direction(normal)
        key = (keyframe.id, obs_idx)
        lmap.obs_points[("plane",) + key] = np.vstack([terms, centroid[None, :]])
        try:
            match = nearest("plane", obs.label, centroid, normal, cfg.plane_match_dist_m)
            if match >= 0:
                lm = lmap.landmarks[match]
                lm.observations.append(key)
                refit_plane_landmark(lm, lmap.obs_points)
            else:
                pp = geom.point_normal_to_plane(normal, float(normal @ centroid))
                lmap.landmarks.append(
                    Landmark("plane", obs.label, centroid, normal, pp.as_array(), [key])
                )
        except SingularDirection:
            lmap.dropped_singular += 1
            lmap.obs_points.pop(("plane",) + key, None)
    return lmap


def extract_session(
    keyframe_poses: list[geom.RigidPose],
    clouds: list[LabeledCloud],
    config: PipelineConfig | None = None,
) -> tuple[list[Keyframe], LandmarkMap]:
    """Extract observations for every keyframe and build the landmark map."""
    cfg = config or PipelineConfig()
    keyframes = []
    lmap = LandmarkMap()
    for kf_id, (pose, cloud) in enumerate(zip(keyframe_poses, clouds)):
        kf = extract_keyframe(kf_id, pose, cloud, cfg)
        keyframes.append(kf)
        associate_and_update(kf, lmap, pose, cfg)
    return keyframes, lmap
