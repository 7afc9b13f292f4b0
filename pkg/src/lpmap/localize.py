"""Online scan-to-map localization against the landmark map.

Each labeled scan point is associated to the nearest same-label landmark
under the current pose estimate (pole points to lines, planar labels to
planes), and the pose is re-solved over robust point-to-line/plane terms for
a few re-association rounds. Tracking is lost when too few points associate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import geom, optimize
from .config import PipelineConfig
from .errors import LostTrack


@dataclass
class LocalizationState:
    pose: geom.RigidPose
    inliers: int
    latency_ms: float
    rounds: int


@dataclass
class _MapView:
    """Landmark arrays grouped for vectorized association."""

    line_labels: list[str]
    line_n: np.ndarray      # (L, 3)
    line_c: np.ndarray      # (L, 3)
    line_params: np.ndarray  # (L, 4)
    plane_labels: list[str]
    plane_n: np.ndarray     # (S, 3)
    plane_d: np.ndarray     # (S,)
    plane_params: np.ndarray  # (S, 3)


def build_map_view(landmarks) -> _MapView:
    lines = [lm for lm in landmarks if lm.kind == "line"]
    planes = [lm for lm in landmarks if lm.kind == "plane"]
    return _MapView(
        line_labels=[lm.label for lm in lines],
        line_n=np.array([lm.normal for lm in lines]).reshape(-1, 3),
        line_c=np.array([lm.centroid for lm in lines]).reshape(-1, 3),
        line_params=np.array([lm.params for lm in lines]).reshape(-1, 4),
        plane_labels=[lm.label for lm in planes],
        plane_n=np.array([lm.normal for lm in planes]).reshape(-1, 3),
        plane_d=np.array(
            [float(lm.normal @ lm.centroid) for lm in planes], dtype=float
        ),
        plane_params=np.array([lm.params for lm in planes]).reshape(-1, 3),
    )


def _associate(view: _MapView, pts_world: np.ndarray, labels: list[str], gate: float):
    """Nearest landmark per point; returns (line point idx, line lm idx,
    plane point idx, plane lm idx) for points within the distance gate."""
    labels_arr = np.asarray(labels)
    line_pt_idx, line_lm_idx = [], []
    plane_pt_idx, plane_lm_idx = [], []
    if len(view.line_labels):
        lbl_line = np.asarray(view.line_labels)
        for label in ("pole",):
            pmask = np.flatnonzero(labels_arr == label)
            lmask = np.flatnonzero(lbl_line == label)
            if not len(pmask) or not len(lmask):
                continue
            p = pts_world[pmask]
            diff = p[:, None, :] - view.line_c[None, lmask, :]
            n = view.line_n[lmask]
            along = np.einsum("pli,li->pl", diff, n)
            perp = diff - along[:, :, None] * n[None, :, :]
            dist = np.linalg.norm(perp, axis=2)
            best = np.argmin(dist, axis=1)
            dmin = dist[np.arange(len(pmask)), best]
            ok = dmin < gate
            line_pt_idx.extend(pmask[ok])
            line_lm_idx.extend(lmask[best[ok]])
    if len(view.plane_labels):
        lbl_plane = np.asarray(view.plane_labels)
        for label in ("building", "fence", "road"):
            pmask = np.flatnonzero(labels_arr == label)
            lmask = np.flatnonzero(lbl_plane == label)
            if not len(pmask) or not len(lmask):
                continue
            p = pts_world[pmask]
            dist = np.abs(p @ view.plane_n[lmask].T - view.plane_d[lmask][None, :])
            best = np.argmin(dist, axis=1)
            dmin = dist[np.arange(len(pmask)), best]
            ok = dmin < gate
            plane_pt_idx.extend(pmask[ok])
            plane_lm_idx.extend(lmask[best[ok]])
    return (
        np.array(line_pt_idx, dtype=int),
        np.array(line_lm_idx, dtype=int),
        np.array(plane_pt_idx, dtype=int),
        np.array(plane_lm_idx, dtype=int),
    )


def localize_scan(
    cloud,
    landmarks,
    prior: geom.RigidPose,
    config: PipelineConfig | None = None,
    view: _MapView | None = None,
) -> LocalizationState:
    """Refine the prior pose against the map from one labeled scan.

    Raises LostTrack when fewer than the minimum number of scan points
    associate to landmarks on the final round.
    """
    cfg = config or PipelineConfig()
    if view is None:
        view = build_map_view(landmarks)
    solver_cfg = replace(cfg, max_iterations=20)
    t0 = time.perf_counter()
    pose = prior
    pts = cloud.points
    inliers = 0
    rounds = 0
    for rounds in range(1, cfg.loc_rounds + 1):
        world = pose.transform(pts)
        li_p, li_l, pl_p, pl_l = _associate(view, world, cloud.labels, cfg.loc_gate_m)
        inliers = len(li_p) + len(pl_p)
        if inliers < cfg.loc_min_inliers:
            raise LostTrack(f"{inliers} inliers < {cfg.loc_min_inliers}")
        graph = optimize.FactorGraph(solver_cfg)
        pose_idx = graph.add_pose(pose)
        for k in range(len(view.line_labels)):
            graph.add_line_landmark(view.line_params[k], fixed=True)
        for k in range(len(view.plane_labels)):
            graph.add_plane_landmark(view.plane_params[k], fixed=True)
        if len(li_p):
            graph.add_line_observations(pose_idx, li_l, pts[li_p])
        if len(pl_p):
            graph.add_plane_observations(pose_idx, pl_l, pts[pl_p])
        optimize.solve_nlls(graph, solver_cfg)
        new_pose = graph.poses[0]
        delta = pose.inverse().compose(new_pose)
        step = np.linalg.norm(delta.translation) + np.linalg.norm(
            geom.so3_log(delta.rotation)
        )
        pose = new_pose
        if step < 1e-10:
            break
    latency = (time.perf_counter() - t0) * 1e3
    return LocalizationState(pose=pose, inliers=inliers, latency_ms=latency, rounds=rounds)


def run_sequence(
    clouds,
    landmarks,
    initial_prior: geom.RigidPose,
    config: PipelineConfig | None = None,
    truth: list[geom.RigidPose] | None = None,
):
    """Track a scan sequence with a constant-position motion model.

    Returns (poses, states, metric_report_or_None, lost: bool); on LostTrack
    the partial trajectory up to the failing scan is returned with lost=True.
    """
    from . import harness

    cfg = config or PipelineConfig()
    view = build_map_view(landmarks)
    poses: list[geom.RigidPose] = []
    states: list[LocalizationState] = []
    prior = initial_prior
    lost = False
    for cloud in clouds:
        try:
            state = localize_scan(cloud, landmarks, prior, cfg, view=view)
        except LostTrack:
            lost = True
            break
        poses.append(state.pose)
        states.append(state)
        prior = state.pose
    report = None
    if truth is not None and poses and not lost:
        report = harness.evaluate(poses, truth[: len(poses)])
    return poses, states, report, lost
