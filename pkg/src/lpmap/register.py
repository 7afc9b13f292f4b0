"""Block-to-block registration and pairwise-consistent loop pruning.

Coarse registration solves a hybrid point-to-line / point-to-plane problem
over matched graph nodes; refinement alternates nearest-landmark association
with the same solve. Loop candidates between two sessions are then checked
pairwise against the odometry chains and only the maximum mutually-consistent
clique survives.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import geom, optimize
from .assoc import CorrespondenceSet, SemanticGraph, Block
from .cliques import max_clique
from .config import PipelineConfig
from .errors import Degenerate, MissingChain, NotConverged


@dataclass
class LoopCandidate:
    """A relative-pose constraint between two host keyframes.

    `relative` maps points in (session_j, keyframe_j) coordinates into
    (session_i, keyframe_i) coordinates.
    """

    session_i: int
    keyframe_i: int
    session_j: int
    keyframe_j: int
    relative: geom.RigidPose
    inliers: int = 0
    status: str = "coarse"


@dataclass
class RefineResult:
    pose: geom.RigidPose
    inliers: int
    converged: bool


def _solve_pose_to_landmarks(
    t_init: geom.RigidPose,
    line_targets: list[tuple[np.ndarray, np.ndarray]],   # (direction, point)
    line_sources: list[np.ndarray],
    plane_targets: list[tuple[np.ndarray, float]],       # (normal, offset)
    plane_sources: list[np.ndarray],
    cfg: PipelineConfig,
    huber: float,
) -> tuple[geom.RigidPose, optimize.SolverReport]:
    """Minimize sum of point-to-line/plane terms over a single free pose."""
    local = replace(cfg, huber_landmark_m=huber)
    graph = optimize.FactorGraph(local)
    pose_idx = graph.add_pose(t_init)
    for (n, q), src in zip(line_targets, line_sources):
        lm = graph.add_line_landmark(geom.point_normal_to_line(n, q), fixed=True)
        graph.add_line_observation(pose_idx, lm, src)
    for (n, d), src in zip(plane_targets, plane_sources):
        lm = graph.add_plane_landmark(geom.point_normal_to_plane(n, d), fixed=True)
        graph.add_plane_observation(pose_idx, lm, src)
    report = optimize.solve_nlls(graph, local)
    return graph.poses[0], report


def _observability(directions: list[np.ndarray], count: int, min_pairs_angle_deg: float = 5.0) -> bool:
    if count < 3:
        return False
    thresh = np.deg2rad(min_pairs_angle_deg)
    for i in range(len(directions)):
        for j in range(i + 1, len(directions)):
            if geom.angle_between(directions[i], directions[j]) > thresh:
                return True
    return False


def coarse_register(
    graph_i: SemanticGraph,
    graph_j: SemanticGraph,
    corr: CorrespondenceSet,
    config: PipelineConfig | None = None,
) -> geom.RigidPose:
    """Relative pose of block j in block i from matched nodes, identity start.

    Raises Degenerate when fewer than 3 matches or all matched directions are
    parallel; NotConverged when the solve stalls away from a minimum.
    """
    cfg = config or PipelineConfig()
    line_t, line_s, plane_t, plane_s, dirs = [], [], [], [], []
    for a, b in corr.pairs:
        na, nb = graph_i.nodes[a], graph_j.nodes[b]
        if na.kind == "line":
            line_t.append((na.normal, na.centroid))
            line_s.append(nb.centroid)
        else:
            plane_t.append((na.normal, float(na.normal @ na.centroid)))
            plane_s.append(nb.centroid)
        dirs.append(na.normal)
    if not _observability(dirs, len(corr.pairs)):
        raise Degenerate(
            f"{len(corr.pairs)} correspondences spanning too few directions"
        )
    pose, report = _solve_pose_to_landmarks(
        geom.RigidPose.identity(), line_t, line_s, plane_t, plane_s, cfg,
        cfg.huber_coarse_m,
    )
    if not report.converged:
        raise NotConverged(f"coarse registration: {report.reason}")
    return pose


def refine_register(
    block_i: Block,
    block_j: Block,
    t_init: geom.RigidPose,
    config: PipelineConfig | None = None,
) -> RefineResult:
    """Iterative closest landmark refinement of a coarse relative pose.

    Alternates nearest same-kind/same-label landmark association (centroid
    gate, angle gate) with the hybrid solve until the association set repeats
    or the outer iteration budget runs out.
    """
    cfg = config or PipelineConfig()
    angle_gate = np.deg2rad(cfg.refine_angle_gate_deg)
    pose = t_init
    prev_assoc: set[tuple[int, int]] | None = None
    seen: list[set[tuple[int, int]]] = []
    best = RefineResult(pose, 0, False)
    best_cost = np.inf
    ni, nj = len(block_i.landmark_ids), len(block_j.landmark_ids)
    type_ok = np.array(
        [
            [
                block_i.kinds[ii] == block_j.kinds[jj]
                and block_i.labels[ii] == block_j.labels[jj]
                for jj in range(nj)
            ]
            for ii in range(ni)
        ],
        dtype=bool,
    )
    norm_i = block_i.normals / np.linalg.norm(block_i.normals, axis=1, keepdims=True)
    norm_j = block_j.normals / np.linalg.norm(block_j.normals, axis=1, keepdims=True)
    for _ in range(cfg.refine_max_outer):
        moved_c = pose.transform(block_j.centroids)
        moved_n = norm_j @ pose.rotation.T
        dists = np.linalg.norm(
            block_i.centroids[:, None, :] - moved_c[None, :, :], axis=2
        )
        angles = np.arccos(np.clip(np.abs(norm_i @ moved_n.T), -1.0, 1.0))
        ok = type_ok & (dists < cfg.refine_dist_gate_m) & (angles <= angle_gate)
        dists = np.where(ok, dists, np.inf)
        assoc: set[tuple[int, int]] = set()
        if ok.any():
            nearest = np.argmin(dists, axis=0)
            for jj in range(nj):
                if np.isfinite(dists[nearest[jj], jj]):
                    assoc.add((int(nearest[jj]), jj))
        if not assoc:
            return RefineResult(pose, 0, False)
        line_t, line_s, plane_t, plane_s = [], [], [], []
        for ii, jj in sorted(assoc):
            if block_i.kinds[ii] == "line":
                line_t.append((block_i.normals[ii], block_i.centroids[ii]))
                line_s.append(block_j.centroids[jj])
            else:
                n = block_i.normals[ii]
                plane_t.append((n, float(n @ block_i.centroids[ii])))
                plane_s.append(block_j.centroids[jj])
        pose, report = _solve_pose_to_landmarks(
            pose, line_t, line_s, plane_t, plane_s, cfg, cfg.huber_refine_m
        )
        if report.final_cost < best_cost:
            best_cost = report.final_cost
            best = RefineResult(pose, len(assoc), True)
        if prev_assoc is not None and assoc == prev_assoc:
            return RefineResult(pose, len(assoc), True)
        if assoc in seen:  # oscillation: return best-cost iterate, flagged
            return RefineResult(best.pose, best.inliers, False)
        seen.append(assoc)
        prev_assoc = assoc
    return RefineResult(best.pose, best.inliers, False)


# ---------------------------------------------------------------------------
# pairwise consistency (PCM)
# ---------------------------------------------------------------------------


def _chain(world_poses: dict, session: int, kf_from: int, kf_to: int) -> geom.RigidPose:
    """Relative pose taking kf_to coordinates into kf_from coordinates."""
    key_a = (session, kf_from)
    key_b = (session, kf_to)
    if key_a not in world_poses or key_b not in world_poses:
        raise MissingChain(f"missing odometry for session {session} kf {kf_from}/{kf_to}")
    return world_poses[key_a].inverse().compose(world_poses[key_b])


def pcm_residual(
    loop_k: LoopCandidate,
    loop_l: LoopCandidate,
    world_poses: dict,
) -> tuple[float, float]:
    """Cycle error (rotation rad, translation m) of two loops and odometry.

    `world_poses` maps (session, keyframe) to the session-frame pose used to
    compose the in-session chains. The residual is a function of the
    unordered loop pair: arguments are ordered canonically before composing
    the cycle (swapping loops conjugates the cycle by an odometry chain,
    which would perturb the translation norm otherwise).
    """
    if (loop_k.session_i, loop_k.session_j) != (loop_l.session_i, loop_l.session_j):
        raise MissingChain("loops connect different session pairs")
    if (loop_l.keyframe_i, loop_l.keyframe_j) < (loop_k.keyframe_i, loop_k.keyframe_j):
        loop_k, loop_l = loop_l, loop_k
    chain_i = _chain(world_poses, loop_k.session_i, loop_k.keyframe_i, loop_l.keyframe_i)
    chain_j = _chain(world_poses, loop_l.session_j, loop_l.keyframe_j, loop_k.keyframe_j)
    delta = (
        loop_k.relative.inverse()
        .compose(chain_i)
        .compose(loop_l.relative)
        .compose(chain_j)
    )
    return (
        float(np.linalg.norm(geom.so3_log(delta.rotation))),
        float(np.linalg.norm(delta.translation)),
    )


def prune_loops(
    loops: list[LoopCandidate],
    world_poses: dict,
    gamma_rot: float = 0.1,
    gamma_trans: float = 0.5,
) -> list[LoopCandidate]:
    """Keep the maximum clique of pairwise-consistent loop candidates.

    Loops outside the clique get status "rejected"; the survivors "accepted".
    """
    n = len(loops)
    if n == 0:
        return []
    order = sorted(
        range(n),
        key=lambda k: (loops[k].session_i, loops[k].keyframe_i,
                       loops[k].session_j, loops[k].keyframe_j),
    )
    adj = np.zeros((n, n), dtype=bool)
    for a in range(n):
        for b in range(a + 1, n):
            ka, kb = loops[order[a]], loops[order[b]]
            if (ka.session_i, ka.session_j) != (kb.session_i, kb.session_j):
                continue
            r_rot, r_trans = pcm_residual(ka, kb, world_poses)
            if r_rot < gamma_rot and r_trans < gamma_trans:
                adj[a, b] = adj[b, a] = True
    clique = max_clique(adj)
    accepted = []
    keep = {order[a] for a in clique}
    for k, loop in enumerate(loops):
        loop.status = "accepted" if k in keep else "rejected"
        if k in keep:
            accepted.append(loop)
    return accepted
