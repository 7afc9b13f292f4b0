"""Centralized map server: ingest sub-maps, merge them coarse-to-fine, persist.

A merge runs the full chain: block building -> Grassmannian association ->
coarse + refined registration -> PCM pruning -> pose graph optimization over
all sessions -> landmark merging -> bundle adjustment. Sessions without any
accepted loop are retained unanchored so a later session can bridge them.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import assoc, dataio, extract, geom, optimize, register
from .config import PipelineConfig
from .errors import Degenerate, NoConsensus, NotConverged, ParseError, ValidationError

FORMAT_VERSION = 1
MAP_SESSION = -1  # pseudo session id for the merged map side of a loop


@dataclass
class Session:
    session_id: int
    keyframes: list[extract.Keyframe]
    landmarks: list[extract.Landmark]
    odometry: list[tuple[int, int, geom.RigidPose]]


@dataclass
class SessionRecord:
    session_id: int
    keyframes: list[extract.Keyframe]
    odometry: list[tuple[int, int, geom.RigidPose]]
    anchored: bool = True


@dataclass
class LoopRecord:
    session_i: int
    keyframe_i: int
    session_j: int
    keyframe_j: int
    relative: geom.RigidPose
    inliers: int
    status: str = "accepted"


@dataclass
class MergeReport:
    session_id: int
    anchored: bool = True
    no_overlap: bool = False
    block_pairs: int = 0
    candidates: int = 0
    refined: int = 0
    accepted: int = 0
    pgo_initial_cost: float = 0.0
    pgo_final_cost: float = 0.0
    pgo_iterations: int = 0
    merged_by_graph: int = 0
    merged_by_distance: int = 0
    ba_initial_cost: float = 0.0
    ba_final_cost: float = 0.0
    ba_iterations: int = 0
    landmarks_total: int = 0
    observations_total: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GlobalMap:
    sessions: list[SessionRecord] = field(default_factory=list)
    world_poses: dict = field(default_factory=dict)   # (sid, kf) -> RigidPose
    landmarks: list[extract.Landmark] = field(default_factory=list)  # obs: (sid, kf, idx)
    loops: list[LoopRecord] = field(default_factory=list)
    merge_history: list[dict] = field(default_factory=list)

    def session(self, sid: int) -> SessionRecord:
        for rec in self.sessions:
            if rec.session_id == sid:
                return rec
        raise KeyError(f"no session {sid}")

    def keyframe(self, sid: int, kf_id: int) -> extract.Keyframe:
        return self.session(sid).keyframes[kf_id]

    def observation_count(self) -> int:
        return sum(len(lm.observations) for lm in self.landmarks)


def session_from_extraction(
    session_id: int,
    keyframes: list[extract.Keyframe],
    lmap: extract.LandmarkMap,
) -> Session:
    """Bundle extraction output into a session; odometry = consecutive deltas."""
    odometry = []
    for k in range(len(keyframes) - 1):
        delta = keyframes[k].pose.inverse().compose(keyframes[k + 1].pose)
        odometry.append((k, k + 1, delta))
    return Session(session_id, keyframes, lmap.landmarks, odometry)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _keyframe_to_dict(kf: extract.Keyframe) -> dict:
    return {
        "id": kf.id,
        "pose": dataio.pose_to_row(kf.pose),
        "line_obs": [
            {"label": o.label, "pa": o.p_a, "pb": o.p_b} for o in kf.line_obs
        ],
        "plane_obs": [
            {"label": o.label, "centroid": o.centroid, "terms": o.terminals}
            for o in kf.plane_obs
        ],
    }


def _keyframe_from_dict(d: dict) -> extract.Keyframe:
    kf = extract.Keyframe(id=int(d["id"]), pose=dataio.pose_from_row(d["pose"]))
    for o in d.get("line_obs", []):
        kf.line_obs.append(
            extract.LineObservation(
                label=o["label"], p_a=np.array(o["pa"], float), p_b=np.array(o["pb"], float)
            )
        )
    for o in d.get("plane_obs", []):
        kf.plane_obs.append(
            extract.PlaneObservation(
                label=o["label"],
                centroid=np.array(o["centroid"], float),
                terminals=np.array(o["terms"], float).reshape(4, 3),
            )
        )
    return kf


def _landmark_to_dict(lm: extract.Landmark) -> dict:
    return {
        "kind": lm.kind,
        "label": lm.label,
        "centroid": lm.centroid,
        "normal": lm.normal,
        "params": lm.params,
        "obs": [list(o) for o in lm.observations],
    }


def _landmark_from_dict(d: dict) -> extract.Landmark:
    return extract.Landmark(
        kind=d["kind"],
        label=d["label"],
        centroid=np.array(d["centroid"], float),
        normal=np.array(d["normal"], float),
        params=np.array(d["params"], float),
        observations=[tuple(int(v) for v in o) for o in d["obs"]],
    )


def serialize_submap(session: Session) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "session_id": session.session_id,
        "keyframes": [_keyframe_to_dict(kf) for kf in session.keyframes],
        "landmarks": [_landmark_to_dict(lm) for lm in session.landmarks],
        "odometry": [
            {"from": i, "to": j, "pose": dataio.pose_to_row(p)}
            for i, j, p in session.odometry
        ],
        "loops": [],
    }
    return dataio.canonical_json_dumps(doc)


def _check_landmark_consistency(lm: extract.Landmark, where: str) -> None:
    if not lm.observations:
        raise ValidationError(f"{where}: landmark has no observations")
    if lm.kind == "line":
        n, c = geom.line_params_point_normal(lm.params)
        if geom.angle_between(n, lm.normal) > 1e-6:
            raise ValidationError(f"{where}: direction inconsistent with params")
        off = lm.centroid - c
        if np.linalg.norm(off - n * (n @ off)) > 1e-6:
            raise ValidationError(f"{where}: centroid not on the parameterized line")
    else:
        n, d = geom.plane_params_point_normal(lm.params)
        if geom.angle_between(n, lm.normal) > 1e-6:
            raise ValidationError(f"{where}: normal inconsistent with params")
        if abs(float(n @ lm.centroid) - float(d)) > 1e-6:
            raise ValidationError(f"{where}: centroid off the parameterized plane")


def validate_session(session: Session) -> None:
    ids = [kf.id for kf in session.keyframes]
    if ids != list(range(len(ids))):
        raise ValidationError(f"session {session.session_id}: keyframe ids not dense")
    for li, lm in enumerate(session.landmarks):
        where = f"session {session.session_id} landmark {li}"
        _check_landmark_consistency(lm, where)
        for kf_id, obs_idx in lm.observations:
            if not 0 <= kf_id < len(session.keyframes):
                raise ValidationError(f"{where}: observation references keyframe {kf_id}")
            obs_list = (
                session.keyframes[kf_id].line_obs
                if lm.kind == "line"
                else session.keyframes[kf_id].plane_obs
            )
            if not 0 <= obs_idx < len(obs_list):
                raise ValidationError(f"{where}: observation index {obs_idx} out of range")


def ingest_submap(path) -> Session:
    """Parse and validate one sub-map file."""
    doc = dataio.load_json(path)
    try:
        session = Session(
            session_id=int(doc["session_id"]),
            keyframes=[_keyframe_from_dict(k) for k in doc["keyframes"]],
            landmarks=[_landmark_from_dict(l) for l in doc["landmarks"]],
            odometry=[
                (int(o["from"]), int(o["to"]), dataio.pose_from_row(o["pose"]))
                for o in doc["odometry"]
            ],
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ParseError(f"{path}: missing or malformed field {exc}") from exc
    validate_session(session)
    return session


def serialize_global(gmap: GlobalMap) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "sessions": [
            {
                "session_id": rec.session_id,
                "anchored": rec.anchored,
                "keyframes": [_keyframe_to_dict(kf) for kf in rec.keyframes],
                "odometry": [
                    {"from": i, "to": j, "pose": dataio.pose_to_row(p)}
                    for i, j, p in rec.odometry
                ],
            }
            for rec in gmap.sessions
        ],
        "world_poses": [
            {"session": sid, "id": kf, "pose": dataio.pose_to_row(p)}
            for (sid, kf), p in sorted(gmap.world_poses.items())
        ],
        "landmarks": [_landmark_to_dict(lm) for lm in gmap.landmarks],
        "loops": [
            {
                "from": [l.session_i, l.keyframe_i],
                "to": [l.session_j, l.keyframe_j],
                "pose": dataio.pose_to_row(l.relative),
                "inliers": l.inliers,
                "status": l.status,
            }
            for l in gmap.loops
        ],
        "merge_history": gmap.merge_history,
    }
    return dataio.canonical_json_dumps(doc)


def serialize_landmark_only(gmap: GlobalMap) -> bytes:
    """The "(L)" localization-only map: a compact binary landmark table.

    Record layout (little endian, 46 bytes per landmark): kind u8 (0 line,
    1 plane), label u8 (index into the semantic category table), centroid
    3xf32, normal 3xf32, minimal params 4xf32 (planes pad the last slot).
    """
    from .config import SEMANTIC_CATEGORIES

    header = b"LPL1" + np.uint32(len(gmap.landmarks)).tobytes()
    rows = []
    for lm in gmap.landmarks:
        rec = np.zeros(11, dtype="<f4")
        rec[0:3] = lm.centroid
        rec[3:6] = lm.normal
        rec[6: 6 + len(lm.params)] = lm.params
        rows.append(
            bytes([0 if lm.kind == "line" else 1,
                   SEMANTIC_CATEGORIES.index(lm.label)])
            + rec.tobytes()
        )
    return header + b"".join(rows)


def load_landmark_only(path) -> list[extract.Landmark]:
    """Read a "(L)" map back into landmark records (no co-visibility)."""
    from .config import SEMANTIC_CATEGORIES

    raw = Path(path).read_bytes()
    if raw[:4] != b"LPL1":
        raise ParseError(f"{path}: bad magic for a landmark-only map")
    count = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    out = []
    offset = 8
    for _ in range(count):
        kind = "line" if raw[offset] == 0 else "plane"
        label = SEMANTIC_CATEGORIES[raw[offset + 1]]
        rec = np.frombuffer(raw[offset + 2: offset + 46], dtype="<f4").astype(float)
        params = rec[6:10] if kind == "line" else rec[6:9]
        out.append(
            extract.Landmark(kind, label, rec[0:3].copy(), rec[3:6].copy(),
                             params.copy(), [])
        )
        offset += 46
    return out


def load_global(path) -> GlobalMap:
    doc = dataio.load_json(path)
    try:
        gmap = GlobalMap()
        for rec in doc["sessions"]:
            gmap.sessions.append(
                SessionRecord(
                    session_id=int(rec["session_id"]),
                    keyframes=[_keyframe_from_dict(k) for k in rec["keyframes"]],
                    odometry=[
                        (int(o["from"]), int(o["to"]), dataio.pose_from_row(o["pose"]))
                        for o in rec["odometry"]
                    ],
                    anchored=bool(rec["anchored"]),
                )
            )
        for wp in doc["world_poses"]:
            gmap.world_poses[(int(wp["session"]), int(wp["id"]))] = dataio.pose_from_row(
                wp["pose"]
            )
        gmap.landmarks = [_landmark_from_dict(l) for l in doc["landmarks"]]
        for l in doc["loops"]:
            gmap.loops.append(
                LoopRecord(
                    session_i=int(l["from"][0]),
                    keyframe_i=int(l["from"][1]),
                    session_j=int(l["to"][0]),
                    keyframe_j=int(l["to"][1]),
                    relative=dataio.pose_from_row(l["pose"]),
                    inliers=int(l["inliers"]),
                    status=l["status"],
                )
            )
        gmap.merge_history = list(doc["merge_history"])
    except (KeyError, TypeError, IndexError) as exc:
        raise ParseError(f"{path}: missing or malformed field {exc}") from exc
    return gmap


# ---------------------------------------------------------------------------
# landmark bookkeeping in the world frame
# ---------------------------------------------------------------------------


def _world_obs_points(gmap: GlobalMap, lm: extract.Landmark) -> np.ndarray:
    pts = []
    for sid, kf_id, obs_idx in lm.observations:
        pose = gmap.world_poses[(sid, kf_id)]
        kf = gmap.keyframe(sid, kf_id)
        if lm.kind == "line":
            obs = kf.line_obs[obs_idx]
            pts.append(pose.transform(obs.p_a))
            pts.append(pose.transform(obs.p_b))
        else:
            obs = kf.plane_obs[obs_idx]
            pts.extend(pose.transform(obs.terminals))
            pts.append(pose.transform(obs.centroid))
    return np.asarray(pts)


def _refit_landmark_world(gmap: GlobalMap, lm: extract.Landmark) -> None:
    pts = _world_obs_points(gmap, lm)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    if lm.kind == "line":
        direction, _ = geom.canonical_direction(evecs[:, order[0]])
        lm.centroid = centroid
        lm.normal = direction
        lm.params = geom.point_normal_to_line(direction, centroid).as_array()
    else:
        normal, _ = geom.canonical_direction(evecs[:, order[2]])
        lm.centroid = centroid
        lm.normal = normal
        lm.params = geom.point_normal_to_plane(normal, float(normal @ centroid)).as_array()


def _sync_landmark_to_params(lm: extract.Landmark) -> None:
    """After BA moved the minimal block, project (centroid, normal) onto it."""
    if lm.kind == "line":
        n, q = geom.line_params_point_normal(lm.params)
        lm.normal = n
        lm.centroid = q + n * (n @ (lm.centroid - q))
    else:
        n, d = geom.plane_params_point_normal(lm.params)
        lm.normal = n
        lm.centroid = lm.centroid - n * (float(n @ lm.centroid) - float(d))


def _adopt_session(gmap: GlobalMap, session: Session, anchored: bool) -> None:
    gmap.sessions.append(
        SessionRecord(session.session_id, session.keyframes, session.odometry, anchored)
    )
    for kf in session.keyframes:
        gmap.world_poses[(session.session_id, kf.id)] = kf.pose
    for lm in session.landmarks:
        gmap.landmarks.append(
            extract.Landmark(
                kind=lm.kind,
                label=lm.label,
                centroid=np.asarray(lm.centroid, float).copy(),
                normal=np.asarray(lm.normal, float).copy(),
                params=np.asarray(lm.params, float).copy(),
                observations=[(session.session_id, kf, idx) for kf, idx in lm.observations],
            )
        )


# ---------------------------------------------------------------------------
# the merge pipeline
# ---------------------------------------------------------------------------


def _map_blocks(gmap: GlobalMap, cfg: PipelineConfig):
    """Blocks over every map session using current world poses.

    Returns (blocks, hosts) where hosts[i] = (sid, kf) of block i's host.
    """
    blocks = []
    hosts = []
    for rec in gmap.sessions:
        poses = [gmap.world_poses[(rec.session_id, kf.id)] for kf in rec.keyframes]
        for blk in assoc.build_blocks(
            poses, gmap.landmarks, cfg.block_radius_m, cfg.block_stride
        ):
            blocks.append(blk)
            hosts.append((rec.session_id, blk.host_id))
    return blocks, hosts


def _match_block_pair(args):
    """One block-pair job: association -> coarse -> refine."""
    pair_idx, blk_old, g_old, blk_new, g_new, cfg = args
    try:
        corr = assoc.match_graphs(g_old, g_new, cfg)
    except NoConsensus:
        return pair_idx, None, None, 0
    try:
        t0 = register.coarse_register(g_old, g_new, corr, cfg)
    except (Degenerate, NotConverged):
        return pair_idx, None, None, 1
    result = register.refine_register(blk_old, blk_new, t0, cfg)
    if not result.converged or result.inliers < cfg.min_loop_inliers:
        return pair_idx, None, None, 1
    # landmark-id pairs implied by the graph match, for the merge step
    pos_old = {lid: k for k, lid in enumerate(blk_old.landmark_ids)}
    pos_new = {lid: k for k, lid in enumerate(blk_new.landmark_ids)}
    matched = []
    for a, b in corr.pairs:
        na, nb = g_old.nodes[a], g_new.nodes[b]
        if na.kind == "line":
            matched.append((na.landmark_ids[0], nb.landmark_ids[0]))
        else:
            for nid in nb.landmark_ids:
                moved = result.pose.transform(blk_new.centroids[pos_new[nid]])
                best = min(
                    na.landmark_ids,
                    key=lambda oid: float(
                        np.linalg.norm(blk_old.centroids[pos_old[oid]] - moved)
                    ),
                )
                matched.append((best, nid))
    return pair_idx, (result.pose, result.inliers), matched, 1


def merge_session(
    gmap: GlobalMap,
    session: Session,
    config: PipelineConfig | None = None,
    threads: int = 1,
) -> MergeReport:
    """Merge one session into the map; returns the stage-by-stage report."""
    cfg = config or PipelineConfig()
    report = MergeReport(session_id=session.session_id)
    validate_session(session)
    if not gmap.sessions:
        _adopt_session(gmap, session, anchored=True)
        report.landmarks_total = len(gmap.landmarks)
        report.observations_total = gmap.observation_count()
        gmap.merge_history.append(report.to_dict())
        return report

    old_blocks, old_hosts = _map_blocks(gmap, cfg)
    odom_poses = [kf.pose for kf in session.keyframes]
    new_blocks = assoc.build_blocks(
        odom_poses, session.landmarks, cfg.block_radius_m, cfg.block_stride
    )
    old_graphs = [assoc.build_semantic_graph(b, cfg) for b in old_blocks]
    new_graphs = [assoc.build_semantic_graph(b, cfg) for b in new_blocks]
    jobs = []
    for oi, blk_old in enumerate(old_blocks):
        for ni, blk_new in enumerate(new_blocks):
            jobs.append((len(jobs), blk_old, old_graphs[oi], blk_new, new_graphs[ni], cfg))
    report.block_pairs = len(jobs)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = sorted(pool.map(_match_block_pair, jobs), key=lambda r: r[0])
    else:
        results = [_match_block_pair(job) for job in jobs]

    loops: list[register.LoopCandidate] = []
    loop_matches: list[list[tuple[int, int]]] = []
    n_blocks_new = len(new_blocks)
    for pair_idx, refined, matched, had_candidates in results:
        report.candidates += had_candidates
        if refined is None:
            continue
        blk_old = old_blocks[pair_idx // n_blocks_new]
        blk_new = new_blocks[pair_idx % n_blocks_new]
        sid_old, kf_old = old_hosts[pair_idx // n_blocks_new]
        pose, inliers = refined
        # relative pose between host keyframes: hosts are the block frames
        loops.append(
            register.LoopCandidate(
                session_i=MAP_SESSION,
                keyframe_i=pair_idx // n_blocks_new,
                session_j=session.session_id,
                keyframe_j=blk_new.host_id,
                relative=pose,
                inliers=inliers,
                status="refined",
            )
        )
        loop_matches.append(matched)
    report.refined = len(loops)

    # PCM over all refined candidates; the map side chains through world poses
    pcm_poses = {(session.session_id, kf.id): kf.pose for kf in session.keyframes}
    for bi, (sid, kf) in enumerate(old_hosts):
        pcm_poses[(MAP_SESSION, bi)] = gmap.world_poses[(sid, kf)]
    accepted = register.prune_loops(
        loops, pcm_poses, cfg.pcm_gamma_rot_rad, cfg.pcm_gamma_trans_m
    )
    report.accepted = len(accepted)
    if not accepted:
        report.no_overlap = True
        report.anchored = False
        _adopt_session(gmap, session, anchored=False)
        report.landmarks_total = len(gmap.landmarks)
        report.observations_total = gmap.observation_count()
        gmap.merge_history.append(report.to_dict())
        return report

    # initialize the new session's world frame from the strongest loop
    best = max(accepted, key=lambda l: (l.inliers, -l.keyframe_i, -l.keyframe_j))
    sid_old, kf_old = old_hosts[best.keyframe_i]
    t_new_host = gmap.world_poses[(sid_old, kf_old)].compose(best.relative)
    offset = t_new_host.compose(odom_poses[best.keyframe_j].inverse())
    n_before = len(gmap.landmarks)
    _adopt_session(gmap, session, anchored=True)
    for kf in session.keyframes:
        gmap.world_poses[(session.session_id, kf.id)] = offset.compose(kf.pose)

    # convert accepted loops to keyframe pairs and run PGO over everything
    kept_matches: list[tuple[int, int]] = []
    for loop, matched in zip(loops, loop_matches):
        if loop.status != "accepted":
            continue
        sid_o, kf_o = old_hosts[loop.keyframe_i]
        gmap.loops.append(
            LoopRecord(
                session_i=sid_o,
                keyframe_i=kf_o,
                session_j=session.session_id,
                keyframe_j=loop.keyframe_j,
                relative=loop.relative,
                inliers=loop.inliers,
            )
        )
        kept_matches.extend((old_id, n_before + new_id) for old_id, new_id in matched)

    pgo_report = _run_pgo(gmap, cfg)
    report.pgo_initial_cost = pgo_report.initial_cost
    report.pgo_final_cost = pgo_report.final_cost
    report.pgo_iterations = pgo_report.iterations

    # landmarks move with their keyframes, then merge duplicates
    for lm in gmap.landmarks:
        _refit_landmark_world(gmap, lm)
    n_graph, n_dist = merge_landmarks(gmap, kept_matches, cfg, new_from=n_before)
    report.merged_by_graph = n_graph
    report.merged_by_distance = n_dist

    ba_report = run_bundle_adjustment(gmap, cfg)
    report.ba_initial_cost = ba_report.initial_cost
    report.ba_final_cost = ba_report.final_cost
    report.ba_iterations = ba_report.iterations

    report.landmarks_total = len(gmap.landmarks)
    report.observations_total = gmap.observation_count()
    gmap.merge_history.append(report.to_dict())
    return report


def _global_indexing(gmap: GlobalMap):
    index = {}
    order = []
    for rec in gmap.sessions:
        for kf in rec.keyframes:
            index[(rec.session_id, kf.id)] = len(order)
            order.append((rec.session_id, kf.id))
    return index, order


def _run_pgo(gmap: GlobalMap, cfg: PipelineConfig) -> optimize.SolverReport:
    index, order = _global_indexing(gmap)
    poses = [gmap.world_poses[key] for key in order]
    odometry = []
    for rec in gmap.sessions:
        for i, j, meas in rec.odometry:
            odometry.append((index[(rec.session_id, i)], index[(rec.session_id, j)], meas))
    loops = [
        (index[(l.session_i, l.keyframe_i)], index[(l.session_j, l.keyframe_j)], l.relative)
        for l in gmap.loops
    ]
    fixed = (index[(gmap.sessions[0].session_id, 0)],)
    new_poses, rep = optimize.solve_pgo(poses, odometry, loops, cfg, fixed=fixed)
    for key, pose in zip(order, new_poses):
        gmap.world_poses[key] = pose
    return rep


def merge_landmarks(
    gmap: GlobalMap,
    matched_pairs: list[tuple[int, int]],
    config: PipelineConfig | None = None,
    new_from: int | None = None,
) -> tuple[int, int]:
    """Fuse duplicate landmarks; graph-matched pairs first, then the
    centroid-distance rule. Returns (merged via graph, merged via distance)."""
    cfg = config or PipelineConfig()
    n = len(gmap.landmarks)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    n_graph = 0
    for a, b in matched_pairs:
        if a >= n or b >= n:
            continue
        if gmap.landmarks[a].kind != gmap.landmarks[b].kind:
            continue
        if find(a) != find(b):
            parent[find(b)] = find(a)
            n_graph += 1

    angle_gate = np.deg2rad(cfg.merge_angle_deg)
    lo = 0 if new_from is None else new_from
    n_dist = 0
    for b in range(lo, n):
        lmb = gmap.landmarks[b]
        best, best_d = -1, cfg.merge_dist_m
        for a in range(n):
            if a == b or (new_from is not None and a >= new_from):
                continue
            lma = gmap.landmarks[a]
            if lma.kind != lmb.kind or lma.label != lmb.label:
                continue
            if find(a) == find(b):
                continue
            d = float(np.linalg.norm(lma.centroid - lmb.centroid))
            if d < best_d and geom.angle_between(lma.normal, lmb.normal) < angle_gate:
                best_d, best = d, a
        if best >= 0:
            parent[find(b)] = find(best)
            n_dist += 1

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    fused = []
    for root in sorted(groups, key=lambda r: min(groups[r])):
        members = sorted(groups[root])
        base = gmap.landmarks[members[0]]
        for other in members[1:]:
            base.observations.extend(gmap.landmarks[other].observations)
        base.observations.sort()
        if len(members) > 1:
            _refit_landmark_world(gmap, base)
        fused.append(base)
    gmap.landmarks = fused
    return n_graph, n_dist


def run_bundle_adjustment(gmap: GlobalMap, config: PipelineConfig | None = None):
    """Joint BA over all keyframes and landmarks; writes results back."""
    cfg = config or PipelineConfig()
    index, order = _global_indexing(gmap)
    graph = optimize.FactorGraph(cfg)
    first = (gmap.sessions[0].session_id, 0)
    for key in order:
        graph.add_pose(gmap.world_poses[key], fixed=key == first)
    for rec in gmap.sessions:
        for i, j, meas in rec.odometry:
            graph.add_relative_pose(
                index[(rec.session_id, i)], index[(rec.session_id, j)], meas,
                kind=optimize.ODOMETRY,
            )
    for l in gmap.loops:
        graph.add_relative_pose(
            index[(l.session_i, l.keyframe_i)], index[(l.session_j, l.keyframe_j)],
            l.relative, kind=optimize.LOOP,
        )
    line_ids = []
    plane_ids = []
    for lm in gmap.landmarks:
        if lm.kind == "line":
            line_ids.append((lm, graph.add_line_landmark(lm.params)))
        else:
            plane_ids.append((lm, graph.add_plane_landmark(lm.params)))
    for lm, gid in line_ids:
        for sid, kf_id, obs_idx in lm.observations:
            obs = gmap.keyframe(sid, kf_id).line_obs[obs_idx]
            graph.add_line_observation(index[(sid, kf_id)], gid, obs.p_a)
            graph.add_line_observation(index[(sid, kf_id)], gid, obs.p_b)
    for lm, gid in plane_ids:
        for sid, kf_id, obs_idx in lm.observations:
            obs = gmap.keyframe(sid, kf_id).plane_obs[obs_idx]
            for term in obs.terminals:
                graph.add_plane_observation(index[(sid, kf_id)], gid, term)
    report = optimize.bundle_adjust(graph, cfg)
    for key, pose in zip(order, graph.poses):
        gmap.world_poses[key] = pose
    for lm, gid in line_ids:
        lm.params = graph.line_params[gid].copy()
        _sync_landmark_to_params(lm)
    for lm, gid in plane_ids:
        lm.params = graph.plane_params[gid].copy()
        _sync_landmark_to_params(lm)
    return report


# ---------------------------------------------------------------------------
# storage report
# ---------------------------------------------------------------------------


@dataclass
class MapStats:
    n_sessions: int
    n_keyframes: int
    n_landmarks: int
    n_observations: int
    full_bytes: int
    landmark_only_bytes: int
    cloud_bytes: dict  # leaf size -> bytes of the downsampled cloud

    def rows(self) -> list[list]:
        rows = [
            ["sessions", self.n_sessions],
            ["keyframes", self.n_keyframes],
            ["landmarks", self.n_landmarks],
            ["observations", self.n_observations],
            ["full_map_bytes", self.full_bytes],
            ["landmark_only_bytes", self.landmark_only_bytes],
        ]
        for leaf, size in sorted(self.cloud_bytes.items()):
            rows.append([f"cloud_bytes_r{leaf:g}", size])
        return rows


def downsample_count(points: np.ndarray, leaf: float) -> int:
    """Number of occupied voxels at the given leaf size (one point kept each)."""
    if len(points) == 0:
        return 0
    cells = np.floor(np.asarray(points, float) / leaf).astype(np.int64)
    return len(np.unique(cells, axis=0))


def map_stats(
    gmap: GlobalMap,
    cloud_points: np.ndarray | None = None,
    leaf_sizes: tuple[float, ...] = (0.1, 0.3, 0.5),
) -> MapStats:
    """Storage and content report; 16 bytes per cloud point (x,y,z,intensity)."""
    cloud_bytes = {}
    if cloud_points is not None and len(cloud_points):
        for leaf in leaf_sizes:
            cloud_bytes[leaf] = downsample_count(cloud_points, leaf) * 16
    else:
        for leaf in leaf_sizes:
            cloud_bytes[leaf] = 0
    return MapStats(
        n_sessions=len(gmap.sessions),
        n_keyframes=sum(len(rec.keyframes) for rec in gmap.sessions),
        n_landmarks=len(gmap.landmarks),
        n_observations=gmap.observation_count(),
        full_bytes=len(serialize_global(gmap).encode("utf-8")),
        landmark_only_bytes=len(serialize_landmark_only(gmap)),
        cloud_bytes=cloud_bytes,
    )


def save_global(gmap: GlobalMap, path) -> None:
    Path(path).write_text(serialize_global(gmap), encoding="utf-8")


def save_submap(session: Session, path) -> None:
    Path(path).write_text(serialize_submap(session), encoding="utf-8")
