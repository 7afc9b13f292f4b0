#!/usr/bin/env python3
"""Multi-session map merging end to end.

Three noisy sessions over one world are merged one at a time: block
association, registration, PCM pruning, pose graph optimization, landmark
fusion, and bundle adjustment. A spatially disjoint session is then offered
and must come back flagged NoOverlap instead of being force-merged.
"""

from lpmap import extract, harness, server
from lpmap.config import PipelineConfig

cfg = PipelineConfig()
world = harness.gen_world(harness.WorldSpec(seed=207, n_poles=14, n_walls=6, extent_m=24.0))

trajs = [
    harness.TrajectorySpec(kind="circuit", radius_m=16.0, n_keyframes=16),
    harness.TrajectorySpec(kind="circuit", radius_m=13.0, n_keyframes=16, start_angle_deg=45.0),
    harness.TrajectorySpec(kind="circuit", radius_m=18.0, n_keyframes=16, start_angle_deg=90.0),
]
sessions, gts = [], []
for sid, traj in enumerate(trajs):
    data = harness.gen_session(world, traj, cfg, seed=1000 + sid,
                               noise_sigma=0.04, label_corruption=0.2,
                               odom_sigma_trans=0.02, odom_sigma_rot_deg=0.2)
    keyframes, lmap = extract.extract_session(data.odom_poses, data.clouds, cfg)
    sessions.append(server.session_from_extraction(sid, keyframes, lmap))
    gts.append(data.gt_poses)
    print(f"extracted session {sid}: {len(keyframes)} keyframes, {len(lmap.landmarks)} landmarks")

gmap = server.GlobalMap()
for session in sessions:
    r = server.merge_session(gmap, session, cfg)
    print(f"\nmerge session {r.session_id}:")
    print(f"  block pairs tried {r.block_pairs}, refined loops {r.refined}, "
          f"accepted after PCM {r.accepted}")
    if r.accepted:
        print(f"  PGO cost {r.pgo_initial_cost:.4f} -> {r.pgo_final_cost:.4f} "
              f"in {r.pgo_iterations} iterations")
        print(f"  landmarks fused: {r.merged_by_graph} by graph match, "
              f"{r.merged_by_distance} by centroid distance")
        print(f"  BA cost {r.ba_initial_cost:.1f} -> {r.ba_final_cost:.1f}")
    print(f"  map now: {r.landmarks_total} landmarks, {r.observations_total} observations")

est, truth = [], []
for sid in range(3):
    rec = gmap.session(sid)
    for kf in rec.keyframes:
        est.append(gmap.world_poses[(sid, kf.id)])
        truth.append(gts[sid][kf.id])
rep = harness.evaluate(est, truth)
print(f"\npost-merge trajectory accuracy over all sessions: "
      f"APE {rep.ape_trans_m*100:.1f} cm / {rep.ape_rot_deg:.3f} deg")

print("\n=== a session from 500 m away ===")
far_world = harness.gen_world(harness.WorldSpec(seed=208, n_poles=10, n_walls=4,
                                                extent_m=18.0, center_x=500.0, center_y=500.0))
far_traj = harness.TrajectorySpec(kind="circuit", center_x=500.0, center_y=500.0,
                                  radius_m=12.0, n_keyframes=12)
far = harness.gen_session(far_world, far_traj, cfg, seed=1100, noise_sigma=0.04,
                          label_corruption=0.2, odom_sigma_trans=0.02, odom_sigma_rot_deg=0.2)
far_kf, far_lmap = extract.extract_session(far.odom_poses, far.clouds, cfg)
r = server.merge_session(gmap, server.session_from_extraction(3, far_kf, far_lmap), cfg)
print(f"no_overlap={r.no_overlap}, anchored={r.anchored} "
      f"(kept in its own frame so a later session can bridge it)")

stats = server.map_stats(gmap)
print(f"\nstorage: full map {stats.full_bytes/1024:.0f} KiB, "
      f"landmark-only (L) {stats.landmark_only_bytes/1024:.0f} KiB")
