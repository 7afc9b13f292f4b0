"""Command-line pipeline driver.

Subcommands: gen, extract, merge, ba, localize, eval, stats. Exit codes:
0 success, 2 validation/parse error, 3 no-overlap or lost track, 4 solver
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataio, extract, harness, localize, server
from .config import PipelineConfig
from .errors import (
    LostTrack,
    LpmapError,
    NoOverlap,
    NotConverged,
    NumericalFailure,
    ParseError,
    ValidationError,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NO_OVERLAP = 3
EXIT_SOLVER = 4


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return PipelineConfig.from_file(args.config)
    return PipelineConfig()


def cmd_gen(args) -> int:
    spec = harness.GenSpec.from_file(args.spec)
    if args.seed is not None:
        spec.world.seed = args.seed
    cfg = _load_config(args)
    world = harness.gen_world(spec.world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth_doc = {
        "seed": spec.world.seed,
        "lines": [{"direction": d, "centroid": c} for d, c in world.truth_lines()],
        "planes": [
            {"normal": n, "centroid": c, "label": lab}
            for n, c, lab in world.truth_planes()
        ],
    }
    (out / "world_truth.json").write_text(
        dataio.canonical_json_dumps(truth_doc), encoding="utf-8"
    )
    for sidx, traj in enumerate(spec.sessions):
        data = harness.gen_session(
            world,
            traj,
            cfg,
            seed=spec.world.seed + 1000 * (sidx + 1),
            odom_sigma_trans=spec.odom_sigma_trans_m,
            odom_sigma_rot_deg=spec.odom_sigma_rot_deg,
        )
        sdir = out / f"session_{sidx}"
        (sdir / "scans").mkdir(parents=True, exist_ok=True)
        (sdir / "labels").mkdir(parents=True, exist_ok=True)
        for k, cloud in enumerate(data.clouds):
            dataio.write_scan_bin(sdir / "scans" / f"{k:06d}.bin", cloud.points)
            ids = np.array(
                [cfg.label_ids.get(lab, 0) for lab in cloud.labels], dtype=np.uint32
            )
            dataio.write_labels(sdir / "labels" / f"{k:06d}.label", ids)
        dataio.write_poses_txt(sdir / "poses.txt", data.odom_poses)
        dataio.write_poses_txt(sdir / "poses_gt.txt", data.gt_poses)
    print(f"generated {len(spec.sessions)} session(s) under {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    poses = dataio.read_poses_txt(args.poses)
    scan_files = sorted(Path(args.scans).glob("*.bin"))
    label_files = sorted(Path(args.labels).glob("*.label"))
    if len(scan_files) != len(poses) or len(label_files) != len(poses):
        raise ValidationError(
            f"{len(scan_files)} scans / {len(label_files)} labels / {len(poses)} poses"
        )
    anchors = extract.select_keyframes(poses, cfg.keyframe_trans_m, cfg.keyframe_rot_deg)
    kf_poses = [poses[a] for a in anchors]
    clouds = []
    for a in anchors:
        pts = dataio.read_scan_bin(scan_files[a])
        ids = dataio.read_labels(label_files[a])
        if len(ids) != len(pts):
            raise ValidationError(f"{scan_files[a]}: label/point count mismatch")
        labels = [cfg.category_of(int(i)) for i in ids]
        clouds.append(extract.LabeledCloud(points=pts, labels=labels))
    keyframes, lmap = extract.extract_session(kf_poses, clouds, cfg)
    session = server.session_from_extraction(args.session_id, keyframes, lmap)
    server.save_submap(session, args.out)
    print(
        f"session {args.session_id}: {len(keyframes)} keyframes, "
        f"{len(lmap.landmarks)} landmarks -> {args.out}"
    )
    return EXIT_OK


def cmd_merge(args) -> int:
    cfg = _load_config(args)
    gmap = server.GlobalMap()
    unanchored = 0
    reports = []
    for path in args.submaps:
        session = server.ingest_submap(path)
        report = server.merge_session(gmap, session, cfg, threads=args.threads)
        reports.append(report)
        flag = " (no overlap, kept unanchored)" if report.no_overlap else ""
        print(
            f"merged session {report.session_id}: accepted loops {report.accepted}, "
            f"landmarks {report.landmarks_total}{flag}"
        )
        unanchored += int(report.no_overlap)
    server.save_global(gmap, args.out)
    if args.report and reports:
        fields = list(reports[0].to_dict())
        dataio.write_csv(
            args.report, fields, [[r.to_dict()[f] for f in fields] for r in reports]
        )
    print(f"global map -> {args.out}")
    return EXIT_NO_OVERLAP if unanchored else EXIT_OK


def cmd_ba(args) -> int:
    cfg = _load_config(args)
    gmap = server.load_global(args.map)
    report = server.run_bundle_adjustment(gmap, cfg)
    out = args.out or args.map
    server.save_global(gmap, out)
    if args.log:
        Path(args.log).write_text(report.to_log_text(), encoding="utf-8")
    print(
        f"bundle adjustment: cost {report.initial_cost:.6e} -> {report.final_cost:.6e} "
        f"in {report.iterations} iterations -> {out}"
    )
    return EXIT_OK if report.converged else EXIT_SOLVER


def cmd_localize(args) -> int:
    cfg = _load_config(args)
    gmap = server.load_global(args.map)
    scan_files = sorted(Path(args.scans).glob("*.bin"))
    label_files = sorted(Path(args.labels).glob("*.label"))
    if len(scan_files) != len(label_files):
        raise ValidationError("scan/label file count mismatch")
    clouds = []
    for sf, lf in zip(scan_files, label_files):
        pts = dataio.read_scan_bin(sf)
        ids = dataio.read_labels(lf)
        labels = [cfg.category_of(int(i)) for i in ids]
        clouds.append(extract.LabeledCloud(points=pts, labels=labels))
    prior = dataio.read_poses_txt(args.init)[0]
    truth = dataio.read_poses_txt(args.gt) if args.gt else None
    poses, states, report, lost = localize.run_sequence(
        clouds, gmap.landmarks, prior, cfg, truth
    )
    dataio.write_poses_txt(args.out, poses)
    if args.latency:
        dataio.write_csv(
            args.latency,
            ["scan", "latency_ms", "inliers", "rounds"],
            [[k, s.latency_ms, s.inliers, s.rounds] for k, s in enumerate(states)],
        )
    if report is not None:
        print(report.pretty())
    mean_ms = float(np.mean([s.latency_ms for s in states])) if states else 0.0
    print(f"tracked {len(poses)}/{len(clouds)} scans, mean latency {mean_ms:.1f} ms")
    if lost:
        print("lost track", file=sys.stderr)
        return EXIT_NO_OVERLAP
    return EXIT_OK


def cmd_eval(args) -> int:
    est = dataio.read_poses_txt(args.est)
    gt = dataio.read_poses_txt(args.gt)
    report = harness.evaluate(est, gt)
    print(report.pretty())
    if args.out:
        dataio.write_csv(args.out, ["metric", "value"], report.rows())
    return EXIT_OK


def cmd_stats(args) -> int:
    gmap = server.load_global(args.map)
    cloud = None
    if args.clouds:
        pts = []
        poses = dataio.read_poses_txt(args.poses) if args.poses else None
        files = sorted(Path(args.clouds).glob("*.bin"))
        for k, f in enumerate(files):
            p = dataio.read_scan_bin(f)
            if poses is not None and k < len(poses):
                p = poses[k].transform(p)
            pts.append(p)
        cloud = np.vstack(pts) if pts else None
    stats = server.map_stats(gmap, cloud)
    rows = stats.rows()
    width = max(len(str(r[0])) for r in rows)
    for name, value in rows:
        print(f"{name:<{width}}  {value}")
    if args.out:
        dataio.write_csv(args.out, ["field", "value"], rows)
    if args.landmark_map:
        Path(args.landmark_map).write_bytes(server.serialize_landmark_only(gmap))
        print(f"landmark-only map -> {args.landmark_map}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lpmap", description="line/plane landmark mapping pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic world and sessions")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("extract", help="scans + labels + poses -> sub-map file")
    p.add_argument("--scans", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--session-id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("merge", help="merge sub-maps into a global map")
    p.add_argument("submaps", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="per-session merge report CSV")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("ba", help="re-run bundle adjustment on a map")
    p.add_argument("--map", required=True)
    p.add_argument("--out")
    p.add_argument("--log")
    p.add_argument("--config")
    p.set_defaults(func=cmd_ba)

    p = sub.add_parser("localize", help="track scans against a map")
    p.add_argument("--map", required=True)
    p.add_argument("--scans", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--init", required=True, help="pose file with the first prior")
    p.add_argument("--gt", help="ground-truth poses for an APE report")
    p.add_argument("--out", required=True)
    p.add_argument("--latency", help="per-scan latency CSV")
    p.add_argument("--config")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="compare two trajectories")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="map storage and content report")
    p.add_argument("--map", required=True)
    p.add_argument("--clouds", help="directory of raw scan .bin files")
    p.add_argument("--poses", help="poses to place the clouds in the world")
    p.add_argument("--out")
    p.add_argument("--landmark-map", help="write the compact (L) landmark map here")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NoOverlap, LostTrack) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_OVERLAP
    except (NumericalFailure, NotConverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except LpmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
