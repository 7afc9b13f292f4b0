"""End-to-end CLI: gen -> extract -> merge -> localize -> eval -> stats."""

import json
from pathlib import Path

import pytest

from lpmap import cli, dataio

GEN_SPEC = """
world.seed = 11
world.n_poles = 10
world.n_walls = 4
world.extent_m = 18.0
world.noise_sigma_m = 0.02
world.label_corruption = 0.0
odom_sigma_trans_m = 0.01
odom_sigma_rot_deg = 0.1
session.0.kind = circuit
session.0.radius_m = 13.0
session.0.n_keyframes = 12
session.1.kind = circuit
session.1.radius_m = 11.0
session.1.n_keyframes = 12
session.1.start_angle_deg = 30.0
"""


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    spec = out / "spec.cfg"
    spec.write_text(GEN_SPEC, encoding="utf-8")
    assert cli.main(["gen", "--spec", str(spec), "--out", str(out / "data")]) == 0
    return out / "data"


def test_gen_outputs(gen_dir):
    assert (gen_dir / "world_truth.json").exists()
    for s in (0, 1):
        sdir = gen_dir / f"session_{s}"
        scans = sorted((sdir / "scans").glob("*.bin"))
        labels = sorted((sdir / "labels").glob("*.label"))
        poses = dataio.read_poses_txt(sdir / "poses.txt")
        assert len(scans) == len(labels) == len(poses) == 12
        assert (sdir / "poses_gt.txt").exists()


@pytest.fixture(scope="module")
def submaps(gen_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("submaps")
    paths = []
    for s in (0, 1):
        sdir = gen_dir / f"session_{s}"
        sub = out / f"s{s}.json"
        code = cli.main(
            [
                "extract",
                "--scans", str(sdir / "scans"),
                "--labels", str(sdir / "labels"),
                "--poses", str(sdir / "poses.txt"),
                "--session-id", str(s),
                "--out", str(sub),
            ]
        )
        assert code == 0
        paths.append(sub)
    return paths


@pytest.fixture(scope="module")
def global_map(submaps, tmp_path_factory):
    out = tmp_path_factory.mktemp("merged") / "global.json"
    code = cli.main(
        ["merge", *[str(p) for p in submaps], "--out", str(out),
         "--report", str(out.with_suffix(".csv"))]
    )
    assert code == 0
    return out


def test_merge_output_valid(global_map):
    doc = json.loads(global_map.read_text(encoding="utf-8"))
    assert len(doc["sessions"]) == 2
    assert len(doc["loops"]) >= 1
    assert len(doc["merge_history"]) == 2
    report = global_map.with_suffix(".csv").read_text(encoding="utf-8")
    assert report.startswith("session_id,") and len(report.splitlines()) == 3


def test_cli_determinism(gen_dir, submaps, tmp_path):
    # repeat extract + merge: byte-identical outputs
    sdir = gen_dir / "session_0"
    again = tmp_path / "s0_again.json"
    cli.main(
        [
            "extract",
            "--scans", str(sdir / "scans"),
            "--labels", str(sdir / "labels"),
            "--poses", str(sdir / "poses.txt"),
            "--session-id", "0",
            "--out", str(again),
        ]
    )
    assert again.read_bytes() == Path(submaps[0]).read_bytes()
    merged_again = tmp_path / "global_again.json"
    cli.main(["merge", *[str(p) for p in submaps], "--out", str(merged_again)])
    merged_ref = tmp_path / "global_ref.json"
    cli.main(["merge", *[str(p) for p in submaps], "--out", str(merged_ref)])
    assert merged_again.read_bytes() == merged_ref.read_bytes()


def test_ba_command(global_map, tmp_path):
    out = tmp_path / "ba.json"
    log = tmp_path / "ba.log"
    code = cli.main(["ba", "--map", str(global_map), "--out", str(out), "--log", str(log)])
    assert code == 0
    assert out.exists()
    assert "cost=" in log.read_text(encoding="utf-8")


def test_localize_and_eval(global_map, gen_dir, tmp_path):
    sdir = gen_dir / "session_0"
    init = tmp_path / "init.txt"
    gt = dataio.read_poses_txt(sdir / "poses_gt.txt")
    dataio.write_poses_txt(init, [gt[0]])
    traj = tmp_path / "traj.txt"
    latency = tmp_path / "latency.csv"
    code = cli.main(
        [
            "localize",
            "--map", str(global_map),
            "--scans", str(sdir / "scans"),
            "--labels", str(sdir / "labels"),
            "--init", str(init),
            "--gt", str(sdir / "poses_gt.txt"),
            "--out", str(traj),
            "--latency", str(latency),
        ]
    )
    # keyframes are 2 m apart here: tracking every scan is not guaranteed,
    # but the command must produce a trajectory and latency CSV either way
    assert code in (0, 3)
    assert latency.exists()
    est = dataio.read_poses_txt(traj)
    assert len(est) >= 1

    report = tmp_path / "report.csv"
    code = cli.main(
        ["eval", "--est", str(sdir / "poses_gt.txt"), "--gt", str(sdir / "poses.txt"),
         "--out", str(report)]
    )
    assert code == 0
    rows = report.read_text(encoding="utf-8").splitlines()
    assert rows[0] == "metric,value" and len(rows) == 5


def test_stats_command(global_map, gen_dir, tmp_path):
    out = tmp_path / "stats.csv"
    code = cli.main(
        [
            "stats",
            "--map", str(global_map),
            "--clouds", str(gen_dir / "session_0" / "scans"),
            "--poses", str(gen_dir / "session_0" / "poses.txt"),
            "--out", str(out),
        ]
    )
    assert code == 0
    text = out.read_text(encoding="utf-8")
    assert "landmark_only_bytes" in text and "cloud_bytes_r0.1" in text


def test_exit_codes(tmp_path):
    bad = tmp_path / "nope.json"
    assert cli.main(["ba", "--map", str(bad)]) == 2
    short = tmp_path / "short.cfg"
    short.write_text("world.bogus = 1\n", encoding="utf-8")
    assert cli.main(["gen", "--spec", str(short), "--out", str(tmp_path / "o")]) == 2
