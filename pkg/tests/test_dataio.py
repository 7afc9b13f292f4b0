"""Binary/text formats, canonical JSON, and the config file round trip."""

import numpy as np
import pytest

from lpmap import dataio, geom
from lpmap.config import PipelineConfig
from lpmap.errors import ParseError, ValidationError


def test_scan_bin_round_trip(tmp_path):
    rng = np.random.default_rng(100)
    pts = rng.uniform(-50, 50, (321, 3))
    path = tmp_path / "scan.bin"
    dataio.write_scan_bin(path, pts)
    back = dataio.read_scan_bin(path)
    assert back.shape == (321, 3)
    assert np.max(np.abs(back - pts.astype(np.float32))) == 0
    assert path.stat().st_size == 321 * 16


def test_scan_bin_bad_length(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 10)
    with pytest.raises(ParseError):
        dataio.read_scan_bin(path)


def test_labels_low_16_bits(tmp_path):
    path = tmp_path / "l.label"
    ids = np.array([80, 50, (7 << 16) | 40, 0], dtype=np.uint32)
    dataio.write_labels(path, ids)
    back = dataio.read_labels(path)
    assert list(back) == [80, 50, 40, 0]


def test_poses_txt_round_trip(tmp_path):
    rng = np.random.default_rng(101)
    poses = []
    for _ in range(7):
        ax = rng.normal(size=3)
        ax /= np.linalg.norm(ax)
        poses.append(geom.RigidPose(geom.so3_exp(ax * rng.uniform(-2, 2)),
                                    rng.uniform(-30, 30, 3)))
    path = tmp_path / "poses.txt"
    dataio.write_poses_txt(path, poses)
    back = dataio.read_poses_txt(path)
    for a, b in zip(poses, back):
        assert np.max(np.abs(a.matrix() - b.matrix())) < 1e-11


def test_poses_txt_rejects_short_line(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("1 0 0 0 0 1\n", encoding="utf-8")
    with pytest.raises(ParseError):
        dataio.read_poses_txt(path)


def test_canonical_json_idempotent():
    rng = np.random.default_rng(102)
    doc = {
        "b": rng.uniform(-1e6, 1e6, 17),
        "a": [{"x": float(v)} for v in rng.normal(size=9)],
        "n": -0.0,
        "i": 42,
    }
    import json

    text1 = dataio.canonical_json_dumps(doc)
    text2 = dataio.canonical_json_dumps(json.loads(text1))
    assert text1 == text2


def test_write_csv(tmp_path):
    path = tmp_path / "r.csv"
    dataio.write_csv(path, ["a", "b"], [[1, 2.5], ["x", 0.1234567891234]])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "a,b"
    assert lines[1] == "1,2.5"
    assert lines[2] == "x,0.123456789"


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig(voxel_size_m=0.8, block_stride=3)
    cfg.label_ids["pole"] = 81
    path = tmp_path / "cfg.txt"
    cfg.to_file(path)
    back = PipelineConfig.from_file(path)
    assert back.voxel_size_m == 0.8
    assert back.block_stride == 3
    assert back.label_ids["pole"] == 81
    assert back.category_of(81) == "pole"
    assert back.category_of(12345) == "other"


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("no_such_option = 3\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        PipelineConfig.from_file(path)
