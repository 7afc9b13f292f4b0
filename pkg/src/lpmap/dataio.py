"""File formats: KITTI-style scans/labels/poses, canonical JSON, CSV reports.

Scans are little-endian float32 quadruples (x, y, z, intensity); label files
carry one uint32 per point whose low 16 bits are the semantic id; pose files
are text with 12 row-major floats of the 3x4 world-from-sensor matrix per
line. Map files are JSON with sorted keys and 9-significant-digit floats so
that serialize(ingest(file)) is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import geom
from .errors import ParseError


def write_scan_bin(path, points: np.ndarray, intensity: np.ndarray | None = None) -> None:
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    inten = (
        np.zeros(len(pts), dtype=np.float32)
        if intensity is None
        else np.asarray(intensity, dtype=np.float32)
    )
    data = np.hstack([pts, inten[:, None]]).astype("<f4")
    data.tofile(str(path))


def read_scan_bin(path) -> np.ndarray:
    raw = np.fromfile(str(path), dtype="<f4")
    if raw.size % 4 != 0:
        raise ParseError(f"{path}: byte length is not a multiple of 16")
    return raw.reshape(-1, 4)[:, :3].astype(float)


def write_labels(path, ids: np.ndarray) -> None:
    np.asarray(ids, dtype="<u4").tofile(str(path))


def read_labels(path) -> np.ndarray:
    raw = np.fromfile(str(path), dtype="<u4")
    return (raw & 0xFFFF).astype(int)


def pose_to_row(pose: geom.RigidPose) -> list[float]:
    m = np.hstack([pose.rotation, pose.translation[:, None]])
    return [float(v) for v in m.reshape(-1)]


def pose_from_row(row) -> geom.RigidPose:
    m = np.asarray(row, dtype=float).reshape(3, 4)
    return geom.RigidPose(m[:, :3].copy(), m[:, 3].copy())


def write_poses_txt(path, poses: list[geom.RigidPose]) -> None:
    lines = [" ".join(f"{v:.12e}" for v in pose_to_row(p)) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_poses_txt(path) -> list[geom.RigidPose]:
    poses = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 12:
            raise ParseError(f"{path}:{lineno}: expected 12 floats, got {len(vals)}")
        try:
            poses.append(pose_from_row([float(v) for v in vals]))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return poses


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------


def _canon(obj):
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_canon(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        # 9 significant digits; reparsing and reformatting is idempotent
        return float(f"{float(obj):.9g}")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def canonical_json_dumps(obj) -> str:
    return json.dumps(_canon(obj), sort_keys=True, indent=1) + "\n"


def load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, float):
                cells.append(f"{v:.9g}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
