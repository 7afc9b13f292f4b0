"""Pipeline configuration: one flat dataclass, one key-value file format.

The config file is plain text, one `key = value` per line, `#` comments.
Keys are the dataclass field names; label ids use `labels.<category>`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ValidationError

DEFAULT_LABEL_IDS = {"pole": 80, "building": 50, "fence": 51, "road": 40}

SEMANTIC_CATEGORIES = ("pole", "building", "fence", "road", "other")
LINE_LABELS = ("pole",)
PLANE_LABELS = ("building", "fence", "road")


@dataclass
class PipelineConfig:
    # keyframe selection
    keyframe_trans_m: float = 2.0
    keyframe_rot_deg: float = 10.0
    # pole clustering and line fitting
    dbscan_eps_m: float = 0.5
    dbscan_min_pts: int = 10
    linearity_min: float = 0.9
    min_segment_len_m: float = 0.5
    # plane extraction
    voxel_size_m: float = 1.0
    min_voxel_points: int = 20
    planarity_min: float = 0.6
    rhombus_scale: float = 2.0
    # landmark association during extraction
    line_match_dist_m: float = 1.0
    plane_match_dist_m: float = 1.5
    match_angle_deg: float = 15.0
    # blocks and semantic graphs
    block_radius_m: float = 30.0
    block_stride: int = 5
    coplanar_angle_deg: float = 5.0
    coplanar_dist_m: float = 0.2
    # association solver
    affinity_sigma: float = 0.15
    min_assoc: int = 3
    # registration and PCM
    huber_coarse_m: float = 0.5
    huber_refine_m: float = 0.1
    refine_dist_gate_m: float = 2.0
    refine_angle_gate_deg: float = 20.0
    refine_max_outer: int = 10
    pcm_gamma_rot_rad: float = 0.1
    pcm_gamma_trans_m: float = 0.5
    min_loop_inliers: int = 5
    # optimizer
    lambda_init: float = 1e-4
    max_iterations: int = 100
    cost_rel_tol: float = 1e-9
    step_tol: float = 1e-10
    use_schur: bool = True
    sigma_odo_trans_m: float = 0.05
    sigma_odo_rot_rad: float = 0.01
    sigma_loop_trans_m: float = 0.1
    sigma_loop_rot_rad: float = 0.02
    sigma_line_m: float = 0.05
    sigma_plane_m: float = 0.05
    huber_pose_trans_m: float = 0.5
    huber_pose_rot_rad: float = 0.1
    huber_landmark_m: float = 0.1
    # landmark merging on the server
    merge_dist_m: float = 0.5
    merge_angle_deg: float = 10.0
    # localization
    loc_gate_m: float = 1.0
    loc_rounds: int = 4
    loc_min_inliers: int = 30
    # synthetic generation
    range_gate_m: float = 40.0
    odom_sigma_trans_m: float = 0.02
    odom_sigma_rot_deg: float = 0.2
    point_sigma_m: float = 0.04
    label_corruption: float = 0.2
    # semantic id table (KITTI-style ids)
    label_ids: dict = field(default_factory=lambda: dict(DEFAULT_LABEL_IDS))

    def category_of(self, label_id: int) -> str:
        for cat, lid in self.label_ids.items():
            if lid == label_id:
                return cat
        return "other"

    # -- file round trip ----------------------------------------------------

    def to_file(self, path) -> None:
        lines = ["# lpmap pipeline configuration"]
        for f in fields(self):
            if f.name == "label_ids":
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        for cat, lid in sorted(self.label_ids.items()):
            lines.append(f"labels.{cat} = {lid}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        cfg = cls()
        known = {f.name: f for f in fields(cls) if f.name != "label_ids"}
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key.startswith("labels."):
                cat = key[len("labels."):]
                if cat not in SEMANTIC_CATEGORIES:
                    raise ValidationError(f"{path}:{lineno}: unknown category '{cat}'")
                cfg.label_ids[cat] = int(value)
                continue
            if key not in known:
                raise ValidationError(f"{path}:{lineno}: unknown key '{key}'")
            ftype = known[key].type
            if ftype == "bool":
                setattr(cfg, key, value.lower() in ("1", "true", "yes"))
            elif ftype == "int":
                setattr(cfg, key, int(value))
            else:
                setattr(cfg, key, float(value))
        return cfg
