"""Synthetic worlds, sessions, and trajectory metrics.

Replaces a full dataset at desk scale: deterministic worlds of near-vertical
poles, yawed walls, and a ground disk; sessions sample labeled clouds from
visible landmarks with Gaussian point noise and label corruption, and
odometry is ground truth composed with per-step noise. APE/RPE evaluation
matches the usual LiDAR conventions (closed-form rigid alignment, per-step
relative errors).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import geom
from .config import PipelineConfig
from .errors import LengthMismatch, ValidationError


@dataclass
class WorldSpec:
    seed: int = 0
    n_poles: int = 14
    n_walls: int = 6
    extent_m: float = 30.0          # half-size of the placement square
    center_x: float = 0.0
    center_y: float = 0.0
    pole_height_m: float = 4.0
    pole_tilt_max_deg: float = 5.0
    wall_len_min_m: float = 4.0
    wall_len_max_m: float = 8.0
    wall_height_m: float = 2.5
    ground_radius_m: float = 10.0   # ground sampled within this range of the sensor
    noise_sigma_m: float = 0.04
    label_corruption: float = 0.2

    def __post_init__(self):
        if self.noise_sigma_m < 0:
            raise ValidationError("noise sigma must be >= 0")
        if not 0.0 <= self.label_corruption <= 1.0:
            raise ValidationError("label corruption must be in [0, 1]")


@dataclass
class TrajectorySpec:
    kind: str = "circuit"           # "circuit" | "line"
    center_x: float = 0.0
    center_y: float = 0.0
    radius_m: float = 18.0
    n_keyframes: int = 24
    start_angle_deg: float = 0.0
    z: float = 1.5
    heading_deg: float = 0.0        # for "line"
    step_m: float = 2.0             # for "line"


@dataclass
class Pole:
    base: np.ndarray
    direction: np.ndarray           # unit, near +z
    height: float


@dataclass
class Wall:
    center: np.ndarray
    normal: np.ndarray              # unit, horizontal
    along: np.ndarray               # unit, horizontal, normal x along = up-ish
    length: float
    height: float
    label: str


@dataclass
class World:
    spec: WorldSpec
    poles: list[Pole]
    walls: list[Wall]
    ground_z: float = 0.0

    def truth_lines(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(direction, centroid) of every pole landmark."""
        return [
            (p.direction, p.base + p.direction * (p.height / 2.0)) for p in self.poles
        ]

    def truth_planes(self) -> list[tuple[np.ndarray, np.ndarray, str]]:
        """(normal, centroid, label) of every wall plus the ground."""
        out = [(w.normal, w.center, w.label) for w in self.walls]
        out.append((np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, self.ground_z]), "road"))
        return out


def gen_world(spec: WorldSpec) -> World:
    """Deterministic world from the spec seed.

    Pole directions stay within the tilt budget of +z and wall normals are
    yawed at least ~5 degrees off the +-x axis, so nothing approaches the
    parameterization singularity.
    """
    rng = np.random.default_rng(spec.seed)
    center = np.array([spec.center_x, spec.center_y])
    poles = []
    positions: list[np.ndarray] = []
    guard = 0
    while len(poles) < spec.n_poles and guard < 10000:
        guard += 1
        xy = center + rng.uniform(-spec.extent_m, spec.extent_m, size=2)
        if any(np.linalg.norm(xy - q) < 3.0 for q in positions):
            continue
        positions.append(xy)
        tilt = np.deg2rad(rng.uniform(0.0, spec.pole_tilt_max_deg))
        azim = rng.uniform(0.0, 2.0 * np.pi)
        direction = np.array(
            [np.sin(tilt) * np.cos(azim), np.sin(tilt) * np.sin(azim), np.cos(tilt)]
        )
        height = spec.pole_height_m * rng.uniform(0.8, 1.2)
        poles.append(Pole(np.array([xy[0], xy[1], 0.0]), direction, height))
    walls = []
    for w in range(spec.n_walls):
        xy = center + rng.uniform(-spec.extent_m, spec.extent_m, size=2)
        # axis-aligned-ish with a 5..20 degree yaw so normals avoid +-x
        base_yaw = rng.choice([0.0, np.pi / 2.0])
        yaw = base_yaw + np.deg2rad(rng.uniform(5.0, 20.0)) * rng.choice([-1.0, 1.0])
        along = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        normal = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
        length = rng.uniform(spec.wall_len_min_m, spec.wall_len_max_m)
        label = "building" if w % 2 == 0 else "fence"
        walls.append(
            Wall(
                center=np.array([xy[0], xy[1], spec.wall_height_m / 2.0]),
                normal=normal,
                along=along,
                length=length,
                height=spec.wall_height_m,
                label=label,
            )
        )
    return World(spec=spec, poles=poles, walls=walls)


def trajectory_poses(traj: TrajectorySpec) -> list[geom.RigidPose]:
    """Ground-truth keyframe poses along the requested path."""
    poses = []
    if traj.kind == "circuit":
        for k in range(traj.n_keyframes):
            ang = np.deg2rad(traj.start_angle_deg) + 2.0 * np.pi * k / traj.n_keyframes
            pos = np.array(
                [
                    traj.center_x + traj.radius_m * np.cos(ang),
                    traj.center_y + traj.radius_m * np.sin(ang),
                    traj.z,
                ]
            )
            heading = ang + np.pi / 2.0  # tangent, counter-clockwise
            rot = geom.so3_exp(np.array([0.0, 0.0, heading]))
            poses.append(geom.RigidPose(rot, pos))
    elif traj.kind == "line":
        heading = np.deg2rad(traj.heading_deg)
        rot = geom.so3_exp(np.array([0.0, 0.0, heading]))
        step = np.array([np.cos(heading), np.sin(heading), 0.0]) * traj.step_m
        start = np.array([traj.center_x, traj.center_y, traj.z])
        for k in range(traj.n_keyframes):
            poses.append(geom.RigidPose(rot.copy(), start + step * k))
    else:
        raise ValidationError(f"unknown trajectory kind '{traj.kind}'")
    return poses


CATEGORIES = ("pole", "building", "fence", "road", "other")


def _sample_pole(pole: Pole, rng, radial_scale: float) -> np.ndarray:
    n = max(12, int(pole.height / 0.07))
    ts = np.linspace(0.0, pole.height, n)
    pts = pole.base[None, :] + ts[:, None] * pole.direction[None, :]
    if radial_scale > 0:
        radial = rng.normal(scale=radial_scale, size=(n, 3))
        radial -= np.outer(radial @ pole.direction, pole.direction)
        pts = pts + radial
    return pts


def _sample_wall(wall: Wall, rng, spacing: float = 0.2) -> np.ndarray:
    nu = max(2, int(wall.length / spacing))
    nv = max(2, int(wall.height / spacing))
    us = np.linspace(-wall.length / 2.0, wall.length / 2.0, nu)
    vs = np.linspace(-wall.height / 2.0, wall.height / 2.0, nv)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    up = np.cross(wall.normal, wall.along)
    pts = (
        wall.center[None, :]
        + uu.reshape(-1, 1) * wall.along[None, :]
        + vv.reshape(-1, 1) * up[None, :]
    )
    return pts


def _sample_ground(
    center_xy: np.ndarray,
    radius: float,
    z: float,
    world_center: np.ndarray,
    world_extent: float,
    spacing: float = 0.2,
):
    """Ground disk around the sensor, clipped to the world's paved square."""
    r = np.arange(-radius, radius + spacing, spacing)
    xx, yy = np.meshgrid(center_xy[0] + r, center_xy[1] + r, indexing="ij")
    mask = (xx - center_xy[0]) ** 2 + (yy - center_xy[1]) ** 2 <= radius**2
    mask &= np.abs(xx - world_center[0]) <= world_extent
    mask &= np.abs(yy - world_center[1]) <= world_extent
    pts = np.stack([xx[mask], yy[mask], np.full(int(mask.sum()), z)], axis=1)
    return pts


@dataclass
class SessionData:
    gt_poses: list[geom.RigidPose]
    odom_poses: list[geom.RigidPose]
    clouds: list  # extract.LabeledCloud per keyframe, local frame


def gen_session(
    world: World,
    traj: TrajectorySpec,
    config: PipelineConfig | None = None,
    seed: int = 0,
    noise_sigma: float | None = None,
    label_corruption: float | None = None,
    odom_sigma_trans: float | None = None,
    odom_sigma_rot_deg: float | None = None,
    surface_spacing: float = 0.2,
) -> SessionData:
    """Sample labeled clouds at every keyframe plus noisy odometry.

    `surface_spacing` sets the wall/ground sampling grid (the scan density).
    """
    from .extract import LabeledCloud  # local import to avoid a cycle

    cfg = config or PipelineConfig()
    sigma = world.spec.noise_sigma_m if noise_sigma is None else noise_sigma
    corrupt = world.spec.label_corruption if label_corruption is None else label_corruption
    s_t = cfg.odom_sigma_trans_m if odom_sigma_trans is None else odom_sigma_trans
    s_r = np.deg2rad(cfg.odom_sigma_rot_deg if odom_sigma_rot_deg is None else odom_sigma_rot_deg)
    rng = np.random.default_rng(seed)
    gt = trajectory_poses(traj)
    world_center = np.array([world.spec.center_x, world.spec.center_y])
    pole_radial = min(0.015, sigma)

    clouds = []
    for pose in gt:
        pts_world = [np.zeros((0, 3))]
        labels = []
        sensor = pose.translation
        for pole in world.poles:
            center = pole.base + pole.direction * pole.height / 2.0
            if np.linalg.norm(center - sensor) > cfg.range_gate_m:
                continue
            pts = _sample_pole(pole, rng, pole_radial)
            pts_world.append(pts)
            labels.extend(["pole"] * len(pts))
        for wall in world.walls:
            if np.linalg.norm(wall.center - sensor) > cfg.range_gate_m:
                continue
            pts = _sample_wall(wall, rng, spacing=surface_spacing)
            pts_world.append(pts)
            labels.extend([wall.label] * len(pts))
        ground = _sample_ground(
            sensor[:2], world.spec.ground_radius_m, world.ground_z,
            world_center, world.spec.extent_m, spacing=surface_spacing,
        )
        pts_world.append(ground)
        labels.extend(["road"] * len(ground))
        pts = np.vstack(pts_world)
        if sigma > 0:
            pts = pts + rng.normal(scale=sigma, size=pts.shape)
        if corrupt > 0:
            flip = rng.random(len(labels)) < corrupt
            alts = rng.integers(1, len(CATEGORIES), size=len(labels))
            labels = [
                CATEGORIES[(CATEGORIES.index(lab) + alt) % len(CATEGORIES)] if f else lab
                for lab, alt, f in zip(labels, alts, flip)
            ]
        local = pose.inverse().transform(pts)
        clouds.append(LabeledCloud(points=local, labels=list(labels)))

    odom = [gt[0]]
    for k in range(1, len(gt)):
        delta = gt[k - 1].inverse().compose(gt[k])
        noise = geom.RigidPose(
            geom.so3_exp(rng.normal(scale=s_r, size=3)),
            rng.normal(scale=s_t, size=3),
        )
        odom.append(odom[-1].compose(delta.compose(noise)))
    return SessionData(gt_poses=gt, odom_poses=odom, clouds=clouds)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    ape_rot_deg: float
    ape_trans_m: float
    rpe_rot_deg: float
    rpe_trans_m: float

    def rows(self) -> list[list]:
        return [
            ["ape_rot_deg", self.ape_rot_deg],
            ["ape_trans_m", self.ape_trans_m],
            ["rpe_rot_deg", self.rpe_rot_deg],
            ["rpe_trans_m", self.rpe_trans_m],
        ]

    def pretty(self) -> str:
        return (
            f"{'metric':<14}{'value':>14}\n"
            f"{'APE rot (deg)':<14}{self.ape_rot_deg:>14.6f}\n"
            f"{'APE trans (m)':<14}{self.ape_trans_m:>14.6f}\n"
            f"{'RPE rot (deg)':<14}{self.rpe_rot_deg:>14.6f}\n"
            f"{'RPE trans (m)':<14}{self.rpe_trans_m:>14.6f}"
        )


def align_rigid(source: np.ndarray, target: np.ndarray) -> geom.RigidPose:
    """Closed-form rigid transform G minimizing |G(source) - target| (no scale)."""
    sc = source.mean(axis=0)
    tc = target.mean(axis=0)
    h = (source - sc).T @ (target - tc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return geom.RigidPose(rot, tc - rot @ sc)


def evaluate(
    estimated: list[geom.RigidPose], truth: list[geom.RigidPose]
) -> MetricReport:
    """APE after rigid alignment plus per-step RPE, both as RMSE."""
    if len(estimated) != len(truth):
        raise LengthMismatch(f"{len(estimated)} estimated vs {len(truth)} truth poses")
    est_p = np.array([p.translation for p in estimated])
    gt_p = np.array([p.translation for p in truth])
    est_r = np.array([p.rotation for p in estimated])
    gt_r = np.array([p.rotation for p in truth])

    identical = est_p.tobytes() == gt_p.tobytes() and est_r.tobytes() == gt_r.tobytes()
    if identical:
        g = geom.RigidPose.identity()
    else:
        g = align_rigid(est_p, gt_p)
    ap = est_p @ g.rotation.T + g.translation
    ar = np.einsum("ij,njk->nik", g.rotation, est_r)

    ape_t = float(np.sqrt(np.mean(np.sum((ap - gt_p) ** 2, axis=1))))
    rot_errs = geom.so3_log(np.einsum("nji,njk->nik", gt_r, ar)).reshape(-1, 3)
    ape_r = float(np.rad2deg(np.sqrt(np.mean(np.sum(rot_errs**2, axis=1)))))

    if len(estimated) < 2:
        return MetricReport(ape_r, ape_t, 0.0, 0.0)
    dt_err = []
    dr_err = []
    for k in range(len(estimated) - 1):
        de = estimated[k].inverse().compose(estimated[k + 1])
        dg = truth[k].inverse().compose(truth[k + 1])
        err = dg.inverse().compose(de)
        dt_err.append(np.sum(err.translation**2))
        dr_err.append(np.sum(geom.so3_log(err.rotation) ** 2))
    rpe_t = float(np.sqrt(np.mean(dt_err)))
    rpe_r = float(np.rad2deg(np.sqrt(np.mean(dr_err))))
    return MetricReport(ape_r, ape_t, rpe_r, rpe_t)


# ---------------------------------------------------------------------------
# generation spec file (CLI `gen`)
# ---------------------------------------------------------------------------


@dataclass
class GenSpec:
    """World plus per-session trajectories, parsed from one key-value file."""

    world: WorldSpec = field(default_factory=WorldSpec)
    sessions: list[TrajectorySpec] = field(default_factory=list)
    odom_sigma_trans_m: float = 0.02
    odom_sigma_rot_deg: float = 0.2

    @classmethod
    def from_file(cls, path) -> "GenSpec":
        world_fields = {f.name: f for f in fields(WorldSpec)}
        traj_fields = {f.name: f for f in fields(TrajectorySpec)}
        spec = cls()
        session_kv: dict[int, dict] = {}
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("world."):
                name = key[len("world."):]
                if name not in world_fields:
                    raise ValidationError(f"{path}:{lineno}: unknown world key '{name}'")
                typ = world_fields[name].type
                setattr(spec.world, name, int(value) if typ == "int" else float(value))
            elif key.startswith("session."):
                parts = key.split(".")
                if len(parts) != 3:
                    raise ValidationError(f"{path}:{lineno}: expected session.<i>.<key>")
                idx = int(parts[1])
                name = parts[2]
                if name not in traj_fields:
                    raise ValidationError(f"{path}:{lineno}: unknown session key '{name}'")
                session_kv.setdefault(idx, {})[name] = value
            elif key == "odom_sigma_trans_m":
                spec.odom_sigma_trans_m = float(value)
            elif key == "odom_sigma_rot_deg":
                spec.odom_sigma_rot_deg = float(value)
            else:
                raise ValidationError(f"{path}:{lineno}: unknown key '{key}'")
        for idx in sorted(session_kv):
            traj = TrajectorySpec()
            for name, value in session_kv[idx].items():
                typ = traj_fields[name].type
                if typ == "int":
                    setattr(traj, name, int(value))
                elif typ == "str":
                    setattr(traj, name, value)
                else:
                    setattr(traj, name, float(value))
            spec.sessions.append(traj)
        if not spec.sessions:
            spec.sessions.append(TrajectorySpec())
        return spec
