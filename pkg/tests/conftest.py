"""Shared builders for synthetic fixtures used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from lpmap import geom
from lpmap.config import PipelineConfig
from lpmap.harness import TrajectorySpec, WorldSpec, gen_session, gen_world


def random_pose(rng, max_angle=np.pi / 2, max_trans=5.0) -> geom.RigidPose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    return geom.RigidPose(geom.so3_exp(axis * angle), rng.uniform(-max_trans, max_trans, 3))


def random_line_param(rng) -> geom.LineParam:
    # stay away from the |beta| ~ pi/2 singularity
    return geom.LineParam(
        alpha=rng.uniform(-np.pi, np.pi),
        beta=rng.uniform(-1.2, 1.2),
        x=rng.uniform(-5, 5),
        y=rng.uniform(-5, 5),
    )


def random_plane_param(rng) -> geom.PlaneParam:
    return geom.PlaneParam(
        alpha=rng.uniform(-np.pi, np.pi),
        beta=rng.uniform(-1.2, 1.2),
        d=rng.uniform(-5, 5),
    )


@pytest.fixture(scope="session")
def default_config() -> PipelineConfig:
    return PipelineConfig()


@pytest.fixture(scope="session")
def small_world():
    return gen_world(WorldSpec(seed=7, n_poles=10, n_walls=4, extent_m=20.0))


@pytest.fixture(scope="session")
def clean_session(small_world, default_config):
    """Noise-free session over the small world."""
    traj = TrajectorySpec(kind="circuit", radius_m=14.0, n_keyframes=16)
    return gen_session(
        small_world,
        traj,
        default_config,
        seed=3,
        noise_sigma=0.0,
        label_corruption=0.0,
        odom_sigma_trans=0.0,
        odom_sigma_rot_deg=0.0,
    )
