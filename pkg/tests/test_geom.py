"""Geometry core: rotation chart, conversions, residuals, analytic Jacobians."""

import numpy as np
import pytest

from lpmap import geom
from lpmap.errors import SingularDirection

from conftest import random_line_param, random_plane_param, random_pose


def test_rot2dof_zero_angles_identity():
    assert np.allclose(geom.rot2dof(0.0, 0.0), np.eye(3))


def test_rot2dof_derived_examples():
    # symbolic evaluation of the 2-DoF rotation at (0, pi/2) and (pi/2, 0)
    assert np.allclose(
        geom.rot2dof(0.0, np.pi / 2), [[0, 0, -1], [0, 1, 0], [1, 0, 0]], atol=1e-12
    )
    assert np.allclose(
        geom.rot2dof(np.pi / 2, 0.0), [[1, 0, 0], [0, 0, 1], [0, -1, 0]], atol=1e-12
    )


def test_rot2dof_orthonormal_random():
    rng = np.random.default_rng(0)
    a = rng.uniform(-np.pi, np.pi, 1000)
    b = rng.uniform(-np.pi / 2, np.pi / 2, 1000)
    r = geom.rot2dof(a, b)
    assert np.max(np.abs(r.transpose(0, 2, 1) @ r - np.eye(3))) < 1e-9
    assert np.max(np.abs(np.linalg.det(r) - 1.0)) < 1e-9


def test_rot2dof_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    h = 1e-7
    for _ in range(20):
        a, b = rng.uniform(-1.3, 1.3, 2)
        da, db = geom.rot2dof_grad(a, b)
        fa = (geom.rot2dof(a + h, b) - geom.rot2dof(a - h, b)) / (2 * h)
        fb = (geom.rot2dof(a, b + h) - geom.rot2dof(a, b - h)) / (2 * h)
        assert np.allclose(da, fa, atol=1e-6)
        assert np.allclose(db, fb, atol=1e-6)


def test_line_to_point_normal_examples():
    pn = geom.line_to_point_normal(geom.LineParam(0, 0, 1, 2))
    assert np.allclose(pn.normal, [0, 0, 1])
    assert np.allclose(pn.point, [1, 2, 0])
    pn = geom.line_to_point_normal(geom.LineParam(0, np.pi / 2, 1, 0))
    assert np.allclose(pn.normal, [-1, 0, 0], atol=1e-12)
    assert np.allclose(pn.point, [0, 0, 1], atol=1e-12)
    pn = geom.line_to_point_normal(geom.LineParam(0, 0, 0, 0))
    assert np.allclose(pn.normal, [0, 0, 1])
    assert np.allclose(pn.point, [0, 0, 0])


def test_plane_to_point_normal_examples():
    pn = geom.plane_to_point_normal(geom.PlaneParam(0, 0, 5))
    assert np.allclose(pn.normal, [0, 0, 1]) and pn.offset == 5
    pn = geom.plane_to_point_normal(geom.PlaneParam(0, np.pi / 2, 0))
    assert np.allclose(pn.normal, [-1, 0, 0], atol=1e-12) and pn.offset == 0
    pn = geom.plane_to_point_normal(geom.PlaneParam(np.pi / 2, 0, 1))
    assert np.allclose(pn.normal, [0, 1, 0], atol=1e-12) and pn.offset == 1


def test_point_normal_to_line_examples():
    lp = geom.point_normal_to_line(np.array([0, 0, 1.0]), np.array([1, 2, 7.0]))
    assert np.allclose([lp.alpha, lp.beta, lp.x, lp.y], [0, 0, 1, 2], atol=1e-12)
    lp = geom.point_normal_to_line(np.array([0, 1.0, 0]), np.array([0, 5.0, 0]))
    assert np.allclose([lp.alpha, lp.beta, lp.x, lp.y], [np.pi / 2, 0, 0, 0], atol=1e-12)
    with pytest.raises(SingularDirection):
        geom.point_normal_to_line(np.array([1.0, 0, 0]), np.array([0, 1.0, 2.0]))


def test_point_normal_to_plane_examples():
    pp = geom.point_normal_to_plane(np.array([0, 0, 1.0]), 5.0)
    assert np.allclose([pp.alpha, pp.beta, pp.d], [0, 0, 5], atol=1e-12)
    # opposite orientation of the same plane normalizes to the same block
    pp = geom.point_normal_to_plane(np.array([0, 0, -1.0]), -5.0)
    assert np.allclose([pp.alpha, pp.beta, pp.d], [0, 0, 5], atol=1e-12)
    pp = geom.point_normal_to_plane(np.array([0, 1.0, 0]), 2.0)
    assert np.allclose([pp.alpha, pp.beta, pp.d], [np.pi / 2, 0, 2], atol=1e-12)


def test_round_trip_line_and_plane_1000():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        lp = random_line_param(rng)
        pn = geom.line_to_point_normal(lp)
        lp2 = geom.point_normal_to_line(pn.normal, pn.point)
        pn2 = geom.line_to_point_normal(lp2)
        # up to direction sign, the line is identical
        assert min(
            np.linalg.norm(pn2.normal - pn.normal), np.linalg.norm(pn2.normal + pn.normal)
        ) < 1e-9
        assert np.linalg.norm(pn2.point - pn.point) < 1e-9

        pp = random_plane_param(rng)
        qn = geom.plane_to_point_normal(pp)
        pp2 = geom.point_normal_to_plane(qn.normal, qn.offset)
        qn2 = geom.plane_to_point_normal(pp2)
        same = np.linalg.norm(qn2.normal - qn.normal) < 1e-9 and abs(qn2.offset - qn.offset) < 1e-9
        flipped = (
            np.linalg.norm(qn2.normal + qn.normal) < 1e-9 and abs(qn2.offset + qn.offset) < 1e-9
        )
        assert same or flipped


def test_chart_invariants_after_normalization():
    rng = np.random.default_rng(3)
    for _ in range(200):
        lp = random_line_param(rng).normalized()
        assert -np.pi < lp.alpha <= np.pi
        assert -np.pi / 2 < lp.beta < np.pi / 2
        pp = random_plane_param(rng).normalized()
        assert -np.pi < pp.alpha <= np.pi
        assert -np.pi / 2 < pp.beta < np.pi / 2


def test_pose_invariants():
    rng = np.random.default_rng(4)
    for _ in range(50):
        pose = random_pose(rng)
        r = pose.rotation
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-9
        assert abs(np.linalg.det(r) - 1.0) < 1e-9
        ident = pose.compose(pose.inverse())
        assert np.max(np.abs(ident.rotation - np.eye(3))) < 1e-9
        assert np.max(np.abs(ident.translation)) < 1e-9


def test_point_to_line_residual_examples():
    z_axis = geom.PointNormalLine(np.array([0.0, 0, 1]), np.array([0.0, 0, 0]))
    ident = geom.RigidPose.identity()
    assert np.allclose(geom.point_to_line_residual(ident, np.array([0, 0, 9.0]), z_axis), 0)
    r = geom.point_to_line_residual(ident, np.array([3.0, 4, 5]), z_axis)
    assert np.allclose(r, [3, 4, 0]) and abs(np.linalg.norm(r) - 5) < 1e-12
    shifted = geom.RigidPose(np.eye(3), np.array([1.0, 0, 0]))
    assert np.allclose(geom.point_to_line_residual(shifted, np.zeros(3), z_axis), [1, 0, 0])


def test_point_to_plane_residual_examples():
    ground = geom.PointNormalPlane(np.array([0.0, 0, 1]), 0.0)
    ident = geom.RigidPose.identity()
    assert geom.point_to_plane_residual(ident, np.array([1.0, 2, 0]), ground) == 0
    assert geom.point_to_plane_residual(ident, np.array([1.0, 2, 3]), ground) == 3
    lowered = geom.RigidPose(np.eye(3), np.array([0.0, 0, -1]))
    assert geom.point_to_plane_residual(lowered, np.array([1.0, 2, 3]), ground) == 2


def test_line_residual_invariant_to_point_along_line():
    rng = np.random.default_rng(5)
    for _ in range(50):
        lp = random_line_param(rng)
        pn = geom.line_to_point_normal(lp)
        pose = random_pose(rng)
        p = rng.normal(size=3)
        r0 = geom.point_to_line_residual(pose, p, pn)
        t = rng.uniform(-100, 100)
        moved = geom.PointNormalLine(pn.normal, pn.point + t * pn.normal)
        r1 = geom.point_to_line_residual(pose, p, moved)
        assert np.max(np.abs(r1 - r0)) < 1e-12


def test_residual_zero_for_points_on_landmark():
    rng = np.random.default_rng(6)
    for _ in range(50):
        pose = random_pose(rng)
        lp = random_line_param(rng)
        pn = geom.line_to_point_normal(lp)
        world_pt = pn.point + rng.uniform(-10, 10) * pn.normal
        local = pose.inverse().transform(world_pt)
        assert np.linalg.norm(geom.point_to_line_residual(pose, local, pn)) < 1e-9
        pp = random_plane_param(rng)
        qn = geom.plane_to_point_normal(pp)
        basis = np.linalg.svd(np.eye(3) - np.outer(qn.normal, qn.normal))[0][:, :2]
        world_pt = qn.normal * qn.offset + basis @ rng.uniform(-10, 10, 2)
        local = pose.inverse().transform(world_pt)
        assert abs(geom.point_to_plane_residual(pose, local, qn)) < 1e-9


def _fd_pose_jacobian(fun, pose, h=1e-6):
    cols = []
    for k in range(6):
        delta = np.zeros(6)
        delta[k] = h
        plus = geom.RigidPose(
            pose.rotation @ geom.so3_exp(delta[:3]),
            pose.translation + pose.rotation @ delta[3:],
        )
        delta[k] = -h
        minus = geom.RigidPose(
            pose.rotation @ geom.so3_exp(delta[:3]),
            pose.translation + pose.rotation @ delta[3:],
        )
        cols.append((fun(plus) - fun(minus)) / (2 * h))
    return np.stack(cols, axis=-1)


def _fd_param_jacobian(fun, params, h=1e-6):
    params = np.asarray(params, dtype=float)
    cols = []
    for k in range(len(params)):
        dp = params.copy()
        dp[k] += h
        dm = params.copy()
        dm[k] -= h
        cols.append((fun(dp) - fun(dm)) / (2 * h))
    return np.stack(cols, axis=-1)


def _rel_err(analytic, numeric):
    scale = max(1.0, np.max(np.abs(numeric)))
    return np.max(np.abs(analytic - numeric)) / scale


def test_line_jacobian_matches_finite_differences_100():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        pose = random_pose(rng)
        lp = random_line_param(rng)
        p = rng.uniform(-5, 5, 3)
        j_pose, j_lm = geom.line_residual_jacobian(pose, p, lp)

        def f_pose(q):
            return geom.point_to_line_residual(q, p, geom.line_to_point_normal(lp))

        def f_lm(params):
            return geom.point_to_line_residual(
                pose, p, geom.line_to_point_normal(geom.LineParam(*params))
            )

        worst = max(worst, _rel_err(j_pose, _fd_pose_jacobian(f_pose, pose)))
        worst = max(worst, _rel_err(j_lm, _fd_param_jacobian(f_lm, lp.as_array())))
    assert worst < 1e-5


def test_plane_jacobian_matches_finite_differences_100():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        pose = random_pose(rng)
        pp = random_plane_param(rng)
        p = rng.uniform(-5, 5, 3)
        j_pose, j_lm = geom.plane_residual_jacobian(pose, p, pp)

        def f_pose(q):
            return np.array([geom.point_to_plane_residual(q, p, geom.plane_to_point_normal(pp))])

        def f_lm(params):
            return np.array(
                [
                    geom.point_to_plane_residual(
                        pose, p, geom.plane_to_point_normal(geom.PlaneParam(*params))
                    )
                ]
            )

        worst = max(worst, _rel_err(j_pose, _fd_pose_jacobian(f_pose, pose)))
        worst = max(worst, _rel_err(j_lm, _fd_param_jacobian(f_lm, pp.as_array())))
    assert worst < 1e-5


def test_jacobian_nonzero_at_zero_residual():
    # point on the landmark: residual zero, but the Jacobian must still span
    # the directions off the landmark manifold
    lp = geom.LineParam(0.3, 0.2, 1.0, -2.0)
    pn = geom.line_to_point_normal(lp)
    pose = geom.RigidPose.identity()
    p = pn.point + 2.5 * pn.normal
    assert np.linalg.norm(geom.point_to_line_residual(pose, p, pn)) < 1e-12
    j_pose, j_lm = geom.line_residual_jacobian(pose, p, lp)
    assert np.linalg.norm(j_pose) > 0.1 and np.linalg.norm(j_lm) > 0.1


def test_jacobian_singularity_raises():
    with pytest.raises(SingularDirection):
        geom.line_residual_jacobian(
            geom.RigidPose.identity(), np.zeros(3), geom.LineParam(0, np.pi / 2, 0, 0)
        )


def test_se3_log_examples():
    assert np.allclose(geom.se3_log(geom.RigidPose.identity()), np.zeros(6))
    quarter = geom.RigidPose(geom.so3_exp(np.array([0, 0, np.pi / 2])), np.zeros(3))
    assert np.allclose(geom.se3_log(quarter), [0, 0, np.pi / 2, 0, 0, 0], atol=1e-12)
    rng = np.random.default_rng(9)
    for _ in range(50):
        pose = random_pose(rng, max_angle=np.pi - 0.05)
        lg = geom.se3_log(pose)
        angle = np.arccos(np.clip((np.trace(pose.rotation) - 1) / 2, -1, 1))
        assert abs(np.linalg.norm(lg[:3]) - angle) < 1e-9
        assert np.allclose(lg[3:], pose.translation)


def test_so3_right_jacobian_inverse_matches_series():
    rng = np.random.default_rng(10)
    for _ in range(50):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        # the optimizer only evaluates this at log-map outputs, |phi| <= pi
        phi = axis * rng.uniform(0.0, 3.0)
        # check defining property: Log(Exp(phi) Exp(Jr^-1... )) via small eps
        h = 1e-7
        jr_inv = geom.so3_right_jacobian_inv(phi)
        num = np.zeros((3, 3))
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            plus = geom.so3_log(geom.so3_exp(phi) @ geom.so3_exp(d))
            minus = geom.so3_log(geom.so3_exp(phi) @ geom.so3_exp(-d))
            num[:, k] = (plus - minus) / (2 * h)
        # d Log(Exp(phi) Exp(d)) / dd = Jr^-1(phi)
        assert np.max(np.abs(jr_inv - num)) < 1e-5
