#!/usr/bin/env python3
"""Minimal line/plane parameterizations and their residuals.

Walks through the 2-DoF rotation chart, conversions between minimal blocks
and point-normal forms, and the point-to-line / point-to-plane residuals that
drive optimization.
"""

import numpy as np

from lpmap import geom

np.set_printoptions(precision=4, suppress=True)

print("=== the 2-DoF rotation chart ===")
print("R(0, 0) maps the canonical z-axis to itself:")
print(geom.rot2dof(0.0, 0.0))
print("\nR(0, pi/2) tips the z-axis onto -x (the chart boundary):")
print(geom.rot2dof(0.0, np.pi / 2))

print("\n=== a tilted pole as a 4-DoF line ===")
lp = geom.LineParam(alpha=0.2, beta=-0.1, x=3.0, y=1.5)
pn = geom.line_to_point_normal(lp)
print(f"block (alpha, beta, x, y) = {lp.as_array()}")
print(f"direction n = {pn.normal}, foot point c = {pn.point}")
print(f"n . c = {pn.normal @ pn.point:.2e}  (the foot is perpendicular)")

back = geom.point_normal_to_line(pn.normal, pn.point + 7.3 * pn.normal)
print(f"round trip from any point on the line recovers the block: {back.as_array()}")

print("\n=== a leaning wall as a 3-DoF plane ===")
pp = geom.PlaneParam(alpha=1.2, beta=0.3, d=4.0)
qn = geom.plane_to_point_normal(pp)
print(f"block (alpha, beta, d) = {pp.as_array()}")
print(f"normal n = {qn.normal}, offset d = {qn.offset}")

print("\n=== residuals ===")
pose = geom.RigidPose(geom.so3_exp(np.array([0.0, 0.0, 0.4])), np.array([1.0, -2.0, 0.2]))
p_local = np.array([2.0, 0.5, 1.0])
r_line = geom.point_to_line_residual(pose, p_local, pn)
r_plane = geom.point_to_plane_residual(pose, p_local, qn)
print(f"point-to-line residual  (3-vector): {r_line}, |r| = {np.linalg.norm(r_line):.3f} m")
print(f"point-to-plane residual (signed):   {r_plane:.3f} m")

j_pose, j_lm = geom.line_residual_jacobian(pose, p_local, lp)
print("\nanalytic Jacobian wrt the pose tangent (3x6):")
print(j_pose)
print("analytic Jacobian wrt (alpha, beta, x, y) (3x4):")
print(j_lm)

print("\nmoving the anchor point along the line does not change the residual:")
moved = geom.PointNormalLine(pn.normal, pn.point + 100.0 * pn.normal)
print(f"max |delta r| = {np.max(np.abs(geom.point_to_line_residual(pose, p_local, moved) - r_line)):.2e}")
