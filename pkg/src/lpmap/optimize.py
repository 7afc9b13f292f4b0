"""Robust sparse nonlinear least squares over poses and line/plane landmarks.

One factor graph type serves pose graph optimization (odometry + loop
relative-pose factors), bundle adjustment (adds point-to-line and
point-to-plane observation factors on minimal landmark blocks), and the
fixed-landmark problems used by registration and localization. The solver is
Levenberg-Marquardt with per-block Huber IRLS weights, sparse normal
equations, and optional Schur elimination of the landmark blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import geom
from .config import PipelineConfig
from .errors import NumericalFailure

ODOMETRY = 0
LOOP = 1


def robust_weight(huber_delta: float, squared_residual) -> float:
    """Huber IRLS weight: 1 inside the knee, delta/|r| outside."""
    r = np.sqrt(np.asarray(squared_residual, dtype=float))
    w = np.where(r <= huber_delta, 1.0, huber_delta / np.where(r > 0, r, 1.0))
    return float(w) if w.ndim == 0 else w


def _huber_cost(x, delta):
    """Huber rho on block norms x (whitened); quadratic inside delta."""
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    return np.where(x <= delta, x * x, 2.0 * delta * x - delta * delta)


def relative_pose_residual(
    pose_k: geom.RigidPose, pose_k1: geom.RigidPose, measured: geom.RigidPose
) -> np.ndarray:
    """6-vector [translation, rotation-log] relative-pose residual."""
    r_t = pose_k.rotation.T @ (pose_k1.translation - pose_k.translation) - measured.translation
    e = measured.rotation.T @ pose_k.rotation.T @ pose_k1.rotation
    return np.concatenate([r_t, geom.so3_log(e)])


def _rel_blocks(ri_t, local_dp, r_r, rel_R, rj):
    """Batched Jacobian blocks of the relative-pose residual.

    Rows split as translation (3) then rotation (3); columns are the
    right-multiplied pose tangent [rotation, translation] of each endpoint.
    """
    n = len(r_r)
    jr_inv = geom.so3_right_jacobian_inv(r_r)
    jl_inv = jr_inv.transpose(0, 2, 1)
    j_ti = np.zeros((n, 3, 6))
    j_ti[:, :, :3] = geom.skew(local_dp)
    j_ti[:, :, 3:] = -np.broadcast_to(np.eye(3), (n, 3, 3))
    j_tj = np.zeros((n, 3, 6))
    j_tj[:, :, 3:] = ri_t @ rj
    j_ri = np.zeros((n, 3, 6))
    j_ri[:, :, :3] = -jl_inv @ rel_R.transpose(0, 2, 1)
    j_rj = np.zeros((n, 3, 6))
    j_rj[:, :, :3] = jr_inv
    return j_ti, j_tj, j_ri, j_rj


def relative_pose_jacobians(
    pose_k: geom.RigidPose, pose_k1: geom.RigidPose, measured: geom.RigidPose
) -> tuple[np.ndarray, np.ndarray]:
    """(6x6, 6x6) Jacobians of relative_pose_residual wrt both pose tangents."""
    ri_t = pose_k.rotation.T[None]
    local_dp = (pose_k.rotation.T @ (pose_k1.translation - pose_k.translation))[None]
    e = measured.rotation.T @ pose_k.rotation.T @ pose_k1.rotation
    r_r = geom.so3_log(e)[None]
    j_ti, j_tj, j_ri, j_rj = _rel_blocks(
        ri_t, local_dp, r_r, measured.rotation[None], pose_k1.rotation[None]
    )
    jk = np.vstack([j_ti[0], j_ri[0]])
    jk1 = np.vstack([j_tj[0], j_rj[0]])
    return jk, jk1


@dataclass
class SolverReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    reason: str = ""
    cost_breakdown: dict = field(default_factory=dict)
    log_lines: list[str] = field(default_factory=list)
    frozen_landmarks: list[str] = field(default_factory=list)

    def to_log_text(self) -> str:
        header = (
            f"# initial_cost={self.initial_cost:.9e} final_cost={self.final_cost:.9e} "
            f"converged={self.converged} reason={self.reason}"
        )
        return "\n".join([header] + self.log_lines) + "\n"


class FactorGraph:
    """Poses, minimal landmark blocks, and the factors tying them together."""

    def __init__(self, config: PipelineConfig | None = None):
        self.cfg = config or PipelineConfig()
        self.poses: list[geom.RigidPose] = []
        self.fixed_poses: set[int] = set()
        self.line_params: list[np.ndarray] = []
        self.fixed_lines: set[int] = set()
        self.plane_params: list[np.ndarray] = []
        self.fixed_planes: set[int] = set()
        # relative pose factors: (i, j, R, t, sigma_t, sigma_r, kind)
        self._rel: list[tuple] = []
        # observation factors: (pose_idx, lm_idx, p_local)
        self._line_obs: list[tuple] = []
        self._plane_obs: list[tuple] = []
        # bulk observation batches: (pose_idx array, lm_idx array, p_local array)
        self._line_bulk: list[tuple] = []
        self._plane_bulk: list[tuple] = []

    # -- construction -------------------------------------------------------

    def add_pose(self, pose: geom.RigidPose, fixed: bool = False) -> int:
        self.poses.append(pose)
        if fixed:
            self.fixed_poses.add(len(self.poses) - 1)
        return len(self.poses) - 1

    def add_line_landmark(self, params, fixed: bool = False) -> int:
        arr = params.as_array() if isinstance(params, geom.LineParam) else np.asarray(params, float)
        self.line_params.append(arr.astype(float).copy())
        if fixed:
            self.fixed_lines.add(len(self.line_params) - 1)
        return len(self.line_params) - 1

    def add_plane_landmark(self, params, fixed: bool = False) -> int:
        arr = params.as_array() if isinstance(params, geom.PlaneParam) else np.asarray(params, float)
        self.plane_params.append(arr.astype(float).copy())
        if fixed:
            self.fixed_planes.add(len(self.plane_params) - 1)
        return len(self.plane_params) - 1

    def add_relative_pose(
        self, i: int, j: int, measured: geom.RigidPose, kind: int = ODOMETRY,
        sigma_t: float | None = None, sigma_r: float | None = None,
    ) -> None:
        cfg = self.cfg
        if sigma_t is None:
            sigma_t = cfg.sigma_odo_trans_m if kind == ODOMETRY else cfg.sigma_loop_trans_m
        if sigma_r is None:
            sigma_r = cfg.sigma_odo_rot_rad if kind == ODOMETRY else cfg.sigma_loop_rot_rad
        self._rel.append((i, j, measured.rotation.copy(), measured.translation.copy(),
                          float(sigma_t), float(sigma_r), kind))

    def add_line_observation(self, pose_idx: int, line_idx: int, p_local) -> None:
        self._line_obs.append((pose_idx, line_idx, np.asarray(p_local, float).copy()))

    def add_plane_observation(self, pose_idx: int, plane_idx: int, p_local) -> None:
        self._plane_obs.append((pose_idx, plane_idx, np.asarray(p_local, float).copy()))

    def add_line_observations(self, pose_idx: int, line_indices, p_locals) -> None:
        """Bulk variant: many points against (possibly distinct) line landmarks."""
        lm = np.asarray(line_indices, dtype=int)
        pts = np.asarray(p_locals, dtype=float).reshape(-1, 3)
        self._line_bulk.append((np.full(len(lm), pose_idx, dtype=int), lm, pts))

    def add_plane_observations(self, pose_idx: int, plane_indices, p_locals) -> None:
        lm = np.asarray(plane_indices, dtype=int)
        pts = np.asarray(p_locals, dtype=float).reshape(-1, 3)
        self._plane_bulk.append((np.full(len(lm), pose_idx, dtype=int), lm, pts))

    # -- solver-facing views ------------------------------------------------

    def line_param(self, idx: int) -> geom.LineParam:
        a = self.line_params[idx]
        return geom.LineParam(*a)

    def plane_param(self, idx: int) -> geom.PlaneParam:
        a = self.plane_params[idx]
        return geom.PlaneParam(*a)

    def n_factors(self) -> int:
        return (
            len(self._rel)
            + len(self._line_obs)
            + len(self._plane_obs)
            + sum(len(b[0]) for b in self._line_bulk)
            + sum(len(b[0]) for b in self._plane_bulk)
        )

    def line_obs_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.line_params), dtype=int)
        for _, lm_idx, _ in self._line_obs:
            counts[lm_idx] += 1
        for _, lm, _ in self._line_bulk:
            np.add.at(counts, lm, 1)
        return counts

    def plane_obs_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.plane_params), dtype=int)
        for _, lm_idx, _ in self._plane_obs:
            counts[lm_idx] += 1
        for _, lm, _ in self._plane_bulk:
            np.add.at(counts, lm, 1)
        return counts


class _Problem:
    """Frozen array view of a FactorGraph plus the column layout."""

    def __init__(self, graph: FactorGraph):
        self.g = graph
        self.P = len(graph.poses)
        self.NL = len(graph.line_params)
        self.NS = len(graph.plane_params)

        self.pose_col = np.full(self.P, -1, dtype=int)
        col = 0
        for p in range(self.P):
            if p not in graph.fixed_poses:
                self.pose_col[p] = col
                col += 6
        self.dim_pose = col
        self.line_col = np.full(self.NL, -1, dtype=int)
        for l in range(self.NL):
            if l not in graph.fixed_lines:
                self.line_col[l] = col
                col += 4
        self.plane_col = np.full(self.NS, -1, dtype=int)
        for s in range(self.NS):
            if s not in graph.fixed_planes:
                self.plane_col[s] = col
                col += 3
        self.dim = col

        if graph._rel:
            rel = graph._rel
            self.rel_i = np.array([f[0] for f in rel])
            self.rel_j = np.array([f[1] for f in rel])
            self.rel_R = np.array([f[2] for f in rel])
            self.rel_t = np.array([f[3] for f in rel])
            self.rel_st = np.array([f[4] for f in rel])
            self.rel_sr = np.array([f[5] for f in rel])
            self.rel_kind = np.array([f[6] for f in rel])
        else:
            self.rel_i = np.zeros(0, dtype=int)
        lo_parts = []
        if graph._line_obs:
            lo_parts.append(
                (
                    np.array([f[0] for f in graph._line_obs]),
                    np.array([f[1] for f in graph._line_obs]),
                    np.array([f[2] for f in graph._line_obs]),
                )
            )
        lo_parts.extend(graph._line_bulk)
        if lo_parts:
            self.lo_pose = np.concatenate([p[0] for p in lo_parts])
            self.lo_lm = np.concatenate([p[1] for p in lo_parts])
            self.lo_p = np.vstack([p[2] for p in lo_parts])
        else:
            self.lo_pose = np.zeros(0, dtype=int)
        so_parts = []
        if graph._plane_obs:
            so_parts.append(
                (
                    np.array([f[0] for f in graph._plane_obs]),
                    np.array([f[1] for f in graph._plane_obs]),
                    np.array([f[2] for f in graph._plane_obs]),
                )
            )
        so_parts.extend(graph._plane_bulk)
        if so_parts:
            self.so_pose = np.concatenate([p[0] for p in so_parts])
            self.so_lm = np.concatenate([p[1] for p in so_parts])
            self.so_p = np.vstack([p[2] for p in so_parts])
        else:
            self.so_pose = np.zeros(0, dtype=int)

    def state(self):
        g = self.g
        R = np.array([p.rotation for p in g.poses]) if self.P else np.zeros((0, 3, 3))
        t = np.array([p.translation for p in g.poses]) if self.P else np.zeros((0, 3))
        L = np.array(g.line_params) if self.NL else np.zeros((0, 4))
        S = np.array(g.plane_params) if self.NS else np.zeros((0, 3))
        return R, t, L, S

    def writeback(self, R, t, L, S):
        g = self.g
        g.poses = [geom.RigidPose(R[i].copy(), t[i].copy()) for i in range(self.P)]
        g.line_params = [L[i].copy() for i in range(self.NL)]
        g.plane_params = [S[i].copy() for i in range(self.NS)]


def _landmark_geometry(L, S):
    """Batched point-normal forms and chart gradients for all landmarks."""
    out = {}
    if len(L):
        rl = geom.rot2dof(L[:, 0], L[:, 1])
        da, db = geom.rot2dof_grad(L[:, 0], L[:, 1])
        axis = rl[:, :, 0] * L[:, 2, None] + rl[:, :, 1] * L[:, 3, None]
        out["line_n"] = rl[:, :, 2]
        out["line_c"] = axis
        out["line_R"] = rl
        out["line_dan"] = da[:, :, 2]
        out["line_dbn"] = db[:, :, 2]
        out["line_dac"] = da[:, :, 0] * L[:, 2, None] + da[:, :, 1] * L[:, 3, None]
        out["line_dbc"] = db[:, :, 0] * L[:, 2, None] + db[:, :, 1] * L[:, 3, None]
    if len(S):
        rs = geom.rot2dof(S[:, 0], S[:, 1])
        da, db = geom.rot2dof_grad(S[:, 0], S[:, 1])
        out["plane_n"] = rs[:, :, 2]
        out["plane_d"] = S[:, 2]
        out["plane_dan"] = da[:, :, 2]
        out["plane_dbn"] = db[:, :, 2]
    return out


def _evaluate(prob: _Problem, R, t, L, S, cfg: PipelineConfig, with_jac: bool):
    """Robustified cost (plus normal-equation pieces when with_jac)."""
    lm = _landmark_geometry(L, S)
    cost = 0.0
    breakdown = {"odometry": 0.0, "loop": 0.0, "line": 0.0, "plane": 0.0}

    g_vec = np.zeros(prob.dim) if with_jac else None
    dense = prob.dim <= 24  # single-pose / tiny problems skip sparse machinery
    h_dense = np.zeros((prob.dim, prob.dim)) if (with_jac and dense) else None
    pp_rows, pp_cols, pp_vals = [], [], []
    pl_rows, pl_cols, pl_vals = [], [], []
    hll_line = np.zeros((prob.NL, 4, 4))
    hll_plane = np.zeros((prob.NS, 3, 3))

    def accumulate(res_w, blocks):
        """res_w: (N, d) weighted-whitened residual; blocks: (offsets, J, ncols, is_lm, lm_idx)."""
        for off_a, ja, qa, lm_a, idx_a in blocks:
            mask_a = off_a >= 0
            if not mask_a.any():
                continue
            contrib = -np.einsum("ndq,nd->nq", ja[mask_a], res_w[mask_a])
            offs = off_a[mask_a]
            if offs.size and np.all(offs == offs[0]):
                g_vec[offs[0]: offs[0] + qa] += contrib.sum(axis=0)
            else:
                np.add.at(g_vec, offs[:, None] + np.arange(qa), contrib)
        for ai, (off_a, ja, qa, lm_a, idx_a) in enumerate(blocks):
            for bi, (off_b, jb, qb, lm_b, idx_b) in enumerate(blocks):
                if bi < ai:
                    continue
                mask = (off_a >= 0) & (off_b >= 0)
                if not mask.any():
                    continue
                if dense:
                    oa, ob = off_a[mask], off_b[mask]
                    if np.all(oa == oa[0]) and np.all(ob == ob[0]):
                        # one variable pair: plain summed outer product
                        blk = np.einsum("ndq,ndr->qr", ja[mask], jb[mask])
                        h_dense[oa[0]: oa[0] + qa, ob[0]: ob[0] + qb] += blk
                        if ai != bi:
                            h_dense[ob[0]: ob[0] + qb, oa[0]: oa[0] + qa] += blk.T
                        continue
                    c = np.einsum("ndq,ndr->nqr", ja[mask], jb[mask])
                    rows = oa[:, None, None] + np.arange(qa)[None, :, None]
                    cols = ob[:, None, None] + np.arange(qb)[None, None, :]
                    rows = np.broadcast_to(rows, c.shape)
                    cols = np.broadcast_to(cols, c.shape)
                    np.add.at(h_dense, (rows, cols), c)
                    if ai != bi:
                        np.add.at(
                            h_dense,
                            (cols.transpose(0, 2, 1), rows.transpose(0, 2, 1)),
                            c.transpose(0, 2, 1),
                        )
                    continue
                c = np.einsum("ndq,ndr->nqr", ja[mask], jb[mask])
                if lm_a and lm_b:
                    # landmark diagonal block (same landmark on both sides)
                    if qa == 4:
                        np.add.at(hll_line, idx_a[mask], c)
                    else:
                        np.add.at(hll_plane, idx_a[mask], c)
                    continue
                rows = off_a[mask, None, None] + np.arange(qa)[None, :, None]
                cols = off_b[mask, None, None] + np.arange(qb)[None, None, :]
                rows = np.broadcast_to(rows, c.shape)
                cols = np.broadcast_to(cols, c.shape)
                if lm_b and not lm_a:
                    pl_rows.append(rows.ravel()); pl_cols.append(cols.ravel())
                    pl_vals.append(c.ravel())
                else:
                    pp_rows.append(rows.ravel()); pp_cols.append(cols.ravel())
                    pp_vals.append(c.ravel())
                    if ai != bi:
                        # transposed block: indices must follow the value layout
                        pp_rows.append(cols.transpose(0, 2, 1).ravel())
                        pp_cols.append(rows.transpose(0, 2, 1).ravel())
                        pp_vals.append(c.transpose(0, 2, 1).ravel())

    # -- relative pose factors ---------------------------------------------
    if len(prob.rel_i):
        i, j = prob.rel_i, prob.rel_j
        ri_t = R[i].transpose(0, 2, 1)
        dp = t[j] - t[i]
        local_dp = np.einsum("nij,nj->ni", ri_t, dp)
        r_t = local_dp - prob.rel_t
        e = prob.rel_R.transpose(0, 2, 1) @ ri_t @ R[j]
        r_r = geom.so3_log(e).reshape(-1, 3)

        nt = np.linalg.norm(r_t, axis=1)
        nr = np.linalg.norm(r_r, axis=1)
        dt_w = cfg.huber_pose_trans_m / prob.rel_st
        dr_w = cfg.huber_pose_rot_rad / prob.rel_sr
        xt = nt / prob.rel_st
        xr = nr / prob.rel_sr
        ct = _huber_cost(xt, dt_w)
        cr = _huber_cost(xr, dr_w)
        odo = prob.rel_kind == ODOMETRY
        breakdown["odometry"] += float(np.sum(ct[odo]) + np.sum(cr[odo]))
        breakdown["loop"] += float(np.sum(ct[~odo]) + np.sum(cr[~odo]))
        cost += float(np.sum(ct) + np.sum(cr))

        if with_jac:
            wt = np.sqrt(robust_weight_vec(dt_w, xt)) / prob.rel_st
            wr = np.sqrt(robust_weight_vec(dr_w, xr)) / prob.rel_sr
            n = len(i)
            j_ti, j_tj, j_ri, j_rj = _rel_blocks(ri_t, local_dp, r_r, prob.rel_R, R[j])
            off_i = prob.pose_col[i]
            off_j = prob.pose_col[j]
            zero_idx = np.zeros(n, dtype=int)
            accumulate(r_t * wt[:, None],
                       [(off_i, j_ti * wt[:, None, None], 6, False, zero_idx),
                        (off_j, j_tj * wt[:, None, None], 6, False, zero_idx)])
            accumulate(r_r * wr[:, None],
                       [(off_i, j_ri * wr[:, None, None], 6, False, zero_idx),
                        (off_j, j_rj * wr[:, None, None], 6, False, zero_idx)])

    # -- line observation factors --------------------------------------------
    if len(prob.lo_pose):
        pi, li = prob.lo_pose, prob.lo_lm
        n_l = lm["line_n"][li]
        c_l = lm["line_c"][li]
        w_pt = np.einsum("nij,nj->ni", R[pi], prob.lo_p) + t[pi]
        u = w_pt - c_l
        nu = np.sum(n_l * u, axis=1)
        r = u - n_l * nu[:, None]
        x = np.linalg.norm(r, axis=1) / cfg.sigma_line_m
        dw = cfg.huber_landmark_m / cfg.sigma_line_m
        cl = _huber_cost(x, dw)
        breakdown["line"] += float(np.sum(cl))
        cost += float(np.sum(cl))
        if with_jac:
            w = np.sqrt(robust_weight_vec(dw, x)) / cfg.sigma_line_m
            n = len(pi)
            proj = np.broadcast_to(np.eye(3), (n, 3, 3)) - np.einsum("ni,nj->nij", n_l, n_l)
            j_pose = np.zeros((n, 3, 6))
            j_pose[:, :, :3] = -proj @ R[pi] @ geom.skew(prob.lo_p)
            j_pose[:, :, 3:] = proj @ R[pi]
            dr_dn = -(nu[:, None, None] * np.broadcast_to(np.eye(3), (n, 3, 3))
                      + np.einsum("ni,nj->nij", n_l, u))
            j_lm = np.zeros((n, 3, 4))
            j_lm[:, :, 0] = np.einsum("nij,nj->ni", dr_dn, lm["line_dan"][li]) - \
                np.einsum("nij,nj->ni", proj, lm["line_dac"][li])
            j_lm[:, :, 1] = np.einsum("nij,nj->ni", dr_dn, lm["line_dbn"][li]) - \
                np.einsum("nij,nj->ni", proj, lm["line_dbc"][li])
            j_lm[:, :, 2] = -np.einsum("nij,nj->ni", proj, lm["line_R"][li][:, :, 0])
            j_lm[:, :, 3] = -np.einsum("nij,nj->ni", proj, lm["line_R"][li][:, :, 1])
            accumulate(r * w[:, None],
                       [(prob.pose_col[pi], j_pose * w[:, None, None], 6, False, pi),
                        (prob.line_col[li], j_lm * w[:, None, None], 4, True, li)])

    # -- plane observation factors -------------------------------------------
    if len(prob.so_pose):
        pi, si = prob.so_pose, prob.so_lm
        n_s = lm["plane_n"][si]
        w_pt = np.einsum("nij,nj->ni", R[pi], prob.so_p) + t[pi]
        r = np.sum(n_s * w_pt, axis=1) - lm["plane_d"][si]
        x = np.abs(r) / cfg.sigma_plane_m
        dw = cfg.huber_landmark_m / cfg.sigma_plane_m
        cs = _huber_cost(x, dw)
        breakdown["plane"] += float(np.sum(cs))
        cost += float(np.sum(cs))
        if with_jac:
            w = np.sqrt(robust_weight_vec(dw, x)) / cfg.sigma_plane_m
            n = len(pi)
            j_pose = np.zeros((n, 1, 6))
            j_pose[:, 0, :3] = -np.einsum("ni,nij->nj", n_s, R[pi] @ geom.skew(prob.so_p))
            j_pose[:, 0, 3:] = np.einsum("ni,nij->nj", n_s, R[pi])
            j_lm = np.zeros((n, 1, 3))
            j_lm[:, 0, 0] = np.sum(lm["plane_dan"][si] * w_pt, axis=1)
            j_lm[:, 0, 1] = np.sum(lm["plane_dbn"][si] * w_pt, axis=1)
            j_lm[:, 0, 2] = -1.0
            accumulate(r[:, None] * w[:, None],
                       [(prob.pose_col[pi], j_pose * w[:, None, None], 6, False, pi),
                        (prob.plane_col[si], j_lm * w[:, None, None], 3, True, si)])

    if not with_jac:
        return cost, breakdown, None
    if dense:
        return cost, breakdown, (g_vec, h_dense, None, None, None)

    def cat(rows, cols, vals, shape):
        if rows:
            return sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=shape,
            ).tocsr()
        return sp.csr_matrix(shape)

    hpp = cat(pp_rows, pp_cols, pp_vals, (prob.dim_pose, prob.dim_pose))
    hpl = cat(pl_rows, pl_cols, pl_vals, (prob.dim_pose, prob.dim))[:, prob.dim_pose:]
    return cost, breakdown, (g_vec, hpp, hpl, hll_line, hll_plane)


def robust_weight_vec(delta, x):
    """Vectorized Huber weight on whitened block norms."""
    x = np.asarray(x, dtype=float)
    return np.where(x <= delta, 1.0, delta / np.where(x > 0, x, 1.0))


def _apply_update(prob: _Problem, R, t, L, S, delta):
    R2, t2, L2, S2 = R.copy(), t.copy(), L.copy(), S.copy()
    free = prob.pose_col >= 0
    if free.any():
        idx = np.flatnonzero(free)
        offs = prob.pose_col[idx]
        omega = np.stack([delta[o: o + 3] for o in offs])
        v = np.stack([delta[o + 3: o + 6] for o in offs])
        R2[idx] = R[idx] @ geom.so3_exp(omega).reshape(len(idx), 3, 3)
        t2[idx] = t[idx] + np.einsum("nij,nj->ni", R[idx], v)
    for l in range(prob.NL):
        o = prob.line_col[l]
        if o >= 0:
            L2[l] = L[l] + delta[o: o + 4]
    for s in range(prob.NS):
        o = prob.plane_col[s]
        if o >= 0:
            S2[s] = S[s] + delta[o: o + 3]
    return R2, t2, _normalize_lines(L2, prob), _normalize_planes(S2, prob)


def _normalize_lines(L, prob):
    for l in range(prob.NL):
        if prob.line_col[l] < 0:
            continue
        try:
            n, c = geom.line_params_point_normal(L[l])
            lp = geom.point_normal_to_line(n, c)
            L[l] = lp.as_array()
        except geom.SingularDirection:
            L[l, 0] = geom.wrap_angle(L[l, 0])
    return L


def _normalize_planes(S, prob):
    for s in range(prob.NS):
        if prob.plane_col[s] < 0:
            continue
        try:
            n, d = geom.plane_params_point_normal(S[s])
            pp = geom.point_normal_to_plane(n, float(d))
            S[s] = pp.as_array()
        except geom.SingularDirection:
            S[s, 0] = geom.wrap_angle(S[s, 0])
    return S


def _solve_normal_equations(prob, pieces, lam, use_schur):
    g_vec, hpp, hpl, hll_line, hll_plane = pieces
    if hpl is None:  # dense fast path for tiny systems
        h = hpp + np.diag(np.diag(hpp) * lam + 1e-12)
        try:
            return np.linalg.solve(h, g_vec)
        except np.linalg.LinAlgError:
            return np.full(prob.dim, np.nan)
    dp = prob.dim_pose
    dl = prob.dim - dp
    free_l = np.flatnonzero(prob.line_col >= 0)
    free_s = np.flatnonzero(prob.plane_col >= 0)

    def damped_blocks(blocks):
        out = blocks.copy()
        n = blocks.shape[1]
        diag = np.arange(n)
        out[:, diag, diag] *= 1.0 + lam
        out[:, diag, diag] += 1e-12
        return out

    if dp:
        hpp_d = hpp + sp.diags(hpp.diagonal() * lam + 1e-12)
    else:
        hpp_d = hpp

    if dl == 0:
        return spsolve(hpp_d.tocsc(), g_vec[:dp]) if dp else np.zeros(0)

    # free landmark columns are consecutive: lines in index order, then planes
    if not use_schur:
        diag_blocks = [hll_line[l] for l in free_l] + [hll_plane[s] for s in free_s]
        hll = sp.block_diag(diag_blocks, format="csr") if diag_blocks else sp.csr_matrix((0, 0))
        h_full = sp.bmat([[hpp, hpl], [hpl.T, hll]], format="csr")
        d = h_full.diagonal()
        h_damped = h_full + sp.diags(d * lam + 1e-12)
        return spsolve(h_damped.tocsc(), g_vec)

    # Schur elimination of the landmark blocks
    hll_line_d = damped_blocks(hll_line[free_l]) if len(free_l) else np.zeros((0, 4, 4))
    hll_plane_d = damped_blocks(hll_plane[free_s]) if len(free_s) else np.zeros((0, 3, 3))
    inv_list = []
    if len(free_l):
        inv_list.extend(np.linalg.inv(hll_line_d))
    if len(free_s):
        inv_list.extend(np.linalg.inv(hll_plane_d))
    inv_blocks = sp.block_diag(inv_list, format="csr") if inv_list else sp.csr_matrix((0, 0))
    gp, gl = g_vec[:dp], g_vec[dp:]
    hpl_inv = hpl @ inv_blocks
    s_mat = hpp_d - hpl_inv @ hpl.T
    rhs = gp - hpl_inv @ gl
    delta_p = spsolve(s_mat.tocsc(), rhs) if dp else np.zeros(0)
    delta_l = inv_blocks @ (gl - hpl.T @ delta_p)
    return np.concatenate([delta_p, delta_l])


def solve_nlls(graph: FactorGraph, config: PipelineConfig | None = None) -> SolverReport:
    """Levenberg-Marquardt on the robustified factor-graph cost.

    Mutates the graph's poses and landmark parameters in place and returns a
    report. Raises NumericalFailure when the cost at the current state is not
    finite.
    """
    cfg = config or graph.cfg
    prob = _Problem(graph)
    report = SolverReport()
    if prob.dim == 0 or graph.n_factors() == 0:
        report.converged = True
        report.reason = "nothing to optimize"
        return report

    state = prob.state()
    cost, breakdown, pieces = _evaluate(prob, *state, cfg, with_jac=True)
    if not np.isfinite(cost):
        raise NumericalFailure(f"initial cost is not finite: {cost}")
    report.initial_cost = cost
    report.cost_breakdown = dict(breakdown)

    lam = cfg.lambda_init
    grad_inf = np.max(np.abs(pieces[0])) if pieces[0].size else 0.0
    if cost < 1e-24 or grad_inf < 1e-12:
        report.final_cost = cost
        report.converged = True
        report.reason = "already optimal"
        prob.writeback(*state)
        return report

    accepted = 0
    for it in range(1, cfg.max_iterations + 1):
        delta = _solve_normal_equations(prob, pieces, lam, cfg.use_schur)
        if not np.all(np.isfinite(delta)):
            lam *= 10.0
            report.log_lines.append(f"{it:4d} cost={cost:.9e} lambda={lam:.3e} step=nan reject")
            if lam > 1e12:
                report.reason = "singular normal equations"
                break
            continue
        step_norm = float(np.linalg.norm(delta))
        trial = _apply_update(prob, *state, delta)
        new_cost, new_break, _ = _evaluate(prob, *trial, cfg, with_jac=False)
        if np.isfinite(new_cost) and new_cost < cost:
            state = trial
            rel_drop = (cost - new_cost) / max(cost, 1e-300)
            cost = new_cost
            breakdown = new_break
            accepted += 1
            lam = max(lam / 10.0, 1e-12)
            report.log_lines.append(
                f"{it:4d} cost={cost:.9e} lambda={lam:.3e} step={step_norm:.3e} accept"
            )
            if cost < 1e-24 or rel_drop < cfg.cost_rel_tol or step_norm < cfg.step_tol:
                report.converged = True
                report.reason = "converged"
                break
            _, breakdown, pieces = _evaluate(prob, *state, cfg, with_jac=True)
        else:
            lam *= 10.0
            report.log_lines.append(
                f"{it:4d} cost={cost:.9e} lambda={lam:.3e} step={step_norm:.3e} reject"
            )
            if lam > 1e12:
                report.converged = True
                report.reason = "local minimum (damping exhausted)"
                break
    else:
        report.reason = "max iterations"

    prob.writeback(*state)
    report.iterations = accepted
    report.final_cost = cost
    report.cost_breakdown = dict(breakdown)
    return report


# ---------------------------------------------------------------------------
# convenience drivers
# ---------------------------------------------------------------------------


def solve_pgo(
    poses: list[geom.RigidPose],
    odometry: list[tuple[int, int, geom.RigidPose]],
    loops: list[tuple[int, int, geom.RigidPose]],
    config: PipelineConfig | None = None,
    fixed: tuple[int, ...] = (0,),
) -> tuple[list[geom.RigidPose], SolverReport]:
    """Classical pose graph optimization over odometry and accepted loops."""
    cfg = config or PipelineConfig()
    graph = FactorGraph(cfg)
    for idx, pose in enumerate(poses):
        graph.add_pose(pose, fixed=idx in fixed)
    for i, j, meas in odometry:
        graph.add_relative_pose(i, j, meas, kind=ODOMETRY)
    for i, j, meas in loops:
        graph.add_relative_pose(i, j, meas, kind=LOOP)
    report = solve_nlls(graph, cfg)
    return list(graph.poses), report


def bundle_adjust(graph: FactorGraph, config: PipelineConfig | None = None) -> SolverReport:
    """Joint optimization of poses and landmark blocks.

    Landmarks with fewer than two observations are held fixed (they would be
    gauge-deficient), as are landmarks whose direction sits near the chart
    singularity; both sets are noted in the report.
    """
    cfg = config or graph.cfg
    line_counts = graph.line_obs_counts()
    plane_counts = graph.plane_obs_counts()
    frozen = []
    # endpoint factors come in pairs / quadruples; "observation" = one
    # LineObservation (2 factors) or PlaneObservation (4 factors)
    for l, cnt in enumerate(line_counts):
        if cnt < 4 and l not in graph.fixed_lines:
            graph.fixed_lines.add(l)
            frozen.append(f"line {l}: single observation")
        elif abs(graph.line_params[l][1]) > np.pi / 2 - 1e-4 and l not in graph.fixed_lines:
            graph.fixed_lines.add(l)
            frozen.append(f"line {l}: near singular direction")
    for s, cnt in enumerate(plane_counts):
        if cnt < 8 and s not in graph.fixed_planes:
            graph.fixed_planes.add(s)
            frozen.append(f"plane {s}: single observation")
        elif abs(graph.plane_params[s][1]) > np.pi / 2 - 1e-4 and s not in graph.fixed_planes:
            graph.fixed_planes.add(s)
            frozen.append(f"plane {s}: near singular direction")
    report = solve_nlls(graph, cfg)
    report.frozen_landmarks = frozen
    return report
