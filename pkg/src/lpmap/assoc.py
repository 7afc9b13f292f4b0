"""Block building and global line/plane association on the affine Grassmannian.

A sub-map is cut into blocks around host keyframes. Each block becomes a
semantic graph of line nodes (one per pole landmark) and plane nodes (coplanar
plane landmarks clustered into one infinite plane). Candidate node pairs
between two graphs are scored by how well pairwise subspace distances agree,
and the densest mutually-consistent set is extracted by projected power
iteration plus greedy rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .config import PipelineConfig
from .errors import BasisNotOrthonormal, DimensionMismatch, NoConsensus

# ---------------------------------------------------------------------------
# blocks and semantic graphs
# ---------------------------------------------------------------------------


@dataclass
class Block:
    """Landmarks around a host keyframe, expressed in the host frame."""

    host_id: int
    host_pose: geom.RigidPose
    landmark_ids: list[int]
    # per-member arrays, host-frame coordinates
    kinds: list[str]            # "line" | "plane"
    labels: list[str]
    centroids: np.ndarray       # (M, 3)
    normals: np.ndarray         # (M, 3) direction for lines, normal for planes


@dataclass
class GraphNode:
    kind: str                   # "line" | "plane"
    label: str
    centroid: np.ndarray
    normal: np.ndarray
    landmark_ids: list[int]     # one id for lines, >=1 for plane nodes


@dataclass
class SemanticGraph:
    nodes: list[GraphNode]


@dataclass
class CorrespondenceSet:
    """One-to-one node matches between two semantic graphs."""

    pairs: list[tuple[int, int]]        # (node index in graph i, in graph j)
    score: float
    line_pairs: list[tuple[int, int]] = field(default_factory=list)
    plane_pairs: list[tuple[int, int]] = field(default_factory=list)


def build_blocks(
    keyframe_poses: list[geom.RigidPose],
    landmarks,
    radius: float = 30.0,
    stride: int = 5,
) -> list[Block]:
    """Host a block at every stride-th keyframe; members lie within radius.

    `landmarks` is a sequence with .kind, .label, .centroid, .normal in world
    coordinates (extract.Landmark satisfies this).
    """
    blocks = []
    if not landmarks or not keyframe_poses:
        return blocks
    cents = np.array([lm.centroid for lm in landmarks])
    norms = np.array([lm.normal for lm in landmarks])
    for host in range(0, len(keyframe_poses), stride):
        pose = keyframe_poses[host]
        dist = np.linalg.norm(cents - pose.translation, axis=1)
        member = np.flatnonzero(dist <= radius)
        if member.size == 0:
            continue
        inv = pose.inverse()
        blocks.append(
            Block(
                host_id=host,
                host_pose=pose,
                landmark_ids=[int(i) for i in member],
                kinds=[landmarks[i].kind for i in member],
                labels=[landmarks[i].label for i in member],
                centroids=inv.transform(cents[member]),
                normals=norms[member] @ pose.rotation,
            )
        )
    return blocks


def cluster_coplanar(
    centroids: np.ndarray,
    normals: np.ndarray,
    labels: list[str],
    angle_max_deg: float = 5.0,
    dist_max: float = 0.2,
) -> list[list[int]]:
    """Group plane landmarks lying on one infinite plane (same label only).

    Two planes connect when their normals differ by < angle_max_deg and each
    centroid is within dist_max of the other's plane; groups are connected
    components of that relation.
    """
    m = len(labels)
    if m == 0:
        return []
    angle_max = np.deg2rad(angle_max_deg)
    centroids = np.asarray(centroids, dtype=float).reshape(m, 3)
    normals = np.asarray(normals, dtype=float).reshape(m, 3)
    unit = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    cos = np.clip(np.abs(unit @ unit.T), -1.0, 1.0)
    angle_ok = np.arccos(cos) < angle_max
    diff = centroids[None, :, :] - centroids[:, None, :]   # [i, j] = c_j - c_i
    plane_dist = np.abs(np.einsum("ik,ijk->ij", unit, diff))
    dist_ok = np.maximum(plane_dist, plane_dist.T) < dist_max
    same_label = np.array(
        [[la == lb for lb in labels] for la in labels], dtype=bool
    )
    link = angle_ok & dist_ok & same_label

    parent = list(range(m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in zip(*np.nonzero(np.triu(link, 1))):
        parent[find(int(i))] = find(int(j))
    groups: dict[int, list[int]] = {}
    for i in range(m):
        groups.setdefault(find(i), []).append(i)
    return [sorted(g) for g in sorted(groups.values(), key=lambda g: g[0])]


def build_semantic_graph(block: Block, config: PipelineConfig | None = None) -> SemanticGraph:
    """Line node per pole landmark; plane nodes from coplanar clustering."""
    cfg = config or PipelineConfig()
    nodes: list[GraphNode] = []
    line_idx = [i for i, k in enumerate(block.kinds) if k == "line"]
    plane_idx = [i for i, k in enumerate(block.kinds) if k == "plane"]
    for i in line_idx:
        nodes.append(
            GraphNode(
                kind="line",
                label=block.labels[i],
                centroid=block.centroids[i],
                normal=block.normals[i],
                landmark_ids=[block.landmark_ids[i]],
            )
        )
    if plane_idx:
        cents = block.centroids[plane_idx]
        norms = block.normals[plane_idx]
        labels = [block.labels[i] for i in plane_idx]
        for group in cluster_coplanar(
            cents, norms, labels, cfg.coplanar_angle_deg, cfg.coplanar_dist_m
        ):
            signed = [geom.canonical_direction(norms[g])[0] for g in group]
            normal = np.mean(signed, axis=0)
            normal /= np.linalg.norm(normal)
            nodes.append(
                GraphNode(
                    kind="plane",
                    label=labels[group[0]],
                    centroid=np.mean(cents[group], axis=0),
                    normal=normal,
                    landmark_ids=[block.landmark_ids[plane_idx[g]] for g in group],
                )
            )
    return SemanticGraph(nodes)


# ---------------------------------------------------------------------------
# Graff coordinates and the subspace metric
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraffCoordinate:
    """Stiefel coordinates of an affine k-subspace of R^n.

    Y is the (n+1) x (k+1) matrix [[A, b/s], [0, 1/s]] with s = sqrt(|b|^2+1);
    A (orthonormal basis) and b (orthogonal displacement) are kept so the
    recentered forms used by the metric can be rebuilt.
    """

    Y: np.ndarray
    A: np.ndarray
    b: np.ndarray

    @property
    def k(self) -> int:
        return self.A.shape[1]


def graff_coordinate(A: np.ndarray, b: np.ndarray) -> GraffCoordinate:
    """Assemble Graff coordinates from a basis and displacement."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != 3:
        A = A.T
    if A.shape[0] != 3 or A.shape[1] not in (1, 2):
        raise DimensionMismatch(f"basis must be 3xk with k in (1,2), got {A.shape}")
    gram = A.T @ A
    if np.max(np.abs(gram - np.eye(A.shape[1]))) > 1e-9:
        raise BasisNotOrthonormal("A^T A deviates from identity by more than 1e-9")
    b = np.asarray(b, dtype=float).copy()
    in_span = A @ (A.T @ b)
    if np.linalg.norm(in_span) > 1e-9:
        b = b - in_span
    s = np.sqrt(b @ b + 1.0)
    top = np.hstack([A, (b / s)[:, None]])
    bottom = np.concatenate([np.zeros(A.shape[1]), [1.0 / s]])
    return GraffCoordinate(np.vstack([top, bottom]), A, b)


def line_graff(direction: np.ndarray, point: np.ndarray) -> GraffCoordinate:
    """Graff coordinates of the line through `point` along `direction`."""
    a = np.asarray(direction, dtype=float)
    a = a / np.linalg.norm(a)
    p = np.asarray(point, dtype=float)
    return graff_coordinate(a[:, None], p - a * (a @ p))


def plane_graff(normal: np.ndarray, point: np.ndarray) -> GraffCoordinate:
    """Graff coordinates of the plane through `point` with `normal`."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    # orthonormal basis of the tangent: the two columns of (I - nn^T) QR
    q, _ = np.linalg.qr(np.eye(3) - np.outer(n, n))
    # drop the column closest to n (numerically the last nonzero projector col)
    dots = np.abs(q.T @ n)
    keep = np.argsort(dots)[:2]
    A = q[:, sorted(keep)]
    p = np.asarray(point, dtype=float)
    return graff_coordinate(A, n * (n @ p))


def _subspace_distance(y1: GraffCoordinate, y2: GraffCoordinate) -> float:
    """Squared-principal-angle distance; accepts mixed intrinsic dimensions.

    The pair is recentered by the first argument's displacement. The
    recentered displacement is projected onto the orthogonal complement of
    span(A1) + span(A2) (displacement components inside either subspace do
    not move the affine pair apart), which makes the metric symmetric and
    invariant under a common rigid transform.
    """
    b02 = y2.b - y1.b
    joint = np.hstack([y1.A, y2.A])
    q, r = np.linalg.qr(joint)
    rank = int(np.sum(np.abs(np.diag(r)) > 1e-9))
    q = q[:, :rank]
    b02 = b02 - q @ (q.T @ b02)
    s = np.sqrt(b02 @ b02 + 1.0)
    k1, k2 = y1.k, y2.k
    yp1 = np.zeros((4, k1 + 1))
    yp1[:3, :k1] = y1.A
    yp1[3, k1] = 1.0
    yp2 = np.zeros((4, k2 + 1))
    yp2[:3, :k2] = y2.A
    yp2[:3, k2] = b02 / s
    yp2[3, k2] = 1.0 / s
    sv = np.clip(np.linalg.svd(yp1.T @ yp2, compute_uv=False), -1.0, 1.0)
    return float(np.sum(np.arccos(sv) ** 2))


def graff_distance(y1: GraffCoordinate, y2: GraffCoordinate) -> float:
    """Subspace distance between two lines or two planes (equal (n, k))."""
    if y1.Y.shape != y2.Y.shape:
        raise DimensionMismatch(f"shapes {y1.Y.shape} vs {y2.Y.shape}")
    return _subspace_distance(y1, y2)


def node_graff(node: GraphNode) -> GraffCoordinate:
    if node.kind == "line":
        return line_graff(node.normal, node.centroid)
    return plane_graff(node.normal, node.centroid)


# ---------------------------------------------------------------------------
# affinity and the consistency solver
# ---------------------------------------------------------------------------


def candidate_pairs(gi: SemanticGraph, gj: SemanticGraph) -> list[tuple[int, int]]:
    """All node pairs with equal kind and semantic label."""
    return [
        (a, b)
        for a, na in enumerate(gi.nodes)
        for b, nb in enumerate(gj.nodes)
        if na.kind == nb.kind and na.label == nb.label
    ]


def build_affinity(
    gi: SemanticGraph,
    gj: SemanticGraph,
    candidates: list[tuple[int, int]] | None = None,
    sigma: float = 0.15,
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Pairwise-consistency affinity over candidate associations.

    For candidates a=(u_i,u_j), b=(v_i,v_j): delta = |d(u_i,v_i) - d(u_j,v_j)|
    on the Grassmannian; affinity exp(-delta^2 / 2 sigma^2), zero beyond the
    3-sigma gate, unit diagonal.
    """
    if candidates is None:
        candidates = candidate_pairs(gi, gj)
    m = len(candidates)
    aff = np.eye(m)
    if m == 0:
        return aff, candidates
    ycache_i = {}
    ycache_j = {}
    for a in range(m):
        ia, ja = candidates[a]
        ycache_i.setdefault(ia, node_graff(gi.nodes[ia]))
        ycache_j.setdefault(ja, node_graff(gj.nodes[ja]))
    dcache_i: dict[tuple[int, int], float] = {}
    dcache_j: dict[tuple[int, int], float] = {}

    def dist(cache, ycache, a, b):
        # mixed line/plane node pairs use the generalized subspace distance
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            cache[key] = _subspace_distance(ycache[key[0]], ycache[key[1]])
        return cache[key]

    gate = 3.0 * sigma
    for a in range(m):
        ia, ja = candidates[a]
        for b in range(a + 1, m):
            ib, jb = candidates[b]
            if ia == ib or ja == jb:
                continue  # conflicting candidates stay at zero affinity
            delta = abs(dist(dcache_i, ycache_i, ia, ib) - dist(dcache_j, ycache_j, ja, jb))
            if delta < gate:
                aff[a, b] = aff[b, a] = np.exp(-(delta**2) / (2.0 * sigma**2))
    return aff, candidates


def solve_associations(
    affinity: np.ndarray,
    candidates: list[tuple[int, int]],
    min_size: int = 3,
) -> CorrespondenceSet:
    """Densest one-to-one consistent candidate subset.

    Power iteration on the (conflict-zeroed) affinity matrix gives a soft
    indicator; greedy rounding in score order keeps candidates that are
    one-to-one and positively consistent with everything already kept.
    Raises NoConsensus when the rounded set has fewer than min_size pairs.
    """
    m = len(candidates)
    if m == 0:
        raise NoConsensus("no candidate pairs")
    aff = np.asarray(affinity, dtype=float)
    u = np.full(m, 1.0 / np.sqrt(m))
    for _ in range(500):
        v = aff @ u
        nv = np.linalg.norm(v)
        if nv <= 0:
            break
        v = np.maximum(v, 0.0) / nv
        if np.linalg.norm(v - u) < 1e-12:
            u = v
            break
        u = v

    def grow(seed: int) -> list[int]:
        chosen = [seed]
        used_i = {candidates[seed][0]}
        used_j = {candidates[seed][1]}
        while True:
            best_a, best_key = -1, None
            for a in range(m):
                if a in chosen:
                    continue
                ia, ja = candidates[a]
                if ia in used_i or ja in used_j:
                    continue
                link = min(aff[a, b] for b in chosen)
                if link <= 0.0:
                    continue
                # strongest weakest-link first; eigenvector score breaks ties
                key = (link, u[a], -a)
                if best_key is None or key > best_key:
                    best_a, best_key = a, key
            if best_a < 0:
                return chosen
            chosen.append(best_a)
            used_i.add(candidates[best_a][0])
            used_j.add(candidates[best_a][1])

    def density(chosen: list[int]) -> float:
        return float(sum(aff[a, b] for i, a in enumerate(chosen) for b in chosen[i + 1:]))

    seeds = sorted(range(m), key=lambda a: (-u[a], a))[: min(m, 10)]
    best: list[int] = []
    best_key = (-1, -1.0)
    for seed in seeds:
        grown = grow(seed)
        key = (len(grown), density(grown))
        if key > best_key:
            best, best_key = grown, key
    if len(best) < min_size:
        raise NoConsensus(f"best consistent set has {len(best)} < {min_size} pairs")
    best.sort()
    score = best_key[1] / max(len(best), 1)
    return CorrespondenceSet(pairs=[candidates[a] for a in best], score=score)


def match_graphs(
    gi: SemanticGraph,
    gj: SemanticGraph,
    config: PipelineConfig | None = None,
) -> CorrespondenceSet:
    """Full pipeline: candidates -> affinity -> consistent correspondences."""
    cfg = config or PipelineConfig()
    aff, cands = build_affinity(gi, gj, sigma=cfg.affinity_sigma)
    corr = solve_associations(aff, cands, min_size=cfg.min_assoc)
    corr.line_pairs = [(a, b) for a, b in corr.pairs if gi.nodes[a].kind == "line"]
    corr.plane_pairs = [(a, b) for a, b in corr.pairs if gi.nodes[a].kind == "plane"]
    return corr
