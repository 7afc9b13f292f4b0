"""Hybrid registration, refinement, and pairwise-consistent loop pruning."""

import numpy as np
import pytest

from lpmap import assoc, geom, register
from lpmap.errors import Degenerate

UZ = np.array([0.0, 0.0, 1.0])


def _node(kind, label, centroid, normal):
    return assoc.GraphNode(kind, label, np.asarray(centroid, float),
                           np.asarray(normal, float), [0])


def _landmark_set(rng, n_poles=5, n_planes=3, n_ground=6):
    """Centroids/normals of a well-conditioned landmark bundle.

    Several spread-out ground patches mimic the voxel-level plane landmarks a
    real block carries; they pin z, roll, and pitch.
    """
    items = []
    for k in range(n_poles):
        c = np.array([*rng.uniform(-8, 8, 2), rng.uniform(1, 3)])
        items.append(("line", "pole", c, UZ.copy()))
    yaws = rng.uniform(0, np.pi, n_planes)
    for k in range(n_planes):
        c = np.array([*rng.uniform(-8, 8, 2), 1.0])
        n = np.array([-np.sin(yaws[k]), np.cos(yaws[k]), 0.0])
        items.append(("plane", "building", c, n))
    for k in range(n_ground):
        c = np.array([*rng.uniform(-8, 8, 2), 0.0])
        items.append(("plane", "road", c, UZ.copy()))
    return items


def _transformed_graphs(items, t: geom.RigidPose, noise=0.0, rng=None):
    """Graph i holds the items; graph j holds the same items seen from frame j,
    where t maps j-frame coordinates into i-frame coordinates."""
    inv = t.inverse()
    nodes_i = [_node(k, l, c, n) for k, l, c, n in items]
    nodes_j = []
    for k, l, c, n in items:
        cj = inv.transform(c)
        nj = inv.rotation @ n
        if noise and rng is not None:
            cj = cj + rng.normal(scale=noise, size=3)
        nodes_j.append(_node(k, l, cj, nj))
    gi = assoc.SemanticGraph(nodes_i)
    gj = assoc.SemanticGraph(nodes_j)
    corr = assoc.CorrespondenceSet(pairs=[(k, k) for k in range(len(items))], score=1.0)
    return gi, gj, corr


def _blocks_from_items(items_i, items_j):
    def block(items):
        return assoc.Block(
            host_id=0,
            host_pose=geom.RigidPose.identity(),
            landmark_ids=list(range(len(items))),
            kinds=[k for k, _, _, _ in items],
            labels=[l for _, l, _, _ in items],
            centroids=np.array([c for _, _, c, _ in items]),
            normals=np.array([n for _, _, _, n in items]),
        )
    return block(items_i), block(items_j)


def test_coarse_register_identity():
    rng = np.random.default_rng(60)
    items = _landmark_set(rng)
    gi, gj, corr = _transformed_graphs(items, geom.RigidPose.identity())
    pose = register.coarse_register(gi, gj, corr)
    assert np.max(np.abs(pose.matrix() - np.eye(4))) < 1e-9


def test_coarse_register_recovers_transform():
    rng = np.random.default_rng(61)
    items = _landmark_set(rng, n_poles=6, n_planes=2)
    t = geom.RigidPose(geom.so3_exp(np.array([0, 0, np.deg2rad(10)])),
                       np.array([1.0, 2.0, 0.0]))
    gi, gj, corr = _transformed_graphs(items, t)
    pose = register.coarse_register(gi, gj, corr)
    assert np.max(np.abs(pose.matrix() - t.matrix())) < 1e-6


def test_coarse_register_degenerate_parallel_planes():
    nodes = [
        _node("plane", "building", [0, y, 1], [0, 1, 0]) for y in (0.0, 4.0, 8.0)
    ]
    gi = assoc.SemanticGraph(nodes)
    gj = assoc.SemanticGraph(nodes)
    corr = assoc.CorrespondenceSet(pairs=[(k, k) for k in range(3)], score=1.0)
    with pytest.raises(Degenerate):
        register.coarse_register(gi, gj, corr)


def test_coarse_register_too_few():
    nodes = [_node("line", "pole", [0, 0, 1], UZ), _node("plane", "road", [0, 0, 0], UZ)]
    gi = assoc.SemanticGraph(nodes)
    gj = assoc.SemanticGraph(nodes)
    corr = assoc.CorrespondenceSet(pairs=[(0, 0), (1, 1)], score=1.0)
    with pytest.raises(Degenerate):
        register.coarse_register(gi, gj, corr)


def test_refine_register_fixed_point():
    rng = np.random.default_rng(62)
    items = _landmark_set(rng)
    t = geom.RigidPose(geom.so3_exp(np.array([0, 0, 0.2])), np.array([1.0, -2.0, 0]))
    items_j = [
        (k, l, t.inverse().transform(c), t.inverse().rotation @ n)
        for k, l, c, n in items
    ]
    bi, bj = _blocks_from_items(items, items_j)
    result = register.refine_register(bi, bj, t)
    assert result.converged
    assert np.max(np.abs(result.pose.matrix() - t.matrix())) < 1e-9
    assert result.inliers == len(items)


def test_refine_register_corrects_offset_under_noise():
    rng = np.random.default_rng(63)
    items = _landmark_set(rng, n_poles=10, n_planes=6, n_ground=10)
    t = geom.RigidPose(geom.so3_exp(np.array([0, 0, np.deg2rad(10)])),
                       np.array([1.0, 2.0, 0.0]))
    inv = t.inverse()
    items_j = []
    for k, l, c, n in items:
        cj = inv.transform(c) + rng.normal(scale=0.04, size=3)
        items_j.append((k, l, cj, inv.rotation @ n))
    bi, bj = _blocks_from_items(items, items_j)
    t_init = geom.RigidPose(
        t.rotation @ geom.so3_exp(np.array([0, 0, np.deg2rad(3)])),
        t.translation + np.array([0.4, -0.3, 0.0]),
    )
    result = register.refine_register(bi, bj, t_init)
    assert result.converged
    err = t.inverse().compose(result.pose)
    assert np.linalg.norm(err.translation) < 0.05
    assert np.linalg.norm(geom.so3_log(err.rotation)) < np.deg2rad(0.5)


def test_refine_register_disjoint_blocks():
    rng = np.random.default_rng(64)
    items = _landmark_set(rng)
    far = [(k, l, c + np.array([500.0, 0, 0]), n) for k, l, c, n in items]
    bi, bj = _blocks_from_items(items, far)
    result = register.refine_register(bi, bj, geom.RigidPose.identity())
    assert result.inliers == 0 and not result.converged


def test_registration_equivariance():
    rng = np.random.default_rng(65)
    items = _landmark_set(rng, n_poles=6, n_planes=3)
    t = geom.RigidPose(geom.so3_exp(np.array([0, 0, 0.3])), np.array([2.0, 1.0, 0]))
    gi, gj, corr = _transformed_graphs(items, t)
    pose = register.coarse_register(gi, gj, corr)
    g = geom.RigidPose(geom.so3_exp(np.array([0.05, -0.02, 1.0])), np.array([5.0, -3.0, 2.0]))

    def moved(graph):
        return assoc.SemanticGraph(
            [
                _node(n.kind, n.label, g.transform(n.centroid), g.rotation @ n.normal)
                for n in graph.nodes
            ]
        )

    pose_g = register.coarse_register(moved(gi), moved(gj), corr)
    expected = g.compose(pose).compose(g.inverse())
    assert np.max(np.abs(pose_g.matrix() - expected.matrix())) < 1e-6


def _loop(ki, kj, t, si=0, sj=1):
    return register.LoopCandidate(
        session_i=si, keyframe_i=ki, session_j=sj, keyframe_j=kj, relative=t
    )


def _two_session_world(rng, n=8):
    """Ground-truth poses for two sessions plus a world_poses dict."""
    world = {}
    for sid in (0, 1):
        pose = geom.RigidPose(
            geom.so3_exp(np.array([0, 0, rng.uniform(-1, 1)])),
            np.array([rng.uniform(-5, 5), 10.0 * sid, 0.0]),
        )
        for k in range(n):
            world[(sid, k)] = pose
            step = geom.RigidPose(
                geom.so3_exp(np.array([0, 0, 0.1])), np.array([2.0, 0, 0])
            )
            pose = pose.compose(step)
    return world


def _true_loop(world, ki, kj):
    return _loop(ki, kj, world[(0, ki)].inverse().compose(world[(1, kj)]))


def test_pcm_residual_consistent_zero():
    rng = np.random.default_rng(66)
    world = _two_session_world(rng)
    la = _true_loop(world, 0, 1)
    lb = _true_loop(world, 3, 5)
    r_rot, r_trans = register.pcm_residual(la, lb, world)
    assert r_rot < 1e-12 and r_trans < 1e-12


def test_pcm_residual_translation_perturbation():
    rng = np.random.default_rng(67)
    world = _two_session_world(rng)
    la = _true_loop(world, 0, 1)
    lb = _true_loop(world, 3, 5)
    lb.relative = lb.relative.compose(geom.RigidPose(np.eye(3), np.array([1.0, 0, 0])))
    r_rot, r_trans = register.pcm_residual(la, lb, world)
    assert abs(r_trans - 1.0) < 1e-9


def test_pcm_residual_rotation_perturbation():
    rng = np.random.default_rng(68)
    world = _two_session_world(rng)
    la = _true_loop(world, 0, 1)
    lb = _true_loop(world, 2, 6)
    lb.relative = geom.RigidPose(
        lb.relative.rotation @ geom.so3_exp(np.array([0, 0, np.deg2rad(5)])),
        lb.relative.translation,
    )
    r_rot, r_trans = register.pcm_residual(la, lb, world)
    assert abs(r_rot - np.deg2rad(5)) < 1e-9


def test_pcm_residual_symmetry():
    rng = np.random.default_rng(69)
    world = _two_session_world(rng)
    for _ in range(10):
        la = _true_loop(world, int(rng.integers(0, 8)), int(rng.integers(0, 8)))
        lb = _true_loop(world, int(rng.integers(0, 8)), int(rng.integers(0, 8)))
        la.relative = la.relative.compose(
            geom.RigidPose(geom.so3_exp(rng.normal(scale=0.02, size=3)),
                           rng.normal(scale=0.1, size=3))
        )
        ab = register.pcm_residual(la, lb, world)
        ba = register.pcm_residual(lb, la, world)
        assert abs(ab[0] - ba[0]) < 1e-9
        assert abs(ab[1] - ba[1]) < 1e-9


def test_prune_loops_rejects_outliers():
    rng = np.random.default_rng(70)
    world = _two_session_world(rng)
    loops = [_true_loop(world, k, k + 1) for k in range(5)]
    bad1 = _true_loop(world, 5, 2)
    bad1.relative = bad1.relative.compose(geom.RigidPose(np.eye(3), np.array([10.0, 0, 0])))
    bad2 = _true_loop(world, 6, 7)
    bad2.relative = bad2.relative.compose(geom.RigidPose(np.eye(3), np.array([0, -12.0, 0])))
    loops += [bad1, bad2]
    accepted = register.prune_loops(loops, world)
    assert len(accepted) == 5
    assert all(l is not bad1 and l is not bad2 for l in accepted)
    assert bad1.status == "rejected" and bad2.status == "rejected"
    # accepted set is pairwise consistent post hoc
    for a in accepted:
        for b in accepted:
            if a is b:
                continue
            r_rot, r_trans = register.pcm_residual(a, b, world)
            assert r_rot < 0.1 and r_trans < 0.5


def test_prune_loops_single_and_conflict():
    rng = np.random.default_rng(71)
    world = _two_session_world(rng)
    single = [_true_loop(world, 2, 3)]
    assert register.prune_loops(list(single), world) == single
    a = _true_loop(world, 0, 1)
    b = _true_loop(world, 4, 6)
    b.relative = b.relative.compose(geom.RigidPose(np.eye(3), np.array([3.0, 0, 0])))
    accepted = register.prune_loops([a, b], world)
    assert accepted == [a]  # deterministic: lower (i, j) wins
    assert register.prune_loops([], world) == []
