import numpy as np
import pytest

from inrslam import autodiff as ad
from inrslam.autodiff import ParameterBlock
from inrslam.data import default_intrinsics, render_oracle_frame, sphere_scene
from inrslam.encodings import AABB
from inrslam.geometry import look_at
from inrslam.octree import OctreeSDFPrior

BOX = AABB((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def fused(n_views=4, leaf=0.04):
    scene = sphere_scene(0.5)
    tree = OctreeSDFPrior(BOX, leaf, 0.1)
    for a in np.linspace(0, 2 * np.pi, n_views, endpoint=False):
        P = look_at((0.95 * np.cos(a), 0.95 * np.sin(a), 0.2), (0, 0, 0))
        f = render_oracle_frame(scene, P, default_intrinsics(32, 24), (32, 24))
        tree.fuse(f.depth, f.intrinsics, P)
    return scene, tree


def test_empty_tree_reports_unknown():
    tree = OctreeSDFPrior(BOX)
    sdf, known = tree.query(np.zeros((3, 3)))
    assert not known.any() and np.all(sdf == tree.truncation)


def test_depth_and_root_size_cover_box():
    tree = OctreeSDFPrior(BOX, 0.04)
    assert tree.root_size >= 2.0 and tree.root_size / 2 < 2.0


def test_fused_prior_close_to_sphere_sdf_near_surface():
    scene, tree = fused()
    assert tree.num_leaves > 0
    rng = np.random.default_rng(0)
    d = rng.normal(size=(4000, 3))
    p = d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(0.48, 0.52, size=(4000, 1))
    sdf, known = tree.query(p)
    assert known.mean() > 0.3
    err = np.abs(sdf[known] - scene.sdf(p[known]))
    assert np.median(err) < 0.02


def test_leaves_only_near_surface():
    _, tree = fused(2)
    centres = tree.origin + (tree._unpack_leaf(tree.leaf_keys) + 0.5) * tree.leaf_size
    r = np.linalg.norm(centres, axis=1)
    assert np.all(np.abs(r - 0.5) < 0.1 + np.sqrt(3) * tree.leaf_size)


def test_hierarchy_is_consistent():
    _, tree = fused(2)
    top = tree.nodes_at_level(0)
    assert len(top) == 1
    lvl1 = tree.nodes_at_level(1)
    assert len(tree.children(0, top[0])) == len(lvl1)
    assert len(tree.nodes_at_level(tree.max_depth)) == tree.num_leaves


def test_query_node_gradient_matches_central_differences():
    _, tree = fused(3)
    rng = np.random.default_rng(1)
    d = rng.normal(size=(20, 3))
    p0 = 0.5 * d / np.linalg.norm(d, axis=1, keepdims=True) + 0.003
    _, known = tree.query(p0)
    p0 = p0[known][:5]
    P = ParameterBlock("p", p0)
    with ad.Tape() as tape:
        loss = ad.sum(tree.query_node(ad.param(P)))
    ad.backward(tape, loss)
    err = ad.finite_diff_check(lambda: float(np.sum(tree.query(P.values)[0])), P, h=1e-7)
    assert err < 1e-5


def test_state_roundtrip():
    _, tree = fused(2)
    other = OctreeSDFPrior(BOX, 0.04, 0.1)
    other.load_state_arrays(tree.state_arrays())
    p = np.random.default_rng(2).uniform(-0.6, 0.6, size=(200, 3))
    np.testing.assert_array_equal(other.query(p)[0], tree.query(p)[0])
