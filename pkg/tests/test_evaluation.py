import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from inrslam.evaluation import (GridIndex, Mesh, ate_rmse, brute_force_nn, compact, completion_ratio, cull_mesh,
                                depth_l1, drop_degenerate, edge_use_counts, marching_cubes, marching_cubes_grid,
                                mesh_accuracy, mesh_completion, mesh_scores, mesh_scores_from_samples, psnr,
                                read_ply, rigid_align, sample_surface, write_ply)
from inrslam.geometry import look_at


def sphere(r=0.5):
    return lambda p: np.linalg.norm(p, axis=-1) - r


def test_psnr_closed_form():
    ref = np.zeros((4, 4, 3))
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-12)
    assert psnr(ref, ref) == 99.0
    with pytest.raises(ValueError):
        psnr(ref, np.zeros((4, 4)))


def test_depth_l1_ignores_missing_reference():
    assert depth_l1(np.array([1.0, 2.0, 9.0]), np.array([1.1, 2.0, 0.0])) == pytest.approx(5.0)
    assert depth_l1(np.ones(3), np.zeros(3)) is None


@given(arrays(np.float64, 3, elements=st.floats(-np.pi, np.pi)), arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_ate_invariant_to_global_rigid_transform(rv, t):
    rng = np.random.default_rng(0)
    ref = rng.normal(size=(20, 3))
    est = ref + 0.01 * rng.normal(size=(20, 3))
    R = Rotation.from_rotvec(rv).as_matrix()
    moved = est @ R.T + t
    assert abs(ate_rmse(moved, ref) - ate_rmse(est, ref)) <= 1e-9


def test_ate_zero_for_rigidly_moved_copy(rng):
    ref = rng.normal(size=(10, 3))
    R = Rotation.from_rotvec([0.3, -0.2, 1.0]).as_matrix()
    assert ate_rmse(ref @ R.T + 2.0, ref) < 1e-12
    assert ate_rmse(ref[:2], ref[:2]) is None


def test_rigid_align_has_no_reflection(rng):
    a = rng.normal(size=(8, 3))
    b = a * np.array([1, 1, -1])  # mirrored target
    R, _ = rigid_align(a, b)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_ate_accepts_pose_matrices():
    poses = [look_at((np.cos(a), np.sin(a), 0.0), (0, 0, 0)) for a in np.linspace(0, 3, 6)]
    assert ate_rmse(poses, poses) == pytest.approx(0.0, abs=1e-12)


def test_marching_cubes_sphere_radii():
    mesh = marching_cubes(sphere(0.5), (-0.6,) * 3, (0.6,) * 3, voxel=0.02)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert r.min() >= 0.48 and r.max() <= 0.52
    assert np.all(edge_use_counts(mesh) == 2)  # closed and manifold


def test_marching_cubes_box_with_lattice_vertices_is_closed():
    box = lambda p: np.max(np.abs(p) - 0.3, axis=-1)
    mesh = marching_cubes(box, (-0.5,) * 3, (0.5,) * 3, voxel=0.1)
    assert np.all(edge_use_counts(mesh) == 2)


def test_marching_cubes_orientation_outward():
    mesh = marching_cubes(sphere(0.5), (-0.6,) * 3, (0.6,) * 3, voxel=0.05)
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    c = v.mean(1)
    # consistent orientation: all normals agree in sign with the radial direction
    s = np.sign(np.sum(n * c, axis=1))
    assert abs(s.mean()) == 1.0


def test_marching_cubes_empty_when_no_crossing():
    assert marching_cubes_grid(np.ones((3, 3, 3)), (0, 0, 0), 1.0).empty


def test_identical_meshes_score_perfectly():
    mesh = marching_cubes(sphere(0.5), (-0.6,) * 3, (0.6,) * 3, voxel=0.05)
    s = mesh_scores(mesh, mesh, n=5000)
    assert s.accuracy_cm == 0.0 and s.completion_cm == 0.0 and s.completion_ratio == 100.0
    assert mesh_accuracy(mesh, mesh, n=100) == 0.0
    assert mesh_completion(mesh, mesh, n=100) == 0.0
    assert completion_ratio(mesh, mesh, n=100) == 100.0


def test_scores_of_offset_sphere():
    a = marching_cubes(sphere(0.5), (-0.7,) * 3, (0.7,) * 3, voxel=0.02)
    b = marching_cubes(sphere(0.6), (-0.7,) * 3, (0.7,) * 3, voxel=0.02)
    s = mesh_scores(a, b, n=20000)
    assert s.accuracy_cm == pytest.approx(10.0, abs=0.5)
    assert s.completion_cm == pytest.approx(10.0, abs=0.5)
    assert s.completion_ratio == 0.0


def test_empty_mesh_scores():
    e = Mesh(np.zeros((0, 3)), np.zeros((0, 3)))
    assert mesh_scores(e, e).completion_ratio == 0.0
    assert mesh_scores_from_samples(np.zeros((0, 3)), np.ones((2, 3))).accuracy_cm is None


@pytest.mark.parametrize("seed", range(3))
def test_nearest_neighbour_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(1000, 3))
    q = rng.uniform(-1.5, 1.5, size=(1000, 3))
    d, i = GridIndex(pts).query(q)
    d0, i0 = brute_force_nn(pts, q)
    np.testing.assert_allclose(d, d0, rtol=1e-12)
    np.testing.assert_array_equal(i, i0)


def test_grid_index_rejects_empty():
    with pytest.raises(ValueError):
        GridIndex(np.zeros((0, 3)))


def test_sample_surface_lies_on_faces(rng):
    m = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    p = sample_surface(m, 500, rng)
    assert np.all(p[:, 2] == 0) and np.all(p[:, 0] + p[:, 1] <= 1 + 1e-12) and np.all(p >= -1e-12)


def test_degenerate_faces_removed_and_compacted():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 2, 2.0]])
    m = drop_degenerate(Mesh(v, np.array([[0, 1, 2], [0, 0, 1], [0, 1, 1]])))
    assert len(m.faces) == 1 and len(m.vertices) == 3
    assert len(compact(Mesh(v, np.array([[0, 1, 2]]))).vertices) == 3


def test_cull_removes_unseen_geometry():
    mesh = marching_cubes(sphere(0.5), (-0.6,) * 3, (0.6,) * 3, voxel=0.05)
    P = look_at((0.0, -2.0, 0.0), (0, 0, 0))
    intr = (30.0, 30.0, 16.0, 12.0)
    # a depth image of a wall far behind the sphere sees everything in the frustum
    culled = cull_mesh(mesh, [P], intr, [np.full((24, 32), 3.0)])
    assert 0 < len(culled.faces) <= len(mesh.faces)
    # depth closer than the sphere minus T: the sphere is occluded
    assert cull_mesh(mesh, [P], intr, [np.full((24, 32), 1.0)]).empty


def test_ply_roundtrip(tmp_path):
    mesh = marching_cubes(sphere(0.5), (-0.6,) * 3, (0.6,) * 3, voxel=0.1)
    write_ply(tmp_path / "m.ply", mesh)
    back = read_ply(tmp_path / "m.ply")
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.faces, mesh.faces)
