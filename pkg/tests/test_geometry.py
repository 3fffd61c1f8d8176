import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm

from inrslam import autodiff as ad
from inrslam.autodiff import ParameterBlock
from inrslam.geometry import (inverse, look_at, orthonormal_error, pixel_directions, pose_to_tum,
                              reorthonormalize, rotation_angle_deg, se3_exp, se3_exp_node, se3_log, tum_to_pose,
                              twist_hat)
from inrslam.pipeline import apply_twist

twists = arrays(np.float64, 6, elements=st.floats(-2, 2, allow_nan=False))


@given(twists)
def test_exp_matches_matrix_exponential(xi):
    np.testing.assert_allclose(se3_exp(xi), expm(twist_hat(xi)), atol=1e-10)


@given(twists)
def test_exp_is_rigid(xi):
    T = se3_exp(xi)
    assert orthonormal_error(T) < 1e-12
    np.testing.assert_array_equal(T[3], [0, 0, 0, 1])


@given(arrays(np.float64, 6, elements=st.floats(-1, 1, allow_nan=False)))
def test_log_inverts_exp(xi):
    np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


def test_small_angle_branch_is_continuous():
    xi = np.array([0.1, -0.2, 0.3, 1e-9, 0.0, 0.0])
    np.testing.assert_allclose(se3_exp(xi), expm(twist_hat(xi)), atol=1e-14)


@given(twists)
def test_inverse(xi):
    T = se3_exp(xi)
    np.testing.assert_allclose(inverse(T) @ T, np.eye(4), atol=1e-12)


def test_exp_node_gradient_matches_central_differences(rng):
    xi = ParameterBlock("xi", rng.normal(scale=0.5, size=6))
    W = rng.normal(size=(4, 4))
    with ad.Tape() as tape:
        loss = ad.sum(ad.mul(se3_exp_node(ad.param(xi)), W))
    ad.backward(tape, loss)
    num = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = 1e-6
        num[i] = (np.sum(se3_exp(xi.values + e) * W) - np.sum(se3_exp(xi.values - e) * W)) / 2e-6
    np.testing.assert_allclose(xi.grad, num, rtol=1e-6, atol=1e-9)


@given(twists, twists)
def test_twist_is_a_left_update(xi, base):
    P = se3_exp(base)
    new = apply_twist(0.1 * xi, P)
    np.testing.assert_allclose(new @ np.linalg.inv(P), se3_exp(0.1 * xi), atol=1e-9)
    np.testing.assert_allclose(apply_twist(np.zeros(6), P), P, atol=1e-12)


def test_rotation_twist_pivots_about_world_origin():
    P = look_at((2.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    out = apply_twist(np.array([0, 0, 0, 0, 0, 0.3]), P)
    np.testing.assert_allclose(out[:3, 3], [2 * np.cos(0.3), 2 * np.sin(0.3), 0.0], atol=1e-12)
    assert rotation_angle_deg(out[:3, :3] @ P[:3, :3].T) == pytest.approx(np.degrees(0.3))


def test_tum_roundtrip(rng):
    T = se3_exp(rng.normal(size=6))
    np.testing.assert_allclose(tum_to_pose(pose_to_tum(T)), T, atol=1e-12)


def test_reorthonormalize_projects_drifted_rotation(rng):
    T = se3_exp(rng.normal(size=6))
    T[:3, :3] += 1e-4 * rng.normal(size=(3, 3))
    out = reorthonormalize(T)
    assert orthonormal_error(out) < 1e-12
    np.testing.assert_array_equal(out[:3, 3], T[:3, 3])


def test_look_at_axes():
    T = look_at((0.0, -2.0, 0.0), (0.0, 0.0, 0.0))
    np.testing.assert_allclose(T[:3, 2], [0, 1, 0], atol=1e-12)  # forward
    np.testing.assert_allclose(T[:3, 1], [0, 0, -1], atol=1e-12)  # image down is world down
    assert orthonormal_error(T) < 1e-12


def test_pixel_directions_unit_z_through_principal_point():
    d = pixel_directions(np.array([23.5 - 0.5]), np.array([31.5 - 0.5]), (50.0, 50.0, 31.5, 23.5))
    np.testing.assert_allclose(d, [[0.0, 0.0, 1.0]])
