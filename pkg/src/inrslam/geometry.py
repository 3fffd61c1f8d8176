"""Rigid transforms: SE(3) exponential, composition, quaternions, camera rays."""
from __future__ import annotations

import numpy as np
from scipy.linalg import expm_frechet
from scipy.spatial.transform import Rotation

from . import autodiff as ad


def hat3(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def twist_hat(xi: np.ndarray) -> np.ndarray:
    """4x4 Lie-algebra matrix of a twist ``(rho, omega)``."""
    xi = np.asarray(xi, float)
    m = np.zeros((4, 4))
    m[:3, :3] = hat3(xi[3:])
    m[:3, 3] = xi[:3]
    return m


GENERATORS = np.stack([twist_hat(e) for e in np.eye(6)])


def se3_exp(xi) -> np.ndarray:
    """Closed-form (Rodrigues) exponential; returns a 4x4 camera-to-world style matrix."""
    xi = np.asarray(xi, float)
    rho, w = xi[:3], xi[3:]
    th = float(np.linalg.norm(w))
    K = hat3(w)
    K2 = K @ K
    if th < 1e-8:
        a, b, c = 1.0 - th**2 / 6, 0.5 - th**2 / 24, 1.0 / 6 - th**2 / 120
    else:
        a = np.sin(th) / th
        b = (1 - np.cos(th)) / th**2
        c = (th - np.sin(th)) / th**3
    T = np.eye(4)
    T[:3, :3] = np.eye(3) + a * K + b * K2
    T[:3, 3] = (np.eye(3) + b * K + c * K2) @ rho
    return T


def se3_log(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    w = Rotation.from_matrix(R).as_rotvec()
    th = float(np.linalg.norm(w))
    K = hat3(w)
    if th < 1e-8:
        Vinv = np.eye(3) - 0.5 * K + K @ K / 12
    else:
        Vinv = np.eye(3) - 0.5 * K + (1 - th * np.sin(th) / (2 * (1 - np.cos(th)))) / th**2 * (K @ K)
    return np.concatenate([Vinv @ t, w])


def se3_exp_node(xi):
    """Differentiable exponential; the VJP uses the Frechet derivative of the matrix exponential."""
    xv = np.asarray(ad.value(xi), float)
    A = twist_hat(xv)

    def vjp(g):
        gA = expm_frechet(A.T, g, compute_expm=False)
        return (np.einsum("kij,ij->k", GENERATORS, gA),)

    return ad.custom(se3_exp(xv), (xi,), vjp)


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def inverse(T: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    R = T[:3, :3]
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def project_to_so3(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def orthonormal_error(T: np.ndarray) -> float:
    R = T[:3, :3]
    return float(max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0)))


def reorthonormalize(T: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    if orthonormal_error(T) <= tol:
        return T
    out = T.copy()
    out[:3, :3] = project_to_so3(T[:3, :3])
    return out


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose (OpenCV axes: x right, y down, z forward)."""
    eye, target, up = (np.asarray(v, float) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, :3] = np.stack([x, y, z], axis=1)
    T[:3, 3] = eye
    return T


def pose_to_tum(T: np.ndarray) -> np.ndarray:
    """``tx ty tz qx qy qz qw``."""
    q = Rotation.from_matrix(T[:3, :3]).as_quat()
    return np.concatenate([T[:3, 3], q])


def tum_to_pose(v) -> np.ndarray:
    v = np.asarray(v, float)
    T = np.eye(4)
    T[:3, :3] = Rotation.from_quat(v[3:7]).as_matrix()
    T[:3, 3] = v[:3]
    return T


def pixel_directions(rows: np.ndarray, cols: np.ndarray, intrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z (so distance along the ray equals z-depth)."""
    fx, fy, cx, cy = intrinsics
    rows = np.asarray(rows, float)
    cols = np.asarray(cols, float)
    return np.stack([(cols + 0.5 - cx) / fx, (rows + 0.5 - cy) / fy, np.ones_like(rows)], axis=-1)


def rotation_angle_deg(R: np.ndarray) -> float:
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))
