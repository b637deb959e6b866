"""Rotation helpers: quaternions (w, x, y, z), SO(3) exp/log maps and their Jacobians.

Everything broadcasts over leading axes. The world is z-up; the heading of a
frame is the yaw of its x axis projected onto the ground plane.
"""
from __future__ import annotations

import numpy as np

_SMALL = 1e-7
UP = np.array([0.0, 0.0, 1.0])


def cross(a, b) -> np.ndarray:
    """Broadcasting cross product over the last axis; cheaper than np.cross on small arrays."""
    a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2]
    b1, b2, b3 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1], -1)


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _angle_coeffs(theta):
    """sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 with series near zero."""
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def so3_exp(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    a, b, _ = _angle_coeffs(theta)
    K = skew(r)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return quat_to_rotvec(mat_to_quat(R))


def left_jacobian(r: np.ndarray) -> np.ndarray:
    """J with exp(r + dr) = exp(J dr) exp(r) to first order."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    _, b, c = _angle_coeffs(theta)
    K = skew(r)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def left_jacobian_inv(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    # 1/t^2 - (1 + cos t) / (2 t sin t)
    d = np.where(small, 1.0 / 12.0 + theta**2 / 720.0,
                 1.0 / (t * t) - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    K = skew(r)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + d[..., None, None] * (K @ K)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_rotvec(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    half = 0.5 * theta
    small = theta < 1e-8
    s = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half)[..., None], s[..., None] * r], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Rotation vector with angle in [0, pi]; sign of q is irrelevant."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(s, q[..., 0])
    small = s < 1e-12
    scale = np.where(small, 2.0 / np.where(small, np.maximum(q[..., 0], 1e-300), 1.0),
                     angle / np.where(small, 1.0, s))
    return scale[..., None] * v


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def mat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, branch chosen per element for stability."""
    R = np.asarray(R, dtype=float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _mat_to_quat(R)


def _mat_to_quat(R):
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    cands = np.stack([tr, m00, m11, m22], axis=-1)
    k = np.argmax(cands, axis=-1)
    q = np.empty(R.shape[:-2] + (4,))
    # branch 0
    s0 = np.sqrt(np.maximum(1.0 + tr, 1e-300)) * 2.0
    q0 = np.stack([0.25 * s0, (R[..., 2, 1] - R[..., 1, 2]) / s0,
                   (R[..., 0, 2] - R[..., 2, 0]) / s0, (R[..., 1, 0] - R[..., 0, 1]) / s0], -1)
    s1 = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 1e-300)) * 2.0
    q1 = np.stack([(R[..., 2, 1] - R[..., 1, 2]) / s1, 0.25 * s1,
                   (R[..., 0, 1] + R[..., 1, 0]) / s1, (R[..., 0, 2] + R[..., 2, 0]) / s1], -1)
    s2 = np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 1e-300)) * 2.0
    q2 = np.stack([(R[..., 0, 2] - R[..., 2, 0]) / s2, (R[..., 0, 1] + R[..., 1, 0]) / s2,
                   0.25 * s2, (R[..., 1, 2] + R[..., 2, 1]) / s2], -1)
    s3 = np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 1e-300)) * 2.0
    q3 = np.stack([(R[..., 1, 0] - R[..., 0, 1]) / s3, (R[..., 0, 2] + R[..., 2, 0]) / s3,
                   (R[..., 1, 2] + R[..., 2, 1]) / s3, 0.25 * s3], -1)
    for i, qi in enumerate((q0, q1, q2, q3)):
        q = np.where((k == i)[..., None], qi, q)
    q = np.where(q[..., :1] < 0.0, -q, q)
    return quat_normalize(q)


def heading_angle(R: np.ndarray) -> np.ndarray:
    """Yaw of the frame's x axis about world z."""
    R = np.asarray(R, dtype=float)
    return np.arctan2(R[..., 1, 0], R[..., 0, 0])


def yaw_matrix(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    c, s = np.cos(psi), np.sin(psi)
    out = np.zeros(psi.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def heading_grad(R: np.ndarray) -> np.ndarray:
    """d(heading)/d(omega) for a world-frame left perturbation exp(omega) R."""
    R = np.asarray(R, dtype=float)
    f = R[..., :, 0]
    rho2 = np.maximum(f[..., 0] ** 2 + f[..., 1] ** 2, 1e-12)
    g = np.empty(f.shape)
    g[..., 0] = -f[..., 2] * f[..., 0] / rho2
    g[..., 1] = -f[..., 2] * f[..., 1] / rho2
    g[..., 2] = 1.0
    return g
