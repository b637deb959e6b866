"""Skeletons, poses, forward kinematics, pinhole projection and the keypoint
reprojection loss with its analytic gradient.

Non-root joints are parameterized by exponential-map vectors: a ball joint
carries three components, a hinge a single angle about a fixed local axis.
Joint ``k``'s world rotation is ``R_parent @ exp(local_k)`` and its position
is ``X_parent + R_parent @ offset_k``.

Batched helpers (``*_batch``) take arrays with a leading batch axis and are
what the simulator, policy and metrics use internally; the ``Pose``-level
functions are thin wrappers around them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rotations as rot
from .errors import DegenerateProjectionError, InvalidInputError, ParseError, UnsupportedVersionError

FREE, BALL, HINGE = "free", "ball", "hinge"
_KIND_DOF = {FREE: 6, BALL: 3, HINGE: 1}
SKELETON_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int | None
    kind: str
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: tuple[float, float, float] | None = None
    limits: tuple[tuple[float, float], ...] = ()

    @property
    def dof(self) -> int:
        return _KIND_DOF[self.kind]


class Skeleton:
    """Topologically ordered joint tree with a single free root at index 0."""

    def __init__(self, joints: Sequence[Joint]):
        joints = list(joints)
        if not joints:
            raise InvalidInputError("skeleton needs at least one joint")
        roots = [i for i, j in enumerate(joints) if j.parent is None]
        if roots != [0] or joints[0].kind != FREE:
            raise InvalidInputError("exactly one root joint, of kind 'free', must come first")
        for i, j in enumerate(joints):
            if j.kind not in _KIND_DOF:
                raise InvalidInputError(f"joint {j.name!r}: unknown kind {j.kind!r}")
            if i > 0:
                if j.kind == FREE:
                    raise InvalidInputError(f"joint {j.name!r}: only the root may be free")
                if j.parent is None or not 0 <= j.parent < i:
                    raise InvalidInputError(f"joint {j.name!r}: parent must precede the joint")
            if j.kind == HINGE:
                if j.axis is None or abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
                    raise InvalidInputError(f"joint {j.name!r}: hinge axis must be a unit vector")
            if i > 0 and j.limits and len(j.limits) != j.dof:
                raise InvalidInputError(f"joint {j.name!r}: expected {j.dof} limit pairs")
        self.joints = tuple(joints)
        self.names = [j.name for j in joints]
        self.parents = np.array([-1] + [j.parent for j in joints[1:]], dtype=int)
        self.offsets = np.array([j.offset for j in joints], dtype=float)
        self.num_joints = len(joints)
        # slice of each non-root joint inside the joint-angle vector
        self.dof_slices: list[slice] = [slice(0, 0)]
        start = 0
        for j in joints[1:]:
            self.dof_slices.append(slice(start, start + j.dof))
            start += j.dof
        self.num_nonroot_dof = start
        self.num_dof = 6 + start
        lo, hi = [], []
        for j in joints[1:]:
            lims = j.limits or tuple((-np.pi, np.pi) for _ in range(j.dof))
            lo.extend(a for a, _ in lims)
            hi.extend(b for _, b in lims)
        self.lower = np.array(lo, dtype=float)
        self.upper = np.array(hi, dtype=float)
        self.children: list[list[int]] = [[] for _ in joints]
        for i in range(1, len(joints)):
            self.children[self.parents[i]].append(i)
        # descendants[k]: boolean mask over joints in the subtree rooted at k
        desc = np.zeros((len(joints), len(joints)), dtype=bool)
        for i in reversed(range(len(joints))):
            desc[i, i] = True
            for c in self.children[i]:
                desc[i] |= desc[c]
        self.descendants = desc
        # per-dof owning joint index
        self.dof_joint = np.zeros(start, dtype=int)
        for k in range(1, len(joints)):
            self.dof_joint[self.dof_slices[k]] = k

    def __repr__(self) -> str:
        return f"Skeleton({self.num_joints} joints, {self.num_dof} dof)"

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        out = []
        for j in self.joints:
            d = {"name": j.name, "parent": j.parent, "kind": j.kind, "offset": list(j.offset)}
            if j.axis is not None:
                d["axis"] = list(j.axis)
            if j.limits:
                d["limits"] = [list(p) for p in j.limits]
            out.append(d)
        return {"format": "skeleton", "version": SKELETON_FORMAT_VERSION, "joints": out}

    @classmethod
    def from_dict(cls, data: dict, path=None) -> "Skeleton":
        if data.get("format") != "skeleton":
            raise ParseError("not a skeleton file", path, "format")
        if data.get("version") != SKELETON_FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported skeleton version {data.get('version')!r}", path, "version")
        joints = []
        for i, d in enumerate(data.get("joints", [])):
            try:
                joints.append(Joint(
                    name=str(d["name"]),
                    parent=d["parent"],
                    kind=d["kind"],
                    offset=tuple(float(x) for x in d.get("offset", (0.0, 0.0, 0.0))),
                    axis=tuple(float(x) for x in d["axis"]) if d.get("axis") is not None else None,
                    limits=tuple((float(a), float(b)) for a, b in d.get("limits", [])),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad joint entry: {exc}", path, f"joints[{i}]") from exc
        try:
            return cls(joints)
        except InvalidInputError as exc:
            raise ParseError(str(exc), path, "joints") from exc

    def __eq__(self, other) -> bool:
        return isinstance(other, Skeleton) and self.joints == other.joints

    def __hash__(self) -> int:
        return hash(self.joints)


def save_skeleton(path, skeleton: Skeleton) -> None:
    Path(path).write_text(json.dumps(skeleton.to_dict(), indent=1))


def load_skeleton(path) -> Skeleton:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, line=exc.lineno) from exc
    return Skeleton.from_dict(data, path)


@dataclass
class Pose:
    root_translation: np.ndarray
    root_orientation: np.ndarray
    joint_angles: np.ndarray

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=float).reshape(3)
        self.root_orientation = np.asarray(self.root_orientation, dtype=float).reshape(4)
        self.joint_angles = np.asarray(self.joint_angles, dtype=float).reshape(-1)
        if abs(np.linalg.norm(self.root_orientation) - 1.0) > 1e-9:
            raise InvalidInputError("root orientation must be a unit quaternion")

    @classmethod
    def identity(cls, skeleton: Skeleton) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(skeleton.num_nonroot_dof))

    def check(self, skeleton: Skeleton) -> None:
        if self.joint_angles.shape[0] != skeleton.num_nonroot_dof:
            raise InvalidInputError(
                f"pose has {self.joint_angles.shape[0]} joint angles, skeleton needs {skeleton.num_nonroot_dof}")

    def copy(self) -> "Pose":
        return Pose(self.root_translation.copy(), self.root_orientation.copy(), self.joint_angles.copy())


@dataclass
class Velocities:
    root_linear: np.ndarray
    root_angular: np.ndarray
    joint_rates: np.ndarray

    def __post_init__(self):
        self.root_linear = np.asarray(self.root_linear, dtype=float).reshape(3)
        self.root_angular = np.asarray(self.root_angular, dtype=float).reshape(3)
        self.joint_rates = np.asarray(self.joint_rates, dtype=float).reshape(-1)

    @classmethod
    def zeros(cls, skeleton: Skeleton) -> "Velocities":
        return cls(np.zeros(3), np.zeros(3), np.zeros(skeleton.num_nonroot_dof))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.root_linear, self.root_angular, self.joint_rates])


@dataclass
class Keypoints2D:
    positions: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.confidences = np.asarray(self.confidences, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise InvalidInputError("keypoint positions must be J x 2")
        if self.confidences.shape != (self.positions.shape[0],):
            raise InvalidInputError("one confidence per keypoint required")
        if np.any(self.confidences < 0) or np.any(self.confidences > 1):
            raise InvalidInputError("confidences must lie in [0, 1]")


@dataclass
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world points to camera
    coordinates: ``Y = rotation @ X + translation``; the camera looks along +z."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 640
    height: int = 480

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-9:
            raise InvalidInputError("camera rotation must be orthonormal")

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    @classmethod
    def look_at(cls, eye, target, fx=500.0, fy=500.0, width=640, height=480, up=(0.0, 0.0, 1.0)) -> "Camera":
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy, width / 2.0, height / 2.0, R, -R @ eye, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float),
                   int(d.get("width", 640)), int(d.get("height", 480)))


# ----------------------------------------------------------------------------
# batched forward kinematics


def local_rotations(skeleton: Skeleton, angles: np.ndarray) -> np.ndarray:
    """Per-joint local rotation matrices (B, J, 3, 3); root slot is identity."""
    B = angles.shape[0]
    out = np.broadcast_to(np.eye(3), (B, skeleton.num_joints, 3, 3)).copy()
    for k in range(1, skeleton.num_joints):
        j = skeleton.joints[k]
        a = angles[:, skeleton.dof_slices[k]]
        if j.kind == HINGE:
            out[:, k] = rot.so3_exp(a * np.asarray(j.axis))
        else:
            out[:, k] = rot.so3_exp(a)
    return out


def fk_batch(skeleton: Skeleton, root_t: np.ndarray, root_R: np.ndarray, angles: np.ndarray):
    """World joint positions (B, J, 3) and rotations (B, J, 3, 3)."""
    B = root_t.shape[0]
    J = skeleton.num_joints
    loc = local_rotations(skeleton, angles)
    X = np.empty((B, J, 3))
    Rw = np.empty((B, J, 3, 3))
    X[:, 0] = root_t
    Rw[:, 0] = root_R
    for k in range(1, J):
        p = skeleton.parents[k]
        X[:, k] = X[:, p] + Rw[:, p] @ skeleton.offsets[k]
        Rw[:, k] = Rw[:, p] @ loc[:, k]
    return X, Rw


def dof_world_axes(skeleton: Skeleton, Rw: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """World-frame angular axis of every non-root dof (B, nr, 3) for additive
    perturbations of the exponential-map coordinates."""
    B = Rw.shape[0]
    axes = np.empty((B, skeleton.num_nonroot_dof, 3))
    for k in range(1, skeleton.num_joints):
        j = skeleton.joints[k]
        Rp = Rw[:, skeleton.parents[k]]
        sl = skeleton.dof_slices[k]
        if j.kind == HINGE:
            axes[:, sl.start] = Rp @ np.asarray(j.axis)
        else:
            W = Rp @ rot.left_jacobian(angles[:, sl])
            axes[:, sl] = np.swapaxes(W, -1, -2)
    return axes


def fk_vjp(skeleton: Skeleton, X: np.ndarray, Rw: np.ndarray, angles: np.ndarray, X_bar: np.ndarray):
    """Pull a gradient on world joint positions back to pose tangent space.

    Returns (d/d root translation, d/d world-frame root rotation perturbation,
    d/d joint angles)."""
    t_bar = X_bar.sum(axis=1)
    root = X[:, :1]
    w_bar = np.cross(X - root, X_bar).sum(axis=1)
    cross = np.cross(X, X_bar)
    # subtree sums via descendant masks
    D = skeleton.descendants.astype(float)
    sub_cross = np.einsum("kj,bjc->bkc", D, cross)
    sub_bar = np.einsum("kj,bjc->bkc", D, X_bar)
    S = sub_cross - np.cross(X, sub_bar)
    axes = dof_world_axes(skeleton, Rw, angles)
    th_bar = np.einsum("bdc,bdc->bd", axes, S[:, skeleton.dof_joint])
    return t_bar, w_bar, th_bar


def forward_kinematics(skeleton: Skeleton, pose: Pose):
    """World joint positions (J, 3) and orientations as unit quaternions (J, 4)."""
    pose.check(skeleton)
    R0 = rot.quat_to_mat(pose.root_orientation)[None]
    X, Rw = fk_batch(skeleton, pose.root_translation[None], R0, pose.joint_angles[None])
    return X[0], rot.mat_to_quat(Rw[0])


def local_orientations(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Parent-relative joint orientations (J, 4); the root's is its world orientation."""
    pose.check(skeleton)
    loc = local_rotations(skeleton, pose.joint_angles[None])[0]
    q = rot.mat_to_quat(loc)
    q[0] = rot.quat_normalize(pose.root_orientation)
    return q


# ----------------------------------------------------------------------------
# velocities


def finite_difference_batch(skeleton: Skeleton, t0, R0, a0, t1, R1, a1, dt: float):
    """Generalized velocities between two batched poses.

    Root angular velocity is world-frame, log(R1 R0^T)/dt. Ball joints use the
    child-frame relative rotation log(exp(r0)^T exp(r1))/dt, which is the same
    coordinate the simulator integrates; hinge rates are plain differences."""
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    lin = (t1 - t0) / dt
    ang = rot.so3_log(R1 @ np.swapaxes(R0, -1, -2)) / dt
    rates = (a1 - a0) / dt
    for k in range(1, skeleton.num_joints):
        if skeleton.joints[k].kind == BALL:
            sl = skeleton.dof_slices[k]
            rel = np.swapaxes(rot.so3_exp(a0[:, sl]), -1, -2) @ rot.so3_exp(a1[:, sl])
            rates[:, sl] = rot.so3_log(rel) / dt
    return lin, ang, rates


def finite_difference_velocities(skeleton: Skeleton, pose_prev: Pose, pose_next: Pose, dt: float) -> Velocities:
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    pose_prev.check(skeleton)
    pose_next.check(skeleton)
    lin, ang, rates = finite_difference_batch(
        skeleton,
        pose_prev.root_translation[None], rot.quat_to_mat(pose_prev.root_orientation)[None],
        pose_prev.joint_angles[None],
        pose_next.root_translation[None], rot.quat_to_mat(pose_next.root_orientation)[None],
        pose_next.joint_angles[None], dt)
    return Velocities(lin[0], ang[0], rates[0])


# ----------------------------------------------------------------------------
# camera


def _camera_points(camera: Camera, X: np.ndarray) -> np.ndarray:
    return X @ camera.rotation.T + camera.translation


def _check_depth(Y: np.ndarray) -> None:
    bad = Y[..., 2] <= 1e-9
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise DegenerateProjectionError(int(idx[-1]), float(Y[tuple(idx)][2]))


def project(camera: Camera, X: np.ndarray) -> np.ndarray:
    """Pinhole projection of (..., J, 3) world points to (..., J, 2) pixels."""
    X = np.asarray(X, dtype=float)
    Y = _camera_points(camera, X)
    _check_depth(Y)
    u = camera.fx * Y[..., 0] / Y[..., 2] + camera.cx
    v = camera.fy * Y[..., 1] / Y[..., 2] + camera.cy
    return np.stack([u, v], axis=-1)


def _check_keypoints(X: np.ndarray, keypoints: Keypoints2D) -> None:
    if X.shape[-2] != keypoints.positions.shape[0]:
        raise InvalidInputError("keypoint count does not match joint count")


def reprojection_loss(camera: Camera, X: np.ndarray, keypoints: Keypoints2D) -> float:
    X = np.asarray(X, dtype=float)
    _check_keypoints(X, keypoints)
    r = project(camera, X) - keypoints.positions
    return float(np.sum(np.sum(r * r, axis=-1) * keypoints.confidences))


def reprojection_terms_batch(camera: Camera, X: np.ndarray, kp: np.ndarray, conf: np.ndarray,
                             hessian: bool = False):
    """Loss, world-frame gradient and optionally per-joint 3x3 Hessian blocks.

    X: (B, J, 3); kp: (B, J, 2); conf: (B, J)."""
    Y = _camera_points(camera, X)
    _check_depth(Y)
    iz = 1.0 / Y[..., 2]
    x, y = Y[..., 0] * iz, Y[..., 1] * iz
    ex = camera.fx * x + camera.cx - kp[..., 0]
    ey = camera.fy * y + camera.cy - kp[..., 1]
    loss = np.sum((ex * ex + ey * ey) * conf, axis=-1)
    # dL/dY = 2 c J_pi^T e
    gY = np.empty(Y.shape)
    gY[..., 0] = camera.fx * iz * ex
    gY[..., 1] = camera.fy * iz * ey
    gY[..., 2] = -iz * (camera.fx * x * ex + camera.fy * y * ey)
    gY *= 2.0 * conf[..., None]
    grad = gY @ camera.rotation
    if not hessian:
        return loss, grad
    Jp = np.zeros(Y.shape[:-1] + (2, 3))
    Jp[..., 0, 0] = camera.fx * iz
    Jp[..., 0, 2] = -camera.fx * x * iz
    Jp[..., 1, 1] = camera.fy * iz
    Jp[..., 1, 2] = -camera.fy * y * iz
    H = np.swapaxes(Jp, -1, -2) @ Jp
    iz2 = iz * iz
    # second derivatives of the projection, weighted by the residuals
    c02 = -(camera.fx * ex) * iz2
    c12 = -(camera.fy * ey) * iz2
    c22 = 2.0 * (camera.fx * ex * x + camera.fy * ey * y) * iz2
    H[..., 0, 2] += c02
    H[..., 2, 0] += c02
    H[..., 1, 2] += c12
    H[..., 2, 1] += c12
    H[..., 2, 2] += c22
    H *= 2.0 * conf[..., None, None]
    Hw = camera.rotation.T @ H @ camera.rotation
    return loss, grad, Hw


def reprojection_gradient(camera: Camera, X: np.ndarray, keypoints: Keypoints2D) -> np.ndarray:
    """dL/dX for every joint, world frame, shape (J, 3)."""
    X = np.asarray(X, dtype=float)
    _check_keypoints(X, keypoints)
    _, g = reprojection_terms_batch(camera, X[None], keypoints.positions[None], keypoints.confidences[None])
    return g[0]


# ----------------------------------------------------------------------------
# frames and angles


def heading_inverse(root_orientation: np.ndarray) -> np.ndarray:
    """Matrix mapping world vectors into the heading (yaw-only) root frame."""
    psi = rot.heading_angle(rot.quat_to_mat(root_orientation))
    return rot.yaw_matrix(psi).swapaxes(-1, -2)


def to_root_frame(pose: Pose, vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=float)
    return vectors @ heading_inverse(pose.root_orientation).T


def rotation_geodesic_angle(o1: np.ndarray, o2: np.ndarray) -> np.ndarray:
    """Angle of o1^-1 o2 in [0, pi]; works on (..., 4) batches."""
    o1 = np.asarray(o1, dtype=float)
    o2 = np.asarray(o2, dtype=float)
    for o in (o1, o2):
        if np.any(np.abs(np.linalg.norm(o, axis=-1) - 1.0) > 1e-6):
            raise InvalidInputError("quaternions must have unit norm")
    d = rot.quat_mul(rot.quat_conj(o1), o2)
    ang = 2.0 * np.arctan2(np.linalg.norm(d[..., 1:], axis=-1), np.abs(d[..., 0]))
    return ang if ang.ndim else float(ang)
