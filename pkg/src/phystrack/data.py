"""Synthetic reference motions, the corruption model that stands in for a
monocular pose estimator and keypoint detector, and motion files."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rotations as rot
from .errors import InvalidInputError, ParseError, UnsupportedVersionError
from .kinematics import Camera, Keypoints2D, Pose, Skeleton, fk_batch, project

MOTION_FORMAT_VERSION = 1
FPS = 30.0
MOTION_KINDS = ("sinusoid", "walk", "reach")
PROVENANCE = ("ground-truth", "kinematic-estimate", "simulated")


@dataclass
class MotionSequence:
    skeleton: Skeleton
    root_translation: np.ndarray  # (T, 3)
    root_orientation: np.ndarray  # (T, 4)
    joint_angles: np.ndarray  # (T, nr)
    fps: float = FPS
    keypoints: np.ndarray | None = None  # (T, J, 2)
    confidences: np.ndarray | None = None  # (T, J)
    camera: Camera | None = None
    provenance: str = "ground-truth"

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=float).reshape(-1, 3)
        self.root_orientation = np.asarray(self.root_orientation, dtype=float).reshape(-1, 4)
        T = self.root_translation.shape[0]
        self.joint_angles = np.asarray(self.joint_angles, dtype=float).reshape(T, -1)
        if self.root_orientation.shape[0] != T:
            raise InvalidInputError("root_orientation: frame count mismatch")
        if self.joint_angles.shape[1] != self.skeleton.num_nonroot_dof:
            raise InvalidInputError(f"joint_angles: expected {self.skeleton.num_nonroot_dof} dof per frame, "
                                    f"got {self.joint_angles.shape[1]}")
        if T and np.abs(np.linalg.norm(self.root_orientation, axis=-1) - 1.0).max() > 1e-9:
            raise InvalidInputError("root_orientation: quaternions must have unit norm")
        if not self.fps > 0:
            raise InvalidInputError("fps must be positive")
        if self.provenance not in PROVENANCE:
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")
        J = self.skeleton.num_joints
        if self.keypoints is not None:
            self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(T, J, 2)
            self.confidences = np.asarray(self.confidences, dtype=float).reshape(T, J)
            if np.any(self.confidences < 0) or np.any(self.confidences > 1):
                raise InvalidInputError("confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return self.root_translation.shape[0]

    @property
    def R(self) -> np.ndarray:
        return rot.quat_to_mat(self.root_orientation)

    def pose(self, i: int) -> Pose:
        return Pose(self.root_translation[i], self.root_orientation[i], self.joint_angles[i])

    @property
    def poses(self) -> list[Pose]:
        return [self.pose(i) for i in range(len(self))]

    def keypoints_at(self, i: int) -> Keypoints2D:
        return Keypoints2D(self.keypoints[i], self.confidences[i])

    def positions(self) -> np.ndarray:
        X, _ = fk_batch(self.skeleton, self.root_translation, self.R, self.joint_angles)
        return X

    def slice(self, start: int, stop: int) -> "MotionSequence":
        kp = None if self.keypoints is None else self.keypoints[start:stop]
        cf = None if self.confidences is None else self.confidences[start:stop]
        return MotionSequence(self.skeleton, self.root_translation[start:stop], self.root_orientation[start:stop],
                              self.joint_angles[start:stop], self.fps, kp, cf, self.camera, self.provenance)

    def equals(self, other: "MotionSequence") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)
        cam_eq = (self.camera is None and other.camera is None) or (
            self.camera is not None and other.camera is not None and self.camera.to_dict() == other.camera.to_dict())
        return (self.skeleton == other.skeleton and self.fps == other.fps and self.provenance == other.provenance
                and same(self.root_translation, other.root_translation)
                and same(self.root_orientation, other.root_orientation)
                and same(self.joint_angles, other.joint_angles) and same(self.keypoints, other.keypoints)
                and same(self.confidences, other.confidences) and cam_eq)


# ----------------------------------------------------------------------------
# reference motions


def _sinusoid(skeleton: Skeleton, T: int, fps: float, rng, root_t, root_q):
    t = np.arange(T) / fps
    nr = skeleton.num_nonroot_dof
    span = np.minimum(np.abs(skeleton.lower), np.abs(skeleton.upper))
    amp = rng.uniform(0.2, 0.6, nr) * np.minimum(1.0, 0.9 * span / 0.6)
    omega = 2.0 * np.pi * rng.uniform(0.3, 0.8, nr)
    phase = rng.uniform(0.0, 2.0 * np.pi, nr)
    angles = amp * np.sin(omega * t[:, None] + phase)
    params = {"amplitude": amp, "omega": omega, "phase": phase}
    return np.tile(root_t, (T, 1)), np.tile(root_q, (T, 1)), angles, params


def _leg_ik(dx, dz, L1, L2):
    """Sagittal two-link IK: hip pitch and knee angle placing the ankle at
    (dx, dz) from the hip (rotations about +y, knee bending backwards)."""
    d2 = dx * dx + dz * dz
    c2 = np.clip((d2 - L1 * L1 - L2 * L2) / (2.0 * L1 * L2), -1.0, 1.0)
    knee = np.arccos(c2)
    psi = np.arctan2(-dx, -dz)
    hip = psi - np.arctan2(L2 * np.sin(knee), L1 + L2 * np.cos(knee))
    return hip, knee


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _walk(skeleton: Skeleton, T: int, fps: float, rng):
    """Procedural walk along +x. Stance feet stay planted, the sole 1 mm above
    the ground; swing feet only move horizontally once clear of the ground."""
    from .presets import ANKLE_HEIGHT, HIP_Y, HIP_Z, SHIN, THIGH
    period = rng.uniform(1.0, 1.2)
    speed = rng.uniform(0.7, 1.0)
    lift = rng.uniform(0.06, 0.09)
    stance = 0.6
    stride = speed * period
    clearance = 0.001
    hip_height = 0.95 * (THIGH + SHIN)
    root_z = hip_height - HIP_Z
    ankle_z = ANKLE_HEIGHT + clearance
    t = np.arange(T) / fps
    nr = skeleton.num_nonroot_dof
    angles = np.zeros((T, nr))
    root_x = speed * t
    root_t = np.stack([root_x, np.zeros(T), np.full(T, root_z)], -1)
    root_q = np.tile([1.0, 0.0, 0.0, 0.0], (T, 1))
    for side, offset in (("l", 0.0), ("r", 0.5)):
        ph = t / period + offset
        cycle = np.floor(ph)
        frac = ph - cycle
        # foot k is planted at the x the hip reaches mid-stance of cycle k
        plant = lambda c: (c + stance / 2.0 - offset) * stride
        in_stance = frac < stance
        s = (frac - stance) / (1.0 - stance)
        foot_x = np.where(in_stance, plant(cycle), plant(cycle) + stride * _smoothstep((s - 0.2) / 0.6))
        foot_z = np.where(in_stance, ankle_z, ankle_z + lift * np.sin(np.pi * np.clip(s, 0.0, 1.0)))
        dx = foot_x - root_x
        dz = foot_z - (root_z + HIP_Z)
        hip, knee = _leg_ik(dx, dz, THIGH, SHIN)
        thigh = skeleton.dof_slices[skeleton.index(f"{side}_thigh")]
        angles[:, thigh.start + 1] = hip
        angles[:, skeleton.dof_slices[skeleton.index(f"{side}_shin")]] = knee[:, None]
        # keep the sole level
        angles[:, skeleton.dof_slices[skeleton.index(f"{side}_foot")]] = -(hip + knee)[:, None]
        # counter-swinging arm
        arm = skeleton.dof_slices[skeleton.index(("r" if side == "l" else "l") + "_upperarm")]
        angles[:, arm.start + 1] = 0.8 * hip
        fore = skeleton.dof_slices[skeleton.index(("r" if side == "l" else "l") + "_forearm")]
        angles[:, fore] = -0.3 + 0.1 * np.sin(2 * np.pi * ph)[:, None]
    return root_t, root_q, angles, {"period": period, "speed": speed, "lift": lift, "hip_y": HIP_Y}


def _reach(skeleton: Skeleton, T: int, fps: float, rng):
    from .presets import ANKLE_HEIGHT, HIP_Z, SHIN, THIGH
    t = np.arange(T) / fps
    root_z = ANKLE_HEIGHT + 0.001 + THIGH + SHIN - HIP_Z
    nr = skeleton.num_nonroot_dof
    angles = np.zeros((T, nr))
    period = rng.uniform(2.0, 3.0)
    s = 0.5 - 0.5 * np.cos(2.0 * np.pi * t / period)
    arm = skeleton.dof_slices[skeleton.index("r_upperarm")]
    angles[:, arm.start + 1] = -1.3 * s
    angles[:, arm.start] = -0.2 * s
    angles[:, skeleton.dof_slices[skeleton.index("r_forearm")]] = (-0.6 * s)[:, None]
    spine = skeleton.dof_slices[skeleton.index("spine")]
    angles[:, spine.start + 1] = 0.15 * s
    root_t = np.tile([0.0, 0.0, root_z], (T, 1))
    root_q = np.tile([1.0, 0.0, 0.0, 0.0], (T, 1))
    return root_t, root_q, angles, {"period": period}


def generate_reference_motion(skeleton: Skeleton, kind: str, duration: float, seed: int = 0, fps: float = FPS,
                              root_translation=None, return_params: bool = False):
    if not duration > 0:
        raise InvalidInputError("duration must be positive")
    if kind not in MOTION_KINDS:
        raise InvalidInputError(f"unknown motion kind {kind!r}; choose from {MOTION_KINDS}")
    rng = np.random.default_rng(seed)
    T = int(round(duration * fps))
    if T < 1:
        raise InvalidInputError("duration shorter than one frame")
    if kind == "sinusoid":
        rt = np.zeros(3) if root_translation is None else np.asarray(root_translation, dtype=float)
        out = _sinusoid(skeleton, T, fps, rng, rt, np.array([1.0, 0.0, 0.0, 0.0]))
    elif kind == "walk":
        out = _walk(skeleton, T, fps, rng)
    else:
        out = _reach(skeleton, T, fps, rng)
    root_t, root_q, angles, params = out
    angles = np.clip(angles, skeleton.lower, skeleton.upper)
    seq = MotionSequence(skeleton, root_t, root_q, angles, fps)
    return (seq, params) if return_params else seq


# ----------------------------------------------------------------------------
# corruption


@dataclass
class CorruptionSpec:
    angle_std: float = 0.0  # iid per frame and dof, rad
    root_rot_std: float = 0.0  # iid root orientation noise, rad per axis
    root_drift_std: float = 0.0  # random-walk step of the root translation, m/frame
    jitter_std: float = 0.0  # iid root translation jitter, m
    keypoint_std: float = 0.0  # pixel noise per coordinate
    conf_scale: float = 5.0  # confidence = exp(-|noise|^2 / (2 conf_scale^2)), pixels
    seed: int = 0

    def __post_init__(self):
        for k in ("angle_std", "root_rot_std", "root_drift_std", "jitter_std", "keypoint_std"):
            if getattr(self, k) < 0:
                raise InvalidInputError(f"{k} must be non-negative")
        if not self.conf_scale > 0:
            raise InvalidInputError("conf_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def corrupt(motion: MotionSequence, camera: Camera, spec: CorruptionSpec, return_noise: bool = False):
    """Noisy kinematic estimate plus noisy keypoints of the ground-truth joints."""
    rng = np.random.default_rng(spec.seed)
    T = len(motion)
    nr = motion.skeleton.num_nonroot_dof
    J = motion.skeleton.num_joints
    n_ang = rng.standard_normal((T, nr)) * spec.angle_std
    n_rot = rng.standard_normal((T, 3)) * spec.root_rot_std
    n_drift = np.cumsum(rng.standard_normal((T, 3)) * spec.root_drift_std, axis=0)
    n_jit = rng.standard_normal((T, 3)) * spec.jitter_std
    n_kp = rng.standard_normal((T, J, 2)) * spec.keypoint_std
    angles = motion.joint_angles + n_ang
    root_t = motion.root_translation + n_drift + n_jit
    root_q = rot.quat_normalize(rot.quat_mul(rot.quat_from_rotvec(n_rot), motion.root_orientation))
    clean = project(camera, motion.positions())
    kp = clean + n_kp
    conf = np.exp(-np.sum(n_kp * n_kp, -1) / (2.0 * spec.conf_scale**2))
    est = MotionSequence(motion.skeleton, root_t, root_q, angles, motion.fps, kp, conf, camera,
                         "kinematic-estimate")
    if return_noise:
        return est, {"angles": n_ang, "root_rot": n_rot, "root_translation": n_drift + n_jit, "keypoints": n_kp}
    return est


def with_keypoints(motion: MotionSequence, camera: Camera) -> MotionSequence:
    """Attach exact projections with unit confidence."""
    kp = project(camera, motion.positions())
    out = motion.slice(0, len(motion))
    out.keypoints = kp
    out.confidences = np.ones(kp.shape[:2])
    out.camera = camera
    return out


# ----------------------------------------------------------------------------
# files


def motion_to_dict(m: MotionSequence) -> dict:
    d = {"format": "motion", "version": MOTION_FORMAT_VERSION, "fps": m.fps, "provenance": m.provenance,
         "skeleton": m.skeleton.to_dict(), "num_frames": len(m),
         "root_translation": m.root_translation.tolist(), "root_orientation": m.root_orientation.tolist(),
         "joint_angles": m.joint_angles.tolist()}
    if m.keypoints is not None:
        d["keypoints"] = m.keypoints.tolist()
        d["confidences"] = m.confidences.tolist()
    if m.camera is not None:
        d["camera"] = m.camera.to_dict()
    return d


def _field_array(d, name, path, shape_tail=None):
    try:
        a = np.array(d[name], dtype=float)
    except KeyError:
        raise ParseError(f"missing field {name!r}", path, name) from None
    except (TypeError, ValueError) as exc:
        raise ParseError(f"field {name!r}: {exc}", path, name) from None
    if shape_tail is not None and (a.ndim != 1 + len(shape_tail) or tuple(a.shape[1:]) != tuple(shape_tail)):
        raise ParseError(f"field {name!r}: expected per-frame shape {tuple(shape_tail)}, got {a.shape[1:]}",
                         path, name)
    return a


def motion_from_dict(d: dict, path=None) -> MotionSequence:
    if d.get("format") != "motion":
        raise ParseError("not a motion file", path, "format")
    if d.get("version") != MOTION_FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported motion version {d.get('version')!r}", path, "version")
    try:
        sk = Skeleton.from_dict(d["skeleton"], path)
    except KeyError:
        raise ParseError("missing field 'skeleton'", path, "skeleton") from None
    except InvalidInputError as exc:
        raise ParseError(f"skeleton: {exc}", path, "skeleton") from None
    J, nr = sk.num_joints, sk.num_nonroot_dof
    t = _field_array(d, "root_translation", path, (3,))
    q = _field_array(d, "root_orientation", path, (4,))
    a = _field_array(d, "joint_angles", path)
    T = t.shape[0]
    if a.size == 0 and nr == 0:
        a = np.zeros((T, 0))
    if a.ndim != 2 or a.shape[1] != nr:
        raise ParseError(f"field 'joint_angles': expected {nr} dof per frame, got "
                         f"{a.shape[1] if a.ndim == 2 else a.shape}", path, "joint_angles")
    for name, arr in (("root_orientation", q), ("joint_angles", a)):
        if arr.shape[0] != T:
            raise ParseError(f"field {name!r}: frame count {arr.shape[0]} != {T}", path, name)
    if "num_frames" in d and int(d["num_frames"]) != T:
        raise ParseError("num_frames does not match the data", path, "num_frames")
    kp = cf = None
    if "keypoints" in d:
        kp = _field_array(d, "keypoints", path, (J, 2))
        cf = _field_array(d, "confidences", path, (J,))
    cam = None
    if "camera" in d:
        try:
            cam = Camera.from_dict(d["camera"])
        except (KeyError, ValueError, InvalidInputError) as exc:
            raise ParseError(f"camera: {exc}", path, "camera") from None
    try:
        return MotionSequence(sk, t, q, a, float(d.get("fps", FPS)), kp, cf, cam, d.get("provenance", "ground-truth"))
    except InvalidInputError as exc:
        raise ParseError(str(exc), path, str(exc).split(":")[0]) from None


def save_motion(path, motion: MotionSequence) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    # repr-based float formatting in json is lossless for float64
    tmp.write_text(json.dumps(motion_to_dict(motion)))
    tmp.replace(path)


def load_motion(path) -> MotionSequence:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, line=exc.lineno) from exc
    return motion_from_dict(d, path)
