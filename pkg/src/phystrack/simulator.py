"""Reduced-coordinate articulated dynamics with PD actuation, meta-PD gain
scheduling, root residual wrenches and penalty ground contact.

Generalized velocity layout: root linear velocity (world, 3), root angular
velocity (world, 3), then one entry per non-root dof: hinge angle rates and,
for ball joints, the child-frame angular velocity relative to the parent.

Dynamics are written with world-frame spatial vectors ([angular; linear] at
the world origin). The mass matrix is assembled composite-rigid-body style
from per-body Jacobians, and bias forces follow the recursive Newton-Euler
recurrences with zero joint acceleration. All kernels take a leading batch
axis so many environments step together.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rotations as rot
from .character import CharacterModel
from .errors import InvalidInputError, ParseError, SimulationDivergedError, UnsupportedVersionError
from .kinematics import BALL, HINGE, Pose, Velocities, fk_batch

SUBSTEPS = 15
POLICY_DT = 1.0 / 30.0
SCENE_FORMAT_VERSION = 1


@dataclass
class ContactParams:
    ground_height: float = 0.0
    kn: float = 3.0e4  # per contact vertex, N/m
    dn: float = 300.0  # per contact vertex, N s/m
    mu: float = 1.0
    kt: float = 300.0  # tangential damping, N s/m, capped at mu * |Fn|
    enabled: bool = True

    def __post_init__(self):
        if self.kn < 0 or self.dn < 0 or self.mu < 0 or self.kt < 0:
            raise InvalidInputError("contact coefficients must be non-negative")


@dataclass
class SceneConfig:
    gravity: tuple = (0.0, 0.0, -9.81)
    contact: ContactParams = field(default_factory=ContactParams)
    substeps: int = SUBSTEPS
    policy_dt: float = POLICY_DT
    residual_force_scale: float = 500.0
    lambda_max: float = 10.0
    lambda_floor: float = 0.01
    armature: float = 0.0
    implicit_damping: bool = True
    fixed_root: bool = False
    torque_limit: float | None = None
    kp_scale: float = 1.0
    kd_scale: float = 1.0

    @property
    def h(self) -> float:
        return self.policy_dt / self.substeps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gravity"] = list(self.gravity)
        return {"format": "scene", "version": SCENE_FORMAT_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict, path=None) -> "SceneConfig":
        if d.get("format", "scene") != "scene":
            raise ParseError("not a scene file", path, "format")
        if d.get("version", SCENE_FORMAT_VERSION) != SCENE_FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported scene version {d.get('version')!r}", path, "version")
        d = {k: v for k, v in d.items() if k not in ("format", "version")}
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ParseError(f"unknown keys {sorted(unknown)}", path, sorted(unknown)[0])
        if "contact" in d:
            d["contact"] = ContactParams(**d["contact"])
        if "gravity" in d:
            d["gravity"] = tuple(float(x) for x in d["gravity"])
        return cls(**d)


def save_scene(path, scene: SceneConfig) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=1))


def load_scene(path) -> SceneConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, line=exc.lineno) from exc
    return SceneConfig.from_dict(data, path)


@dataclass
class SimState:
    pose: Pose
    velocities: Velocities
    time: float = 0.0
    substep: int = 0


@dataclass
class Action:
    """PD targets, root residual wrench in policy units (root heading frame),
    and per-substep gain scales."""

    u: np.ndarray
    eta: np.ndarray
    lambda_p: np.ndarray
    lambda_d: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        self.eta = np.asarray(self.eta, dtype=float).reshape(6)
        self.lambda_p = np.asarray(self.lambda_p, dtype=float).reshape(-1)
        self.lambda_d = np.asarray(self.lambda_d, dtype=float).reshape(-1)

    @classmethod
    def fixed_gain(cls, u, substeps: int = SUBSTEPS) -> "Action":
        return cls(u, np.zeros(6), np.ones(substeps), np.ones(substeps))


@dataclass
class SimBatch:
    """Batched simulator state; all arrays carry a leading environment axis."""

    t: np.ndarray  # (N, 3)
    R: np.ndarray  # (N, 3, 3)
    a: np.ndarray  # (N, nr)
    qd: np.ndarray  # (N, 6 + nr)
    time: np.ndarray  # (N,)

    @classmethod
    def from_states(cls, states: list[SimState]) -> "SimBatch":
        t = np.array([s.pose.root_translation for s in states])
        R = rot.quat_to_mat(np.array([s.pose.root_orientation for s in states]))
        a = np.array([s.pose.joint_angles for s in states]).reshape(len(states), -1)
        qd = np.array([s.velocities.vector() for s in states]).reshape(len(states), -1)
        return cls(t, R, a, qd, np.array([s.time for s in states], dtype=float))

    def state(self, i: int) -> SimState:
        pose = Pose(self.t[i].copy(), rot.mat_to_quat(self.R[i]), self.a[i].copy())
        v = self.qd[i]
        return SimState(pose, Velocities(v[:3].copy(), v[3:6].copy(), v[6:].copy()), float(self.time[i]))

    def copy(self) -> "SimBatch":
        return SimBatch(self.t.copy(), self.R.copy(), self.a.copy(), self.qd.copy(), self.time.copy())

    def take(self, idx) -> "SimBatch":
        return SimBatch(self.t[idx], self.R[idx], self.a[idx], self.qd[idx], self.time[idx])

    def put(self, idx, other: "SimBatch") -> None:
        self.t[idx] = other.t
        self.R[idx] = other.R
        self.a[idx] = other.a
        self.qd[idx] = other.qd
        self.time[idx] = other.time


# ----------------------------------------------------------------------------
# control laws


def pd_torques(kp, kd, u, q, qd, torque_limits=None) -> np.ndarray:
    kp, kd, u, q, qd = (np.asarray(x, dtype=float) for x in (kp, kd, u, q, qd))
    if not (kp.shape[-1] == kd.shape[-1] == u.shape[-1] == q.shape[-1] == qd.shape[-1]):
        raise InvalidInputError("pd_torques: dimension mismatch")
    if np.any(kp < 0) or np.any(kd < 0):
        raise InvalidInputError("pd gains must be non-negative")
    tau = kp * (u - q) - kd * qd
    if torque_limits is not None:
        lim = np.asarray(torque_limits, dtype=float)
        tau = np.clip(tau, -lim, lim)
    return tau


def meta_pd_gains(kp_base, kd_base, lambda_p, lambda_d, lambda_max: float = 10.0):
    lambda_p = np.asarray(lambda_p, dtype=float)
    lambda_d = np.asarray(lambda_d, dtype=float)
    if np.any(lambda_p <= 0) or np.any(lambda_d <= 0):
        raise InvalidInputError("gain scales must be positive")
    lp = np.minimum(lambda_p, lambda_max)
    ld = np.minimum(lambda_d, lambda_max)
    return np.asarray(kp_base) * lp[..., None], np.asarray(kd_base) * ld[..., None]


def detect_fall(state: SimState, kinematic_pose: Pose, threshold: float = 0.5) -> bool:
    return bool(state.pose.root_translation[2] < kinematic_pose.root_translation[2] - threshold)


# ----------------------------------------------------------------------------
# dynamics


def _cross_motion(v, m):
    w, vl = v[..., :3], v[..., 3:]
    return np.concatenate([rot.cross(w, m[..., :3]), rot.cross(w, m[..., 3:]) + rot.cross(vl, m[..., :3])], -1)


def _cross_force(v, f):
    w, vl = v[..., :3], v[..., 3:]
    return np.concatenate([rot.cross(w, f[..., :3]) + rot.cross(vl, f[..., 3:]), rot.cross(w, f[..., 3:])], -1)


class Simulator:
    """Steps a batch of copies of one character in one scene."""

    def __init__(self, character: CharacterModel, scene: SceneConfig | None = None):
        self.character = character
        self.scene = scene or SceneConfig()
        sk = character.skeleton
        self.skeleton = sk
        self.nb = sk.num_joints
        self.nr = sk.num_nonroot_dof
        self.n = 6 + self.nr
        self.mass = np.array([b.mass for b in character.bones])
        self.com = np.array([b.com for b in character.bones])
        self.inertia = np.array([b.inertia for b in character.bones])
        self.gravity = np.asarray(self.scene.gravity, dtype=float)
        # dof ownership and ancestry masks
        own = np.zeros((self.nb, self.n))
        own[0, :6] = 1.0
        for k in range(1, self.nb):
            sl = sk.dof_slices[k]
            own[k, 6 + sl.start:6 + sl.stop] = 1.0
        anc = sk.descendants.T.astype(float)  # anc[k, j] = j is ancestor-or-self of k
        self.own = own
        self.anc_joint = anc
        self.anc_dof = np.clip(anc @ own, 0.0, 1.0)
        self.hinge_axes = {k: np.asarray(sk.joints[k].axis) for k in range(1, self.nb) if sk.joints[k].kind == HINGE}
        self.ball_joints = [k for k in range(1, self.nb) if sk.joints[k].kind == BALL]
        body, local = [], []
        for k in character.contact_bones:
            hv = character.bones[k].hull_vertices
            body.extend([k] * hv.shape[0])
            local.append(hv)
        self.contact_body = np.array(body, dtype=int)
        self.contact_local = np.concatenate(local) if local else np.zeros((0, 3))
        self.point_to_body = np.zeros((len(body), self.nb))
        self.point_to_body[np.arange(len(body)), self.contact_body] = 1.0
        tl = character.torque_limits if self.scene.torque_limit is None else np.full(self.nr, self.scene.torque_limit)
        self.torque_limits = np.asarray(tl, dtype=float)
        self.kp = character.kp * self.scene.kp_scale
        self.kd = character.kd * self.scene.kd_scale

    # -- kinematic quantities -------------------------------------------------

    def _frames(self, s: SimBatch):
        X, Rw = fk_batch(self.skeleton, s.t, s.R, s.a)
        N = s.t.shape[0]
        S = np.zeros((N, 6, self.n))
        S[:, 3:, :3] = np.eye(3)
        S[:, :3, 3:6] = np.eye(3)
        S[:, 3:, 3:6] = rot.skew(s.t)
        for k in range(1, self.nb):
            sl = self.skeleton.dof_slices[k]
            cols = slice(6 + sl.start, 6 + sl.stop)
            p = X[:, k]
            if k in self.hinge_axes:
                w = Rw[:, self.skeleton.parents[k]] @ self.hinge_axes[k]
                S[:, :3, cols.start] = w
                S[:, 3:, cols.start] = rot.cross(p, w)
            else:
                W = Rw[:, k]
                S[:, :3, cols] = W
                S[:, 3:, cols] = rot.skew(p) @ W
        return X, Rw, S

    def _spatial_inertia(self, X, Rw):
        c = X + np.einsum("nkij,kj->nki", Rw, self.com)
        Ic = Rw @ self.inertia[None] @ np.swapaxes(Rw, -1, -2)
        m = self.mass[None, :, None, None]
        C = rot.skew(c)
        I = np.zeros(X.shape[:2] + (6, 6))
        I[..., :3, :3] = Ic - m * (C @ C)
        I[..., :3, 3:] = m * C
        I[..., 3:, :3] = -m * C
        I[..., 3:, 3:] = m * np.eye(3)
        return I, c

    def _external_forces(self, s: SimBatch, X, Rw, c, V, wrench):
        N = X.shape[0]
        mg = self.mass[None, :, None] * self.gravity
        f = np.concatenate([rot.cross(c, mg), np.broadcast_to(mg, c.shape)], -1)
        ct = self.scene.contact
        if ct.enabled and self.contact_body.size:
            b = self.contact_body
            x = X[:, b] + np.einsum("npij,pj->npi", Rw[:, b], self.contact_local)
            depth = ct.ground_height - x[..., 2]
            active = depth > 0
            if np.any(active):
                Vb = V[:, b]
                vx = Vb[..., 3:] + rot.cross(Vb[..., :3], x)
                fn = np.where(active, np.maximum(ct.kn * depth - ct.dn * vx[..., 2], 0.0), 0.0)
                vt = vx[..., :2]
                speed = np.linalg.norm(vt, axis=-1)
                mag = np.minimum(ct.kt * speed, ct.mu * fn)
                dirn = vt / np.maximum(speed, 1e-12)[..., None]
                F = np.concatenate([-mag[..., None] * dirn, fn[..., None]], -1)
                fp = np.concatenate([rot.cross(x, F), F], -1)
                f = f + np.einsum("npi,pk->nki", fp, self.point_to_body)
        if wrench is not None:
            F, T = wrench[:, :3], wrench[:, 3:]
            f[:, 0, :3] += T + rot.cross(s.t, F)
            f[:, 0, 3:] += F
        return f

    def accelerations(self, s: SimBatch, tau: np.ndarray, wrench: np.ndarray | None = None, joint_damping=None):
        """Generalized accelerations (N, n) for non-root torques tau (N, nr) and
        a world-frame root wrench [force, torque] (N, 6). ``joint_damping`` (N, nr)
        is added to the joint block of the mass matrix, which makes damping
        torques act on the end-of-step velocity."""
        X, Rw, S = self._frames(s)
        I, c = self._spatial_inertia(X, Rw)
        J = S[:, None] * self.anc_dof[None, :, None, :]  # (N, nb, 6, n)
        IJ = I @ J
        M = np.einsum("nkid,nkie->nde", J, IJ)
        qd = s.qd
        V = np.einsum("nkid,nd->nki", J, qd)
        vj = np.einsum("nid,kd,nd->nki", S, self.own, qd)
        Vpar = np.zeros_like(V)
        Vpar[:, 1:] = V[:, self.skeleton.parents[1:]]
        term = _cross_motion(Vpar, vj)
        term[:, 0, 3:] = rot.cross(qd[:, :3], qd[:, 3:6])
        A0 = np.einsum("kj,nji->nki", self.anc_joint, term)
        h = np.einsum("nkij,nkj->nki", I, V)
        fext = self._external_forces(s, X, Rw, c, V, wrench)
        f = np.einsum("nkij,nkj->nki", I, A0) + _cross_force(V, h) - fext
        C = np.einsum("nkid,nki->nd", J, f)
        rhs = -C
        rhs[:, 6:] += tau
        if self.scene.armature:
            M[:, 6:, 6:] += self.scene.armature * np.eye(self.nr)
        if joint_damping is not None:
            M[:, 6:, 6:] += np.asarray(joint_damping)[:, :, None] * np.eye(self.nr)
        qdd = np.zeros_like(qd)
        if self.scene.fixed_root:
            qdd[:, 6:] = np.linalg.solve(M[:, 6:, 6:], rhs[:, 6:, None])[..., 0]
        else:
            qdd[:] = np.linalg.solve(M, rhs[..., None])[..., 0]
        return qdd

    # -- integration ----------------------------------------------------------

    def substep_batch(self, s: SimBatch, tau: np.ndarray, wrench: np.ndarray | None, h: float, kd=None):
        """One step: velocities advance with start-of-step forces, positions with
        the mean of old and new velocities. Passing the PD damping gains ``kd``
        treats the damping implicitly. Returns (state, diverged mask)."""
        if h <= 0:
            raise InvalidInputError("step size must be positive")
        with np.errstate(all="ignore"):
            qdd = self.accelerations(s, tau, wrench, None if kd is None else h * kd)
            qd_new = s.qd + h * qdd
            mid = 0.5 * (s.qd + qd_new)
            t = s.t + h * mid[:, :3]
            R = rot.so3_exp(h * mid[:, 3:6]) @ s.R
            a = s.a + h * mid[:, 6:]
            for k in self.ball_joints:
                sl = self.skeleton.dof_slices[k]
                a[:, sl] = rot.so3_log(rot.so3_exp(s.a[:, sl]) @ rot.so3_exp(h * mid[:, 6 + sl.start:6 + sl.stop]))
            # keep the root rotation orthonormal
            if s.t.shape[0]:
                R = rot.quat_to_mat(rot.mat_to_quat(R))
        out = SimBatch(t, R, a, qd_new, s.time + h)
        bad = ~(np.isfinite(qd_new).all(-1) & np.isfinite(t).all(-1) & np.isfinite(a).all(-1)
                & np.isfinite(R).all((-1, -2)))
        return out, bad

    def root_wrench(self, s: SimBatch, eta: np.ndarray) -> np.ndarray:
        """Policy-unit root wrench in the heading frame -> scaled world wrench."""
        Y = rot.yaw_matrix(rot.heading_angle(s.R))
        eta = np.asarray(eta, dtype=float) * self.scene.residual_force_scale
        return np.concatenate([np.einsum("nij,nj->ni", Y, eta[:, :3]), np.einsum("nij,nj->ni", Y, eta[:, 3:])], -1)

    def policy_step_batch(self, s: SimBatch, u, eta, lambda_p, lambda_d):
        """Advance one policy step (``substeps`` substeps) with per-substep gains.

        u: (N, nr); eta: (N, 6); lambda_p/lambda_d: (N, m)."""
        sc = self.scene
        m = sc.substeps
        lambda_p = np.asarray(lambda_p, dtype=float)
        lambda_d = np.asarray(lambda_d, dtype=float)
        if lambda_p.shape[-1] != m or lambda_d.shape[-1] != m:
            raise InvalidInputError(f"expected {m} gain scales per policy step")
        u = np.clip(np.asarray(u, dtype=float), self.skeleton.lower, self.skeleton.upper)
        wrench = self.root_wrench(s, eta)
        kp, kd = meta_pd_gains(self.kp, self.kd, lambda_p, lambda_d, sc.lambda_max)  # (N, m, nr)
        h = sc.h
        t0 = s.time.copy()
        diverged = np.zeros(s.t.shape[0], dtype=bool)
        for j in range(m):
            tau = pd_torques(kp[:, j], kd[:, j], u, s.a, s.qd[:, 6:], self.torque_limits)
            s, bad = self.substep_batch(s, tau, wrench, h, kd[:, j] if sc.implicit_damping else None)
            diverged |= bad
        # one policy step advances exactly policy_dt
        s.time = t0 + sc.policy_dt
        return s, diverged


# ----------------------------------------------------------------------------
# single-state API


def _check_finite(state: SimBatch) -> None:
    for name in ("qd", "t", "a", "R"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise SimulationDivergedError({"qd": "velocities", "t": "root translation", "a": "joint angles",
                                           "R": "root orientation"}[name])


def substep(character: CharacterModel, state: SimState, tau, eta, contact: ContactParams | None = None,
            h: float = 1.0 / 450.0, scene: SceneConfig | None = None, simulator: Simulator | None = None) -> SimState:
    """Advance one substep; ``eta`` is a world-frame [force, torque] already in N / N m."""
    if simulator is None:
        scene = scene or SceneConfig()
        if contact is not None:
            scene = replace(scene, contact=contact)
        simulator = Simulator(character, scene)
    b = SimBatch.from_states([state])
    _check_finite(b)
    tau = np.asarray(tau, dtype=float).reshape(1, -1)
    if tau.shape[1] != simulator.nr:
        raise InvalidInputError("torque vector must have one entry per non-root dof")
    wrench = None if eta is None else np.asarray(eta, dtype=float).reshape(1, 6)
    out, bad = simulator.substep_batch(b, tau, wrench, h)
    if bad[0]:
        _check_finite(out)
    st = out.state(0)
    st.substep = state.substep + 1
    return st


def policy_step(character: CharacterModel, state: SimState, action: Action, contact: ContactParams | None = None,
                scene: SceneConfig | None = None, simulator: Simulator | None = None) -> SimState:
    if simulator is None:
        scene = scene or SceneConfig()
        if contact is not None:
            scene = replace(scene, contact=contact)
        simulator = Simulator(character, scene)
    b = SimBatch.from_states([state])
    _check_finite(b)
    out, bad = simulator.policy_step_batch(b, action.u[None], action.eta[None], action.lambda_p[None],
                                           action.lambda_d[None])
    if bad[0]:
        _check_finite(out)
    st = out.state(0)
    st.time = state.time + simulator.scene.policy_dt
    return st
