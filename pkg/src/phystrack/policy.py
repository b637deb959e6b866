"""Kinematics-aware Gaussian policy.

A refinement MLP repeatedly corrects the kinematic pose estimate using the
gradient of the keypoint reprojection loss. A feature layer compares the
refined next-frame pose with the simulated state, and a control MLP maps
the normalized features to PD-target residuals, a root wrench and per-substep
gain scales. The value function has the same structure and its own weights.

Everything is batched over a leading axis and differentiated by hand: the
backward passes run through the MLPs, the root-frame rotations, forward
kinematics and the reprojection gradient (via its per-joint Hessian).
"""
from __future__ import annotations

import hashlib
import io
import json
import warnings
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rotations as rot
from .errors import InvalidInputError, ParseError, UnsupportedVersionError
from .kinematics import Camera, Keypoints2D, Pose, Skeleton, Velocities, _camera_points, fk_batch, fk_vjp
from .kinematics import reprojection_terms_batch
from .nn import MLP, Adam, RunningNormalizer, sigmoid, softplus

CHECKPOINT_VERSION = 1
_EZ = np.array([0.0, 0.0, 1.0])


class RefinementSkipped(UserWarning):
    """A refinement iteration was skipped because a joint fell behind the camera."""


@dataclass
class PolicyConfig:
    refine_hidden: tuple = (256, 512, 256)
    control_hidden: tuple = (2048, 1024)
    n_refine: int = 5
    sigma: float = 0.1  # diagonal covariance entries (variances)
    substeps: int = 15
    lambda_floor: float = 0.01
    lambda_max: float = 10.0
    residual: bool = True  # target angles = refined pose + network residual
    meta_pd: bool = True  # otherwise gain scales are fixed at 1
    root_update: bool = True  # refiner may move the root
    out_scale: float = 0.01
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["refine_hidden"] = list(self.refine_hidden)
        d["control_hidden"] = list(self.control_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        for k in ("refine_hidden", "control_hidden"):
            if k in d:
                d[k] = tuple(int(x) for x in d[k])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Observation:
    """Batched MDP observation: simulated state plus next-frame kinematic
    estimate and keypoints."""

    t: np.ndarray  # (B, 3)
    R: np.ndarray  # (B, 3, 3)
    a: np.ndarray  # (B, nr)
    qd: np.ndarray  # (B, 6 + nr)
    kt: np.ndarray  # (B, 3)
    kR: np.ndarray  # (B, 3, 3)
    ka: np.ndarray  # (B, nr)
    kp: np.ndarray  # (B, J, 2)
    conf: np.ndarray  # (B, J)

    def __len__(self) -> int:
        return self.t.shape[0]

    def take(self, idx) -> "Observation":
        return Observation(*(getattr(self, f)[idx] for f in _OBS_FIELDS))

    @staticmethod
    def concat(obs: list["Observation"]) -> "Observation":
        return Observation(*(np.concatenate([getattr(o, f) for o in obs]) for f in _OBS_FIELDS))


_OBS_FIELDS = ("t", "R", "a", "qd", "kt", "kR", "ka", "kp", "conf")


def feature_size(skeleton: Skeleton) -> int:
    nr, J = skeleton.num_nonroot_dof, skeleton.num_joints
    return 2 * nr + 6 + 3 * J + (nr + 6) + 3 * J


def _yaw(R):
    return rot.yaw_matrix(rot.heading_angle(R))


# ----------------------------------------------------------------------------
# refinement unit


class Refiner:
    def __init__(self, skeleton: Skeleton, hidden, rng, root_update: bool = True, out_scale: float = 0.01):
        self.skeleton = skeleton
        J, nr = skeleton.num_joints, skeleton.num_nonroot_dof
        self.mlp = MLP([3 * J, *hidden, nr + 6], rng, out_scale)
        self.norm = RunningNormalizer(3 * J)
        self.root_update = root_update

    def copy(self) -> "Refiner":
        out = Refiner.__new__(Refiner)
        out.skeleton = self.skeleton
        out.mlp = self.mlp.copy()
        out.norm = self.norm.copy()
        out.root_update = self.root_update
        return out

    def gradient_feature(self, camera, t, R, a, kp, conf, hessian=False):
        """Root-frame reprojection gradient; rows with a joint behind the camera
        get z = 0 and are reported in ``bad``."""
        X, Rw = fk_batch(self.skeleton, t, R, a)
        depth = _camera_points(camera, X)[..., 2]
        bad = np.any(depth <= 1e-6, axis=-1)
        if np.any(bad):
            X_safe = X.copy()
            # push the offending rows in front of the camera, then mask them out
            X_safe[bad] = -camera.rotation.T @ camera.translation + camera.rotation[2]
            conf = np.where(bad[:, None], 0.0, conf)
            out = reprojection_terms_batch(camera, X_safe, kp, conf, hessian)
        else:
            out = reprojection_terms_batch(camera, X, kp, conf, hessian)
        z = out[1]
        Y = _yaw(R)
        zr = np.einsum("bki,bij->bkj", z, Y)
        H = out[2] if hessian else None
        return X, Rw, zr, Y, H, bad

    def run(self, camera, t, R, a, kp, conf, n: int, record: bool = False):
        """n refinement iterations; returns (t, R, a, tape, skipped count)."""
        if n < 0:
            raise InvalidInputError("number of refinement iterations must be >= 0")
        tape = []
        skipped = 0
        B = t.shape[0]
        for _ in range(n):
            X, Rw, zr, Y, H, bad = self.gradient_feature(camera, t, R, a, kp, conf, hessian=record)
            inp = zr.reshape(B, -1)
            d, acts = self.mlp.forward(self.norm(inp))
            keep = ~bad
            skipped += int(bad.sum())
            d = d * keep[:, None]
            dt, dw, da = d[:, :3], d[:, 3:6], d[:, 6:]
            if not self.root_update:
                dt = np.zeros_like(dt)
                dw = np.zeros_like(dw)
            phi = np.einsum("bij,bj->bi", Y, dw)
            t_new = t + np.einsum("bij,bj->bi", Y, dt)
            R_new = rot.so3_exp(phi) @ R
            a_new = a + da
            if record:
                tape.append(dict(X=X, Rw=Rw, zr=zr, Y=Y, H=H, keep=keep, inp=inp, acts=acts, dt=dt, dw=dw,
                                 phi=phi, R=R, a=a))
            t, R, a = t_new, R_new, a_new
        return t, R, a, tape, skipped

    def backward(self, tape, g_t, g_w, g_a):
        """Reverse pass through recorded iterations. ``g_w`` is the gradient with
        respect to a world-frame left perturbation of the root rotation."""
        grads = [np.zeros_like(p) for p in self.mlp.params]
        g_t, g_w, g_a = g_t.copy(), g_w.copy(), g_a.copy()
        for rec in reversed(tape):
            Y = rec["Y"]
            B = Y.shape[0]
            g_d = np.zeros((B, self.mlp.sizes[-1]))
            g_d[:, 6:] = g_a
            g_psi = np.zeros(B)
            if self.root_update:
                g_d[:, :3] = np.einsum("bij,bi->bj", Y, g_t)
                g_psi += np.einsum("bi,bij,bj->b", g_t, Y, np.cross(_EZ, rec["dt"]))
                E = rot.so3_exp(rec["phi"])
                g_phi = np.einsum("bji,bj->bi", rot.left_jacobian(rec["phi"]), g_w)
                g_w = np.einsum("bji,bj->bi", E, g_w)
                g_d[:, 3:6] = np.einsum("bij,bi->bj", Y, g_phi)
                g_psi += np.einsum("bi,bij,bj->b", g_phi, Y, np.cross(_EZ, rec["dw"]))
            g_d *= rec["keep"][:, None]
            gp, g_x = self.mlp.backward(rec["acts"], g_d)
            for acc, g in zip(grads, gp):
                acc += g
            g_zr = (g_x * self.norm.grad_scale(rec["inp"])).reshape(rec["zr"].shape)
            # zr_k = Y^T z_k
            g_z = np.einsum("bij,bkj->bki", Y, g_zr)
            g_psi += np.einsum("bki,bki->b", g_zr, -np.cross(_EZ, rec["zr"]))
            g_X = np.einsum("bkij,bkj->bki", rec["H"], g_z)
            gt2, gw2, ga2 = fk_vjp(self.skeleton, rec["X"], rec["Rw"], rec["a"], g_X)
            g_t = g_t + gt2
            g_a = g_a + ga2
            g_w = g_w + gw2 + g_psi[:, None] * rot.heading_grad(rec["R"])
        return grads, g_t, g_w, g_a


# ----------------------------------------------------------------------------
# feature extraction


def features_batch(skeleton: Skeleton, t, R, a, qd, rt, rR, ra):
    """Feature vectors (B, F) and a cache for the reference-pose backward pass.

    Layout: joint angles | heading-frame generalized velocity | heading-frame
    joint positions relative to the root ground point | pose difference
    (translation, rotation log, angles) | heading-frame next-minus-current
    joint positions."""
    B = t.shape[0]
    Y = _yaw(R)
    X, _ = fk_batch(skeleton, t, R, a)
    Xr, Rwr = fk_batch(skeleton, rt, rR, ra)
    ground = t.copy()
    ground[:, 2] = 0.0
    b1 = a
    b2 = np.concatenate([np.einsum("bi,bij->bj", qd[:, :3], Y), np.einsum("bi,bij->bj", qd[:, 3:6], Y),
                         qd[:, 6:]], -1)
    b3 = np.einsum("bki,bij->bkj", X - ground[:, None], Y).reshape(B, -1)
    r = rot.so3_log(np.swapaxes(R, -1, -2) @ rR)
    b4 = np.concatenate([np.einsum("bi,bij->bj", rt - t, Y), r, ra - a], -1)
    b5 = np.einsum("bki,bij->bkj", Xr - X, Y).reshape(B, -1)
    f = np.concatenate([b1, b2, b3, b4, b5], -1)
    cache = dict(Y=Y, R=R, r=r, Xr=Xr, Rwr=Rwr, ra=ra)
    return f, cache


def features_backward(skeleton: Skeleton, cache, g_f):
    """Gradient of features with respect to the reference pose (t, left rotation
    perturbation, angles). The simulated state is treated as data."""
    nr, J = skeleton.num_nonroot_dof, skeleton.num_joints
    B = g_f.shape[0]
    o4 = nr + (nr + 6) + 3 * J
    g4 = g_f[:, o4:o4 + nr + 6]
    g5 = g_f[:, o4 + nr + 6:].reshape(B, J, 3)
    Y = cache["Y"]
    g_t = np.einsum("bij,bj->bi", Y, g4[:, :3])
    Jinv = rot.left_jacobian_inv(cache["r"])
    g_w = np.einsum("bij,bkj,bk->bi", cache["R"], Jinv, g4[:, 3:6])
    g_a = g4[:, 6:].copy()
    g_X = np.einsum("bij,bkj->bki", Y, g5)
    gt2, gw2, ga2 = fk_vjp(skeleton, cache["Xr"], cache["Rwr"], cache["ra"], g_X)
    return g_t + gt2, g_w + gw2, g_a + ga2


def extract_features(q: Pose, qd: Velocities, q_ref: Pose, skeleton: Skeleton) -> np.ndarray:
    for p in (q, q_ref):
        p.check(skeleton)
    v = qd.vector()
    if v.shape[0] != skeleton.num_dof:
        raise InvalidInputError("velocity dimension does not match the skeleton")
    f, _ = features_batch(skeleton, q.root_translation[None], rot.quat_to_mat(q.root_orientation)[None],
                          q.joint_angles[None], v[None], q_ref.root_translation[None],
                          rot.quat_to_mat(q_ref.root_orientation)[None], q_ref.joint_angles[None])
    return f[0]


# ----------------------------------------------------------------------------
# policy / value branches


class Branch:
    """Refiner -> features -> normalizer -> MLP."""

    def __init__(self, skeleton: Skeleton, cfg: PolicyConfig, out_dim: int, rng):
        self.skeleton = skeleton
        self.cfg = cfg
        self.refiner = Refiner(skeleton, cfg.refine_hidden, rng, cfg.root_update, cfg.out_scale)
        F = feature_size(skeleton)
        self.mlp = MLP([F, *cfg.control_hidden, out_dim], rng, cfg.out_scale)
        self.norm = RunningNormalizer(F)

    @property
    def params(self) -> list[np.ndarray]:
        return self.refiner.mlp.params + self.mlp.params

    def set_params(self, params) -> None:
        n = len(self.refiner.mlp.params)
        self.refiner.mlp.set_params(params[:n])
        self.mlp.set_params(params[n:])

    def forward(self, obs: Observation, camera: Camera, record: bool = False, n: int | None = None):
        n = self.cfg.n_refine if n is None else n
        rt, rR, ra, tape, _ = self.refiner.run(camera, obs.kt, obs.kR, obs.ka, obs.kp, obs.conf, n, record)
        f, fcache = features_batch(self.skeleton, obs.t, obs.R, obs.a, obs.qd, rt, rR, ra)
        out, acts = self.mlp.forward(self.norm(f))
        cache = dict(tape=tape, fcache=fcache, f=f, acts=acts) if record else None
        return out, (rt, rR, ra), f, cache

    def backward(self, cache, g_out, g_ra_extra=None):
        gp, g_x = self.mlp.backward(cache["acts"], g_out)
        g_f = g_x * self.norm.grad_scale(cache["f"])
        g_t, g_w, g_a = features_backward(self.skeleton, cache["fcache"], g_f)
        if g_ra_extra is not None:
            g_a = g_a + g_ra_extra
        gr, _, _, _ = self.refiner.backward(cache["tape"], g_t, g_w, g_a)
        return gr + gp


class Policy:
    def __init__(self, skeleton: Skeleton, cfg: PolicyConfig | None = None):
        self.skeleton = skeleton
        self.cfg = cfg = cfg or PolicyConfig()
        self.nr = skeleton.num_nonroot_dof
        self.m = cfg.substeps
        self.act_dim = self.nr + 6 + (2 * self.m if cfg.meta_pd else 0)
        rng = np.random.default_rng(cfg.seed)
        self.pi = Branch(skeleton, cfg, self.act_dim, rng)
        self.vf = Branch(skeleton, cfg, 1, rng)
        sig = np.broadcast_to(np.asarray(cfg.sigma, dtype=float), (self.act_dim,)).copy()
        if np.any(sig <= 0):
            raise InvalidInputError("covariance entries must be positive")
        self.var = sig
        # softplus(0 + bias) + floor == 1, so a zero network gives unit gain scales
        self.lambda_bias = float(np.log(np.expm1(1.0 - cfg.lambda_floor)))

    # -- policy mean ----------------------------------------------------------

    def mean(self, obs: Observation, camera: Camera, record: bool = False, n: int | None = None):
        out, (rt, rR, ra), f, cache = self.pi.forward(obs, camera, record, n)
        nr = self.nr
        du = out[:, :nr]
        u = ra + du if self.cfg.residual else du.copy()
        parts = [u, out[:, nr:nr + 6]]
        if self.cfg.meta_pd:
            raw = out[:, nr + 6:] + self.lambda_bias
            lam = softplus(raw) + self.cfg.lambda_floor
            parts.append(np.minimum(lam, self.cfg.lambda_max))
            if record:
                cache["dlam"] = sigmoid(raw) * (lam < self.cfg.lambda_max)
        mu = np.concatenate(parts, -1)
        if record:
            cache["refined"] = (rt, rR, ra)
        else:
            cache = {}
        cache["feat"] = f
        return mu, cache

    def mean_backward(self, cache, g_mu):
        nr = self.nr
        g_out = g_mu.copy()
        if self.cfg.meta_pd:
            g_out[:, nr + 6:] *= cache["dlam"]
        extra = g_mu[:, :nr] if self.cfg.residual else None
        return self.pi.backward(cache, g_out, extra)

    def value(self, obs: Observation, camera: Camera, record: bool = False):
        out, _, f, cache = self.vf.forward(obs, camera, record)
        cache = cache if record else {}
        cache["feat"] = f
        return out[:, 0], cache

    def value_backward(self, cache, g_v):
        return self.vf.backward(cache, g_v[:, None])

    # -- gaussian -------------------------------------------------------------

    def log_prob(self, actions, mu):
        d = actions - mu
        return -0.5 * np.sum(d * d / self.var + np.log(2.0 * np.pi * self.var), axis=-1)

    def log_prob_grad_mean(self, actions, mu):
        return (actions - mu) / self.var

    def sample(self, mu, rng: np.random.Generator, deterministic: bool = False):
        if deterministic:
            a = mu.copy()
        else:
            a = mu + np.sqrt(self.var) * rng.standard_normal(mu.shape)
        return a, self.log_prob(a, mu)

    def decode(self, actions):
        """Split flat actions into (u, eta, lambda_p, lambda_d) ready for the simulator."""
        nr, m = self.nr, self.m
        u = actions[:, :nr]
        eta = actions[:, nr:nr + 6]
        if self.cfg.meta_pd:
            lam = np.clip(actions[:, nr + 6:], self.cfg.lambda_floor, self.cfg.lambda_max)
            return u, eta, lam[:, :m], lam[:, m:]
        ones = np.ones((actions.shape[0], m))
        return u, eta, ones, ones

    # -- normalizers ----------------------------------------------------------

    def update_feature_stats(self, pi_feats, vf_feats) -> None:
        self.pi.norm.update(pi_feats)
        self.vf.norm.update(vf_feats)

    def freeze(self, frozen: bool = True) -> None:
        for n in (self.pi.norm, self.vf.norm, self.pi.refiner.norm, self.vf.refiner.norm):
            n.frozen = frozen

    # -- persistence ----------------------------------------------------------

    def state_dict(self) -> dict:
        d = {}
        for name, br in (("pi", self.pi), ("vf", self.vf)):
            for i, p in enumerate(br.params):
                d[f"{name}/p{i}"] = p
            for nname, norm in (("norm", br.norm), ("rnorm", br.refiner.norm)):
                for k, v in norm.state().items():
                    d[f"{name}/{nname}/{k}"] = v
        d["var"] = self.var
        return d

    def load_state_dict(self, d) -> None:
        for name, br in (("pi", self.pi), ("vf", self.vf)):
            br.set_params([d[f"{name}/p{i}"] for i in range(len(br.params))])
            for nname, norm in (("norm", br.norm), ("rnorm", br.refiner.norm)):
                norm.load({k: d[f"{name}/{nname}/{k}"] for k in ("count", "mean", "var")})
        self.var = np.array(d["var"], dtype=float)

    def copy(self) -> "Policy":
        out = Policy(self.skeleton, self.cfg)
        out.load_state_dict({k: np.array(v, copy=True) for k, v in self.state_dict().items()})
        return out


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, policy: Policy, extra: dict | None = None, meta: dict | None = None) -> None:
    """npz archive with parameters, normalizer statistics, optional optimizer
    state and a JSON header carrying the format version and config hash."""
    header = {"format": "phystrack-policy", "version": CHECKPOINT_VERSION, "config": policy.cfg.to_dict(),
              "config_hash": policy.cfg.hash(), "skeleton": policy.skeleton.to_dict(), "meta": meta or {}}
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update(policy.state_dict())
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    buf = io.BytesIO()
    # fixed entry timestamps keep identical runs byte-identical
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for k, v in arrays.items():
            info = zipfile.ZipInfo(k + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(v), allow_pickle=False)
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (policy, extra arrays, header)."""
    try:
        z = np.load(path, allow_pickle=False)
        header = json.loads(bytes(z["__header__"]).decode())
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise ParseError(f"cannot read checkpoint: {exc}", path, "__header__") from exc
    if header.get("format") != "phystrack-policy":
        raise ParseError("not a policy checkpoint", path, "format")
    if header.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {header.get('version')!r}", path, "version")
    cfg = PolicyConfig.from_dict(header["config"])
    if cfg.hash() != header.get("config_hash"):
        raise ParseError("config hash mismatch", path, "config_hash")
    sk = Skeleton.from_dict(header["skeleton"])
    pol = Policy(sk, cfg)
    pol.load_state_dict({k: z[k] for k in z.files})
    extra = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
    return pol, extra, header


# ----------------------------------------------------------------------------
# single-sample convenience API


def _pose_arrays(p: Pose):
    return p.root_translation[None], rot.quat_to_mat(p.root_orientation)[None], p.joint_angles[None]


def _to_pose(t, R, a) -> Pose:
    return Pose(t[0], rot.mat_to_quat(R[0]), a[0])


def refine_pose(policy_or_refiner, q_kin: Pose, keypoints: Keypoints2D, camera: Camera, n: int = 5) -> Pose:
    ref = policy_or_refiner.pi.refiner if isinstance(policy_or_refiner, Policy) else policy_or_refiner
    q_kin.check(ref.skeleton)
    t, R, a = _pose_arrays(q_kin)
    if n == 0:
        return q_kin.copy()
    t, R, a, _, skipped = ref.run(camera, t, R, a, keypoints.positions[None], keypoints.confidences[None], n)
    if skipped:
        warnings.warn(f"{skipped} refinement iteration(s) skipped: joint behind the camera", RefinementSkipped)
    return _to_pose(t, R, a)


def make_observation(q: Pose, qd: Velocities, q_kin: Pose, keypoints: Keypoints2D) -> Observation:
    t, R, a = _pose_arrays(q)
    kt, kR, ka = _pose_arrays(q_kin)
    return Observation(t, R, a, qd.vector()[None], kt, kR, ka, keypoints.positions[None],
                       keypoints.confidences[None])


def control_mean(policy: Policy, q: Pose, qd: Velocities, q_kin: Pose, keypoints: Keypoints2D, camera: Camera):
    """Mean action split as (u, eta, lambda_p, lambda_d)."""
    mu, _ = policy.mean(make_observation(q, qd, q_kin, keypoints), camera)
    u, eta, lp, ld = policy.decode(mu)
    return u[0], eta[0], lp[0], ld[0]


def value(policy: Policy, q: Pose, qd: Velocities, q_kin: Pose, keypoints: Keypoints2D, camera: Camera) -> float:
    v, _ = policy.value(make_observation(q, qd, q_kin, keypoints), camera)
    return float(v[0])


def sample_action(policy: Policy, mu: np.ndarray, rng: np.random.Generator, deterministic: bool = False):
    mu = np.atleast_2d(mu)
    a, lp = policy.sample(mu, rng, deterministic)
    return a[0], float(lp[0])


# ----------------------------------------------------------------------------
# supervised refiner pretraining


@dataclass
class RefinerData:
    """Kinematic estimates, keypoints and ground-truth poses, all batched."""

    kt: np.ndarray
    kR: np.ndarray
    ka: np.ndarray
    kp: np.ndarray
    conf: np.ndarray
    gt_t: np.ndarray
    gt_R: np.ndarray
    gt_a: np.ndarray

    def __len__(self):
        return self.kt.shape[0]

    def take(self, idx) -> "RefinerData":
        return RefinerData(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def pose_error(t, R, a, gt_t, gt_R, gt_a) -> np.ndarray:
    """Per-sample squared pose error used for pretraining."""
    r = rot.so3_log(np.swapaxes(gt_R, -1, -2) @ R)
    return np.sum((t - gt_t) ** 2, -1) + np.sum(r * r, -1) + np.sum((a - gt_a) ** 2, -1)


def refiner_loss_and_grad(refiner: Refiner, camera: Camera, data: RefinerData, n: int, want_grad: bool = True):
    t, R, a, tape, _ = refiner.run(camera, data.kt, data.kR, data.ka, data.kp, data.conf, n, record=want_grad)
    B = len(data)
    err = pose_error(t, R, a, data.gt_t, data.gt_R, data.gt_a)
    loss = float(err.mean())
    if not want_grad:
        return loss, None
    r = rot.so3_log(np.swapaxes(data.gt_R, -1, -2) @ R)
    g_t = 2.0 * (t - data.gt_t) / B
    g_w = 2.0 * np.einsum("bij,bj->bi", data.gt_R, r) / B
    g_a = 2.0 * (a - data.gt_a) / B
    grads, _, _, _ = refiner.backward(tape, g_t, g_w, g_a)
    return loss, grads


def init_refiner_normalizer(refiner: Refiner, camera: Camera, data: RefinerData) -> None:
    _, _, zr, _, _, bad = refiner.gradient_feature(camera, data.kt, data.kR, data.ka, data.kp, data.conf)
    refiner.norm.update(zr[~bad].reshape((~bad).sum(), -1))


def pretrain_refiner(refiner: Refiner, camera: Camera, data: RefinerData, n: int = 5, epochs: int = 50,
                     lr: float = 1e-3, batch_size: int = 256, seed: int = 0, log=None):
    """Supervised MSE training of the refinement unit through the unrolled
    iterations. Returns (loss before, loss after, per-epoch losses)."""
    if len(data) == 0:
        raise InvalidInputError("pretraining needs a non-empty dataset")
    if refiner.norm.count == 0:
        init_refiner_normalizer(refiner, camera, data)
    rng = np.random.default_rng(seed)
    opt = Adam(refiner.mlp.params, lr)
    before, _ = refiner_loss_and_grad(refiner, camera, data, n, want_grad=False)
    history = []
    N = len(data)
    for ep in range(epochs):
        perm = rng.permutation(N)
        for s in range(0, N, batch_size):
            loss, grads = refiner_loss_and_grad(refiner, camera, data.take(perm[s:s + batch_size]), n)
            opt.step(refiner.mlp.params, grads)
        full, _ = refiner_loss_and_grad(refiner, camera, data, n, want_grad=False)
        history.append(full)
        if log is not None:
            log(ep, full)
    after = history[-1] if history else before
    return before, after, history
