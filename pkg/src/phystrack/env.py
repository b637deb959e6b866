"""Batched tracking environment: simulator + reference data + observation
assembly + imitation reward."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotations as rot
from .character import CharacterModel, bone_world_vertices
from .data import MotionSequence
from .errors import InvalidInputError
from .kinematics import Camera, finite_difference_batch, fk_batch, local_rotations, project
from .policy import Observation, Policy
from .reward import RewardWeights, imitation_reward
from .simulator import SceneConfig, SimBatch, Simulator


def local_quats(skeleton, R, a) -> np.ndarray:
    """Root orientation followed by parent-relative joint rotations, (B, J, 4)."""
    loc = local_rotations(skeleton, a)
    loc[:, 0] = R
    return rot.mat_to_quat(loc)


@dataclass
class Clip:
    """Ground truth and kinematic estimate of one sequence, as arrays."""

    gt: MotionSequence
    est: MotionSequence
    camera: Camera

    def __post_init__(self):
        if len(self.gt) != len(self.est):
            raise InvalidInputError("ground truth and estimate must have equal length")
        if self.est.keypoints is None:
            raise InvalidInputError("the kinematic estimate needs keypoints")
        sk = self.gt.skeleton
        dt = 1.0 / self.gt.fps
        self.T = len(self.gt)
        self.gt_t = self.gt.root_translation
        self.gt_R = self.gt.R
        self.gt_a = self.gt.joint_angles
        self.gt_X, _ = fk_batch(sk, self.gt_t, self.gt_R, self.gt_a)
        self.gt_quat = local_quats(sk, self.gt_R, self.gt_a)
        self.gt_kp = project(self.camera, self.gt_X)
        qd = np.zeros((self.T, sk.num_dof))
        if self.T > 1:
            qd[1:] = np.concatenate(finite_difference_batch(sk, self.gt_t[:-1], self.gt_R[:-1], self.gt_a[:-1],
                                                            self.gt_t[1:], self.gt_R[1:], self.gt_a[1:], dt), -1)
            qd[0] = qd[1]
        self.gt_qd = qd
        self.kt = self.est.root_translation
        self.kR = self.est.R
        self.ka = self.est.joint_angles
        self.kp = self.est.keypoints
        self.conf = self.est.confidences


class TrackingEnv:
    """N environments stepping in lockstep, each tracking a segment of a clip."""

    def __init__(self, character: CharacterModel, scene: SceneConfig, clips: list[Clip], weights: RewardWeights,
                 num_envs: int = 1, episode_len: int = 200, seed: int = 0, fall_threshold: float = 0.5):
        if not clips:
            raise InvalidInputError("at least one clip is required")
        if any(c.camera.to_dict() != clips[0].camera.to_dict() for c in clips):
            raise InvalidInputError("all clips of one environment must share a camera")
        self.character = character
        self.skeleton = character.skeleton
        self.sim = Simulator(character, scene)
        self.scene = self.sim.scene
        self.clips = clips
        self.camera = clips[0].camera
        self.weights = weights
        self.N = num_envs
        self.episode_len = episode_len
        self.fall_threshold = fall_threshold
        self.rng = np.random.default_rng(seed)
        self.dt = scene.policy_dt
        self.state: SimBatch | None = None
        self.clip_idx = np.zeros(self.N, dtype=int)
        self.frame = np.zeros(self.N, dtype=int)
        self.last = np.zeros(self.N, dtype=int)

    # -- episodes -------------------------------------------------------------

    def initial_states(self, policy: Policy | None, clip_idx, start) -> SimBatch:
        """Refined kinematic pose of the start frame, with the finite-difference
        velocity of the refined poses at start and start + 1."""
        sk = self.skeleton
        n = 0 if policy is None else policy.cfg.n_refine
        cols = []
        for f in (0, 1):
            idx = [(self.clips[c], s + f) for c, s in zip(clip_idx, start)]
            kt = np.array([c.kt[i] for c, i in idx])
            kR = np.array([c.kR[i] for c, i in idx])
            ka = np.array([c.ka[i] for c, i in idx])
            kp = np.array([c.kp[i] for c, i in idx])
            cf = np.array([c.conf[i] for c, i in idx])
            if n > 0:
                kt, kR, ka, _, _ = policy.pi.refiner.run(self.camera, kt, kR, ka, kp, cf, n)
            cols.append((kt, kR, ka))
        (t0, R0, a0), (t1, R1, a1) = cols
        qd = np.concatenate(finite_difference_batch(sk, t0, R0, a0, t1, R1, a1, 1.0 / self.clips[0].gt.fps), -1)
        if self.scene.fixed_root:
            qd[:, :6] = 0.0
        a0 = np.clip(a0, sk.lower, sk.upper)
        return SimBatch(t0.copy(), R0.copy(), a0.copy(), qd, np.zeros(len(clip_idx)))

    def reset(self, policy: Policy | None, envs=None) -> None:
        envs = np.arange(self.N) if envs is None else np.asarray(envs, dtype=int)
        if envs.size == 0:
            return
        ci = self.rng.integers(0, len(self.clips), size=envs.size)
        L = np.array([min(self.episode_len, self.clips[c].T) for c in ci])
        if np.any(L < 2):
            raise InvalidInputError("episodes need sequences of at least 2 frames")
        starts = np.array([self.rng.integers(0, self.clips[c].T - l + 1) for c, l in zip(ci, L)])
        init = self.initial_states(policy, ci, starts)
        if self.state is None:
            self.state = init
        else:
            self.state.put(envs, init)
        self.clip_idx[envs] = ci
        self.frame[envs] = starts
        self.last[envs] = starts + L - 1

    def start_at(self, policy: Policy | None, clip_idx, starts, lengths) -> None:
        """Deterministic episode placement (evaluation)."""
        ci = np.asarray(clip_idx, dtype=int)
        st = np.asarray(starts, dtype=int)
        self.state = self.initial_states(policy, ci, st)
        self.clip_idx = ci.copy()
        self.frame = st.copy()
        self.last = st + np.asarray(lengths, dtype=int) - 1
        self.N = ci.size

    # -- observation / step ---------------------------------------------------

    def _gather(self, name, frames, clip_idx=None):
        clip_idx = self.clip_idx if clip_idx is None else clip_idx
        return np.array([getattr(self.clips[c], name)[f] for c, f in zip(clip_idx, frames)])

    def observe(self) -> Observation:
        s = self.state
        nf = self.frame + 1
        return Observation(s.t.copy(), s.R.copy(), s.a.copy(), s.qd.copy(), self._gather("kt", nf),
                           self._gather("kR", nf), self._gather("ka", nf), self._gather("kp", nf),
                           self._gather("conf", nf))

    def reward(self, s: SimBatch, frames, clip_idx=None):
        sk = self.skeleton
        g = lambda name: self._gather(name, frames, clip_idx)
        X, _ = fk_batch(sk, s.t, s.R, s.a)
        q = local_quats(sk, s.R, s.a)
        x = project(self.camera, X)
        r, terms = imitation_reward(self.weights, q, g("gt_quat"), s.qd, g("gt_qd"), X, g("gt_X"), x, g("gt_kp"),
                                    self.camera.diagonal)
        return r, terms

    def step(self, u, eta, lambda_p, lambda_d):
        """Advance every environment one policy step. Returns (reward, truncated,
        fell, diverged); the caller resets finished environments."""
        s, diverged = self.sim.policy_step_batch(self.state, u, eta, lambda_p, lambda_d)
        self.state = s
        self.frame = self.frame + 1
        with np.errstate(all="ignore"):
            r = np.zeros(self.N)
            ok = ~diverged
            if np.any(ok):
                r[ok], _ = self.reward(s.take(ok), self.frame[ok], self.clip_idx[ok])
        kz = self._gather("kt", self.frame)[:, 2]
        fell = ~diverged & (s.t[:, 2] < kz - self.fall_threshold)
        truncated = ~diverged & ~fell & (self.frame >= self.last)
        return r, truncated, fell, diverged

    def contact_vertices(self, s: SimBatch | None = None) -> np.ndarray:
        s = self.state if s is None else s
        X, Rw = fk_batch(self.skeleton, s.t, s.R, s.a)
        return bone_world_vertices(self.character, X, Rw)


def rollout_clips(policy: Policy, character: CharacterModel, scene: SceneConfig, clips: list[Clip],
                  weights: RewardWeights, deterministic: bool = True, rng=None, forced_unit_gains: bool = False):
    """Run the policy over every clip from its first frame to its last, all clips
    in lockstep (shorter clips are cut to the shortest length). Returns simulated
    root translations, rotations and joint angles (C, T, ...) and rewards (C, T-1)."""
    T = min(c.T for c in clips)
    env = TrackingEnv(character, scene, clips, weights, num_envs=len(clips), episode_len=T)
    env.start_at(policy, np.arange(len(clips)), np.zeros(len(clips)), np.full(len(clips), T))
    rng = rng if rng is not None else np.random.default_rng(0)
    ts, Rs, As, rews = [env.state.t.copy()], [env.state.R.copy()], [env.state.a.copy()], []
    for _ in range(T - 1):
        mu, _ = policy.mean(env.observe(), env.camera)
        act, _ = policy.sample(mu, rng, deterministic)
        u, eta, lp, ld = policy.decode(act)
        if forced_unit_gains:
            lp = np.ones_like(lp)
            ld = np.ones_like(ld)
        r, _, _, div = env.step(u, eta, lp, ld)
        if np.any(div):
            raise FloatingPointError("simulation diverged during evaluation rollout")
        ts.append(env.state.t.copy())
        Rs.append(env.state.R.copy())
        As.append(env.state.a.copy())
        rews.append(r)
    return (np.stack(ts, 1), np.stack(Rs, 1), np.stack(As, 1)), np.stack(rews, 1)
