"""Glue between presets, data, the refiner, training and evaluation. The CLI
and the acceptance experiments both go through these functions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotations as rot
from .character import bone_world_vertices
from .data import CorruptionSpec, MotionSequence, corrupt, generate_reference_motion
from .env import Clip, TrackingEnv, rollout_clips
from .kinematics import fk_batch
from .metrics import MetricsReport, ablation_sweep, evaluate
from .policy import Policy, PolicyConfig, RefinerData, pretrain_refiner
from .presets import TOY_MOUNT_HEIGHT, Preset
from .reward import reward_preset
from .rl import PPOConfig


def make_pairs(preset: Preset, seed: int = 0, num_sequences: int | None = None, duration: float | None = None,
               corruption: dict | None = None) -> list[tuple[MotionSequence, MotionSequence]]:
    """Ground-truth references and their corrupted estimates."""
    n = preset.num_sequences if num_sequences is None else num_sequences
    dur = preset.seq_duration if duration is None else duration
    spec_kw = dict(preset.corruption)
    spec_kw.update(corruption or {})
    root = (0.0, 0.0, TOY_MOUNT_HEIGHT) if preset.name == "toy" else None
    pairs = []
    for i in range(n):
        s = seed * 1000 + i
        gt = generate_reference_motion(preset.skeleton, preset.motion_kind, dur, seed=s, root_translation=root)
        est = corrupt(gt, preset.camera, CorruptionSpec(seed=s + 500_000, **spec_kw))
        gt.camera = preset.camera
        pairs.append((gt, est))
    return pairs


def make_clips(preset: Preset, pairs) -> list[Clip]:
    return [Clip(gt, est, preset.camera) for gt, est in pairs]


def refiner_data(clips: list[Clip]) -> RefinerData:
    cat = lambda name: np.concatenate([getattr(c, name) for c in clips])
    return RefinerData(cat("kt"), cat("kR"), cat("ka"), cat("kp"), cat("conf"), cat("gt_t"), cat("gt_R"),
                       cat("gt_a"))


def make_policy(preset: Preset, seed: int = 0, **overrides) -> Policy:
    kw = dict(preset.policy)
    kw.update(overrides)
    return Policy(preset.skeleton, PolicyConfig(seed=seed, **kw))


def pretrain(policy: Policy, preset: Preset, clips: list[Clip], epochs: int = 30, lr: float = 1e-3, seed: int = 0,
             log=None):
    """Supervised refiner pretraining; the value branch gets a copy."""
    data = refiner_data(clips)
    res = pretrain_refiner(policy.pi.refiner, preset.camera, data, policy.cfg.n_refine, epochs, lr, seed=seed,
                           log=log)
    policy.vf.refiner = policy.pi.refiner.copy()
    return res


def make_env(preset: Preset, clips, ppo: PPOConfig) -> TrackingEnv:
    return TrackingEnv(preset.character, preset.scene, clips, reward_preset(preset.reward), ppo.num_envs,
                       ppo.episode_len, seed=ppo.seed + 1)


def ppo_config(preset: Preset, seed: int = 0, **overrides) -> PPOConfig:
    kw = dict(preset.ppo)
    kw.update(overrides)
    return PPOConfig(seed=seed, **kw)


@dataclass
class EvalResult:
    sim: MetricsReport
    kinematic: MetricsReport
    refined: MetricsReport
    mean_reward: float


def motion_metrics(preset: Preset, X_pred, X_gt, verts=None) -> MetricsReport:
    """Per-sequence reports averaged over sequences; inputs are (C, T, J, 3)."""
    reports = [evaluate(X_pred[c], X_gt[c], None if verts is None else verts[c]) for c in range(X_pred.shape[0])]
    keys = ("mpjpe", "pa_mpjpe", "accel", "fs", "gp")
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    notes = sorted({n for r in reports for n in r.notes})
    return MetricsReport(**vals, series={}, notes=notes)


def contact_vertices(preset: Preset, X, Rw):
    if not preset.character.contact_bones:
        return None
    return bone_world_vertices(preset.character, X, Rw)


def sequence_positions(preset: Preset, motions: list[MotionSequence]):
    """Joint positions (C, T, J, 3) and contact vertices of equal-length motions."""
    sk = preset.skeleton
    T = min(len(m) for m in motions)
    X, V = [], []
    for m in motions:
        x, rw = fk_batch(sk, m.root_translation[:T], m.R[:T], m.joint_angles[:T])
        X.append(x)
        V.append(contact_vertices(preset, x, rw))
    return np.stack(X), (None if V[0] is None else np.stack(V))


def simulate(policy: Policy, preset: Preset, clips: list[Clip], deterministic: bool = True,
             forced_unit_gains: bool = False, rng=None):
    """Roll the policy over whole clips. Returns simulated MotionSequences and
    the per-step rewards (C, T-1)."""
    (t, R, a), rew = rollout_clips(policy, preset.character, preset.scene, clips, reward_preset(preset.reward),
                                   deterministic, rng=rng, forced_unit_gains=forced_unit_gains)
    out = []
    for c in range(t.shape[0]):
        out.append(MotionSequence(preset.skeleton, t[c], rot.mat_to_quat(R[c]), a[c], clips[c].gt.fps,
                                  camera=preset.camera, provenance="simulated"))
    return out, rew


def evaluate_policy(policy: Policy, preset: Preset, clips: list[Clip], deterministic: bool = True,
                    forced_unit_gains: bool = False) -> EvalResult:
    """Deterministic rollouts over whole clips; metrics for the simulated motion,
    the raw kinematic estimate and the refined estimate."""
    sk = preset.skeleton
    sims, rew = simulate(policy, preset, clips, deterministic, forced_unit_gains)
    T = len(sims[0])
    X, verts = sequence_positions(preset, sims)
    X_gt = np.stack([c.gt_X[:T] for c in clips])
    K = np.stack([fk_batch(sk, c.kt[:T], c.kR[:T], c.ka[:T])[0] for c in clips])
    ref = []
    for c in clips:
        rt, rR, ra, _, _ = policy.pi.refiner.run(preset.camera, c.kt[:T], c.kR[:T], c.ka[:T], c.kp[:T],
                                                 c.conf[:T], policy.cfg.n_refine)
        ref.append(fk_batch(sk, rt, rR, ra)[0])
    return EvalResult(motion_metrics(preset, X, X_gt, verts), motion_metrics(preset, K, X_gt),
                      motion_metrics(preset, np.stack(ref), X_gt), float(rew.mean()))


def refinement_sweep(policy: Policy, preset: Preset, clips: list[Clip], counts=range(6)):
    return ablation_sweep(policy.pi.refiner, preset.camera, refiner_data(clips), preset.skeleton, counts)


def train_and_evaluate(preset: Preset, seed: int, out_dir, pretrain_epochs: int = 30, num_test: int = 4,
                       ppo_overrides: dict | None = None, progress=None, **policy_overrides):
    """Pretrain, train and evaluate on held-out sequences of the same preset.
    Returns (policy, training log, EvalResult on the test clips, test clips)."""
    from .rl import train

    clips = make_clips(preset, make_pairs(preset, seed))
    test = make_clips(preset, make_pairs(preset, 10_000 + seed, num_sequences=num_test))
    policy = make_policy(preset, seed, **policy_overrides)
    if pretrain_epochs:
        pretrain(policy, preset, clips, pretrain_epochs, seed=seed)
    ppo = ppo_config(preset, seed, **(ppo_overrides or {}))
    log = train(policy, make_env(preset, clips, ppo), ppo, out_dir, progress=progress)
    return policy, log, evaluate_policy(policy, preset, test), test
