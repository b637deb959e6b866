"""PPO with GAE for the tracking policy: rollout collection over lockstep
environments, advantage estimation, clipped-surrogate updates and the
training loop with logs and checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rotations as rot
from .env import TrackingEnv
from .errors import InvalidInputError
from .kinematics import finite_difference_batch
from .nn import Adam
from .policy import Observation, Policy, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EPISODE_END, FALL, CUT = "episode-end", "fall", "cut"


@dataclass
class PPOConfig:
    steps_per_epoch: int = 4000
    epochs: int = 200
    updates_per_epoch: int = 10
    policy_lr: float = 5e-5
    value_lr: float = 3e-4
    clip_eps: float = 0.2
    gamma: float = 0.95
    gae_lambda: float = 0.95
    episode_len: int = 200
    num_envs: int = 16
    minibatch_size: int = 1000
    betas: tuple = (0.9, 0.999)
    max_grad_norm: float | None = None
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise InvalidInputError("clip_eps must lie in (0, 1)")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise InvalidInputError("gamma and gae_lambda must lie in [0, 1]")
        if self.steps_per_epoch < 1 or self.num_envs < 1 or self.minibatch_size < 1 or self.epochs < 0:
            raise InvalidInputError("sizes must be positive")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise InvalidInputError(f"unknown PPO config keys {sorted(bad)}")
        return cls(**d)


@dataclass
class Transition:
    obs: Observation
    action: np.ndarray
    log_prob: float
    reward: float
    value: float
    done: bool
    kind: str | None  # termination kind on the last transition of an episode


@dataclass
class RolloutBuffer:
    obs: Observation
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    episodes: list  # (start, stop, kind, bootstrap value) into the flat arrays
    pi_feats: np.ndarray | None = None
    vf_feats: np.ndarray | None = None
    discarded: int = 0  # transitions from diverged episodes, never stored
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @property
    def dones(self) -> np.ndarray:
        d = np.zeros(len(self), dtype=bool)
        for _, stop, kind, _ in self.episodes:
            d[stop - 1] = kind != CUT
        return d

    def transition(self, i: int) -> Transition:
        kind = None
        for start, stop, k, _ in self.episodes:
            if stop - 1 == i:
                kind = k
        return Transition(self.obs.take(slice(i, i + 1)), self.actions[i], float(self.log_probs[i]),
                          float(self.rewards[i]), float(self.values[i]), kind in (EPISODE_END, FALL), kind)

    def stats(self) -> dict:
        lengths = [stop - start for start, stop, _, _ in self.episodes]
        complete = [e for e in self.episodes if e[2] != CUT]
        falls = sum(1 for e in self.episodes if e[2] == FALL)
        return {"mean_reward": float(self.rewards.mean()) if len(self) else 0.0,
                "episode_len": float(np.mean(lengths)) if lengths else 0.0,
                "fall_rate": falls / max(len(complete), 1), "episodes": len(self.episodes),
                "steps": len(self), "discarded": self.discarded}


# ----------------------------------------------------------------------------
# collection


def collect_rollouts(policy: Policy, env: TrackingEnv, steps_target: int, rng: np.random.Generator,
                     deterministic: bool = False) -> RolloutBuffer:
    """Run every environment until the stored step count reaches the target.
    Episodes still running at that point are cut and bootstrapped; episodes
    that diverge are dropped entirely."""
    if env.N < 1:
        raise InvalidInputError("need at least one environment")
    cam = env.camera
    env.reset(policy)
    current = [[] for _ in range(env.N)]
    rows = []  # per step: dict of N-wide arrays
    episodes = []  # (list of (row, env)), kind, bootstrap
    kept = 0
    discarded = 0
    while True:
        obs = env.observe()
        mu, pc = policy.mean(obs, cam)
        v, vc = policy.value(obs, cam)
        act, logp = policy.sample(mu, rng, deterministic)
        u, eta, lp, ld = policy.decode(act)
        r, trunc, fell, div = env.step(u, eta, lp, ld)
        step = len(rows)
        rows.append(dict(obs=obs, act=act, logp=logp, r=r, v=v, pf=pc["feat"], vf=vc["feat"]))
        for i in range(env.N):
            current[i].append((step, i))
        finished = trunc | fell | div
        in_progress = sum(len(c) for c in current)
        cut_all = kept + in_progress >= steps_target
        boot = np.zeros(env.N)
        need_v = trunc | (cut_all & ~finished)
        if np.any(need_v):
            idx = np.flatnonzero(need_v)
            vb, _ = policy.value(env.observe().take(idx), cam)
            boot[idx] = vb
        for i in range(env.N):
            if div[i]:
                discarded += len(current[i])
                log.warning("episode diverged after %d steps; dropped", len(current[i]))
                current[i] = []
            elif fell[i]:
                episodes.append((current[i], FALL, 0.0))
                kept += len(current[i])
                current[i] = []
            elif trunc[i]:
                episodes.append((current[i], EPISODE_END, float(boot[i])))
                kept += len(current[i])
                current[i] = []
            elif cut_all:
                episodes.append((current[i], CUT, float(boot[i])))
                kept += len(current[i])
                current[i] = []
        if cut_all:
            break
        env.reset(policy, np.flatnonzero(finished))
    return _assemble(rows, episodes, discarded)


def _assemble(rows, episodes, discarded) -> RolloutBuffer:
    order = [(s, i) for ep, _, _ in episodes for s, i in ep]
    spans = []
    pos = 0
    for ep, kind, b in episodes:
        spans.append((pos, pos + len(ep), kind, b))
        pos += len(ep)

    def gather(key):
        return np.array([rows[s][key][i] for s, i in order])

    obs = Observation(*(np.array([getattr(rows[s]["obs"], f)[i] for s, i in order])
                        for f in ("t", "R", "a", "qd", "kt", "kR", "ka", "kp", "conf")))
    return RolloutBuffer(obs, gather("act"), gather("logp"), gather("r"), gather("v"), spans, gather("pf"),
                         gather("vf"), discarded)


# ----------------------------------------------------------------------------
# advantages


def gae_episode(rewards, values, bootstrap: float, gamma: float, lam: float):
    T = len(rewards)
    adv = np.zeros(T)
    nxt = bootstrap
    acc = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * nxt - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        nxt = values[t]
    return adv, adv + values


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float):
    adv = np.zeros(len(buffer))
    ret = np.zeros(len(buffer))
    for start, stop, _, boot in buffer.episodes:
        a, r = gae_episode(buffer.rewards[start:stop], buffer.values[start:stop], boot, gamma, lam)
        adv[start:stop] = a
        ret[start:stop] = r
    buffer.advantages, buffer.returns = adv, ret
    return adv, ret


def standardize(x: np.ndarray) -> np.ndarray:
    if x.size < 2:
        return x - x.mean()
    return (x - x.mean()) / (x.std() + 1e-12)


# ----------------------------------------------------------------------------
# update


def clipped_surrogate(logp_new, logp_old, adv, eps: float):
    """-mean(min(rho A, clip(rho) A)) and its gradient with respect to logp_new."""
    rho = np.exp(logp_new - logp_old)
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - eps, 1.0 + eps) * adv
    loss = -np.mean(np.minimum(unclipped, clipped))
    # gradient flows only where the unclipped term is the active minimum
    active = unclipped <= clipped
    grad = -np.where(active, unclipped, 0.0) / rho.size
    return float(loss), grad, rho


class Trainer:
    """Holds the optimizers and RNG streams so training can stop and resume."""

    def __init__(self, policy: Policy, env: TrackingEnv, cfg: PPOConfig):
        self.policy = policy
        self.env = env
        self.cfg = cfg
        self.pi_opt = Adam(policy.pi.params, cfg.policy_lr, cfg.betas, max_grad_norm=cfg.max_grad_norm)
        self.vf_opt = Adam(policy.vf.params, cfg.value_lr, cfg.betas, max_grad_norm=cfg.max_grad_norm)
        self.rng = np.random.default_rng(cfg.seed)
        self.env.rng = np.random.default_rng(cfg.seed + 1)
        self.epoch = 0

    def ppo_update(self, buf: RolloutBuffer) -> dict:
        cfg, pol, cam = self.cfg, self.policy, self.env.camera
        if len(buf) == 0:
            raise InvalidInputError("empty rollout buffer")
        if buf.advantages is None:
            compute_gae(buf, cfg.gamma, cfg.gae_lambda)
        adv_all = standardize(buf.advantages)
        n = len(buf)
        diag = {"policy_loss": [], "value_loss": [], "clip_frac": [], "first_ratio_dev": 0.0, "aborted": False}
        for k in range(cfg.updates_per_epoch):
            perm = self.rng.permutation(n)
            for s in range(0, n, cfg.minibatch_size):
                idx = perm[s:s + cfg.minibatch_size]
                obs = buf.obs.take(idx)
                act = buf.actions[idx]
                adv = adv_all[idx]
                mu, cache = pol.mean(obs, cam, record=True)
                logp = pol.log_prob(act, mu)
                loss, g_logp, rho = clipped_surrogate(logp, buf.log_probs[idx], adv, cfg.clip_eps)
                if k == 0 and s == 0:
                    diag["first_ratio_dev"] = float(np.abs(rho - 1.0).max())
                v, vcache = pol.value(obs, cam, record=True)
                vloss = float(np.mean((v - buf.returns[idx]) ** 2))
                if not (np.isfinite(loss) and np.isfinite(vloss)):
                    log.error("non-finite loss in PPO update; update aborted")
                    diag["aborted"] = True
                    return self._summarize(diag)
                g_mu = g_logp[:, None] * pol.log_prob_grad_mean(act, mu)
                grads = pol.mean_backward(cache, g_mu)
                vgrads = pol.value_backward(vcache, 2.0 * (v - buf.returns[idx]) / idx.size)
                if not all(np.all(np.isfinite(g)) for g in grads + vgrads):
                    log.error("non-finite gradient in PPO update; update aborted")
                    diag["aborted"] = True
                    return self._summarize(diag)
                self.pi_opt.step(pol.pi.params, grads)
                self.vf_opt.step(pol.vf.params, vgrads)
                diag["policy_loss"].append(loss)
                diag["value_loss"].append(vloss)
                diag["clip_frac"].append(float(np.mean(np.abs(rho - 1.0) > cfg.clip_eps)))
        return self._summarize(diag)

    @staticmethod
    def _summarize(diag) -> dict:
        out = dict(diag)
        for k in ("policy_loss", "value_loss", "clip_frac"):
            out[k] = float(np.mean(diag[k])) if diag[k] else float("nan")
        return out

    def run_epoch(self) -> dict:
        pol = self.policy
        pol.freeze(True)
        buf = collect_rollouts(pol, self.env, self.cfg.steps_per_epoch, self.rng)
        compute_gae(buf, self.cfg.gamma, self.cfg.gae_lambda)
        diag = self.ppo_update(buf)
        # running statistics move only between epochs
        pol.pi.norm.frozen = pol.vf.norm.frozen = False
        pol.update_feature_stats(buf.pi_feats, buf.vf_feats)
        pol.freeze(True)
        self.epoch += 1
        rec = {"epoch": self.epoch, **buf.stats(), "policy_loss": diag["policy_loss"],
               "value_loss": diag["value_loss"], "clip_frac": diag["clip_frac"], "aborted": diag["aborted"]}
        return rec

    # -- persistence ----------------------------------------------------------

    def extra_state(self) -> dict:
        d = {f"pi_opt/{k}": v for k, v in self.pi_opt.state().items()}
        d.update({f"vf_opt/{k}": v for k, v in self.vf_opt.state().items()})
        return d

    def meta(self) -> dict:
        return {"epoch": self.epoch, "ppo": self.cfg.to_dict(), "rng": self.rng.bit_generator.state,
                "env_rng": self.env.rng.bit_generator.state}

    def save(self, path) -> None:
        save_checkpoint(path, self.policy, self.extra_state(), self.meta())

    def restore(self, extra: dict, meta: dict) -> None:
        self.pi_opt.load({k[len("pi_opt/"):]: v for k, v in extra.items() if k.startswith("pi_opt/")})
        self.vf_opt.load({k[len("vf_opt/"):]: v for k, v in extra.items() if k.startswith("vf_opt/")})
        self.rng.bit_generator.state = meta["rng"]
        self.env.rng.bit_generator.state = meta["env_rng"]
        self.epoch = int(meta["epoch"])


def prime_normalizers(policy: Policy, env: TrackingEnv) -> None:
    """Seed the feature statistics from kinematic data: the state is the
    refined estimate at frame f, the observation the estimate at f + 1."""
    feats_pi, feats_vf = [], []
    n = policy.cfg.n_refine
    for c in env.clips:
        T = c.T
        kt, kR, ka, _, _ = policy.pi.refiner.run(env.camera, c.kt, c.kR, c.ka, c.kp, c.conf, n)
        lin, ang, rates = finite_difference_batch(env.skeleton, kt[:-1], kR[:-1], ka[:-1], kt[1:], kR[1:], ka[1:],
                                                  1.0 / c.gt.fps)
        qd = np.concatenate([lin, ang, rates], -1)
        if env.scene.fixed_root:
            qd[:, :6] = 0.0
        obs = Observation(kt[:-1], kR[:-1], ka[:-1], qd, c.kt[1:], c.kR[1:], c.ka[1:], c.kp[1:], c.conf[1:])
        _, pc = policy.mean(obs, env.camera)
        _, vc = policy.value(obs, env.camera)
        feats_pi.append(pc["feat"])
        feats_vf.append(vc["feat"])
    policy.pi.norm.frozen = policy.vf.norm.frozen = False
    policy.update_feature_stats(np.concatenate(feats_pi), np.concatenate(feats_vf))
    policy.freeze(True)


def train(policy: Policy, env: TrackingEnv, cfg: PPOConfig, out_dir, resume: str | None = None,
          eval_fn=None, eval_every: int = 0, progress=None) -> list[dict]:
    """Alternate collection and updates for ``cfg.epochs`` epochs. Writes
    ``log.jsonl`` and checkpoints ``ckpt_XXXXX.npz`` / ``final.npz`` into
    ``out_dir``; returns the log records."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(policy, env, cfg)
    log_path = out / "log.jsonl"
    records = []
    if resume is not None:
        pol2, extra, header = load_checkpoint(resume)
        policy.load_state_dict(pol2.state_dict())
        trainer.restore(extra, header["meta"])
    else:
        if policy.pi.norm.count == 0:
            prime_normalizers(policy, env)
        log_path.write_text("")
        trainer.save(out / f"ckpt_{0:05d}.npz")
    while trainer.epoch < cfg.epochs:
        rec = trainer.run_epoch()
        if eval_fn is not None and eval_every and trainer.epoch % eval_every == 0:
            rec.update(eval_fn(policy))
        records.append(rec)
        with log_path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if progress is not None:
            progress(rec)
        if cfg.checkpoint_every and trainer.epoch % cfg.checkpoint_every == 0:
            trainer.save(out / f"ckpt_{trainer.epoch:05d}.npz")
    if trainer.epoch > 0:
        trainer.save(out / "final.npz")
    return records
