"""Multiplicative imitation reward: pose, velocity, joint-position and
keypoint terms, each exp(-weight * squared error)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .kinematics import rotation_geodesic_angle


@dataclass(frozen=True)
class RewardWeights:
    alpha_p: float = 30.0
    alpha_v: float = 0.2
    alpha_j: float = 100.0
    alpha_k: float = 0.02

    def __post_init__(self):
        if min(self.alpha_p, self.alpha_v, self.alpha_j, self.alpha_k) < 0:
            raise InvalidInputError("reward weights must be non-negative")


PRESETS = {
    "h36m": RewardWeights(30.0, 0.2, 100.0, 0.02),
    "inhouse": RewardWeights(60.0, 0.2, 300.0, 0.02),
}


def reward_preset(name: str) -> RewardWeights:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidInputError(f"unknown reward preset {name!r}; choose from {sorted(PRESETS)}") from None


def pose_reward(o, o_hat, alpha_p: float):
    """o, o_hat: (..., J, 4) local joint orientations."""
    ang = np.asarray(rotation_geodesic_angle(o, o_hat))
    return np.exp(-alpha_p * np.sum(ang * ang, axis=-1))


def velocity_reward(qd, qd_hat, alpha_v: float):
    d = np.asarray(qd, dtype=float) - np.asarray(qd_hat, dtype=float)
    return np.exp(-alpha_v * np.sum(d * d, axis=-1))


def joint_position_reward(X, X_hat, alpha_j: float):
    d = np.asarray(X, dtype=float) - np.asarray(X_hat, dtype=float)
    return np.exp(-alpha_j * np.sum(d * d, axis=(-1, -2)))


def keypoint_reward(x, x_hat, alpha_k: float, scale: float = 1.0):
    """x, x_hat: (..., J, 2) projections; residuals are divided by ``scale``
    (the image diagonal when called from the environment)."""
    d = (np.asarray(x, dtype=float) - np.asarray(x_hat, dtype=float)) / scale
    return np.exp(-alpha_k * np.sum(d * d, axis=(-1, -2)))


def total_reward(r_p, r_v, r_j, r_k):
    return r_p * r_v * r_j * r_k


def imitation_reward(weights: RewardWeights, o, o_hat, qd, qd_hat, X, X_hat, x, x_hat, scale: float = 1.0):
    """All four terms and their product; works on batches."""
    terms = (pose_reward(o, o_hat, weights.alpha_p), velocity_reward(qd, qd_hat, weights.alpha_v),
             joint_position_reward(X, X_hat, weights.alpha_j), keypoint_reward(x, x_hat, weights.alpha_k, scale))
    return total_reward(*terms), terms
