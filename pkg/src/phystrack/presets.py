"""Built-in characters, cameras and scenes.

``toy``: a fixed-base three-link planar chain hanging from a mount, hinges
about y, viewed from the side. ``humanoid``: a 13-bone, 28-dof biped made of
boxes, z-up and facing +x.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .character import CharacterModel, GainConfig, box_mesh, build_character
from .errors import InvalidInputError
from .kinematics import BALL, FREE, HINGE, Camera, Joint, Skeleton
from .simulator import ContactParams, SceneConfig

PRESET_NAMES = ("toy", "h36m-like", "inhouse-like")

TOY_LINK = 0.4
TOY_MOUNT_HEIGHT = 2.0


def toy_skeleton() -> Skeleton:
    y = (0.0, 1.0, 0.0)
    lim = (-2.0, 2.0)
    return Skeleton([
        Joint("mount", None, FREE),
        Joint("j1", 0, HINGE, (0.0, 0.0, 0.0), axis=y, limits=(lim,)),
        Joint("j2", 1, HINGE, (0.0, 0.0, -TOY_LINK), axis=y, limits=(lim,)),
        Joint("j3", 2, HINGE, (0.0, 0.0, -TOY_LINK), axis=y, limits=(lim,)),
    ])


def toy_mesh(skeleton: Skeleton | None = None):
    sk = skeleton or toy_skeleton()
    L = TOY_LINK
    boxes = {
        0: ((0.0, 0.0, 0.1), (0.2, 0.2, 0.2)),
        1: ((0.0, 0.0, -L / 2), (0.08, 0.08, L)),
        2: ((0.0, 0.0, -L / 2), (0.08, 0.08, L)),
        3: ((0.0, 0.0, -0.15), (0.06, 0.06, 0.3)),
    }
    return box_mesh(sk, boxes)


def toy_character() -> CharacterModel:
    sk = toy_skeleton()
    return build_character(toy_mesh(sk), sk, gains=GainConfig(), contact_bones=())


def toy_camera() -> Camera:
    return Camera.look_at((0.0, -3.5, 1.4), (0.0, 0.0, 1.4), fx=1000.0, fy=1000.0)


def toy_scene() -> SceneConfig:
    return SceneConfig(contact=ContactParams(enabled=False), fixed_root=True)


# ----------------------------------------------------------------------------
# humanoid

THIGH = 0.42
SHIN = 0.42
ANKLE_HEIGHT = 0.08  # ankle joint above the sole
HIP_Y = 0.1
HIP_Z = -0.05
FOOT_BONES = ("l_foot", "r_foot")


def humanoid_skeleton() -> Skeleton:
    y = (0.0, 1.0, 0.0)
    ball = ((-1.5, 1.5),) * 3
    return Skeleton([
        Joint("pelvis", None, FREE),
        Joint("spine", 0, BALL, (0.0, 0.0, 0.1), limits=((-0.8, 0.8),) * 3),
        Joint("head", 1, HINGE, (0.0, 0.0, 0.45), axis=y, limits=((-0.8, 0.8),)),
        Joint("l_upperarm", 1, BALL, (0.0, 0.2, 0.38), limits=ball),
        Joint("l_forearm", 3, HINGE, (0.0, 0.0, -0.28), axis=y, limits=((-2.6, 0.1),)),
        Joint("r_upperarm", 1, BALL, (0.0, -0.2, 0.38), limits=ball),
        Joint("r_forearm", 5, HINGE, (0.0, 0.0, -0.28), axis=y, limits=((-2.6, 0.1),)),
        Joint("l_thigh", 0, BALL, (0.0, HIP_Y, HIP_Z), limits=ball),
        Joint("l_shin", 7, HINGE, (0.0, 0.0, -THIGH), axis=y, limits=((-0.1, 2.6),)),
        Joint("l_foot", 8, HINGE, (0.0, 0.0, -SHIN), axis=y, limits=((-1.0, 1.0),)),
        Joint("r_thigh", 0, BALL, (0.0, -HIP_Y, HIP_Z), limits=ball),
        Joint("r_shin", 10, HINGE, (0.0, 0.0, -THIGH), axis=y, limits=((-0.1, 2.6),)),
        Joint("r_foot", 11, HINGE, (0.0, 0.0, -SHIN), axis=y, limits=((-1.0, 1.0),)),
    ])


def humanoid_mesh(skeleton: Skeleton | None = None):
    sk = skeleton or humanoid_skeleton()
    foot = ((0.05, 0.0, -ANKLE_HEIGHT / 2), (0.22, 0.09, ANKLE_HEIGHT))
    boxes = {
        0: ((0.0, 0.0, 0.0), (0.2, 0.3, 0.16)),
        1: ((0.0, 0.0, 0.22), (0.18, 0.32, 0.36)),
        2: ((0.0, 0.0, 0.1), (0.16, 0.14, 0.2)),
        3: ((0.0, 0.0, -0.14), (0.08, 0.08, 0.28)),
        4: ((0.0, 0.0, -0.13), (0.06, 0.06, 0.26)),
        5: ((0.0, 0.0, -0.14), (0.08, 0.08, 0.28)),
        6: ((0.0, 0.0, -0.13), (0.06, 0.06, 0.26)),
        7: ((0.0, 0.0, -THIGH / 2), (0.11, 0.11, THIGH - 0.02)),
        8: ((0.0, 0.0, -SHIN / 2), (0.09, 0.09, SHIN - 0.02)),
        9: foot,
        10: ((0.0, 0.0, -THIGH / 2), (0.11, 0.11, THIGH - 0.02)),
        11: ((0.0, 0.0, -SHIN / 2), (0.09, 0.09, SHIN - 0.02)),
        12: foot,
    }
    return box_mesh(sk, boxes)


def humanoid_character() -> CharacterModel:
    sk = humanoid_skeleton()
    return build_character(humanoid_mesh(sk), sk, gains=GainConfig(kp_per_kg=40.0, kd_per_kg=4.0),
                           contact_bones=tuple(sk.index(n) for n in FOOT_BONES))


def humanoid_camera() -> Camera:
    return Camera.look_at((1.5, -4.5, 1.0), (1.5, 0.0, 0.9), fx=800.0, fy=800.0)


def humanoid_scene() -> SceneConfig:
    return SceneConfig()


# ----------------------------------------------------------------------------
# bundles


@dataclass
class Preset:
    name: str
    character: CharacterModel
    scene: SceneConfig
    camera: Camera
    motion_kind: str
    reward: str
    policy: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)
    corruption: dict = field(default_factory=dict)
    seq_duration: float = 10.0
    num_sequences: int = 8

    @property
    def skeleton(self) -> Skeleton:
        return self.character.skeleton


def get_preset(name: str) -> Preset:
    if name == "toy":
        return Preset(
            "toy", toy_character(), toy_scene(), toy_camera(), "sinusoid", "h36m",
            policy=dict(refine_hidden=(64, 64), control_hidden=(128, 128), sigma=0.01, root_update=False,
                        out_scale=0.01),
            ppo=dict(steps_per_epoch=2048, epochs=40, num_envs=32, policy_lr=3e-4, value_lr=1e-3,
                     minibatch_size=512, episode_len=200),
            corruption=dict(angle_std=0.05, keypoint_std=1.5, conf_scale=3.0),
            seq_duration=12.0, num_sequences=12)
    if name in ("h36m-like", "inhouse-like"):
        return Preset(
            name, humanoid_character(), humanoid_scene(), humanoid_camera(), "walk",
            "h36m" if name == "h36m-like" else "inhouse",
            policy=dict(refine_hidden=(256, 512, 256), control_hidden=(512, 256), sigma=0.1),
            ppo=dict(steps_per_epoch=4000, epochs=200, num_envs=16),
            corruption=dict(angle_std=0.05, root_rot_std=0.03, root_drift_std=0.002, jitter_std=0.01,
                            keypoint_std=3.0, conf_scale=6.0),
            seq_duration=8.0, num_sequences=8)
    raise InvalidInputError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")


def with_overrides(preset: Preset, **kw) -> Preset:
    return replace(preset, **kw)
