import json

import numpy as np
import pytest

from phystrack import pipeline as P
from phystrack.config import RunConfig, load_config
from phystrack.data import (CorruptionSpec, MotionSequence, corrupt, generate_reference_motion, load_motion,
                            motion_to_dict, save_motion, with_keypoints)
from phystrack.errors import InvalidInputError, ParseError, UnsupportedVersionError
from phystrack.kinematics import project
from phystrack.metrics import foot_sliding, ground_penetration
from phystrack.presets import get_preset

TOY = get_preset("toy")
HUM = get_preset("h36m-like")


def test_sinusoid_is_exact():
    m, prm = generate_reference_motion(TOY.skeleton, "sinusoid", 3.0, seed=4, return_params=True)
    t = np.arange(len(m)) / m.fps
    expect = prm["amplitude"] * np.sin(prm["omega"] * t[:, None] + prm["phase"])
    assert np.array_equal(m.joint_angles, expect)
    assert len(m) == 90


def test_generation_is_deterministic():
    for kind, sk in (("sinusoid", TOY.skeleton), ("walk", HUM.skeleton), ("reach", HUM.skeleton)):
        a = generate_reference_motion(sk, kind, 2.0, seed=9)
        b = generate_reference_motion(sk, kind, 2.0, seed=9)
        assert a.equals(b)
        assert np.all(a.joint_angles >= sk.lower) and np.all(a.joint_angles <= sk.upper)
    with pytest.raises(InvalidInputError):
        generate_reference_motion(TOY.skeleton, "dance", 1.0)
    with pytest.raises(InvalidInputError):
        generate_reference_motion(TOY.skeleton, "sinusoid", 0.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_clean_walk_has_no_sliding_or_penetration(seed):
    m = generate_reference_motion(HUM.skeleton, "walk", 6.0, seed=seed)
    _, V = P.sequence_positions(HUM, [m])
    # planted soles move only by FK roundoff
    assert ground_penetration(V[0])[0] == 0.0
    assert foot_sliding(V[0])[0] < 1e-9
    assert np.all(m.root_translation[:, 2] > 0.5)


def test_corrupt_zero_spec_is_exact():
    m = generate_reference_motion(TOY.skeleton, "sinusoid", 2.0, seed=1)
    est = corrupt(m, TOY.camera, CorruptionSpec())
    assert np.array_equal(est.joint_angles, m.joint_angles)
    assert np.array_equal(est.root_translation, m.root_translation)
    assert np.array_equal(est.keypoints, project(TOY.camera, m.positions()))
    assert np.all(est.confidences == 1.0)
    assert est.provenance == "kinematic-estimate"


def test_corrupt_statistics():
    m = generate_reference_motion(HUM.skeleton, "walk", 20.0, seed=1)
    est, noise = corrupt(m, HUM.camera, CorruptionSpec(angle_std=0.1, keypoint_std=2.0, seed=3), return_noise=True)
    n = noise["angles"]
    assert n.size >= 10_000
    assert abs(n.std() - 0.1) < 0.005
    assert np.allclose(est.joint_angles - m.joint_angles, n)
    # confidence is a decreasing function of the injected pixel noise and 1 at zero noise
    r = np.linalg.norm(noise["keypoints"], axis=-1).ravel()
    c = est.confidences.ravel()
    o = np.argsort(r)
    assert np.all(np.diff(c[o]) <= 1e-15)
    assert np.all((c > 0) & (c <= 1))
    with pytest.raises(InvalidInputError):
        CorruptionSpec(angle_std=-1.0)


def test_motion_roundtrip(tmp_path):
    gt, est = P.make_pairs(HUM, 0, num_sequences=1, duration=1.0)[0]
    for m in (gt, est, with_keypoints(gt, HUM.camera)):
        save_motion(tmp_path / "m.json", m)
        assert load_motion(tmp_path / "m.json").equals(m)


def test_motion_file_errors(tmp_path):
    m = generate_reference_motion(TOY.skeleton, "sinusoid", 0.5, seed=0)
    d = motion_to_dict(m)
    d["joint_angles"] = [row[:2] for row in d["joint_angles"]]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    with pytest.raises(ParseError, match="joint_angles"):
        load_motion(p)
    d = motion_to_dict(m)
    d["version"] = 3
    p.write_text(json.dumps(d))
    with pytest.raises(UnsupportedVersionError):
        load_motion(p)
    p.write_text('{\n"format": "motion",\n oops}')
    with pytest.raises(ParseError, match="line 3"):
        load_motion(p)
    with pytest.raises(InvalidInputError):
        MotionSequence(TOY.skeleton, np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), np.zeros((2, 2)))


def test_run_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "toy", "seed": 3, "ppo": {"epochs": 2}, "corruption": {"angle_std": 0.1}}))
    cfg = load_config(p)
    pr = cfg.build_preset()
    assert cfg.seed == 3 and pr.ppo["epochs"] == 2 and pr.ppo["num_envs"] == TOY.ppo["num_envs"]
    assert pr.corruption["angle_std"] == 0.1
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    p.write_text(json.dumps({"sed": 1}))
    with pytest.raises(ParseError, match="sed"):
        load_config(p)
    p.write_text(json.dumps({"ppo": 3}))
    with pytest.raises(ParseError):
        load_config(p)
    p.write_text('{"seed": 1,\n')
    with pytest.raises(ParseError, match="line"):
        load_config(p)
    with pytest.raises(InvalidInputError):
        RunConfig(preset="mocap")
