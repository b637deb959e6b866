import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain2
from phystrack.character import (GainConfig, SkinnedMesh, associate_vertices, box_mesh, box_vertices,
                                 build_bone_geometry, build_character, compute_mass_properties, convex_hull,
                                 hull_volume_divergence, hull_volume_tetra, load_mesh, save_mesh)
from phystrack.errors import DegenerateHullError, InvalidInputError, ParseError, UnsupportedVersionError
from phystrack.kinematics import FREE, HINGE, Joint, Skeleton

CUBE = box_vertices((0.5, 0.5, 0.5), (1.0, 1.0, 1.0))


def test_associate_examples():
    assert associate_vertices(np.array([[0, 1.0, 0]]))[0] == 1
    assert associate_vertices(np.array([[0.5, 0.5, 0]]))[0] == 0
    W = np.kron(np.eye(3), np.ones((2, 1)))
    assert list(associate_vertices(W)) == [0, 0, 1, 1, 2, 2]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_associate_row_scaling_invariance(seed):
    rng = np.random.default_rng(seed)
    W = rng.uniform(0, 1, (20, 4))
    s = rng.uniform(0.1, 10, (20, 1))
    assert np.array_equal(associate_vertices(W), associate_vertices(W * s))


def test_cube_hull():
    h = convex_hull(CUBE)
    assert h.points.shape[0] == 8
    assert h.volume == pytest.approx(1.0, rel=1e-12)
    h2 = convex_hull(np.vstack([CUBE, [[0.3, 0.6, 0.5]]]))
    assert {tuple(p) for p in h2.points} == {tuple(p) for p in h.points}
    assert h2.volume == pytest.approx(1.0, rel=1e-12)


def test_degenerate_hulls():
    with pytest.raises(DegenerateHullError):
        convex_hull(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]))
    with pytest.raises(DegenerateHullError):
        convex_hull(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]]))


def test_cube_mass_properties():
    m, c, I = compute_mass_properties(convex_hull(CUBE), 1000.0)
    assert m == pytest.approx(1000.0)
    assert np.allclose(c, 0.5)
    assert np.allclose(I, np.eye(3) * 1000.0 / 6.0)


def test_box_inertia_analytic():
    size = np.array([0.2, 0.5, 1.3])
    m, c, I = compute_mass_properties(convex_hull(box_vertices((1, 2, 3), size)), 700.0)
    mass = 700.0 * size.prod()
    assert m == pytest.approx(mass)
    assert np.allclose(c, [1, 2, 3])
    a, b, d = size
    assert np.allclose(np.diag(I), mass / 12 * np.array([b * b + d * d, a * a + d * d, a * a + b * b]))
    assert np.allclose(I - np.diag(np.diag(I)), 0.0, atol=1e-12)


def test_mass_scaling_and_translation(rng):
    pts = rng.standard_normal((30, 3))
    m, c, _ = compute_mass_properties(convex_hull(pts))
    m2, _, _ = compute_mass_properties(convex_hull(pts * 1.7))
    assert m2 == pytest.approx(m * 1.7**3)
    shift = np.array([3.0, -1.0, 0.5])
    m3, c3, _ = compute_mass_properties(convex_hull(pts + shift))
    assert m3 == pytest.approx(m)
    assert np.allclose(c3, c + shift)


def test_volume_two_ways(rng):
    for _ in range(50):
        pts = rng.standard_normal((rng.integers(4, 60), 3)) * rng.uniform(0.1, 3.0, 3)
        h = convex_hull(pts)
        assert hull_volume_divergence(h) == pytest.approx(hull_volume_tetra(h), rel=1e-9)


def _two_bone():
    sk = Skeleton([Joint("root", None, FREE), Joint("b", 0, HINGE, (3.0, 0, 0), (0, 0, 1.0))])
    V = np.vstack([box_vertices((0, 0, 0), (1, 1, 1)), box_vertices((3, 0, 0), (1, 1, 1))])
    W = np.zeros((16, 2))
    W[:8, 0] = 1.0
    W[8:, 1] = 1.0
    return sk, SkinnedMesh(V, W)


def test_two_cube_character():
    sk, mesh = _two_bone()
    ch = build_character(mesh, sk, 1000.0)
    assert [b.mass for b in ch.bones] == pytest.approx([1000.0, 1000.0])
    # bone-local geometry: second cube centered on its joint
    assert np.allclose(ch.bones[1].com, 0.0)
    assert ch.total_mass == pytest.approx(1000.0 * sum(convex_hull(mesh.vertices[A]).volume
                                                       for A in (slice(0, 8), slice(8, 16))))


def test_degenerate_bone_merges_into_parent():
    sk = chain2()
    V = np.vstack([box_vertices((0.5, 0, 0), (1, 0.2, 0.2)), [[2.0, 0, 0], [2.1, 0, 0], [2.0, 0.1, 0]]])
    W = np.zeros((V.shape[0], 3))
    W[:8, 0] = 1.0
    W[8:, 2] = 1.0
    # bone 1 owns nothing, bone 2 has 3 points
    with pytest.raises(DegenerateHullError):
        build_bone_geometry(SkinnedMesh(V[:8], W[:8]), associate_vertices(W[:8]), sk, merge_degenerate=False)
    hulls = build_bone_geometry(SkinnedMesh(V, W), associate_vertices(W), sk)
    assert hulls[1] is None and hulls[2] is None
    ch = build_character(SkinnedMesh(V, W), sk, 1000.0)
    assert ch.bones[2].merged and ch.bones[1].merged
    assert ch.total_mass == pytest.approx(1000.0 * convex_hull(V).volume)


def test_total_mass_additivity():
    from phystrack.presets import humanoid_character
    ch = humanoid_character()
    vol = sum(convex_hull(b.hull_vertices).volume for b in ch.bones if not b.merged)
    assert ch.total_mass == pytest.approx(ch.density * vol, rel=1e-9)


def test_default_gains_follow_subtree_mass():
    sk, mesh = _two_bone()
    ch = build_character(mesh, sk, 1000.0, GainConfig(kp_per_kg=2.0, kd_per_kg=0.5))
    assert ch.kp[0] == pytest.approx(2000.0)
    assert ch.kd[0] == pytest.approx(500.0)


def test_mesh_validation():
    with pytest.raises(InvalidInputError):
        SkinnedMesh(np.zeros((2, 3)), np.array([[0.5, 0.2], [1.0, 0.0]]))


@pytest.mark.parametrize("sparse", [True, False])
def test_mesh_roundtrip(tmp_path, sparse):
    sk = chain2()
    mesh = box_mesh(sk, {0: ((0, 0, 0), (0.2, 0.2, 0.2)), 1: ((0.5, 0, 0), (1, 0.1, 0.1)),
                         2: ((0.5, 0, 0), (1, 0.1, 0.1))})
    save_mesh(tmp_path / "m.json", mesh, sparse=sparse)
    back = load_mesh(tmp_path / "m.json")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.weights, mesh.weights)


def test_mesh_file_errors(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"format": "mesh", "version": 7}')
    with pytest.raises(UnsupportedVersionError):
        load_mesh(p)
    p.write_text('{"format": "mesh",\n "version": ')
    with pytest.raises(ParseError, match="line 2"):
        load_mesh(p)
