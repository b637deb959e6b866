"""Automatic character creation from a skinned mesh.

Vertices are assigned to the bone with the largest skinning weight, each bone
gets the convex hull of its vertices as geometry, and mass, center of mass
and inertia follow from the hull at constant density.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateHullError, InvalidInputError, ParseError, UnsupportedVersionError
from .kinematics import Pose, Skeleton, fk_batch

MESH_FORMAT_VERSION = 1
DEFAULT_DENSITY = 1000.0


@dataclass
class SkinnedMesh:
    vertices: np.ndarray  # (V, 3), rest pose, skeleton frame
    weights: np.ndarray  # (V, B)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.vertices.shape[0]:
            raise InvalidInputError("weights must be a V x B matrix")
        if np.any(self.weights < 0):
            raise InvalidInputError("skinning weights must be non-negative")
        if self.weights.size and np.abs(self.weights.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidInputError("every skinning weight row must sum to 1")


@dataclass
class Hull:
    points: np.ndarray  # hull vertices
    faces: np.ndarray  # (F, 3) indices into points, outward oriented

    @property
    def volume(self) -> float:
        return hull_volume_divergence(self)


@dataclass
class BoneBody:
    hull_vertices: np.ndarray  # (K, 3), bone frame
    mass: float
    com: np.ndarray  # bone frame
    inertia: np.ndarray  # about the COM, bone axes
    merged: bool = False  # geometry folded into the parent bone


@dataclass
class GainConfig:
    kp_per_kg: float = 60.0
    kd_per_kg: float = 6.0
    kp_min: float = 5.0
    kd_min: float = 0.5
    torque_limit: float = 200.0


@dataclass
class CharacterModel:
    skeleton: Skeleton
    bones: list[BoneBody]
    kp: np.ndarray
    kd: np.ndarray
    torque_limits: np.ndarray
    density: float = DEFAULT_DENSITY
    contact_bones: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        nr = self.skeleton.num_nonroot_dof
        for name in ("kp", "kd", "torque_limits"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if v.shape[0] != nr:
                raise InvalidInputError(f"{name} needs one entry per non-root dof ({nr})")
            if np.any(v <= 0):
                raise InvalidInputError(f"{name} entries must be positive")
            setattr(self, name, v)
        if len(self.bones) != self.skeleton.num_joints:
            raise InvalidInputError("one bone body per joint required")
        for k, b in enumerate(self.bones):
            if b.merged:
                continue
            if not b.mass > 0:
                raise InvalidInputError(f"bone {k} has non-positive mass")
            if np.abs(b.inertia - b.inertia.T).max() > 1e-9 * max(1.0, np.abs(b.inertia).max()):
                raise InvalidInputError(f"bone {k} inertia is not symmetric")
            if np.linalg.eigvalsh(b.inertia).min() <= 0:
                raise InvalidInputError(f"bone {k} inertia is not positive definite")

    @property
    def total_mass(self) -> float:
        return float(sum(b.mass for b in self.bones))

    def subtree_masses(self) -> np.ndarray:
        sk = self.skeleton
        m = np.array([b.mass for b in self.bones])
        return sk.descendants.astype(float) @ m

    def dump(self) -> str:
        lines = [f"# character: {self.skeleton.num_joints} bones, total mass {self.total_mass:.4f} kg, "
                 f"density {self.density:g} kg/m^3",
                 f"{'bone':<14}{'mass[kg]':>12}{'com_x':>10}{'com_y':>10}{'com_z':>10}"
                 f"{'Ixx':>12}{'Iyy':>12}{'Izz':>12}{'Ixy':>12}{'Ixz':>12}{'Iyz':>12}  note"]
        for name, b in zip(self.skeleton.names, self.bones):
            I = b.inertia
            lines.append(f"{name:<14}{b.mass:>12.5f}{b.com[0]:>10.4f}{b.com[1]:>10.4f}{b.com[2]:>10.4f}"
                         f"{I[0, 0]:>12.5g}{I[1, 1]:>12.5g}{I[2, 2]:>12.5g}{I[0, 1]:>12.4g}{I[0, 2]:>12.4g}"
                         f"{I[1, 2]:>12.4g}  {'merged' if b.merged else ''}")
        return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# association and hulls


def associate_vertices(W: np.ndarray) -> np.ndarray:
    """Bone index with the largest skinning weight per vertex; ties go to the lowest index."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.size == 0:
        raise InvalidInputError("skinning weight matrix is empty")
    return np.argmax(W, axis=1)


def convex_hull(points: np.ndarray) -> Hull:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] < 4:
        raise DegenerateHullError(f"{points.shape[0]} points cannot span a 3D hull")
    centered = points - points.mean(axis=0)
    scale = max(np.abs(centered).max(), 1e-300)
    if np.linalg.matrix_rank(centered / scale, tol=1e-9) < 3:
        raise DegenerateHullError("points are coplanar or collinear")
    try:
        qh = ConvexHull(points)
    except QhullError as exc:
        raise DegenerateHullError(str(exc)) from exc
    used = np.unique(qh.simplices)
    remap = -np.ones(points.shape[0], dtype=int)
    remap[used] = np.arange(used.size)
    pts = points[used]
    faces = remap[qh.simplices]
    # orient every triangle outward relative to the interior centroid
    inside = pts.mean(axis=0)
    a, b, c = pts[faces[:, 0]], pts[faces[:, 1]], pts[faces[:, 2]]
    n = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", n, a - inside) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    hull = Hull(pts, faces)
    if hull_volume_divergence(hull) <= 1e-9:
        raise DegenerateHullError("hull volume below 1e-9 m^3")
    return hull


def hull_volume_divergence(hull: Hull) -> float:
    """Volume by the divergence theorem: (1/3) sum over faces of area * (n . x_face)."""
    p = hull.points
    a, b, c = p[hull.faces[:, 0]], p[hull.faces[:, 1]], p[hull.faces[:, 2]]
    cross = np.cross(b - a, c - a)  # = 2 * area * n
    return float(np.einsum("ij,ij->", cross, (a + b + c) / 3.0) / 6.0)


def hull_volume_tetra(hull: Hull) -> float:
    """Volume as a sum of tetrahedra fanned from the vertex centroid."""
    p = hull.points
    o = p.mean(axis=0)
    a, b, c = p[hull.faces[:, 0]] - o, p[hull.faces[:, 1]] - o, p[hull.faces[:, 2]] - o
    return float(np.abs(np.einsum("ij,ij->i", a, np.cross(b, c))).sum() / 6.0)


_CANONICAL = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 120.0


def compute_mass_properties(hull: Hull, density: float = DEFAULT_DENSITY) -> tuple[float, np.ndarray, np.ndarray]:
    """Mass, center of mass and inertia about the center of mass of a solid hull.

    Exact integrals over tetrahedra fanned from an interior point."""
    if not isinstance(hull, Hull):
        raise InvalidInputError("expected a Hull")
    if density <= 0:
        raise InvalidInputError("density must be positive")
    p = hull.points
    o = p.mean(axis=0)
    A = np.stack([p[hull.faces[:, 0]] - o, p[hull.faces[:, 1]] - o, p[hull.faces[:, 2]] - o], axis=-1)
    det = np.linalg.det(A)
    vol = det.sum() / 6.0
    if not vol > 1e-9:
        raise InvalidInputError("degenerate hull: non-positive volume")
    centroid_rel = (det[:, None] * A.sum(axis=-1) / 24.0).sum(axis=0) / vol
    C = np.einsum("t,tij,jk,tlk->il", det, A, _CANONICAL, A)  # second moment about o
    com_rel = centroid_rel
    C_com = C - vol * np.outer(com_rel, com_rel)
    I = density * (np.trace(C_com) * np.eye(3) - C_com)
    I = 0.5 * (I + I.T)
    return float(density * vol), o + com_rel, I


def build_bone_geometry(mesh: SkinnedMesh, A: np.ndarray, skeleton: Skeleton,
                        merge_degenerate: bool = True) -> list[Hull | None]:
    """Per-bone hulls in the bone's rest frame. A degenerate bone folds its
    vertices into its parent (repeatedly, toward the root); such bones get None."""
    if mesh.weights.shape[1] != skeleton.num_joints:
        raise InvalidInputError("mesh bone count does not match skeleton joint count")
    A = np.asarray(A, dtype=int)
    rest_X, _ = fk_batch(skeleton, np.zeros((1, 3)), np.eye(3)[None], np.zeros((1, skeleton.num_nonroot_dof)))
    rest_X = rest_X[0]
    groups = [list(mesh.vertices[A == k]) for k in range(skeleton.num_joints)]
    hulls: list[Hull | None] = [None] * skeleton.num_joints
    for k in reversed(range(skeleton.num_joints)):
        pts = np.array(groups[k]).reshape(-1, 3)
        try:
            hulls[k] = convex_hull(pts - rest_X[k])
        except DegenerateHullError:
            if not merge_degenerate or k == 0:
                raise
            groups[skeleton.parents[k]].extend(groups[k])
            groups[k] = []
    return hulls


def default_gains(skeleton: Skeleton, subtree_mass: np.ndarray, gains: GainConfig):
    kp = np.empty(skeleton.num_nonroot_dof)
    kd = np.empty(skeleton.num_nonroot_dof)
    for k in range(1, skeleton.num_joints):
        sl = skeleton.dof_slices[k]
        kp[sl] = max(gains.kp_per_kg * subtree_mass[k], gains.kp_min)
        kd[sl] = max(gains.kd_per_kg * subtree_mass[k], gains.kd_min)
    return kp, kd


def build_character(mesh: SkinnedMesh, skeleton: Skeleton, density: float = DEFAULT_DENSITY,
                    gains: GainConfig | None = None, contact_bones=None) -> CharacterModel:
    gains = gains or GainConfig()
    A = associate_vertices(mesh.weights)
    hulls = build_bone_geometry(mesh, A, skeleton)
    bones = []
    for k, h in enumerate(hulls):
        if h is None:
            bones.append(BoneBody(np.zeros((0, 3)), 0.0, np.zeros(3), np.zeros((3, 3)), merged=True))
            continue
        m, c, I = compute_mass_properties(h, density)
        if not m > 0:
            raise InvalidInputError(f"bone {skeleton.names[k]!r} ended with zero mass")
        bones.append(BoneBody(h.points, m, c, I))
    masses = np.array([b.mass for b in bones])
    sub = skeleton.descendants.astype(float) @ masses
    kp, kd = default_gains(skeleton, sub, gains)
    limits = np.full(skeleton.num_nonroot_dof, gains.torque_limit)
    if contact_bones is None:
        contact_bones = tuple(k for k, b in enumerate(bones) if not b.merged)
    return CharacterModel(skeleton, bones, kp, kd, limits, density, tuple(contact_bones))


def bone_world_vertices(character: CharacterModel, X: np.ndarray, Rw: np.ndarray, bones=None) -> np.ndarray:
    """World positions of hull vertices of the selected bones, (B, K, 3)."""
    bones = character.contact_bones if bones is None else bones
    out = [X[:, k, None, :] + character.bones[k].hull_vertices @ np.swapaxes(Rw[:, k], -1, -2)
           for k in bones if character.bones[k].hull_vertices.shape[0]]
    if not out:
        return np.zeros((X.shape[0], 0, 3))
    return np.concatenate(out, axis=1)


def pose_vertices(character: CharacterModel, poses: list[Pose], bones=None) -> np.ndarray:
    from . import rotations as rot
    t = np.array([p.root_translation for p in poses])
    R = rot.quat_to_mat(np.array([p.root_orientation for p in poses]))
    a = np.array([p.joint_angles for p in poses])
    X, Rw = fk_batch(character.skeleton, t, R, a)
    return bone_world_vertices(character, X, Rw, bones)


# ----------------------------------------------------------------------------
# synthetic meshes and files


def box_vertices(center, size, subdiv: int = 1) -> np.ndarray:
    """Corner (and optional surface grid) points of an axis-aligned box."""
    c = np.asarray(center, dtype=float)
    s = np.asarray(size, dtype=float)
    g = np.linspace(-0.5, 0.5, subdiv + 1)
    pts = np.array([[x, y, z] for x in g for y in g for z in g])
    on_surface = np.any(np.isclose(np.abs(pts), 0.5), axis=1)
    return c + pts[on_surface] * s


def box_mesh(skeleton: Skeleton, boxes: dict[int, tuple], subdiv: int = 1) -> SkinnedMesh:
    """Skinned mesh of one box per bone; ``boxes[k] = (center, size)`` in bone k's
    rest frame. Weights are one-hot with a small spill onto the parent so the
    association step has real work to do."""
    rest_X, _ = fk_batch(skeleton, np.zeros((1, 3)), np.eye(3)[None], np.zeros((1, skeleton.num_nonroot_dof)))
    verts, rows = [], []
    B = skeleton.num_joints
    for k, (center, size) in sorted(boxes.items()):
        v = box_vertices(center, size, subdiv) + rest_X[0, k]
        w = np.zeros((v.shape[0], B))
        w[:, k] = 1.0
        if k > 0:
            w[:, k] = 0.8
            w[:, skeleton.parents[k]] = 0.2
        verts.append(v)
        rows.append(w)
    return SkinnedMesh(np.concatenate(verts), np.concatenate(rows))


def save_mesh(path, mesh: SkinnedMesh, sparse: bool = True) -> None:
    data = {"format": "mesh", "version": MESH_FORMAT_VERSION, "vertices": mesh.vertices.tolist(),
            "num_bones": int(mesh.weights.shape[1])}
    if sparse:
        i, j = np.nonzero(mesh.weights)
        data["weights_sparse"] = [[int(a), int(b), float(mesh.weights[a, b])] for a, b in zip(i, j)]
    else:
        data["weights"] = mesh.weights.tolist()
    Path(path).write_text(json.dumps(data))


def load_mesh(path) -> SkinnedMesh:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, line=exc.lineno) from exc
    if data.get("format") != "mesh":
        raise ParseError("not a mesh file", path, "format")
    if data.get("version") != MESH_FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported mesh version {data.get('version')!r}", path, "version")
    try:
        V = np.array(data["vertices"], dtype=float)
        if "weights" in data:
            W = np.array(data["weights"], dtype=float)
        else:
            W = np.zeros((V.shape[0], int(data["num_bones"])))
            for i, j, w in data["weights_sparse"]:
                W[int(i), int(j)] = float(w)
        return SkinnedMesh(V, W)
    except (KeyError, ValueError, IndexError) as exc:
        raise ParseError(str(exc), path, "weights") from exc
