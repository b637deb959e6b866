"""Pose and physical-plausibility metrics plus the refinement-iteration sweep.

Positions come in meters and leave in millimeters (Accel in mm/frame^2).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInputError
from .kinematics import fk_batch

MM = 1000.0


def _check_pair(X_pred, X_gt):
    X_pred = np.asarray(X_pred, dtype=float)
    X_gt = np.asarray(X_gt, dtype=float)
    if X_pred.shape != X_gt.shape or X_pred.ndim != 3 or X_pred.shape[-1] != 3:
        raise InvalidInputError(f"expected matching (T, J, 3) arrays, got {X_pred.shape} and {X_gt.shape}")
    return X_pred, X_gt


def _root_centered(X, root: int = 0):
    return X - X[:, root:root + 1]


def mpjpe_frames(X_pred, X_gt, root: int = 0) -> np.ndarray:
    X_pred, X_gt = _check_pair(X_pred, X_gt)
    d = _root_centered(X_pred, root) - _root_centered(X_gt, root)
    return np.linalg.norm(d, axis=-1).mean(axis=-1) * MM


def mpjpe(X_pred, X_gt, root: int = 0) -> float:
    return float(mpjpe_frames(X_pred, X_gt, root).mean())


def similarity_align(A: np.ndarray, B: np.ndarray):
    """Scale s, rotation Q, translation c minimizing ||s A Q^T + c - B||^2
    (Umeyama). Returns the aligned copy of A."""
    mu_a, mu_b = A.mean(0), B.mean(0)
    A0, B0 = A - mu_a, B - mu_b
    U, S, Vt = np.linalg.svd(B0.T @ A0)
    D = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        D[-1] = -1.0
    Q = (U * D) @ Vt
    var_a = np.sum(A0 * A0)
    s = np.sum(S * D) / var_a
    return s * A0 @ Q.T + mu_b


def _degenerate(P: np.ndarray, tol: float = 1e-9) -> bool:
    P0 = P - P.mean(0)
    sv = np.linalg.svd(P0, compute_uv=False)
    return sv[0] <= tol or sv[1] <= tol * max(sv[0], 1.0)


def pa_mpjpe_frames(X_pred, X_gt, root_candidate: bool = True):
    """Per-frame errors after similarity alignment; degenerate (collinear) frames
    are NaN and listed in the second return value.

    The closed-form fit minimizes squared distance while the reported error is
    the mean distance, so on a small fraction of frames it scores worse than the
    plain root-translation alignment. With ``root_candidate`` that alignment is
    scored too and the smaller error is kept; turn it off for the bare
    closed-form number."""
    X_pred, X_gt = _check_pair(X_pred, X_gt)
    if X_pred.shape[1] < 3:
        raise InvalidInputError("Procrustes alignment needs at least 3 joints")
    out = np.full(X_pred.shape[0], np.nan)
    bad = []
    for i, (P, G) in enumerate(zip(X_pred, X_gt)):
        if _degenerate(P) or _degenerate(G):
            bad.append(i)
            continue
        out[i] = np.linalg.norm(similarity_align(P, G) - G, axis=-1).mean() * MM
    if root_candidate:
        out = np.fmin(out, np.where(np.isnan(out), np.nan, mpjpe_frames(X_pred, X_gt)))
    return out, bad


def pa_mpjpe(X_pred, X_gt, root_candidate: bool = True) -> float:
    f, _ = pa_mpjpe_frames(X_pred, X_gt, root_candidate)
    if np.all(np.isnan(f)):
        return float("nan")
    return float(np.nanmean(f))


def accel_frames(X_pred, X_gt, root: int = 0) -> np.ndarray:
    X_pred, X_gt = _check_pair(X_pred, X_gt)
    if X_pred.shape[0] < 3:
        raise InvalidInputError("acceleration error needs at least 3 frames")
    P, G = _root_centered(X_pred, root), _root_centered(X_gt, root)
    ap = P[:-2] - 2.0 * P[1:-1] + P[2:]
    ag = G[:-2] - 2.0 * G[1:-1] + G[2:]
    # norm per joint, then mean over joints
    return np.linalg.norm(ap - ag, axis=-1).mean(axis=-1) * MM


def accel_error(X_pred, X_gt, root: int = 0) -> float:
    return float(accel_frames(X_pred, X_gt, root).mean())


def foot_sliding(vertices, ground_height: float = 0.0, threshold: float = 0.005):
    """Mean horizontal displacement (mm) of vertices in contact in two adjacent
    frames. Returns (value, per-frame series, annotation)."""
    V = np.asarray(vertices, dtype=float)
    if V.ndim != 3 or V.shape[-1] != 3:
        raise InvalidInputError("vertex trajectories must be (T, V, 3)")
    contact = V[..., 2] - ground_height <= threshold
    both = contact[:-1] & contact[1:]
    disp = np.linalg.norm(V[1:, :, :2] - V[:-1, :, :2], axis=-1) * MM
    series = np.array([disp[t][both[t]].mean() if both[t].any() else 0.0 for t in range(len(both))])
    if not both.any():
        return 0.0, series, "no-contact"
    return float(disp[both].mean()), series, ""


def ground_penetration(vertices, ground_height: float = 0.0):
    """Mean depth (mm) over below-ground vertex-frames. Returns (value, per-frame series)."""
    V = np.asarray(vertices, dtype=float)
    if V.ndim != 3 or V.shape[-1] != 3:
        raise InvalidInputError("vertex trajectories must be (T, V, 3)")
    depth = ground_height - V[..., 2]
    below = depth > 0
    series = np.array([depth[t][below[t]].mean() * MM if below[t].any() else 0.0 for t in range(V.shape[0])])
    if not below.any():
        return 0.0, series
    return float(depth[below].mean() * MM), series


@dataclass
class MetricsReport:
    mpjpe: float
    pa_mpjpe: float
    accel: float
    fs: float
    gp: float
    series: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"mpjpe": self.mpjpe, "pa_mpjpe": self.pa_mpjpe, "accel": self.accel, "fs": self.fs,
                "gp": self.gp, "notes": list(self.notes)}

    def to_json(self, name: str = "") -> str:
        d = {"sequence": name, **self.summary()}
        d["series"] = {k: [float(x) for x in v] for k, v in self.series.items()}
        return json.dumps(d, sort_keys=True)

    def text(self, name: str = "") -> str:
        head = f"[{name}] " if name else ""
        return (f"{head}MPJPE {self.mpjpe:.2f} mm | PA-MPJPE {self.pa_mpjpe:.2f} mm | Accel {self.accel:.2f} "
                f"mm/frame^2 | FS {self.fs:.2f} mm | GP {self.gp:.2f} mm"
                + (f"  ({'; '.join(self.notes)})" if self.notes else ""))


def evaluate(X_pred, X_gt, verts_pred=None, ground_height: float = 0.0, threshold: float = 0.005) -> MetricsReport:
    """Full report. FS/GP use the predicted contact-marker vertices when given."""
    m = mpjpe_frames(X_pred, X_gt)
    pa, bad = pa_mpjpe_frames(X_pred, X_gt)
    notes = []
    if bad:
        notes.append(f"{len(bad)} degenerate frame(s) excluded from PA-MPJPE")
    acc = accel_frames(X_pred, X_gt) if len(m) >= 3 else np.zeros(0)
    fs = gp = 0.0
    fs_s = gp_s = np.zeros(0)
    if verts_pred is not None and np.asarray(verts_pred).shape[1] > 0:
        fs, fs_s, ann = foot_sliding(verts_pred, ground_height, threshold)
        if ann:
            notes.append(ann)
        gp, gp_s = ground_penetration(verts_pred, ground_height)
    return MetricsReport(float(m.mean()), float(np.nanmean(pa)) if not np.all(np.isnan(pa)) else float("nan"),
                         float(acc.mean()) if acc.size else 0.0, fs, gp,
                         {"mpjpe": m, "pa_mpjpe": pa, "accel": acc, "fs": fs_s, "gp": gp_s}, notes)


def ablation_sweep(refiner, camera, data, skeleton, counts=range(6)):
    """Refined-pose error against ground truth for each refinement count.
    Returns rows of {n, mpjpe, pa_mpjpe}."""
    gt_X, _ = fk_batch(skeleton, data.gt_t, data.gt_R, data.gt_a)
    rows = []
    for n in counts:
        t, R, a, _, _ = refiner.run(camera, data.kt, data.kR, data.ka, data.kp, data.conf, int(n))
        X, _ = fk_batch(skeleton, t, R, a)
        # every sample is its own one-frame sequence
        rows.append({"n": int(n), "mpjpe": mpjpe(X, gt_X), "pa_mpjpe": pa_mpjpe(X, gt_X)})
    return rows


def sweep_table(rows) -> str:
    lines = ["n  mpjpe[mm]  pa_mpjpe[mm]"]
    lines += [f"{r['n']:<2} {r['mpjpe']:>9.3f} {r['pa_mpjpe']:>13.3f}" for r in rows]
    return "\n".join(lines) + "\n"
