"""Mesh evaluation: ray-cast depth rendering, render-and-mask trimming, 3D metrics.

Trimming keeps only the parts of a predicted mesh that fall where the
ground-truth mesh is visible from the evaluation cameras. Both meshes are
rendered to depth, predicted depth is dropped wherever ground truth has no
hit, and the remaining depth is re-fused and re-meshed with the same TSDF
settings as ground-truth generation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import Aabb, Intrinsics, Pose
from .projective import MAX_DEPTH
from .surface import TriMesh, marching_cubes_dense
from .tsdf import TRUNCATION, TsdfVolume, integrate_depth

RAY_EPS = 1e-9
DEFAULT_TAU = 0.05
POINTS_PER_M2 = 1e4  # one sample per square centimetre
_CHUNK = 1 << 21


@dataclass
class MetricReport:
    acc: float
    comp: float
    prec: float
    recall: float
    fscore: float
    tau: float
    n_pred_points: int
    n_gt_points: int

    def to_json(self) -> str:
        # JSON has no infinity; undefined distances are written as null
        d = {k: (v if not (isinstance(v, float) and not math.isfinite(v)) else None)
             for k, v in asdict(self).items()}
        return json.dumps(d, sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> MetricReport:
        d = json.loads(text)
        for k in ("acc", "comp"):
            if d[k] is None:
                d[k] = math.inf
        return cls(**d)


def fscore(prec: float, recall: float) -> float:
    return 2 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0


# -- rendering ----------------------------------------------------------------------------

def _ray_hits(tri: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Moller-Trumbore from the camera origin; ``dirs`` have unit z so ``t`` is the z depth."""
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = -v0
    a = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    b = np.einsum("ij,ij->i", dirs, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (a >= -RAY_EPS) & (b >= -RAY_EPS) & (a + b <= 1 + RAY_EPS) & (t > RAY_EPS)
    return hit, t


def render_depth(mesh: TriMesh, K: Intrinsics, pose: Pose, size: tuple[int, int] | None = None) -> np.ndarray:
    """Z-depth of the nearest surface hit at every pixel centre; 0 where the ray misses.

    Each triangle is tested only against the pixels inside its projected
    bounding box (all pixels if it crosses the camera plane).
    """
    H, W = (K.height, K.width) if size is None else size
    depth = np.full(H * W, np.inf)
    if mesh.is_empty:
        return np.zeros((H, W))
    cam = pose.world_to_camera(mesh.vertices)
    tris = cam[mesh.triangles]  # (m, 3, 3)
    z = tris[..., 2]
    keep = np.any(z > RAY_EPS, axis=1)
    tris, z = tris[keep], z[keep]
    front = np.all(z > RAY_EPS, axis=1)

    u0 = np.zeros(len(tris), np.int64)
    u1 = np.full(len(tris), W - 1, np.int64)
    v0 = np.zeros(len(tris), np.int64)
    v1 = np.full(len(tris), H - 1, np.int64)
    if np.any(front):
        tf = tris[front]
        u = K.fx * tf[..., 0] / tf[..., 2] + K.cx
        v = K.fy * tf[..., 1] / tf[..., 2] + K.cy
        u0[front] = np.ceil(u.min(axis=1) - 1e-6)
        u1[front] = np.floor(u.max(axis=1) + 1e-6)
        v0[front] = np.ceil(v.min(axis=1) - 1e-6)
        v1[front] = np.floor(v.max(axis=1) + 1e-6)
    u0, v0 = np.maximum(u0, 0), np.maximum(v0, 0)
    u1, v1 = np.minimum(u1, W - 1), np.minimum(v1, H - 1)
    nu, nv = u1 - u0 + 1, v1 - v0 + 1
    valid = (nu > 0) & (nv > 0)
    tris, u0, v0, nu, nv = tris[valid], u0[valid], v0[valid], nu[valid], nv[valid]
    counts = nu * nv
    ends = np.cumsum(counts)
    start = 0
    while start < len(tris):
        base = ends[start - 1] if start else 0
        stop = max(int(np.searchsorted(ends, base + _CHUNK, side="right")), start + 1)
        sl = slice(start, stop)
        c = counts[sl]
        tri_id = np.repeat(np.arange(start, stop), c)
        local = np.arange(int(c.sum())) - np.repeat(np.cumsum(c) - c, c)
        pu = u0[tri_id] + local % nu[tri_id]
        pv = v0[tri_id] + local // nu[tri_id]
        dirs = np.stack([(pu - K.cx) / K.fx, (pv - K.cy) / K.fy, np.ones(len(pu))], axis=1)
        hit, t = _ray_hits(tris[tri_id], dirs)
        np.minimum.at(depth, pv[hit] * W + pu[hit], t[hit])
        start = stop
    depth[~np.isfinite(depth)] = 0.0
    return depth.reshape(H, W)


# -- trimming ------------------------------------------------------------------------------

def trim_mesh(pred: TriMesh, gt: TriMesh, cameras: Sequence[tuple[Intrinsics, Pose]],
              trunc: float = TRUNCATION, max_depth: float = MAX_DEPTH, bounds: Aabb | None = None) -> TriMesh:
    """Restrict ``pred`` to regions where ``gt`` is observed from ``cameras``, then re-mesh.

    ``bounds`` defaults to the joint bounding box of both meshes padded by the
    truncation distance.
    """
    if len(cameras) == 0 or pred.is_empty:
        return TriMesh.empty()
    if bounds is None:
        pts = pred.vertices if gt.is_empty else np.concatenate([pred.vertices, gt.vertices])
        bounds = Aabb(pts.min(axis=0) - 2 * trunc, pts.max(axis=0) + 2 * trunc)
    vol = TsdfVolume.covering(bounds, trunc)
    for K, pose in cameras:
        d_gt = render_depth(gt, K, pose)
        d_pred = render_depth(pred, K, pose)
        d_pred[d_gt <= 0] = 0.0
        integrate_depth(vol, d_pred, K, pose, max_depth)
    return marching_cubes_dense(vol.tsdf, vol.observed, vol.origin_key, vol.level)


# -- metrics ----------------------------------------------------------------------------------

def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every ``src`` point to its nearest ``dst`` point (k-d tree)."""
    if len(dst) == 0:
        return np.full(len(src), np.inf)
    if len(src) == 0:
        return np.zeros(0)
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def point_metrics(pred_pts: np.ndarray, gt_pts: np.ndarray, tau: float = DEFAULT_TAU) -> MetricReport:
    d_pred = nearest_distances(pred_pts, gt_pts)
    d_gt = nearest_distances(gt_pts, pred_pts)
    acc = float(d_pred.mean()) if len(pred_pts) and len(gt_pts) else math.inf
    comp = float(d_gt.mean()) if len(pred_pts) and len(gt_pts) else math.inf
    prec = float(np.mean(d_pred < tau)) if len(pred_pts) else 0.0
    recall = float(np.mean(d_gt < tau)) if len(gt_pts) else 0.0
    return MetricReport(acc, comp, prec, recall, fscore(prec, recall), float(tau), len(pred_pts), len(gt_pts))


def metrics(pred: TriMesh, gt: TriMesh, tau: float = DEFAULT_TAU, density: float = POINTS_PER_M2,
            seed: int = 0) -> MetricReport:
    """Accuracy, completeness, precision, recall and F-score between two meshes.

    Both meshes are sampled uniformly at ``density`` points per square metre
    (plus their vertices). Each mesh gets its own generator seeded with
    ``seed``, so a mesh is sampled identically whichever side it is on.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pred_pts = pred.sample_points(density, np.random.default_rng(seed))
    gt_pts = gt.sample_points(density, np.random.default_rng(seed))
    return point_metrics(pred_pts, gt_pts, tau)
