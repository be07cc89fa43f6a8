"""Evaluation metrics: mesh surface distance, 2D contour Hausdorff distance and boundary F-score."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ImagePlane, PlaneFrame, TriMesh


@dataclass
class MetricReport:
    msd_mm: float
    hd_mm: dict[str, float] = field(default_factory=dict)
    boundf_pct: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.msd_mm >= 0:
            raise ValueError("msd must be non-negative")
        if any(not v >= 0 for v in self.hd_mm.values()):
            raise ValueError("hd must be non-negative")
        if any(not 0 <= v <= 100 for v in self.boundf_pct.values()):
            raise ValueError("boundf must lie in [0, 100]")

    def as_dict(self) -> dict:
        return {"msd_mm": self.msd_mm, "hd_mm": dict(self.hd_mm), "boundf_pct": dict(self.boundf_pct)}


def point_triangle_distance(p, a, b, c) -> np.ndarray:
    """Exact Euclidean distance from points ``p`` to triangles ``(a, b, c)``, all (..., 3).

    Region classification of the closest point follows the usual
    vertex / edge / face Voronoi tests.
    """
    p, a, b, c = (np.asarray(x, dtype=float) for x in (p, a, b, c))
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    shape = p.shape[:-1]
    p, a, b, c = (x.reshape(-1, 3) for x in (p, a, b, c))
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    q = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        m = mask & ~done
        q[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return np.linalg.norm(p - q, axis=1).reshape(shape)


class _SurfaceIndex:
    """Exact nearest-surface queries against one mesh.

    The faces around the nearest vertex give an upper bound ``u`` on the
    distance; any face that could beat it has its centroid within
    ``u + r_max`` of the query, where ``r_max`` bounds centroid-to-corner
    distances. Only those faces are evaluated exactly.
    """

    def __init__(self, mesh: TriMesh):
        v = mesh.vertices
        f = mesh.faces
        self.tri = v[f]  # (M, 3, 3)
        cen = self.tri.mean(axis=1)
        self.r_max = float(np.max(np.linalg.norm(self.tri - cen[:, None, :], axis=2)))
        self.vtree = cKDTree(v)
        self.ctree = cKDTree(cen)
        # padded vertex -> incident faces table
        flat = f.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=len(v))
        start = np.cumsum(counts) - counts
        rank = np.arange(len(flat)) - np.repeat(start, counts)
        self.vf = np.full((len(v), max(int(counts.max()), 1)), -1, dtype=np.int64)
        self.vf[flat[order], rank] = order // 3

    def _pairs(self, pts: np.ndarray, faces: np.ndarray) -> np.ndarray:
        t = self.tri[faces]
        return point_triangle_distance(pts, t[:, 0], t[:, 1], t[:, 2])

    def distance(self, points: np.ndarray, chunk: int = 500_000) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        _, near = self.vtree.query(points)
        seed = self.vf[near]
        rows, cols = np.nonzero(seed >= 0)
        u = np.full(len(points), np.inf)
        np.minimum.at(u, rows, self._pairs(points[rows], seed[rows, cols]))
        cand = self.ctree.query_ball_point(points, u + self.r_max)
        lens = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(cand))
        if lens.sum():
            qi = np.repeat(np.arange(len(points)), lens)
            fi = np.fromiter((j for c in cand for j in c), dtype=np.int64, count=int(lens.sum()))
            for lo in range(0, len(qi), chunk):
                sl = slice(lo, lo + chunk)
                np.minimum.at(u, qi[sl], self._pairs(points[qi[sl]], fi[sl]))
        return u


def point_to_surface(points, mesh: TriMesh) -> np.ndarray:
    """Distance from each point to the closest point on ``mesh``."""
    return _SurfaceIndex(mesh).distance(points)


def mean_surface_distance(a: TriMesh, b: TriMesh) -> float:
    """Symmetric mean vertex-to-surface distance (mm)."""
    if a.n_vertices == 0 or b.n_vertices == 0:
        raise ValueError("meshes must be non-empty")
    ab = point_to_surface(a.vertices, b).mean()
    ba = point_to_surface(b.vertices, a).mean()
    return float(0.5 * (ab + ba))


def _as_points(pts, name: str) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError(f"{name} is empty")
    return pts


def hausdorff_2d(contour_a, contour_b, spacing=(1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance in mm between two pixel-coordinate point sets."""
    s = np.asarray(spacing, dtype=float)
    a = _as_points(contour_a, "contour_a") * s
    b = _as_points(contour_b, "contour_b") * s
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(max(d_ab.max(), d_ba.max()))


def boundf(contour_pred, contour_gt, theta: float = 2.0) -> float:
    """Boundary F-score in percent; distances and ``theta`` are in pixels."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    pred = _as_points(contour_pred, "contour_pred")
    gt = _as_points(contour_gt, "contour_gt")
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    precision = float(np.mean(d_pred <= theta))
    recall = float(np.mean(d_gt <= theta))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def extract_contour(plane, threshold: float = 0.5) -> np.ndarray:
    """Pixel coordinates (K, 2) whose value is at least ``threshold``."""
    data = plane.data if isinstance(plane, ImagePlane) else np.asarray(plane)
    return np.argwhere(data >= threshold).astype(float)


def evaluate(pred: TriMesh, gt: TriMesh, pred_contours: dict, gt_contours: dict,
             spacings: dict, theta: float = 2.0) -> MetricReport:
    """Metric report from meshes and per-view contour point sets.

    ``spacings`` maps each view name to its in-plane pixel spacing (mm).
    """
    if set(pred_contours) != set(gt_contours):
        raise ValueError("predicted and ground-truth contours must cover the same views")
    hd, bf = {}, {}
    for k in pred_contours:
        hd[k] = hausdorff_2d(pred_contours[k], gt_contours[k], spacings[k])
        bf[k] = boundf(pred_contours[k], gt_contours[k], theta)
    return MetricReport(mean_surface_distance(pred, gt), hd, bf)


def mesh_contours(mesh: TriMesh, frames: dict[str, PlaneFrame]) -> dict[str, np.ndarray]:
    """Contour point sets of ``mesh`` cut by each frame, as pixel coordinates."""
    from .rasterizer import boundary_map

    return {k: extract_contour(boundary_map(mesh, f)) for k, f in frames.items()}
