"""Differentiable mesh-to-image slicing.

A vertex close to an image plane is assigned the probability
``exp(-tau * d**2)`` of lying on it, where ``d`` is its out-of-plane offset in
pixel-equivalent units. Vertices with ``|d| < 1`` are kept, and their
probabilities are splatted bilinearly onto the plane's pixel grid, combined
per pixel by max (default) or by a sum clamped to one. Backward passes
return gradients with respect to vertex positions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ImagePlane, PlaneFrame, TriMesh

SELECTION_BAND = 1.0
HARD_TOL = 1e-9
# any point's nearest pixel receives bilinear weight >= 0.25
BOUNDARY_LEVEL = 0.25
COMBINE_RULES = ("max", "sum")


@dataclass(frozen=True, eq=False)
class VertexProbSet:
    """Sliced vertices: mesh index, in-plane pixel coordinates, offset and probability."""

    index: np.ndarray
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    p: np.ndarray
    tau: float

    def __len__(self) -> int:
        return len(self.index)


@dataclass(frozen=True, eq=False)
class SplatRecord:
    """Deposits that determine each touched pixel, kept for the backward pass.

    Each row is one bilinear corner deposit of one entry into one pixel:
    with max-combine only the winning deposit per pixel is kept; with
    sum-combine every deposit is kept and ``active`` marks those whose pixel
    is not clamped.
    """

    pixel: np.ndarray  # flat pixel index
    entry: np.ndarray  # index into the VertexProbSet
    w: np.ndarray
    dw_dx: np.ndarray
    dw_dy: np.ndarray
    active: np.ndarray
    dims: tuple[int, int]
    combine: str


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return tau


def soft_slice(mesh: TriMesh, frame: PlaneFrame, tau: float = 3.0) -> VertexProbSet:
    tau = _check_tau(tau)
    xyz = frame.world_to_plane(mesh.vertices)
    d = xyz[:, 2] - frame.slice_coord
    idx = np.flatnonzero(np.abs(d) < SELECTION_BAND)
    p = np.exp(-tau * d[idx] ** 2)
    # entries whose probability underflows carry neither mass nor gradient
    keep = p > 0
    idx = idx[keep]
    return VertexProbSet(idx, xyz[idx, 0], xyz[idx, 1], d[idx], p[keep], tau)


def hard_slice(mesh: TriMesh, frame: PlaneFrame, tol: float = HARD_TOL) -> VertexProbSet:
    """Vertices lying on the plane (``|d| <= tol``), each with probability one."""
    xyz = frame.world_to_plane(mesh.vertices)
    d = xyz[:, 2] - frame.slice_coord
    idx = np.flatnonzero(np.abs(d) <= tol)
    return VertexProbSet(idx, xyz[idx, 0], xyz[idx, 1], d[idx], np.ones(len(idx)), np.inf)


def _deposits(x: np.ndarray, y: np.ndarray, dims: tuple[int, int]):
    """Bilinear corner deposits inside the grid: entry, flat pixel, weight, weight derivatives."""
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    entries, pixels, ws, dwx, dwy = [], [], [], [], []
    n = np.arange(len(x))
    for ox in (0, 1):
        wx = fx if ox else 1.0 - fx
        sx = 1.0 if ox else -1.0
        for oy in (0, 1):
            wy = fy if oy else 1.0 - fy
            sy = 1.0 if oy else -1.0
            ix = x0 + ox
            iy = y0 + oy
            ok = (ix >= 0) & (ix < dims[0]) & (iy >= 0) & (iy < dims[1]) & (wx * wy > 0)
            entries.append(n[ok])
            pixels.append(ix[ok] * dims[1] + iy[ok])
            ws.append((wx * wy)[ok])
            dwx.append((sx * wy)[ok])
            dwy.append((wx * sy)[ok])
    return (np.concatenate(entries), np.concatenate(pixels), np.concatenate(ws),
            np.concatenate(dwx), np.concatenate(dwy))


def splat_record(probs: VertexProbSet, dims: tuple[int, int], combine: str = "max") -> SplatRecord:
    dims = (int(dims[0]), int(dims[1]))
    entry, pixel, w, dwx, dwy = _deposits(probs.x, probs.y, dims)
    value = probs.p[entry] * w
    if combine == "max":
        # per pixel keep the largest deposit; ties go to the lowest entry index
        order = np.lexsort((-entry, value, pixel))
        pixel_sorted = pixel[order]
        last = np.ones(len(order), dtype=bool)
        last[:-1] = pixel_sorted[1:] != pixel_sorted[:-1]
        keep = order[last]
        active = np.ones(len(keep), dtype=bool)
    elif combine == "sum":
        # accumulate in value order so the sum does not depend on entry order
        keep = np.lexsort((entry, value, pixel))
        total = np.bincount(pixel[keep], weights=value[keep], minlength=dims[0] * dims[1])
        active = total[pixel[keep]] < 1.0
    else:
        raise ValueError(f"combine must be one of {COMBINE_RULES}, got {combine!r}")
    return SplatRecord(pixel[keep], entry[keep], w[keep], dwx[keep], dwy[keep], active, dims, combine)


def splat_values(probs: VertexProbSet, rec: SplatRecord) -> np.ndarray:
    out = np.zeros(rec.dims[0] * rec.dims[1])
    if rec.combine == "max":
        out[rec.pixel] = probs.p[rec.entry] * rec.w
    else:
        out += np.bincount(rec.pixel, weights=probs.p[rec.entry] * rec.w, minlength=out.size)
    return np.clip(out, 0.0, 1.0).reshape(rec.dims)


def splat(probs: VertexProbSet, frame: PlaneFrame, dims: tuple[int, int] | None = None,
          combine: str = "max") -> ImagePlane:
    """Probability map of ``probs`` on ``frame`` (dims default to the frame's)."""
    dims = frame.dims if dims is None else tuple(dims)
    if dims != frame.dims:
        frame = PlaneFrame(dims, frame.spacing, frame.origin, frame.row_dir, frame.col_dir,
                           frame.normal, frame.slice_coord)
    rec = splat_record(probs, dims, combine)
    return ImagePlane(frame, splat_values(probs, rec))


def splat_grad(probs: VertexProbSet, rec: SplatRecord, grad_map: np.ndarray):
    """Per-entry ``(dL/dp, dL/dx, dL/dy)`` from the pixel gradient ``grad_map``."""
    grad_map = np.asarray(grad_map, dtype=float)
    if grad_map.shape != rec.dims:
        raise ValueError(f"gradient map shape {grad_map.shape} does not match {rec.dims}")
    g = grad_map.ravel()[rec.pixel] * rec.active
    p = probs.p[rec.entry]
    k = len(probs)
    dp = np.bincount(rec.entry, weights=g * rec.w, minlength=k)
    dx = np.bincount(rec.entry, weights=g * p * rec.dw_dx, minlength=k)
    dy = np.bincount(rec.entry, weights=g * p * rec.dw_dy, minlength=k)
    return dp, dx, dy


def soft_slice_grad(mesh: TriMesh, frame: PlaneFrame, tau: float, upstream) -> np.ndarray:
    """Per-vertex ``dL/d(position)`` given per-entry ``(dL/dp, dL/dx, dL/dy)``.

    ``upstream`` must be aligned with ``soft_slice(mesh, frame, tau)``.
    Vertices outside the selection band get zero gradient.
    """
    probs = soft_slice(mesh, frame, tau)
    return _slice_backward(probs, frame, mesh.n_vertices, upstream)


def _slice_backward(probs: VertexProbSet, frame: PlaneFrame, n_vertices: int, upstream) -> np.ndarray:
    dp, dx, dy = (np.asarray(u, dtype=float) for u in upstream)
    if not (len(dp) == len(dx) == len(dy) == len(probs)):
        raise ValueError(f"upstream length does not match {len(probs)} sliced vertices")
    dz = dp * (-2.0 * probs.tau * probs.d * probs.p)
    g_plane = np.stack([dx, dy, dz], axis=1)
    out = np.zeros((n_vertices, 3))
    out[probs.index] = g_plane @ frame.jacobian
    return out


class SliceRasterizer:
    """Forward/backward pair for one plane, caching what the backward pass needs."""

    def __init__(self, frame: PlaneFrame, tau: float = 3.0, combine: str = "max"):
        self.frame = frame
        self.tau = _check_tau(tau)
        self.combine = combine
        self._probs = None
        self._rec = None
        self._n = 0

    def forward(self, mesh: TriMesh) -> np.ndarray:
        self._probs = soft_slice(mesh, self.frame, self.tau)
        self._rec = splat_record(self._probs, self.frame.dims, self.combine)
        self._n = mesh.n_vertices
        return splat_values(self._probs, self._rec)

    @property
    def support(self) -> np.ndarray:
        """Flat indices of pixels that received a deposit in the last forward pass."""
        return np.unique(self._rec.pixel)

    def backward(self, grad_map: np.ndarray) -> np.ndarray:
        up = splat_grad(self._probs, self._rec, grad_map)
        return _slice_backward(self._probs, self.frame, self._n, up)


def section_points(mesh: TriMesh, frame: PlaneFrame, step: float = 0.25) -> np.ndarray:
    """In-plane pixel coordinates (K, 2) sampling the mesh surface's intersection with the slice.

    Each triangle that straddles the slice contributes a segment, sampled
    every ``step`` pixels or closer; vertices lying on the slice are included.
    """
    xyz = frame.world_to_plane(mesh.vertices)
    d = xyz[:, 2] - frame.slice_coord
    pos = d >= 0
    f = mesh.faces
    pts = [xyz[np.abs(d) <= HARD_TOL, :2]]
    crossings = []
    for a, b in ((0, 1), (1, 2), (2, 0)):
        ia, ib = f[:, a], f[:, b]
        cross = pos[ia] != pos[ib]
        t = np.zeros(len(f))
        denom = d[ia] - d[ib]
        t[cross] = d[ia][cross] / denom[cross]
        pt = xyz[ia, :2] + t[:, None] * (xyz[ib, :2] - xyz[ia, :2])
        crossings.append((cross, pt))
    masks = np.stack([c for c, _ in crossings], axis=1)
    straddle = masks.sum(axis=1) == 2
    if np.any(straddle):
        cand = np.stack([p for _, p in crossings], axis=1)[straddle]  # (S, 3, 2)
        m = masks[straddle]
        first = np.argmax(m, axis=1)
        second = 2 - np.argmax(m[:, ::-1], axis=1)
        s = np.arange(len(cand))
        p0 = cand[s, first]
        p1 = cand[s, second]
        n = np.maximum(np.ceil(np.linalg.norm(p1 - p0, axis=1) / step).astype(np.int64), 1) + 1
        seg = np.repeat(np.arange(len(n)), n)
        start = np.cumsum(n) - n
        t = (np.arange(n.sum()) - start[seg]) / (n[seg] - 1)
        pts.append(p0[seg] + t[:, None] * (p1 - p0)[seg])
    return np.concatenate(pts)


def boundary_map(mesh: TriMesh, frame: PlaneFrame) -> ImagePlane:
    """Binary contour image of the mesh surface cut by the slice."""
    pts = section_points(mesh, frame)
    probs = VertexProbSet(np.arange(len(pts)), pts[:, 0], pts[:, 1], np.zeros(len(pts)), np.ones(len(pts)), np.inf)
    values = splat_values(probs, splat_record(probs, frame.dims))
    return ImagePlane(frame, (values >= BOUNDARY_LEVEL).astype(float))
