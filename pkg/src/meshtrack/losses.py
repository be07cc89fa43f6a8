"""Training losses (image similarity, Laplacian smoothness, weighted Hausdorff
shape loss) and their weighted combination, each with an analytic gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import GeometryError, ImagePlane, ImageVolume, PlaneFrame, TriMesh
from .motion import ControlGrid, MotionField, sampling_matrix, warp_with_grad
from .rasterizer import SliceRasterizer

VIEW_ORDER = ("sa", "lax1", "lax2")
VIEW_ALIASES = {"2ch": "lax1", "4ch": "lax2"}

WHD_ALPHA = -3.0
WHD_EPS = 1e-6


def canonical_view(name: str) -> str:
    name = VIEW_ALIASES.get(name, name)
    if name not in VIEW_ORDER:
        raise ValueError(f"unknown view {name!r}; expected one of {VIEW_ORDER} or {tuple(VIEW_ALIASES)}")
    return name


@dataclass(frozen=True)
class LossWeights:
    lam: float = 300.0
    beta: float = 200.0
    tau: float = 3.0

    def __post_init__(self):
        if min(self.lam, self.beta, self.tau) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    total: float
    shape: float
    sim: float
    smooth: float
    per_view: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"total": self.total, "shape": self.shape, "sim": self.sim,
                "smooth": self.smooth, "per_view": dict(self.per_view)}


# -- similarity -------------------------------------------------------------

def loss_sim(fixed: ImageVolume, moving: ImageVolume, field: MotionField):
    """Mean squared difference between ``fixed`` and ``moving`` warped by ``field``.

    Returns ``(value, dL/d disp)``.
    """
    if not fixed.geometry.same_as(moving.geometry):
        raise GeometryError("fixed and moving volumes must share geometry")
    warped, jac = warp_with_grad(moving, field)
    r = fixed.data - warped
    n = r.size
    value = float(np.sum(r * r) / n)
    grad = (-2.0 / n) * r[..., None] * jac
    return value, grad


# -- mesh prediction and smoothness -----------------------------------------

def mesh_predict(mesh: TriMesh, dv) -> TriMesh:
    dv = np.asarray(dv, dtype=float)
    if dv.shape != mesh.vertices.shape:
        raise ValueError(f"displacement shape {dv.shape} does not match vertices {mesh.vertices.shape}")
    return mesh.with_vertices(mesh.vertices + dv)


def uniform_laplacian(mesh: TriMesh) -> sp.csr_matrix:
    """Sparse ``I - D^-1 A`` for the mesh's edge graph."""
    n = mesh.n_vertices
    e = mesh.edges
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    deg = np.bincount(rows, minlength=n).astype(float)
    if np.any(deg == 0):
        raise GeometryError(f"{int(np.sum(deg == 0))} isolated vertices have no neighbours")
    A = sp.coo_matrix((1.0 / deg[rows], (rows, cols)), shape=(n, n)).tocsr()
    return (sp.identity(n, format="csr") - A).tocsr()


def smooth_from_laplacian(L: sp.csr_matrix, vertices: np.ndarray):
    lv = L @ vertices
    norms = np.linalg.norm(lv, axis=1)
    n = len(vertices)
    value = float(norms.sum() / n)
    unit = np.zeros_like(lv)
    nz = norms > 0
    unit[nz] = lv[nz] / norms[nz, None]
    return value, (L.T @ unit) / n


def loss_smooth(mesh: TriMesh):
    """Mean over vertices of the norm of the uniform Laplacian. Returns ``(value, dL/dV)``."""
    return smooth_from_laplacian(uniform_laplacian(mesh), mesh.vertices)


# -- shape ------------------------------------------------------------------

class WeightedHausdorff:
    """Weighted Hausdorff distance from probability maps to a fixed binary boundary.

    Distances are Euclidean in pixel units. The soft minimum is the
    generalised mean with exponent ``alpha`` over all pixels, with ``eps``
    added before the power.
    """

    def __init__(self, boundary, alpha: float = WHD_ALPHA, eps: float = WHD_EPS, level: float = 0.5):
        data = boundary.data if isinstance(boundary, ImagePlane) else np.asarray(boundary, dtype=float)
        self.dims = data.shape
        self.Y = np.argwhere(data >= level).astype(float)
        if len(self.Y) == 0:
            raise ValueError("boundary map has no foreground pixels")
        self.alpha = float(alpha)
        self.eps = float(eps)
        self.d_max = float(np.hypot(*self.dims))
        self.n_pix = int(np.prod(self.dims))
        gi, gj = np.meshgrid(np.arange(self.dims[0]), np.arange(self.dims[1]), indexing="ij")
        self.coords = np.stack([gi.ravel(), gj.ravel()], axis=1).astype(float)
        self.min_dist, _ = cKDTree(self.Y).query(self.coords)
        self._pad = (self.d_max + self.eps) ** self.alpha

    def _dist(self, flat_idx: np.ndarray) -> np.ndarray:
        diff = self.coords[flat_idx, None, :] - self.Y[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def __call__(self, prob, support=None):
        """Return ``(value, grad)``; ``grad`` is a dense map, filled only on ``support``.

        ``support`` lists flat pixel indices; ``None`` means every pixel.
        """
        p = np.asarray(prob.data if isinstance(prob, ImagePlane) else prob, dtype=float)
        if p.shape != self.dims:
            raise GeometryError(f"probability map {p.shape} does not match boundary {self.dims}")
        p = p.ravel()
        a = self.alpha
        S = p.sum()
        term1 = float(p @ self.min_dist / (S + self.eps))

        nz = np.flatnonzero(p)
        f = p[nz, None] * self._dist(nz) + (1.0 - p[nz, None]) * self.d_max
        A = np.sum((f + self.eps) ** a, axis=0) + (self.n_pix - len(nz)) * self._pad
        mean_pow = A / self.n_pix
        M = mean_pow ** (1.0 / a)
        term2 = float(M.mean())
        value = term1 + term2

        grad = np.zeros(self.n_pix)
        idx = np.arange(self.n_pix) if support is None else np.unique(np.concatenate([support, nz]))
        coef = mean_pow ** (1.0 / a - 1.0) / (self.n_pix * len(self.Y))
        for chunk in np.array_split(idx, max(1, len(idx) * len(self.Y) // 2_000_000 + 1)):
            if not len(chunk):
                continue
            d = self._dist(chunk)
            fc = p[chunk, None] * d + (1.0 - p[chunk, None]) * self.d_max
            grad[chunk] = ((fc + self.eps) ** (a - 1.0) * (d - self.d_max)) @ coef
        grad[idx] += (self.min_dist[idx] - term1) / (S + self.eps)
        return value, grad.reshape(self.dims)


def whd(prob, boundary, alpha: float = WHD_ALPHA, eps: float = WHD_EPS):
    """Value and dense gradient of the weighted Hausdorff distance."""
    return WeightedHausdorff(boundary, alpha, eps)(prob)


def loss_shape(prob_maps: dict, boundaries: dict, alpha: float = WHD_ALPHA, eps: float = WHD_EPS):
    """Sum of per-view distances. Returns ``(value, {view: grad}, {view: value})``."""
    if set(prob_maps) != set(boundaries):
        raise ValueError("probability maps and boundaries must cover the same views")
    total, grads, per_view = 0.0, {}, {}
    for k in sorted(prob_maps, key=_view_key):
        v, g = whd(prob_maps[k], boundaries[k], alpha, eps)
        per_view[k] = v
        grads[k] = g
        total += v
    return total, grads, per_view


def _view_key(name: str):
    name = VIEW_ALIASES.get(name, name)
    return (VIEW_ORDER.index(name), name) if name in VIEW_ORDER else (len(VIEW_ORDER), name)


# -- combined objective -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class ViewTarget:
    frame: PlaneFrame
    boundary: ImagePlane


class TrackingObjective:
    """Weighted sum of shape, similarity and smoothness losses as a function
    of control-grid parameters, with its gradient.

    The chain is params -> field -> (warp for similarity) and
    field -> vertex displacement -> predicted mesh -> (smoothness, slicing -> shape).
    """

    def __init__(self, mesh_0: TriMesh, fixed: ImageVolume, moving: ImageVolume,
                 views: dict[str, ViewTarget], control: ControlGrid,
                 weights: LossWeights = LossWeights(), combine: str = "max"):
        if not fixed.geometry.same_as(moving.geometry) or not fixed.geometry.same_as(control.geometry):
            raise GeometryError("fixed, moving and control grid must share geometry")
        self.mesh_0 = mesh_0
        self.fixed = fixed
        self.moving = moving
        self.control = control
        self.weights = weights
        self.views = {canonical_view(k): v for k, v in views.items()}
        self.view_names = sorted(self.views, key=_view_key)
        self.W = sampling_matrix(control.geometry, mesh_0.vertices)
        self.L = uniform_laplacian(mesh_0)
        self.whd = {}
        self.raster = {}
        for k in self.view_names:
            t = self.views[k]
            if t.boundary.frame.dims != t.frame.dims:
                raise GeometryError(f"view {k}: boundary dims do not match frame")
            self.whd[k] = WeightedHausdorff(t.boundary)
            self.raster[k] = SliceRasterizer(t.frame, weights.tau, combine)

    def displacement(self, params: np.ndarray):
        field = self.control.field(params)
        dv = self.W @ field.disp.reshape(-1, 3)
        return field, dv

    def evaluate(self, params: np.ndarray, with_grad: bool = True):
        w = self.weights
        field, dv = self.displacement(params)
        verts = self.mesh_0.vertices + dv
        mesh_t = self.mesh_0.with_vertices(verts)

        sim, g_disp = loss_sim(self.fixed, self.moving, field)
        smooth, g_v = smooth_from_laplacian(self.L, verts)
        g_v = w.beta * g_v

        shape = 0.0
        per_view = {}
        for k in self.view_names:
            r = self.raster[k]
            pmap = r.forward(mesh_t)
            v, g_map = self.whd[k](pmap, support=r.support if with_grad else np.zeros(0, dtype=np.int64))
            per_view[k] = v
            shape += v
            if with_grad:
                g_v = g_v + r.backward(g_map)

        total = shape + w.lam * sim + w.beta * smooth
        report = LossReport(total, shape, sim, smooth, per_view)
        if not with_grad:
            return report, None
        g_disp = w.lam * g_disp + (self.W.T @ g_v).reshape(g_disp.shape)
        return report, self.control.backward(g_disp)
