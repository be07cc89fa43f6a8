"""Voxel-grid motion fields: trilinear sampling, spatial-transformer warping
and the coarse control-grid parameterisation that is optimised.

Displacements are world-frame millimetres. Every sampler clamps coordinates
to the grid border, so all operations are total.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import GeometryError, ImageVolume, TriMesh, VolumeGeometry


@dataclass(frozen=True, eq=False)
class MotionField:
    geometry: VolumeGeometry
    disp: np.ndarray  # (nx, ny, nz, 3) mm

    def __post_init__(self):
        disp = np.array(self.disp, dtype=float)
        if disp.shape != tuple(self.geometry.dims) + (3,):
            raise GeometryError(f"displacement shape {disp.shape} does not match dims {self.geometry.dims}")
        if not np.all(np.isfinite(disp)):
            raise ValueError("motion field contains non-finite values")
        disp.flags.writeable = False
        object.__setattr__(self, "disp", disp)

    @classmethod
    def zeros(cls, geometry: VolumeGeometry) -> "MotionField":
        return cls(geometry, np.zeros(tuple(geometry.dims) + (3,)))

    def to_volume(self) -> ImageVolume:
        return ImageVolume(self.geometry, self.disp)

    @classmethod
    def from_volume(cls, vol: ImageVolume) -> "MotionField":
        if vol.channels != 3:
            raise GeometryError("a motion field needs a 3-channel volume")
        return cls(vol.geometry, vol.data)


def _corner_setup(coords: np.ndarray, dims):
    """Lower corner, fractional offset and in-range mask per axis after border clamping."""
    i0s, fs, inside = [], [], []
    for a, n in enumerate(dims):
        c = coords[..., a]
        cc = np.clip(c, 0.0, n - 1.0)
        i0 = np.minimum(np.floor(cc), n - 2).astype(np.int64)
        i0s.append(i0)
        fs.append(cc - i0)
        inside.append((c >= 0.0) & (c <= n - 1.0))
    return i0s, fs, inside


def trilinear(data: np.ndarray, coords: np.ndarray, with_grad: bool = False):
    """Sample ``data`` (nx, ny, nz[, C]) at continuous voxel ``coords`` (..., 3).

    With ``with_grad`` also returns the derivative with respect to the
    coordinates, shape (..., [C,] 3); clamped axes have zero derivative.
    """
    data = np.asarray(data, dtype=float)
    coords = np.asarray(coords, dtype=float)
    dims = data.shape[:3]
    (i0, j0, k0), (fx, fy, fz), inside = _corner_setup(coords, dims)
    vec = data.ndim == 4
    if vec:
        fx, fy, fz = fx[..., None], fy[..., None], fz[..., None]
    # staged lerps along x, then y, then z, exact at both cell ends; derivatives ride along
    cx, dx = {}, {}
    for oy in (0, 1):
        for oz in (0, 1):
            lo = data[i0, j0 + oy, k0 + oz]
            hi = data[i0 + 1, j0 + oy, k0 + oz]
            cx[oy, oz] = (1.0 - fx) * lo + fx * hi
            dx[oy, oz] = hi - lo
    cy, dxy, dy = {}, {}, {}
    for oz in (0, 1):
        lo, hi = cx[0, oz], cx[1, oz]
        cy[oz] = (1.0 - fy) * lo + fy * hi
        dy[oz] = hi - lo
        dxy[oz] = (1.0 - fy) * dx[0, oz] + fy * dx[1, oz]
    out = (1.0 - fz) * cy[0] + fz * cy[1]
    if not with_grad:
        return out
    gx = (1.0 - fz) * dxy[0] + fz * dxy[1]
    gy = (1.0 - fz) * dy[0] + fz * dy[1]
    gz = cy[1] - cy[0]
    masks = [m[..., None] if vec else m for m in inside]
    grad = np.stack([gx * masks[0], gy * masks[1], gz * masks[2]], axis=-1)
    return out, grad


def sampling_matrix(geometry: VolumeGeometry, points: np.ndarray) -> sp.csr_matrix:
    """Sparse (N, n_voxels) matrix of trilinear weights at world ``points``."""
    coords = geometry.world_to_voxel(points)
    dims = geometry.dims
    (i0, j0, k0), (fx, fy, fz), _ = _corner_setup(coords, dims)
    rows, cols, vals = [], [], []
    n = np.arange(len(points))
    for ox in (0, 1):
        wx = fx if ox else 1.0 - fx
        for oy in (0, 1):
            wy = fy if oy else 1.0 - fy
            for oz in (0, 1):
                wz = fz if oz else 1.0 - fz
                rows.append(n)
                cols.append(np.ravel_multi_index((i0 + ox, j0 + oy, k0 + oz), dims))
                vals.append(wx * wy * wz)
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(points), int(np.prod(dims))))
    return m.tocsr()


def sample_at_vertices(field: MotionField, mesh: TriMesh) -> np.ndarray:
    """Per-vertex displacement (N, 3): the field interpolated at each vertex."""
    return trilinear(field.disp, field.geometry.world_to_voxel(mesh.vertices))


def sample_grad(field: MotionField, mesh: TriMesh, upstream):
    """Reverse mode of :func:`sample_at_vertices`.

    Returns ``(dL/d disp, dL/d vertices)`` for ``upstream = dL/d(dv)``.
    """
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (mesh.n_vertices, 3):
        raise ValueError(f"upstream must be ({mesh.n_vertices}, 3), got {upstream.shape}")
    g = field.geometry
    W = sampling_matrix(g, mesh.vertices)
    grad_disp = (W.T @ upstream).reshape(tuple(g.dims) + (3,))
    _, dval = trilinear(field.disp, g.world_to_voxel(mesh.vertices), with_grad=True)  # (N, 3, 3)
    # upstream . d(disp)/d(ijk) . d(ijk)/d(world)
    grad_v = np.einsum("nc,nca->na", upstream, dval) @ g.inverse_affine
    return grad_disp, grad_v


def _check_same(moving: ImageVolume, field: MotionField) -> None:
    if not moving.geometry.same_as(field.geometry):
        raise GeometryError("moving image and motion field must share geometry")


def _warp_coords(field: MotionField) -> np.ndarray:
    g = field.geometry
    idx = np.meshgrid(*[np.arange(n, dtype=float) for n in g.dims], indexing="ij")
    m = g.inverse_affine
    d = field.disp
    # written out elementwise (no BLAS) so the result is reproducible voxel by voxel
    return np.stack([idx[a] + (d[..., 0] * m[a, 0] + d[..., 1] * m[a, 1] + d[..., 2] * m[a, 2])
                     for a in range(3)], axis=-1)


def warp_volume(moving: ImageVolume, field: MotionField) -> ImageVolume:
    """``out(v) = moving(voxel_to_world(v) + disp(v))`` with trilinear sampling."""
    _check_same(moving, field)
    if moving.channels != 1:
        raise GeometryError("only scalar volumes can be warped")
    return ImageVolume(moving.geometry, trilinear(moving.data, _warp_coords(field)))


def warp_grad(moving: ImageVolume, field: MotionField, upstream) -> np.ndarray:
    """``dL/d disp`` (nx, ny, nz, 3) for ``upstream = dL/d out``."""
    _check_same(moving, field)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != tuple(moving.dims):
        raise ValueError(f"upstream shape {upstream.shape} does not match {moving.dims}")
    _, g = trilinear(moving.data, _warp_coords(field), with_grad=True)
    return (upstream[..., None] * g) @ field.geometry.inverse_affine


def warp_with_grad(moving: ImageVolume, field: MotionField):
    """Warped data and its spatial Jacobian in world units, in one sampling pass."""
    _check_same(moving, field)
    out, g = trilinear(moving.data, _warp_coords(field), with_grad=True)
    return out, g @ field.geometry.inverse_affine


def _upsample_matrix(n: int, spacing: int) -> np.ndarray:
    m = -(-(n - 1) // spacing) + 1
    U = np.zeros((n, m))
    t = np.arange(n) / spacing
    j0 = np.minimum(np.floor(t), m - 2).astype(np.int64)
    f = t - j0
    U[np.arange(n), j0] = 1.0 - f
    U[np.arange(n), j0 + 1] += f
    return U


class ControlGrid:
    """Coarse grid of control displacements, upsampled trilinearly to a full field.

    Control node ``(a, b, c)`` sits on voxel ``(a, b, c) * spacing`` (the last
    node may lie past the grid edge). Parameters are dimensionless; the field
    is ``scale`` millimetres per parameter unit.
    """

    def __init__(self, geometry: VolumeGeometry, spacing: int = 4, scale: float = 1.0):
        spacing = int(spacing)
        if spacing < 1:
            raise ValueError(f"control spacing must be >= 1, got {spacing}")
        self.geometry = geometry
        self.spacing = spacing
        self.scale = float(scale)
        self.mats = [_upsample_matrix(n, spacing) for n in geometry.dims]
        self.shape = tuple(U.shape[1] for U in self.mats) + (3,)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def node_world(self) -> np.ndarray:
        idx = np.meshgrid(*[np.arange(m, dtype=float) * self.spacing for m in self.shape[:3]], indexing="ij")
        return self.geometry.voxel_to_world(np.stack(idx, axis=-1))

    def upsample(self, params: np.ndarray) -> np.ndarray:
        x = np.asarray(params, dtype=float)
        for axis, U in enumerate(self.mats):
            x = np.moveaxis(np.tensordot(U, x, axes=([1], [axis])), 0, axis)
        return self.scale * x

    def field(self, params: np.ndarray) -> MotionField:
        return MotionField(self.geometry, self.upsample(params))

    def backward(self, grad_disp: np.ndarray) -> np.ndarray:
        x = np.asarray(grad_disp, dtype=float)
        for axis, U in enumerate(self.mats):
            x = np.moveaxis(np.tensordot(U.T, x, axes=([1], [axis])), 0, axis)
        return self.scale * x

    def params_from_function(self, fn) -> np.ndarray:
        """Parameters whose nodes carry ``fn(world_points) -> displacement mm``."""
        pts = self.node_world()
        return np.asarray(fn(pts.reshape(-1, 3))).reshape(self.shape) / self.scale


def parameterize(field_dims, control_spacing: int = 4, geometry: VolumeGeometry | None = None,
                 scale: float = 1.0) -> ControlGrid:
    if geometry is None:
        geometry = VolumeGeometry(field_dims, np.ones(3), np.zeros(3))
    elif tuple(geometry.dims) != tuple(int(d) for d in field_dims):
        raise GeometryError("field_dims do not match geometry")
    return ControlGrid(geometry, control_spacing, scale)
