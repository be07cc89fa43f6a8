"""Coordinate frames, mesh and image containers.

All geometry lives in a fixed right-handed world frame in millimetres.
Containers are immutable: arrays are copied on construction and marked
read-only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

ORTHO_TOL = 1e-6


class GeometryError(ValueError):
    """Invalid mesh, frame or image geometry."""


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def _check_unit(v: np.ndarray, name: str) -> None:
    if abs(np.linalg.norm(v) - 1.0) > ORTHO_TOL:
        raise GeometryError(f"{name} is not unit length: |{name}| = {np.linalg.norm(v)}")


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle surface mesh: ``vertices`` (N, 3) in mm, ``faces`` (M, 3) indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices)
        f = _frozen(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise GeometryError(f"faces must be (M, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise GeometryError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2), sorted so that ``edges[:, 0] < edges[:, 1]``."""
        return unique_edges(self.faces)

    @cached_property
    def adjacency(self) -> tuple[np.ndarray, ...]:
        return build_adjacency(self)

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def build_adjacency(mesh: TriMesh) -> tuple[np.ndarray, ...]:
    """Per-vertex neighbour index arrays, ascending, from shared edges."""
    n = mesh.n_vertices
    faces = mesh.faces
    if faces.size and (faces.min() < 0 or faces.max() >= n):
        raise GeometryError("face index out of range")
    e = unique_edges(faces)
    both = np.concatenate([e, e[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    splits = np.searchsorted(both[:, 0], np.arange(n + 1))
    return tuple(both[splits[i]:splits[i + 1], 1] for i in range(n))


@dataclass(frozen=True, eq=False)
class VolumeGeometry:
    """Voxel lattice: ``world = origin + direction @ (spacing * ijk)``.

    ``direction`` columns are the world directions of the voxel axes.
    """

    dims: tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = _frozen(self.spacing)
        origin = _frozen(self.origin)
        direction = _frozen(self.direction)
        if len(dims) != 3 or min(dims) < 2:
            raise GeometryError(f"dims must be three values >= 2, got {dims}")
        if spacing.shape != (3,) or np.any(spacing <= 0):
            raise GeometryError(f"spacing must be three positive values, got {spacing}")
        if origin.shape != (3,):
            raise GeometryError("origin must be a 3-vector")
        if direction.shape != (3, 3):
            raise GeometryError("direction must be 3x3")
        if np.abs(direction @ direction.T - np.eye(3)).max() > ORTHO_TOL:
            raise GeometryError("direction matrix is not orthonormal")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @cached_property
    def affine(self) -> np.ndarray:
        """3x3 linear part mapping voxel offsets to world offsets."""
        return self.direction * self.spacing[None, :]

    @cached_property
    def inverse_affine(self) -> np.ndarray:
        return self.direction.T / self.spacing[:, None]

    def voxel_to_world(self, ijk) -> np.ndarray:
        return np.asarray(ijk, dtype=float) @ self.affine.T + self.origin

    def world_to_voxel(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) - self.origin) @ self.inverse_affine.T

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel, shape dims + (3,)."""
        grids = np.meshgrid(*[np.arange(n, dtype=float) for n in self.dims], indexing="ij")
        return self.voxel_to_world(np.stack(grids, axis=-1))

    def same_as(self, other: "VolumeGeometry", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol, rtol=0)
            and np.allclose(self.origin, other.origin, atol=tol, rtol=0)
            and np.allclose(self.direction, other.direction, atol=tol, rtol=0)
        )


@dataclass(frozen=True, eq=False)
class ImageVolume:
    """Scalar (nx, ny, nz) or vector (nx, ny, nz, 3) data on a voxel lattice."""

    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        dims = self.geometry.dims
        if data.shape[:3] != dims or data.ndim not in (3, 4) or (data.ndim == 4 and data.shape[3] != 3):
            raise GeometryError(f"data shape {data.shape} does not match dims {dims}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 3 else 3

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.geometry.dims

    @property
    def spacing(self) -> np.ndarray:
        return self.geometry.spacing

    @property
    def origin(self) -> np.ndarray:
        return self.geometry.origin

    @property
    def direction(self) -> np.ndarray:
        return self.geometry.direction

    def world_to_voxel(self, p) -> np.ndarray:
        return self.geometry.world_to_voxel(p)

    def voxel_to_world(self, ijk) -> np.ndarray:
        return self.geometry.voxel_to_world(ijk)


@dataclass(frozen=True, eq=False)
class PlaneFrame:
    """2D pixel lattice embedded in world space.

    Pixel (i, j) sits at ``origin + i * spacing[0] * row_dir + j * spacing[1] * col_dir``.
    The out-of-plane coordinate is measured along ``normal`` in units of the
    smaller in-plane spacing, and ``slice_coord`` is the out-of-plane
    coordinate of the imaged slice in those units.
    """

    dims: tuple[int, int]
    spacing: np.ndarray
    origin: np.ndarray
    row_dir: np.ndarray
    col_dir: np.ndarray
    normal: np.ndarray
    slice_coord: float = 0.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = _frozen(self.spacing)
        if len(dims) != 2 or min(dims) < 1:
            raise GeometryError(f"plane dims must be two positive values, got {dims}")
        if spacing.shape != (2,) or np.any(spacing <= 0):
            raise GeometryError(f"plane spacing must be two positive values, got {spacing}")
        r, c, n = (_frozen(v) for v in (self.row_dir, self.col_dir, self.normal))
        for v, name in ((r, "row_dir"), (c, "col_dir"), (n, "normal")):
            if v.shape != (3,):
                raise GeometryError(f"{name} must be a 3-vector")
            _check_unit(v, name)
        if max(abs(r @ c), abs(r @ n), abs(c @ n)) > ORTHO_TOL:
            raise GeometryError("row_dir, col_dir and normal must be mutually orthogonal")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _frozen(self.origin))
        object.__setattr__(self, "row_dir", r)
        object.__setattr__(self, "col_dir", c)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "slice_coord", float(self.slice_coord))

    @property
    def normal_unit(self) -> float:
        """Millimetres per unit of the out-of-plane coordinate."""
        return float(min(self.spacing))

    @cached_property
    def jacobian(self) -> np.ndarray:
        """3x3 matrix J with ``plane_coords = J @ (p - origin)``."""
        return np.stack([
            self.row_dir / self.spacing[0],
            self.col_dir / self.spacing[1],
            self.normal / self.normal_unit,
        ])

    def world_to_plane(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) - self.origin) @ self.jacobian.T

    def plane_to_world(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=float)
        return (
            self.origin
            + xyz[..., 0:1] * self.spacing[0] * self.row_dir
            + xyz[..., 1:2] * self.spacing[1] * self.col_dir
            + xyz[..., 2:3] * self.normal_unit * self.normal
        )

    def pixel_centers(self) -> np.ndarray:
        """World coordinates of the imaged slice's pixels, shape dims + (3,)."""
        i, j = np.meshgrid(np.arange(self.dims[0], dtype=float), np.arange(self.dims[1], dtype=float), indexing="ij")
        return self.plane_to_world(np.stack([i, j, np.full_like(i, self.slice_coord)], axis=-1))

    def transformed(self, rotation, translation) -> "PlaneFrame":
        """Frame after the rigid motion ``p -> rotation @ p + translation``."""
        rotation = np.asarray(rotation, dtype=float)
        return PlaneFrame(
            self.dims, self.spacing, rotation @ self.origin + translation,
            rotation @ self.row_dir, rotation @ self.col_dir, rotation @ self.normal, self.slice_coord,
        )


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """Scalar pixel data (nu, nv) on a :class:`PlaneFrame`."""

    frame: PlaneFrame
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.shape != self.frame.dims:
            raise GeometryError(f"plane data shape {data.shape} does not match dims {self.frame.dims}")
        object.__setattr__(self, "data", data)


def world_to_plane(p, frame: PlaneFrame) -> np.ndarray:
    return frame.world_to_plane(p)


def plane_to_world(xyz, frame: PlaneFrame) -> np.ndarray:
    return frame.plane_to_world(xyz)


def world_to_voxel(p, vol: ImageVolume | VolumeGeometry) -> np.ndarray:
    return vol.world_to_voxel(p)


def voxel_to_world(ijk, vol: ImageVolume | VolumeGeometry) -> np.ndarray:
    return vol.voxel_to_world(ijk)


def slice_frame(geometry: VolumeGeometry, k: int) -> PlaneFrame:
    """Frame of axial slice ``k`` of a volume (rows along voxel axis 0)."""
    d = geometry.direction
    return PlaneFrame(
        dims=geometry.dims[:2],
        spacing=geometry.spacing[:2],
        origin=geometry.voxel_to_world([0.0, 0.0, float(k)]),
        row_dir=d[:, 0],
        col_dir=d[:, 1],
        normal=d[:, 2],
        slice_coord=0.0,
    )


def rotation_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
