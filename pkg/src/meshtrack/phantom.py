"""Synthetic left-ventricle phantom with an exact analytic deformation.

The myocardium is the shell between two confocal-free ellipsoids of
revolution about the world z axis (apex at negative z), cut by a basal
plane. Frames contract radially about the axis and shorten longitudinally
about a fixed anchor height, scaled by a per-frame amplitude.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .geometry import ImagePlane, ImageVolume, PlaneFrame, TriMesh, VolumeGeometry, slice_frame
from .rasterizer import boundary_map

BLUR_KERNEL = np.array([0.25, 0.5, 0.25])
SUPERSAMPLE = 3


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    endo_axes: tuple[float, float] = (20.0, 50.0)   # (radial, longitudinal) semi-axes, mm
    epi_axes: tuple[float, float] = (28.0, 58.0)
    base_height: float = 0.0        # basal cut above the equator, fraction of the endo long semi-axis
    subdivision: int = 5
    sax_dims: tuple[int, int, int] = (64, 64, 64)
    sax_spacing: tuple[float, float, float] = (1.25, 1.25, 2.0)
    lax_dims: tuple[int, int] = (96, 96)
    lax_spacing: tuple[float, float] = (1.25, 1.25)
    radial_contraction: float = 0.10
    longitudinal_shortening: float = 0.05
    anchor: str = "base"            # fixed point of longitudinal shortening: "apex" or "base"
    n_frames: int = 10
    profile: tuple[float, ...] | None = None  # amplitude per frame; default sin^2(pi t / T)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        (ar, az), (br, bz) = self.endo_axes, self.epi_axes
        if not (0 < ar < br and 0 < az < bz):
            raise PhantomSpecError("epicardial semi-axes must exceed endocardial ones, all positive")
        if not (0 <= self.radial_contraction < 0.5 and 0 <= self.longitudinal_shortening < 0.5):
            raise PhantomSpecError("contraction fractions must lie in [0, 0.5)")
        if min(self.sax_dims) < 16 or min(self.lax_dims) < 16:
            raise PhantomSpecError("image dims must be at least 16 per axis")
        if not (0 <= self.base_height < 0.9):
            raise PhantomSpecError("base_height must lie in [0, 0.9)")
        if self.subdivision < 0:
            raise PhantomSpecError("subdivision must be non-negative")
        if self.anchor not in ("apex", "base"):
            raise PhantomSpecError("anchor must be 'apex' or 'base'")
        if self.n_frames < 1:
            raise PhantomSpecError("n_frames must be positive")
        if self.profile is not None and (len(self.profile) != self.n_frames or self.profile[0] != 0):
            raise PhantomSpecError("profile needs one amplitude per frame, starting at 0")
        if self.noise_sigma < 0:
            raise PhantomSpecError("noise_sigma must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PhantomSpecError(f"unknown phantom spec keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise PhantomSpecError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise PhantomSpecError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def z_base(self) -> float:
        return self.base_height * self.endo_axes[1]

    @property
    def z_apex(self) -> float:
        return -self.epi_axes[1]

    @property
    def anchor_z(self) -> float:
        return self.z_apex if self.anchor == "apex" else self.z_base

    @property
    def center(self) -> np.ndarray:
        return np.array([0.0, 0.0, 0.5 * (self.z_apex + self.z_base)])

    def amplitude(self, t: int) -> float:
        if not 0 <= t < self.n_frames:
            raise IndexError(f"frame {t} outside [0, {self.n_frames})")
        if self.profile is not None:
            return float(self.profile[t])
        return float(np.sin(np.pi * t / self.n_frames) ** 2)

    @property
    def peak_frame(self) -> int:
        return int(np.argmax([self.amplitude(t) for t in range(self.n_frames)]))


# -- mesh ---------------------------------------------------------------

def _meridian(a: float, c: float, z_top: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(r, z) of ``n`` points at equal arc length from apex (excluded) to the basal cut."""
    theta_top = np.arccos(np.clip(-z_top / c, -1, 1))
    th = np.linspace(0.0, theta_top, 4096)
    r, z = a * np.sin(th), -c * np.cos(th)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(r), np.diff(z)))])
    ts = np.interp(np.linspace(0, s[-1], n + 1)[1:], s, th)
    return a * np.sin(ts), -c * np.cos(ts)


def make_mesh(spec: PhantomSpec) -> TriMesh:
    """Closed myocardial shell: endocardial cap, basal rim and epicardial cap."""
    s = 2 ** spec.subdivision
    n_phi, n_theta, n_rim = 8 * s, 3 * s, s
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    cos, sin = np.cos(phi), np.sin(phi)
    zb = spec.z_base

    r_endo, z_endo = _meridian(*spec.endo_axes, zb, n_theta)
    r_epi, z_epi = _meridian(*spec.epi_axes, zb, n_theta)
    rim_r = np.linspace(r_endo[-1], r_epi[-1], n_rim + 1)[1:-1]
    # meridian profile of the whole shell, apex of endo to apex of epi
    ring_r = np.concatenate([r_endo, rim_r, r_epi[::-1]])
    ring_z = np.concatenate([z_endo, np.full(len(rim_r), zb), z_epi[::-1]])
    n_rings = len(ring_r)

    verts = [np.array([[0.0, 0.0, -spec.endo_axes[1]]])]
    for r, z in zip(ring_r, ring_z):
        verts.append(np.stack([r * cos, r * sin, np.full(n_phi, z)], axis=1))
    verts.append(np.array([[0.0, 0.0, -spec.epi_axes[1]]]))
    V = np.concatenate(verts)
    apex_in, apex_out = 0, len(V) - 1

    def ring(k):
        return 1 + k * n_phi + np.arange(n_phi)

    j = np.arange(n_phi)
    jn = (j + 1) % n_phi
    faces = [np.stack([np.full(n_phi, apex_in), 1 + jn, 1 + j], axis=1)]
    for k in range(n_rings - 1):
        a, b = ring(k), ring(k + 1)
        faces.append(np.stack([a[j], a[jn], b[j]], axis=1))
        faces.append(np.stack([a[jn], b[jn], b[j]], axis=1))
    last = ring(n_rings - 1)
    faces.append(np.stack([np.full(n_phi, apex_out), last[j], last[jn]], axis=1))
    # reversed so normals point out of the wall
    return TriMesh(V, np.concatenate(faces)[:, ::-1])


def wall_values(spec: PhantomSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Implicit ellipsoid values (endo, epi) at ED-frame points; the wall has endo >= 1 >= epi."""
    points = np.asarray(points, dtype=float)
    r2 = points[..., 0] ** 2 + points[..., 1] ** 2
    z2 = points[..., 2] ** 2
    (ar, az), (br, bz) = spec.endo_axes, spec.epi_axes
    return r2 / ar**2 + z2 / az**2, r2 / br**2 + z2 / bz**2


def inside_wall(spec: PhantomSpec, points: np.ndarray) -> np.ndarray:
    endo, epi = wall_values(spec, points)
    return (endo >= 1.0) & (epi <= 1.0) & (points[..., 2] <= spec.z_base)


# -- deformation ---------------------------------------------------------

def _scales(spec: PhantomSpec, a: float):
    return 1.0 - a * spec.radial_contraction, 1.0 - a * spec.longitudinal_shortening


def deform_points(spec: PhantomSpec, points: np.ndarray, t: int) -> np.ndarray:
    sr, sz = _scales(spec, spec.amplitude(t))
    p = np.array(points, dtype=float)
    p[..., :2] *= sr
    p[..., 2] = spec.anchor_z + (p[..., 2] - spec.anchor_z) * sz
    return p


def undeform_points(spec: PhantomSpec, points: np.ndarray, t: int) -> np.ndarray:
    sr, sz = _scales(spec, spec.amplitude(t))
    p = np.array(points, dtype=float)
    p[..., :2] /= sr
    p[..., 2] = spec.anchor_z + (p[..., 2] - spec.anchor_z) / sz
    return p


def displacement_function(spec: PhantomSpec, t: int):
    """World point -> ground-truth displacement (mm) at frame ``t``."""
    return lambda pts: deform_points(spec, pts, t) - np.asarray(pts, dtype=float)


def deform(mesh: TriMesh, spec: PhantomSpec, t: int) -> tuple[TriMesh, np.ndarray]:
    moved = deform_points(spec, mesh.vertices, t)
    return mesh.with_vertices(moved), moved - mesh.vertices


# -- acquisition geometry ----------------------------------------------------

def sax_geometry(spec: PhantomSpec) -> VolumeGeometry:
    dims = np.array(spec.sax_dims)
    sp = np.array(spec.sax_spacing, dtype=float)
    origin = spec.center - 0.5 * (dims - 1) * sp
    return VolumeGeometry(tuple(spec.sax_dims), sp, origin, np.eye(3))


def sax_slice_index(spec: PhantomSpec) -> int:
    g = sax_geometry(spec)
    return int(np.round(g.world_to_voxel(spec.center)[2]))


def view_frames(spec: PhantomSpec) -> dict[str, PlaneFrame]:
    """Mid short-axis slice and two orthogonal long-axis planes through the axis."""
    g = sax_geometry(spec)
    nu, nv = spec.lax_dims
    su, sv = spec.lax_spacing
    c = spec.center
    top = c[2] + 0.5 * (nv - 1) * sv
    half = 0.5 * (nu - 1) * su
    down = np.array([0.0, 0.0, -1.0])
    return {
        "sa": slice_frame(g, sax_slice_index(spec)),
        "lax1": PlaneFrame((nu, nv), (su, sv), [-half, 0.0, top], [1.0, 0, 0], down, [0.0, 1.0, 0]),
        "lax2": PlaneFrame((nu, nv), (su, sv), [0.0, -half, top], [0, 1.0, 0], down, [-1.0, 0, 0]),
    }


# -- rendering ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FrameInputs:
    """Images of one time frame: SAX volume, per-view intensity planes and boundary maps."""

    sa: ImageVolume
    planes: dict[str, ImagePlane] = field(default_factory=dict)
    boundaries: dict[str, ImagePlane] = field(default_factory=dict)


def _occupancy(spec: PhantomSpec, t: int, centers: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    acc = np.zeros(centers.shape[:-1])
    for o in offsets:
        acc += inside_wall(spec, undeform_points(spec, centers + o, t))
    return acc / len(offsets)


def _subsample_offsets(axes: list[np.ndarray]) -> np.ndarray:
    u = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    grids = np.meshgrid(*[u] * len(axes), indexing="ij")
    return sum(g.reshape(-1, 1) * a[None, :] for g, a in zip(grids, axes))


def _blur(img: np.ndarray) -> np.ndarray:
    for axis in range(img.ndim):
        img = convolve1d(img, BLUR_KERNEL, axis=axis, mode="nearest")
    return img


def render(mesh_t: TriMesh, spec: PhantomSpec, t: int, frames: dict[str, PlaneFrame] | None = None) -> FrameInputs:
    """Intensity images and boundary maps of frame ``t``.

    Intensity is the anti-aliased wall occupancy (1 inside, 0 outside),
    blurred with a 3-tap kernel per axis, plus seeded Gaussian noise.
    Boundary maps are the contours where the frame's mesh meets each plane.
    """
    frames = view_frames(spec) if frames is None else frames
    g = sax_geometry(spec)
    _check_cover(mesh_t, g, frames)
    rng = np.random.default_rng(spec.seed + t)

    offs = _subsample_offsets([g.affine[:, a] for a in range(3)])
    sa = _blur(_occupancy(spec, t, g.voxel_centers(), offs))
    if spec.noise_sigma > 0:
        sa = sa + rng.normal(0.0, spec.noise_sigma, sa.shape)
    planes, bounds = {}, {}
    for name in sorted(frames, key=lambda k: ("sa", "lax1", "lax2").index(k) if k in ("sa", "lax1", "lax2") else 9):
        fr = frames[name]
        offs2 = _subsample_offsets([fr.row_dir * fr.spacing[0], fr.col_dir * fr.spacing[1]])
        img = _blur(_occupancy(spec, t, fr.pixel_centers(), offs2))
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
        planes[name] = ImagePlane(fr, img)
        bounds[name] = boundary_map(mesh_t, fr)
    return FrameInputs(ImageVolume(g, sa), planes, bounds)


def _check_cover(mesh: TriMesh, g: VolumeGeometry, frames: dict[str, PlaneFrame]) -> None:
    ijk = g.world_to_voxel(mesh.vertices)
    if np.any(ijk < 0) or np.any(ijk > np.array(g.dims) - 1):
        raise PhantomSpecError("short-axis volume does not cover the mesh")
    for name, fr in frames.items():
        xyz = fr.world_to_plane(mesh.vertices)
        near = np.abs(xyz[:, 2] - fr.slice_coord) < 1.0
        if np.any(near) and (np.any(xyz[near, :2] < 0) or np.any(xyz[near, :2] > np.array(fr.dims) - 1)):
            raise PhantomSpecError(f"plane {name} does not cover the mesh section")


@dataclass(frozen=True, eq=False)
class Scene:
    spec: PhantomSpec
    mesh_0: TriMesh
    ed: FrameInputs
    t: int
    mesh_t: TriMesh
    dv: np.ndarray
    frame_t: FrameInputs


def make_scene(spec: PhantomSpec, t: int | None = None, mesh_0: TriMesh | None = None,
               ed: FrameInputs | None = None) -> Scene:
    """ED inputs plus frame ``t`` (default: peak contraction) with ground truth."""
    t = spec.peak_frame if t is None else t
    mesh_0 = make_mesh(spec) if mesh_0 is None else mesh_0
    ed = render(mesh_0, spec, 0) if ed is None else ed
    mesh_t, dv = deform(mesh_0, spec, t)
    return Scene(spec, mesh_0, ed, t, mesh_t, dv, render(mesh_t, spec, t))
