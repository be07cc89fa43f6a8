"""Readers and writers for meshes (OBJ subset), volumes and planes (raw + JSON).

Raw payloads are little-endian float32 with the first voxel axis varying
fastest. Three-channel volumes interleave the channels per voxel, so the
channel index varies fastest of all.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import ImagePlane, ImageVolume, PlaneFrame, TriMesh, VolumeGeometry


class FormatError(ValueError):
    """Malformed input file."""


def _base(path) -> Path:
    """Strip a ``.raw`` or ``.json`` suffix so either file names the pair."""
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        path = path.with_suffix("")
    return path


def _fmt(x: float) -> str:
    return repr(float(x))


def write_obj(mesh: TriMesh, path) -> None:
    lines = [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise FormatError(f"{path}:{lineno}: vertex needs three coordinates")
            verts.append([float(t) for t in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: only triangular faces are supported")
            faces.append([int(t.split("/")[0]) - 1 for t in parts[1:]])
    if not verts:
        raise FormatError(f"{path}: no vertices")
    return TriMesh(np.array(verts, dtype=float), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _write_raw(base: Path, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype="<f4")
    # channel-first transpose then Fortran ravel puts channel fastest, then x, y, z
    if arr.ndim == 4:
        arr = np.moveaxis(arr, 3, 0)
    base.with_suffix(".raw").write_bytes(arr.ravel(order="F").tobytes())


def _read_raw(base: Path, shape: tuple[int, ...], channels: int) -> np.ndarray:
    buf = np.frombuffer(base.with_suffix(".raw").read_bytes(), dtype="<f4")
    full = ((channels,) if channels > 1 else ()) + shape
    if buf.size != int(np.prod(full)):
        raise FormatError(f"{base}.raw: expected {int(np.prod(full))} floats, got {buf.size}")
    arr = buf.reshape(full, order="F").astype(float)
    if channels > 1:
        arr = np.moveaxis(arr, 0, -1)
    return arr


def _write_json(base: Path, meta: dict) -> None:
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def _read_json(base: Path) -> dict:
    try:
        return json.loads(base.with_suffix(".json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{base}.json: {exc}") from exc


def write_volume(vol: ImageVolume, path) -> None:
    base = _base(path)
    g = vol.geometry
    _write_json(base, {
        "dims": list(g.dims),
        "spacing": g.spacing.tolist(),
        "origin": g.origin.tolist(),
        "direction": g.direction.tolist(),
        "channels": vol.channels,
    })
    _write_raw(base, vol.data)


def read_volume(path) -> ImageVolume:
    base = _base(path)
    meta = _read_json(base)
    try:
        geom = VolumeGeometry(meta["dims"], meta["spacing"], meta["origin"], meta.get("direction", np.eye(3)))
        channels = int(meta.get("channels", 1))
    except KeyError as exc:
        raise FormatError(f"{base}.json: missing key {exc}") from exc
    if channels not in (1, 3):
        raise FormatError(f"{base}.json: channels must be 1 or 3")
    return ImageVolume(geom, _read_raw(base, geom.dims, channels))


def frame_to_dict(frame: PlaneFrame) -> dict:
    return {
        "dims": list(frame.dims),
        "spacing": frame.spacing.tolist(),
        "origin": frame.origin.tolist(),
        "row_dir": frame.row_dir.tolist(),
        "col_dir": frame.col_dir.tolist(),
        "normal": frame.normal.tolist(),
        "slice_coord": frame.slice_coord,
    }


def frame_from_dict(meta: dict) -> PlaneFrame:
    return PlaneFrame(
        meta["dims"], meta["spacing"], meta["origin"],
        meta["row_dir"], meta["col_dir"], meta["normal"], meta.get("slice_coord", 0.0),
    )


def write_plane(plane: ImagePlane, path, **extra) -> None:
    base = _base(path)
    _write_json(base, {**frame_to_dict(plane.frame), **extra})
    _write_raw(base, plane.data)


def read_plane(path) -> ImagePlane:
    base = _base(path)
    meta = _read_json(base)
    try:
        frame = frame_from_dict(meta)
    except KeyError as exc:
        raise FormatError(f"{base}.json: missing key {exc}") from exc
    return ImagePlane(frame, _read_raw(base, frame.dims, 1))


def plane_metadata(path) -> dict:
    return _read_json(_base(path))


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")
