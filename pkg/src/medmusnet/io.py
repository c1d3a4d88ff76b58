"""On-disk formats for frame stacks and volumes.

Frame stack: a directory with ``manifest.json`` (geometry, payload kind, per
frame file name and angle) and one raw file per frame, row-major with the
radial index major and the axial index minor.

Volume: a JSON header plus a raw sibling file, x-fastest ordering.

Intensity payloads are little-endian float32, labels are uint8.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .geometry import INTENSITY, LABEL, FanGeometry, FrameStack, Volume

PathLike = Union[str, Path]

STACK_FORMAT = "medmusnet-framestack"
VOLUME_FORMAT = "medmusnet-volume"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"

_DTYPES = {INTENSITY: "<f4", LABEL: "|u1"}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_stack(directory: PathLike, stack: FrameStack) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(_DTYPES[stack.kind])
    entries = []
    for i, (angle, frame) in enumerate(zip(stack.geometry.angles_deg, stack.frames)):
        name = f"frame_{i:04d}.raw"
        np.ascontiguousarray(frame, dtype=dtype).tofile(d / name)
        entries.append({"file": name, "angle_deg": angle})
    manifest = {
        "format": STACK_FORMAT,
        "version": FORMAT_VERSION,
        "payload": stack.kind,
        "dtype": dtype.str,
        "row_order": "radial-major",
        "geometry": stack.geometry.to_dict(),
        "frames": entries,
    }
    _write_json(d / MANIFEST, manifest)
    return d / MANIFEST


def _manifest_path(path: PathLike) -> Path:
    p = Path(path)
    return p / MANIFEST if p.is_dir() else p


def read_geometry(path: PathLike) -> FanGeometry:
    """Geometry from a stack directory or a manifest file."""
    meta = json.loads(_manifest_path(path).read_text(encoding="utf-8"))
    return FanGeometry.from_dict(meta["geometry"])


def read_stack(path: PathLike) -> FrameStack:
    mpath = _manifest_path(path)
    meta = json.loads(mpath.read_text(encoding="utf-8"))
    if meta.get("format") != STACK_FORMAT:
        raise ValueError(f"{mpath} is not a frame-stack manifest")
    if meta.get("row_order", "radial-major") != "radial-major":
        raise ValueError(f"unsupported row order {meta['row_order']!r}")
    geom = FanGeometry.from_dict(meta["geometry"])
    angles = [e["angle_deg"] for e in meta["frames"]]
    if not np.allclose(angles, geom.angles_deg):
        raise ValueError("frame angles disagree with geometry")
    dtype = np.dtype(meta["dtype"])
    frames = np.stack(
        [np.fromfile(mpath.parent / e["file"], dtype=dtype).reshape(geom.frame_shape) for e in meta["frames"]]
    )
    return FrameStack(geom, frames, meta["payload"])


def _header_path(path: PathLike) -> Path:
    p = Path(path)
    return p if p.suffix == ".json" else p.with_name(p.name + ".json")


def write_volume(path: PathLike, vol: Volume) -> Path:
    header = _header_path(path)
    header.parent.mkdir(parents=True, exist_ok=True)
    raw = header.with_suffix(".raw")
    dtype = np.dtype(_DTYPES[vol.kind])
    vol.values.astype(dtype).ravel(order="F").tofile(raw)
    _write_json(
        header,
        {
            "format": VOLUME_FORMAT,
            "version": FORMAT_VERSION,
            "dims": list(vol.dims),
            "spacing_mm": list(vol.spacing_mm),
            "origin_mm": list(vol.origin_mm),
            "payload": vol.kind,
            "dtype": dtype.str,
            "order": "x-fastest",
            "data_file": raw.name,
        },
    )
    return header


def read_volume(path: PathLike) -> Volume:
    header = _header_path(path)
    meta = json.loads(header.read_text(encoding="utf-8"))
    if meta.get("format") != VOLUME_FORMAT:
        raise ValueError(f"{header} is not a volume header")
    dims = tuple(meta["dims"])
    flat = np.fromfile(header.parent / meta["data_file"], dtype=np.dtype(meta["dtype"]))
    values = flat.reshape(dims, order="F")
    if meta["payload"] == INTENSITY:
        values = values.astype(np.float64)
    return Volume(values, tuple(meta["spacing_mm"]), tuple(meta["origin_mm"]), meta["payload"])
