"""Cylindrical frame-stack <-> Cartesian volume mapping.

World frame: the probe axis is ``z``; the frame at rotation angle 0 lies in
the x-z half-plane with ``x > 0``. A pixel at axial column ``u`` and radial
row ``v`` of frame ``i`` sits at

    l = u * axial_spacing,  d = probe_radius + v * radial_spacing
    (x, y, z) = (d cos(theta_i), d sin(theta_i), l)

Frames are stored row-major with shape (radial_pixels, axial_pixels).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

INTENSITY = "intensity"
LABEL = "label"
PAYLOAD_KINDS = (INTENSITY, LABEL)

DEFAULT_PROBE_RADIUS_MM = 10.0
# absorbs rounding in the polar round trip (mm and degrees)
COVERAGE_TOL = 1e-9


@dataclass(frozen=True)
class FanGeometry:
    angles_deg: Tuple[float, ...]
    axial_pixels: int
    radial_pixels: int
    pixel_spacing_mm: Tuple[float, float] = (0.03, 0.03)  # (axial, radial)
    probe_radius_mm: float = DEFAULT_PROBE_RADIUS_MM

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles_deg)
        object.__setattr__(self, "angles_deg", angles)
        object.__setattr__(self, "pixel_spacing_mm", tuple(float(s) for s in self.pixel_spacing_mm))
        if len(angles) < 2:
            raise ValueError("a frame stack needs at least two angles")
        steps = np.diff(angles)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise ValueError("angles_deg must be strictly monotonic")
        if len(self.pixel_spacing_mm) != 2 or min(self.pixel_spacing_mm) <= 0:
            raise ValueError("pixel spacings must be positive")
        if self.probe_radius_mm < 0:
            raise ValueError("probe_radius_mm must be >= 0")
        if self.axial_pixels < 1 or self.radial_pixels < 1:
            raise ValueError("frame dimensions must be >= 1")

    @property
    def n_frames(self) -> int:
        return len(self.angles_deg)

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return (self.radial_pixels, self.axial_pixels)

    @property
    def axial_extent_mm(self) -> float:
        return (self.axial_pixels - 1) * self.pixel_spacing_mm[0]

    @property
    def radial_extent_mm(self) -> float:
        return (self.radial_pixels - 1) * self.pixel_spacing_mm[1]

    @property
    def angle_range(self) -> Tuple[float, float]:
        return (min(self.angles_deg), max(self.angles_deg))

    def reversed(self) -> "FanGeometry":
        return replace(self, angles_deg=tuple(reversed(self.angles_deg)))

    def to_dict(self) -> dict:
        return {
            "angles_deg": list(self.angles_deg),
            "axial_pixels": self.axial_pixels,
            "radial_pixels": self.radial_pixels,
            "pixel_spacing_mm": list(self.pixel_spacing_mm),
            "probe_radius_mm": self.probe_radius_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FanGeometry":
        return cls(
            angles_deg=tuple(d["angles_deg"]),
            axial_pixels=int(d["axial_pixels"]),
            radial_pixels=int(d["radial_pixels"]),
            pixel_spacing_mm=tuple(d["pixel_spacing_mm"]),
            probe_radius_mm=float(d["probe_radius_mm"]),
        )


def uniform_sweep(
    n_frames: int,
    span_deg: Tuple[float, float],
    axial_pixels: int,
    radial_pixels: int,
    pixel_spacing_mm=(0.03, 0.03),
    probe_radius_mm: float = DEFAULT_PROBE_RADIUS_MM,
) -> FanGeometry:
    angles = np.linspace(span_deg[0], span_deg[1], n_frames)
    return FanGeometry(tuple(angles.tolist()), axial_pixels, radial_pixels, tuple(pixel_spacing_mm), probe_radius_mm)


@dataclass
class FrameStack:
    geometry: FanGeometry
    frames: np.ndarray  # (n_frames, radial_pixels, axial_pixels)
    kind: str = INTENSITY

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if self.kind not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload kind {self.kind!r}")
        expect = (self.geometry.n_frames,) + self.geometry.frame_shape
        if frames.shape != expect:
            raise ValueError(f"frames have shape {frames.shape}, geometry implies {expect}")
        if self.kind == INTENSITY:
            frames = frames.astype(np.float64, copy=False)
            if not np.all(np.isfinite(frames)):
                raise ValueError("intensity frames must be finite")
        else:
            if frames.size and frames.min() < 0:
                raise ValueError("label frames must be non-negative")
            frames = frames.astype(np.uint8, copy=False)
        self.frames = frames

    def reversed(self) -> "FrameStack":
        return FrameStack(self.geometry.reversed(), self.frames[::-1].copy(), self.kind)


@dataclass
class Volume:
    """Cartesian grid. ``values[i, j, k]`` is the voxel at ``origin + (i, j, k) * spacing``."""

    values: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = INTENSITY

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume values must be 3-D with dims >= 1, got {v.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError("spacing must be three positive values")
        if self.kind not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload kind {self.kind!r}")
        if self.kind == LABEL:
            if v.size and v.min() < 0:
                raise ValueError("label volumes must be non-negative")
            v = v.astype(np.uint8, copy=False)
        self.values = v

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing_mm))

    def like(self, values: np.ndarray, kind: Optional[str] = None) -> "Volume":
        return Volume(values, self.spacing_mm, self.origin_mm, kind or self.kind)

    def world_coords(self) -> np.ndarray:
        """(nx, ny, nz, 3) voxel-centre positions in mm."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin_mm, self.spacing_mm, self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def same_grid(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing_mm, other.spacing_mm)
            and np.allclose(self.origin_mm, other.origin_mm)
        )


def grid_template(dims, spacing_mm, origin_mm, kind: str = INTENSITY) -> Volume:
    return Volume(np.zeros(tuple(dims)), spacing_mm, origin_mm, kind)


def default_grid(geom: FanGeometry, spacing_mm: Optional[float] = None, kind: str = INTENSITY) -> Volume:
    """Grid covering the bounding box of the swept fan.

    Spacing defaults to the smaller in-plane pixel spacing (isotropic).
    """
    s = float(spacing_mm) if spacing_mm else min(geom.pixel_spacing_mm)
    th = np.deg2rad(np.linspace(*geom.angle_range, 181))
    r_in, r_out = geom.probe_radius_mm, geom.probe_radius_mm + geom.radial_extent_mm
    xs = np.concatenate([r_in * np.cos(th), r_out * np.cos(th)])
    ys = np.concatenate([r_in * np.sin(th), r_out * np.sin(th)])
    lo = np.array([xs.min(), ys.min(), 0.0])
    hi = np.array([xs.max(), ys.max(), geom.axial_extent_mm])
    dims = np.ceil((hi - lo) / s - 1e-9).astype(int) + 1
    return grid_template(dims, (s, s, s), tuple(lo), kind)


# ---------------------------------------------------------------------------
# point maps


def frame_to_world(geom: FanGeometry, frame_index: int, u, v) -> np.ndarray:
    """World position (mm) of pixel (u axial, v radial) in frame ``frame_index``."""
    if not 0 <= frame_index < geom.n_frames:
        raise IndexError(f"frame index {frame_index} outside 0..{geom.n_frames - 1}")
    theta = np.deg2rad(geom.angles_deg[frame_index])
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    ax, rad = geom.pixel_spacing_mm
    d = geom.probe_radius_mm + v * rad
    return np.stack(np.broadcast_arrays(d * np.cos(theta), d * np.sin(theta), u * ax), axis=-1)


@dataclass
class FanCoords:
    theta_deg: np.ndarray
    depth_mm: np.ndarray
    axial_mm: np.ndarray
    in_coverage: np.ndarray


def world_to_fan(geom: FanGeometry, points) -> FanCoords:
    """Inverse of :func:`frame_to_world` for points at radius >= probe radius."""
    p = np.asarray(points, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    theta = np.rad2deg(np.arctan2(y, x))
    depth = np.hypot(x, y) - geom.probe_radius_mm
    lo, hi = geom.angle_range
    eps = COVERAGE_TOL
    inside = (
        (theta >= lo - eps)
        & (theta <= hi + eps)
        & (depth >= -eps)
        & (depth <= geom.radial_extent_mm + eps)
        & (z >= -eps)
        & (z <= geom.axial_extent_mm + eps)
    )
    return FanCoords(theta, depth, z, inside)


def _sorted_frames(geom: FanGeometry, frames: np.ndarray):
    angles = np.asarray(geom.angles_deg)
    if angles[0] > angles[-1]:
        return angles[::-1], frames[::-1]
    return angles, frames


def coverage_mask(geom: FanGeometry, grid: Volume) -> Volume:
    fc = world_to_fan(geom, grid.world_coords())
    return grid.like(fc.in_coverage.astype(np.uint8), kind=LABEL)


# ---------------------------------------------------------------------------
# resampling


def _order(interp: str, kind: str) -> int:
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if kind == LABEL and interp != "nearest":
        raise ValueError("label payloads must use nearest interpolation")
    return 1 if interp == "trilinear" else 0


def _nearest_index(idx: np.ndarray) -> np.ndarray:
    # round half up, deterministic across platforms
    return np.floor(idx + 0.5).astype(np.intp)


def reconstruct_cartesian(
    stack: FrameStack,
    grid: Volume,
    interp: str = "trilinear",
    fill_value: float = 0.0,
) -> Volume:
    """Scan-convert a frame stack onto a Cartesian grid.

    Trilinear means linear in angle between the two bracketing frames and
    bilinear within each frame.
    """
    order = _order(interp, stack.kind)
    geom = stack.geometry
    angles, frames = _sorted_frames(geom, stack.frames)
    fc = world_to_fan(geom, grid.world_coords())
    m = fc.in_coverage
    fi = np.interp(fc.theta_deg[m], angles, np.arange(len(angles)))
    vi = fc.depth_mm[m] / geom.pixel_spacing_mm[1]
    ui = fc.axial_mm[m] / geom.pixel_spacing_mm[0]
    out = np.full(grid.dims, fill_value, dtype=np.float64)
    if order == 1:
        out[m] = ndimage.map_coordinates(frames.astype(np.float64), [fi, vi, ui], order=1, mode="nearest")
        return grid.like(out, kind=stack.kind)
    idx = [np.clip(_nearest_index(c), 0, n - 1) for c, n in zip((fi, vi, ui), frames.shape)]
    out[m] = frames[idx[0], idx[1], idx[2]]
    return grid.like(out, kind=stack.kind)


@functools.lru_cache(maxsize=4)
def _nearest_covered(geom: FanGeometry, dims, spacing_mm, origin_mm):
    """Index arrays mapping every voxel to its nearest in-coverage voxel."""
    cov = coverage_mask(geom, grid_template(dims, spacing_mm, origin_mm)).values.astype(bool)
    if not cov.any() or cov.all():
        return None
    near = ndimage.distance_transform_edt(~cov, sampling=spacing_mm, return_distances=False, return_indices=True)
    return tuple(near)


def project_to_frames(
    vol: Volume,
    geom: FanGeometry,
    interp: str = "trilinear",
    fill_value: float = 0.0,
) -> FrameStack:
    """Sample a Cartesian volume at every frame pixel (backward projection)."""
    order = _order(interp, vol.kind)
    ax, rad = geom.pixel_spacing_mm
    v = np.arange(geom.radial_pixels)[:, None]
    u = np.arange(geom.axial_pixels)[None, :]
    d = geom.probe_radius_mm + v * rad
    l = u * ax
    theta = np.deg2rad(np.asarray(geom.angles_deg))[:, None, None]
    pts = [
        np.broadcast_to(d * np.cos(theta), (geom.n_frames,) + geom.frame_shape),
        np.broadcast_to(d * np.sin(theta), (geom.n_frames,) + geom.frame_shape),
        np.broadcast_to(l, (geom.n_frames,) + geom.frame_shape),
    ]
    idx = [(p - o) / s for p, o, s in zip(pts, vol.origin_mm, vol.spacing_mm)]
    tol = 1e-9
    inside = np.ones(idx[0].shape, dtype=bool)
    for c, n in zip(idx, vol.dims):
        inside &= (c >= -tol) & (c <= n - 1 + tol)
    frames = np.full(idx[0].shape, fill_value, dtype=np.float64)
    if order == 1:
        # Edge-extend the fan into the out-of-coverage voxels so pixels on the
        # fan boundary do not blend in the fill value.
        values = vol.values.astype(np.float64)
        near = _nearest_covered(geom, vol.dims, vol.spacing_mm, vol.origin_mm)
        if near is not None:
            values = values[near]
        frames[inside] = ndimage.map_coordinates(values, [c[inside] for c in idx], order=1, mode="nearest")
    else:
        ii = [np.clip(_nearest_index(c[inside]), 0, n - 1) for c, n in zip(idx, vol.dims)]
        frames[inside] = vol.values[ii[0], ii[1], ii[2]]
    return FrameStack(geom, frames, vol.kind)
