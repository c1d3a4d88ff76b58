"""Synthetic prostate phantoms in fan geometry.

An analytic scene (ellipsoidal gland, hypoechoic ellipsoidal lesions, smooth
tissue texture) is rendered on a Cartesian grid, projected into the frame
stack and then multiplied by unit-mean gamma speckle. Labels are noise free.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .geometry import (
    INTENSITY,
    LABEL,
    FanGeometry,
    FrameStack,
    Volume,
    default_grid,
    project_to_frames,
    uniform_sweep,
)


def desk_geometry() -> FanGeometry:
    """16 frames over 60 degrees, 48 x 64 pixel frames at 0.5 mm."""
    return uniform_sweep(16, (-30.0, 30.0), axial_pixels=64, radial_pixels=48, pixel_spacing_mm=(0.5, 0.5))


@dataclass(frozen=True)
class Lesion:
    center_mm: Tuple[float, float, float]
    semi_axes_mm: Tuple[float, float, float]

    @property
    def volume_mm3(self) -> float:
        a, b, c = self.semi_axes_mm
        return 4.0 / 3.0 * np.pi * a * b * c


@dataclass
class PhantomConfig:
    seed: int = 0
    geometry: FanGeometry = field(default_factory=desk_geometry)
    prostate_center_mm: Optional[Tuple[float, float, float]] = None  # default: mid-fan
    prostate_semi_axes_mm: Tuple[float, float, float] = (8.0, 9.0, 11.0)
    n_lesions: int = 1
    lesion_radius_range_mm: Tuple[float, float] = (3.0, 5.0)
    lesions: Optional[Sequence[Lesion]] = None  # explicit lesions override sampling
    contrast: float = 1.5  # background / lesion echo ratio; 1 = invisible
    noise_scale: float = 0.3  # std of the multiplicative speckle
    edge_softness_mm: float = 0.5
    background_level: float = 60.0
    prostate_level: float = 120.0
    texture_amplitude: float = 0.1
    texture_scale_mm: float = 1.5
    shadows: bool = False
    n_shadows: int = 2
    shadow_attenuation: float = 0.4
    scene_spacing_mm: Optional[float] = None  # default: half the pixel spacing

    def __post_init__(self):
        if min(self.prostate_semi_axes_mm) <= 0 or min(self.lesion_radius_range_mm) <= 0:
            raise ValueError("radii must be positive")
        if self.lesion_radius_range_mm[0] > self.lesion_radius_range_mm[1]:
            raise ValueError("lesion radius range is reversed")
        if self.contrast <= 0:
            raise ValueError("contrast must be positive")
        if self.noise_scale < 0 or self.n_lesions < 0:
            raise ValueError("noise_scale and n_lesions must be non-negative")

    def center(self) -> np.ndarray:
        if self.prostate_center_mm is not None:
            return np.asarray(self.prostate_center_mm, dtype=float)
        g = self.geometry
        r = g.probe_radius_mm + 0.5 * g.radial_extent_mm
        th = np.deg2rad(0.5 * sum(g.angle_range))
        return np.array([r * np.cos(th), r * np.sin(th), 0.5 * g.axial_extent_mm])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = self.geometry.to_dict()
        if self.lesions is not None:
            d["lesions"] = [asdict(l) for l in self.lesions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        if "geometry" in d and isinstance(d["geometry"], dict):
            d["geometry"] = FanGeometry.from_dict(d["geometry"])
        if d.get("lesions") is not None:
            d["lesions"] = [Lesion(tuple(l["center_mm"]), tuple(l["semi_axes_mm"])) for l in d["lesions"]]
        for k in ("prostate_center_mm", "prostate_semi_axes_mm", "lesion_radius_range_mm"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Scene:
    intensity: Volume
    lesion_mask: Volume
    prostate_mask: Volume
    lesions: List[Lesion]


def _norm_radius(pts: np.ndarray, center, axes) -> np.ndarray:
    q = (pts - np.asarray(center)) / np.asarray(axes)
    return np.sqrt((q * q).sum(axis=-1))


def lesion_inside_prostate(lesion: Lesion, center, axes, n: int = 12) -> bool:
    """Conservative containment test on a sampled lesion surface."""
    u = np.linspace(0, np.pi, n)
    v = np.linspace(0, 2 * np.pi, 2 * n, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    a, b, c = lesion.semi_axes_mm
    surf = np.stack([a * np.sin(uu) * np.cos(vv), b * np.sin(uu) * np.sin(vv), c * np.cos(uu)], -1)
    surf = surf + np.asarray(lesion.center_mm)
    return bool(np.all(_norm_radius(surf, center, axes) <= 1.0))


def sample_lesions(cfg: PhantomConfig, rng: np.random.Generator) -> List[Lesion]:
    center = cfg.center()
    axes = np.asarray(cfg.prostate_semi_axes_mm)
    lo, hi = cfg.lesion_radius_range_mm
    out: List[Lesion] = []
    for _ in range(cfg.n_lesions):
        for _attempt in range(1000):
            semi = tuple(rng.uniform(lo, hi, 3).tolist())
            offset = rng.uniform(-1, 1, 3) * np.maximum(axes - max(semi), 0)
            cand = Lesion(tuple((center + offset).tolist()), semi)
            if lesion_inside_prostate(cand, center, axes) and all(
                _norm_radius(np.asarray(cand.center_mm), o.center_mm, np.asarray(o.semi_axes_mm) + max(semi)) > 1
                for o in out
            ):
                out.append(cand)
                break
        else:
            raise ValueError("could not place lesion inside the prostate; lesions too large")
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def render_scene(cfg: PhantomConfig) -> Scene:
    """Noise-free Cartesian scene covering the fan."""
    rng = np.random.default_rng(cfg.seed)
    g = cfg.geometry
    spacing = cfg.scene_spacing_mm or 0.5 * min(g.pixel_spacing_mm)
    grid = default_grid(g, spacing)
    pts = grid.world_coords()
    center = cfg.center()
    axes = np.asarray(cfg.prostate_semi_axes_mm)
    if cfg.lesions is not None:
        lesions = list(cfg.lesions)
        for les in lesions:
            if not lesion_inside_prostate(les, center, axes):
                raise ValueError(f"lesion at {les.center_mm} is not inside the prostate")
    else:
        lesions = sample_lesions(cfg, rng)

    soft = max(cfg.edge_softness_mm, 1e-6)
    rho = _norm_radius(pts, center, axes)
    gland = _sigmoid(-(rho - 1.0) * axes.min() / soft)
    prostate = rho <= 1.0

    lesion_soft = np.zeros(grid.dims)
    lesion_mask = np.zeros(grid.dims, dtype=bool)
    for les in lesions:
        la = np.asarray(les.semi_axes_mm)
        r = _norm_radius(pts, les.center_mm, la)
        lesion_mask |= r <= 1.0
        s = (r <= 1.0).astype(float) if cfg.edge_softness_mm <= 0 else _sigmoid(-(r - 1.0) * la.min() / soft)
        lesion_soft = np.maximum(lesion_soft, s)

    noise = rng.standard_normal(grid.dims)
    tex = ndimage.gaussian_filter(noise, cfg.texture_scale_mm / spacing)
    tex /= tex.std() + 1e-12
    base = cfg.background_level + (cfg.prostate_level - cfg.background_level) * gland
    base = base * (1.0 + cfg.texture_amplitude * tex)
    lesion_factor = 1.0 - lesion_soft * (1.0 - 1.0 / cfg.contrast)
    intensity = np.clip(base * lesion_factor, 0.0, 255.0)
    return Scene(
        intensity=grid.like(intensity, INTENSITY),
        lesion_mask=grid.like(lesion_mask.astype(np.uint8), LABEL),
        prostate_mask=grid.like(prostate.astype(np.uint8), LABEL),
        lesions=lesions,
    )


def _speckle(shape, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    if noise_scale <= 0:
        return np.ones(shape)
    k = 1.0 / noise_scale**2
    return rng.gamma(k, 1.0 / k, size=shape)


def _shadows(frames: np.ndarray, cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Attenuated stripes behind point reflectors, running outward along depth."""
    out = frames.copy()
    n_f, n_r, n_a = frames.shape
    for _ in range(cfg.n_shadows):
        f0 = rng.integers(0, n_f)
        f1 = min(n_f, f0 + rng.integers(1, max(2, n_f // 4)))
        a0 = rng.integers(0, n_a)
        a1 = min(n_a, a0 + rng.integers(2, max(3, n_a // 8)))
        r0 = rng.integers(n_r // 4, n_r // 2)
        out[f0:f1, r0:, a0:a1] *= cfg.shadow_attenuation
    return out


def generate(cfg: PhantomConfig):
    """Return (intensity FrameStack, label FrameStack, prostate mask Volume)."""
    scene = render_scene(cfg)
    g = cfg.geometry
    rng = np.random.default_rng([cfg.seed, 1])
    img = project_to_frames(scene.intensity, g, "trilinear")
    lab = project_to_frames(scene.lesion_mask, g, "nearest")
    frames = img.frames * _speckle(img.frames.shape, cfg.noise_scale, rng)
    if cfg.shadows:
        frames = _shadows(frames, cfg, rng)
    frames = np.clip(frames, 0.0, 255.0)
    return FrameStack(g, frames, INTENSITY), lab, scene.prostate_mask


def cohort(n: int, base_seed: int = 0, **overrides) -> List[PhantomConfig]:
    return [PhantomConfig(seed=base_seed + i, **overrides) for i in range(n)]
