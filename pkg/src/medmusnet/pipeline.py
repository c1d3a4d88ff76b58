"""Case-level plumbing shared by the command-line tools.

A synthetic case directory holds ``image/`` and ``label/`` frame stacks, the
Cartesian ``prostate`` mask and the generating ``phantom.json``. Networks are
trained and run on Cartesian reconstructions; predictions are projected back
to the frames for evaluation, where the ground truth lives.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import io
from .evaluation import CaseResult, SectorMap, evaluate_case, sector_partition
from .geometry import LABEL, FrameStack, Volume, default_grid, project_to_frames, reconstruct_cartesian
from .model import Model
from .phantom import PhantomConfig, generate
from .postproc import postprocess, scaled_min_voxels
from .training import normalize_intensity, predict_volume

log = logging.getLogger(__name__)

CASE_PREFIX = "case_"


@dataclass
class Case:
    name: str
    image: FrameStack
    label: FrameStack
    prostate: Volume


def write_case(directory, cfg: PhantomConfig) -> Path:
    d = Path(directory)
    img, lab, prostate = generate(cfg)
    io.write_stack(d / "image", img)
    io.write_stack(d / "label", lab)
    io.write_volume(d / "prostate.json", prostate)
    (d / "phantom.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def synth_cohort(out_dir, configs: Sequence[PhantomConfig]) -> List[Path]:
    out = Path(out_dir)
    return [write_case(out / f"{CASE_PREFIX}{i:04d}", c) for i, c in enumerate(configs)]


def case_dirs(root) -> List[Path]:
    dirs = sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith(CASE_PREFIX))
    if not dirs:
        raise FileNotFoundError(f"no {CASE_PREFIX}* directories under {root}")
    return dirs


def load_case(directory) -> Case:
    d = Path(directory)
    return Case(d.name, io.read_stack(d / "image"), io.read_stack(d / "label"), io.read_volume(d / "prostate.json"))


# ---------------------------------------------------------------------------
# Cartesian training data


def cartesian_pair(case: Case, spacing_mm: float) -> Tuple[Volume, Volume]:
    grid = default_grid(case.image.geometry, spacing_mm)
    img = reconstruct_cartesian(case.image, grid, "trilinear")
    lab = reconstruct_cartesian(case.label, grid, "nearest")
    return img, lab


def _fit(volume: np.ndarray, patch: Sequence[int]) -> np.ndarray:
    pad = [(0, max(0, p - s)) for p, s in zip(patch, volume.shape)]
    return np.pad(volume, pad) if any(p[1] for p in pad) else volume


def sample_crops(
    image: np.ndarray,
    labels: np.ndarray,
    patch: Sequence[int],
    n: int,
    rng: np.random.Generator,
    foreground_fraction: float = 0.5,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """``n`` patch crops; roughly ``foreground_fraction`` of them are centred on a
    random foreground voxel, the rest are placed uniformly."""
    image, labels = _fit(image, patch), _fit(labels, patch)
    fg = np.argwhere(labels > 0)
    out = []
    for i in range(n):
        if len(fg) and rng.random() < foreground_fraction:
            c = fg[rng.integers(len(fg))]
            start = [int(np.clip(ci - p // 2, 0, s - p)) for ci, p, s in zip(c, patch, image.shape)]
        else:
            start = [int(rng.integers(0, s - p + 1)) for p, s in zip(patch, image.shape)]
        sl = tuple(slice(a, a + p) for a, p in zip(start, patch))
        out.append((np.ascontiguousarray(image[sl]), np.ascontiguousarray(labels[sl])))
    return out


def training_patches(
    cases: Sequence[Case],
    patch: Sequence[int],
    spacing_mm: float,
    crops_per_case: int,
    seed: int,
    domain: str = "cartesian",
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Normalised ``(image, labels)`` patches. ``frames`` uses the native stacks
    (they must already match the patch size)."""
    rng = np.random.default_rng(seed)
    data = []
    for case in cases:
        if domain == "frames":
            data.append((normalize_intensity(case.image.frames), case.label.frames.astype(np.int64)))
            continue
        if domain != "cartesian":
            raise ValueError(f"unknown training domain {domain!r}")
        img, lab = cartesian_pair(case, spacing_mm)
        data.extend(sample_crops(normalize_intensity(img.values), lab.values.astype(np.int64), patch, crops_per_case, rng))
    return data


# ---------------------------------------------------------------------------
# inference and evaluation


def predict_stack(model: Model, stack: FrameStack, spacing_mm: float, overlap: float = 0.5) -> Volume:
    grid = default_grid(stack.geometry, spacing_mm)
    img = reconstruct_cartesian(stack, grid, "trilinear")
    pred = predict_volume(model, normalize_intensity(img.values), overlap=overlap)
    return grid.like(pred.mask, kind=LABEL)


def sector_map_on_frames(prostate: Volume, geom, sectors: int = 13, thirds: int = 3) -> SectorMap:
    """Partition the gland in world space, then carry region ids to the frames."""
    sm = sector_partition(prostate.values, sectors, thirds, prostate.spacing_mm, axis=2)
    regions = project_to_frames(prostate.like(sm.regions.astype(np.uint8), kind=LABEL), geom, "nearest").frames
    regions = regions.astype(np.int32)
    counts = np.bincount(regions.ravel(), minlength=sm.n_regions + 1)[1 : sm.n_regions + 1]
    return SectorMap(regions, sectors, thirds, counts)


@dataclass
class EvalOptions:
    kernel_size: int = 3
    min_voxels: Optional[int] = None  # default: scaled to the prediction voxel size
    connectivity: int = 26
    sectors: int = 13
    thirds: int = 3
    overlap_threshold: float = 0.20


def postprocess_volume(mask: Volume, opts: EvalOptions) -> Volume:
    k = opts.min_voxels if opts.min_voxels is not None else scaled_min_voxels(mask.voxel_volume_mm3)
    return mask.like(postprocess(mask.values, opts.kernel_size, k, opts.connectivity), kind=LABEL)


def evaluate_prediction(case: Case, pred_mask: Volume, opts: EvalOptions) -> Tuple[CaseResult, FrameStack]:
    """Post-process, project to the frames and score against the frame labels."""
    clean = postprocess_volume(pred_mask, opts)
    geom = case.label.geometry
    pred_frames = project_to_frames(clean, geom, "nearest")
    sm = sector_map_on_frames(case.prostate, geom, opts.sectors, opts.thirds)
    result = evaluate_case(
        case.name,
        pred_frames.frames,
        case.label.frames,
        sector_map=sm,
        overlap_threshold=opts.overlap_threshold,
    )
    return result, pred_frames
