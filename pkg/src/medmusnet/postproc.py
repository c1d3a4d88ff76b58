"""Morphological clean-up of predicted masks: closing, components, size filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# 0.03 x 0.03 mm pixels, 0.3 mm pseudo z-spacing between frames
REFERENCE_VOXEL_VOLUME_MM3 = 0.03 * 0.03 * 0.3
REFERENCE_MIN_VOXELS = 10000


def _binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.size and not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary (0/1)")
    return m.astype(bool)


def _structure(ndim: int, connectivity: int) -> np.ndarray:
    full = {2: 8, 3: 26}
    face = {2: 4, 3: 6}
    if connectivity == full.get(ndim):
        return ndimage.generate_binary_structure(ndim, ndim)
    if connectivity == face.get(ndim):
        return ndimage.generate_binary_structure(ndim, 1)
    raise ValueError(f"connectivity {connectivity} not valid in {ndim}-D")


def closing(mask, kernel_size: int = 3) -> np.ndarray:
    """Dilation then erosion with a ``kernel_size`` cube.

    The mask is treated as embedded in an infinite zero background, so voxels
    at the array border are not eroded away.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be a positive odd integer")
    m = _binary(mask)
    r = kernel_size // 2
    if r == 0:
        return m.astype(np.uint8)
    se = np.ones((kernel_size,) * m.ndim, dtype=bool)
    padded = np.pad(m, 2 * r)
    out = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)
    crop = tuple(slice(2 * r, 2 * r + s) for s in m.shape)
    return out[crop].astype(np.uint8)


@dataclass
class LabeledComponents:
    labels: np.ndarray  # 0 = background, components 1..K
    counts: np.ndarray  # counts[k - 1] = voxels in component k
    connectivity: int

    @property
    def n(self) -> int:
        return len(self.counts)


def connected_components(mask, connectivity: int = 26) -> LabeledComponents:
    m = _binary(mask)
    labels, k = ndimage.label(m, structure=_structure(m.ndim, connectivity))
    counts = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return LabeledComponents(labels.astype(np.int32), counts.astype(np.int64), connectivity)


def filter_small(components: LabeledComponents, min_voxels: int) -> np.ndarray:
    """Drop components with fewer than ``min_voxels`` voxels."""
    keep = np.zeros(components.n + 1, dtype=bool)
    keep[1:] = components.counts >= min_voxels
    return keep[components.labels].astype(np.uint8)


def scaled_min_voxels(voxel_volume_mm3: float, reference_min_voxels: int = REFERENCE_MIN_VOXELS) -> int:
    """Carry the full-resolution size threshold over to another voxel size."""
    return max(1, int(round(reference_min_voxels * REFERENCE_VOXEL_VOLUME_MM3 / voxel_volume_mm3)))


def postprocess(
    mask,
    kernel_size: int = 3,
    min_voxels: int = REFERENCE_MIN_VOXELS,
    connectivity: int = 26,
    per_frame: bool = False,
) -> np.ndarray:
    """closing -> connected components -> size filter.

    ``per_frame`` runs the 2-D variant on each slice along axis 0 (frames),
    with connectivity 8 or 4.
    """
    m = _binary(mask)
    if per_frame:
        conn = connectivity if connectivity in (4, 8) else 8
        return np.stack([postprocess(f, kernel_size, min_voxels, conn) for f in m])
    closed = closing(m, kernel_size)
    return filter_small(connected_components(closed, connectivity), min_voxels)
