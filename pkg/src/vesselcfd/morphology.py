"""Mask preprocessing: majority (median) smoothing, hole filling, largest component."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from vesselcfd.topology import STRUCT_6, connected_components
from vesselcfd.volume import VoxelVolume


class EmptyMaskWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    """Preprocessing knobs.

    ``median_kernel_mm`` is the full window width (diameter); the per-axis
    window radius in voxels is ``round(kernel / (2 * spacing))``.
    """

    median_kernel_mm: float = 1.0
    fill_hole_max_voxels: int = 64
    keep_largest: bool = True

    def __post_init__(self):
        if self.median_kernel_mm < 0 or self.fill_hole_max_voxels < 0:
            raise ValueError("preprocess parameters must be non-negative")

    def radii(self, spacing) -> tuple[int, int, int]:
        return kernel_radii(self.median_kernel_mm, spacing)


def kernel_radii(kernel_mm: float, spacing) -> tuple[int, int, int]:
    # Python's round() is half-to-even; use half-up for a stable window size.
    return tuple(max(0, int(np.floor(kernel_mm / (2.0 * s) + 0.5))) for s in spacing)


def _box_sum(a: np.ndarray, radii) -> np.ndarray:
    """Exact integer window sums with edge replication at the borders."""
    out = np.pad(a.astype(np.int64), [(r, r) for r in radii], mode="edge")
    for ax, r in enumerate(radii):
        if r == 0:
            continue
        c = np.cumsum(out, axis=ax)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=ax)), c], axis=ax)
        n = out.shape[ax]
        hi = np.take(c, np.arange(2 * r + 1, n + 1), axis=ax)
        lo = np.take(c, np.arange(0, n - 2 * r), axis=ax)
        out = hi - lo
    return out


def median_filter(mask: VoxelVolume, kernel_mm: float = 1.0) -> VoxelVolume:
    """Binary median as a majority vote over an anisotropic box window."""
    radii = kernel_radii(kernel_mm, mask.spacing)
    if not any(radii):
        return mask
    a = mask.data.astype(bool)
    counts = _box_sum(a, radii)
    n = int(np.prod([2 * r + 1 for r in radii]))
    out = np.where(2 * counts > n, True, np.where(2 * counts < n, False, a))
    return mask.like(out.astype(np.uint8))


def fill_small_holes(mask: VoxelVolume, max_voxels: int = 64) -> VoxelVolume:
    """Fill enclosed background pockets (6-connected) of at most ``max_voxels``."""
    a = mask.data.astype(bool)
    bg = np.pad(~a, 1, constant_values=True)  # outside the grid is background
    labels, n = ndi.label(bg, structure=STRUCT_6)
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    outside = np.unique(np.concatenate([
        labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(),
        labels[:, -1].ravel(), labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
    ]))
    fill = (sizes <= max_voxels)
    fill[0] = False
    fill[outside] = False
    if not fill.any():
        return mask
    out = a | fill[labels][1:-1, 1:-1, 1:-1]
    return mask.like(out.astype(np.uint8))


def keep_largest_component(mask: VoxelVolume) -> VoxelVolume:
    labels, sizes = connected_components(mask, 26)
    if not sizes:
        warnings.warn("keep_largest_component received an empty mask", EmptyMaskWarning, stacklevel=2)
        return mask
    if len(sizes) == 1:
        return mask
    return mask.like((labels.data == 1).astype(np.uint8))


def preprocess(mask: VoxelVolume, cfg: PreprocessConfig | None = None) -> VoxelVolume:
    """median -> fill small holes -> largest component."""
    cfg = cfg or PreprocessConfig()
    out = median_filter(mask, cfg.median_kernel_mm)
    out = fill_small_holes(out, cfg.fill_hole_max_voxels)
    if cfg.keep_largest:
        out = keep_largest_component(out)
    return out
