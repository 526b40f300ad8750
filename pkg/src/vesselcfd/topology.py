"""Connected components, Betti numbers and the vascular-topology check.

Foreground uses 26-connectivity and background 6-connectivity.  Betti
numbers are derived from component counts plus the Euler characteristic of
the cubical complex formed by the closed foreground voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from vesselcfd.volume import VoxelVolume

STRUCT_6 = ndi.generate_binary_structure(3, 1)
STRUCT_26 = ndi.generate_binary_structure(3, 3)


def _as_bool(mask) -> np.ndarray:
    if isinstance(mask, VoxelVolume):
        return mask.data.astype(bool)
    return np.asarray(mask).astype(bool)


@dataclass(frozen=True)
class BettiNumbers:
    b0: int
    b1: int
    b2: int
    euler: int

    def __post_init__(self):
        if self.euler != self.b0 - self.b1 + self.b2:
            raise ValueError(f"inconsistent Betti numbers {self}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.b0, self.b1, self.b2)


@dataclass(frozen=True)
class TopologyPolicy:
    max_components: int = 1
    max_loops: int = 0
    max_cavities: int = 0


@dataclass(frozen=True)
class TopologyVerdict:
    betti: BettiNumbers | None
    vta: int
    reasons: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "betti": list(self.betti.as_tuple()) if self.betti else None,
            "euler": self.betti.euler if self.betti else None,
            "vta": self.vta,
            "reasons": list(self.reasons),
        }


def canonical_labels(labels: np.ndarray, count: int) -> tuple[np.ndarray, list[int]]:
    """Relabel 1..k by decreasing size; ties go to the smaller x-fastest linear index."""
    if count == 0:
        return labels, []
    flat = labels.ravel(order="F")
    sizes = np.bincount(flat, minlength=count + 1)[1:]
    fg = np.flatnonzero(flat)
    first = np.full(count, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[fg] - 1, fg)
    order = np.lexsort((first, -sizes))
    remap = np.zeros(count + 1, dtype=labels.dtype)
    remap[order + 1] = np.arange(1, count + 1, dtype=labels.dtype)
    return remap[labels], [int(sizes[i]) for i in order]


def connected_components(mask, connectivity: int = 26) -> tuple[VoxelVolume, list[int]]:
    """Label components 1..k by decreasing size; background stays 0."""
    if connectivity not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    arr = _as_bool(mask)
    labels, count = ndi.label(arr, structure=STRUCT_26 if connectivity == 26 else STRUCT_6)
    labels, sizes = canonical_labels(labels.astype(np.int32), count)
    if isinstance(mask, VoxelVolume):
        vol = VoxelVolume(labels, mask.spacing, mask.origin)
    else:
        vol = VoxelVolume(labels)
    return vol, sizes


def euler_characteristic(mask) -> int:
    """V - E + F - C of the cubical complex of closed foreground voxels."""
    a = np.pad(_as_bool(mask), 1)
    cubes = int(a.sum())
    # A lower-dimensional cell exists if any voxel containing it is foreground.
    fx = a[1:, :, :] | a[:-1, :, :]
    fy = a[:, 1:, :] | a[:, :-1, :]
    fz = a[:, :, 1:] | a[:, :, :-1]
    faces = int(fx.sum() + fy.sum() + fz.sum())
    ex = a[:, 1:, 1:] | a[:, :-1, 1:] | a[:, 1:, :-1] | a[:, :-1, :-1]
    ey = a[1:, :, 1:] | a[:-1, :, 1:] | a[1:, :, :-1] | a[:-1, :, :-1]
    ez = a[1:, 1:, :] | a[:-1, 1:, :] | a[1:, :-1, :] | a[:-1, :-1, :]
    edges = int(ex.sum() + ey.sum() + ez.sum())
    v = fx[:, 1:, 1:] | fx[:, :-1, 1:] | fx[:, 1:, :-1] | fx[:, :-1, :-1]
    verts = int(v.sum())
    return verts - edges + faces - cubes


def betti_numbers(mask) -> BettiNumbers:
    a = _as_bool(mask)
    _, b0 = ndi.label(a, structure=STRUCT_26)
    _, nbg = ndi.label(~np.pad(a, 1), structure=STRUCT_6)
    b2 = nbg - 1
    chi = euler_characteristic(a)
    return BettiNumbers(int(b0), int(b0 + b2 - chi), int(b2), int(chi))


def vta_check(mask, policy: TopologyPolicy | None = None) -> TopologyVerdict:
    policy = policy or TopologyPolicy()
    a = _as_bool(mask)
    if not a.any():
        return TopologyVerdict(None, 0, ["empty"])
    b = betti_numbers(a)
    reasons = []
    if b.b0 > policy.max_components:
        reasons.append(f"b0={b.b0}")
    if b.b1 > policy.max_loops:
        reasons.append(f"b1={b.b1}")
    if b.b2 > policy.max_cavities:
        reasons.append(f"b2={b.b2}")
    return TopologyVerdict(b, 0 if reasons else 1, reasons)
