"""Segmentation overlap/distance metrics, detection matching and the CFD applicability score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from vesselcfd.errors import ConsistencyError, UndefinedMetricError
from vesselcfd.topology import STRUCT_26
from vesselcfd.volume import VoxelVolume

# Detection matching: a GT is hit within max(equivalent radius, this) of its centroid.
MATCH_MIN_RADIUS_MM = 2.0


@dataclass(frozen=True)
class SegPair:
    """Prediction ``a`` and ground truth ``b`` on one grid."""

    a: np.ndarray
    b: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def of(cls, pred, gt, spacing=None) -> "SegPair":
        sp = spacing
        if isinstance(gt, VoxelVolume):
            sp = sp or gt.spacing
            if isinstance(pred, VoxelVolume) and not np.allclose(pred.spacing, gt.spacing):
                raise ValueError(f"spacing mismatch {pred.spacing} vs {gt.spacing}")
        a = pred.data if isinstance(pred, VoxelVolume) else np.asarray(pred)
        b = gt.data if isinstance(gt, VoxelVolume) else np.asarray(gt)
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
        return cls(a.astype(bool), b.astype(bool), tuple(float(s) for s in (sp or (1.0, 1.0, 1.0))))


def _pair(pred, gt=None) -> SegPair:
    if isinstance(pred, SegPair):
        return pred
    return SegPair.of(pred, gt)


def dice(pred, gt=None) -> float:
    p = _pair(pred, gt)
    total = int(p.a.sum()) + int(p.b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p.a & p.b).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour in the background (outside the grid counts)."""
    m = np.pad(np.asarray(mask, bool), 1)
    inner = ndi.binary_erosion(m, structure=ndi.generate_binary_structure(3, 1), border_value=0)
    return (m & ~inner)[1:-1, 1:-1, 1:-1]


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distances from every ``src`` voxel to the nearest ``dst`` voxel centre (mm)."""
    dist = ndi.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def surface_distances(pred, gt=None) -> np.ndarray:
    p = _pair(pred, gt)
    if not p.a.any() or not p.b.any():
        raise UndefinedMetricError("surface distance needs two non-empty masks")
    sa, sb = surface_voxels(p.a), surface_voxels(p.b)
    return np.concatenate([_directed(sa, sb, p.spacing), _directed(sb, sa, p.spacing)])


def hd95(pred, gt=None, percentile: float = 95.0) -> float:
    """Percentile of the pooled symmetric surface distances, linear interpolation."""
    return float(np.percentile(surface_distances(pred, gt), percentile))


def boundary_band(mask: np.ndarray, d: int = 1) -> np.ndarray:
    """Mask voxels within city-block distance ``d`` of the complement."""
    if d < 1:
        raise ValueError("band width must be at least 1 voxel")
    m = np.pad(np.asarray(mask, bool), d)
    depth = ndi.distance_transform_cdt(m, metric="taxicab")
    sl = tuple(slice(d, -d) for _ in range(3))
    return (m & (depth <= d))[sl]


def boundary_iou(pred, gt=None, d: int = 1) -> float:
    p = _pair(pred, gt)
    ba, bb = boundary_band(p.a, d), boundary_band(p.b, d)
    union = int((ba | bb).sum())
    if union == 0:
        return 1.0
    return int((ba & bb).sum()) / union


def cl_dice(pred, gt=None, literal: bool = False) -> float:
    """Topology precision/sensitivity harmonic mean over thinning skeletons.

    ``literal=True`` gives the Dice of the two skeletons instead, which is
    near zero for any misalignment.
    """
    from vesselcfd._thinning import thin

    p = _pair(pred, gt)
    if not p.a.any() or not p.b.any():
        raise UndefinedMetricError("clDice needs two non-empty masks")
    sa, sb = thin(p.a), thin(p.b)
    if not sa.any() or not sb.any():
        raise UndefinedMetricError("empty skeleton")
    if literal:
        return 2.0 * int((sa & sb).sum()) / (int(sa.sum()) + int(sb.sum()))
    tprec = int((sa & p.b).sum()) / int(sa.sum())
    tsens = int((sb & p.a).sum()) / int(sb.sum())
    if tprec + tsens == 0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


# ------------------------------------------------------------------ detection

@dataclass
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    matches: list[tuple[int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.matches + other.matches)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "matches": [[int(a), int(b), float(d)] for a, b, d in self.matches]}


def match_detections(pred_centers, gt_regions, min_radius_mm: float = MATCH_MIN_RADIUS_MM) -> DetectionCounts:
    """Greedy one-to-one matching of predicted centres (mm) to GT aneurysm masks.

    A pair is eligible when the centre falls in the GT mask dilated by one
    voxel (26-neighbourhood) or lies within max(equivalent radius,
    ``min_radius_mm``) of the GT centroid.  Eligible pairs are taken by
    ascending centroid distance, ties by (pred, gt) index.
    """
    centers = np.asarray(pred_centers, float).reshape(-1, 3)
    if not np.isfinite(centers).all():
        raise ValueError("prediction centres must be finite")
    pairs = []
    for g, region in enumerate(gt_regions):
        m = region.bool()
        if not m.any():
            continue
        idx = np.argwhere(m)
        centroid = region.index_to_mm(idx.mean(axis=0))
        r_eq = (3.0 * len(idx) * region.voxel_volume_mm3() / (4.0 * math.pi)) ** (1.0 / 3.0)
        reach = max(r_eq, min_radius_mm)
        grown = ndi.binary_dilation(m, structure=STRUCT_26)
        for p, c in enumerate(centers):
            d = float(np.linalg.norm(c - centroid))
            ijk = np.rint(region.mm_to_index(c)).astype(int)
            inside = bool((ijk >= 0).all() and (ijk < m.shape).all() and grown[tuple(ijk)])
            if inside or d <= reach:
                pairs.append((d, p, g))
    pairs.sort()
    used_p, used_g, matches = set(), set(), []
    for d, p, g in pairs:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        matches.append((p, g, d))
    n_gt = sum(1 for r in gt_regions if r.bool().any())
    return DetectionCounts(len(matches), len(centers) - len(matches), n_gt - len(matches), matches)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def f1_score(pr: float, re: float) -> float:
    return _ratio(2.0 * pr * re, pr + re)


def prf(counts: DetectionCounts) -> tuple[float, float, float, float]:
    """(precision, recall, accuracy, F1); every 0/0 is 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    pr = _ratio(tp, tp + fp)
    re = _ratio(tp, tp + fn)
    acc = _ratio(tp, tp + fp + fn)
    return pr, re, acc, f1_score(pr, re)


@dataclass(frozen=True)
class ApplicabilityRecord:
    vta: int
    mga: int
    bfa: int
    case_id: str | None = None

    def __post_init__(self):
        for name in ("vta", "mga", "bfa"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")

    @property
    def ae(self) -> int:
        return int(self.vta and self.mga and self.bfa)

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "vta": self.vta, "mga": self.mga, "bfa": self.bfa, "ae": self.ae}


def cfd_as_from_counts(tp: int, fp: int, fn: int, tp_hat: int) -> float:
    if not 0 <= tp_hat <= tp:
        raise ConsistencyError(f"applicable cases {tp_hat} must lie in [0, TP={tp}]")
    return _ratio(tp_hat, tp + fp + fn)


def cfd_as(counts: DetectionCounts, records) -> float:
    """Applicable true positives over TP + FP + FN."""
    records = list(records)
    if len(records) != counts.tp:
        raise ConsistencyError(f"{len(records)} applicability records for {counts.tp} true positives")
    return cfd_as_from_counts(counts.tp, counts.fp, counts.fn, sum(r.ae for r in records))
