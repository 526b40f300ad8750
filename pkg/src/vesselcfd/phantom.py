"""Synthetic vascular phantoms with known geometry, plus controlled defects.

A voxel belongs to a phantom when its centre lies inside the analytic
shape.  Every phantom records its analytic Betti numbers, surface area,
volume, axis polyline and open-end count so tests can check the pipeline
against ground truth.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from vesselcfd.centerline import CenterlineGraph
from vesselcfd.errors import ResolutionError, VolumeWriteError
from vesselcfd.topology import betti_numbers
from vesselcfd.volume import VoxelVolume, save_volume


class Shape(str, enum.Enum):
    STRAIGHT_TUBE = "straight-tube"
    CURVED_TUBE = "curved-tube"
    BIFURCATION = "bifurcation"
    TUBE_WITH_ANEURYSM = "tube-with-aneurysm"
    TORUS = "torus"
    HOLLOW_SHELL = "hollow-shell"
    SPHERE = "sphere"


class DefectKind(str, enum.Enum):
    ADHESION_BRIDGE = "adhesion-bridge"
    INTERNAL_CAVITY = "internal-cavity"
    BREAK = "break"
    SURFACE_SPIKE = "surface-spike"
    SURFACE_DENT = "surface-dent"
    STUB_BRANCH = "stub-branch"


# Betti change each defect produces on a tube-like mask.
DEFECT_BETTI_DELTA = {
    DefectKind.ADHESION_BRIDGE: (0, 1, 0),
    DefectKind.INTERNAL_CAVITY: (0, 0, 1),
    DefectKind.BREAK: (1, 0, 0),
    DefectKind.SURFACE_SPIKE: (0, 0, 0),
    DefectKind.SURFACE_DENT: (0, 0, 0),
    DefectKind.STUB_BRANCH: (0, 0, 0),
}

# Pipeline flag each defect is built to knock out; spikes and dents are
# meant to be absorbed by preprocessing.
DEFECT_FLAG = {
    DefectKind.ADHESION_BRIDGE: "vta",
    DefectKind.INTERNAL_CAVITY: "vta",
    DefectKind.BREAK: "vta",
    DefectKind.STUB_BRANCH: "mga",
}
FLAG_ORDER = ("vta", "mga", "bfa")
# A solve capped at this many steps cannot reach the residual tolerance.
FORCED_STOP_STEPS = 10

DAUGHTER_RADIUS_RATIO = 0.8
BIFURCATION_HALF_ANGLE = math.radians(35.0)


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom parameters (lengths in mm).

    ``length_mm`` is the axis length for tubes (trunk + one daughter for a
    bifurcation), the outer diameter for a hollow shell (wall thickness is
    ``radius_mm``) and, when ``major_radius_mm`` is unset, the centreline
    circumference of a torus.
    """

    shape: Shape
    radius_mm: float
    length_mm: float = 20.0
    aneurysm_radius_mm: float | None = None
    spacing_mm: float | tuple[float, float, float] = 0.5
    seed: int = 0
    major_radius_mm: float | None = None
    margin_voxels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape(self.shape))
        sp = self.spacing_mm
        sp = (float(sp),) * 3 if np.isscalar(sp) else tuple(float(s) for s in sp)
        object.__setattr__(self, "spacing_mm", sp)
        if self.radius_mm <= 0 or self.length_mm <= 0 or min(sp) <= 0:
            raise ValueError("radius, length and spacing must be positive")

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.spacing_mm


@dataclass(frozen=True)
class DefectSpec:
    kind: DefectKind
    location: float = 0.5
    magnitude_voxels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", DefectKind(self.kind))
        if not 0.0 <= self.location <= 1.0:
            raise ValueError("defect location must lie in [0, 1]")
        if self.magnitude_voxels < 1:
            raise ValueError("defect magnitude must be at least one voxel")


@dataclass
class GroundTruthFacts:
    shape: str
    betti: tuple[int, int, int]
    radius_mm: float
    length_mm: float
    surface_area_mm2: float | None
    volume_mm3: float | None
    open_ends: int
    centerline_points: list[list[float]]
    aneurysm_center_mm: list[float] | None = None
    aneurysm_radius_mm: float | None = None
    analytic_wss_pa: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betti"] = list(self.betti)
        return {k: v for k, v in d.items() if v is not None}


# ---------------------------------------------------------------- geometry

def _segment_cylinder(p, a, b, r):
    """Inside test for a flat-ended cylinder around segment a-b."""
    ab = b - a
    t = ((p - a) @ ab) / (ab @ ab)
    q = a + t[:, None] * ab
    d2 = ((p - q) ** 2).sum(axis=1)
    return (t >= 0) & (t <= 1) & (d2 <= r * r)


def _ball(p, c, r):
    return ((p - c) ** 2).sum(axis=1) <= r * r


def _polyline(points, step):
    """Resample a polyline at roughly ``step`` spacing, keeping its vertices."""
    out = [np.asarray(points[0], float)]
    for a, b in zip(points[:-1], points[1:]):
        a, b = np.asarray(a, float), np.asarray(b, float)
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
        for k in range(1, n + 1):
            out.append(a + (b - a) * k / n)
    return np.array(out)


class _Geometry:
    """Analytic shape description used to voxelize one phantom."""

    def __init__(self, spec: PhantomSpec):
        self.spec = spec
        r, L = spec.radius_mm, spec.length_mm
        step = min(spec.spacing)
        self.aneurysm_center = None
        self.aneurysm_radius = None
        self.lumen_radii = [r]
        shape = spec.shape
        if shape is Shape.STRAIGHT_TUBE:
            a, b = np.zeros(3), np.array([0.0, 0.0, L])
            self.inside = lambda p: _segment_cylinder(p, a, b, r)
            self.lo, self.hi = np.array([-r, -r, 0.0]), np.array([r, r, L])
            self.axis = [_polyline([a, b], step)]
            self.betti, self.open_ends = (1, 0, 0), 2
            self.area, self.volume = 2 * math.pi * r * L + 2 * math.pi * r * r, math.pi * r * r * L
        elif shape is Shape.CURVED_TUBE:
            bend = max(2.0 * L / math.pi, 3.0 * r)
            theta = L / bend
            centre = np.array([bend, 0.0, 0.0])

            def inside(p):
                q = p - centre
                ang = np.arctan2(q[:, 2], -q[:, 0])
                rho = np.hypot(q[:, 0], q[:, 2])
                return (ang >= 0) & (ang <= theta) & ((rho - bend) ** 2 + q[:, 1] ** 2 <= r * r)

            self.inside = inside
            n = max(2, int(math.ceil(L / step)) + 1)
            ang = np.linspace(0, theta, n)
            pts = np.stack([bend - bend * np.cos(ang), np.zeros(n), bend * np.sin(ang)], axis=1)
            self.axis = [pts]
            self.lo = pts.min(axis=0) - r
            self.hi = pts.max(axis=0) + r
            self.betti, self.open_ends = (1, 0, 0), 2
            self.area, self.volume = 2 * math.pi * r * L + 2 * math.pi * r * r, math.pi * r * r * L
        elif shape is Shape.BIFURCATION:
            rd = DAUGHTER_RADIUS_RATIO * r
            self.lumen_radii = [r, rd]
            lt = L / 2
            j = np.array([0.0, 0.0, lt])
            ends = [j + (L / 2) * np.array([s * math.sin(BIFURCATION_HALF_ANGLE), 0.0, math.cos(BIFURCATION_HALF_ANGLE)])
                    for s in (-1, 1)]
            a = np.zeros(3)

            def inside(p):
                m = _segment_cylinder(p, a, j, r) | _ball(p, j, r)
                for e in ends:
                    m |= _segment_cylinder(p, j, e, rd)
                return m

            self.inside = inside
            pts = np.array([a, j, *ends])
            self.lo, self.hi = pts.min(axis=0) - r, pts.max(axis=0) + r
            self.axis = [_polyline([a, j], step)] + [_polyline([j, e], step) for e in ends]
            self.betti, self.open_ends = (1, 0, 0), 3
            self.area = self.volume = None
        elif shape is Shape.TUBE_WITH_ANEURYSM:
            ra = spec.aneurysm_radius_mm or 1.5 * r
            a, b = np.zeros(3), np.array([0.0, 0.0, L])
            c = np.array([r + 0.5 * ra, 0.0, L / 2])
            self.inside = lambda p: _segment_cylinder(p, a, b, r) | _ball(p, c, ra)
            self.lo = np.minimum([-r, -r, 0.0], c - ra)
            self.hi = np.maximum([r, r, L], c + ra)
            self.axis = [_polyline([a, b], step)]
            self.betti, self.open_ends = (1, 0, 0), 2
            self.area = self.volume = None
            self.aneurysm_center, self.aneurysm_radius = c, ra
        elif shape is Shape.TORUS:
            big = spec.major_radius_mm or L / (2 * math.pi)
            if big <= r:
                raise ValueError("torus major radius must exceed the minor radius")
            self.inside = lambda p: (np.hypot(p[:, 0], p[:, 1]) - big) ** 2 + p[:, 2] ** 2 <= r * r
            self.lo, self.hi = np.array([-big - r, -big - r, -r]), np.array([big + r, big + r, r])
            n = max(8, int(math.ceil(2 * math.pi * big / step)))
            ang = np.linspace(0, 2 * math.pi, n + 1)
            self.axis = [np.stack([big * np.cos(ang), big * np.sin(ang), np.zeros(n + 1)], axis=1)]
            self.betti, self.open_ends = (1, 1, 0), 0
            self.area, self.volume = 4 * math.pi ** 2 * big * r, 2 * math.pi ** 2 * big * r * r
        elif shape is Shape.HOLLOW_SHELL:
            ro = L / 2
            ri = ro - r
            if ri <= 2 * max(spec.spacing):
                raise ResolutionError("hollow shell cavity thinner than two voxels")
            self.inside = lambda p: ((p ** 2).sum(axis=1) <= ro * ro) & ((p ** 2).sum(axis=1) > ri * ri)
            self.lo, self.hi = np.full(3, -ro), np.full(3, ro)
            self.axis = [np.zeros((1, 3))]
            self.betti, self.open_ends = (1, 0, 1), 0
            self.area, self.volume = 4 * math.pi * (ro ** 2 + ri ** 2), 4 / 3 * math.pi * (ro ** 3 - ri ** 3)
        elif shape is Shape.SPHERE:
            self.inside = lambda p: (p ** 2).sum(axis=1) <= r * r
            self.lo, self.hi = np.full(3, -r), np.full(3, r)
            self.axis = [np.zeros((1, 3))]
            self.betti, self.open_ends = (1, 0, 0), 0
            self.area, self.volume = 4 * math.pi * r * r, 4 / 3 * math.pi * r ** 3
        else:  # pragma: no cover
            raise ValueError(shape)


def analytic_poiseuille_wss(radius_mm: float, mass_flow_kg_s: float, density: float, viscosity: float) -> float:
    """Wall shear stress 4 mu Q / (pi r^3) in Pa."""
    q = mass_flow_kg_s / density
    r = radius_mm * 1e-3
    return 4 * viscosity * q / (math.pi * r ** 3)


def generate_phantom(spec: PhantomSpec) -> tuple[VoxelVolume, CenterlineGraph, GroundTruthFacts]:
    """Voxelize the analytic shape; the seed sets a sub-voxel grid offset."""
    geom = _Geometry(spec)
    sp = np.asarray(spec.spacing)
    thinnest = min(geom.lumen_radii) if spec.shape is not Shape.HOLLOW_SHELL else spec.radius_mm / 2
    if thinnest < 2 * sp.max() - 1e-12:
        raise ResolutionError(
            f"lumen radius {thinnest:.3f} mm spans fewer than 4 voxels at spacing {sp.max():.3f} mm")
    rng = np.random.default_rng(spec.seed)
    jitter = rng.uniform(0.0, 1.0, 3) * sp
    origin = geom.lo - spec.margin_voxels * sp - jitter
    dims = np.ceil((geom.hi - origin) / sp).astype(int) + spec.margin_voxels + 1
    axes = [origin[a] + sp[a] * np.arange(dims[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    mask = geom.inside(pts).reshape(tuple(dims))
    vol = VoxelVolume.mask(mask, tuple(sp), tuple(origin))

    # Analytic centreline graph: polylines joined at shared vertices.
    positions, edges, index = [], [], {}

    def node(p):
        key = tuple(np.round(p, 9))
        if key not in index:
            index[key] = len(positions)
            positions.append(p)
        return index[key]

    for line in geom.axis:
        ids = [node(p) for p in line]
        edges.extend((a, b) for a, b in zip(ids[:-1], ids[1:]) if a != b)
    radii = np.full(len(positions), spec.radius_mm)
    graph = CenterlineGraph(np.array(positions), radii, np.array(edges, dtype=int).reshape(-1, 2))

    from vesselcfd.solver import SolverConfig

    cfg = SolverConfig()
    wss = None
    if spec.shape is Shape.STRAIGHT_TUBE:
        wss = analytic_poiseuille_wss(spec.radius_mm, cfg.mass_flow, cfg.density, cfg.viscosity)
    centerline = np.concatenate(geom.axis).tolist()
    facts = GroundTruthFacts(
        shape=spec.shape.value,
        betti=geom.betti,
        radius_mm=spec.radius_mm,
        length_mm=spec.length_mm,
        surface_area_mm2=geom.area,
        volume_mm3=geom.volume,
        open_ends=geom.open_ends,
        centerline_points=centerline,
        aneurysm_center_mm=None if geom.aneurysm_center is None else geom.aneurysm_center.tolist(),
        aneurysm_radius_mm=geom.aneurysm_radius,
        analytic_wss_pa=wss,
    )
    return vol, graph, facts


# ---------------------------------------------------------------- defects

class _Frame:
    """Principal axis of a mask plus the row used to place surface defects."""

    def __init__(self, a: np.ndarray):
        idx = np.argwhere(a)
        if len(idx) == 0:
            raise ValueError("defect needs a nonempty mask")
        self.lo, self.hi = idx.min(axis=0), idx.max(axis=0)
        ext = self.hi - self.lo
        self.axis = int(np.argmax(ext))
        others = [ax for ax in range(3) if ax != self.axis]
        # Offset direction: the wider of the other two axes.
        self.u = max(others, key=lambda ax: (ext[ax], -ax))
        self.w = [ax for ax in others if ax != self.u][0]
        centroid = idx.mean(axis=0)
        self.w0 = int(round(centroid[self.w]))

    def slice_at(self, location: float, pad: int = 0) -> int:
        lo, hi = self.lo[self.axis] + pad, self.hi[self.axis] - pad
        if hi < lo:
            raise ValueError("mask too short along its principal axis for this defect")
        return int(round(lo + location * (hi - lo)))

    def index(self, z, u, w):
        out = [0, 0, 0]
        out[self.axis], out[self.u], out[self.w] = z, u, w
        return tuple(out)


def _row_max_u(a, fr: _Frame, z: int, w: int) -> int:
    sl = [slice(None)] * 3
    sl[fr.axis], sl[fr.w] = z, w
    row = a[tuple(sl)]
    hits = np.flatnonzero(row)
    if len(hits) == 0:
        raise ValueError(f"no foreground in the defect row at slice {z}")
    return int(hits.max())


def inject_defect(mask: VoxelVolume, defect: DefectSpec) -> VoxelVolume:
    """Apply an axis-aligned voxel edit with a fixed, documented shape.

    * adhesion-bridge: a one-voxel-thick arch leaving the surface at two
      slices and running parallel to the principal axis two voxels clear of
      the surface (one new loop).
    * internal-cavity: an enclosed cube of background of side ``magnitude``
      at the deepest voxel of the chosen slice (one new cavity).
    * break: removes a slab ``magnitude`` voxels thick across the principal
      axis (one extra component on a tube).
    * surface-spike / surface-dent: a one-voxel line out of, or a ball cut
      into, the surface; Betti numbers unchanged.
    * stub-branch: a short side cylinder; placed near a vessel end it leaves
      a terminal centreline branch too short for automatic cutting.
    """
    a = mask.data.astype(bool).copy()
    fr = _Frame(a)
    m = int(defect.magnitude_voxels)
    kind = defect.kind
    dims = a.shape

    def check_u(u):
        if not 0 <= u < dims[fr.u]:
            raise ValueError("defect extends outside the volume; enlarge the margin")

    if kind is DefectKind.ADHESION_BRIDGE:
        gap = max(6, 2 * m + 2)
        z1 = fr.slice_at(defect.location, pad=1)
        z2 = z1 + gap if z1 + gap <= fr.hi[fr.axis] - 1 else z1 - gap
        if not fr.lo[fr.axis] <= z2 <= fr.hi[fr.axis]:
            raise ValueError("mask too short for an adhesion bridge")
        z1, z2 = sorted((z1, z2))
        u1, u2 = _row_max_u(a, fr, z1, fr.w0), _row_max_u(a, fr, z2, fr.w0)
        sl = [slice(None)] * 3
        sl[fr.axis] = slice(max(z1 - 1, 0), z2 + 2)
        sl[fr.w] = slice(max(fr.w0 - 1, 0), fr.w0 + 2)
        slab = a[tuple(sl)]
        umax = int(np.argwhere(slab)[:, fr.u].max())
        top = umax + max(2, m)
        check_u(top)
        arch = [fr.index(z1, u, fr.w0) for u in range(u1 + 1, top + 1)]
        arch += [fr.index(z2, u, fr.w0) for u in range(u2 + 1, top + 1)]
        arch += [fr.index(z, top, fr.w0) for z in range(z1, z2 + 1)]
        for p in arch:
            a[p] = True
    elif kind is DefectKind.INTERNAL_CAVITY:
        z = fr.slice_at(defect.location, pad=m + 1)
        dist = ndi.distance_transform_cdt(np.pad(a, 1), metric="chessboard")[1:-1, 1:-1, 1:-1]
        sl = [slice(None)] * 3
        sl[fr.axis] = z
        plane = dist[tuple(sl)]
        best = np.unravel_index(int(np.argmax(plane)), plane.shape)
        centre = list(best)
        centre.insert(fr.axis, z)
        start = [c - (m - 1) // 2 for c in centre]
        outer = tuple(slice(s - 1, s + m + 1) for s in start)
        if any(s - 1 < 0 or s + m + 1 > n for s, n in zip(start, dims)) or not a[outer].all():
            raise ValueError("mask too thin at this location to enclose a cavity")
        a[tuple(slice(s, s + m) for s in start)] = False
    elif kind is DefectKind.BREAK:
        z = fr.slice_at(defect.location, pad=1)
        sl = [slice(None)] * 3
        sl[fr.axis] = slice(z, z + m)
        if not a[tuple(sl)].any():
            raise ValueError("break location does not intersect the mask")
        a[tuple(sl)] = False
    elif kind is DefectKind.SURFACE_SPIKE:
        z = fr.slice_at(defect.location)
        u1 = _row_max_u(a, fr, z, fr.w0)
        check_u(u1 + m)
        for u in range(u1 + 1, u1 + m + 1):
            a[fr.index(z, u, fr.w0)] = True
    elif kind is DefectKind.SURFACE_DENT:
        z = fr.slice_at(defect.location)
        u1 = _row_max_u(a, fr, z, fr.w0)
        c = np.array(fr.index(z, u1, fr.w0))
        lo = np.maximum(c - m, 0)
        hi = np.minimum(c + m + 1, dims)
        g = np.mgrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        ball = ((g - c[:, None, None, None]) ** 2).sum(axis=0) <= m * m
        sub = a[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        sub[ball] = False
    elif kind is DefectKind.STUB_BRANCH:
        z = fr.slice_at(defect.location)
        u1 = _row_max_u(a, fr, z, fr.w0)
        # Local lumen half-width along u in this slice gives the stub scale.
        sl = [slice(None)] * 3
        sl[fr.axis], sl[fr.w] = z, fr.w0
        row = np.flatnonzero(a[tuple(sl)])
        half = max(2, (row.max() - row.min() + 1) // 2)
        rs = max(2, half // 2)
        length = rs + m
        check_u(u1 + length + 1)
        g = np.indices(dims)
        du = g[fr.u] - u1
        dz = g[fr.axis] - z
        dw = g[fr.w] - fr.w0
        a |= (du > -half) & (du <= length) & (dz ** 2 + dw ** 2 <= rs * rs)
    else:  # pragma: no cover
        raise ValueError(kind)
    return mask.like(a.astype(np.uint8))


# ---------------------------------------------------------------- datasets

@dataclass
class CaseSpec:
    """One dataset case; detection fields control the TP/FP/FN bookkeeping."""

    phantom: PhantomSpec
    defect: DefectSpec | None = None
    detected: bool = True
    false_positives: int = 0
    solver_overrides: dict = field(default_factory=dict)


def aneurysm_region(vol: VoxelVolume, facts: GroundTruthFacts) -> VoxelVolume:
    """GT aneurysm mask: the sac for aneurysm phantoms, else a small ball on the axis midpoint."""
    if facts.aneurysm_center_mm is not None:
        centre, rad = np.asarray(facts.aneurysm_center_mm), facts.aneurysm_radius_mm
    else:
        pts = np.asarray(facts.centerline_points)
        centre, rad = pts[len(pts) // 2], max(facts.radius_mm, 2 * max(vol.spacing))
    idx = np.indices(vol.dims).reshape(3, -1).T
    xyz = vol.index_to_mm(idx)
    ball = (((xyz - centre) ** 2).sum(axis=1) <= rad * rad).reshape(vol.dims)
    return vol.like((ball & vol.bool()).astype(np.uint8))


def emit_dataset(specs, out_dir) -> dict:
    """Write GT/pred masks, facts and aneurysm masks; return the manifest.

    ``specs`` holds ``CaseSpec`` items or ``(PhantomSpec, DefectSpec | None)``
    pairs.  The manifest is also written to ``<out_dir>/manifest.json``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cases = []
        for n, item in enumerate(specs):
            case = item if isinstance(item, CaseSpec) else CaseSpec(item[0], item[1] if len(item) > 1 else None)
            cid = f"case_{n:03d}"
            gt, _, facts = generate_phantom(case.phantom)
            pred = gt if case.defect is None else inject_defect(gt, case.defect)
            ane = aneurysm_region(gt, facts)
            save_volume(gt, out / f"{cid}_gt.nii.gz")
            save_volume(pred, out / f"{cid}_pred.nii.gz")
            save_volume(ane, out / f"{cid}_aneurysm0.nii.gz")
            (out / f"{cid}_facts.json").write_text(json.dumps(facts.to_dict(), indent=2))
            centres = []
            ane_idx = np.argwhere(ane.bool())
            ane_centre = ane.index_to_mm(ane_idx.mean(axis=0)) if len(ane_idx) else None
            if case.detected and ane_centre is not None:
                centres.append(ane_centre.tolist())
            lo = np.asarray(gt.origin)
            for k in range(case.false_positives):
                # Far corner of the grid: outside any GT region.
                centres.append((lo + 0.5 * k * np.asarray(gt.spacing)).tolist())
            entry = {
                "id": cid,
                "gt": f"{cid}_gt.nii.gz",
                "pred": f"{cid}_pred.nii.gz",
                "aneurysms": [f"{cid}_aneurysm0.nii.gz"],
                "pred_centers": centres,
                "facts": f"{cid}_facts.json",
                "defect": case.defect.kind.value if case.defect else None,
                "expected": expected_flags(case, pred),
            }
            if case.solver_overrides:
                entry["solver_overrides"] = dict(case.solver_overrides)
            cases.append(entry)
        manifest = {"cases": cases}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise VolumeWriteError(f"cannot write dataset to {out}: {exc}") from exc
    return manifest


def designated_flag(case: CaseSpec) -> str | None:
    """The flag this case is built to zero, or None for a clean case."""
    if case.defect is not None and case.defect.kind in DEFECT_FLAG:
        return DEFECT_FLAG[case.defect.kind]
    if case.solver_overrides.get("max_steps", FORCED_STOP_STEPS + 1) <= FORCED_STOP_STEPS:
        return "bfa"
    return None


def expected_flags(case: CaseSpec, pred: VoxelVolume | None = None) -> dict:
    """Flags implied by the case design, with the short-circuit cascade applied.

    When ``pred`` is given its Betti numbers are recorded alongside, as an
    independent check on the design.
    """
    failing = designated_flag(case)
    out, alive = {}, True
    for f in FLAG_ORDER:
        alive = alive and f != failing
        out[f] = int(alive)
    if pred is not None:
        out["betti"] = list(betti_numbers(pred).as_tuple())
    out["ae"] = int(out["vta"] and out["mga"] and out["bfa"])
    return out


def standard_suite() -> list[CaseSpec]:
    """Twenty clean phantoms and ten defective ones, with fixed detection bookkeeping.

    Clean: five each of straight tube, curved tube, bifurcation and tube with
    aneurysm.  Defective: two each of adhesion bridge, internal cavity,
    break, stub branch and a solve capped at ``FORCED_STOP_STEPS``.  Two
    clean cases are missed by the detector and three false positives are
    spread over two cases, so the expected score is hand-countable.
    """
    sp = 0.25
    clean = [PhantomSpec(Shape.STRAIGHT_TUBE, r, L, spacing_mm=sp, seed=k)
             for k, (r, L) in enumerate([(1.2, 16), (1.5, 20), (1.8, 16), (2.0, 20), (1.5, 24)])]
    clean += [PhantomSpec(Shape.CURVED_TUBE, r, L, spacing_mm=sp, seed=k)
              for k, (r, L) in enumerate([(1.2, 20), (1.5, 20), (1.8, 24), (1.5, 28), (2.0, 24)])]
    clean += [PhantomSpec(Shape.BIFURCATION, r, L, spacing_mm=sp, seed=k)
              for k, (r, L) in enumerate([(1.5, 20), (1.8, 24), (2.0, 24), (1.6, 22), (1.9, 26)])]
    clean += [PhantomSpec(Shape.TUBE_WITH_ANEURYSM, r, 20, aneurysm_radius_mm=ra, spacing_mm=sp, seed=k)
              for k, (r, ra) in enumerate([(1.5, 2.0), (1.5, 2.5), (1.8, 2.5), (2.0, 3.0), (1.6, 2.2)])]
    missed = {2, 12}
    extra_fp = {5: 1}
    cases = [CaseSpec(p, detected=n not in missed, false_positives=extra_fp.get(n, 0))
             for n, p in enumerate(clean)]

    tube = PhantomSpec(Shape.STRAIGHT_TUBE, 1.5, 20, spacing_mm=sp)
    stub = PhantomSpec(Shape.STRAIGHT_TUBE, 1.5, 15, spacing_mm=0.375, margin_voxels=10)
    defective = [
        (tube, DefectSpec(DefectKind.ADHESION_BRIDGE, 0.4, 2)),
        (replace(tube, radius_mm=1.8, seed=1), DefectSpec(DefectKind.ADHESION_BRIDGE, 0.6, 3)),
        (tube, DefectSpec(DefectKind.INTERNAL_CAVITY, 0.5, 2)),
        (replace(tube, radius_mm=2.0, seed=1), DefectSpec(DefectKind.INTERNAL_CAVITY, 0.3, 3)),
        (tube, DefectSpec(DefectKind.BREAK, 0.5, 2)),
        (replace(tube, radius_mm=1.8, seed=1), DefectSpec(DefectKind.BREAK, 0.7, 1)),
        (stub, DefectSpec(DefectKind.STUB_BRANCH, 0.15, 4)),
        (replace(stub, seed=1), DefectSpec(DefectKind.STUB_BRANCH, 0.15, 4)),
    ]
    cases += [CaseSpec(p, d) for p, d in defective]
    cases += [CaseSpec(tube, solver_overrides={"max_steps": FORCED_STOP_STEPS}),
              CaseSpec(replace(tube, radius_mm=1.8, seed=1), solver_overrides={"max_steps": FORCED_STOP_STEPS})]
    cases[27].false_positives = 2
    return cases


# Solver settings for the shipped suite: a coarse grid keeps a full run short.
SUITE_SOLVER = {"grid_spacing_mm": 0.25, "mass_flow": 0.001}


def write_suite(out_dir, specs=None, threads: int = 1) -> dict:
    """Emit a dataset plus a ready-to-run ``run.json`` next to it."""
    out = Path(out_dir)
    manifest = emit_dataset(standard_suite() if specs is None else specs, out)
    run = {"dataset": ".", "output": "out", "solver": dict(SUITE_SOLVER), "threads": threads}
    try:
        (out / "run.json").write_text(json.dumps(run, indent=2) + "\n")
    except OSError as exc:
        raise VolumeWriteError(f"cannot write run config to {out}: {exc}") from exc
    return manifest
