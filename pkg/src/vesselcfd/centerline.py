"""Centreline extraction, inlet/outlet cutting and boundary labelling.

Thinning peels simple points direction by direction down to a curve
skeleton; the skeleton becomes a node graph whose radii come from the
Euclidean distance transform.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from vesselcfd._thinning import thin
from vesselcfd.errors import CutFailureError, DomainSplitError, PreconditionError
from vesselcfd.topology import STRUCT_6, STRUCT_26
from vesselcfd.volume import VoxelVolume

MIN_BRANCH_NODES = 5
CUT_FRACTION = 0.2
SHORT_CYCLE = 8


@dataclass
class CenterlineGraph:
    """Skeleton graph: node positions (mm), inscribed radii (mm) and edges."""

    positions: np.ndarray
    radii: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    voxels: np.ndarray | None = None  # source voxel index per node, when extracted from a mask

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        self.edges = np.asarray(self.edges, dtype=int).reshape(-1, 2)
        if len(self.radii) != len(self.positions):
            raise ValueError("one radius per node required")
        if (self.radii < 0).any():
            raise ValueError("radii must be non-negative")
        if self.voxels is not None:
            self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def adjacency(self) -> list[list[int]]:
        adj = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges:
            adj[a].append(int(b))
            adj[b].append(int(a))
        for lst in adj:
            lst.sort()
        return adj

    @property
    def endpoints(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.degrees() == 1)]

    @property
    def branch_points(self) -> list[int]:
        """One representative node per cluster of adjacent degree>=3 nodes."""
        deg = self.degrees()
        junction = set(int(i) for i in np.flatnonzero(deg >= 3))
        adj = self.adjacency()
        reps, seen = [], set()
        for start in sorted(junction):
            if start in seen:
                continue
            cluster, stack = [], [start]
            seen.add(start)
            while stack:
                n = stack.pop()
                cluster.append(n)
                for m in adj[n]:
                    if m in junction and m not in seen:
                        seen.add(m)
                        stack.append(m)
            reps.append(max(cluster, key=lambda n: (deg[n], self.radii[n], -n)))
        return sorted(reps)

    def n_components(self) -> int:
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components as cc

        if self.n_nodes == 0:
            return 0
        m = coo_matrix((np.ones(len(self.edges)), (self.edges[:, 0], self.edges[:, 1])),
                       shape=(self.n_nodes, self.n_nodes))
        return int(cc(m, directed=False)[0])

    def cycle_rank(self) -> int:
        return len(self.edges) - self.n_nodes + self.n_components()

    def to_dict(self) -> dict:
        return {
            "positions_mm": self.positions.tolist(),
            "radii_mm": self.radii.tolist(),
            "edges": self.edges.tolist(),
            "endpoints": self.endpoints,
            "branch_points": self.branch_points,
        }



def distance_transform(mask: VoxelVolume) -> VoxelVolume:
    """Euclidean distance (mm) from each foreground voxel to the nearest background centre.

    Space outside the grid counts as background.
    """
    a = np.pad(mask.data.astype(bool), 1)
    d = ndi.distance_transform_edt(a, sampling=mask.spacing)[1:-1, 1:-1, 1:-1]
    return VoxelVolume.scalar(d, mask.spacing, mask.origin)


# ---------------------------------------------------------------- skeleton graph

_OFFSETS = np.array([o for o in np.ndindex(3, 3, 3) if o != (1, 1, 1)]) - 1


def _voxel_graph(skel: np.ndarray, spacing) -> tuple[np.ndarray, np.ndarray]:
    """Node voxel indices (x-fastest order) and 26-adjacency edges, with
    clique shortcuts removed: an edge is dropped when it is strictly the
    longest side of a triangle it forms with a common neighbour."""
    idx = np.argwhere(skel)
    order = np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2]))
    idx = idx[order]
    lookup = np.full(skel.shape, -1, dtype=np.int64)
    lookup[tuple(idx.T)] = np.arange(len(idx))
    padded = np.pad(lookup, 1, constant_values=-1)
    edges = []
    for off in _OFFSETS:
        if tuple(off) <= (0, 0, 0):
            continue
        q = idx + 1 + off
        nb = padded[tuple(q.T)]
        ok = nb >= 0
        edges.append(np.stack([np.arange(len(idx))[ok], nb[ok]], axis=1))
    e = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    e = np.sort(e, axis=1)
    if len(e) == 0:
        return idx, e
    sp = np.asarray(spacing, float)
    length = np.linalg.norm((idx[e[:, 0]] - idx[e[:, 1]]) * sp, axis=1)
    adj = [dict() for _ in range(len(idx))]
    for (a, b), ln in zip(e, length):
        adj[a][b] = ln
        adj[b][a] = ln
    keep = np.ones(len(e), dtype=bool)
    for n, ((a, b), ln) in enumerate(zip(e, length)):
        for c in adj[a].keys() & adj[b].keys():
            if ln > adj[a][c] + 1e-12 and ln > adj[b][c] + 1e-12:
                keep[n] = False
                break
    return idx, _drop_short_cycles(len(idx), e[keep], length[keep])


def _drop_short_cycles(n: int, edges: np.ndarray, length: np.ndarray) -> np.ndarray:
    """Keep a shortest-edge spanning forest plus only those extra edges that
    close a cycle longer than SHORT_CYCLE nodes; shorter cycles are voxel
    clumps, not loops of the vessel."""
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    order = np.lexsort((edges[:, 1], edges[:, 0], length))
    tree = [[] for _ in range(n)]
    extra = []
    for k in order:
        a, b = int(edges[k, 0]), int(edges[k, 1])
        ra, rb = find(a), find(b)
        if ra == rb:
            extra.append(k)
            continue
        parent[ra] = rb
        tree[a].append(b)
        tree[b].append(a)
    keep = [k for k in order if k not in set(extra)]
    for k in extra:
        a, b = int(edges[k, 0]), int(edges[k, 1])
        # Breadth-first search in the forest bounded by the cycle limit.
        seen, frontier, depth = {a}, [a], 0
        while frontier and b not in seen and depth < SHORT_CYCLE:
            depth += 1
            nxt = []
            for u in frontier:
                for w in tree[u]:
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
            frontier = nxt
        if b not in seen:
            keep.append(k)
            tree[a].append(b)
            tree[b].append(a)
    keep = np.sort(np.array(keep, dtype=np.int64))
    return edges[keep]


def _branches(graph: CenterlineGraph) -> list[list[int]]:
    """Node paths from each endpoint up to the first node whose degree is not 2."""
    adj = graph.adjacency()
    deg = graph.degrees()
    out = []
    for ep in graph.endpoints:
        path, prev, cur = [ep], -1, ep
        while True:
            nxt = [m for m in adj[cur] if m != prev]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            path.append(cur)
            if deg[cur] != 2:
                break
        out.append(path)
    return out


def _arclength(graph: CenterlineGraph, path) -> np.ndarray:
    p = graph.positions[path]
    return np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))]


def _prune_spurs(graph: CenterlineGraph) -> CenterlineGraph:
    """Remove thinning artefacts hanging off junctions.

    Two kinds go: twigs that stay inside the junction's inscribed ball and
    end close to the wall (length <= 1.5 r_j, tip radius <= 0.85 r_j, or at
    most two nodes), and short spurs running through a bulge such as an
    aneurysm sac, where the radius along the spur clearly exceeds the
    junction's.  Vessel branches keep a roughly constant radius no larger
    than at the junction they leave.
    """
    while True:
        deg = graph.degrees()
        drop = set()
        for path in _branches(graph):
            junction = path[-1]
            if deg[junction] < 3:
                continue
            r = graph.radii[path]
            rj, tip = graph.radii[junction], graph.radii[path[0]]
            length = _arclength(graph, path)[-1]
            twig = len(path) <= 2 or (length <= 1.5 * rj and tip <= 0.85 * rj)
            bulge = r[:-1].max()
            blob = bulge >= 1.15 * rj and length <= 2.5 * bulge
            if twig or blob:
                drop.update(path[:-1])
        if not drop:
            return graph
        keep = np.array([n not in drop for n in range(graph.n_nodes)])
        remap = np.cumsum(keep) - 1
        e = graph.edges[keep[graph.edges].all(axis=1)]
        vox = None if graph.voxels is None else graph.voxels[keep]
        graph = CenterlineGraph(graph.positions[keep], graph.radii[keep], remap[e], vox)


def skeletonize(mask: VoxelVolume, prune: bool = True) -> CenterlineGraph:
    """Topology-preserving thinning, then a 26-adjacency graph with DT radii."""
    a = mask.data.astype(bool)
    _, b0 = ndi.label(a, structure=STRUCT_26)
    if b0 != 1:
        raise PreconditionError(f"skeletonize needs one connected component, got {b0}")
    skel = thin(a)
    dt = distance_transform(mask).data
    idx, edges = _voxel_graph(skel, mask.spacing)
    graph = CenterlineGraph(mask.index_to_mm(idx), dt[tuple(idx.T)], edges, idx)
    if prune:
        graph = _prune_spurs(graph)
    return graph


# ---------------------------------------------------------------- cut planning

class Role(str, enum.Enum):
    INLET = "inlet"
    OUTLET = "outlet"


@dataclass(frozen=True)
class Cut:
    endpoint: int
    node: int
    point: tuple[float, float, float]
    normal: tuple[float, float, float]  # unit, pointing out of the domain
    radius_mm: float
    role: Role
    branch_length_mm: float
    index: int = 0  # position among cuts of the same role

    def to_dict(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "node": self.node,
            "point_mm": list(self.point),
            "normal": list(self.normal),
            "radius_mm": self.radius_mm,
            "role": self.role.value,
            "index": self.index,
            "branch_length_mm": self.branch_length_mm,
        }


@dataclass(frozen=True)
class CutPlan:
    cuts: tuple[Cut, ...]

    def __post_init__(self):
        roles = [c.role for c in self.cuts]
        if roles.count(Role.INLET) != 1 or roles.count(Role.OUTLET) < 1:
            raise PreconditionError("a cut plan needs exactly one inlet and at least one outlet")

    @property
    def inlet(self) -> Cut:
        return next(c for c in self.cuts if c.role is Role.INLET)

    @property
    def outlets(self) -> list[Cut]:
        return [c for c in self.cuts if c.role is Role.OUTLET]

    def to_dict(self) -> dict:
        return {"cuts": [c.to_dict() for c in self.cuts]}


def _tangent(graph: CenterlineGraph, path, i: int) -> np.ndarray:
    lo, hi = max(i - 2, 0), min(i + 2, len(path) - 1)
    d = graph.positions[path[lo]] - graph.positions[path[hi]]
    n = np.linalg.norm(d)
    if n == 0:
        raise CutFailureError("degenerate centreline tangent at the cut point")
    return d / n


def _endpoint_paths(graph: CenterlineGraph) -> dict[int, tuple[list[int], float]]:
    """Per endpoint: the node path used for cutting and its length L."""
    deg = graph.degrees()
    out = {}
    for path in _branches(graph):
        s = _arclength(graph, path)
        if deg[path[-1]] >= 3:
            out[path[0]] = (path, float(s[-1]))
        else:
            # Unbranched: measure to the path midpoint.
            out[path[0]] = (path, float(s[-1]) / 2.0)
    return out


def plan_cuts(graph: CenterlineGraph, min_radius_mm: float = 0.3) -> CutPlan:
    """Cut each end at one fifth of its branch length, retracting past thin tips.

    Normals point outward along the local centreline tangent.  The endpoint
    with the widest cross-section becomes the inlet (ties: lower node index).
    """
    ends = graph.endpoints
    if len(ends) < 2:
        raise PreconditionError(f"cut planning needs at least two endpoints, got {len(ends)}")
    raw = []
    for ep, (path, length) in sorted(_endpoint_paths(graph).items()):
        if len(path) < MIN_BRANCH_NODES:
            raise CutFailureError(
                f"branch at endpoint {ep} has {len(path)} nodes; at least {MIN_BRANCH_NODES} needed")
        s = _arclength(graph, path)
        target = CUT_FRACTION * length
        i = int(np.argmin(np.abs(s - target)))
        while graph.radii[path[i]] < min_radius_mm:
            i += 1
            if i >= len(path) or s[i] > length:
                raise CutFailureError(f"no cross-section of radius >= {min_radius_mm} mm near endpoint {ep}")
        normal = _tangent(graph, path, i)
        raw.append((ep, path[i], graph.positions[path[i]], normal, float(graph.radii[path[i]]), length))
    inlet = min(raw, key=lambda r: (-r[4], r[0]))[0]
    cuts, k = [], 0
    for ep, node, pt, nrm, rad, length in raw:
        if ep == inlet:
            role, index = Role.INLET, 0
        else:
            role, index = Role.OUTLET, k
            k += 1
        cuts.append(Cut(ep, int(node), tuple(float(x) for x in pt), tuple(float(x) for x in nrm),
                        rad, role, length, index))
    cuts.sort(key=lambda c: (c.role is not Role.INLET, c.index))
    return CutPlan(tuple(cuts))


# ---------------------------------------------------------------- flow domain

# Face directions: 0:+x 1:-x 2:+y 3:-y 4:+z 5:-z
FACE_DIRS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


@dataclass
class BoundaryPatch:
    role: Role
    index: int
    point: np.ndarray
    normal: np.ndarray  # unit, into the fluid
    radius_mm: float
    faces: np.ndarray  # (n, 4): i, j, k, direction

    @property
    def code(self) -> int:
        from vesselcfd.surface import INLET_BASE, OUTLET_BASE

        return (INLET_BASE if self.role is Role.INLET else OUTLET_BASE) + self.index

    @property
    def name(self) -> str:
        return f"{self.role.value}-{self.index}"

    def area_mm2(self, spacing) -> float:
        """Cross-section area: voxel faces projected onto the cut plane."""
        sp = np.asarray(spacing, float)
        face_area = np.array([sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1]])
        d = self.faces[:, 3]
        proj = np.abs(FACE_DIRS[d] @ self.normal)
        return float((proj * face_area[d // 2]).sum())


@dataclass
class FlowDomain:
    """Solver-ready geometry.

    ``regions`` holds 0 outside the vessel, 1 for fluid and ``2 + b`` for the
    vessel piece removed beyond boundary ``b`` (inlet first, then outlets).
    """

    mask: VoxelVolume
    fluid: VoxelVolume
    regions: VoxelVolume
    patches: list[BoundaryPatch]
    wall_faces: np.ndarray
    mesh: object
    plan: CutPlan
    centerline: CenterlineGraph | None = None

    @property
    def inlet(self) -> BoundaryPatch:
        return next(p for p in self.patches if p.role is Role.INLET)

    @property
    def outlets(self) -> list[BoundaryPatch]:
        return [p for p in self.patches if p.role is Role.OUTLET]

    def summary(self) -> dict:
        sp = self.mask.spacing
        return {
            "fluid_voxels": int(self.fluid.data.sum()),
            "wall_faces": int(len(self.wall_faces)),
            "patches": [
                {"name": p.name, "faces": int(len(p.faces)), "area_mm2": p.area_mm2(sp),
                 "radius_mm": p.radius_mm}
                for p in self.patches
            ],
        }


def _boundary_faces(fluid: np.ndarray):
    """All fluid voxel faces whose neighbour is not fluid: (i, j, k, dir) and neighbour index."""
    f = np.pad(fluid, 1)
    out, nbrs = [], []
    for d, off in enumerate(FACE_DIRS):
        nb = np.roll(f, shift=tuple(-off), axis=(0, 1, 2))
        hit = f & ~nb
        idx = np.argwhere(hit[1:-1, 1:-1, 1:-1])
        out.append(np.concatenate([idx, np.full((len(idx), 1), d)], axis=1))
        nbrs.append(idx + off)
    return np.concatenate(out), np.concatenate(nbrs)


def cut_regions(mask: np.ndarray, vol: VoxelVolume, plan: CutPlan, centerline_voxels=None) -> np.ndarray:
    """Label the vessel piece beyond each cut plane that contains its endpoint."""
    idx = np.indices(mask.shape).reshape(3, -1).T
    xyz = vol.index_to_mm(idx).reshape(mask.shape + (3,))
    regions = mask.astype(np.int32)
    for b, cut in enumerate(plan.cuts):
        beyond = mask & (((xyz - np.asarray(cut.point)) @ np.asarray(cut.normal)) > 0)
        lab, _ = ndi.label(beyond, structure=STRUCT_26)
        ends = [centerline_voxels[cut.endpoint]] if centerline_voxels is not None else []
        seed = None
        for e in ends:
            if lab[tuple(e)]:
                seed = lab[tuple(e)]
        if seed is None:
            # Fall back to the beyond-component nearest the plane point along the normal.
            probe = np.asarray(cut.point) + np.asarray(cut.normal) * max(vol.spacing)
            ijk = np.clip(np.rint(vol.mm_to_index(probe)).astype(int), 0, np.array(mask.shape) - 1)
            seed = lab[tuple(ijk)] or None
        if seed is None:
            raise DomainSplitError(f"cut plane {b} does not meet the vessel near its endpoint")
        piece = lab == seed
        if (regions[piece] != 1).any():
            raise DomainSplitError(f"cut regions {b} and an earlier boundary overlap")
        regions[piece] = 2 + b
    return regions


def build_flow_domain(mask: VoxelVolume, plan: CutPlan, centerline: CenterlineGraph | None = None) -> FlowDomain:
    """Remove the vessel beyond each cut plane and classify every fluid boundary face.

    A face whose neighbour lies in a removed piece belongs to that piece's
    inlet/outlet; every other boundary face is wall.  The capped surface is
    the marching-cubes mesh of the fluid with cap triangles labelled by
    plane proximity.
    """
    from vesselcfd.surface import WALL, marching_cubes

    a = mask.data.astype(bool)
    vox = centerline.voxels if centerline is not None else None
    regions = cut_regions(a, mask, plan, vox)
    fluid = regions == 1
    if not fluid.any():
        raise DomainSplitError("cut planes leave no fluid")
    _, ncomp = ndi.label(fluid, structure=STRUCT_6)
    if ncomp != 1:
        raise DomainSplitError(f"cut planes split the fluid into {ncomp} pieces")
    faces, nbrs = _boundary_faces(fluid)
    shape = np.array(a.shape)
    inside = ((nbrs >= 0) & (nbrs < shape)).all(axis=1)
    nb_region = np.zeros(len(faces), dtype=np.int32)
    nb_region[inside] = regions[tuple(nbrs[inside].T)]
    sp = np.asarray(mask.spacing, float)
    patches = []
    for b, cut in enumerate(plan.cuts):
        sel = faces[nb_region == 2 + b]
        if len(sel) == 0:
            raise DomainSplitError(f"boundary {b} has no faces")
        centre = mask.index_to_mm(sel[:, :3] + 0.5 * FACE_DIRS[sel[:, 3]])
        reach = np.linalg.norm(centre - np.asarray(cut.point), axis=1).max()
        if reach > 2.0 * cut.radius_mm + 2.0 * sp.max():
            raise DomainSplitError(
                f"cut plane {b} meets the vessel {reach:.2f} mm from its centre; the cut crosses another structure")
        patches.append(BoundaryPatch(cut.role, cut.index, np.asarray(cut.point),
                                     -np.asarray(cut.normal), cut.radius_mm, sel))
    wall = faces[nb_region <= 1]

    fluid_vol = mask.like(fluid.astype(np.uint8))
    mesh = marching_cubes(fluid_vol)
    cen = mesh.vertices[mesh.triangles].mean(axis=1)
    nrm = mesh.face_normals()
    labels = np.full(mesh.n_triangles, WALL, dtype=np.int32)
    capped = np.zeros(mesh.n_triangles, dtype=bool)
    for p in patches:
        out = -p.normal
        dist = (cen - p.point) @ out
        radial = np.linalg.norm((cen - p.point) - dist[:, None] * out, axis=1)
        near = (np.abs(dist) <= 1.5 * sp.max()) & (radial <= 2.0 * p.radius_mm + 2.0 * sp.max())
        aligned = nrm @ out > 0.5
        sel = near & aligned & ~capped
        labels[sel] = p.code
        capped |= sel
    mesh.labels = labels
    regions_vol = VoxelVolume(regions, mask.spacing, mask.origin)
    return FlowDomain(mask, fluid_vol, regions_vol, patches, wall, mesh, plan, centerline)
