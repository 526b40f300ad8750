"""Mask to triangle surface, mesh diagnostics, smoothing and binary STL.

The marching-cubes case table is generated rather than transcribed.  On
every cube face the sign crossings are paired the same way regardless of
which cube is asking, so neighbouring cubes always agree on the face
segments and the output has no cracks.  Crossings are paired so that inside
corners on an ambiguous face stay connected through the face.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from vesselcfd.errors import DiagnosticError, EmptyMeshError, FormatError, VolumeWriteError
from vesselcfd.volume import VoxelVolume

WALL = 0
CAP_UNCUT = 1
INLET_BASE = 100
OUTLET_BASE = 200


def label_name(code: int) -> str:
    code = int(code)
    if code == WALL:
        return "wall"
    if code == CAP_UNCUT:
        return "cap-uncut"
    if INLET_BASE <= code < OUTLET_BASE:
        return f"inlet-{code - INLET_BASE}"
    if code >= OUTLET_BASE:
        return f"outlet-{code - OUTLET_BASE}"
    raise ValueError(f"unknown face label {code}")


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.labels is None:
            self.labels = np.zeros(len(self.triangles), dtype=np.int32)
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        if len(self.labels) != len(self.triangles):
            raise ValueError("one label per triangle required")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self):
        v = self.vertices[self.triangles]
        return v[:, 0], v[:, 1], v[:, 2]

    def face_normals(self, unit: bool = True) -> np.ndarray:
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        if unit:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(ln > 0, ln, 1.0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def signed_volume(self) -> float:
        a, b, c = self.corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and how many triangles use each."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def is_watertight(self) -> bool:
        if self.n_triangles == 0:
            return False
        _, counts = self.edges()
        return bool((counts == 2).all())

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        e, _ = self.edges()
        return int(len(used) - len(e) + self.n_triangles)

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.triangles.copy(), self.labels.copy())

    def region_codes(self) -> list[int]:
        return sorted(set(int(x) for x in self.labels))


# ---------------------------------------------------------------- case table

_CORNERS = [np.array(c) for c in product((0, 1), repeat=3)]
# product gives (x, y, z) with z fastest; index corners as x + 2y + 4z.
_CORNERS = sorted(_CORNERS, key=lambda c: c[0] + 2 * c[1] + 4 * c[2])
_EDGES = []  # (corner_lo, corner_hi, axis)
for _a in range(8):
    for _ax in range(3):
        if not (_a >> _ax) & 1:
            _EDGES.append((_a, _a | (1 << _ax), _ax))
_EDGE_INDEX = {frozenset(e[:2]): n for n, e in enumerate(_EDGES)}


def _faces():
    """Each cube face as its corner cycle, counter-clockwise seen from outside."""
    faces = []
    for ax in range(3):
        for side in (0, 1):
            normal = np.zeros(3)
            normal[ax] = 1 if side else -1
            ids = [n for n, c in enumerate(_CORNERS) if c[ax] == side]
            centre = np.mean([_CORNERS[n] for n in ids], axis=0)
            u = np.zeros(3)
            u[(ax + 1) % 3] = 1.0
            v = np.cross(normal, u)
            ang = [np.arctan2((_CORNERS[n] - centre) @ v, (_CORNERS[n] - centre) @ u) for n in ids]
            faces.append([ids[k] for k in np.argsort(ang)])
    return faces


def _case_loops(case: int, faces) -> list[list[int]]:
    inside = [(case >> n) & 1 for n in range(8)]
    succ = {}
    for cyc in faces:
        cross = []
        for k in range(4):
            a, b = cyc[k], cyc[(k + 1) % 4]
            if inside[a] != inside[b]:
                cross.append((_EDGE_INDEX[frozenset((a, b))], "io" if inside[a] else "oi"))
        # Pair each inside->outside crossing with the next outside->inside one.
        for k, (e, kind) in enumerate(cross):
            if kind == "io":
                nxt = cross[(k + 1) % len(cross)]
                assert nxt[1] == "oi"
                succ[e] = nxt[0]
    loops, seen = [], set()
    for start in sorted(succ):
        if start in seen:
            continue
        loop, e = [], start
        while e not in seen:
            seen.add(e)
            loop.append(e)
            e = succ[e]
        assert e == start
        loops.append(loop)
    return loops


def _build_table():
    faces = _faces()
    return [_case_loops(c, faces) for c in range(256)]


_TABLE = _build_table()
_FLIP = False  # fixed below from a single-voxel orientation probe


# ---------------------------------------------------------------- marching cubes

def _edge_grids(inside: np.ndarray):
    """Vertex ids for every sign-changing grid edge, per axis (-1 elsewhere)."""
    ids, ends, count = [], [], 0
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        cut = inside[tuple(lo)] != inside[tuple(hi)]
        grid = np.full(cut.shape, -1, dtype=np.int64)
        where = np.flatnonzero(cut.ravel(order="F"))
        flat = grid.reshape(-1, order="F")
        flat[where] = np.arange(count, count + len(where))
        grid = flat.reshape(cut.shape, order="F")
        idx = np.stack(np.unravel_index(where, cut.shape, order="F"), axis=1)
        ids.append(grid)
        ends.append(idx)
        count += len(where)
    return ids, ends, count


@dataclass
class _MCState:
    """Bookkeeping that lets vertices slide along their grid edges."""

    p0: np.ndarray
    p1: np.ndarray
    t: np.ndarray
    n_edge_vertices: int
    loops: list = field(default_factory=list)  # (centroid ids, member id matrix)


def _march(mask: VoxelVolume, iso: float):
    data = mask.data.astype(np.float64)
    if mask.is_binary:
        iso = 0.5
    pad_value = min(float(data.min()) if data.size else 0.0, iso) - 1.0
    f = np.pad(data, 1, constant_values=pad_value)
    inside = f > iso
    if not inside.any():
        raise EmptyMeshError("mask has no foreground; nothing to mesh")
    ids, ends, n_vert = _edge_grids(inside)
    sp = np.asarray(mask.spacing, dtype=float)
    org = np.asarray(mask.origin, dtype=float) - sp  # padded index 0 sits one voxel out

    p0, p1, t = [], [], []
    for ax in range(3):
        a = ends[ax]
        b = a.copy()
        b[:, ax] += 1
        va, vb = f[tuple(a.T)], f[tuple(b.T)]
        p0.append(a * sp + org)
        p1.append(b * sp + org)
        t.append(np.clip((iso - va) / (vb - va), 0.0, 1.0))
    p0, p1, t = np.concatenate(p0), np.concatenate(p1), np.concatenate(t)

    c = np.zeros(tuple(n - 1 for n in f.shape), dtype=np.int64)
    for n, (dx, dy, dz) in enumerate(_CORNERS):
        c |= inside[dx:dx + c.shape[0], dy:dy + c.shape[1], dz:dz + c.shape[2]].astype(np.int64) << n
    flat = c.ravel(order="F")
    active = np.flatnonzero((flat != 0) & (flat != 255))
    cases = flat[active]
    order = np.argsort(cases, kind="stable")
    active, cases = active[order], cases[order]
    cube_idx = np.stack(np.unravel_index(active, c.shape, order="F"), axis=1)
    bounds = np.flatnonzero(np.diff(np.r_[-1, cases, 256]))

    state = _MCState(p0, p1, t, n_vert)
    tris = []
    next_id = n_vert
    for s, e in zip(bounds[:-1], bounds[1:]):
        case = int(cases[s])
        cubes = cube_idx[s:e]
        for loop in _TABLE[case]:
            cols = []
            for edge in loop:
                lo, _, ax = _EDGES[edge]
                off = _CORNERS[lo]
                q = cubes + off
                cols.append(ids[ax][q[:, 0], q[:, 1], q[:, 2]])
            members = np.stack(cols, axis=1)
            if len(loop) == 3:
                tris.append(members)
                continue
            cen = np.arange(next_id, next_id + len(cubes))
            next_id += len(cubes)
            state.loops.append((cen, members))
            k = len(loop)
            for j in range(k):
                tris.append(np.stack([cen, members[:, j], members[:, (j + 1) % k]], axis=1))
    tri = np.concatenate(tris) if tris else np.zeros((0, 3), dtype=np.int64)
    if _FLIP:
        tri = tri[:, ::-1]
    return state, tri, next_id


def _positions(state: _MCState, n_total: int) -> np.ndarray:
    v = np.empty((n_total, 3))
    n = state.n_edge_vertices
    v[:n] = state.p0 + state.t[:, None] * (state.p1 - state.p0)
    for cen, members in state.loops:
        v[cen] = v[members].mean(axis=1)
    return v


def _relax(state: _MCState, tri: np.ndarray, n_total: int, iterations: int,
           lam=0.5, mu=-0.53, t_min=0.05, t_max=0.95):
    """Slide each vertex along its grid edge toward its neighbours' mean.

    Vertices never leave their edge, so the inside/outside classification of
    every grid point is unchanged while the staircase flattens out.  The
    alternating shrink/inflate factors keep the enclosed volume in place.
    """
    n = state.n_edge_vertices
    d = state.p1 - state.p0
    dd = np.einsum("ij,ij->i", d, d)
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    deg = np.bincount(src, minlength=n_total).astype(float)
    deg[deg == 0] = 1.0
    for _ in range(iterations):
        for factor in (lam, mu):
            v = _positions(state, n_total)
            acc = np.zeros_like(v)
            np.add.at(acc, src, v[dst])
            target = acc[:n] / deg[:n, None]
            t = np.einsum("ij,ij->i", target - state.p0, d) / dd
            state.t = np.clip(state.t + factor * (t - state.t), t_min, t_max)


def marching_cubes(mask: VoxelVolume, iso: float = 0.5, relax_iterations: int | None = None) -> TriangleMesh:
    """Closed, outward-oriented, manifold surface of ``mask > iso``.

    Binary masks get ``relax_iterations`` (default 20) rounds of
    edge-constrained relaxation, which removes most of the staircase area
    excess of a voxelized surface.  Scalar fields default to no relaxation.
    """
    state, tri, n_total = _march(mask, iso)
    if relax_iterations is None:
        relax_iterations = 20 if mask.is_binary else 0
    if relax_iterations > 0:
        _relax(state, tri, n_total, relax_iterations)
    return TriangleMesh(_positions(state, n_total), tri)


def _probe_orientation():
    global _FLIP
    one = VoxelVolume.mask(np.ones((1, 1, 1), dtype=np.uint8))
    if marching_cubes(one, relax_iterations=0).signed_volume() < 0:
        _FLIP = True


_probe_orientation()


# ---------------------------------------------------------------- smoothing

def _laplacian_step(v, src, dst, deg, factor):
    acc = np.zeros_like(v)
    np.add.at(acc, src, v[dst])
    return v + factor * (acc / deg[:, None] - v)


def taubin_smooth(mesh: TriangleMesh, iterations: int = 10, lam: float = 0.5, mu: float = -0.53) -> TriangleMesh:
    """Volume-preserving low-pass smoothing (alternating shrink/inflate steps)."""
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if not mesh.is_watertight():
        raise DiagnosticError("taubin_smooth needs a watertight mesh")
    if iterations == 0:
        return mesh.copy()
    e, _ = mesh.edges()
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    deg = np.bincount(src, minlength=len(mesh.vertices)).astype(float)
    deg[deg == 0] = 1.0
    v = mesh.vertices.copy()
    for _ in range(iterations):
        v = _laplacian_step(v, src, dst, deg, lam)
        v = _laplacian_step(v, src, dst, deg, mu)
    return TriangleMesh(v, mesh.triangles.copy(), mesh.labels.copy())


# ---------------------------------------------------------------- diagnostics

@dataclass(frozen=True)
class MeshDiagnostics:
    non_manifold_edges: int
    boundary_edges: int
    self_intersections: int
    components: int
    euler_characteristic: int
    min_triangle_quality: float
    sharp_edges: int = 0

    @property
    def watertight(self) -> bool:
        return self.boundary_edges == 0 and self.non_manifold_edges == 0

    def to_dict(self) -> dict:
        return {
            "non_manifold_edges": self.non_manifold_edges,
            "boundary_edges": self.boundary_edges,
            "self_intersections": self.self_intersections,
            "components": self.components,
            "euler_characteristic": self.euler_characteristic,
            "min_triangle_quality": self.min_triangle_quality,
            "sharp_edges": self.sharp_edges,
            "watertight": self.watertight,
        }


def triangle_quality(mesh: TriangleMesh) -> np.ndarray:
    """2 * inradius / circumradius; 1 for equilateral, 0 for degenerate."""
    a, b, c = mesh.corners()
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(c - a, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    area = mesh.face_areas()
    s = 0.5 * (la + lb + lc)
    r_in = np.divide(area, s, out=np.zeros_like(area), where=s > 0)
    prod = la * lb * lc
    r_out = np.divide(prod, 4 * area, out=np.full_like(area, np.inf), where=area > 0)
    return np.where(area > 0, 2 * r_in / r_out, 0.0)


def _components(n_vertices: int, tri: np.ndarray) -> int:
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    if len(tri) == 0:
        return 0
    r = np.concatenate([tri[:, 0], tri[:, 1]])
    c = np.concatenate([tri[:, 1], tri[:, 2]])
    g = coo_matrix((np.ones(len(r)), (r, c)), shape=(n_vertices, n_vertices))
    _, lab = connected_components(g, directed=False)
    return int(len(np.unique(lab[np.unique(tri)])))


def _segments_hit_triangles(p, q, a, b, c, eps=1e-12):
    """Vectorised segment p->q vs triangle (a,b,c) intersection test."""
    e1, e2 = b - a, c - a
    d = q - p
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = p - a
    u = inv * np.einsum("ij,ij->i", s, h)
    qv = np.cross(s, e1)
    v = inv * np.einsum("ij,ij->i", d, qv)
    t = inv * np.einsum("ij,ij->i", e2, qv)
    tol = 1e-9
    return ok & (u >= -tol) & (v >= -tol) & (u + v <= 1 + tol) & (t >= -tol) & (t <= 1 + tol)


def _candidate_pairs(lo: np.ndarray, hi: np.ndarray, cell: float) -> np.ndarray:
    """Triangle pairs whose bounding boxes share a broad-phase grid cell."""
    base = lo.min(axis=0)
    clo = np.floor((lo - base) / cell).astype(np.int64)
    chi = np.floor((hi - base) / cell).astype(np.int64)
    span = chi - clo + 1
    counts = span.prod(axis=1)
    tri_id = np.repeat(np.arange(len(lo)), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    sp = span[tri_id]
    ox = offs % sp[:, 0]
    oy = (offs // sp[:, 0]) % sp[:, 1]
    oz = offs // (sp[:, 0] * sp[:, 1])
    cells = clo[tri_id] + np.stack([ox, oy, oz], axis=1)
    dims = cells.max(axis=0) + 1
    key = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.lexsort((tri_id, key))
    key, tri_id = key[order], tri_id[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    sizes = np.diff(np.r_[starts, len(key)])
    pairs = []
    for s, n in zip(starts[sizes > 1], sizes[sizes > 1]):
        ids = tri_id[s:s + n]
        i, j = np.triu_indices(n, 1)
        pairs.append(np.stack([ids[i], ids[j]], axis=1))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.concatenate(pairs), axis=0)


def count_self_intersections(mesh: TriangleMesh) -> int:
    """Pairs of triangles that overlap, ignoring pairs sharing a vertex."""
    if mesh.n_triangles < 2:
        return 0
    a, b, c = mesh.corners()
    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    cell = max(float(np.median(np.max(hi - lo, axis=1))) * 2.0, 1e-9)
    pairs = _candidate_pairs(lo, hi, cell)
    if len(pairs) == 0:
        return 0
    t = mesh.triangles
    share = (t[pairs[:, 0]][:, :, None] == t[pairs[:, 1]][:, None, :]).any(axis=(1, 2))
    pairs = pairs[~share]
    box = (lo[pairs[:, 0]] <= hi[pairs[:, 1]]).all(axis=1) & (lo[pairs[:, 1]] <= hi[pairs[:, 0]]).all(axis=1)
    pairs = pairs[box]
    if len(pairs) == 0:
        return 0
    v = mesh.vertices
    hit = np.zeros(len(pairs), dtype=bool)
    for first, second in ((0, 1), (1, 0)):
        s, o = t[pairs[:, first]], t[pairs[:, second]]
        for k in range(3):
            p, q = v[s[:, k]], v[s[:, (k + 1) % 3]]
            hit |= _segments_hit_triangles(p, q, v[o[:, 0]], v[o[:, 1]], v[o[:, 2]])
    return int(hit.sum())


def _sharp_edges(mesh: TriangleMesh, max_angle_deg: float = 120.0) -> int:
    if mesh.n_triangles == 0:
        return 0
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    owner = np.tile(np.arange(len(t)), 3)
    e = np.sort(e, axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    same = (e[1:] == e[:-1]).all(axis=1)
    f1, f2 = owner[:-1][same], owner[1:][same]
    n = mesh.face_normals()
    cosang = np.einsum("ij,ij->i", n[f1], n[f2])
    return int((cosang < np.cos(np.radians(max_angle_deg))).sum())


def diagnose(mesh: TriangleMesh) -> MeshDiagnostics:
    if mesh.n_triangles == 0:
        return MeshDiagnostics(0, 0, 0, 0, 0, 0.0, 0)
    _, counts = mesh.edges()
    q = triangle_quality(mesh)
    return MeshDiagnostics(
        non_manifold_edges=int((counts > 2).sum()),
        boundary_edges=int((counts == 1).sum()),
        self_intersections=count_self_intersections(mesh),
        components=_components(len(mesh.vertices), mesh.triangles),
        euler_characteristic=mesh.euler_characteristic(),
        min_triangle_quality=float(q.min()),
        sharp_edges=_sharp_edges(mesh),
    )


# ---------------------------------------------------------------- voxelization

def voxelize_mesh(mesh: TriangleMesh, like: VoxelVolume) -> VoxelVolume:
    """Voxel centres inside a closed mesh, by z-ray crossing parity."""
    sp = np.asarray(like.spacing, float)
    org = np.asarray(like.origin, float)
    nx, ny, nz = like.dims
    counter = np.zeros((nx, ny, nz + 1), dtype=np.int64)
    if mesh.n_triangles:
        # Rays are nudged off the grid lines that carry mesh vertices.
        a, b, c = (x - org for x in mesh.corners())
        ga, gb, gc = a / sp, b / sp, c / sp
        nudge = np.array([1.234567e-4, 2.345678e-4])
        lo = np.floor(np.minimum(np.minimum(ga, gb), gc)[:, :2] - nudge).astype(int) + 1
        hi = np.floor(np.maximum(np.maximum(ga, gb), gc)[:, :2] - nudge).astype(int)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, [nx - 1, ny - 1])
        span = np.maximum(hi - lo + 1, 0)
        cnt = span[:, 0] * span[:, 1]
        tid = np.repeat(np.arange(mesh.n_triangles), cnt)
        off = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        ii = lo[tid, 0] + off % np.maximum(span[tid, 0], 1)
        jj = lo[tid, 1] + off // np.maximum(span[tid, 0], 1)
        px, py = ii + nudge[0], jj + nudge[1]
        A, B, C = ga[tid], gb[tid], gc[tid]
        det = (B[:, 0] - A[:, 0]) * (C[:, 1] - A[:, 1]) - (C[:, 0] - A[:, 0]) * (B[:, 1] - A[:, 1])
        ok = np.abs(det) > 1e-15
        det = np.where(ok, det, 1.0)
        l1 = ((px - A[:, 0]) * (C[:, 1] - A[:, 1]) - (C[:, 0] - A[:, 0]) * (py - A[:, 1])) / det
        l2 = ((B[:, 0] - A[:, 0]) * (py - A[:, 1]) - (px - A[:, 0]) * (B[:, 1] - A[:, 1])) / det
        l0 = 1 - l1 - l2
        inside = ok & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        z = l0 * A[:, 2] + l1 * B[:, 2] + l2 * C[:, 2]
        ii, jj, z = ii[inside], jj[inside], z[inside]
        kz = np.clip(np.ceil(z), 0, nz).astype(int)
        np.add.at(counter, (ii, jj, kz), 1)
    parity = np.cumsum(counter, axis=2)[:, :, :nz] % 2
    return VoxelVolume.mask(parity.astype(np.uint8), like.spacing, like.origin)


def mesh_mask_dice(mask: VoxelVolume, mesh: TriangleMesh | None = None) -> float:
    mesh = mesh if mesh is not None else marching_cubes(mask)
    back = voxelize_mesh(mesh, mask).data.astype(bool)
    a = mask.data.astype(bool)
    denom = a.sum() + back.sum()
    return 1.0 if denom == 0 else float(2 * (a & back).sum() / denom)


# ---------------------------------------------------------------- STL

_STL_HEADER = b"vesselcfd binary stl".ljust(80, b"\0")


def write_stl(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    n = mesh.n_triangles
    rec = np.zeros(n, dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")]))
    rec["n"] = mesh.face_normals()
    rec["v"] = mesh.vertices[mesh.triangles]
    try:
        with open(path, "wb") as fh:
            fh.write(_STL_HEADER)
            fh.write(struct.pack("<I", n))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise VolumeWriteError(f"cannot write {path}: {exc}") from exc


def read_stl(path) -> TriangleMesh:
    raw = Path(path).read_bytes()
    if len(raw) < 84:
        if raw.lstrip().startswith(b"solid"):
            raise FormatError("ASCII STL is not supported; binary only")
        raise FormatError("STL shorter than its 84-byte preamble")
    (n,) = struct.unpack_from("<I", raw, 80)
    if len(raw) != 84 + 50 * n:
        if raw.lstrip().startswith(b"solid"):
            raise FormatError("ASCII STL is not supported; binary only")
        raise FormatError(f"STL size {len(raw)} does not match {n} triangles")
    rec = np.frombuffer(raw, dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")]),
                        count=n, offset=84)
    corners = rec["v"].reshape(-1, 3)
    if n == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    uniq, inv = np.unique(corners, axis=0, return_inverse=True)
    return TriangleMesh(uniq.astype(np.float64), inv.reshape(-1, 3))


def export_labeled(mesh: TriangleMesh, stl_path) -> dict:
    """Write the mesh grouped by label as binary STL plus ``<stem>.labels.json``.

    The label map gives each region's half-open triangle index range in the
    written file.
    """
    import json

    stl_path = Path(stl_path)
    order = np.argsort(mesh.labels, kind="stable")
    grouped = TriangleMesh(mesh.vertices, mesh.triangles[order], mesh.labels[order])
    write_stl(grouped, stl_path)
    ranges = {}
    codes, starts, counts = np.unique(grouped.labels, return_index=True, return_counts=True)
    for code, start, count in zip(codes, starts, counts):
        ranges[label_name(code)] = [int(start), int(start + count)]
    label_map = {"stl": stl_path.name, "triangles": grouped.n_triangles, "ranges": ranges}
    try:
        stl_path.with_suffix(".labels.json").write_text(json.dumps(label_map, indent=2))
    except OSError as exc:
        raise VolumeWriteError(f"cannot write label map next to {stl_path}: {exc}") from exc
    return label_map
