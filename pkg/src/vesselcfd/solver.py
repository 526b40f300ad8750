"""Steady incompressible flow on a Cartesian MAC grid.

The vessel wall enters through a smoothed signed distance to the voxel mask.
Cells whose centre lies inside the vessel are fluid, and tangential
velocities see the wall at its level-set position (Shortley-Weller
stencils).  Face-normal velocities stop at the stair-step cell faces.
Steady state is reached by pseudo-time marching.  Each step is a two-stage
Heun update, and each stage ends with a pressure-Poisson correction that
makes the face fluxes discretely divergence free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
from scipy import ndimage as ndi
from scipy.sparse.linalg import splu

from vesselcfd.errors import DivergenceError, PreconditionError, ResolutionError
from vesselcfd.topology import STRUCT_6

MASS_FLOW_RANGE = (0.0010, 0.0040)

SOLID, FLUID, INLET, OUTLET = 0, 1, 2, 3
PAD_CELLS = 3
MIN_CELLS_ACROSS = 4
THETA_MIN = 0.25  # closest admissible wall distance, in cells
DIRECT_MAX_CELLS = 80_000
PCG_RTOL = 1e-10
DIVERGENCE_TOL = 1e-8
PROBE_CELLS = (1.0, 2.0)  # wall-normal probe distances for the WSS fit


@dataclass(frozen=True)
class SolverConfig:
    density: float = 1060.0
    viscosity: float = 0.0035
    mass_flow: float = 0.0025
    grid_spacing_mm: float = 0.15
    cfl: float = 0.8
    residual_tol: float = 1e-6
    max_steps: int = 200000
    allow_any_mass_flow: bool = False

    def __post_init__(self):
        if not 0.0 < self.cfl < 1.0:
            raise ValueError("cfl must lie in (0, 1)")
        if min(self.density, self.viscosity, self.mass_flow, self.grid_spacing_mm, self.residual_tol) <= 0:
            raise ValueError("physical constants must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        lo, hi = MASS_FLOW_RANGE
        if not self.allow_any_mass_flow and not lo <= self.mass_flow <= hi:
            raise ValueError(f"mass flow {self.mass_flow} outside [{lo}, {hi}] kg/s")

    @property
    def kinematic_viscosity(self) -> float:
        return self.viscosity / self.density

    def volume_flow(self) -> float:
        """Q in m^3/s."""
        return self.mass_flow / self.density


# ------------------------------------------------------------------ geometry

class _LevelSet:
    """Smoothed signed distance (mm, positive inside) to a voxel mask."""

    def __init__(self, mask_vol):
        s = np.asarray(mask_vol.spacing, float)
        a = np.pad(mask_vol.data.astype(bool), PAD_CELLS)
        half = 0.5 * s.mean()
        d_in = ndi.distance_transform_edt(a, sampling=s)
        d_out = ndi.distance_transform_edt(~a, sampling=s)
        phi = np.where(a, d_in - half, -(d_out - half))
        self.phi = ndi.gaussian_filter(phi, 1.0, mode="nearest")
        self.grad = [g for g in np.gradient(self.phi, *s)]
        self.spacing = s
        self.origin = np.asarray(mask_vol.origin, float) - PAD_CELLS * s

    def _coords(self, pts):
        return ((np.atleast_2d(pts) - self.origin) / self.spacing).T

    def value(self, pts) -> np.ndarray:
        return ndi.map_coordinates(self.phi, self._coords(pts), order=1, mode="nearest")

    def normal(self, pts) -> np.ndarray:
        c = self._coords(pts)
        g = np.stack([ndi.map_coordinates(gi, c, order=1, mode="nearest") for gi in self.grad], axis=1)
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)


@dataclass
class _Grid:
    h_mm: float
    lo_mm: np.ndarray  # lower corner of cell (0, 0, 0)
    kind: np.ndarray
    phi: np.ndarray  # level set at cell centres, mm
    boundary_of_cell: np.ndarray  # cut index for INLET/OUTLET cells, -1 elsewhere

    @property
    def shape(self):
        return self.kind.shape

    def centres(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(3, -1).T
        return self.lo_mm + (idx + 0.5) * self.h_mm

    def face_positions(self, c: int, flat) -> np.ndarray:
        shape = list(self.shape)
        shape[c] += 1
        idx = np.stack(np.unravel_index(flat, shape), axis=1).astype(float)
        off = np.full(3, 0.5)
        off[c] = 0.0
        return self.lo_mm + (idx + off) * self.h_mm


def _thinnest_diameter_mm(domain) -> float:
    g = domain.centerline
    if g is not None and g.voxels is not None and len(g.radii):
        vox = np.asarray(g.voxels)
        inside = domain.regions.data[tuple(vox.T)] == 1
        if inside.any():
            return 2.0 * float(np.min(g.radii[inside]))
    d = ndi.distance_transform_edt(np.pad(domain.fluid.data.astype(bool), 1), sampling=domain.mask.spacing)
    return 2.0 * float(d.max())


def _build_grid(domain, h_mm: float, ls: _LevelSet) -> _Grid:
    mvol = domain.mask
    sp_m = np.asarray(mvol.spacing, float)
    regions = domain.regions.data.astype(np.int32)
    vessel = regions > 0
    # Every grid point inherits the region of its nearest vessel voxel.
    near = ndi.distance_transform_edt(~vessel, sampling=sp_m, return_distances=False, return_indices=True)
    filled = regions[tuple(near)]

    fl = np.argwhere(regions == 1)
    lo = mvol.index_to_mm(fl.min(axis=0)) - 0.5 * sp_m
    hi = mvol.index_to_mm(fl.max(axis=0)) + 0.5 * sp_m
    n_core = np.ceil((hi - lo) / h_mm).astype(int) + 2
    lo_mm = lo - (PAD_CELLS + 1) * h_mm
    shape = tuple(int(n) + 2 * PAD_CELLS + 2 for n in n_core)
    grid = _Grid(h_mm, lo_mm, np.zeros(shape, np.int8), np.zeros(shape), np.full(shape, -1, np.int32))

    pts = grid.centres()
    phi = ls.value(pts).reshape(shape)
    ijk = np.rint(mvol.mm_to_index(pts)).astype(int)
    ijk = np.clip(ijk, 0, np.array(regions.shape) - 1)
    reg = filled[tuple(ijk.T)].reshape(shape)
    inside = phi > 0
    kind = np.zeros(shape, np.int8)
    fluid = inside & (reg == 1)
    lab, n = ndi.label(fluid, structure=STRUCT_6)
    if n == 0:
        raise ResolutionError("no fluid cells at this grid spacing")
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    kind[lab == int(np.argmax(sizes))] = FLUID
    cut = -np.ones(shape, np.int32)
    for b, c in enumerate(domain.plan.cuts):
        sel = inside & (reg == 2 + b)
        kind[sel] = INLET if c.role.value == "inlet" else OUTLET
        cut[sel] = b
    p = PAD_CELLS
    edge = np.ones(shape, bool)
    edge[p:-p, p:-p, p:-p] = False
    kind[edge] = SOLID
    cut[edge] = -1
    grid.kind, grid.phi, grid.boundary_of_cell = kind, phi, cut
    return grid


# ------------------------------------------------------------ discretisation

def _axis_slices(c: int, a: slice, ndim: int = 3):
    s = [slice(None)] * ndim
    s[c] = a
    return tuple(s)


@dataclass
class _Faces:
    """Classification of the faces normal to one axis."""

    shape: tuple
    active: np.ndarray  # flat indices of unknown velocities
    fixed: np.ndarray  # full array of prescribed values (inlet plug, zeros)
    ghost: np.ndarray  # flat indices filled by zero-gradient copies
    ghost_src: np.ndarray
    wall: np.ndarray  # flat indices of fluid|solid faces
    lo_cell: np.ndarray  # for active faces: flat cell index below (or -1)
    hi_cell: np.ndarray
    lo_kind: np.ndarray
    hi_kind: np.ndarray
    inlet_faces: np.ndarray  # flat indices of fluid|inlet faces
    inlet_sign: np.ndarray  # +1 where the fluid lies on the high side
    outlet_faces: np.ndarray
    outlet_sign: np.ndarray  # +1 where the outlet lies on the high side
    outlet_cut: np.ndarray


def _classify_faces(grid: _Grid, c: int, plug: np.ndarray) -> _Faces:
    kind = grid.kind
    pad = [(0, 0)] * 3
    pad[c] = (1, 1)
    kp = np.pad(kind, pad, constant_values=SOLID)
    cp = np.pad(grid.boundary_of_cell, pad, constant_values=-1)
    lo = kp[_axis_slices(c, slice(0, -1))]
    hi = kp[_axis_slices(c, slice(1, None))]
    shape = lo.shape
    F, I, O = FLUID, INLET, OUTLET
    to_out_hi = (lo == F) & (hi == O)
    to_out_lo = (lo == O) & (hi == F)
    active = ((lo == F) & (hi == F)) | to_out_hi | to_out_lo
    inlet = ((lo == F) & (hi == I)) | ((lo == I) & (hi == F))
    inlet_ghost = (lo == I) & (hi == I)
    ghost = ((lo == O) | (hi == O)) & ~active & ~inlet
    wall = ((lo == F) & (hi == SOLID)) | ((lo == SOLID) & (hi == F))
    fixed = np.zeros(shape)
    fixed[inlet | inlet_ghost] = plug[c]

    if ghost.any():
        _, src = ndi.distance_transform_edt(~active, return_indices=True)
        ghost_src = np.ravel_multi_index(tuple(s[ghost] for s in src), shape)
    else:
        ghost_src = np.zeros(0, np.int64)

    act = np.flatnonzero(active)
    idx = np.stack(np.unravel_index(act, shape), axis=1)
    lo_idx = idx.copy()
    lo_idx[:, c] -= 1
    cells = kind.shape
    lo_ok = lo_idx[:, c] >= 0
    hi_ok = idx[:, c] < cells[c]
    lo_cell = np.full(len(act), -1, np.int64)
    hi_cell = np.full(len(act), -1, np.int64)
    lo_cell[lo_ok] = np.ravel_multi_index(tuple(lo_idx[lo_ok].T), cells)
    hi_cell[hi_ok] = np.ravel_multi_index(tuple(idx[hi_ok].T), cells)

    out_faces = np.flatnonzero(to_out_hi | to_out_lo)
    out_sign = np.where(to_out_hi.ravel()[out_faces], 1, -1)
    lo_c = cp[_axis_slices(c, slice(0, -1))].ravel()
    hi_c = cp[_axis_slices(c, slice(1, None))].ravel()
    out_cut = np.where(out_sign > 0, hi_c[out_faces], lo_c[out_faces])
    in_faces = np.flatnonzero(inlet)
    in_sign = np.where((hi == F).ravel()[in_faces], 1, -1)
    return _Faces(shape, act, fixed, np.flatnonzero(ghost), ghost_src, np.flatnonzero(wall),
                  lo_cell, hi_cell, lo.ravel()[act], hi.ravel()[act], in_faces, in_sign,
                  out_faces, out_sign, out_cut)


def _viscous_operator(grid: _Grid, faces: list[_Faces], c: int, h: float):
    """Sparse Laplacian rows for the active faces of component ``c``.

    Neighbours holding a wall value (zero) are placed at the level-set wall
    position for tangential directions, and at the cell face for the
    face-normal direction.
    """
    fc = faces[c]
    shape = fc.shape
    pad = [(0, 0)] * 3
    pad[c] = (1, 1)
    phc = np.pad(grid.phi, pad, mode="edge")
    phi_f = 0.5 * (phc[_axis_slices(c, slice(0, -1))] + phc[_axis_slices(c, slice(1, None))]).ravel()
    meaningful = np.zeros(int(np.prod(shape)), bool)
    meaningful[fc.active] = True
    meaningful[fc.ghost] = True
    meaningful[np.flatnonzero(fc.fixed.ravel() != 0)] = True
    inlet_like = np.zeros_like(meaningful)
    inlet_like[fc.inlet_faces] = True
    meaningful |= inlet_like

    act = fc.active
    idx = np.stack(np.unravel_index(act, shape), axis=1)
    rows, cols, vals = [], [], []
    diag = np.zeros(len(act))
    for d in range(3):
        theta = {}
        nbr = {}
        for s in (1, -1):
            j = idx.copy()
            j[:, d] += s
            g = np.ravel_multi_index(tuple(j.T), shape)
            th = np.ones(len(act))
            if d != c:
                wall = ~meaningful[g]
                pf, pg = phi_f[act], phi_f[g]
                cross = wall & (pf > 0) & (pg < 0)
                th[cross] = pf[cross] / (pf[cross] - pg[cross])
                th = np.clip(th, THETA_MIN, 1.0)
            theta[s], nbr[s] = th, g
        hp, hm = theta[1] * h, theta[-1] * h
        for s, hs in ((1, hp), (-1, hm)):
            a = 2.0 / (hs * (hp + hm))
            diag -= a
            ok = meaningful[nbr[s]]
            rows.append(np.flatnonzero(ok))
            cols.append(nbr[s][ok])
            vals.append(a[ok])
    n = len(act)
    rows.append(np.arange(n))
    cols.append(act)
    vals.append(diag)
    op = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(n, int(np.prod(shape))))
    return op, float(-diag.min()) if n else 0.0


@numba.njit(cache=True)
def _minmod(a, b):
    if a * b <= 0.0:
        return 0.0
    return a if abs(a) < abs(b) else b


@numba.njit(cache=True)
def _at(q, i, j, k, d, s):
    if d == 0:
        return q[i + s, j, k]
    if d == 1:
        return q[i, j + s, k]
    return q[i, j, k + s]


@numba.njit(cache=True)
def _upwind(q, i, j, k, d, a, s0):
    """Limited upwind value at the half point between offsets s0 and s0+1 along d."""
    q0 = _at(q, i, j, k, d, s0)
    q1 = _at(q, i, j, k, d, s0 + 1)
    if a >= 0.0:
        return q0 + 0.5 * _minmod(q1 - q0, q0 - _at(q, i, j, k, d, s0 - 1))
    return q1 - 0.5 * _minmod(q1 - q0, _at(q, i, j, k, d, s0 + 2) - q1)


@numba.njit(cache=True)
def _convection(c, q, vel, act, h, out):
    """Flux-form advection div(u q) at the active faces of component c."""
    for n in range(act.shape[0]):
        i, j, k = act[n, 0], act[n, 1], act[n, 2]
        total = 0.0
        for d in range(3):
            if d == c:
                ap = 0.5 * (q[i, j, k] + _at(q, i, j, k, d, 1))
                am = 0.5 * (_at(q, i, j, k, d, -1) + q[i, j, k])
            else:
                v = vel[d]
                ic, jc, kc = i, j, k
                if c == 0:
                    ic -= 1
                elif c == 1:
                    jc -= 1
                else:
                    kc -= 1
                ap = 0.5 * (_at(v, ic, jc, kc, d, 1) + _at(v, i, j, k, d, 1))
                am = 0.5 * (v[ic, jc, kc] + v[i, j, k])
            qp = _upwind(q, i, j, k, d, ap, 0)
            qm = _upwind(q, i, j, k, d, am, -1)
            total += (ap * qp - am * qm) / h
        out[n] = total


class _Poisson:
    """A psi = b for the SPD pressure operator: sparse LU when small, AMG-PCG otherwise."""

    def __init__(self, A):
        self.n = A.shape[0]
        self._lu = None
        self._ml = None
        if self.n <= DIRECT_MAX_CELLS:
            self._lu = splu(A.tocsc())
        else:
            import pyamg

            self._ml = pyamg.smoothed_aggregation_solver(A.tocsr(), symmetry="symmetric")

    def solve(self, b, x0=None):
        if self._lu is not None:
            return self._lu.solve(b)
        return self._ml.solve(b, x0=x0, tol=PCG_RTOL, accel="cg", maxiter=1000)


# ------------------------------------------------------------------- results

@dataclass
class FlowField:
    """Converged (or abandoned) flow state on the solver grid, SI units.

    ``u, v, w`` are staggered face velocities (m/s), ``p`` the gauge cell
    pressure (Pa, zero at the outlets).  ``residuals`` has one row
    ``(Ru, Rv, Rw, Rp)`` per step.  ``wss`` holds one sample per wall face
    with its wall point (mm) and projected area weight (mm^2).
    """

    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    p: np.ndarray
    residuals: np.ndarray
    wss: np.ndarray
    wss_points: np.ndarray
    wss_weights: np.ndarray
    converged: bool
    steps: int
    h_mm: float
    lo_mm: np.ndarray
    kind: np.ndarray
    inflow: float  # kg/s
    outflows: list[float]
    u_inlet: float
    max_divergence: float = 0.0
    diverged: bool = False
    residual_tol: float = 1e-6
    error: str | None = None
    extras: dict = field(default_factory=dict)

    @property
    def outflow(self) -> float:
        return float(sum(self.outflows))

    @property
    def mass_balance(self) -> float:
        return abs(self.inflow - self.outflow) / self.inflow if self.inflow > 0 else math.inf

    def mean_wss(self, select=None) -> float:
        """Area-weighted mean wall shear stress (Pa); ``select`` is an optional boolean mask."""
        w = self.wss_weights if select is None else self.wss_weights[select]
        t = self.wss if select is None else self.wss[select]
        return float((t * w).sum() / w.sum()) if w.sum() > 0 else math.nan

    @property
    def max_wss(self) -> float:
        return float(self.wss.max()) if len(self.wss) else math.nan

    @property
    def pressure_drop(self) -> float:
        cells = self.extras.get("inlet_cells")
        if cells is None or not len(cells):
            return math.nan
        return float(self.p.ravel()[cells].mean())

    def sample_velocity(self, points_mm) -> np.ndarray:
        """Trilinear velocity (m/s) at points given in mm."""
        pts = np.atleast_2d(np.asarray(points_mm, float))
        out = np.zeros((len(pts), 3))
        for c, q in enumerate((self.u, self.v, self.w)):
            off = np.full(3, 0.5)
            off[c] = 0.0
            coords = ((pts - self.lo_mm) / self.h_mm - off).T
            out[:, c] = ndi.map_coordinates(q, coords, order=1, mode="nearest")
        return out

    def summary(self) -> dict:
        last = self.residuals[-1].tolist() if len(self.residuals) else None
        return {
            "converged": bool(self.converged),
            "diverged": bool(self.diverged),
            "steps": int(self.steps),
            "final_residuals": last,
            "mean_wss_pa": _finite(self.mean_wss()),
            "max_wss_pa": _finite(self.max_wss),
            "pressure_drop_pa": _finite(self.pressure_drop),
            "inflow_kg_s": _finite(self.inflow),
            "outflow_kg_s": _finite(self.outflow),
            "mass_balance": _finite(self.mass_balance),
            "u_inlet_m_s": _finite(self.u_inlet),
            "grid_spacing_mm": self.h_mm,
            "fluid_cells": int((self.kind == FLUID).sum()),
            "error": self.error,
        }


def _finite(x):
    x = float(x)
    return x if math.isfinite(x) else None


# -------------------------------------------------------------------- solver

class _System:
    """Discrete operators for one domain at one grid spacing."""

    def __init__(self, domain, cfg: SolverConfig):
        h_mm = cfg.grid_spacing_mm
        if _thinnest_diameter_mm(domain) < MIN_CELLS_ACROSS * h_mm:
            raise ResolutionError(
                f"thinnest passage spans fewer than {MIN_CELLS_ACROSS} cells at h={h_mm} mm")
        inlet = domain.inlet
        if len(inlet.faces) == 0 or inlet.area_mm2(domain.mask.spacing) <= 0:
            raise PreconditionError("inlet area is zero")
        self.cfg = cfg
        self.ls = _LevelSet(domain.mask)
        self.grid = g = _build_grid(domain, h_mm, self.ls)
        self.h = h = h_mm * 1e-3
        n_in = np.asarray(inlet.normal, float)
        n_in = n_in / np.linalg.norm(n_in)

        unit = [_classify_faces(g, c, n_in) for c in range(3)]
        area = sum(float((f.inlet_sign * n_in[c]).sum()) for c, f in enumerate(unit)) * h * h
        if area <= 0:
            raise PreconditionError("inlet has no flux-carrying faces at this grid spacing")
        self.u_in = cfg.volume_flow() / area
        self.faces = [_classify_faces(g, c, self.u_in * n_in) for c in range(3)]
        self.inlet_area = area
        self.n_cuts = len(domain.plan.cuts)

        fluid = np.flatnonzero(g.kind.ravel() == FLUID)
        self.fluid = fluid
        cell_id = -np.ones(g.kind.size, np.int64)
        cell_id[fluid] = np.arange(len(fluid))
        self.cell_id = cell_id

        grows, gcols, gvals = [], [], []
        drows, dcols, dvals = [], [], []
        self.offsets = [0]
        for f in self.faces:
            self.offsets.append(self.offsets[-1] + len(f.active))
        for c, f in enumerate(self.faces):
            r = np.arange(len(f.active)) + self.offsets[c]
            lo_f = f.lo_kind == FLUID
            hi_f = f.hi_kind == FLUID
            both = lo_f & hi_f
            # Gradient: interior faces, then faces whose far side is a zero-pressure outlet.
            gl = np.where(both, -1.0 / h, np.where(lo_f, -2.0 / h, 0.0))
            gh = np.where(both, 1.0 / h, np.where(hi_f, 2.0 / h, 0.0))
            grows += [r[lo_f], r[hi_f]]
            gcols += [cell_id[f.lo_cell[lo_f]], cell_id[f.hi_cell[hi_f]]]
            gvals += [gl[lo_f], gh[hi_f]]
            drows += [cell_id[f.lo_cell[lo_f]], cell_id[f.hi_cell[hi_f]]]
            dcols += [r[lo_f], r[hi_f]]
            dvals += [np.full(lo_f.sum(), 1.0 / h), np.full(hi_f.sum(), -1.0 / h)]
        n_act, n_cell = self.offsets[-1], len(fluid)
        self.G = sp.csr_matrix((np.concatenate(gvals), (np.concatenate(grows), np.concatenate(gcols))),
                               shape=(n_act, n_cell))
        D = sp.csr_matrix((np.concatenate(dvals), (np.concatenate(drows), np.concatenate(dcols))),
                          shape=(n_cell, n_act))
        A = -(D @ self.G)
        self.poisson = _Poisson(A.tocsr())

        self.visc, diag_max = [], 0.0
        for c in range(3):
            op, dm = _viscous_operator(g, self.faces, c, h)
            self.visc.append(op)
            diag_max = max(diag_max, dm)
        nu = cfg.kinematic_viscosity
        # Heun is stable for real eigenvalues down to -2/dt; Gershgorin bounds them by 2*diag.
        self.dt_visc = 0.9 / (nu * diag_max) if diag_max > 0 else math.inf
        self.act_idx = [np.stack(np.unravel_index(f.active, f.shape), axis=1).astype(np.int64)
                        for f in self.faces]

    # -- field helpers
    def initial(self):
        return [f.fixed.copy() for f in self.faces], np.zeros(self.grid.kind.shape)

    def fill_ghosts(self, vel):
        for q, f in zip(vel, self.faces):
            if len(f.ghost):
                q.ravel()[f.ghost] = q.ravel()[f.ghost_src]

    def divergence(self, vel) -> np.ndarray:
        div = np.zeros(self.grid.kind.shape)
        for c, q in enumerate(vel):
            div += np.diff(q, axis=c)
        return (div / self.h).ravel()[self.fluid]

    def rhs(self, vel, p):
        cfg = self.cfg
        nu, rho = cfg.kinematic_viscosity, cfg.density
        p_f = p.ravel()[self.fluid]
        grad = self.G @ p_f
        out = []
        vt = tuple(vel)
        for c, q in enumerate(vel):
            conv = np.empty(len(self.faces[c].active))
            _convection(c, q, vt, self.act_idx[c], self.h, conv)
            lap = self.visc[c] @ q.ravel()
            out.append(-conv + nu * lap - grad[self.offsets[c]:self.offsets[c + 1]] / rho)
        return out

    def project(self, vel, dt):
        """Make ``vel`` divergence free in place; returns psi on fluid cells."""
        b = -self.divergence(vel) / dt
        psi = self.poisson.solve(b)
        corr = self.G @ psi
        for c, q in enumerate(vel):
            q.ravel()[self.faces[c].active] -= dt * corr[self.offsets[c]:self.offsets[c + 1]]
        self.fill_ghosts(vel)
        return psi

    def fluxes(self, vel):
        h2 = self.h * self.h
        rho = self.cfg.density
        inflow = sum(float((q.ravel()[f.inlet_faces] * f.inlet_sign).sum())
                     for q, f in zip(vel, self.faces)) * h2 * rho
        outs = np.zeros(self.n_cuts)
        for q, f in zip(vel, self.faces):
            if len(f.outlet_faces):
                np.add.at(outs, f.outlet_cut, q.ravel()[f.outlet_faces] * f.outlet_sign)
        return inflow, [float(x) * h2 * rho for x in outs]

    def step(self, vel, p):
        """One Heun pseudo-time step; returns new (vel, p) and the dt used."""
        cfg = self.cfg
        # 3D Courant number: the sum of per-axis speeds bounds sum(|u_d|) dt / h.
        usum = sum(float(np.abs(q).max()) for q in vel)
        dt = min(cfg.cfl * self.h / max(usum, self.u_in), self.dt_visc)
        rho = cfg.density
        k1 = self.rhs(vel, p)
        v1 = [q.copy() for q in vel]
        for c, q in enumerate(v1):
            q.ravel()[self.faces[c].active] += dt * k1[c]
        self.fill_ghosts(v1)
        psi1 = self.project(v1, dt)
        p1 = p.copy()
        p1.ravel()[self.fluid] += rho * psi1
        k2 = self.rhs(v1, p1)
        v2 = [q.copy() for q in vel]
        for c, q in enumerate(v2):
            a = self.faces[c].active
            q.ravel()[a] = 0.5 * (q.ravel()[a] + v1[c].ravel()[a]) + 0.5 * dt * k2[c]
        self.fill_ghosts(v2)
        psi2 = self.project(v2, dt)
        p2 = p1
        p2.ravel()[self.fluid] += 2.0 * rho * psi2
        return v2, p2, dt


def _wall_shear(system: _System, vel, cfg: SolverConfig):
    """Per wall face: fit u_t(d) = a d + b d^2 through two wall-normal probes."""
    g = system.grid
    pts, wts = [], []
    for c, f in enumerate(system.faces):
        if not len(f.wall):
            continue
        pts.append(g.face_positions(c, f.wall))
        wts.append(np.full(len(f.wall), c))
    if not pts:
        return np.zeros(0), np.zeros((0, 3)), np.zeros(0)
    x = np.concatenate(pts)
    axis = np.concatenate(wts)
    ls = system.ls
    phi = ls.value(x)
    n = ls.normal(x)
    xw = x - phi[:, None] * n
    h_mm = g.h_mm
    d1, d2 = PROBE_CELLS[0] * h_mm, PROBE_CELLS[1] * h_mm
    field = FlowField(*vel, np.zeros(1), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)), np.zeros(0),
                      False, 0, h_mm, g.lo_mm, g.kind, 0.0, [], 0.0)
    u1 = field.sample_velocity(xw + d1 * n)
    u2 = field.sample_velocity(xw + d2 * n)
    u1 -= (u1 * n).sum(axis=1, keepdims=True) * n
    u2 -= (u2 * n).sum(axis=1, keepdims=True) * n
    d1m, d2m = d1 * 1e-3, d2 * 1e-3
    slope = (u1 * d2m ** 2 - u2 * d1m ** 2) / (d1m * d2m * (d2m - d1m))
    tau = cfg.viscosity * np.linalg.norm(slope, axis=1)
    weight = np.abs(n[np.arange(len(n)), axis]) * h_mm * h_mm
    return tau, xw, weight


def solve_steady(domain, cfg: SolverConfig | None = None, callback=None) -> FlowField:
    """March the flow on ``domain`` to steady state.

    Returns a FlowField whose ``converged`` flag tells whether every
    normalized residual fell to ``cfg.residual_tol`` within ``cfg.max_steps``.
    A blow-up is reported as ``diverged=True`` instead of raising.
    """
    cfg = cfg or SolverConfig()
    system = _System(domain, cfg)
    vel, p = system.initial()
    system.fill_ghosts(vel)
    dt0 = min(cfg.cfl * system.h / system.u_in, system.dt_visc)
    system.project(vel, dt0)
    scale_div = system.h / system.u_in

    history = np.zeros((cfg.max_steps, 4))
    converged = diverged = False
    max_div = float(np.abs(system.divergence(vel)).max() * scale_div) if len(system.fluid) else 0.0
    steps = 0
    error = None
    for steps in range(1, cfg.max_steps + 1):
        new_vel, new_p, dt = system.step(vel, p)
        norm = sum(float(np.abs(q.ravel()[f.active]).sum()) for q, f in zip(new_vel, system.faces)) + 1e-12
        res = [float(np.abs(nq.ravel()[f.active] - q.ravel()[f.active]).sum()) / norm
               for nq, q, f in zip(new_vel, vel, system.faces)]
        dp = new_p.ravel()[system.fluid]
        res.append(float(np.abs(dp - p.ravel()[system.fluid]).sum()) / (float(np.abs(dp).sum()) + 1e-12))
        history[steps - 1] = res
        vel, p = new_vel, new_p
        if not all(math.isfinite(r) for r in res):
            diverged = True
            error = "non-finite field values"
            break
        max_div = max(max_div, float(np.abs(system.divergence(vel)).max()) * scale_div)
        if callback is not None:
            callback(steps, res, dt)
        if max(res) <= cfg.residual_tol:
            converged = True
            break
    if not converged and not diverged:
        error = f"residuals above {cfg.residual_tol:g} after {cfg.max_steps} steps"

    inflow, outflows = system.fluxes(vel)
    if diverged:
        tau, xw, wt = np.zeros(0), np.zeros((0, 3)), np.zeros(0)
    else:
        tau, xw, wt = _wall_shear(system, vel, cfg)
    inlet_cells = _inlet_cells(system)
    return FlowField(vel[0], vel[1], vel[2], p, history[:steps].copy(), tau, xw, wt,
                     converged, steps, system.grid.h_mm, system.grid.lo_mm, system.grid.kind,
                     inflow, outflows, system.u_in, max_div, diverged, cfg.residual_tol, error,
                     {"inlet_cells": inlet_cells, "inlet_area_m2": system.inlet_area})


def _inlet_cells(system: _System) -> np.ndarray:
    cells = []
    kshape = system.grid.kind.shape
    for c, f in enumerate(system.faces):
        if not len(f.inlet_faces):
            continue
        idx = np.stack(np.unravel_index(f.inlet_faces, f.shape), axis=1)
        fluid_side = idx.copy()
        fluid_side[f.inlet_sign < 0, c] -= 1
        cells.append(np.ravel_multi_index(tuple(fluid_side.T), kshape))
    return np.unique(np.concatenate(cells)) if cells else np.zeros(0, np.int64)


def bfa_check(field: FlowField | None) -> int:
    """Blood-flow availability: converged and mass conserving."""
    if field is None or field.diverged or not field.converged:
        return 0
    if not math.isfinite(field.mass_balance) or field.mass_balance > 1e-4:
        return 0
    res = field.residuals
    if len(res) == 0 or not np.isfinite(res).all() or res[-1].max() > field.residual_tol:
        return 0
    return 1


@dataclass
class GridRow:
    spacing_mm: float
    mean_wss: float | None
    converged: bool
    steps: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        return {"spacing_mm": self.spacing_mm, "mean_wss_pa": self.mean_wss,
                "converged": self.converged, "steps": self.steps, "error": self.error}


@dataclass
class GridStudy:
    rows: list[GridRow]

    @property
    def differences(self) -> list[float]:
        """Successive |dWSS|/WSS between consecutive resolved rows (finer value as reference)."""
        out = []
        for a, b in zip(self.rows, self.rows[1:]):
            if a.mean_wss is None or b.mean_wss is None:
                out.append(math.nan)
            else:
                out.append(abs(b.mean_wss - a.mean_wss) / abs(b.mean_wss))
        return out

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "differences": self.differences}


def grid_independence(domain, cfg: SolverConfig, spacings) -> GridStudy:
    """One steady solve per spacing (coarse to fine)."""
    spacings = [float(s) for s in spacings]
    if not spacings:
        raise ValueError("at least one spacing is required")
    if any(b >= a for a, b in zip(spacings, spacings[1:])):
        raise ValueError("spacings must be strictly decreasing")
    rows = []
    for s in spacings:
        run = SolverConfig(**{**cfg.__dict__, "grid_spacing_mm": s})
        try:
            f = solve_steady(domain, run)
        except (ResolutionError, PreconditionError, DivergenceError) as exc:
            rows.append(GridRow(s, None, False, 0, f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(GridRow(s, _finite(f.mean_wss()), bool(f.converged), f.steps, f.error))
    return GridStudy(rows)
