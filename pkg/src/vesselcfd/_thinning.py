"""Directional simple-point thinning to a curve skeleton (26/6 topology).

Each pass peels border voxels facing one of the six face directions.  A
voxel is removed only if it is a simple point (its removal changes neither
the 26-connected foreground nor the 6-connected background locally) and it
is not a curve end (exactly one foreground neighbour).  Within a pass the
grid is split into eight parity subfields; voxels of one subfield are never
26-adjacent, so a subfield's simple points can be deleted together without
changing topology, and thin ribbons are not unzipped from one end.
"""

from __future__ import annotations

import numba
import numpy as np

_OFF = np.array([(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.int64)
_CENTRE = 13


def _adjacency(kind: int) -> np.ndarray:
    """Neighbour table inside the 3x3x3 cube for 6- or 26-adjacency (-1 padded)."""
    table = np.full((27, 26), -1, dtype=np.int64)
    for a in range(27):
        k = 0
        for b in range(27):
            if a == b:
                continue
            d = np.abs(_OFF[a] - _OFF[b])
            if d.max() > 1:
                continue
            if kind == 6 and d.sum() != 1:
                continue
            table[a, k] = b
            k += 1
    return table


_ADJ26 = _adjacency(26)
_ADJ6 = _adjacency(6)
_NORM = np.abs(_OFF).sum(axis=1)
_IN18 = (_NORM <= 2) & (np.arange(27) != _CENTRE)
_FACE6 = np.flatnonzero(_NORM == 1)
_DIRS26 = _OFF[np.argsort(_NORM, kind="stable")][1:]


@numba.njit(cache=True)
def _count_components(nb, member, adj, seeds_only, seeds):
    """Components among cube cells with member[c] true; if seeds_only, count
    only components containing a seed cell."""
    label = np.zeros(27, dtype=np.int64)
    stack = np.empty(27, dtype=np.int64)
    count = 0
    for s in range(27):
        if not member[s] or label[s] != 0:
            continue
        count += 1
        label[s] = count
        top = 0
        stack[0] = s
        top = 1
        while top > 0:
            top -= 1
            c = stack[top]
            for k in range(26):
                m = adj[c, k]
                if m < 0:
                    break
                if member[m] and label[m] == 0:
                    label[m] = count
                    stack[top] = m
                    top += 1
    if not seeds_only:
        return count
    hit = np.zeros(count + 1, dtype=np.bool_)
    for s in seeds:
        if member[s]:
            hit[label[s]] = True
    return int(hit[1:].sum())


@numba.njit(cache=True)
def _deletable(img, x, y, z, off, adj26, adj6, in18, face6):
    nb = np.zeros(27, dtype=np.bool_)
    n_fg = 0
    for c in range(27):
        v = img[x + off[c, 0], y + off[c, 1], z + off[c, 2]] != 0
        nb[c] = v
        if c != 13 and v:
            n_fg += 1
    if n_fg <= 1:
        return False  # isolated voxel or curve end
    fg = nb.copy()
    fg[13] = False
    if _count_components(nb, fg, adj26, False, face6) != 1:
        return False
    bg = np.zeros(27, dtype=np.bool_)
    for c in range(27):
        bg[c] = in18[c] and not nb[c]
    return _count_components(nb, bg, adj6, True, face6) == 1


@numba.njit(cache=True)
def _thin_loop(img, dirs, two_sided, off, adj26, adj6, in18, face6):
    nx, ny, nz = img.shape
    cand = np.empty((img.size, 3), dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(dirs.shape[0]):
            dx, dy, dz = dirs[d, 0], dirs[d, 1], dirs[d, 2]
            n = 0
            for z in range(1, nz - 1):
                for y in range(1, ny - 1):
                    for x in range(1, nx - 1):
                        if not img[x, y, z] or img[x + dx, y + dy, z + dz]:
                            continue
                        if two_sided and not img[x - dx, y - dy, z - dz]:
                            continue
                        if _deletable(img, x, y, z, off, adj26, adj6, in18, face6):
                            cand[n, 0] = x
                            cand[n, 1] = y
                            cand[n, 2] = z
                            n += 1
            # Re-check in parity-subfield order: consecutive deletions are
            # spread out instead of unzipping a thin ribbon from one end.
            for sf in range(8):
                for k in range(n):
                    x, y, z = cand[k, 0], cand[k, 1], cand[k, 2]
                    if (x & 1) | ((y & 1) << 1) | ((z & 1) << 2) != sf:
                        continue
                    if _deletable(img, x, y, z, off, adj26, adj6, in18, face6):
                        img[x, y, z] = 0
                        changed = True
    return img


def thin(mask: np.ndarray, phases=((False, 6),)) -> np.ndarray:
    """Curve skeleton of a boolean 3D array (same shape, boolean)."""
    img = np.pad(np.asarray(mask, dtype=np.uint8), 1)
    for two_sided, nd in phases:
        _thin_loop(img, _DIRS26[:nd], two_sided, _OFF, _ADJ26, _ADJ6, _IN18, _FACE6)
    return img[1:-1, 1:-1, 1:-1].astype(bool)
