"""Brute-force reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def _gf2_rank(rows):
    """Rank over GF(2) of a matrix given as a list of int bitmasks."""
    pivots = {}
    rank = 0
    for r in rows:
        while r:
            top = r.bit_length() - 1
            if top in pivots:
                r ^= pivots[top]
            else:
                pivots[top] = r
                rank += 1
                break
    return rank


def cubical_betti(mask):
    """Betti numbers of the closed-voxel cubical complex via boundary-matrix ranks.

    Cells are enumerated explicitly in doubled coordinates; a cell exists when
    it lies in the closure of some foreground voxel.
    """
    mask = np.asarray(mask, dtype=bool)
    cells = set()
    for i, j, k in zip(*np.nonzero(mask)):
        base = (2 * i, 2 * j, 2 * k)
        for d in itertools.product(range(3), repeat=3):
            cells.add((base[0] + d[0], base[1] + d[1], base[2] + d[2]))
    by_dim = {0: [], 1: [], 2: [], 3: []}
    for c in cells:
        by_dim[sum(x % 2 for x in c)].append(c)
    index = {d: {c: n for n, c in enumerate(sorted(by_dim[d]))} for d in by_dim}

    def boundary(c):
        out = []
        for ax in range(3):
            if c[ax] % 2:
                for s in (-1, 1):
                    f = list(c)
                    f[ax] += s
                    out.append(tuple(f))
        return out

    ranks = {}
    for d in (1, 2, 3):
        rows = []
        for c in by_dim[d]:
            bits = 0
            for f in boundary(c):
                bits |= 1 << index[d - 1][f]
            rows.append(bits)
        ranks[d] = _gf2_rank(rows)
    n = {d: len(by_dim[d]) for d in by_dim}
    b0 = n[0] - ranks[1]
    b1 = n[1] - ranks[1] - ranks[2]
    b2 = n[2] - ranks[2] - ranks[3]
    return b0, b1, b2


def brute_components(mask, connectivity=26):
    """Flood-fill component count with explicit neighbour offsets."""
    mask = np.asarray(mask, dtype=bool)
    offs = [d for d in itertools.product((-1, 0, 1), repeat=3) if any(d)]
    if connectivity == 6:
        offs = [d for d in offs if sum(map(abs, d)) == 1]
    seen = np.zeros_like(mask)
    count = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        count += 1
        stack = [start]
        seen[start] = True
        while stack:
            p = stack.pop()
            for d in offs:
                q = (p[0] + d[0], p[1] + d[1], p[2] + d[2])
                if all(0 <= q[a] < mask.shape[a] for a in range(3)) and mask[q] and not seen[q]:
                    seen[q] = True
                    stack.append(q)
    return count


def brute_surface(mask):
    """Foreground voxels with a 6-neighbour outside the mask (or the grid)."""
    mask = np.asarray(mask, dtype=bool)
    out = []
    for p in zip(*np.nonzero(mask)):
        for ax in range(3):
            for s in (-1, 1):
                q = list(p)
                q[ax] += s
                if not (0 <= q[ax] < mask.shape[ax]) or not mask[tuple(q)]:
                    out.append(p)
                    break
            else:
                continue
            break
    return out


def brute_directed_distances(src, dst, spacing):
    res = []
    for p in src:
        best = math.inf
        for q in dst:
            d = math.sqrt(sum(((p[a] - q[a]) * spacing[a]) ** 2 for a in range(3)))
            best = min(best, d)
        res.append(best)
    return res


def brute_hd95(a, b, spacing):
    sa, sb = brute_surface(a), brute_surface(b)
    pooled = brute_directed_distances(sa, sb, spacing) + brute_directed_distances(sb, sa, spacing)
    pooled.sort()
    # Linear interpolation between order statistics.
    pos = 0.95 * (len(pooled) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(pooled) - 1)
    return pooled[lo] + (pooled[hi] - pooled[lo]) * (pos - lo)


def brute_dice(a, b):
    a = np.asarray(a, bool).ravel().tolist()
    b = np.asarray(b, bool).ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    total = sum(a) + sum(b)
    return 1.0 if total == 0 else 2 * inter / total


def brute_band(mask, d=1):
    """Mask voxels within city-block distance d of the complement (grid outside counts)."""
    mask = np.asarray(mask, dtype=bool)
    band = set()
    shape = mask.shape
    for p in zip(*np.nonzero(mask)):
        hit = False
        for dx in range(-d, d + 1):
            for dy in range(-d, d + 1):
                for dz in range(-d, d + 1):
                    if abs(dx) + abs(dy) + abs(dz) > d:
                        continue
                    q = (p[0] + dx, p[1] + dy, p[2] + dz)
                    if not all(0 <= q[a] < shape[a] for a in range(3)) or not mask[q]:
                        hit = True
        if hit:
            band.add(p)
    return band


def brute_biou(a, b, d=1):
    ba, bb = brute_band(a, d), brute_band(b, d)
    union = ba | bb
    return 1.0 if not union else len(ba & bb) / len(union)


def brute_edt(mask, spacing):
    """Distance from each foreground voxel to the nearest background voxel centre.

    The grid is treated as surrounded by background.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    bg = np.argwhere(~padded) - 1
    fg = np.argwhere(mask)
    out = np.zeros(mask.shape)
    sp = np.asarray(spacing, float)
    for p in fg:
        out[tuple(p)] = np.sqrt((((bg - p) * sp) ** 2).sum(axis=1)).min()
    return out
