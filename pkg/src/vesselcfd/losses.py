"""Detection and segmentation loss kernels with analytic gradients.

Everything works on plain float64 arrays (``VoxelVolume`` inputs are
unwrapped).  Each loss returns ``(value, gradient)`` with the gradient taken
with respect to the prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage as ndi

from vesselcfd.errors import DegenerateTargetError
from vesselcfd.topology import STRUCT_26
from vesselcfd.volume import VoxelVolume

N_COUNT_CLASSES = 6
POSITIVE_LEVEL = 0.9
CLAMP_EPS = 1e-7


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, VoxelVolume) else x, dtype=float)


def clamp_probabilities(p, eps: float = CLAMP_EPS) -> np.ndarray:
    return np.clip(_arr(p), eps, 1.0 - eps)


# ------------------------------------------------------------------- heatmap

@dataclass(frozen=True)
class HeatmapTarget:
    t: np.ndarray
    centers: list[tuple[float, float, float]]
    sigma: float

    @property
    def positives(self) -> np.ndarray:
        return self.t >= POSITIVE_LEVEL


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


def gaussian_heatmap(centers, sigma: float = 3.0, dims=None) -> HeatmapTarget:
    """Pointwise max of unit-peak Gaussians at voxel-coordinate centres."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    dims = tuple(int(d) for d in dims)
    centers = [tuple(float(v) for v in c) for c in centers]
    grid = np.indices(dims, dtype=float)
    t = np.zeros(dims)
    for c in centers:
        if any(not 0 <= c[a] <= dims[a] - 1 for a in range(3)):
            raise ValueError(f"centre {c} lies outside the volume {dims}")
        r2 = sum((grid[a] - c[a]) ** 2 for a in range(3))
        np.maximum(t, np.exp(-r2 / (2.0 * sigma * sigma)), out=t)
    return HeatmapTarget(t, centers, float(sigma))


def heatmap_focal_loss(p, target: HeatmapTarget, cfg: FocalConfig | None = None):
    """Centre-point focal loss normalised by the number of positive voxels."""
    cfg = cfg or FocalConfig()
    p = _arr(p)
    t = _arr(target.t if isinstance(target, HeatmapTarget) else target)
    if p.shape != t.shape:
        raise ValueError("prediction and target shapes differ")
    if not ((p > 0) & (p < 1)).all():
        raise ValueError("predictions must lie strictly inside (0, 1); clamp first")
    pos = t >= POSITIVE_LEVEL
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DegenerateTargetError("heatmap target has no positive voxels")
    a, b = cfg.alpha, cfg.beta
    lp, l1p = np.log(p), np.log1p(-p)
    w_neg = (1.0 - t) ** b
    term = np.where(pos, (1.0 - p) ** a * lp, w_neg * p ** a * l1p)
    d_pos = -a * (1.0 - p) ** (a - 1.0) * lp + (1.0 - p) ** a / p
    d_neg = w_neg * (a * p ** (a - 1.0) * l1p - p ** a / (1.0 - p))
    loss = -float(term.sum()) / n_pos
    grad = -np.where(pos, d_pos, d_neg) / n_pos
    return loss, grad


def count_ce_loss(logits, true_count: int):
    """Softmax cross-entropy over aneurysm counts 0..5."""
    z = np.asarray(logits, dtype=float).ravel()
    if z.size != N_COUNT_CLASSES:
        raise ValueError(f"expected {N_COUNT_CLASSES} logits, got {z.size}")
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    if int(true_count) != true_count or not 0 <= true_count < N_COUNT_CLASSES:
        raise ValueError(f"count {true_count} outside 0..{N_COUNT_CLASSES - 1}")
    m = z.max()
    lse = m + math.log(float(np.exp(z - m).sum()))
    soft = np.exp(z - lse)
    grad = soft.copy()
    grad[int(true_count)] -= 1.0
    return float(lse - z[int(true_count)]), grad


# ------------------------------------------------------------ soft skeleton

# Window cells of the 6-neighbourhood cross inside the flattened 3x3x3 window.
_CROSS = np.array([4, 10, 12, 13, 14, 16, 22])


def _pool(x: np.ndarray, kind: str):
    """Soft erosion (min over the 6-neighbour cross) or dilation (max over 3x3x3).

    Out-of-grid cells are ignored.  Returns values and the flat source index
    of the selected cell, which routes gradients in the backward pass.
    """
    flat = sliding_window_view(np.pad(x, 1, mode="edge"), (3, 3, 3)).reshape(x.shape + (27,))
    if kind == "min":
        k = _CROSS[flat[..., _CROSS].argmin(axis=-1)]
    else:
        k = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]
    idx = np.indices(x.shape)
    src = [np.clip(idx[0] + k // 9 - 1, 0, x.shape[0] - 1),
           np.clip(idx[1] + (k // 3) % 3 - 1, 0, x.shape[1] - 1),
           np.clip(idx[2] + k % 3 - 1, 0, x.shape[2] - 1)]
    return y, np.ravel_multi_index(src, x.shape)


def _unpool(g: np.ndarray, src: np.ndarray) -> np.ndarray:
    return np.bincount(src.ravel(), weights=g.ravel(), minlength=g.size).reshape(g.shape)


class _SoftSkeleton:
    """Forward pass of the iterative soft skeleton, kept for the backward pass."""

    def __init__(self, p: np.ndarray, k: int):
        if k < 1:
            raise ValueError("soft skeleton needs at least one iteration")
        self.levels = []  # (z, erode_src, dilate_src) per level
        self.chain = []  # erosion sources linking level L-1 to L
        self.prev_skel, self.masks, self.deltas = [], [], []
        x = p
        skel = None
        for level in range(k + 1):
            if level:
                x, src = _pool(x, "min")
                self.chain.append(src)
            e, es = _pool(x, "min")
            o, ds = _pool(e, "max")
            z = x - o
            d = np.maximum(z, 0.0)
            self.levels.append((z, es, ds))
            if skel is None:
                skel = d
            else:
                u = d - skel * d
                self.prev_skel.append(skel)
                self.masks.append(u > 0)
                self.deltas.append(d)
                skel = skel + np.maximum(u, 0.0)
        self.skel = skel

    def backward(self, g: np.ndarray) -> np.ndarray:
        gd = [None] * len(self.levels)
        for j in range(len(self.masks) - 1, -1, -1):
            m, d, s = self.masks[j], self.deltas[j], self.prev_skel[j]
            gd[j + 1] = g * m * (1.0 - s)
            g = g * (1.0 - m * d)
        gd[0] = g
        gx = np.zeros_like(g)
        for level in range(len(self.levels) - 1, -1, -1):
            z, es, ds = self.levels[level]
            gz = gd[level] * (z > 0)
            gl = gz - _unpool(_unpool(gz, ds), es)
            gx = gx + gl
            if level:
                gx = _unpool(gx, self.chain[level - 1])
        return gx

    def signature(self) -> bytes:
        """Fingerprint of every min/max choice and relu sign in the forward pass."""
        parts = [src.tobytes() for src in self.chain]
        for z, es, ds in self.levels:
            parts += [es.tobytes(), ds.tobytes(), (z > 0).tobytes()]
        parts += [m.tobytes() for m in self.masks]
        return b"".join(parts)


def soft_skeleton(p, k: int = 10) -> np.ndarray:
    """Soft morphological skeleton: k rounds of soft erosion and opening residues."""
    return _SoftSkeleton(_arr(p), int(k)).skel


# ---------------------------------------------------------- stage-2 losses

@dataclass(frozen=True)
class ClDiceConfig:
    lam: float = 0.5
    iterations: int = 10
    eps: float = 1e-6

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("soft-skeleton iterations must be >= 1")
        if self.lam < 0 or self.eps <= 0:
            raise ValueError("lambda must be >= 0 and eps > 0")


def _check_seg(p, g):
    p, g = _arr(p), _arr(g)
    if p.shape != g.shape:
        raise ValueError("prediction and label shapes differ")
    if not ((p > 0) & (p < 1)).all():
        raise ValueError("predictions must lie strictly inside (0, 1); clamp first")
    if not np.isin(g, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    return p, g


def dice_ce_loss(p, g, eps: float = 1e-6):
    """Soft-Dice term -2|pg|/(|p|+|g|+eps) plus mean voxel cross-entropy."""
    p, g = _check_seg(p, g)
    den = p.sum() + g.sum() + eps
    inter = (p * g).sum()
    dice_term = -2.0 * inter / den
    d_dice = -2.0 * g / den + 2.0 * inter / den ** 2
    n = p.size
    ce = -(g * np.log(p) + (1.0 - g) * np.log1p(-p)).sum() / n
    d_ce = -(g / p - (1.0 - g) / (1.0 - p)) / n
    return float(dice_term + ce), d_dice + d_ce


def soft_cldice(p, g, cfg: ClDiceConfig | None = None):
    """Soft clDice value (not the loss term) and its gradient with respect to ``p``."""
    cfg = cfg or ClDiceConfig()
    p, g = _arr(p), _arr(g)
    eps = cfg.eps
    sk_p = _SoftSkeleton(p, cfg.iterations)
    s_g = soft_skeleton(g, cfg.iterations)
    sp_, sg_ = sk_p.skel, s_g
    prec_den = sp_.sum() + eps
    prec = (sp_ * g).sum() / prec_den
    sens_den = sg_.sum() + eps
    sens = (sg_ * p).sum() / sens_den
    den = prec + sens + eps
    cl = 2.0 * prec * sens / den
    d_prec = 2.0 * sens * (sens + eps) / den ** 2
    d_sens = 2.0 * prec * (prec + eps) / den ** 2
    g_skel = d_prec * (g / prec_den - (sp_ * g).sum() / prec_den ** 2)
    grad = sk_p.backward(g_skel) + d_sens * sg_ / sens_den
    return float(cl), grad


def stage2_signature(p, cfg: ClDiceConfig | None = None) -> bytes:
    """Piecewise-linear branch pattern of the soft skeleton of ``p``."""
    cfg = cfg or ClDiceConfig()
    return _SoftSkeleton(_arr(p), cfg.iterations).signature()


def stage2_loss(p, g, cfg: ClDiceConfig | None = None):
    """Dice + cross-entropy + lambda * (-soft clDice)."""
    cfg = cfg or ClDiceConfig()
    loss, grad = dice_ce_loss(p, g, cfg.eps)
    if cfg.lam == 0:
        return loss, grad
    cl, d_cl = soft_cldice(p, g, cfg)
    return loss - cfg.lam * cl, grad - cfg.lam * d_cl


# ------------------------------------------------------- candidate selection

@dataclass(frozen=True)
class CandidateThresholds:
    density: float | None = None  # default: half of the density maximum
    heatmap: float = 0.3
    nms_radius: float = 5.0


def select_candidates(heatmap, density, thresholds: CandidateThresholds | None = None):
    """Heatmap peaks, capped at the number of density-map components."""
    th = thresholds or CandidateThresholds()
    h, d = _arr(heatmap), _arr(density)
    if h.shape != d.shape:
        raise ValueError("heatmap and density shapes differ")
    dmax = float(d.max()) if d.size else 0.0
    if dmax <= 0:
        return []
    level = 0.5 * dmax if th.density is None else th.density
    _, k = ndi.label(d >= level, structure=STRUCT_26)
    if k == 0:
        return []
    peaks = (h == ndi.maximum_filter(h, size=3, mode="nearest")) & (h > th.heatmap)
    idx = np.argwhere(peaks)
    # Strongest first; ties by x-fastest linear index for a stable order.
    lin = np.ravel_multi_index(tuple(idx.T), h.shape, order="F")
    order = np.lexsort((lin, -h[tuple(idx.T)]))
    chosen = []
    for i in order:
        c = idx[i]
        if all(np.linalg.norm(c - q) > th.nms_radius for q in chosen):
            chosen.append(c)
            if len(chosen) == k:
                break
    return [tuple(int(v) for v in c) for c in chosen]


# ------------------------------------------------------------ gradient check

@dataclass
class GradientReport:
    checked: int
    skipped: int
    max_rel_error: float
    errors: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"checked": self.checked, "skipped": self.skipped, "max_rel_error": self.max_rel_error}


def gradient_check(fn, x: np.ndarray, n_points: int = 100, h: float = 1e-4, seed: int = 0,
                   floor: float = 1e-6, signature=None) -> GradientReport:
    """Compare ``fn(x) -> (value, grad)`` with central differences at random coordinates.

    ``signature(x)``, when given, fingerprints the branch pattern of a
    piecewise-smooth function; coordinates whose perturbation changes it sit
    on a kink and are redrawn.
    """
    x = np.array(x, dtype=float)
    _, grad = fn(x)
    base_sig = signature(x) if signature is not None else None
    rng = np.random.default_rng(seed)
    errors, skipped = [], 0
    attempts = 0
    while len(errors) < n_points and attempts < 20 * n_points:
        attempts += 1
        i = int(rng.integers(x.size))
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        if signature is not None and (signature(xp) != base_sig or signature(xm) != base_sig):
            skipped += 1
            continue
        central = (fn(xp)[0] - fn(xm)[0]) / (2 * h)
        a = float(grad.flat[i])
        errors.append(abs(a - central) / max(abs(a), abs(central), floor))
    return GradientReport(len(errors), skipped, max(errors) if errors else math.nan, errors)
