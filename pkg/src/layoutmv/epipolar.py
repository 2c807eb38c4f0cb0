"""Layout-aware epipolar masks on feature grids and a reference masked multi-view attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import binary_dilation

from .formats import read_mask_file, write_mask_file
from .scene import CameraPose, SceneLayout, background_hits, box_slabs

EPS = 1e-6
Z_NEAR = 1e-3
D_MAX = 100.0
DEFAULT_DILATION = 1
# sub-ray offsets inside a feature cell, in cell units (corners, edge midpoints and center)
SUPERSAMPLE = (0.0, 0.5, 1.0)
CENTER_ONLY = (0.5,)
_CHUNK = 4096


@dataclass(frozen=True)
class EpipolarSegment:
    view_index: int
    d_near: float
    d_far: float
    pixels: list  # (row, col) feature cells along the projected segment

    def __post_init__(self):
        if not 0 < self.d_near <= self.d_far:
            raise ValueError(f"invalid depth range ({self.d_near}, {self.d_far})")


@dataclass
class LayoutEpipolarMask:
    """Boolean key sets per (target view, query cell).

    ``bits[j, q]`` is the flattened key grid of view j for query cell q; the
    query view's own slice is all False (its keys are always fully attended).
    """

    query_resolution: tuple
    query_view: int
    bits: np.ndarray  # (N, h*w, h*w) bool
    dilation: int = DEFAULT_DILATION

    @property
    def n_views(self) -> int:
        return self.bits.shape[0]

    @property
    def key_resolution(self) -> list:
        return [tuple(self.query_resolution)] * self.n_views

    def row(self, cell, view: int) -> np.ndarray:
        h, w = self.query_resolution
        q = cell[0] * w + cell[1] if isinstance(cell, tuple) else int(cell)
        return self.bits[view, q].reshape(h, w)

    def is_subset_of(self, other: "LayoutEpipolarMask") -> bool:
        return not np.any(self.bits & ~other.bits)

    def density(self) -> float:
        others = [j for j in range(self.n_views) if j != self.query_view]
        return float(self.bits[others].mean()) if others else 0.0

    def save(self, path) -> None:
        write_mask_file(path, self)

    @classmethod
    def load(cls, path, dilation: int = DEFAULT_DILATION) -> "LayoutEpipolarMask":
        res, _, qv, bits = read_mask_file(path)
        return cls(res, qv, bits, dilation)


def cell_rays(cam: CameraPose, resolution, offsets=SUPERSAMPLE) -> np.ndarray:
    """World ray directions (h*w, S, 3) through sub-cell points of a feature grid.

    Directions have camera-z 1 in the full-resolution camera, so ray
    parameters are depths.
    """
    h, w = resolution
    sc = cam.scaled(w, h)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    oy, ox = np.meshgrid(offsets, offsets, indexing="ij")
    u = cc.reshape(-1, 1) + ox.reshape(1, -1)
    v = rr.reshape(-1, 1) + oy.reshape(1, -1)
    pix = np.stack([u.ravel(), v.ravel()], axis=1)
    return sc.ray_directions(pix).reshape(h * w, len(offsets) ** 2, 3)


def _group_hull(lo: np.ndarray, hi: np.ndarray, group: int):
    """Widen each interval to the hull over consecutive groups of `group` rays."""
    if group <= 1:
        return lo, hi
    glo = np.fmin.reduce(lo.reshape(-1, group), axis=1)
    ghi = np.fmax.reduce(hi.reshape(-1, group), axis=1)
    return np.repeat(glo, group), np.repeat(ghi, group)


def layout_intervals(layout: SceneLayout, origin: np.ndarray, dirs: np.ndarray,
                     include_background: bool = True, d_max: float = D_MAX, group: int = 1):
    """Merged depth intervals where each ray meets layout geometry.

    Box intervals are full slab intersections truncated at the background
    hit; the background hit itself is a zero-length interval. With
    ``group > 1`` the rays come in consecutive bundles (the sub-rays of one
    query cell) and every element's interval is widened to its hull over the
    bundle, so surface points between sub-rays are not skipped where the
    depth varies quickly across the cell. Returns ``(lo, hi)`` of shape
    (R, K), NaN in unused slots, sorted by ``lo``.
    """
    R = len(dirs)
    origins = np.broadcast_to(np.asarray(origin, float), (R, 3))
    t_bg, _, _ = background_hits(layout.shell, origins, dirs)
    limit = np.minimum(t_bg, d_max)
    los, his = [], []
    for box in layout.boxes:
        t_in, t_out, *_ = box_slabs(box, origins, dirs)
        lo = np.maximum(t_in, EPS)
        hi = np.minimum(t_out, limit)
        ok = lo <= hi
        lo, hi = _group_hull(np.where(ok, lo, np.nan), np.where(ok, hi, np.nan), group)
        los.append(lo)
        his.append(hi)
    if include_background:
        ok = np.isfinite(t_bg) & (t_bg <= d_max)
        lo, hi = _group_hull(np.where(ok, t_bg, np.nan), np.where(ok, t_bg, np.nan), group)
        los.append(lo)
        his.append(hi)
    if not los:
        return np.full((R, 0), np.nan), np.full((R, 0), np.nan)
    lo = np.stack(los, axis=1)
    hi = np.stack(his, axis=1)
    return _merge_intervals(lo, hi)


def _merge_intervals(lo: np.ndarray, hi: np.ndarray):
    order = np.argsort(np.where(np.isnan(lo), np.inf, lo), axis=1, kind="stable")
    lo = np.take_along_axis(lo, order, axis=1)
    hi = np.take_along_axis(hi, order, axis=1)
    valid = ~np.isnan(lo)
    run = np.maximum.accumulate(np.where(valid, hi, -np.inf), axis=1)
    prev = np.concatenate([np.full((len(lo), 1), -np.inf), run[:, :-1]], axis=1)
    start = valid & (lo > prev)
    group = np.cumsum(start, axis=1) - 1
    out_lo = np.full(lo.shape, np.nan)
    out_hi = np.full(lo.shape, -np.inf)
    r, k = np.nonzero(valid)
    out_lo[r[start[r, k]], group[r, k][start[r, k]]] = lo[r, k][start[r, k]]
    np.maximum.at(out_hi, (r, group[r, k]), hi[r, k])
    out_hi[np.isnan(out_lo)] = np.nan
    return out_lo, out_hi


def _segment_pieces(cam_j: CameraPose, origin: np.ndarray, dirs: np.ndarray, resolution,
                    d_max: float = D_MAX):
    """Exact grid traversal of each ray's projection into view j.

    Returns a dict with the clipped depth range (t0, t1), the projected
    endpoints, and per-ray pieces: (piece_lo, piece_hi) in segment
    parameter and the key cell of each piece (-1 where invalid).
    """
    h, w = resolution
    sc = cam_j.scaled(w, h)
    A = sc.rotation @ (np.asarray(origin, float) - sc.position)
    B = dirs @ sc.rotation.T
    az, bz = A[2], B[:, 2]
    t0 = np.full(len(dirs), EPS)
    t1 = np.full(len(dirs), float(d_max))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cut = (Z_NEAR - az) / bz
    t0 = np.where(bz > 0, np.maximum(t0, t_cut), t0)
    t1 = np.where(bz < 0, np.minimum(t1, t_cut), t1)
    alive = t0 <= t1
    if bz.size:
        alive &= ~((bz == 0) & (az < Z_NEAR))

    def proj(t):
        p = A + t[:, None] * B
        return np.stack([sc.fx * p[:, 0] / p[:, 2] + sc.cx, sc.fy * p[:, 1] / p[:, 2] + sc.cy], axis=1)

    t0s = np.where(alive, t0, 1.0)
    t1s = np.where(alive, t1, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        p0 = proj(t0s)
        p1 = proj(t1s)
    D = p1 - p0
    # Liang-Barsky against [0, w] x [0, h]
    mu_lo = np.zeros(len(dirs))
    mu_hi = np.ones(len(dirs))
    for p, q in ((-D[:, 0], p0[:, 0]), (D[:, 0], w - p0[:, 0]), (-D[:, 1], p0[:, 1]), (D[:, 1], h - p0[:, 1])):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = q / p
        alive &= ~((p == 0) & (q < 0))
        mu_lo = np.where(p < 0, np.maximum(mu_lo, r), mu_lo)
        mu_hi = np.where(p > 0, np.minimum(mu_hi, r), mu_hi)
    alive &= mu_lo <= mu_hi
    with np.errstate(divide="ignore", invalid="ignore"):
        cx = (np.arange(w + 1)[None, :] - p0[:, :1]) / D[:, :1]
        cy = (np.arange(h + 1)[None, :] - p0[:, 1:]) / D[:, 1:]
    cuts = np.concatenate([mu_lo[:, None], mu_hi[:, None], cx, cy], axis=1)
    inside = (cuts >= mu_lo[:, None]) & (cuts <= mu_hi[:, None]) & np.isfinite(cuts)
    cuts = np.sort(np.where(inside, cuts, np.nan), axis=1)
    lo_p, hi_p = cuts[:, :-1], cuts[:, 1:]
    n_valid = np.sum(~np.isnan(cuts), axis=1)
    degenerate = (mu_hi - mu_lo) <= 0
    ok = ~np.isnan(hi_p) & ((hi_p > lo_p) | degenerate[:, None])
    if ok.shape[1]:
        ok[:, 1:] &= ~degenerate[:, None]  # a zero-length segment is one piece
    ok &= alive[:, None] & (n_valid[:, None] >= 2)
    mid = 0.5 * (lo_p + hi_p)
    mx = p0[:, :1] + mid * D[:, :1]
    my = p0[:, 1:] + mid * D[:, 1:]
    col = np.floor(mx)
    row = np.floor(my)
    ok &= (col >= 0) & (col < w) & (row >= 0) & (row < h)
    cell = np.where(ok, np.nan_to_num(row) * w + np.nan_to_num(col), -1).astype(np.int64)
    return {"t0": t0, "t1": t1, "alive": alive, "p0": p0, "D": D,
            "lo": lo_p, "hi": hi_p, "cell": cell}


def _select(seg, lo: np.ndarray, hi: np.ndarray, origin, dirs, cam_j, resolution) -> np.ndarray:
    """Pieces of each ray's segment overlapping the projected depth interval [lo, hi]."""
    a = np.maximum(lo, seg["t0"])
    b = np.minimum(hi, seg["t1"])
    use = seg["alive"] & ~np.isnan(lo) & (a <= b)
    sel = np.zeros(seg["cell"].shape, bool)
    if not np.any(use):
        return sel
    idx = np.nonzero(use)[0]
    mus = []
    for t in (a[idx], b[idx]):
        q = _project_rows(cam_j, origin, dirs[idx], t, resolution)
        d = seg["D"][idx]
        n2 = np.sum(d * d, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            mu = np.sum((q - seg["p0"][idx]) * d, axis=1) / n2
        # [a, b] lies inside [t0, t1], so mu is in [0, 1] up to rounding
        mus.append(np.clip(np.where(n2 > 0, mu, 0.0), 0.0, 1.0))
    m0 = np.minimum(mus[0], mus[1])
    m1 = np.maximum(mus[0], mus[1])
    sel[idx] = (seg["lo"][idx] <= m1[:, None]) & (seg["hi"][idx] >= m0[:, None])
    return sel & (seg["cell"] >= 0)


def _project_rows(cam_j: CameraPose, origin, dirs, t, resolution):
    h, w = resolution
    sc = cam_j.scaled(w, h)
    p = (np.asarray(origin, float) + t[:, None] * dirs - sc.position) @ sc.rotation.T
    return np.stack([sc.fx * p[:, 0] / p[:, 2] + sc.cx, sc.fy * p[:, 1] / p[:, 2] + sc.cy], axis=1)


def dilate_rows(bits: np.ndarray, resolution, dilation: int) -> np.ndarray:
    """Chebyshev dilation of every flattened key row by `dilation` cells."""
    if dilation <= 0:
        return bits
    h, w = resolution
    shape = bits.shape
    grid = bits.reshape(-1, h, w)
    k = 2 * dilation + 1
    out = binary_dilation(grid, structure=np.ones((1, k, k), bool))
    return out.reshape(shape)


def _compute_mask(layout: Optional[SceneLayout], cams: Sequence[CameraPose], query_view: int,
                  resolution, dilation: int, include_background: bool, offsets, d_max: float) -> LayoutEpipolarMask:
    if len(cams) < 2:
        raise ValueError("epipolar masks need at least two views")
    if not 0 <= query_view < len(cams):
        raise ValueError(f"query_view {query_view} out of range")
    h, w = resolution
    hw = h * w
    cam_i = cams[query_view]
    origin = cam_i.position
    dirs_all = cell_rays(cam_i, resolution, offsets)
    S = dirs_all.shape[1]
    flat = dirs_all.reshape(-1, 3)
    owner = np.repeat(np.arange(hw), S)
    bits = np.zeros((len(cams), hw, hw), bool)
    chunk = max(1, _CHUNK // S) * S  # whole cells per chunk
    for s in range(0, len(flat), chunk):
        dirs = flat[s:s + chunk]
        q_of = owner[s:s + chunk]
        if layout is not None:
            ilo, ihi = layout_intervals(layout, origin, dirs, include_background, d_max, group=S)
        for j, cam_j in enumerate(cams):
            if j == query_view:
                continue
            seg = _segment_pieces(cam_j, origin, dirs, resolution, d_max)
            if layout is None:
                sel = seg["alive"][:, None] & (seg["cell"] >= 0)
            else:
                sel = np.zeros(seg["cell"].shape, bool)
                for k in range(ilo.shape[1]):
                    sel |= _select(seg, ilo[:, k], ihi[:, k], origin, dirs, cam_j, resolution)
            r, p = np.nonzero(sel)
            bits[j, q_of[r], seg["cell"][r, p]] = True
    bits = dilate_rows(bits, resolution, dilation)
    bits[query_view] = False
    return LayoutEpipolarMask(tuple(resolution), query_view, bits, dilation)


def compute_la_mask(layout: SceneLayout, cams: Sequence[CameraPose], query_view: int, resolution=(32, 32),
                    dilation: int = DEFAULT_DILATION, include_background: bool = True,
                    offsets=SUPERSAMPLE, d_max: float = D_MAX) -> LayoutEpipolarMask:
    """Key cells of every other view that lie on layout-intersecting parts of each query cell's epipolar lines."""
    return _compute_mask(layout, cams, query_view, resolution, dilation, include_background, offsets, d_max)


def compute_plain_mask(cams: Sequence[CameraPose], query_view: int, resolution=(32, 32),
                       dilation: int = DEFAULT_DILATION, offsets=SUPERSAMPLE,
                       d_max: float = D_MAX) -> LayoutEpipolarMask:
    """Unconstrained epipolar mask: every depth in (0, d_max]."""
    return _compute_mask(None, cams, query_view, resolution, dilation, False, offsets, d_max)


def epipolar_segments(layout: SceneLayout, cams: Sequence[CameraPose], query_view: int, cell,
                      resolution=(32, 32), include_background: bool = True) -> list[EpipolarSegment]:
    """Undilated segments of one query cell's center ray, one per (view, merged interval)."""
    h, w = resolution
    r, c = cell
    cam_i = cams[query_view]
    dirs = cam_i.scaled(w, h).ray_directions([[c + 0.5, r + 0.5]])
    lo, hi = layout_intervals(layout, cam_i.position, dirs, include_background)
    out = []
    for j, cam_j in enumerate(cams):
        if j == query_view:
            continue
        seg = _segment_pieces(cam_j, cam_i.position, dirs, resolution)
        for k in range(lo.shape[1]):
            if np.isnan(lo[0, k]):
                continue
            sel = _select(seg, lo[:, k], hi[:, k], cam_i.position, dirs, cam_j, resolution)[0]
            cells = seg["cell"][0, sel]
            pixels = [(int(v // w), int(v % w)) for v in dict.fromkeys(cells.tolist())]
            out.append(EpipolarSegment(j, float(lo[0, k]), float(hi[0, k]), pixels))
    return out


def _flatten(features) -> list[np.ndarray]:
    return [np.asarray(f, float).reshape(-1, np.shape(f)[-1]) for f in features]


def attention_weights(features, mask: LayoutEpipolarMask, query_view: int, qkv):
    """Softmax weights (hw, N*hw) over own-view keys and mask-selected keys of other views."""
    flat = _flatten(features)
    wq, wk, _ = (np.asarray(m, float) for m in qkv)
    c = flat[0].shape[1]
    q = flat[query_view] @ wq
    keys = np.concatenate([f @ wk for f in flat], axis=0)
    logits = q @ keys.T / np.sqrt(c)
    hw = flat[query_view].shape[0]
    allowed = np.zeros((hw, len(flat) * hw), bool)
    for j in range(len(flat)):
        blk = slice(j * hw, (j + 1) * hw)
        allowed[:, blk] = True if j == query_view else mask.bits[j]
    logits = np.where(allowed, logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def masked_attention(features, mask: LayoutEpipolarMask, query_view: int, qkv) -> np.ndarray:
    """Scaled dot-product attention of one view's cells over its own grid plus masked cells of the others."""
    flat = _flatten(features)
    _, _, wv = (np.asarray(m, float) for m in qkv)
    weights = attention_weights(features, mask, query_view, qkv)
    values = np.concatenate([f @ wv for f in flat], axis=0)
    out = weights @ values
    return out.reshape(np.shape(features[query_view]))
