"""Global colored point cloud, its consistency gate and merge rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .depth import DepthMap
from .formats import read_ply, write_ply
from .scene import CameraPose, SceneLayout

CONSISTENCY_THRESHOLD = 0.02
DEFAULT_STRIDE = 2
DEFAULT_DEDUP_RADIUS = 0.01
# kept points stand in for the dedup neighborhood around them, so their splat
# radius never drops below this fraction of the dedup radius
DEDUP_COVER = 0.75


@dataclass
class PointSet:
    """A batch of colored points, e.g. the unprojection of one view."""

    positions: np.ndarray
    colors: np.ndarray
    source_view: np.ndarray
    radius: np.ndarray  # world-space half footprint used when splatting

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros(0, np.int32), np.zeros(0))

    def subset(self, keep: np.ndarray) -> "PointSet":
        return PointSet(self.positions[keep], self.colors[keep], self.source_view[keep], self.radius[keep])


@dataclass
class GlobalPointCloud(PointSet):
    """Accumulated scene points; optional axis-aligned bounds reject stray points on merge."""

    bounds: Optional[tuple] = None
    _tree: Optional[cKDTree] = field(default=None, repr=False, compare=False)

    @classmethod
    def empty(cls, bounds=None) -> "GlobalPointCloud":
        p = PointSet.empty()
        return cls(p.positions, p.colors, p.source_view, p.radius, bounds)

    @classmethod
    def for_layout(cls, layout: SceneLayout, margin: float = 0.5) -> "GlobalPointCloud":
        lo, hi = layout.shell.bounds()
        return cls.empty((lo - margin, hi + margin))

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def to_ply(self, path) -> None:
        write_ply(path, self.positions, self.colors)

    @classmethod
    def from_ply(cls, path, radius: float = 0.0) -> "GlobalPointCloud":
        pos, col = read_ply(path)
        return cls(pos, col, np.zeros(len(pos), np.int32), np.full(len(pos), radius))


def project_pc(image: np.ndarray, depth: DepthMap, cam: CameraPose, stride: int = DEFAULT_STRIDE,
               view_index: int = 0) -> PointSet:
    """Unproject every `stride`-th valid pixel (pixel centers) into colored world points."""
    h, w = depth.shape
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    ok = depth.validity[rr, cc]
    rr, cc = rr[ok], cc[ok]
    z = depth.values[rr, cc]
    cam_pts = np.empty((len(z), 3))
    cam_pts[:, 0] = (cc + 0.5 - cam.cx) / cam.fx * z
    cam_pts[:, 1] = (rr + 0.5 - cam.cy) / cam.fy * z
    cam_pts[:, 2] = z
    world = cam.camera_to_world(cam_pts)
    colors = np.asarray(image)[rr, cc, :3].astype(np.uint8)
    radius = 0.5 * stride * z / (0.5 * (cam.fx + cam.fy))
    return PointSet(world, colors, np.full(len(z), view_index, np.int32), radius)


def consistency_check(pred_depth, rendered_depth, valid_mask, threshold: float = CONSISTENCY_THRESHOLD):
    """Mean absolute depth difference over the valid mask, and whether it is below `threshold`.

    Pixels where either depth is non-positive are excluded. An empty mask passes with score 0.
    """
    a = pred_depth.values if isinstance(pred_depth, DepthMap) else np.asarray(pred_depth, float)
    b = rendered_depth.values if isinstance(rendered_depth, DepthMap) else np.asarray(rendered_depth, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = np.asarray(valid_mask, bool) & (a > 0) & (b > 0)
    if not np.any(m):
        return 0.0, True
    score = float(np.mean(np.abs(a[m] - b[m])))
    return score, score < threshold


def merge(pc: GlobalPointCloud, new_points: PointSet, dedup_radius: float = DEFAULT_DEDUP_RADIUS) -> GlobalPointCloud:
    """Union of the cloud with new points; new points within `dedup_radius` of an existing one are dropped.

    Added points get a splat radius of at least ``DEDUP_COVER * dedup_radius``.
    """
    keep = np.all(np.isfinite(new_points.positions), axis=1)
    if pc.bounds is not None:
        lo, hi = pc.bounds
        keep &= np.all((new_points.positions >= lo) & (new_points.positions <= hi), axis=1)
    if dedup_radius > 0 and len(pc) and np.any(keep):
        idx = np.nonzero(keep)[0]
        dist, _ = pc.tree().query(new_points.positions[idx], k=1, distance_upper_bound=dedup_radius)
        keep[idx[dist < dedup_radius]] = False
    add = new_points.subset(keep)
    add.radius = np.maximum(add.radius, DEDUP_COVER * dedup_radius)
    return GlobalPointCloud(
        np.concatenate([pc.positions, add.positions]),
        np.concatenate([pc.colors, add.colors]),
        np.concatenate([pc.source_view, add.source_view]),
        np.concatenate([pc.radius, add.radius]),
        pc.bounds,
    )
