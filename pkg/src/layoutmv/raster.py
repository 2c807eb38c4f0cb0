"""Per-view layout conditions: multi-layer semantics/depth and spatial embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import BOX, BACKGROUND_CLASSES, CameraPose, RayHits, SceneLayout, cast_rays

DEFAULT_LAYERS = 3


@dataclass
class ConditionStack:
    """Image-space layout condition for one view.

    ``sem``/``depth`` are (H, W, m); ``local`` holds (u, v, face index) and
    ``global_`` world coordinates of the frontmost box face. 0 means empty.
    """

    sem: np.ndarray
    depth: np.ndarray
    local: np.ndarray
    global_: np.ndarray

    @property
    def layers(self) -> int:
        return self.sem.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.sem.shape[:2]

    def last_nonzero_depth(self) -> np.ndarray:
        """Per-pixel depth of the deepest filled layer (the background hit when present)."""
        filled = self.depth > 0
        idx = self.layers - 1 - np.argmax(filled[..., ::-1], axis=2)
        out = np.take_along_axis(self.depth, idx[..., None], axis=2)[..., 0]
        return np.where(filled.any(axis=2), out, 0.0)

    def invariant_violations(self) -> dict:
        """Count violations of the stack invariants (all zero for a valid render)."""
        d, s = self.depth, self.sem
        both = (d[..., 1:] > 0) & (d[..., :-1] > 0)
        mono = np.count_nonzero(both & (d[..., 1:] < d[..., :-1]))
        conull = np.count_nonzero((s != 0) != (d != 0))
        is_bg = np.isin(s, BACKGROUND_CLASSES)
        seen_bg = np.cumsum(is_bg, axis=2) - is_bg  # background seen in an earlier layer
        trunc = np.count_nonzero((seen_bg > 0) & (d != 0))
        face = self.local[..., 2]
        front_box = s[..., 0] >= 4
        local_ok = np.count_nonzero((face != 0) != front_box)
        return {"monotonic": int(mono), "co_nullity": int(conull),
                "truncation": int(trunc), "local_face": int(local_ok)}


def _camera_hits(layout: SceneLayout, camera: CameraPose, chunk: int = 1 << 16):
    pix = camera.pixel_grid()
    parts = []
    for start in range(0, len(pix), chunk):
        dirs = camera.ray_directions(pix[start:start + chunk])
        parts.append(cast_rays(layout, camera.position, dirs))
    return parts


def _sem_depth_from_hits(hits: RayHits, m: int):
    k = hits.depth.shape[1]
    depth = np.zeros((hits.n_rays, m))
    sem = np.zeros((hits.n_rays, m), np.uint16)
    take = min(m, k)
    d = hits.depth[:, :take]
    filled = np.isfinite(d)
    depth[:, :take] = np.where(filled, d, 0.0)
    sem[:, :take] = np.where(filled, hits.class_id[:, :take], 0)
    return sem, depth


def _spatial_from_hits(hits: RayHits):
    front_box = hits.kind[:, 0] == BOX
    local = np.zeros((hits.n_rays, 3))
    glob = np.zeros((hits.n_rays, 3))
    local[front_box, :2] = hits.uv[front_box, 0]
    local[front_box, 2] = hits.face[front_box, 0]
    glob[front_box] = hits.point[front_box, 0]
    return local, glob


def render_sem_depth(layout: SceneLayout, camera: CameraPose, m: int = DEFAULT_LAYERS):
    """Multi-layer semantic and depth maps: the first ``m`` layout hits per pixel."""
    if m < 1:
        raise ValueError("m must be >= 1")
    h, w = camera.height, camera.width
    sems, depths = zip(*(_sem_depth_from_hits(hh, m) for hh in _camera_hits(layout, camera)))
    return np.concatenate(sems).reshape(h, w, m), np.concatenate(depths).reshape(h, w, m)


def render_spatial(layout: SceneLayout, camera: CameraPose):
    """Local (u, v, face) and global (world xyz) embeddings of the frontmost box face."""
    h, w = camera.height, camera.width
    locs, globs = zip(*(_spatial_from_hits(hh) for hh in _camera_hits(layout, camera)))
    return np.concatenate(locs).reshape(h, w, 3), np.concatenate(globs).reshape(h, w, 3)


def render_conditions(layout: SceneLayout, camera: CameraPose, m: int = DEFAULT_LAYERS) -> ConditionStack:
    """All four condition planes from a single ray-casting pass, stored as float32/uint16."""
    if m < 1:
        raise ValueError("m must be >= 1")
    h, w = camera.height, camera.width
    sems, depths, locs, globs = [], [], [], []
    for hits in _camera_hits(layout, camera):
        s, d = _sem_depth_from_hits(hits, m)
        lo, gl = _spatial_from_hits(hits)
        sems.append(s)
        depths.append(d)
        locs.append(lo)
        globs.append(gl)
    return ConditionStack(
        sem=np.concatenate(sems).reshape(h, w, m).astype(np.uint16),
        depth=np.concatenate(depths).reshape(h, w, m).astype(np.float32),
        local=np.concatenate(locs).reshape(h, w, 3).astype(np.float32),
        global_=np.concatenate(globs).reshape(h, w, 3).astype(np.float32),
    )
