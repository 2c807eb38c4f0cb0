"""Ground-truth renderer for synthetic layouts and an oracle monocular depth estimator.

The synthetic scene *is* the layout: every box is a flat-colored solid and the
shell has fixed floor/wall/ceiling colors. Faces are shaded with a constant
Lambert-style term so adjacent faces stay distinguishable.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .depth import DepthMap
from .scene import BOX, CEILING, FLOOR, WALL, CameraPose, SceneLayout, cast_rays

_LIGHT = np.array([0.35, 0.8, 0.5]) / np.linalg.norm([0.35, 0.8, 0.5])
_SHELL_COLORS = {FLOOR: (150, 118, 88), WALL: (196, 190, 178), CEILING: (232, 232, 226)}
# local-frame outward normals for faces 1..6
_FACE_NORMALS = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)


def box_color(index: int, class_id: int) -> np.ndarray:
    rng = np.random.default_rng(1000 * class_id + index)
    return rng.integers(50, 230, size=3).astype(float)


def _shade(normal: np.ndarray) -> np.ndarray:
    return 0.45 + 0.55 * np.abs(normal @ _LIGHT)


def image_key(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image)
    return hashlib.sha1(arr.tobytes() + str(arr.shape).encode()).hexdigest()


class SceneRenderer:
    """Renders color and depth of a layout treated as the true scene.

    Every rendered image is remembered together with its depth so the oracle
    depth estimator can answer for images it has seen.
    """

    def __init__(self, layout: SceneLayout):
        self.layout = layout
        self._colors = [box_color(i, b.class_id) for i, b in enumerate(layout.boxes)]
        self.registry: dict[str, np.ndarray] = {}

    def render(self, camera: CameraPose, register: bool = True):
        """Return ``(image uint8 (H, W, 3), DepthMap)`` of the frontmost surface."""
        pix = camera.pixel_grid()
        n = len(pix)
        color = np.zeros((n, 3))
        depth = np.zeros(n)
        chunk = 1 << 16
        for s in range(0, n, chunk):
            hits = cast_rays(self.layout, camera.position, camera.ray_directions(pix[s:s + chunk]))
            sl = slice(s, s + len(hits.depth))
            kind = hits.kind[:, 0]
            d = hits.depth[:, 0]
            ok = np.isfinite(d)
            depth[sl][ok] = d[ok]
            col = np.zeros((len(d), 3))
            for code in (FLOOR, CEILING):
                sel = kind == code
                normal = np.array([0.0, 1.0 if code == FLOOR else -1.0, 0.0])
                col[sel] = np.asarray(_SHELL_COLORS[code]) * _shade(normal)
            walls = kind == WALL
            for e in np.unique(hits.wall_edge[walls, 0]):
                sel = walls & (hits.wall_edge[:, 0] == e)
                col[sel] = np.asarray(_SHELL_COLORS[WALL]) * _shade(self.layout.shell.wall_normal(int(e)))
            boxes = kind == BOX
            for bi in np.unique(hits.box_index[boxes, 0]):
                rot = self.layout.boxes[bi].rotation
                for f in range(1, 7):
                    sel = boxes & (hits.box_index[:, 0] == bi) & (hits.face[:, 0] == f)
                    if np.any(sel):
                        col[sel] = self._colors[bi] * _shade(rot @ _FACE_NORMALS[f])
            color[sl] = col
        image = np.clip(np.round(color), 0, 255).astype(np.uint8).reshape(camera.height, camera.width, 3)
        dmap = DepthMap(depth.reshape(camera.height, camera.width))
        if register:
            self.registry[image_key(image)] = dmap.values
        return image, dmap

    def depth_for(self, image: np.ndarray, camera: CameraPose) -> np.ndarray:
        """True depth of the content an image depicts (falls back to rendering `camera`)."""
        hit = self.registry.get(image_key(image))
        if hit is not None:
            return hit
        return self.render(camera, register=False)[1].values


class OracleDepthEstimator:
    """Relative depth = true depth under a random inverse-depth affine map plus noise.

    Produces ``1 / D_rel = (1 / D_true - offset) / scale + noise`` with a fresh
    (scale, offset) per call drawn from a seeded generator.
    """

    def __init__(self, renderer: SceneRenderer, seed: int = 0, scale_range=(0.5, 2.0),
                 offset_range=(-0.05, 0.05), noise: float = 1e-4):
        self.renderer = renderer
        self.rng = np.random.default_rng(seed)
        self.scale_range = scale_range
        self.offset_range = offset_range
        self.noise = noise

    def estimate(self, image: np.ndarray, camera: CameraPose) -> DepthMap:
        true = self.renderer.depth_for(image, camera)
        valid = true > 0
        s = self.rng.uniform(*self.scale_range)
        off = self.rng.uniform(*self.offset_range)
        eps = self.rng.normal(0.0, self.noise, size=true.shape) if self.noise > 0 else 0.0
        with np.errstate(divide="ignore"):
            inv = (1.0 / np.where(valid, true, 1.0) - off) / s + eps
        valid &= inv > 0
        rel = np.where(valid, 1.0 / np.where(valid, inv, 1.0), 0.0)
        return DepthMap(rel, valid)
