"""Geometric scene model: layout boxes, room shell, pinhole cameras and ray casting.

World frame is right-handed with +y up and the floor at y = 0. Box yaw is a
rotation about +y. Cameras store a world->camera rotation with the camera
looking down +z, +x to the right and +y down.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

FLOOR, WALL, CEILING, BOX = 1, 2, 3, 4
SURFACE_NAMES = {FLOOR: "floor", WALL: "wall", CEILING: "ceiling", BOX: "box_face"}
BACKGROUND_CLASSES = (FLOOR, WALL, CEILING)
FIRST_OBJECT_CLASS = 4

# entry face index per (axis, sign of the face normal): 1:+x 2:-x 3:+y 4:-y 5:+z 6:-z
_FACE_INDEX = np.array([[2, 1], [4, 3], [6, 5]])
# in-face (u, v) axes for faces normal to x, y, z
_FACE_UV_AXES = np.array([[1, 2], [2, 0], [0, 1]])

_EPS = 1e-9


class SceneError(ValueError):
    """Raised when a scene or camera violates its invariants."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


def yaw_matrix(yaw: float) -> np.ndarray:
    """Rotation about +y taking box-local coordinates to world coordinates."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class OrientedBox:
    class_id: int
    size: np.ndarray
    location: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        size = np.asarray(self.size, dtype=float).reshape(3)
        loc = np.asarray(self.location, dtype=float).reshape(3)
        if not np.all(size > 0):
            raise SceneError(f"box size must be positive, got {size}")
        if int(self.class_id) < 1:
            raise SceneError(f"class_id must be >= 1, got {self.class_id}")
        if not np.all(np.isfinite(loc)):
            raise SceneError("box location must be finite")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def rotation(self) -> np.ndarray:
        return yaw_matrix(self.yaw)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * self.size

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return (signs * self.half) @ self.rotation.T + self.location

    def footprint(self) -> np.ndarray:
        """Footprint rectangle in the (x, z) plane, counter-clockwise."""
        hx, hz = self.half[0], self.half[2]
        local = np.array([[-hx, 0, -hz], [hx, 0, -hz], [hx, 0, hz], [-hx, 0, hz]])
        world = local @ self.rotation.T + self.location
        poly = world[:, [0, 2]]
        if _signed_area(poly) < 0:
            poly = poly[::-1]
        return poly

    def footprint_distance(self, xz: np.ndarray) -> np.ndarray:
        """Euclidean distance in the floor plane from points to the footprint (0 inside)."""
        xz = np.atleast_2d(np.asarray(xz, dtype=float))
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = xz[:, 0] - self.location[0]
        dz = xz[:, 1] - self.location[2]
        # inverse yaw rotation restricted to the xz plane
        lx = c * dx - s * dz
        lz = s * dx + c * dz
        ex = np.maximum(np.abs(lx) - self.half[0], 0.0)
        ez = np.maximum(np.abs(lz) - self.half[2], 0.0)
        return np.hypot(ex, ez)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        local = (np.atleast_2d(points) - self.location) @ self.rotation
        return np.all(np.abs(local) <= self.half + tol, axis=-1)

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "size": [float(v) for v in self.size],
            "location": [float(v) for v in self.location],
            "yaw": float(self.yaw),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBox":
        return cls(int(d["class_id"]), d["size"], d["location"], float(d.get("yaw", 0.0)))


def _signed_area(poly: np.ndarray) -> float:
    x, z = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(z, -1) - np.roll(x, -1) * z))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 < 0 and d3 * d4 < 0:
        return True

    def on_seg(a, b, c):
        return (
            abs(orient(a, b, c)) <= 1e-12
            and min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
            and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12
        )

    return on_seg(q1, q2, p1) or on_seg(q1, q2, p2) or on_seg(p1, p2, q1) or on_seg(p1, p2, q2)


def polygon_is_simple(poly: np.ndarray) -> bool:
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if np.allclose(a, b):
            return False
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_cross(a, b, poly[j], poly[(j + 1) % n]):
                return False
    return True


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd containment test of (P, 2) points against an (E, 2) polygon."""
    points = np.atleast_2d(points)
    px, pz = points[:, 0:1], points[:, 1:2]
    xi, zi = poly[:, 0], poly[:, 1]
    xj, zj = np.roll(xi, -1), np.roll(zi, -1)
    straddle = (zi > pz) != (zj > pz)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = (xj - xi) * (pz - zi) / (zj - zi) + xi
    crossings = np.count_nonzero(straddle & (px < x_cross), axis=1)
    return (crossings % 2) == 1


def distance_to_polygon_boundary(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(points)
    a = poly[None, :, :]
    b = np.roll(poly, -1, axis=0)[None, :, :]
    p = points[:, None, :]
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, axis=-1) / np.sum(ab * ab, axis=-1), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.min(np.linalg.norm(p - closest, axis=-1), axis=1)


@dataclass(frozen=True)
class BackgroundShell:
    floor_polygon: np.ndarray
    ceiling_height: float

    def __post_init__(self):
        poly = np.asarray(self.floor_polygon, dtype=float).reshape(-1, 2)
        if len(poly) < 3:
            raise SceneError("floor polygon needs at least 3 vertices")
        if not float(self.ceiling_height) > 0:
            raise SceneError("ceiling_height must be positive")
        if not polygon_is_simple(poly):
            raise SceneError("floor polygon must be simple")
        if _signed_area(poly) < 0:
            poly = poly[::-1].copy()
        object.__setattr__(self, "floor_polygon", poly)
        object.__setattr__(self, "ceiling_height", float(self.ceiling_height))

    @property
    def n_walls(self) -> int:
        return len(self.floor_polygon)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.floor_polygon.min(axis=0)
        hi = self.floor_polygon.max(axis=0)
        return (
            np.array([lo[0], 0.0, lo[1]]),
            np.array([hi[0], self.ceiling_height, hi[1]]),
        )

    def centroid(self) -> np.ndarray:
        poly = self.floor_polygon
        x, z = poly[:, 0], poly[:, 1]
        cross = x * np.roll(z, -1) - np.roll(x, -1) * z
        area = 0.5 * cross.sum()
        cx = np.sum((x + np.roll(x, -1)) * cross) / (6 * area)
        cz = np.sum((z + np.roll(z, -1)) * cross) / (6 * area)
        return np.array([cx, cz])

    def wall_normal(self, edge: int) -> np.ndarray:
        """Inward-facing unit normal of a wall (polygon is counter-clockwise in x-z)."""
        a = self.floor_polygon[edge]
        b = self.floor_polygon[(edge + 1) % self.n_walls]
        d = b - a
        n = np.array([-d[1], 0.0, d[0]])
        return n / np.linalg.norm(n)

    def contains_xz(self, xz: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        xz = np.atleast_2d(xz)
        inside = points_in_polygon(xz, self.floor_polygon)
        return inside | (distance_to_polygon_boundary(xz, self.floor_polygon) <= tol)

    def to_dict(self) -> dict:
        return {
            "floor_polygon": [[float(x), float(z)] for x, z in self.floor_polygon],
            "ceiling_height": float(self.ceiling_height),
        }


@dataclass(frozen=True)
class SceneLayout:
    boxes: tuple
    shell: BackgroundShell
    class_names: dict = field(default_factory=dict)

    def __post_init__(self):
        boxes = tuple(self.boxes)
        object.__setattr__(self, "boxes", boxes)
        names = {int(k): str(v) for k, v in dict(self.class_names).items()}
        names.setdefault(FLOOR, "floor")
        names.setdefault(WALL, "wall")
        names.setdefault(CEILING, "ceiling")
        object.__setattr__(self, "class_names", names)
        if boxes:
            centers = np.array([b.location[[0, 2]] for b in boxes])
            ok = self.shell.contains_xz(centers, tol=1e-6)
            if not np.all(ok):
                bad = [i for i, flag in enumerate(ok) if not flag]
                raise SceneError(f"box centers outside the shell footprint: {bad}")

    @property
    def n_boxes(self) -> int:
        return len(self.boxes)

    def to_dict(self) -> dict:
        return {
            "boxes": [b.to_dict() for b in self.boxes],
            "shell": self.shell.to_dict(),
            "class_names": {str(k): v for k, v in sorted(self.class_names.items())},
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneLayout":
        try:
            boxes = [OrientedBox.from_dict(b) for b in d["boxes"]]
            shell = BackgroundShell(d["shell"]["floor_polygon"], d["shell"]["ceiling_height"])
            names = d.get("class_names", {})
        except (KeyError, TypeError) as exc:
            raise SceneError(f"malformed scene: {exc!r}") from exc
        return cls(tuple(boxes), shell, names)

    @classmethod
    def from_json(cls, path) -> "SceneLayout":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def translated(self, offset) -> "SceneLayout":
        """Copy of the layout shifted by a 3-vector whose y component must be 0."""
        offset = np.asarray(offset, float)
        if abs(offset[1]) > 0:
            raise SceneError("the floor is pinned at y=0; only x/z translation is allowed")
        boxes = tuple(OrientedBox(b.class_id, b.size, b.location + offset, b.yaw) for b in self.boxes)
        shell = BackgroundShell(self.shell.floor_polygon + offset[[0, 2]], self.shell.ceiling_height)
        return SceneLayout(boxes, shell, self.class_names)

    def rotated(self, yaw: float) -> "SceneLayout":
        """Copy of the layout rotated about the world +y axis through the origin."""
        rot = yaw_matrix(yaw)
        boxes = tuple(
            OrientedBox(b.class_id, b.size, rot @ b.location, b.yaw + yaw) for b in self.boxes
        )
        poly = np.c_[self.shell.floor_polygon[:, 0], np.zeros(self.shell.n_walls), self.shell.floor_polygon[:, 1]]
        poly = (poly @ rot.T)[:, [0, 2]]
        return SceneLayout(boxes, BackgroundShell(poly, self.shell.ceiling_height), self.class_names)


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray
    rotation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise SceneError("camera rotation is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise SceneError("camera rotation must be a proper rotation")
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise SceneError("principal point must lie inside the image")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, float) - self.position) @ self.rotation.T

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, float) @ self.rotation + self.position

    def scaled(self, width: int, height: int) -> "CameraPose":
        """Same pose with intrinsics rescaled to a (width, height) grid."""
        sx, sy = width / self.width, height / self.height
        return CameraPose(
            self.position, self.rotation, self.fx * sx, self.fy * sy,
            self.cx * sx, self.cy * sy, width, height,
        )

    def pixel_grid(self) -> np.ndarray:
        """Pixel-center coordinates (H*W, 2) in row-major order."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu.ravel(), vv.ravel()], axis=1)

    def ray_directions(self, pixels: np.ndarray) -> np.ndarray:
        """World-frame ray directions whose camera-z component is 1, so ray parameter = depth."""
        pixels = np.atleast_2d(np.asarray(pixels, float))
        cam = np.empty((len(pixels), 3))
        cam[:, 0] = (pixels[:, 0] - self.cx) / self.fx
        cam[:, 1] = (pixels[:, 1] - self.cy) / self.fy
        cam[:, 2] = 1.0
        return cam @ self.rotation

    def to_dict(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "rotation": [[float(v) for v in row] for row in self.rotation],
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        try:
            return cls(
                d["position"], d["rotation"], d["fx"], d["fy"], d["cx"], d["cy"],
                int(d["width"]), int(d["height"]),
            )
        except (KeyError, TypeError) as exc:
            raise SceneError(f"malformed camera: {exc!r}") from exc


def default_intrinsics(width: int = 512, height: int = 512, fov_deg: float = 90.0) -> dict:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return {"fx": f, "fy": f, "cx": width / 2, "cy": height / 2, "width": width, "height": height}


def look_at(position, target, up=(0.0, 1.0, 0.0), **intrinsics) -> CameraPose:
    """Camera at `position` whose optical axis points at `target`."""
    position = np.asarray(position, float)
    fwd = np.asarray(target, float) - position
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise SceneError("look_at target coincides with the camera position")
    fwd = fwd / norm
    right = np.cross(fwd, np.asarray(up, float))
    if np.linalg.norm(right) < 1e-9:
        raise SceneError("look_at direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    # re-orthonormalize against accumulated rounding
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    if not intrinsics:
        intrinsics = default_intrinsics()
    return CameraPose(position, rot, **intrinsics)


def project(camera: CameraPose, world_points):
    """Project world points to pixels.

    Returns ``(pixels, depth, in_front)``; pixels for points with depth <= 0 are
    still computed where finite but flagged by ``in_front == False``.
    """
    pts = np.asarray(world_points, float)
    single = pts.ndim == 1
    cam = camera.world_to_camera(np.atleast_2d(pts))
    z = cam[:, 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * cam[:, 0] / z + camera.cx
        v = camera.fy * cam[:, 1] / z + camera.cy
    pix = np.stack([u, v], axis=1)
    if single:
        return pix[0], float(z[0]), bool(in_front[0])
    return pix, z, in_front


def unproject(camera: CameraPose, pixels, depth):
    """Inverse of `project` for camera-frame depth (z, not ray length)."""
    pix = np.asarray(pixels, float)
    single = pix.ndim == 1
    pix = np.atleast_2d(pix)
    d = np.broadcast_to(np.asarray(depth, float), (len(pix),))
    cam = np.empty((len(pix), 3))
    cam[:, 0] = (pix[:, 0] - camera.cx) / camera.fx * d
    cam[:, 1] = (pix[:, 1] - camera.cy) / camera.fy * d
    cam[:, 2] = d
    world = camera.camera_to_world(cam)
    return world[0] if single else world


# --------------------------------------------------------------------------- rays


def box_slabs(box: OrientedBox, origins: np.ndarray, dirs: np.ndarray):
    """Slab test against one box.

    Returns (t_in, t_out, entry_axis, entry_sign, o_local, d_local). Rays that
    miss have t_in > t_out. Boundaries are inclusive.
    """
    rot = box.rotation
    o_l = (origins - box.location) @ rot
    d_l = dirs @ rot
    half = box.half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o_l) / d_l
        t2 = (half - o_l) / d_l
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    parallel = d_l == 0
    inside_slab = np.abs(o_l) <= half
    near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
    axis = np.argmax(near, axis=1)
    rows = np.arange(len(near))
    t_in = near[rows, axis]
    t_out = far.min(axis=1)
    # entering through the face whose outward normal opposes the ray
    sign = np.where(d_l[rows, axis] > 0, 0, 1)
    return t_in, t_out, axis, sign, o_l, d_l


def background_hits(shell: BackgroundShell, origins: np.ndarray, dirs: np.ndarray):
    """Nearest floor/wall/ceiling hit per ray.

    Returns (t, kind, wall_edge); t is inf and kind 0 where the ray never meets the shell.
    """
    n = len(dirs)
    origins = np.broadcast_to(origins, dirs.shape)
    best_t = np.full(n, np.inf)
    kind = np.zeros(n, dtype=np.int8)
    edge = np.full(n, -1, dtype=np.int64)
    h = shell.ceiling_height
    oy, dy = origins[:, 1], dirs[:, 1]

    with np.errstate(divide="ignore", invalid="ignore"):
        for plane_y, code in ((0.0, FLOOR), (h, CEILING)):
            t = (plane_y - oy) / dy
            ok = np.isfinite(t) & (t > _EPS)
            if np.any(ok):
                idx = np.nonzero(ok)[0]
                hit = origins[idx] + t[idx, None] * dirs[idx]
                inside = shell.contains_xz(hit[:, [0, 2]], tol=1e-9)
                idx = idx[inside]
                closer = t[idx] < best_t[idx]
                idx = idx[closer]
                best_t[idx] = t[idx]
                kind[idx] = code
                edge[idx] = -1

        poly = shell.floor_polygon
        ox, oz = origins[:, 0], origins[:, 2]
        dx, dz = dirs[:, 0], dirs[:, 2]
        for e in range(len(poly)):
            a = poly[e]
            b = poly[(e + 1) % len(poly)]
            ex, ez = b[0] - a[0], b[1] - a[1]
            # solve o + t d = a + s (b - a) in the x-z plane
            denom = dx * (-ez) - dz * (-ex)
            rx, rz = a[0] - ox, a[1] - oz
            t = (rx * (-ez) - rz * (-ex)) / denom
            s = (dx * rz - dz * rx) / denom
            y = oy + t * dy
            ok = (
                np.isfinite(t) & (t > _EPS) & (s >= -1e-9) & (s <= 1 + 1e-9)
                & (y >= -1e-9) & (y <= h + 1e-9) & (t < best_t)
            )
            best_t[ok] = t[ok]
            kind[ok] = WALL
            edge[ok] = e
    return best_t, kind, edge


@dataclass
class RayHits:
    """Per-ray sorted hit table from :func:`cast_rays`; empty slots have depth inf, kind 0."""

    depth: np.ndarray       # (R, K)
    kind: np.ndarray        # (R, K) 0 empty, 1 floor, 2 wall, 3 ceiling, 4 box face
    class_id: np.ndarray    # (R, K)
    box_index: np.ndarray   # (R, K) -1 for background
    face: np.ndarray        # (R, K) 1..6 for box faces, else 0
    wall_edge: np.ndarray   # (R, K)
    uv: np.ndarray          # (R, K, 2) zeros unless box face
    point: np.ndarray       # (R, K, 3) world hit points, nan for empty slots
    count: np.ndarray       # (R,)

    @property
    def n_rays(self) -> int:
        return self.depth.shape[0]


def cast_rays(layout: SceneLayout, origins, dirs) -> RayHits:
    """Vectorized multi-hit ray casting against the layout.

    ``dirs`` should be scaled so the ray parameter equals camera depth (see
    :meth:`CameraPose.ray_directions`). Each box contributes at most its entry
    hit; the nearest background hit terminates the list.
    """
    dirs = np.atleast_2d(np.asarray(dirs, float))
    origins = np.broadcast_to(np.asarray(origins, float), dirs.shape)
    n = len(dirs)
    nb = layout.n_boxes
    k = nb + 1

    depth = np.full((n, k), np.inf)
    kind = np.zeros((n, k), np.int8)
    cls = np.zeros((n, k), np.int32)
    bidx = np.full((n, k), -1, np.int32)
    face = np.zeros((n, k), np.int8)
    edge = np.full((n, k), -1, np.int32)
    uv = np.zeros((n, k, 2))

    t_bg, kind_bg, edge_bg = background_hits(layout.shell, origins, dirs)
    has_bg = np.isfinite(t_bg)

    rows = np.arange(n)
    for j, box in enumerate(layout.boxes):
        t_in, t_out, axis, sign, o_l, d_l = box_slabs(box, origins, dirs)
        hit = (t_in <= t_out) & (t_in > _EPS) & (t_in < t_bg)
        depth[hit, j] = t_in[hit]
        kind[hit, j] = BOX
        cls[hit, j] = box.class_id
        bidx[hit, j] = j
        face[hit, j] = _FACE_INDEX[axis[hit], sign[hit]]
        p_l = o_l + t_in[:, None] * d_l
        ua = _FACE_UV_AXES[axis]
        u = p_l[rows, ua[:, 0]] / box.half[ua[:, 0]]
        v = p_l[rows, ua[:, 1]] / box.half[ua[:, 1]]
        uv[hit, j, 0] = np.clip(u[hit], -1.0, 1.0)
        uv[hit, j, 1] = np.clip(v[hit], -1.0, 1.0)

    depth[has_bg, nb] = t_bg[has_bg]
    kind[has_bg, nb] = kind_bg[has_bg]
    cls[has_bg, nb] = kind_bg[has_bg]
    edge[has_bg, nb] = edge_bg[has_bg]
    # rays that never reach the shell report nothing
    depth[~has_bg, :] = np.inf
    kind[~has_bg, :] = 0
    cls[~has_bg, :] = 0
    bidx[~has_bg, :] = -1
    face[~has_bg, :] = 0

    # stable sort on depth keeps lower box index first on exact ties
    order = np.argsort(depth, axis=1, kind="stable")
    take = lambda a: np.take_along_axis(a, order, axis=1)  # noqa: E731
    depth, kind, cls, bidx, face, edge = map(take, (depth, kind, cls, bidx, face, edge))
    uv = np.take_along_axis(uv, order[..., None], axis=1)
    count = np.count_nonzero(np.isfinite(depth), axis=1)
    with np.errstate(invalid="ignore"):
        point = origins[:, None, :] + depth[..., None] * dirs[:, None, :]
    point[~np.isfinite(depth)] = np.nan
    return RayHits(depth, kind, cls, bidx, face, edge, uv, point, count)


@dataclass(frozen=True)
class RayHit:
    depth: float
    surface_kind: str
    world_point: np.ndarray
    class_id: int
    box_index: Optional[int] = None
    face_index: Optional[int] = None
    edge_index: Optional[int] = None
    local_uv: Optional[np.ndarray] = None


def cast_ray(layout: SceneLayout, camera: CameraPose, pixel) -> list[RayHit]:
    """All front-face box entries then the nearest background hit for one pixel."""
    pixel = np.asarray(pixel, float)
    if not (0 <= pixel[0] <= camera.width and 0 <= pixel[1] <= camera.height):
        raise SceneError(f"pixel {pixel} outside image bounds")
    hits = cast_rays(layout, camera.position, camera.ray_directions(pixel[None]))
    out = []
    for s in range(int(hits.count[0])):
        k = int(hits.kind[0, s])
        if k == BOX:
            out.append(RayHit(
                float(hits.depth[0, s]), "box_face", hits.point[0, s].copy(),
                int(hits.class_id[0, s]), box_index=int(hits.box_index[0, s]),
                face_index=int(hits.face[0, s]), local_uv=hits.uv[0, s].copy(),
            ))
        else:
            out.append(RayHit(
                float(hits.depth[0, s]), SURFACE_NAMES[k], hits.point[0, s].copy(), k,
                edge_index=int(hits.wall_edge[0, s]) if k == WALL else None,
            ))
    return out


# --------------------------------------------------------------------------- occupancy


@dataclass(frozen=True)
class OccupancyGrid:
    origin: np.ndarray
    cell_size: float
    cells: np.ndarray  # (rows, cols) bool, True = free; row index runs along z, col along x

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def cell_center(self, row, col) -> np.ndarray:
        return np.stack(
            [self.origin[0] + (np.asarray(col) + 0.5) * self.cell_size,
             self.origin[1] + (np.asarray(row) + 0.5) * self.cell_size], axis=-1
        )

    def cell_of(self, xz) -> tuple:
        xz = np.asarray(xz, float)
        col = np.floor((xz[..., 0] - self.origin[0]) / self.cell_size).astype(int)
        row = np.floor((xz[..., 1] - self.origin[1]) / self.cell_size).astype(int)
        return row, col

    def in_bounds(self, row, col) -> np.ndarray:
        r, c = self.shape
        return (np.asarray(row) >= 0) & (np.asarray(row) < r) & (np.asarray(col) >= 0) & (np.asarray(col) < c)

    def is_free(self, xz) -> np.ndarray:
        row, col = self.cell_of(np.atleast_2d(xz))
        ok = self.in_bounds(row, col)
        out = np.zeros(row.shape, bool)
        out[ok] = self.cells[row[ok], col[ok]]
        return out


def build_occupancy(layout: SceneLayout, cell_size: float = 0.1, clearance: float = 0.2) -> OccupancyGrid:
    """Free-space grid over the floor polygon's bounding rectangle.

    A cell is free when its center is inside the room, more than `clearance`
    from every wall, and more than `clearance` from every box footprint.
    """
    if not cell_size > 0:
        raise SceneError("cell_size must be positive")
    poly = layout.shell.floor_polygon
    lo = poly.min(axis=0)
    hi = poly.max(axis=0)
    cols = max(1, int(math.ceil((hi[0] - lo[0]) / cell_size - 1e-9)))
    rows = max(1, int(math.ceil((hi[1] - lo[1]) / cell_size - 1e-9)))
    grid = OccupancyGrid(lo.copy(), float(cell_size), np.zeros((rows, cols), bool))
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    centers = grid.cell_center(rr.ravel(), cc.ravel())
    free = points_in_polygon(centers, poly)
    free &= distance_to_polygon_boundary(centers, poly) > clearance
    for box in layout.boxes:
        free &= box.footprint_distance(centers) > clearance
    cells = free.reshape(rows, cols)
    return OccupancyGrid(lo.copy(), float(cell_size), cells)
