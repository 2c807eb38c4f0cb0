"""Object-focused camera trajectories on the free-space grid, and the deduplicated view set."""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .scene import CameraPose, OccupancyGrid, OrientedBox, SceneLayout, build_occupancy, default_intrinsics, look_at

logger = logging.getLogger(__name__)

DEFAULT_BAND = (0.8, 3.0)
DEFAULT_ANGLE_CAP = 10.0
HEIGHT_RANGE = (0.8, 2.5)
DEDUP_DISTANCE = 0.4
DEDUP_ANGLE = 4.0
ROOM_CENTER = -1

_SQRT2 = math.sqrt(2.0)
_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


class NoPath(RuntimeError):
    """The distance band around the target cannot be reached from the start."""


@dataclass(frozen=True)
class TrajectorySpec:
    target_box: int
    start: tuple
    height: float
    distance_band: tuple = DEFAULT_BAND
    step: float = 0.4
    target: Union[OrientedBox, np.ndarray, None] = None

    def __post_init__(self):
        r_min, r_max = self.distance_band
        if not 0 < r_min < r_max:
            raise ValueError(f"distance band must satisfy 0 < r_min < r_max, got {self.distance_band}")
        if not HEIGHT_RANGE[0] <= self.height <= HEIGHT_RANGE[1]:
            raise ValueError(f"height {self.height} outside {HEIGHT_RANGE}")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.target is None:
            raise ValueError("trajectory spec needs a target box or point")

    def target_center(self) -> np.ndarray:
        if isinstance(self.target, OrientedBox):
            return self.target.location
        return np.asarray(self.target, float)

    def target_distance(self, xz: np.ndarray) -> np.ndarray:
        if isinstance(self.target, OrientedBox):
            return self.target.footprint_distance(xz)
        c = np.asarray(self.target, float)[[0, 2]]
        return np.linalg.norm(np.atleast_2d(xz) - c, axis=1)


@dataclass
class PoseList:
    poses: list
    trajectory_id: int
    target_box: int = ROOM_CENTER
    seed: Optional[int] = None
    path: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.poses)

    def to_json_records(self) -> list[dict]:
        out = []
        for cam in self.poses:
            rec = cam.to_dict()
            rec.update({"trajectory_id": self.trajectory_id, "target_box": self.target_box, "seed": self.seed})
            out.append(rec)
        return out


def band_cells(grid: OccupancyGrid, spec: TrajectorySpec) -> np.ndarray:
    rows, cols = grid.shape
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    centers = grid.cell_center(rr.ravel(), cc.ravel())
    d = spec.target_distance(centers).reshape(rows, cols)
    r_min, r_max = spec.distance_band
    return grid.cells & (d >= r_min) & (d <= r_max)


def _neighbors(allowed: np.ndarray, r: int, c: int):
    rows, cols = allowed.shape
    for dr, dc in _NEIGHBORS:
        nr, nc = r + dr, c + dc
        if not (0 <= nr < rows and 0 <= nc < cols) or not allowed[nr, nc]:
            continue
        if dr and dc and not (allowed[r + dr, c] and allowed[r, c + dc]):
            continue  # no corner cutting
        yield nr, nc, (_SQRT2 if dr and dc else 1.0)


def geodesic_distances(allowed: np.ndarray, source: tuple) -> np.ndarray:
    """Dijkstra over 8-connected allowed cells (unit cell edges); inf where unreachable."""
    dist = np.full(allowed.shape, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source[0], source[1])]
    while heap:
        d, r, c = heapq.heappop(heap)
        if d > dist[r, c]:
            continue
        for nr, nc, w in _neighbors(allowed, r, c):
            nd = d + w
            if nd < dist[nr, nc]:
                dist[nr, nc] = nd
                heapq.heappush(heap, (nd, nr, nc))
    return dist


def astar(allowed: np.ndarray, start: tuple, goal: tuple) -> list[tuple]:
    """A* with octile heuristic; ties resolved toward lower (row, col)."""
    def h(r, c):
        dr, dc = abs(r - goal[0]), abs(c - goal[1])
        return (dr + dc) + (_SQRT2 - 2.0) * min(dr, dc)

    g = {start: 0.0}
    parent = {start: None}
    heap = [(h(*start), start[0], start[1])]
    closed = set()
    while heap:
        _, r, c = heapq.heappop(heap)
        node = (r, c)
        if node in closed:
            continue
        if node == goal:
            path = [node]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1]
        closed.add(node)
        for nr, nc, w in _neighbors(allowed, r, c):
            nxt = (nr, nc)
            ng = g[node] + w
            if ng < g.get(nxt, np.inf) - 1e-12:
                g[nxt] = ng
                parent[nxt] = node
                heapq.heappush(heap, (ng + h(nr, nc), nr, nc))
    raise NoPath(f"goal {goal} unreachable from {start}")


def path_cost(cells: list[tuple]) -> float:
    """Length of a cell path in cell units."""
    total = 0.0
    for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
        total += _SQRT2 if (r0 != r1 and c0 != c1) else 1.0
    return total


def plan_cells(grid: OccupancyGrid, spec: TrajectorySpec) -> list[tuple]:
    """Grid-cell path of a trajectory; see :func:`plan_path`."""
    band = band_cells(grid, spec)
    if not band.any():
        raise NoPath("distance band contains no free cell")
    sr, sc = grid.cell_of(np.asarray(spec.start, float))
    if not (grid.in_bounds(sr, sc) and grid.cells[sr, sc]):
        raise NoPath(f"start {spec.start} is not over a free cell")
    start = (int(sr), int(sc))
    if band[start]:
        entry = start
    else:
        to_band = geodesic_distances(grid.cells, start)
        reach = np.where(band, to_band, np.inf)
        if not np.isfinite(reach).any():
            raise NoPath("distance band unreachable from start")
        best = reach.min()
        cand = np.argwhere(reach == best)
        entry = tuple(int(v) for v in cand[0])
    within = geodesic_distances(band, entry)
    far = np.where(np.isfinite(within), within, -1.0)
    cand = np.argwhere(far == far.max())
    goal = tuple(int(v) for v in cand[0])
    return astar(band, entry, goal)


def plan_path(grid: OccupancyGrid, spec: TrajectorySpec) -> np.ndarray:
    """Planar trajectory (K, 2) inside the target's distance band.

    The trajectory enters the band at the cell nearest (geodesically) to the
    start and runs to the band cell farthest from that entry.
    """
    cells = plan_cells(grid, spec)
    rc = np.array(cells)
    return grid.cell_center(rc[:, 0], rc[:, 1])


def rotation_angle_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    cos = (np.trace(r1 @ r2.T) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def _arc_positions(path: np.ndarray):
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])

    def at(s):
        s = np.clip(np.atleast_1d(s), 0.0, cum[-1])
        i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1) if len(seg) else np.zeros(len(s), int)
        if not len(seg):
            return np.repeat(path[:1], len(s), axis=0)
        t = np.where(seg[i] > 0, (s - cum[i]) / np.where(seg[i] > 0, seg[i], 1.0), 0.0)
        return path[i] + t[:, None] * (path[i + 1] - path[i])

    return cum[-1], at


def sample_poses(path: np.ndarray, spec: TrajectorySpec, layout: Optional[SceneLayout] = None,
                 interval: float = 0.4, angle_cap: float = DEFAULT_ANGLE_CAP,
                 intrinsics: Optional[dict] = None, trajectory_id: int = 0, seed=None) -> PoseList:
    """Arc-length resampling of a planar path into look-at poses.

    Extra poses are inserted wherever consecutive orientations differ by more
    than `angle_cap` degrees.
    """
    path = np.atleast_2d(np.asarray(path, float))
    if len(path) == 0:
        raise ValueError("empty path")
    intrinsics = intrinsics or default_intrinsics()
    target = spec.target_center()
    length, at = _arc_positions(path)
    n = int(math.floor(length / interval + 1e-9))
    stations = [k * interval for k in range(n + 1)]

    def pose(s):
        xz = at(s)[0]
        return look_at([xz[0], spec.height, xz[1]], target, **intrinsics)

    poses = [pose(s) for s in stations]
    i = 0
    while i < len(poses) - 1:
        ang = rotation_angle_deg(poses[i].rotation, poses[i + 1].rotation)
        if ang > angle_cap:
            k = int(math.ceil(ang / angle_cap))
            s0, s1 = stations[i], stations[i + 1]
            mids = [s0 + (s1 - s0) * j / k for j in range(1, k)]
            stations[i + 1:i + 1] = mids
            poses[i + 1:i + 1] = [pose(s) for s in mids]
            continue
        i += 1
    target_box = spec.target_box
    return PoseList(poses, trajectory_id, target_box, seed, path)


def _pose_close(a: CameraPose, b: CameraPose, dist: float, angle: float) -> bool:
    return (np.linalg.norm(a.position - b.position) < dist
            and rotation_angle_deg(a.rotation, b.rotation) < angle)


def dedup_pose_lists(pose_lists: list[PoseList], dist: float = DEDUP_DISTANCE,
                     angle: float = DEDUP_ANGLE) -> list[PoseList]:
    """Greedy removal of poses that are both closer than `dist` and within `angle` degrees of a kept pose.

    Order is trajectory-major; trajectories that lose every pose are dropped.
    """
    kept_all: list[CameraPose] = []
    out = []
    for pl in pose_lists:
        kept = []
        for cam in pl.poses:
            if any(_pose_close(cam, k, dist, angle) for k in kept_all):
                continue
            kept.append(cam)
            kept_all.append(cam)
        if kept:
            out.append(PoseList(kept, pl.trajectory_id, pl.target_box, pl.seed, pl.path))
    return out


@dataclass
class ViewSetConfig:
    per_object: int = 2
    interval: float = 0.4
    distance_band: tuple = DEFAULT_BAND
    angle_cap: float = DEFAULT_ANGLE_CAP
    cell_size: float = 0.1
    clearance: float = 0.25
    dedup_distance: float = DEDUP_DISTANCE
    dedup_angle: float = DEDUP_ANGLE
    room_center: bool = False


def room_center_target(layout: SceneLayout) -> np.ndarray:
    c = layout.shell.centroid()
    return np.array([c[0], 0.5 * layout.shell.ceiling_height, c[1]])


def plan_trajectories(layout: SceneLayout, p0: CameraPose, rng: np.random.Generator,
                      config: Optional[ViewSetConfig] = None, seed=None):
    """Trajectories for every object from p0's floor position, before dedup.

    Returns ``(pose_lists, warnings)``. Zero-object layouts (or
    ``config.room_center``) aim trajectories at the room center instead.
    """
    cfg = config or ViewSetConfig()
    grid = build_occupancy(layout, cfg.cell_size, cfg.clearance)
    start = p0.position[[0, 2]]
    if not grid.is_free(start)[0]:
        free = np.argwhere(grid.cells)
        if len(free) == 0:
            raise NoPath("no free space in the layout")
        centers = grid.cell_center(free[:, 0], free[:, 1])
        start = centers[np.argmin(np.linalg.norm(centers - start, axis=1))]
    intrinsics = {"fx": p0.fx, "fy": p0.fy, "cx": p0.cx, "cy": p0.cy, "width": p0.width, "height": p0.height}
    if cfg.room_center or layout.n_boxes == 0:
        targets = [(ROOM_CENTER, room_center_target(layout))]
    else:
        targets = list(enumerate(layout.boxes))
    raw: list[PoseList] = []
    warnings: list[dict] = []
    tid = 0
    for target_index, target in targets:
        for _ in range(cfg.per_object):
            height = float(rng.uniform(*HEIGHT_RANGE))
            spec = TrajectorySpec(target_index, tuple(start), height, cfg.distance_band, cfg.interval, target)
            try:
                path = plan_path(grid, spec)
            except NoPath as exc:
                logger.warning("skipping trajectory for target %s: %s", target_index, exc)
                warnings.append({"target_box": target_index, "reason": str(exc)})
                continue
            raw.append(sample_poses(path, spec, layout, cfg.interval, cfg.angle_cap, intrinsics, tid, seed))
            tid += 1
    return raw, warnings


def build_view_set(layout: SceneLayout, p0: CameraPose, rng: np.random.Generator,
                   config: Optional[ViewSetConfig] = None, seed=None):
    """Deduplicated view set: :func:`plan_trajectories` followed by :func:`dedup_pose_lists`."""
    cfg = config or ViewSetConfig()
    raw, warnings = plan_trajectories(layout, p0, rng, cfg, seed)
    return dedup_pose_lists(raw, cfg.dedup_distance, cfg.dedup_angle), warnings
