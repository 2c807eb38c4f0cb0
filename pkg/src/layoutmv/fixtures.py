"""Synthetic layouts and camera samplers used as stand-ins for a real scene dataset."""

from __future__ import annotations

import math

import numpy as np

from .raster import render_conditions
from .scene import (
    BackgroundShell,
    CameraPose,
    OrientedBox,
    SceneLayout,
    build_occupancy,
    default_intrinsics,
    look_at,
)

FIXTURE_KINDS = ("empty_room", "one_box", "bedroom5", "random")

CLASS_NAMES = {
    1: "floor", 2: "wall", 3: "ceiling", 4: "bed", 5: "nightstand", 6: "wardrobe",
    7: "desk", 8: "chair", 9: "sofa", 10: "table", 11: "cabinet", 12: "shelf", 13: "lamp",
}

# dataset filters: drop views that get closer than this or show too little foreground
MIN_VIEW_DEPTH = 0.5
MIN_FOREGROUND_FRACTION = 0.2


def _rect(wx: float, wz: float):
    return [[-wx / 2, -wz / 2], [wx / 2, -wz / 2], [wx / 2, wz / 2], [-wx / 2, wz / 2]]


def empty_room() -> SceneLayout:
    return SceneLayout((), BackgroundShell(_rect(5.0, 4.0), 2.8), CLASS_NAMES)


def one_box() -> SceneLayout:
    box = OrientedBox(10, [1.2, 0.75, 0.8], [0.0, 0.375, 0.0], 0.3)
    return SceneLayout((box,), BackgroundShell(_rect(6.0, 6.0), 2.8), CLASS_NAMES)


def bedroom5() -> SceneLayout:
    half_pi = math.pi / 2
    boxes = (
        OrientedBox(4, [1.6, 0.6, 2.0], [0.0, 0.3, 1.75], 0.0),
        OrientedBox(5, [0.5, 0.55, 0.45], [-1.15, 0.275, 2.5], 0.0),
        OrientedBox(5, [0.5, 0.55, 0.45], [1.15, 0.275, 2.5], 0.0),
        OrientedBox(6, [1.2, 2.0, 0.6], [-2.15, 1.0, -1.4], half_pi),
        OrientedBox(7, [1.2, 0.75, 0.6], [2.15, 0.375, -1.2], half_pi),
    )
    return SceneLayout(boxes, BackgroundShell(_rect(5.0, 6.0), 2.8), CLASS_NAMES)


def random_scene(seed: int) -> SceneLayout:
    """Random rectangular or L-shaped room with 3-7 non-overlapping boxes."""
    rng = np.random.default_rng(seed)
    wx, wz = rng.uniform(4.0, 7.0, size=2)
    height = rng.uniform(2.5, 3.2)
    if rng.random() < 0.3:
        cx, cz = rng.uniform(0.3, 0.45) * wx, rng.uniform(0.3, 0.45) * wz
        x0, x1, z0, z1 = -wx / 2, wx / 2, -wz / 2, wz / 2
        poly = [[x0, z0], [x1, z0], [x1, z1 - cz], [x1 - cx, z1 - cz], [x1 - cx, z1], [x0, z1]]
    else:
        poly = _rect(wx, wz)
    shell = BackgroundShell(poly, height)
    boxes: list[OrientedBox] = []
    n_target = int(rng.integers(3, 8))
    attempts = 0
    while len(boxes) < n_target and attempts < 400:
        attempts += 1
        sx, sz = rng.uniform(0.4, 2.0, size=2)
        sy = rng.uniform(0.4, min(2.0, height - 0.3))
        yaw = rng.choice([0.0, math.pi / 2]) if rng.random() < 0.5 else rng.uniform(-math.pi, math.pi)
        lo, hi = shell.floor_polygon.min(axis=0), shell.floor_polygon.max(axis=0)
        x, z = rng.uniform(lo, hi)
        if rng.random() < 0.2:
            y = rng.uniform(sy / 2 + 0.3, height - sy / 2)  # wall-mounted / floating
        else:
            y = sy / 2
        cand = OrientedBox(int(rng.integers(4, 14)), [sx, sy, sz], [x, y, z], yaw)
        fp = cand.footprint()
        if not np.all(shell.contains_xz(fp, tol=0.0)):
            continue
        if any(b.footprint_distance(np.vstack([fp, cand.location[[0, 2]]])).min() < 0.1
               or cand.footprint_distance(np.vstack([b.footprint(), b.location[[0, 2]]])).min() < 0.1
               for b in boxes):
            continue
        boxes.append(cand)
    return SceneLayout(tuple(boxes), shell, CLASS_NAMES)


def make_fixture(kind: str, seed: int = 0) -> SceneLayout:
    if kind == "empty_room":
        return empty_room()
    if kind == "one_box":
        return one_box()
    if kind == "bedroom5":
        return bedroom5()
    if kind == "random":
        return random_scene(seed)
    raise ValueError(f"unknown fixture kind {kind!r}; choose from {FIXTURE_KINDS}")


def view_passes_filters(layout: SceneLayout, camera: CameraPose, probe: int = 64) -> bool:
    """Dataset-style view filter evaluated on a low-resolution probe render."""
    stack = render_conditions(layout, camera.scaled(probe, probe), m=1)
    d = stack.depth[..., 0]
    if np.any((d > 0) & (d < MIN_VIEW_DEPTH)):
        return False
    if layout.n_boxes == 0:
        return True
    return float(np.mean(stack.sem[..., 0] >= 4)) >= MIN_FOREGROUND_FRACTION


def sample_fixture_cameras(layout: SceneLayout, rng: np.random.Generator, n: int,
                           width: int = 512, height: int = 512, max_attempts: int = 500) -> list[CameraPose]:
    """Random free-space cameras aimed at a random object or the room center."""
    grid = build_occupancy(layout, 0.1, 0.3)
    free = np.argwhere(grid.cells)
    if len(free) == 0:
        raise ValueError("layout has no free floor space for cameras")
    intr = default_intrinsics(width, height)
    center = layout.shell.centroid()
    cams: list[CameraPose] = []
    for _ in range(max_attempts):
        if len(cams) >= n:
            break
        r, c = free[rng.integers(len(free))]
        xz = grid.cell_center(r, c) + rng.uniform(-0.5, 0.5, 2) * grid.cell_size
        pos = np.array([xz[0], rng.uniform(0.8, 2.5), xz[1]])
        if layout.n_boxes and rng.random() < 0.7:
            target = layout.boxes[rng.integers(layout.n_boxes)].location.copy()
        else:
            target = np.array([center[0], rng.uniform(0.5, 1.5), center[1]])
        target = target + rng.normal(0, 0.1, 3)
        if np.linalg.norm((target - pos)[[0, 2]]) < 0.3:
            continue
        cam = look_at(pos, target, **intr)
        if view_passes_filters(layout, cam):
            cams.append(cam)
    return cams


def initial_camera(layout: SceneLayout, width: int = 512, height: int = 512, camera_height: float = 1.5) -> CameraPose:
    """Deterministic starting view: free cell closest to the room centroid, aimed at the largest box."""
    grid = build_occupancy(layout, 0.1, 0.3)
    free = np.argwhere(grid.cells)
    if len(free) == 0:
        raise ValueError("layout has no free floor space for the initial camera")
    centroid = layout.shell.centroid()
    centers = grid.cell_center(free[:, 0], free[:, 1])
    best = np.argmin(np.sum((centers - centroid) ** 2, axis=1))
    xz = centers[best]
    pos = np.array([xz[0], camera_height, xz[1]])
    if layout.n_boxes:
        big = max(range(layout.n_boxes), key=lambda i: (float(np.prod(layout.boxes[i].size)), -i))
        target = layout.boxes[big].location
    else:
        lo, hi = layout.shell.floor_polygon.min(axis=0), layout.shell.floor_polygon.max(axis=0)
        target = np.array([hi[0], 1.2, 0.5 * (lo[1] + hi[1])])
    return look_at(pos, target, **default_intrinsics(width, height))
