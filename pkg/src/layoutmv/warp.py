"""Forward warping with z-buffered splatting, and point-cloud rendering into a view."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depth import DepthMap
from .pointcloud import GlobalPointCloud
from .scene import CameraPose

Z_TOLERANCE = 0.01
MIN_WEIGHT = 1e-6


@dataclass
class WarpedCondition:
    image: np.ndarray   # (H, W, 3) float in the source's value range
    mask: np.ndarray    # (H, W) True where at least one splat landed
    depth: np.ndarray   # (H, W) z-buffer depth, 0 where uncovered

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())

    def image_u8(self) -> np.ndarray:
        return np.clip(np.round(self.image), 0, 255).astype(np.uint8)


def zbuffer_composite(pixel: np.ndarray, z: np.ndarray, weight: np.ndarray, color: np.ndarray,
                      height: int, width: int, z_tol: float = Z_TOLERANCE) -> WarpedCondition:
    """Resolve splat contributions per destination pixel.

    The nearest depth wins; contributions within `z_tol` of it are blended by
    weight (renormalized), farther ones are discarded.
    """
    n = height * width
    zmin = np.full(n, np.inf)
    np.minimum.at(zmin, pixel, z)
    keep = z <= zmin[pixel] + z_tol
    px, wk = pixel[keep], weight[keep]
    wsum = np.bincount(px, weights=wk, minlength=n)
    cols = np.stack([np.bincount(px, weights=wk * color[keep, c], minlength=n)
                     for c in range(color.shape[1])], axis=1)
    mask = wsum > 0
    img = np.zeros((n, color.shape[1]))
    img[mask] = cols[mask] / wsum[mask, None]
    depth = np.where(mask, zmin, 0.0)
    return WarpedCondition(img.reshape(height, width, -1), mask.reshape(height, width),
                           depth.reshape(height, width))


def reproject(src_depth: DepthMap, src_cam: CameraPose, dst_cam: CameraPose):
    """Destination pixel coordinates and depths of every valid source pixel center.

    Returns ``(rows, cols, uv, z)`` where rows/cols index the source pixels.
    """
    rr, cc = np.nonzero(src_depth.validity)
    z = src_depth.values[rr, cc]
    cam_pts = np.empty((len(z), 3))
    cam_pts[:, 0] = (cc + 0.5 - src_cam.cx) / src_cam.fx * z
    cam_pts[:, 1] = (rr + 0.5 - src_cam.cy) / src_cam.fy * z
    cam_pts[:, 2] = z
    dst = dst_cam.world_to_camera(src_cam.camera_to_world(cam_pts))
    zd = dst[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = dst_cam.fx * dst[:, 0] / zd + dst_cam.cx
        v = dst_cam.fy * dst[:, 1] / zd + dst_cam.cy
    return rr, cc, np.stack([u, v], axis=1), zd


def _snap(x: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    # round-off from the world round trip must not split a splat that lands on a pixel center
    r = np.round(x)
    return np.where(np.abs(x - r) < eps, r, x)


def warp_image(src_image: np.ndarray, src_depth: DepthMap, src_cam: CameraPose, dst_cam: CameraPose,
               z_tol: float = Z_TOLERANCE) -> WarpedCondition:
    """Forward-warp an image into `dst_cam` with a 2x2 bilinear footprint and z-buffering."""
    img = np.asarray(src_image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    rr, cc, uv, z = reproject(src_depth, src_cam, dst_cam)
    front = np.isfinite(z) & (z > 1e-6) & np.all(np.isfinite(uv), axis=1)
    rr, cc, uv, z = rr[front], cc[front], uv[front], z[front]
    colors = img[rr, cc]
    # pixel centers sit at integer + 0.5
    x = _snap(uv[:, 0] - 0.5)
    y = _snap(uv[:, 1] - 0.5)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    H, W = dst_cam.height, dst_cam.width
    pix, zz, ww, cc_all = [], [], [], []
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        tx, ty = x0 + dx, y0 + dy
        ok = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H) & (wgt >= MIN_WEIGHT)
        pix.append(ty[ok] * W + tx[ok])
        zz.append(z[ok])
        ww.append(wgt[ok])
        cc_all.append(colors[ok])
    out = zbuffer_composite(np.concatenate(pix), np.concatenate(zz), np.concatenate(ww),
                            np.concatenate(cc_all), H, W, z_tol)
    if np.asarray(src_image).ndim == 2:
        out.image = out.image[..., 0]
    return out


def render_pointcloud_view(pc: GlobalPointCloud, cam: CameraPose, point_size: float = 1.0,
                           adaptive: bool = False, max_footprint: int = 10,
                           z_tol: float = Z_TOLERANCE) -> WarpedCondition:
    """Z-buffered square-footprint point splatting of the cloud into `cam`.

    With ``adaptive=True`` each point's footprint is its stored world-space
    radius projected into the view (never below `point_size` pixels).
    """
    H, W = cam.height, cam.width
    if len(pc) == 0:
        return WarpedCondition(np.zeros((H, W, 3)), np.zeros((H, W), bool), np.zeros((H, W)))
    pts = cam.world_to_camera(pc.positions)
    z = pts[:, 2]
    front = z > 1e-6
    pts, z = pts[front], z[front]
    colors = pc.colors[front].astype(np.float64)
    u = cam.fx * pts[:, 0] / z + cam.cx
    v = cam.fy * pts[:, 1] / z + cam.cy
    if adaptive:
        size = np.maximum(point_size, 2.0 * pc.radius[front] * 0.5 * (cam.fx + cam.fy) / z)
        size = np.minimum(size, max_footprint)
    else:
        size = np.full(len(z), float(point_size))
    half = 0.5 * size
    # pixel columns whose centers c + 0.5 fall in [u - half, u + half)
    c_lo = np.ceil(u - half - 0.5).astype(np.int64)
    c_hi = np.ceil(u + half - 0.5).astype(np.int64) - 1
    r_lo = np.ceil(v - half - 0.5).astype(np.int64)
    r_hi = np.ceil(v + half - 0.5).astype(np.int64) - 1
    on_screen = (c_hi >= 0) & (c_lo < W) & (r_hi >= 0) & (r_lo < H)
    idx = np.nonzero(on_screen)[0]
    c_lo, c_hi, r_lo, r_hi = c_lo[idx], c_hi[idx], r_lo[idx], r_hi[idx]
    nx = c_hi - c_lo + 1
    ny = r_hi - r_lo + 1
    span = int(max(nx.max(initial=0), ny.max(initial=0)))
    pix, zz, cc = [], [], []
    for dy in range(span):
        for dx in range(span):
            sel = (nx > dx) & (ny > dy)
            if not np.any(sel):
                continue
            tx = c_lo[sel] + dx
            ty = r_lo[sel] + dy
            ok = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H)
            src = idx[sel][ok]
            pix.append(ty[ok] * W + tx[ok])
            zz.append(z[src])
            cc.append(colors[src])
    if not pix:
        return WarpedCondition(np.zeros((H, W, 3)), np.zeros((H, W), bool), np.zeros((H, W)))
    pix = np.concatenate(pix)
    return zbuffer_composite(pix, np.concatenate(zz), np.ones(len(pix)), np.concatenate(cc), H, W, z_tol)
