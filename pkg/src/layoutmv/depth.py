"""Layout-rectified depth: inverse-depth scale/offset fit on the background plus foreground clipping."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .raster import ConditionStack

logger = logging.getLogger(__name__)

DET_TOL = 1e-12


class DegenerateFit(RuntimeError):
    """Too few or rank-deficient background samples for the scale/offset fit."""


@dataclass
class DepthMap:
    values: np.ndarray
    validity: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.validity is None:
            self.validity = np.isfinite(self.values) & (self.values > 0)
        else:
            self.validity = np.asarray(self.validity, bool) & np.isfinite(self.values) & (self.values > 0)

    @property
    def shape(self):
        return self.values.shape

    def masked(self) -> np.ndarray:
        """Values with invalid pixels set to 0."""
        return np.where(self.validity, self.values, 0.0)


@dataclass(frozen=True)
class AlignParams:
    scale: float
    offset: float
    residual: float = 0.0
    n_samples: int = 0

    @classmethod
    def identity(cls) -> "AlignParams":
        return cls(1.0, 0.0, 0.0, 0)

    def apply(self, depth: np.ndarray) -> np.ndarray:
        """Aligned depth D' from 1/D' = s/D + offset; non-positive inverse depths map to 0."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = self.scale / depth + self.offset
            out = np.where(inv > 0, 1.0 / inv, 0.0)
        return np.where(np.isfinite(out), out, 0.0)


class DepthEstimator(Protocol):
    """Monocular depth model boundary: image (and the pose it was taken from) -> relative depth."""

    def estimate(self, image: np.ndarray, camera) -> DepthMap: ...


def masks_from_layers(depth_layer2: np.ndarray):
    """Foreground = a second layout hit exists; background = it does not."""
    d2 = np.asarray(depth_layer2)
    fg = d2 > 0
    return fg, ~fg


def fit_scale_offset(pred: DepthMap, layout_depth_l1: np.ndarray, bg_mask: np.ndarray) -> AlignParams:
    """Closed-form least squares of ``s / pred + offset`` against ``1 / layout_depth_l1`` on bg pixels.

    Pixels without a layout hit (layer 1 = 0) carry no target and are skipped.
    """
    l1 = np.asarray(layout_depth_l1, dtype=np.float64)
    sel = np.asarray(bg_mask, bool) & pred.validity & (l1 > 0) & np.isfinite(l1)
    n = int(np.count_nonzero(sel))
    if n < 2:
        raise DegenerateFit(f"need at least 2 valid background pixels, got {n}")
    x = 1.0 / pred.values[sel]
    y = 1.0 / l1[sel]
    mx, my = x.mean(), y.mean()
    dx = x - mx
    # determinant of the mean-normalized 2x2 normal matrix is var(x)
    var = float(np.dot(dx, dx) / n)
    if var <= DET_TOL:
        raise DegenerateFit("inverse predicted depths are constant on the background")
    s = float(np.dot(dx, y - my) / n / var)
    off = float(my - s * mx)
    r = s * x + off - y
    if np.any(s * x + off <= 0):
        raise DegenerateFit("fitted inverse depth is non-positive on the background")
    return AlignParams(s, off, float(np.sqrt(np.mean(r * r))), n)


def rectify_depth(pred: DepthMap, stack: ConditionStack, return_params: bool = False):
    """Align `pred` to the layout background, then clip the foreground into [first hit, background]."""
    if stack.layers < 2:
        raise ValueError("rectification needs a condition stack with at least 2 layers")
    d1 = stack.depth[..., 0].astype(np.float64)
    fg, bg = masks_from_layers(stack.depth[..., 1])
    try:
        params = fit_scale_offset(pred, d1, bg)
    except DegenerateFit as exc:
        logger.warning("depth fit degenerate (%s); using identity alignment", exc)
        params = AlignParams.identity()
    aligned = params.apply(pred.values)
    valid = pred.validity & (aligned > 0)
    upper = stack.last_nonzero_depth().astype(np.float64)
    clip = fg & valid
    aligned[clip] = np.clip(aligned[clip], d1[clip], upper[clip])
    aligned[~valid] = 0.0
    out = DepthMap(aligned, valid)
    return (out, params) if return_params else out
