"""scikit-learn style wrappers around the layout conditioning, depth alignment and trajectory steps."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .depth import AlignParams, DepthMap, fit_scale_offset, rectify_depth
from .raster import DEFAULT_LAYERS, ConditionStack, render_conditions
from .scene import CameraPose, SceneLayout
from .trajectory import DEDUP_ANGLE, DEDUP_DISTANCE, DEFAULT_ANGLE_CAP, DEFAULT_BAND, ViewSetConfig, build_view_set


def check_layout(layout) -> SceneLayout:
    if isinstance(layout, SceneLayout):
        return layout
    if isinstance(layout, dict):
        return SceneLayout.from_dict(layout)
    raise TypeError(f"expected a SceneLayout or its dict form, got {type(layout).__name__}")


def check_camera(camera) -> CameraPose:
    if isinstance(camera, CameraPose):
        return camera
    if isinstance(camera, dict):
        return CameraPose.from_dict(camera)
    raise TypeError(f"expected a CameraPose or its dict form, got {type(camera).__name__}")


def check_cameras(cameras) -> list[CameraPose]:
    if isinstance(cameras, (CameraPose, dict)):
        cameras = [cameras]
    cams = [check_camera(c) for c in cameras]
    if not cams:
        raise ValueError("at least one camera is required")
    return cams


def check_depth_array(depth, name: str = "depth") -> np.ndarray:
    """2-D float array; NaN and negative entries are rejected, zeros mean 'no value'."""
    if isinstance(depth, DepthMap):
        return depth.masked()
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise ValueError(f"{name} contains NaN")
    if (arr < 0).any():
        raise ValueError(f"{name} contains negative values")
    return arr


class LayoutConditionEncoder(TransformerMixin, BaseEstimator):
    """Renders per-camera condition stacks of the layout given to ``fit``."""

    def __init__(self, layers: int = DEFAULT_LAYERS):
        self.layers = layers

    def fit(self, layout, y=None):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        self.layout_ = check_layout(layout)
        return self

    def transform(self, cameras) -> list[ConditionStack]:
        check_is_fitted(self, "layout_")
        return [render_conditions(self.layout_, c, self.layers) for c in check_cameras(cameras)]


class InverseDepthAligner(TransformerMixin, BaseEstimator):
    """Affine fit in inverse depth from relative depth ``X`` to metric layout depth ``y``.

    ``fit`` uses pixels where both are positive (optionally restricted by
    ``sample_mask``); ``transform`` maps relative depth to metric depth.
    """

    def fit(self, X, y, sample_mask=None):
        x = check_depth_array(X, "X")
        t = check_depth_array(y, "y")
        if x.shape != t.shape:
            raise ValueError(f"X and y shapes differ: {x.shape} vs {t.shape}")
        mask = np.ones(x.shape, bool) if sample_mask is None else np.asarray(sample_mask, bool)
        params = fit_scale_offset(DepthMap(x), t, mask)
        self.scale_ = params.scale
        self.offset_ = params.offset
        self.residual_ = params.residual
        self.n_samples_ = params.n_samples
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, ["scale_", "offset_"])
        x = check_depth_array(X, "X")
        out = AlignParams(self.scale_, self.offset_).apply(np.where(x > 0, x, np.nan))
        return np.where(x > 0, out, 0.0)


class LayoutDepthRectifier(TransformerMixin, BaseEstimator):
    """Full rectification against a condition stack: background fit then foreground clipping."""

    def fit(self, X, y: ConditionStack):
        if not isinstance(y, ConditionStack):
            raise TypeError("y must be the view's ConditionStack")
        self.stack_ = y
        depth, params = rectify_depth(DepthMap(check_depth_array(X, "X")), y, return_params=True)
        self.scale_, self.offset_ = params.scale, params.offset
        self._last = depth.values
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "stack_")
        return rectify_depth(DepthMap(check_depth_array(X, "X")), self.stack_).values

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y)._last


class TrajectoryPlanner(BaseEstimator):
    """Plans the deduplicated view set for a layout from an initial camera.

    ``fit(layout, initial_camera)`` stores ``pose_lists_`` and ``warnings_``;
    ``predict()`` returns every pose in trajectory-major order.
    """

    def __init__(self, per_object: int = 2, interval: float = 0.4, distance_band=DEFAULT_BAND,
                 angle_cap: float = DEFAULT_ANGLE_CAP, dedup_distance: float = DEDUP_DISTANCE,
                 dedup_angle: float = DEDUP_ANGLE, room_center: bool = False, seed: int = 0):
        self.per_object = per_object
        self.interval = interval
        self.distance_band = distance_band
        self.angle_cap = angle_cap
        self.dedup_distance = dedup_distance
        self.dedup_angle = dedup_angle
        self.room_center = room_center
        self.seed = seed

    def fit(self, layout, initial_camera):
        cfg = ViewSetConfig(per_object=self.per_object, interval=self.interval,
                            distance_band=tuple(self.distance_band), angle_cap=self.angle_cap,
                            dedup_distance=self.dedup_distance, dedup_angle=self.dedup_angle,
                            room_center=self.room_center)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(1)[0])
        self.pose_lists_, self.warnings_ = build_view_set(check_layout(layout), check_camera(initial_camera),
                                                          rng, cfg, self.seed)
        return self

    def predict(self, X=None) -> list[CameraPose]:
        check_is_fitted(self, "pose_lists_")
        return [cam for pl in self.pose_lists_ for cam in pl.poses]


__all__ = [
    "InverseDepthAligner", "LayoutConditionEncoder", "LayoutDepthRectifier", "NotFittedError",
    "TrajectoryPlanner", "check_camera", "check_cameras", "check_depth_array", "check_layout",
]
