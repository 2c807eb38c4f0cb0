"""Layout-conditioned multi-view scene generation: geometry, conditions, masks and the generation loop."""

from .depth import AlignParams, DegenerateFit, DepthMap, fit_scale_offset, rectify_depth
from .epipolar import (
    EpipolarSegment,
    LayoutEpipolarMask,
    compute_la_mask,
    compute_plain_mask,
    epipolar_segments,
    masked_attention,
)
from .orchestrator import (
    GenerationConfig,
    GenerationState,
    GeneratorFailure,
    GeneratorRequest,
    run_generation,
    select_views,
)
from .pointcloud import GlobalPointCloud, consistency_check, merge, project_pc
from .raster import ConditionStack, render_conditions, render_sem_depth, render_spatial
from .scene import (
    BackgroundShell,
    CameraPose,
    OccupancyGrid,
    OrientedBox,
    SceneError,
    SceneLayout,
    build_occupancy,
    cast_ray,
    look_at,
    project,
    unproject,
)
from .trajectory import NoPath, PoseList, TrajectorySpec, build_view_set, plan_path, sample_poses
from .warp import WarpedCondition, render_pointcloud_view, warp_image

__version__ = "0.1.0"

__all__ = [
    "AlignParams", "BackgroundShell", "CameraPose", "ConditionStack", "DegenerateFit", "DepthMap",
    "EpipolarSegment", "GenerationConfig", "GenerationState", "GeneratorFailure", "GeneratorRequest",
    "GlobalPointCloud", "LayoutEpipolarMask", "NoPath", "OccupancyGrid", "OrientedBox", "PoseList",
    "SceneError", "SceneLayout", "TrajectorySpec", "WarpedCondition", "build_occupancy", "build_view_set",
    "cast_ray", "compute_la_mask", "compute_plain_mask", "consistency_check", "epipolar_segments",
    "fit_scale_offset", "look_at", "masked_attention", "merge", "plan_path", "project", "project_pc",
    "rectify_depth", "render_conditions", "render_pointcloud_view", "render_sem_depth", "render_spatial",
    "run_generation", "sample_poses", "select_views", "unproject", "warp_image",
]
