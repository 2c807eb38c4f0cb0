"""Recursive scene generation over a dense view set, with pluggable generator and depth estimator."""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from .depth import DepthEstimator, DepthMap, rectify_depth
from .epipolar import DEFAULT_DILATION, LayoutEpipolarMask, compute_la_mask
from .formats import (
    load_png,
    read_condition_stack,
    read_planes,
    save_mask_png,
    save_png,
    write_condition_stack,
    write_planes,
)
from .oracle import SceneRenderer
from .pointcloud import (
    CONSISTENCY_THRESHOLD,
    DEFAULT_DEDUP_RADIUS,
    DEFAULT_STRIDE,
    GlobalPointCloud,
    consistency_check,
    merge,
    project_pc,
)
from .raster import DEFAULT_LAYERS, ConditionStack, render_conditions
from .scene import CameraPose, SceneLayout, look_at
from .trajectory import DEDUP_ANGLE, DEDUP_DISTANCE, DEFAULT_ANGLE_CAP, DEFAULT_BAND, PoseList, ViewSetConfig, build_view_set
from .warp import WarpedCondition, render_pointcloud_view

logger = logging.getLogger(__name__)

DEFAULT_N_VIEWS = 4
INITIAL_VIEW = 0


class GeneratorFailure(RuntimeError):
    """The multi-view generator could not produce a batch; ``state`` holds progress so far."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class GeneratorRequest:
    warped_conditions: list
    condition_stacks: list
    cameras: list
    masks: dict = field(default_factory=dict)  # resolution -> list of per-query LayoutEpipolarMask

    def __post_init__(self):
        n = len(self.cameras)
        if len(self.warped_conditions) != n or len(self.condition_stacks) != n:
            raise ValueError("warped conditions, condition stacks and cameras must have equal length")

    @property
    def n_views(self) -> int:
        return len(self.cameras)


class MultiViewGenerator(Protocol):
    def generate(self, request: GeneratorRequest) -> list[np.ndarray]: ...


@dataclass
class GenerationConfig:
    n_views: int = DEFAULT_N_VIEWS
    layers: int = DEFAULT_LAYERS
    interval: float = 0.4
    per_object: int = 2
    distance_band: tuple = DEFAULT_BAND
    angle_cap: float = DEFAULT_ANGLE_CAP
    dedup_distance: float = DEDUP_DISTANCE
    dedup_angle: float = DEDUP_ANGLE
    threshold: float = CONSISTENCY_THRESHOLD
    stride: int = DEFAULT_STRIDE
    dedup_radius: float = DEFAULT_DEDUP_RADIUS
    overlap_resolution: int = 128
    mask_resolutions: tuple = ()
    dilation: int = DEFAULT_DILATION
    room_center: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("n_views must be at least 2")
        if self.layers < 2:
            raise ValueError("depth rectification needs at least 2 condition layers")
        for name in ("interval", "dedup_distance", "dedup_angle", "threshold", "angle_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.stride < 1 or self.overlap_resolution < 1:
            raise ValueError("stride and overlap_resolution must be positive")

    def view_set_config(self) -> ViewSetConfig:
        return ViewSetConfig(per_object=self.per_object, interval=self.interval, distance_band=self.distance_band,
                             angle_cap=self.angle_cap, dedup_distance=self.dedup_distance,
                             dedup_angle=self.dedup_angle, room_center=self.room_center)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distance_band"] = list(self.distance_band)
        d["mask_resolutions"] = list(self.mask_resolutions)
        return d


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent generators split from one seed (one per consumer)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class GenerationState:
    views: list                      # global view index -> CameraPose (index 0 is the initial view)
    view_trajectory: list            # global view index -> trajectory id (-1 for the initial view)
    queues: dict                     # trajectory id -> ungenerated global indices, in order
    pc: GlobalPointCloud
    seed: int = 0
    gen_idx: list = field(default_factory=list)
    gen_img: list = field(default_factory=list)
    log: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    pc_sizes: list = field(default_factory=list)

    def record(self, index: int, image: np.ndarray) -> None:
        if index in self.gen_idx:
            raise ValueError(f"view {index} generated twice")
        self.gen_idx.append(index)
        self.gen_img.append(image)

    def acceptance_rate(self, exclude_initial: bool = True) -> float:
        rows = [r for r in self.log if not (exclude_initial and r["view"] == INITIAL_VIEW)]
        return float(np.mean([r["accepted"] for r in rows])) if rows else 1.0

    def finished(self) -> bool:
        return all(not q for q in self.queues.values())


def view_set_state(view_set: Sequence[PoseList], initial_cam: CameraPose, pc: GlobalPointCloud, seed: int = 0):
    views = [initial_cam]
    owner = [-1]
    queues = {}
    for pl in sorted(view_set, key=lambda p: p.trajectory_id):
        idx = []
        for cam in pl.poses:
            idx.append(len(views))
            views.append(cam)
            owner.append(pl.trajectory_id)
        queues[pl.trajectory_id] = idx
    return GenerationState(views, owner, queues, pc, seed)


def overlap_ratio(pc: GlobalPointCloud, cam: CameraPose, resolution: int = 128) -> float:
    """Fraction of a low-resolution render of the cloud that is covered."""
    if len(pc) == 0:
        return 0.0
    return render_pointcloud_view(pc, cam.scaled(resolution, resolution), adaptive=True).coverage


def select_views(state: GenerationState, n_views: int = DEFAULT_N_VIEWS, resolution: int = 128):
    """Next batch of global view indices, or None when generation is done.

    The trajectory whose first ungenerated view overlaps the cloud most wins
    (ties to the lower trajectory id); its next `n_views` views are taken,
    padding with the last one when the trajectory runs out.
    """
    candidates = [(tid, q[0]) for tid, q in sorted(state.queues.items()) if q]
    if not candidates:
        return None
    overlaps = [overlap_ratio(state.pc, state.views[k], resolution) for _, k in candidates]
    if len(state.pc) and max(overlaps) == 0.0:
        return None
    best = int(np.argmax(overlaps))  # first maximum = lowest trajectory id
    tid = candidates[best][0]
    picked = state.queues[tid][:n_views]
    picked = picked + [picked[-1]] * (n_views - len(picked))
    logger.info("selected trajectory %d views %s (overlap %.3f)", tid, picked, overlaps[best],
                extra={"record": {"step": "select", "trajectory": tid, "views": picked,
                                  "overlap": overlaps[best]}})
    return picked


def _consume(state: GenerationState, picked: list) -> None:
    for k in dict.fromkeys(picked):
        q = state.queues[state.view_trajectory[k]]
        if k in q:
            q.remove(k)


def _quantized_warp(pc: GlobalPointCloud, cam: CameraPose) -> WarpedCondition:
    w = render_pointcloud_view(pc, cam, adaptive=True)
    # generators see 8-bit images and float32 depth, which keeps the exchange files lossless
    return WarpedCondition(np.round(w.image), w.mask, w.depth.astype(np.float32).astype(np.float64))


def build_request(layout: SceneLayout, state: GenerationState, picked: list, config: GenerationConfig) -> GeneratorRequest:
    cams = [state.views[k] for k in picked]
    warped = [_quantized_warp(state.pc, c) for c in cams]
    stacks = [render_conditions(layout, c, config.layers) for c in cams]
    masks = {}
    for res in config.mask_resolutions:
        masks[int(res)] = [compute_la_mask(layout, cams, i, (res, res), config.dilation) for i in range(len(cams))]
    return GeneratorRequest(warped, stacks, cams, masks)


def _initial_cloud(layout, image, cam, stack, estimator, config) -> tuple[GlobalPointCloud, dict]:
    pred = estimator.estimate(image, cam)
    rect, params = rectify_depth(pred, stack, return_params=True)
    pc = merge(GlobalPointCloud.for_layout(layout), project_pc(image, rect, cam, config.stride, INITIAL_VIEW),
               config.dedup_radius)
    return pc, {"view": INITIAL_VIEW, "trajectory": -1, "batch": -1, "score": 0.0, "accepted": True,
                "coverage": 0.0, "scale": params.scale, "offset": params.offset, "points": len(pc)}


def run_generation(layout: SceneLayout, initial_image: np.ndarray, initial_cam: CameraPose,
                   generator: MultiViewGenerator, depth_estimator: DepthEstimator,
                   config: Optional[GenerationConfig] = None, view_set: Optional[list] = None,
                   writer: Optional["ArtifactWriter"] = None) -> GenerationState:
    """Generate every view of the view set batch by batch, growing the global cloud with consistent views."""
    config = config or GenerationConfig()
    traj_rng, = spawn_rngs(config.seed, 1)
    if view_set is None:
        view_set, warnings = build_view_set(layout, initial_cam, traj_rng, config.view_set_config(), config.seed)
    else:
        warnings = []
    stack0 = render_conditions(layout, initial_cam, config.layers)
    pc, rec0 = _initial_cloud(layout, initial_image, initial_cam, stack0, depth_estimator, config)
    state = view_set_state(view_set, initial_cam, pc, config.seed)
    state.warnings.extend(warnings)
    state.record(INITIAL_VIEW, initial_image)
    state.log.append(rec0)
    state.pc_sizes.append(len(pc))
    if writer is not None:
        writer.view(INITIAL_VIEW, initial_image, stack0)

    batch = 0
    while True:
        picked = select_views(state, config.n_views, config.overlap_resolution)
        if picked is None:
            break
        req = build_request(layout, state, picked, config)
        try:
            images = generator.generate(req)
        except GeneratorFailure as exc:
            exc.state = state
            raise
        except Exception as exc:
            raise GeneratorFailure(f"generator raised {type(exc).__name__}: {exc}", state) from exc
        if len(images) != len(picked):
            raise GeneratorFailure(f"generator returned {len(images)} images for {len(picked)} views", state)
        _consume(state, picked)
        if writer is not None:
            writer.batch(batch, picked, req)
        state.batches.append(list(picked))
        for i, k in enumerate(picked):
            if k in state.gen_idx:
                continue  # padding repeat
            cam = req.cameras[i]
            image = np.asarray(images[i])
            if image.shape[:2] != (cam.height, cam.width):
                raise GeneratorFailure(f"view {k}: image shape {image.shape} != {(cam.height, cam.width)}", state)
            state.record(k, image)
            pred = depth_estimator.estimate(image, cam)
            rect, params = rectify_depth(pred, req.condition_stacks[i], return_params=True)
            rendered = render_pointcloud_view(state.pc, cam, adaptive=True)
            score, ok = consistency_check(rect, rendered.depth, rendered.mask, config.threshold)
            if ok:
                state.pc = merge(state.pc, project_pc(image, rect, cam, config.stride, k), config.dedup_radius)
            rec = {"view": k, "trajectory": state.view_trajectory[k], "batch": batch, "score": score,
                   "accepted": bool(ok), "coverage": rendered.coverage, "scale": params.scale,
                   "offset": params.offset, "points": len(state.pc)}
            state.log.append(rec)
            state.pc_sizes.append(len(state.pc))
            logger.info("view %d %s (score %.4f m)", k, "accepted" if ok else "rejected", score,
                        extra={"record": {"step": "gate", **rec}})
            if writer is not None:
                writer.view(k, image, req.condition_stacks[i])
        batch += 1
    return state


# ------------------------------------------------------------------ generators


class OracleGenerator:
    """Renders the true scene at each requested camera."""

    def __init__(self, renderer: SceneRenderer):
        self.renderer = renderer

    def generate(self, request: GeneratorRequest) -> list[np.ndarray]:
        return [self.renderer.render(cam)[0] for cam in request.cameras]


class CopyGenerator:
    """Returns the warped conditions with holes filled from the nearest covered pixel."""

    def generate(self, request: GeneratorRequest) -> list[np.ndarray]:
        out = []
        for w in request.warped_conditions:
            img = w.image_u8()
            if not w.mask.any():
                out.append(img)
                continue
            _, (ri, ci) = distance_transform_edt(~w.mask, return_indices=True)
            out.append(img[ri, ci])
        return out


class AdversarialGenerator:
    """Ignores the request and returns one fixed image for every view."""

    def __init__(self, image: np.ndarray):
        self.image = np.asarray(image)

    def generate(self, request: GeneratorRequest) -> list[np.ndarray]:
        return [self.image.copy() for _ in request.cameras]


def write_request(request: GeneratorRequest, directory) -> None:
    """Serialize a request into the exchange directory layout."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "cameras.json").write_text(json.dumps([c.to_dict() for c in request.cameras], indent=1))
    for i, (w, s) in enumerate(zip(request.warped_conditions, request.condition_stacks)):
        write_condition_stack(d / f"cond_{i}.mvrc", s)
        save_png(d / f"warped_{i}.png", w.image_u8())
        save_mask_png(d / f"mask_{i}.png", w.mask)
        write_planes(d / f"warped_depth_{i}.mvrc", w.depth[..., None])
    for res, masks in request.masks.items():
        for i, m in enumerate(masks):
            m.save(d / f"epimask_{i}_{res}.mvrm")


def read_request(directory) -> GeneratorRequest:
    d = Path(directory)
    cams = [CameraPose.from_dict(c) for c in json.loads((d / "cameras.json").read_text())]
    warped, stacks = [], []
    for i in range(len(cams)):
        stacks.append(read_condition_stack(d / f"cond_{i}.mvrc"))
        image = load_png(d / f"warped_{i}.png").astype(np.float64)
        mask = load_png(d / f"mask_{i}.png") > 0
        depth = read_planes(d / f"warped_depth_{i}.mvrc")[..., 0].astype(np.float64)
        warped.append(WarpedCondition(image, mask, depth))
    masks: dict = {}
    for p in sorted(d.glob("epimask_*_*.mvrm")):
        _, i, res = p.stem.split("_")
        masks.setdefault(int(res), {})[int(i)] = LayoutEpipolarMask.load(p)
    masks = {r: [v[i] for i in sorted(v)] for r, v in masks.items()}
    return GeneratorRequest(warped, stacks, cams, masks)


class ExternalGenerator:
    """Runs an external program as ``<command> <request_dir> <response_dir>`` and reads ``gen_{i}.png``."""

    def __init__(self, command, workdir, timeout: Optional[float] = None):
        self.command = [command] if isinstance(command, (str, Path)) else list(command)
        self.workdir = Path(workdir)
        self.timeout = timeout
        self.calls = 0

    def generate(self, request: GeneratorRequest) -> list[np.ndarray]:
        req_dir = self.workdir / f"request_{self.calls:04d}"
        resp_dir = self.workdir / f"response_{self.calls:04d}"
        self.calls += 1
        write_request(request, req_dir)
        resp_dir.mkdir(parents=True, exist_ok=True)
        try:
            proc = subprocess.run([*map(str, self.command), str(req_dir), str(resp_dir)],
                                  capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise GeneratorFailure(f"external generator failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise GeneratorFailure(f"external generator exited {proc.returncode}: {proc.stderr.strip()[:500]}")
        out = []
        for i in range(request.n_views):
            p = resp_dir / f"gen_{i}.png"
            if not p.exists():
                raise GeneratorFailure(f"external generator produced no {p.name}")
            out.append(load_png(p)[..., :3])
        return out


# ------------------------------------------------------------------ outputs


def _psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(255.0 ** 2 / mse)


def holdout_cameras(state: GenerationState) -> list[CameraPose]:
    """Poses halfway between consecutive views of each trajectory (none of them generated)."""
    out = []
    for tid in sorted(set(state.view_trajectory) - {-1}):
        idx = [k for k, t in enumerate(state.view_trajectory) if t == tid]
        for a, b in zip(idx, idx[1:]):
            ca, cb = state.views[a], state.views[b]
            pos = 0.5 * (ca.position + cb.position)
            fwd = ca.forward + cb.forward
            out.append(look_at(pos, pos + fwd, fx=ca.fx, fy=ca.fy, cx=ca.cx, cy=ca.cy,
                               width=ca.width, height=ca.height))
    return out


def evaluate_holdout(pc: GlobalPointCloud, renderer: SceneRenderer, cams: Sequence[CameraPose]) -> list[dict]:
    """PSNR on covered pixels and coverage of cloud re-renders against true renders."""
    rows = []
    for cam in cams:
        truth, _ = renderer.render(cam, register=False)
        w = render_pointcloud_view(pc, cam, adaptive=True)
        m = w.mask
        psnr = _psnr(w.image_u8()[m], truth[m]) if m.any() else float("nan")
        rows.append({"psnr": psnr, "coverage": w.coverage})
    return rows


class ArtifactWriter:
    """Writes per-view images and conditions, per-batch masks, and the final manifest/PLY."""

    def __init__(self, out_dir, mask_query_views: str = "first"):
        self.out = Path(out_dir)
        self.mask_query_views = mask_query_views
        self.files: list[str] = []
        for sub in ("views", "conditions", "masks"):
            (self.out / sub).mkdir(parents=True, exist_ok=True)

    def _add(self, path: Path) -> None:
        self.files.append(str(path.relative_to(self.out)))

    def view(self, k: int, image: np.ndarray, stack: ConditionStack) -> None:
        p = self.out / "views" / f"view_{k:04d}.png"
        save_png(p, image)
        self._add(p)
        c = self.out / "conditions" / f"cond_{k:04d}.mvrc"
        write_condition_stack(c, stack)
        self._add(c)

    def batch(self, b: int, picked: list, req: GeneratorRequest) -> None:
        for res, masks in sorted(req.masks.items()):
            chosen = masks[:1] if self.mask_query_views == "first" else masks
            for i, m in enumerate(chosen):
                p = self.out / "masks" / f"batch_{b:03d}_q{i}_{res}.mvrm"
                m.save(p)
                self._add(p)

    def finish(self, state: GenerationState, config: GenerationConfig, extra: Optional[dict] = None,
               timestamp: Optional[str] = None) -> Path:
        ply = self.out / "pointcloud.ply"
        state.pc.to_ply(ply)
        self._add(ply)
        manifest = build_manifest(state, config, self.files, extra)
        manifest["created"] = timestamp
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return path


def build_manifest(state: GenerationState, config: GenerationConfig, files: list, extra: Optional[dict] = None) -> dict:
    poses = []
    for k, cam in enumerate(state.views):
        rec = cam.to_dict()
        rec.update({"index": k, "trajectory_id": state.view_trajectory[k]})
        poses.append(rec)
    out = {
        "config": config.to_dict(),
        "seed": state.seed,
        "views": poses,
        "gen_idx": list(state.gen_idx),
        "batches": state.batches,
        "log": state.log,
        "warnings": state.warnings,
        "acceptance_rate": state.acceptance_rate(),
        "points": len(state.pc),
        "files": sorted(files),
    }
    if extra:
        out.update(extra)
    return out
