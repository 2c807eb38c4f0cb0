"""Command-line entry point: ``layoutmv <command> [--flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import fixtures
from .depth import DepthMap, rectify_depth
from .epipolar import compute_la_mask, compute_plain_mask
from .formats import (
    FormatError,
    colorize_labels,
    load_png,
    normalize_depth_preview,
    read_planes,
    save_mask_png,
    save_png,
    write_condition_stack,
    write_planes,
)
from .oracle import OracleDepthEstimator, SceneRenderer
from .orchestrator import (
    AdversarialGenerator,
    ArtifactWriter,
    CopyGenerator,
    ExternalGenerator,
    GenerationConfig,
    GeneratorFailure,
    OracleGenerator,
    run_generation,
    spawn_rngs,
)
from .pointcloud import GlobalPointCloud
from .raster import render_conditions
from .scene import CameraPose, SceneError, SceneLayout
from .trajectory import ViewSetConfig, build_view_set
from .warp import render_pointcloud_view, warp_image

logger = logging.getLogger("layoutmv")

EXIT_OK, EXIT_INTERNAL, EXIT_BAD_INPUT = 0, 1, 2


class BadInput(Exception):
    """User-supplied files or flags are unusable."""


@dataclass
class RunConfig:
    scene: Path
    out: Path
    seed: int = 0
    n_views: int = 4
    layers: int = 3
    resolution: int = 512
    interval: float = 0.4
    dedup_distance: float = 0.4
    dedup_angle: float = 4.0
    threshold: float = 0.02
    mask_resolutions: tuple = (32, 64)
    dilation: int = 1
    stride: int = 2
    room_center: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_views < 2 or self.layers < 1 or self.resolution < 8:
            raise BadInput("need n-views >= 2, layers >= 1 and resolution >= 8")
        for name in ("interval", "dedup_distance", "dedup_angle", "threshold"):
            if not getattr(self, name) > 0:
                raise BadInput(f"--{name.replace('_', '-')} must be positive")

    def generation_config(self) -> GenerationConfig:
        return GenerationConfig(n_views=self.n_views, layers=max(self.layers, 2), interval=self.interval,
                                dedup_distance=self.dedup_distance, dedup_angle=self.dedup_angle,
                                threshold=self.threshold, stride=self.stride,
                                mask_resolutions=tuple(self.mask_resolutions), dilation=self.dilation,
                                room_center=self.room_center, seed=self.seed)


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"level": record.levelname, "logger": record.name, "message": record.getMessage()}
        extra = getattr(record, "record", None)
        if isinstance(extra, dict):
            out.update(extra)
        return json.dumps(out, default=float)


def _setup_logging(json_logs: bool, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("layoutmv")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if (json_logs or verbose) else logging.WARNING)
    root.propagate = False


def _emit(step: str, **fields) -> None:
    logger.info(step, extra={"record": {"step": step, **fields}})


# ------------------------------------------------------------------ loaders


def _load_scene(path) -> SceneLayout:
    p = Path(path)
    if not p.is_file():
        raise BadInput(f"scene file not found: {p}")
    try:
        return SceneLayout.from_json(p)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise BadInput(f"{p}: invalid scene JSON ({exc})") from exc


def _load_cameras(path) -> list[CameraPose]:
    p = Path(path)
    if not p.is_file():
        raise BadInput(f"camera file not found: {p}")
    try:
        data = json.loads(p.read_text())
        items = data if isinstance(data, list) else [data]
        return [CameraPose.from_dict(d) for d in items]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise BadInput(f"{p}: invalid camera JSON ({exc})") from exc


def _load_camera(path) -> CameraPose:
    cams = _load_cameras(path)
    if len(cams) != 1:
        raise BadInput(f"{path}: expected exactly one camera, found {len(cams)}")
    return cams[0]


def _load_depth(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise BadInput(f"depth file not found: {p}")
    if p.suffix == ".npy":
        arr = np.load(p)
    else:
        arr = read_planes(p)[..., 0]
    if arr.ndim != 2:
        raise BadInput(f"{p}: depth must be 2-D, got shape {arr.shape}")
    return arr.astype(np.float64)


def _load_image(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise BadInput(f"image not found: {p}")
    img = load_png(p)
    return img[..., :3] if img.ndim == 3 else np.repeat(img[..., None], 3, axis=2)


def _write_json(path, data) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True))


# ------------------------------------------------------------------ commands


def cmd_fixture(args) -> int:
    layout = fixtures.make_fixture(args.kind, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    layout.to_json(out)
    _emit("fixture", kind=args.kind, seed=args.seed, boxes=layout.n_boxes, path=str(out))
    if args.cameras_out:
        rng = spawn_rngs(args.seed, 1)[0]
        cams = fixtures.sample_fixture_cameras(layout, rng, args.n_cameras, args.resolution, args.resolution)
        _write_json(args.cameras_out, [c.to_dict() for c in cams])
        if args.images_dir:
            renderer = SceneRenderer(layout)
            d = Path(args.images_dir)
            d.mkdir(parents=True, exist_ok=True)
            for i, cam in enumerate(cams):
                img, depth = renderer.render(cam, register=False)
                save_png(d / f"image_{i}.png", img)
                write_planes(d / f"depth_{i}.mvrc", depth.values[..., None])
    return EXIT_OK


def cmd_rasterize(args) -> int:
    layout = _load_scene(args.scene)
    cams = _load_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        stack = render_conditions(layout, cam, args.layers)
        write_condition_stack(out / f"cond_{i}.mvrc", stack)
        if args.previews:
            save_png(out / f"sem_{i}.png", colorize_labels(stack.sem[..., 0]))
            save_png(out / f"depth_{i}.png", normalize_depth_preview(stack.depth[..., 0]))
        _emit("rasterize", view=i, violations=stack.invariant_violations())
    return EXIT_OK


def cmd_align_depth(args) -> int:
    layout = _load_scene(args.scene)
    cam = _load_camera(args.camera)
    rel = _load_depth(args.depth)
    if rel.shape != (cam.height, cam.width):
        raise BadInput(f"depth shape {rel.shape} does not match camera {(cam.height, cam.width)}")
    stack = render_conditions(layout, cam, max(args.layers, 2))
    aligned, params = rectify_depth(DepthMap(rel), stack, return_params=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_planes(out, aligned.values[..., None])
    _emit("align-depth", scale=params.scale, offset=params.offset, residual=params.residual,
          samples=params.n_samples, path=str(out))
    return EXIT_OK


def cmd_warp(args) -> int:
    image = _load_image(args.image)
    depth = _load_depth(args.depth)
    src, dst = _load_camera(args.src_camera), _load_camera(args.dst_camera)
    if depth.shape != image.shape[:2] or depth.shape != (src.height, src.width):
        raise BadInput("image, depth and source camera resolutions must agree")
    w = warp_image(image, DepthMap(depth), src, dst)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "warped.png", w.image_u8())
    save_mask_png(out / "mask.png", w.mask)
    write_planes(out / "warped_depth.mvrc", w.depth[..., None])
    _emit("warp", coverage=w.coverage)
    return EXIT_OK


def _mask_overlay(cams, mask, cell, res) -> np.ndarray:
    """Query dot in the query view next to each other view's mask row, on a white canvas."""
    h, w = res
    tiles = []
    for j in range(mask.n_views):
        tile = np.full((h, w, 3), 255, np.uint8)
        if j == mask.query_view:
            tile[cell[0], cell[1]] = (220, 30, 30)
        else:
            tile[mask.row(cell, j)] = (30, 30, 220)
        tiles.append(np.kron(tile, np.ones((4, 4, 1), np.uint8)))
    return np.concatenate(tiles, axis=1)


def cmd_epimask(args) -> int:
    layout = _load_scene(args.scene)
    cams = _load_cameras(args.cameras)
    if len(cams) < 2:
        raise BadInput("epimask needs at least two cameras")
    if not 0 <= args.query_view < len(cams):
        raise BadInput(f"--query-view must be in [0, {len(cams) - 1}]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for res in args.resolution:
        r = (res, res)
        if args.plain:
            mask = compute_plain_mask(cams, args.query_view, r, args.dilation)
        else:
            mask = compute_la_mask(layout, cams, args.query_view, r, args.dilation,
                                   include_background=not args.no_background)
        mask.save(out / f"mask_q{args.query_view}_{res}.mvrm")
        for cell in args.visualize or []:
            rr, cc = (int(v) for v in cell.split(","))
            if not (0 <= rr < res and 0 <= cc < res):
                raise BadInput(f"cell {cell} outside the {res}x{res} grid")
            save_png(out / f"mask_q{args.query_view}_{res}_cell{rr}_{cc}.png", _mask_overlay(cams, mask, (rr, cc), r))
        _emit("epimask", resolution=res, density=mask.density())
    return EXIT_OK


def cmd_plan_traj(args) -> int:
    layout = _load_scene(args.scene)
    if args.initial_camera:
        p0 = _load_camera(args.initial_camera)
    else:
        p0 = fixtures.initial_camera(layout, args.resolution, args.resolution)
    rng = spawn_rngs(args.seed, 1)[0]
    cfg = ViewSetConfig(per_object=args.per_object, interval=args.interval, room_center=args.room_center)
    pose_lists, warnings = build_view_set(layout, p0, rng, cfg, args.seed)
    records = [rec for pl in pose_lists for rec in pl.to_json_records()]
    _write_json(args.out, records)
    for w in warnings:
        logger.warning("trajectory skipped: %s", w["reason"], extra={"record": {"step": "plan-traj", **w}})
    _emit("plan-traj", trajectories=len(pose_lists), poses=len(records))
    return EXIT_OK


def cmd_render_pc(args) -> int:
    if not Path(args.ply).is_file():
        raise BadInput(f"point cloud not found: {args.ply}")
    pc = GlobalPointCloud.from_ply(args.ply, radius=args.radius)
    cam = _load_camera(args.camera)
    w = render_pointcloud_view(pc, cam, point_size=args.point_size, adaptive=args.radius > 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "render.png", w.image_u8())
    save_mask_png(out / "mask.png", w.mask)
    write_planes(out / "depth.mvrc", w.depth[..., None])
    _emit("render-pc", points=len(pc), coverage=w.coverage)
    return EXIT_OK


def _make_generator(spec: str, renderer: SceneRenderer, initial_image, workdir: Path):
    if spec == "oracle":
        return OracleGenerator(renderer)
    if spec == "copy":
        return CopyGenerator()
    if spec == "adversarial":
        return AdversarialGenerator(initial_image)
    if spec.startswith("external:"):
        prog = spec.split(":", 1)[1]
        if not prog:
            raise BadInput("external generator needs a program path: external:<path>")
        return ExternalGenerator(prog, workdir)
    raise BadInput(f"unknown generator {spec!r}")


def cmd_generate(args) -> int:
    cfg = RunConfig(Path(args.scene), Path(args.out), args.seed, args.n_views, args.layers, args.resolution,
                    args.interval, args.dedup_distance, args.dedup_angle, args.threshold,
                    tuple(args.mask_res), args.dilation, args.stride, args.room_center)
    layout = _load_scene(cfg.scene)
    renderer = SceneRenderer(layout)
    if args.initial_camera:
        cam0 = _load_camera(args.initial_camera)
    else:
        cam0 = fixtures.initial_camera(layout, cfg.resolution, cfg.resolution)
    if args.initial_image:
        image0 = _load_image(args.initial_image)
        if image0.shape[:2] != (cam0.height, cam0.width):
            raise BadInput("initial image does not match the initial camera resolution")
    else:
        image0, _ = renderer.render(cam0)
    _, est_rng = spawn_rngs(cfg.seed, 2)
    estimator = OracleDepthEstimator(renderer, seed=est_rng)
    cfg.out.mkdir(parents=True, exist_ok=True)
    generator = _make_generator(args.generator, renderer, image0, cfg.out / "exchange")
    writer = ArtifactWriter(cfg.out)
    gcfg = cfg.generation_config()
    try:
        state = run_generation(layout, image0, cam0, generator, estimator, gcfg, writer=writer)
    except GeneratorFailure as exc:
        if exc.state is not None:
            writer.finish(exc.state, gcfg, {"generator": args.generator, "status": "failed", "error": str(exc)},
                          _timestamp())
        raise
    path = writer.finish(state, gcfg, {"generator": args.generator, "status": "ok",
                                       "scene": str(cfg.scene)}, _timestamp())
    _emit("generate", views=len(state.gen_idx), acceptance=state.acceptance_rate(), points=len(state.pc),
          manifest=str(path))
    return EXIT_OK


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layoutmv", description="Layout-conditioned multi-view scene generation tools.")
    p.add_argument("--json-logs", action="store_true", help="structured JSON log records on stderr")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fixture", help="write a synthetic scene layout")
    s.add_argument("--kind", choices=fixtures.FIXTURE_KINDS, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--cameras-out", help="also sample filtered cameras into this JSON file")
    s.add_argument("--n-cameras", type=int, default=4)
    s.add_argument("--resolution", type=int, default=512)
    s.add_argument("--images-dir", help="render ground-truth images/depths for the sampled cameras")
    s.set_defaults(func=cmd_fixture)

    s = sub.add_parser("rasterize", help="render condition stacks")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--layers", type=int, default=3)
    s.add_argument("--out", required=True)
    s.add_argument("--previews", action="store_true")
    s.set_defaults(func=cmd_rasterize)

    s = sub.add_parser("align-depth", help="rectify a relative depth map against the layout")
    s.add_argument("--scene", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--depth", required=True, help=".npy or single-plane .mvrc")
    s.add_argument("--layers", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_align_depth)

    s = sub.add_parser("warp", help="forward-warp an image into another camera")
    s.add_argument("--image", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--src-camera", required=True)
    s.add_argument("--dst-camera", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("epimask", help="layout-aware epipolar attention masks")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--query-view", type=int, default=0)
    s.add_argument("--resolution", type=int, nargs="+", default=[32, 64])
    s.add_argument("--dilation", type=int, default=1)
    s.add_argument("--plain", action="store_true", help="unconstrained epipolar mask")
    s.add_argument("--no-background", action="store_true", help="boxes only")
    s.add_argument("--visualize", nargs="*", metavar="ROW,COL", help="write overlay PNGs for these query cells")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_epimask)

    s = sub.add_parser("plan-traj", help="object-focused trajectories and the deduplicated view set")
    s.add_argument("--scene", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--interval", type=float, default=0.4)
    s.add_argument("--per-object", type=int, default=2)
    s.add_argument("--initial-camera")
    s.add_argument("--resolution", type=int, default=512)
    s.add_argument("--room-center", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plan_traj)

    s = sub.add_parser("render-pc", help="render a PLY point cloud into a camera")
    s.add_argument("--ply", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--point-size", type=float, default=1.0)
    s.add_argument("--radius", type=float, default=0.0, help="world splat radius; 0 = fixed point size")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render_pc)

    s = sub.add_parser("generate", help="recursive generation over the planned view set")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--generator", default="oracle", help="oracle | copy | adversarial | external:<path>")
    s.add_argument("--n-views", type=int, default=4)
    s.add_argument("--layers", type=int, default=3)
    s.add_argument("--resolution", type=int, default=512)
    s.add_argument("--interval", type=float, default=0.4)
    s.add_argument("--dedup-distance", type=float, default=0.4)
    s.add_argument("--dedup-angle", type=float, default=4.0)
    s.add_argument("--threshold", type=float, default=0.02)
    s.add_argument("--mask-res", type=int, nargs="*", default=[32, 64])
    s.add_argument("--dilation", type=int, default=1)
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--room-center", action="store_true")
    s.add_argument("--initial-camera")
    s.add_argument("--initial-image")
    s.set_defaults(func=cmd_generate)
    return p


def _report(args, message: str, code: int) -> None:
    if args.json_logs:
        logger.error(message, extra={"record": {"step": args.command, "error": message, "exit": code}})
    else:
        print(f"layoutmv: {message}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_INPUT
    _setup_logging(args.json_logs, args.verbose)
    try:
        return args.func(args)
    except (BadInput, SceneError, FormatError) as exc:
        _report(args, f"error: {exc}", EXIT_BAD_INPUT)
        return EXIT_BAD_INPUT
    except Exception as exc:  # noqa: BLE001 - top-level exit code mapping
        _report(args, f"internal error: {type(exc).__name__}: {exc}", EXIT_INTERNAL)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
