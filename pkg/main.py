"""Command-line front end: mask -> attention -> sfm -> train -> eval, plus render, bench, synth and compare.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""
import argparse
import glob
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import load_settings, setup_logging
from errors import PipelineError, ValidationError
from gaussians import GaussianCloud, RenderSettings, init_from_cloud, rasterize
from imaging import (DEFAULT_SALIENCY_THRESHOLD, BinaryMask, Raster, attention_mask, composite_white, load_attention,
                     load_image, load_mask, save_attention, save_image, save_mask, saliency_fallback_mask,
                     threshold_saliency)
from metrics import EvalReport, evaluate, format_table, fps_benchmark, write_report_csv
from scene_io import (Scene, SceneManifest, SyntheticSpec, ViewRecord, generate_synthetic, is_splat_ply,
                      load_camera, load_point_cloud, load_scene, load_splats, save_cameras, save_manifest,
                      save_point_cloud, save_splats, write_json)
from sfm import SfmConfig, filter_background_points, incremental_reconstruct, reprojection_errors
from training import ATTENTION_SOURCES, TrainConfig, TrainingView, train, view_attention, write_loss_csv

logger = logging.getLogger("main")

IMAGE_PATTERNS = ("*.png", "*.ppm", "*.pgm")
COMPARE_ROWS = (("Original/3DGS", False, False), ("Original/Ours", False, True),
                ("No BG/3DGS", True, False), ("No BG/Ours", True, True))


# ========== HELPERS ==========

def list_images(folder: str) -> List[str]:
    if not os.path.isdir(folder):
        raise ValidationError(f"input directory {folder} does not exist")
    paths = sorted({p for pattern in IMAGE_PATTERNS for p in glob.glob(os.path.join(folder, pattern))})
    if not paths:
        raise ValidationError(f"no input images in {folder}")
    return paths


def stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def find_by_stem(folder: str, name: str) -> Optional[str]:
    for pattern in ("*.npy",) + IMAGE_PATTERNS:
        for p in sorted(glob.glob(os.path.join(folder, pattern))):
            if stem(p) == name:
                return p
    return None


def view_masks(scene: Scene) -> List[BinaryMask]:
    """Manifest masks, falling back to thresholded saliency where a view has none"""
    masks = []
    for v in scene.views:
        if v.mask is None:
            logger.info("view %s has no mask, using saliency fallback", v.record.name, extra={"stage": "mask"})
            masks.append(saliency_fallback_mask(v.image))
        else:
            masks.append(v.mask)
    return masks


def load_init(path: str) -> GaussianCloud:
    if is_splat_ply(path):
        return load_splats(path)
    return init_from_cloud(load_point_cloud(path))


def render_settings(scene: Scene, threads: int) -> RenderSettings:
    return RenderSettings(scene.intrinsics.width, scene.intrinsics.height, threads=threads)


def training_views(scene: Scene, composite: bool = False) -> List[TrainingView]:
    views = scene.split("train") or scene.views
    out = []
    for v in views:
        image = composite_white(v.image, v.mask) if composite and v.mask is not None else v.image
        out.append(TrainingView(image, v.camera, v.mask, v.attention))
    return out


def eval_views(scene: Scene, composite: bool = False) -> List[TrainingView]:
    views = scene.split("eval") or scene.views
    return [TrainingView(composite_white(v.image, v.mask) if composite and v.mask is not None else v.image,
                         v.camera, v.mask, v.attention) for v in views]


def _scene_with_cameras(path: str) -> Scene:
    scene = load_scene(path)
    scene.require_cameras()
    return scene


# ========== SUBCOMMANDS ==========

def cmd_mask(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for path in list_images(args.in_dir):
        img = load_image(path)
        name = stem(path)
        saliency = find_by_stem(args.saliency_dir, name) if args.saliency_dir else None
        if saliency is not None:
            mask = threshold_saliency(load_attention(saliency), args.threshold)
            logger.info("%s: thresholding supplied saliency %s", name, saliency, extra={"stage": "mask"})
        else:
            mask = saliency_fallback_mask(img, args.threshold)
            logger.info("%s: saliency fallback", name, extra={"stage": "mask"})
        save_mask(mask, os.path.join(args.out, name + "_mask.pgm"))
        rgb = img if img.channels == 3 else Raster(np.repeat(img.data, 3, axis=2))
        save_image(composite_white(rgb, mask), os.path.join(args.out, name + "_white.png"))
    return 0


def cmd_attention(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for path in list_images(args.in_dir):
        img = load_image(path)
        if img.channels == 1:
            img = Raster(np.repeat(img.data, 3, axis=2))
        name = stem(path)
        mask_path = None
        if args.mask_dir:
            mask_path = find_by_stem(args.mask_dir, name) or find_by_stem(args.mask_dir, name + "_mask")
        if mask_path is not None and args.attention_source == "composited":
            img = composite_white(img, load_mask(mask_path))
        save_attention(attention_mask(img, enhance=args.enhance), os.path.join(args.out, name))
        logger.info("%s: attention written", name, extra={"stage": "attention"})
    return 0


def cmd_sfm(args) -> int:
    scene = load_scene(args.scene)
    if len(scene.views) < 2:
        raise ValidationError(f"structure from motion needs at least 2 views, got {len(scene.views)}")
    os.makedirs(args.out, exist_ok=True)
    cfg = SfmConfig(seed=args.seed, threads=args.threads, mask_support=args.mask_support, mask_views=args.mask_views,
                    descriptor_source=args.descriptor_source)
    images = [v.image for v in scene.views]
    masks = view_masks(scene) if not args.no_mask else [None] * len(images)
    recon = incremental_reconstruct(images, masks, scene.intrinsics, cfg)
    cloud = recon.cloud
    if not args.no_mask:
        cloud = filter_background_points(cloud, recon.cameras, masks, cfg.mask_support,
                                         all_views=cfg.mask_views == "registered")
    errs = reprojection_errors(cloud, recon.cameras, recon.features)

    save_point_cloud(cloud.points, cloud.colors, os.path.join(args.out, "sparse.ply"))
    names = [v.record.name for v in scene.views]
    registered = {n: c for n, c in zip(names, recon.cameras) if c is not None}
    save_cameras(registered, scene.intrinsics, os.path.join(args.out, "cameras.json"))

    def rel(p):
        return os.path.relpath(scene.manifest.resolve(p), args.out) if p else None

    records = []
    for v, cam in zip(scene.views, recon.cameras):
        if cam is None:
            continue
        records.append(ViewRecord(v.record.name, rel(v.record.image), rel(v.record.mask), rel(v.record.attention),
                                  cam, v.record.split))
    save_manifest(SceneManifest(scene.intrinsics, records), os.path.join(args.out, "scene.json"))
    summary = {
        "points": len(cloud),
        "observations": int(len(errs)),
        "mean_error": float(np.mean(errs)) if len(errs) else None,
        "median_error": float(np.median(errs)) if len(errs) else None,
        "max_error": float(np.max(errs)) if len(errs) else None,
        "registered": sorted(registered),
        "skipped": [{"view": names[s["view"]], "reason": s["reason"]} for s in recon.skipped],
        "initial_pair": [names[i] for i in recon.initial_pair],
        "masked": not args.no_mask,
    }
    write_json(summary, os.path.join(args.out, "summary.json"))
    logger.info("sfm: %d points, mean reprojection error %s px", len(cloud),
                f"{summary['mean_error']:.4f}" if summary["mean_error"] is not None else "n/a", extra={"stage": "sfm"})
    return 0


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig(seed=args.seed)
    if args.no_attention:
        cfg = replace(cfg, attention_enabled=False)
    if args.attention_source:
        cfg = replace(cfg, attention_source=args.attention_source)
    return cfg


def cmd_train(args) -> int:
    init = load_init(args.init)
    scene = _scene_with_cameras(args.scene)
    cfg = _train_config(args)
    os.makedirs(args.out, exist_ok=True)
    settings = render_settings(scene, args.threads)
    start = time.perf_counter()
    cloud, reports = train(training_views(scene), init, cfg, settings)
    elapsed = time.perf_counter() - start
    save_splats(cloud, os.path.join(args.out, "splats.ply"))
    write_loss_csv(reports, os.path.join(args.out, "loss.csv"))
    final_l1 = reports[-1].plain_l1 if reports else None
    write_json({
        "config": asdict(cfg),
        "attention_enabled": cfg.attention_enabled,
        "attention_source": cfg.attention_source,
        "seed": cfg.seed,
        "train_time": elapsed,
        "initial_splats": len(init),
        "final_splats": len(cloud),
        "final_l1": final_l1,
    }, os.path.join(args.out, "run.json"))
    logger.info("trained %d iterations in %.1f s, final l1 %s", cfg.iterations, elapsed,
                f"{final_l1:.6f}" if final_l1 is not None else "n/a", extra={"stage": "train"})
    return 0


def cmd_render(args) -> int:
    cloud = load_splats(args.splats)
    cam, intr = load_camera(args.camera, args.view)
    image = rasterize(cloud, cam, RenderSettings(intr.width, intr.height, threads=args.threads))
    save_image(image, args.out)
    return 0


def _train_time(run_path: Optional[str]) -> float:
    if not run_path:
        return 0.0
    try:
        with open(run_path, "r", encoding="utf-8") as f:
            return float(json.load(f)["train_time"])
    except (OSError, ValueError, KeyError) as e:
        raise ValidationError(f"cannot read training time from {run_path}: {e}") from e


def _evaluate(cloud: GaussianCloud, views: Sequence[TrainingView], cfg: TrainConfig, settings: RenderSettings,
              train_time: float, frames: int) -> EvalReport:
    attn = view_attention(views, cfg)
    return evaluate(cloud, [v.camera for v in views], [v.image for v in views], attn, settings,
                    cfg.ssim_weight, train_time, frames)


def cmd_eval(args) -> int:
    cloud = load_splats(args.splats)
    scene = _scene_with_cameras(args.scene)
    report = _evaluate(cloud, eval_views(scene), TrainConfig(), render_settings(scene, args.threads),
                       _train_time(args.run), args.frames)
    reports = {args.label: report}
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_report_csv(reports, args.out)
    print(format_table(reports))
    return 0


def cmd_bench(args) -> int:
    cloud = load_splats(args.splats)
    scene = _scene_with_cameras(args.scene)
    fps = fps_benchmark(cloud, [v.camera for v in scene.views], render_settings(scene, args.threads), args.frames)
    print(f"{fps:.3f}")
    logger.info("%d splats: %.3f fps over %d frames", len(cloud), fps, args.frames, extra={"stage": "bench"})
    return 0


def cmd_synth(args) -> int:
    generate_synthetic(SyntheticSpec.from_json(args.spec), args.out)
    return 0


def cmd_compare(args) -> int:
    """Train and evaluate the 2x2 grid {background kept, whitened} x {attention off, on}"""
    init = load_init(args.init)
    scene = _scene_with_cameras(args.scene)
    base_cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig(seed=args.seed)
    settings = render_settings(scene, args.threads)
    if any(v.mask is None for v in scene.views):
        masks = view_masks(scene)
        for v, m in zip(scene.views, masks):
            v.mask = m
    reports: Dict[str, EvalReport] = {}
    for label, no_bg, attention in COMPARE_ROWS:
        cfg = replace(base_cfg, attention_enabled=attention)
        start = time.perf_counter()
        cloud, losses = train(training_views(scene, composite=no_bg), init, cfg, settings)
        elapsed = time.perf_counter() - start
        slug = label.replace("/", "_").replace(" ", "").lower()
        os.makedirs(os.path.join(args.out, slug), exist_ok=True)
        save_splats(cloud, os.path.join(args.out, slug, "splats.ply"))
        write_loss_csv(losses, os.path.join(args.out, slug, "loss.csv"))
        reports[label] = _evaluate(cloud, eval_views(scene, composite=no_bg), cfg, settings, elapsed, args.frames)
    write_report_csv(reports, os.path.join(args.out, "comparison.csv"))
    print(format_table(reports))
    return 0


# ========== ENTRY POINT ==========

def build_parser() -> argparse.ArgumentParser:
    settings = load_settings()
    parser = argparse.ArgumentParser(prog="masksplat", description="Masked-attention Gaussian splatting pipeline")
    parser.add_argument("--threads", type=int, default=settings.threads, help="worker threads (default: all cores)")
    parser.add_argument("--seed", type=int, default=settings.seed)
    parser.add_argument("--log-level", default=None, help="overrides MASKSPLAT_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="binary object masks and white composites")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_SALIENCY_THRESHOLD)
    p.add_argument("--saliency-dir", default=None)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("attention", help="Sobel attention maps")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-dir", default=None)
    p.add_argument("--attention-source", choices=("composited", "original"), default="composited")
    p.add_argument("--enhance", type=float, default=0.0)
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("sfm", help="masked structure from motion")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-mask", action="store_true")
    p.add_argument("--mask-support", type=float, default=1.0)
    p.add_argument("--mask-views", choices=("observing", "registered"), default="registered")
    p.add_argument("--descriptor-source", choices=("original", "masked"), default="original")
    p.set_defaults(func=cmd_sfm)

    p = sub.add_parser("train", help="attention-weighted splat training")
    p.add_argument("--scene", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--attention-source", choices=ATTENTION_SOURCES, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one view")
    p.add_argument("--splats", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--view", help="camera name or index when --camera is a cameras.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluation report row")
    p.add_argument("--splats", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--run", default=None, help="run.json to take the training time from")
    p.add_argument("--label", default="model")
    p.add_argument("--frames", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="rendering throughput")
    p.add_argument("--splats", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--frames", type=int, default=30)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="materialize a synthetic scene")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compare", help="2x2 background/attention comparison")
    p.add_argument("--scene", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=10)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    if args.threads < 1:
        logger.error("--threads must be >= 1", extra={"stage": args.command})
        return 1
    try:
        return args.func(args)
    except ValidationError as e:
        logger.error("%s", e, extra={"stage": args.command})
        return 1
    except PipelineError as e:
        logger.error("%s", e, extra={"stage": e.stage})
        return 2
    except Exception as e:
        logger.exception("unexpected failure: %s", e, extra={"stage": args.command})
        return 2


if __name__ == "__main__":
    sys.exit(main())
