"""Image-quality and throughput metrics, and the evaluation report tables."""
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from camera import Camera
from errors import ValidationError
from gaussians import GaussianCloud, RenderSettings, rasterize
from imaging import Raster
from losses import combined_loss, ssim
from scene_io import splats_to_bytes

logger = logging.getLogger(__name__)

PSNR_SENTINEL = math.inf

TABLE_COLUMNS = ["SSIM", "PSNR", "L1", "Loss", "FPS", "Time", "Size(MB)"]


@dataclass
class EvalReport:
    ssim: float
    psnr: float
    l1: float
    loss: float
    fps: float
    train_time: float
    size_bytes: int

    def row(self) -> Dict[str, float]:
        return {
            "SSIM": self.ssim, "PSNR": self.psnr, "L1": self.l1, "Loss": self.loss,
            "FPS": self.fps, "Time": self.train_time, "Size(MB)": self.size_bytes / 1e6,
        }


def _check_pair(a: Raster, b: Raster) -> None:
    if a.width != b.width or a.height != b.height or a.channels != b.channels:
        raise ValidationError(
            f"images differ in shape: {a.width}x{a.height}x{a.channels} vs {b.width}x{b.height}x{b.channels}"
        )


# ========== PIXEL METRICS ==========

def l1_metric(a: Raster, b: Raster) -> float:
    _check_pair(a, b)
    return float(np.mean(np.abs(a.data - b.data)))


def psnr(a: Raster, b: Raster) -> float:
    """10 log10(1 / MSE); identical images give math.inf"""
    _check_pair(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(1.0 / mse)


# ========== MODEL METRICS ==========

def fps_benchmark(cloud: GaussianCloud, cameras: Sequence[Camera], settings: RenderSettings, frames: int = 10) -> float:
    """Frames per second of forward rendering; one warm-up frame is excluded"""
    if frames < 1:
        raise ValidationError(f"frames must be >= 1, got {frames}")
    if not cameras:
        raise ValidationError("fps benchmark needs at least one camera")
    rasterize(cloud, cameras[0], settings)
    start = time.perf_counter()
    for i in range(frames):
        rasterize(cloud, cameras[i % len(cameras)], settings)
    elapsed = time.perf_counter() - start
    return frames / max(elapsed, 1e-9)


def model_size(cloud: GaussianCloud) -> int:
    """Byte length of the cloud serialized as a splat PLY"""
    return len(splats_to_bytes(cloud))


def evaluate(cloud: GaussianCloud, cameras: Sequence[Camera], targets: Sequence[Raster],
             attn_masks: Sequence[Optional[Raster]], settings: RenderSettings, ssim_weight: float = 0.2,
             train_time: float = 0.0, fps_frames: int = 10) -> EvalReport:
    """Per-view SSIM/PSNR/L1/Loss averaged over views, plus FPS, size and training time"""
    if len(cameras) != len(targets) or len(cameras) != len(attn_masks):
        raise ValidationError(f"got {len(cameras)} cameras, {len(targets)} targets, {len(attn_masks)} attention maps")
    if not cameras:
        raise ValidationError("evaluation needs at least one view")
    rows = []
    for cam, target, attn in zip(cameras, targets, attn_masks):
        rendered = rasterize(cloud, cam, settings)
        loss, _ = combined_loss(rendered, target, attn, ssim_weight)
        rows.append((ssim(rendered, target), psnr(rendered, target), l1_metric(rendered, target), loss))
    ssims, psnrs, l1s, view_losses = zip(*rows)
    report = EvalReport(
        ssim=float(np.mean(ssims)),
        psnr=float(np.mean(psnrs)),
        l1=float(np.mean(l1s)),
        loss=float(np.mean(view_losses)),
        fps=fps_benchmark(cloud, cameras, settings, fps_frames),
        train_time=float(train_time),
        size_bytes=model_size(cloud),
    )
    logger.info("eval: ssim=%.4f psnr=%.2f l1=%.5f over %d views", report.ssim, report.psnr, report.l1,
                len(cameras), extra={"stage": "eval"})
    return report


# ========== REPORTS ==========

def report_frame(reports: Dict[str, EvalReport]) -> pd.DataFrame:
    """One row per labelled report, columns in table order"""
    frame = pd.DataFrame([r.row() for r in reports.values()], index=list(reports.keys()), columns=TABLE_COLUMNS)
    frame.index.name = "model"
    return frame


def write_report_csv(reports: Dict[str, EvalReport], path: str) -> None:
    report_frame(reports).to_csv(path)


def format_table(reports: Dict[str, EvalReport]) -> str:
    return report_frame(reports).to_string(float_format=lambda v: f"{v:.4f}")


def report_dict(report: EvalReport) -> dict:
    return asdict(report)
