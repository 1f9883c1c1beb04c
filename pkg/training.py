"""Attention-weighted splat optimization, attention-guided pruning and densification."""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from camera import Camera, quat_to_matrix
from config import dataclass_from_mapping, read_key_value_file
from errors import TrainingDivergedError, ValidationError
from gaussians import GaussianCloud, RenderSettings, rasterize_with_grad, render
from imaging import BinaryMask, Raster, attention_for_view
from losses import loss_terms

logger = logging.getLogger(__name__)

PARAM_GROUPS = ("positions", "colors", "opacity_logits", "log_scales", "rotations")
SPLIT_FACTOR = 1.6
ATTENTION_SOURCES = ("sidecar", "composited", "original")
LOSS_COLUMNS = ["iteration", "weighted_l1", "plain_l1", "ssim", "combined", "splat_count"]


@dataclass
class TrainConfig:
    iterations: int = 30000
    lr_position: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    ssim_weight: float = 0.2
    attention_enabled: bool = True
    attention_source: str = "sidecar"
    prune_interval: int = 500
    prune_attention_threshold: float = 0.05
    prune_opacity_threshold: float = 0.005
    prune_score: str = "mean"
    final_prune: bool = True
    densify_enabled: bool = False
    densify_interval: int = 500
    densify_grad_threshold: float = 2e-4
    densify_scale_fraction: float = 0.01
    max_splats: int = 5000
    report_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        rates = {"lr_position": self.lr_position, "lr_color": self.lr_color, "lr_opacity": self.lr_opacity,
                 "lr_scale": self.lr_scale, "lr_rotation": self.lr_rotation}
        for name, value in rates.items():
            if not value > 0:
                raise ValidationError(f"{name} must be > 0, got {value}")
        if self.iterations < 0:
            raise ValidationError(f"iterations must be >= 0, got {self.iterations}")
        for name in ("ssim_weight", "prune_attention_threshold", "prune_opacity_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        for name in ("prune_interval", "densify_interval", "report_interval", "max_splats"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.prune_score not in ("mean", "max"):
            raise ValidationError(f"prune_score must be 'mean' or 'max', got {self.prune_score!r}")
        if self.attention_source not in ATTENTION_SOURCES:
            raise ValidationError(
                f"attention_source must be one of {ATTENTION_SOURCES}, got {self.attention_source!r}")
        if self.densify_grad_threshold < 0 or self.densify_scale_fraction <= 0:
            raise ValidationError("densify thresholds must be positive")

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        return dataclass_from_mapping(cls, read_key_value_file(path), path)

    @property
    def learning_rates(self) -> Dict[str, float]:
        return {"positions": self.lr_position, "colors": self.lr_color, "opacity_logits": self.lr_opacity,
                "log_scales": self.lr_scale, "rotations": self.lr_rotation}


@dataclass(frozen=True)
class LossReport:
    iteration: int
    weighted_l1: float
    plain_l1: float
    ssim: float
    combined: float
    splat_count: int


@dataclass
class TrainingView:
    image: Raster
    camera: Camera
    mask: Optional[BinaryMask] = None
    attention: Optional[Raster] = None


# ========== PRUNING AND DENSIFICATION ==========

def attention_score_splats(cloud: GaussianCloud, cameras: Sequence[Camera], attn_masks: Sequence[Raster],
                           near: float = 0.01, reduce: str = "mean") -> np.ndarray:
    """Bilinear attention at each projected splat centre, reduced over the views that see it"""
    if len(cameras) != len(attn_masks):
        raise ValidationError(f"got {len(cameras)} cameras but {len(attn_masks)} attention maps")
    n = len(cloud)
    total = np.zeros(n)
    best = np.zeros(n)
    seen = np.zeros(n, dtype=int)
    for cam, attn in zip(cameras, attn_masks):
        if n == 0:
            break
        uv, z = cam.project(cloud.positions)
        vis = (z >= near) & np.all(np.isfinite(uv), axis=1)
        vis &= (uv[:, 0] >= 0) & (uv[:, 0] <= attn.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= attn.height - 1)
        idx = np.nonzero(vis)[0]
        if not len(idx):
            continue
        sample = ndimage.map_coordinates(attn.plane, [uv[idx, 1], uv[idx, 0]], order=1, mode="nearest")
        total[idx] += sample
        best[idx] = np.maximum(best[idx], sample)
        seen[idx] += 1
    if reduce == "max":
        return best
    return np.divide(total, seen, out=np.zeros(n), where=seen > 0)


def _prune_mask(cloud: GaussianCloud, scores: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(cloud):
        raise ValidationError(f"got {len(scores)} scores for {len(cloud)} splats")
    return (scores >= cfg.prune_attention_threshold) & (cloud.opacities >= cfg.prune_opacity_threshold)


def attention_prune(cloud: GaussianCloud, scores: np.ndarray, cfg: TrainConfig) -> GaussianCloud:
    return cloud.subset(_prune_mask(cloud, scores, cfg))


@dataclass
class GradientAccumulator:
    """Running sum of view-space positional gradient norms per splat"""

    total: np.ndarray = field(default_factory=lambda: np.zeros(0))
    count: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @classmethod
    def zeros(cls, n: int) -> "GradientAccumulator":
        return cls(np.zeros(n), np.zeros(n, dtype=int))

    def add(self, norms: np.ndarray, visible: np.ndarray) -> None:
        self.total[visible] += norms[visible]
        self.count[visible] += 1

    def mean(self) -> np.ndarray:
        return np.divide(self.total, self.count, out=np.zeros(len(self.total)), where=self.count > 0)


def _densify_plan(cloud: GaussianCloud, grads: GradientAccumulator, cfg: TrainConfig, extent: float,
                  rng: np.random.Generator) -> Tuple[np.ndarray, GaussianCloud]:
    """(mask of splats kept in place, splats appended after them)"""
    if len(grads.total) != len(cloud):
        raise ValidationError(f"gradient accumulator has {len(grads.total)} entries for {len(cloud)} splats")
    mean = grads.mean()
    keep = np.ones(len(cloud), dtype=bool)
    candidates = np.nonzero(mean > cfg.densify_grad_threshold)[0]
    room = cfg.max_splats - len(cloud)
    if not len(candidates) or room <= 0:
        return keep, GaussianCloud()
    candidates = candidates[np.argsort(-mean[candidates], kind="stable")][:room]
    candidates.sort()
    large = np.exp(cloud.log_scales[candidates]).max(axis=1) > cfg.densify_scale_fraction * extent
    clones = cloud.subset(candidates[~large])
    split_idx = candidates[large]
    parents = cloud.subset(split_idx)
    children = []
    for _ in range(2):
        child = parents.copy()
        if len(parents):
            local = rng.standard_normal((len(parents), 3)) * np.exp(parents.log_scales)
            child.positions = parents.positions + np.einsum("nij,nj->ni", quat_to_matrix(parents.rotations), local)
        child.log_scales = parents.log_scales - math.log(SPLIT_FACTOR)
        children.append(child)
    keep[split_idx] = False
    return keep, clones.concat(children[0]).concat(children[1])


def densify(cloud: GaussianCloud, grads: GradientAccumulator, cfg: TrainConfig, extent: float = 1.0,
            seed: int = 0) -> GaussianCloud:
    """Clone small splats and split large ones whose mean positional gradient exceeds the threshold.

    Small and large are relative to `densify_scale_fraction * extent`. Split
    children are sampled inside the parent and shrink by a factor of 1.6. The
    result never exceeds `max_splats` through densification.
    """
    keep, additions = _densify_plan(cloud, grads, cfg, extent, np.random.default_rng(seed))
    return cloud.subset(keep).concat(additions)


# ========== OPTIMIZER ==========

class Adam:
    """Per-group first/second-moment optimizer with a shared step count"""

    def __init__(self, learning_rates: Dict[str, float], n: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15):
        self.lr = dict(learning_rates)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        shapes = {"positions": 3, "colors": 3, "opacity_logits": 0, "log_scales": 3, "rotations": 4}
        self.m = {k: np.zeros((n, c) if c else n) for k, c in shapes.items()}
        self.v = {k: np.zeros_like(a) for k, a in self.m.items()}

    def step(self, cloud: GaussianCloud, grads) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name in PARAM_GROUPS:
            g = getattr(grads, name)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = self.lr[name] * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            setattr(cloud, name, getattr(cloud, name) - update)

    def subset(self, keep: np.ndarray) -> None:
        for state in (self.m, self.v):
            for name in state:
                state[name] = state[name][keep]

    def extend(self, n: int) -> None:
        for state in (self.m, self.v):
            for name in state:
                state[name] = np.concatenate([state[name], np.zeros((n,) + state[name].shape[1:])])


# ========== TRAINING LOOP ==========

def scene_extent(cameras: Sequence[Camera], cloud: GaussianCloud) -> float:
    """Radius of the camera rig, or the cloud's bounding-box diagonal for a single view"""
    centers = np.stack([c.center for c in cameras])
    if len(centers) > 1:
        return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    if len(cloud):
        return float(np.linalg.norm(cloud.positions.max(axis=0) - cloud.positions.min(axis=0))) or 1.0
    return 1.0


def view_attention(views: Sequence[TrainingView], cfg: TrainConfig) -> List[Raster]:
    """Attention map per view; all ones when attention is disabled.

    The `sidecar` source uses a view's stored map and falls back to the
    composited computation; the other sources always recompute.
    """
    maps = []
    for view in views:
        if not cfg.attention_enabled:
            maps.append(Raster(np.ones((view.image.height, view.image.width))))
        elif cfg.attention_source == "sidecar":
            maps.append(view.attention if view.attention is not None
                        else attention_for_view(view.image, view.mask, "composited"))
        else:
            maps.append(attention_for_view(view.image, view.mask, cfg.attention_source))
    return maps


def _prune_pass(cloud, optimizer, accum, cameras, attn, cfg, settings, iteration):
    scores = attention_score_splats(cloud, cameras, attn, settings.near, cfg.prune_score)
    keep = _prune_mask(cloud, scores, cfg)
    before = len(cloud)
    cloud = cloud.subset(keep)
    optimizer.subset(keep)
    accum = GradientAccumulator(accum.total[keep], accum.count[keep])
    logger.info("iteration %d: pruned %d of %d splats", iteration, before - len(cloud), before,
                extra={"stage": "prune"})
    return cloud, accum


def train(views: Sequence[TrainingView], init: GaussianCloud, cfg: TrainConfig,
          settings: RenderSettings) -> Tuple[GaussianCloud, List[LossReport]]:
    """Stochastic single-view optimization of the cloud against the training images.

    Views are visited in a seeded shuffle per epoch. Each step renders, takes
    the combined loss (weighted by attention, or ones when attention is off),
    backpropagates and applies Adam.
    """
    if not views:
        raise ValidationError("training needs at least one view")
    for i, v in enumerate(views):
        if v.image.channels != 3 or v.image.width != settings.width or v.image.height != settings.height:
            raise ValidationError(
                f"view {i} image is {v.image.width}x{v.image.height}x{v.image.channels}, "
                f"render is {settings.width}x{settings.height}x3"
            )
    cloud = init.copy()
    reports: List[LossReport] = []
    if cfg.iterations == 0:
        return cloud, reports

    cameras = [v.camera for v in views]
    attn = view_attention(views, cfg)
    extent = scene_extent(cameras, cloud)
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(cfg.learning_rates, len(cloud))
    accum = GradientAccumulator.zeros(len(cloud))
    order: List[int] = []

    for it in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(len(views)))
        k = order.pop(0)
        view = views[k]
        rendered, state = render(cloud, view.camera, settings)
        value, grad, wl1, s = loss_terms(rendered, view.image, attn[k], cfg.ssim_weight)
        last = it == cfg.iterations - 1
        if it % cfg.report_interval == 0 or last or not math.isfinite(value):
            report = LossReport(it, wl1, float(np.mean(np.abs(rendered.data - view.image.data))), s, value,
                                len(cloud))
            if not math.isfinite(value):
                logger.error("iteration %d: non-finite loss", it, extra={"stage": "train"})
                raise TrainingDivergedError(f"non-finite loss at iteration {it}", report)
            reports.append(report)
            logger.info("iteration %d: loss=%.6f l1=%.6f ssim=%.4f splats=%d", it, value, report.plain_l1, s,
                        len(cloud), extra={"stage": "train"})

        grads = rasterize_with_grad(cloud, view.camera, settings, Raster(grad), state)
        accum.add(grads.mean2d_norm, grads.visible)
        optimizer.step(cloud, grads)
        cloud.normalize_rotations()
        cloud.clamp_scales()

        step = it + 1
        if last:
            break
        if step % cfg.prune_interval == 0:
            cloud, accum = _prune_pass(cloud, optimizer, accum, cameras, attn, cfg, settings, step)
        if cfg.densify_enabled and step % cfg.densify_interval == 0:
            keep, additions = _densify_plan(cloud, accum, cfg, extent, rng)
            cloud = cloud.subset(keep).concat(additions)
            optimizer.subset(keep)
            optimizer.extend(len(additions))
            accum = GradientAccumulator.zeros(len(cloud))
            logger.info("iteration %d: densified to %d splats", step, len(cloud), extra={"stage": "densify"})

    if cfg.final_prune:
        cloud, _ = _prune_pass(cloud, optimizer, accum, cameras, attn, cfg, settings, cfg.iterations)
    return cloud, reports


def write_loss_csv(reports: Sequence[LossReport], path: str) -> None:
    pd.DataFrame([asdict(r) for r in reports], columns=LOSS_COLUMNS).to_csv(path, index=False)
