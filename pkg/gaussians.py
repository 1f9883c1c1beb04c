"""Gaussian splats: covariance, projection, alpha-compositing rasterizer and its backward pass.

A splat stores position, rotation quaternion (w, x, y, z), log scale, opacity
logit and a degree-0 spherical-harmonic colour. The rasterizer sorts splats
front to back by camera depth once per view (no per-tile re-sort) and composites
every pixel against a background colour.

Pixel (i, j) has its centre at image coordinates (x=i, y=j), the same
convention the SfM stage uses for feature positions.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from camera import Camera, quat_to_matrix
from errors import ValidationError
from imaging import Raster

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
LOG_SCALE_MIN = math.log(1e-6)
LOG_SCALE_MAX = math.log(1e3)
INIT_OPACITY = 0.1
FALLBACK_SCALE = 0.01
CHUNK = 128


def rgb_to_sh(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_to_rgb(sh: np.ndarray) -> np.ndarray:
    return 0.5 + SH_C0 * np.asarray(sh, dtype=np.float64)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(np.asarray(x, dtype=np.float64))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


# ========== TYPES ==========

@dataclass(frozen=True)
class Splat:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(np.clip(self.log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX))


@dataclass
class GaussianCloud:
    """Structure-of-arrays storage; index i across all arrays is one splat"""

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rotations: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    log_scales: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    opacity_logits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if n and np.any(np.linalg.norm(self.rotations, axis=1) == 0):
            raise ValidationError("splat rotations must be nonzero quaternions")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def splats(self) -> List[Splat]:
        return [self[i] for i in range(len(self))]

    def __getitem__(self, i: int) -> Splat:
        return Splat(self.positions[i].copy(), self.rotations[i].copy(), self.log_scales[i].copy(),
                     float(self.opacity_logits[i]), self.colors[i].copy())

    @classmethod
    def from_splats(cls, splats: Sequence[Splat]) -> "GaussianCloud":
        if not splats:
            return cls()
        return cls(
            np.stack([s.position for s in splats]),
            np.stack([s.rotation for s in splats]),
            np.stack([s.log_scale for s in splats]),
            np.array([s.opacity_logit for s in splats]),
            np.stack([s.color for s in splats]),
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def rgb(self) -> np.ndarray:
        return sh_to_rgb(self.colors)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
                             self.opacity_logits.copy(), self.colors.copy())

    def subset(self, keep: np.ndarray) -> "GaussianCloud":
        """Boolean mask or index array; order is preserved"""
        return GaussianCloud(self.positions[keep], self.rotations[keep], self.log_scales[keep],
                             self.opacity_logits[keep], self.colors[keep])

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.colors, other.colors]),
        )

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def clamp_scales(self) -> None:
        np.clip(self.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX, out=self.log_scales)


@dataclass(frozen=True)
class RenderSettings:
    width: int
    height: int
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    near: float = 0.01
    cutoff: float = 3.0
    alpha_floor: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    blur: float = 0.3
    threads: int = 1

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"render size must be positive, got {self.width}x{self.height}")
        if self.near <= 0 or self.alpha_floor <= 0 or self.transmittance_floor <= 0 or self.blur < 0:
            raise ValidationError("near, alpha_floor and transmittance_floor must be positive")
        if self.cutoff < 1:
            raise ValidationError(f"cutoff must be >= 1, got {self.cutoff}")
        if self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True)
class ProjectedSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


@dataclass
class SplatGradients:
    """Gradients of a scalar loss, aligned with the cloud's splat order"""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    mean2d_norm: np.ndarray
    visible: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SplatGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(n, dtype=bool))


# ========== SINGLE-SPLAT GEOMETRY ==========

def covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scale))"""
    R = quat_to_matrix(rotation)
    M = R * np.exp(np.clip(np.asarray(log_scale, dtype=np.float64), LOG_SCALE_MIN, LOG_SCALE_MAX))[None, :]
    sigma = M @ M.T
    return 0.5 * (sigma + sigma.T)


def density(offset: np.ndarray, sigma: np.ndarray) -> float:
    """exp(-1/2 x^T Sigma^-1 x), unnormalized; x is the offset from the splat centre"""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.linalg.cond(sigma) > 1e15:
        raise ValidationError("covariance is singular")
    x = np.asarray(offset, dtype=np.float64)
    return float(np.exp(-0.5 * x @ np.linalg.solve(sigma, x)))


def project_splat(s: Splat, cam: Camera, near: float = 0.01, blur: float = 0.3) -> Optional[ProjectedSplat]:
    """EWA projection; returns None when the splat is in front of the near plane"""
    cloud = GaussianCloud.from_splats([s])
    proj = _project(cloud, cam, RenderSettings(1, 1, near=near, blur=blur))
    if len(proj.index) == 0:
        return None
    return ProjectedSplat(proj.mean2d[0].copy(), proj.cov2d[0].copy(), float(proj.depth[0]))


# ========== PROJECTION ==========

@dataclass
class _Projection:
    index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    rgb: np.ndarray
    cam_points: np.ndarray
    jac: np.ndarray
    view_jac: np.ndarray
    sigma: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    scale_free: np.ndarray


def _project(cloud: GaussianCloud, cam: Camera, settings: RenderSettings) -> _Projection:
    W = cam.R
    pc = cloud.positions @ W.T + cam.translation
    vis = np.nonzero(pc[:, 2] >= settings.near)[0]
    order = vis[np.argsort(pc[vis, 2], kind="stable")]
    pc = pc[order]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    m = len(order)

    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1) if m else np.zeros((0, 2))
    jac = np.zeros((m, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)

    log_scales = cloud.log_scales[order]
    rot = quat_to_matrix(cloud.rotations[order]) if m else np.zeros((0, 3, 3))
    scale = np.exp(np.clip(log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX))
    M = rot * scale[:, None, :]
    sigma = M @ np.transpose(M, (0, 2, 1))
    view_jac = jac @ W
    cov2d = view_jac @ sigma @ np.transpose(view_jac, (0, 2, 1)) + settings.blur * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1) if m else np.zeros((0, 3))

    return _Projection(
        index=order, mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z,
        alpha=sigmoid(cloud.opacity_logits[order]), rgb=sh_to_rgb(cloud.colors[order]),
        cam_points=pc, jac=jac, view_jac=view_jac, sigma=sigma, rot=rot, scale=scale,
        scale_free=(log_scales >= LOG_SCALE_MIN) & (log_scales <= LOG_SCALE_MAX),
    )


# ========== COMPOSITING ==========

def _footprint(proj: _Projection, lo: int, hi: int, rows: np.ndarray, cols: np.ndarray, settings: RenderSettings):
    """Per-pixel alpha of splats lo:hi over the given rows/cols, with the skip rules applied"""
    dx = cols[None, None, :] - proj.mean2d[lo:hi, 0, None, None]
    dy = rows[None, :, None] - proj.mean2d[lo:hi, 1, None, None]
    ca = proj.conic[lo:hi, 0, None, None]
    cb = proj.conic[lo:hi, 1, None, None]
    cc = proj.conic[lo:hi, 2, None, None]
    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
    gauss = np.exp(power)
    alpha = proj.alpha[lo:hi, None, None] * gauss
    keep = (-2.0 * power <= settings.cutoff ** 2) & (alpha >= settings.alpha_floor)
    return np.where(keep, alpha, 0.0), gauss, dx, dy


def _chunk_transmittance(alpha: np.ndarray, t_start: np.ndarray, settings: RenderSettings):
    """Stop accumulating once transmittance has dropped below the floor"""
    ones = np.ones((1,) + alpha.shape[1:])
    cp = np.cumprod(1.0 - alpha, axis=0)
    t_before = np.concatenate([ones, cp[:-1]], axis=0) * t_start[None]
    alpha = np.where(t_before >= settings.transmittance_floor, alpha, 0.0)
    cp = np.cumprod(1.0 - alpha, axis=0)
    t_before = np.concatenate([ones, cp[:-1]], axis=0) * t_start[None]
    return alpha, t_before, t_start * cp[-1]


def _composite_rows(proj: _Projection, settings: RenderSettings, rows: np.ndarray):
    cols = np.arange(settings.width, dtype=np.float64)
    trans = np.ones((len(rows), settings.width))
    color = np.zeros((len(rows), settings.width, 3))
    starts = []
    for lo in range(0, len(proj.index), CHUNK):
        hi = min(lo + CHUNK, len(proj.index))
        starts.append(trans)
        alpha, _, _, _ = _footprint(proj, lo, hi, rows, cols, settings)
        alpha, t_before, trans = _chunk_transmittance(alpha, trans, settings)
        color += np.einsum("khw,kc->hwc", alpha * t_before, proj.rgb[lo:hi])
    color += trans[:, :, None] * np.asarray(settings.background, dtype=np.float64)
    return color, trans, starts


@dataclass
class RenderState:
    """Forward-pass record reused by the backward pass"""

    projection: _Projection
    transmittance: np.ndarray
    chunk_starts: List[np.ndarray]
    settings: RenderSettings
    n_splats: int
    rotations: np.ndarray


def render(cloud: GaussianCloud, cam: Camera, settings: RenderSettings) -> Tuple[Raster, RenderState]:
    proj = _project(cloud, cam, settings)
    rows = np.arange(settings.height, dtype=np.float64)
    color, trans, starts = _composite_rows(proj, settings, rows)
    return Raster(color), RenderState(proj, trans, starts, settings, len(cloud), cloud.rotations.copy())


def rasterize(cloud: GaussianCloud, cam: Camera, settings: RenderSettings) -> Raster:
    """Front-to-back alpha compositing of all splats in front of the near plane"""
    if settings.threads == 1 or settings.height < 2 * settings.threads:
        return render(cloud, cam, settings)[0]
    proj = _project(cloud, cam, settings)
    bands = np.array_split(np.arange(settings.height, dtype=np.float64), settings.threads)
    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        parts = list(pool.map(lambda rows: _composite_rows(proj, settings, rows)[0], bands))
    return Raster(np.concatenate(parts, axis=0))


def accumulated_alpha(cloud: GaussianCloud, cam: Camera, settings: RenderSettings) -> np.ndarray:
    """1 - final transmittance per pixel; zero exactly where no splat contributed"""
    _, state = render(cloud, cam, settings)
    return 1.0 - state.transmittance


# ========== BACKWARD ==========

def _quat_grad(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain dL/dR through R(q / |q|) back to the raw quaternion"""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    d_w = mat([[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]])
    d_x = mat([[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    d_y = mat([[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]])
    d_z = mat([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]])
    dqn = np.stack([np.sum(d_rot * d, axis=(1, 2)) for d in (d_w, d_x, d_y, d_z)], axis=1)
    return (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / norm


def backward(state: RenderState, cam: Camera, loss_grad: np.ndarray) -> SplatGradients:
    """Gradients of sum(loss_grad * image) with respect to every splat parameter"""
    settings = state.settings
    proj = state.projection
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.shape != (settings.height, settings.width, 3):
        raise ValidationError(
            f"loss gradient has shape {g.shape}, render is {settings.height}x{settings.width}x3"
        )
    out = SplatGradients.zeros(state.n_splats)
    m = len(proj.index)
    if m == 0:
        return out

    rows = np.arange(settings.height, dtype=np.float64)
    cols = np.arange(settings.width, dtype=np.float64)
    behind = g @ np.asarray(settings.background, dtype=np.float64)

    d_rgb = np.zeros((m, 3))
    d_alpha = np.zeros(m)
    d_conic = np.zeros((m, 3))
    d_mean = np.zeros((m, 2))
    chunks = list(range(0, m, CHUNK))
    for ci in reversed(range(len(chunks))):
        lo = chunks[ci]
        hi = min(lo + CHUNK, m)
        alpha, gauss, dx, dy = _footprint(proj, lo, hi, rows, cols, settings)
        alpha, t_before, _ = _chunk_transmittance(alpha, state.chunk_starts[ci], settings)
        cg = np.einsum("hwc,kc->khw", g, proj.rgb[lo:hi])
        d_a = np.empty_like(alpha)
        for j in range(hi - lo - 1, -1, -1):
            d_a[j] = t_before[j] * (cg[j] - behind)
            behind = alpha[j] * cg[j] + (1.0 - alpha[j]) * behind
        d_a = np.where(alpha > 0.0, d_a, 0.0)

        d_rgb[lo:hi] = np.einsum("khw,hwc->kc", alpha * t_before, g)
        d_alpha[lo:hi] = np.sum(d_a * gauss, axis=(1, 2))
        d_pow = d_a * alpha
        ca = proj.conic[lo:hi, 0, None, None]
        cb = proj.conic[lo:hi, 1, None, None]
        cc = proj.conic[lo:hi, 2, None, None]
        d_conic[lo:hi, 0] = np.sum(d_pow * (-0.5 * dx * dx), axis=(1, 2))
        d_conic[lo:hi, 1] = np.sum(d_pow * (-dx * dy), axis=(1, 2))
        d_conic[lo:hi, 2] = np.sum(d_pow * (-0.5 * dy * dy), axis=(1, 2))
        d_mean[lo:hi, 0] = np.sum(d_pow * (ca * dx + cb * dy), axis=(1, 2))
        d_mean[lo:hi, 1] = np.sum(d_pow * (cb * dx + cc * dy), axis=(1, 2))

    # conic = inverse(cov2d)
    conic = np.empty((m, 2, 2))
    conic[:, 0, 0], conic[:, 0, 1], conic[:, 1, 0], conic[:, 1, 1] = (
        proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2])
    g_conic = np.empty((m, 2, 2))
    g_conic[:, 0, 0], g_conic[:, 1, 1] = d_conic[:, 0], d_conic[:, 2]
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = 0.5 * d_conic[:, 1]
    g_cov = -conic @ g_conic @ conic

    # cov2d = T Sigma T^T + blur I, T = J W
    T = proj.view_jac
    g_sigma = np.transpose(T, (0, 2, 1)) @ g_cov @ T
    g_T = 2.0 * g_cov @ T @ proj.sigma
    g_J = g_T @ cam.R.T

    # Sigma = M M^T, M = R diag(s)
    M = proj.rot * proj.scale[:, None, :]
    g_M = 2.0 * g_sigma @ M
    g_rot = g_M * proj.scale[:, None, :]
    g_scale = np.sum(g_M * proj.rot, axis=1)
    g_log_scale = np.where(proj.scale_free, g_scale * proj.scale, 0.0)

    # mean2d and J both depend on the camera-space position
    x, y, z = proj.cam_points[:, 0], proj.cam_points[:, 1], proj.cam_points[:, 2]
    fx, fy = cam.fx, cam.fy
    g_pc = np.empty((m, 3))
    g_pc[:, 0] = d_mean[:, 0] * fx / z + g_J[:, 0, 2] * (-fx / (z * z))
    g_pc[:, 1] = d_mean[:, 1] * fy / z + g_J[:, 1, 2] * (-fy / (z * z))
    g_pc[:, 2] = (
        -d_mean[:, 0] * fx * x / (z * z) - d_mean[:, 1] * fy * y / (z * z)
        - g_J[:, 0, 0] * fx / (z * z) + g_J[:, 0, 2] * 2.0 * fx * x / z ** 3
        - g_J[:, 1, 1] * fy / (z * z) + g_J[:, 1, 2] * 2.0 * fy * y / z ** 3
    )

    idx = proj.index
    out.positions[idx] = g_pc @ cam.R
    out.rotations[idx] = _quat_grad(state.rotations[idx], g_rot)
    out.log_scales[idx] = g_log_scale
    out.opacity_logits[idx] = d_alpha * proj.alpha * (1.0 - proj.alpha)
    out.colors[idx] = SH_C0 * d_rgb
    out.mean2d_norm[idx] = np.linalg.norm(d_mean, axis=1)
    out.visible[idx] = True
    return out


def rasterize_with_grad(cloud: GaussianCloud, cam: Camera, settings: RenderSettings,
                        loss_grad: Raster, state: Optional[RenderState] = None) -> SplatGradients:
    """Analytic gradients of the loss whose image-space gradient is `loss_grad`.

    Pass the `RenderState` from `render` to skip recomputing the forward pass.
    """
    if loss_grad.channels != 3 or loss_grad.width != settings.width or loss_grad.height != settings.height:
        raise ValidationError(
            f"loss gradient is {loss_grad.width}x{loss_grad.height}x{loss_grad.channels}, "
            f"render is {settings.width}x{settings.height}x3"
        )
    if state is None:
        _, state = render(cloud, cam, settings)
    return backward(state, cam, loss_grad.data)


# ========== INITIALIZATION ==========

def init_from_cloud(cloud) -> GaussianCloud:
    """One isotropic splat per SfM point, sized by the mean distance to its 3 nearest neighbours"""
    points = np.asarray(cloud.points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise ValidationError("cannot initialize splats from an empty point cloud")
    if n == 1:
        dist = np.array([FALLBACK_SCALE])
    else:
        k = min(4, n)
        d, _ = cKDTree(points).query(points, k=k)
        dist = d[:, 1:].mean(axis=1)
    log_scale = np.clip(np.log(np.maximum(dist, 1e-300)), LOG_SCALE_MIN, LOG_SCALE_MAX)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    colors = np.asarray(cloud.colors, dtype=np.float64).reshape(n, 3)
    logger.info("initialized %d splats from sparse cloud", n, extra={"stage": "init"})
    return GaussianCloud(
        positions=points.copy(),
        rotations=rotations,
        log_scales=np.repeat(log_scale[:, None], 3, axis=1),
        opacity_logits=np.full(n, logit(INIT_OPACITY)),
        colors=rgb_to_sh(colors),
    )
