"""Mask-restricted structure from motion.

Pipeline: masked Harris detection -> mutual nearest-neighbour matching with a
ratio test -> RANSAC fundamental matrix -> two-view initialization from the
essential matrix -> PnP registration of the remaining views -> triangulation ->
reprojection outlier filtering -> global bundle adjustment. The first camera of
the initial pair is the world frame and the initial baseline has unit length.
"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from camera import Camera, Intrinsics, rotvec_to_matrix
from errors import DegenerateGeometryError, EstimationError, ReconstructionError, ValidationError
from imaging import BinaryMask, Raster, composite_white, sobel_gradients, to_grayscale

logger = logging.getLogger(__name__)

PATCH = 11
HARRIS_K = 0.04
RESPONSE_FLOOR = 1e-6
MIN_PNP = 6


@dataclass
class SfmConfig:
    max_features: int = 800
    ratio: float = 0.8
    ransac_threshold: float = 1.0
    ransac_iterations: int = 2000
    ransac_confidence: float = 0.99
    seed: int = 0
    reproj_threshold: float = 2.0
    ba_max_iterations: int = 100
    ba_tolerance: float = 1e-8
    min_triangulation_angle: float = 2.0
    mask_support: float = 1.0
    mask_views: str = "registered"
    descriptor_source: str = "original"
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValidationError(f"ratio must lie in (0, 1], got {self.ratio}")
        if not 0.0 <= self.mask_support <= 1.0:
            raise ValidationError(f"mask_support must lie in [0, 1], got {self.mask_support}")
        if self.mask_views not in ("observing", "registered"):
            raise ValidationError(f"mask_views must be 'observing' or 'registered', got {self.mask_views!r}")
        if self.descriptor_source not in ("original", "masked"):
            raise ValidationError(f"descriptor_source must be 'original' or 'masked', got {self.descriptor_source!r}")


# ========== TYPES ==========

@dataclass(frozen=True)
class Feature:
    x: float
    y: float
    descriptor: np.ndarray
    response: float


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


@dataclass
class SparseCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    tracks: List[List[Tuple[int, int]]] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if not (len(self.points) == len(self.colors) == len(self.tracks)):
            raise ValidationError(
                f"points/colors/tracks lengths differ: {len(self.points)}/{len(self.colors)}/{len(self.tracks)}"
            )
        for i, track in enumerate(self.tracks):
            if len(track) < 2:
                raise ValidationError(f"track {i} has {len(track)} observation(s), need at least 2")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, keep: np.ndarray) -> "SparseCloud":
        idx = np.nonzero(np.asarray(keep, dtype=bool))[0]
        return SparseCloud(self.points[idx], self.colors[idx], [list(self.tracks[i]) for i in idx])


@dataclass
class Reconstruction:
    cloud: SparseCloud
    cameras: List[Optional[Camera]]
    features: List[List[Feature]]
    initial_pair: Tuple[int, int]
    skipped: List[Dict[str, object]] = field(default_factory=list)

    def __iter__(self):
        return iter((self.cloud, self.cameras))


# ========== FEATURES ==========

def _positions(feats: Sequence[Feature]) -> np.ndarray:
    return np.array([[f.x, f.y] for f in feats], dtype=np.float64).reshape(-1, 2)


def _descriptors(feats: Sequence[Feature]) -> np.ndarray:
    if not feats:
        return np.zeros((0, PATCH * PATCH))
    return np.stack([f.descriptor for f in feats])


def harris_response(img: Raster, k: float = HARRIS_K, sigma: float = 1.0) -> np.ndarray:
    gx, gy = sobel_gradients(img)
    ix, iy = gx.plane / 8.0, gy.plane / 8.0
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="nearest")
    return (sxx * syy - sxy * sxy) - k * (sxx + syy) ** 2


def _subpixel(resp: np.ndarray, r: int, c: int) -> Tuple[float, float]:
    def offset(m1, c0, p1):
        den = m1 - 2.0 * c0 + p1
        if den >= 0.0:
            return 0.0
        return float(np.clip(0.5 * (m1 - p1) / den, -0.5, 0.5))
    return (c + offset(resp[r, c - 1], resp[r, c], resp[r, c + 1]),
            r + offset(resp[r - 1, c], resp[r, c], resp[r + 1, c]))


def _patch_descriptor(plane: np.ndarray, r: int, c: int) -> Optional[np.ndarray]:
    half = PATCH // 2
    patch = plane[r - half:r + half + 1, c - half:c + half + 1].ravel()
    patch = patch - patch.mean()
    norm = np.linalg.norm(patch)
    if norm < 1e-12:
        return None
    return patch / norm


def detect_features_masked(img: Raster, mask: BinaryMask, max_features: int = 800,
                           descriptor_image: Optional[Raster] = None) -> List[Feature]:
    """Harris corners restricted to mask pixels, strongest first.

    Descriptors are 11x11 mean-subtracted, unit-norm patches sampled from
    `descriptor_image` (defaults to `img`).
    """
    if img.channels != 1:
        raise ValidationError("feature detection expects a grayscale raster")
    if not img.same_size(mask):
        raise ValidationError(f"image is {img.width}x{img.height} but mask is {mask.width}x{mask.height}")
    source = (descriptor_image or img).plane
    resp = harris_response(img)
    peak = float(resp.max())
    if peak <= 0.0 or not mask.bits.any():
        return []
    half = PATCH // 2
    border = np.zeros_like(mask.bits)
    border[half:-half, half:-half] = True
    candidates = (
        (resp == ndimage.maximum_filter(resp, size=3, mode="nearest"))
        & (resp > RESPONSE_FLOOR * peak) & mask.bits & border
    )
    rows, cols = np.nonzero(candidates)
    order = np.argsort(-resp[rows, cols], kind="stable")
    feats: List[Feature] = []
    for i in order:
        if len(feats) >= max_features:
            break
        r, c = int(rows[i]), int(cols[i])
        desc = _patch_descriptor(source, r, c)
        if desc is None:
            continue
        x, y = _subpixel(resp, r, c)
        if not mask.contains(np.array([x]), np.array([y]))[0]:
            x, y = float(c), float(r)
        feats.append(Feature(x, y, desc, float(resp[r, c])))
    return feats


def match_features(a: Sequence[Feature], b: Sequence[Feature], ratio: float = 0.8) -> List[Match]:
    """Mutual nearest neighbours whose best/second-best distance ratio is below `ratio`"""
    if not 0.0 < ratio <= 1.0:
        raise ValidationError(f"ratio must lie in (0, 1], got {ratio}")
    if not a or not b:
        return []
    da, db = _descriptors(a), _descriptors(b)
    sq = np.sum(da * da, axis=1)[:, None] + np.sum(db * db, axis=1)[None, :] - 2.0 * da @ db.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    best_b = np.argmin(dist, axis=1)
    best_a = np.argmin(dist, axis=0)
    matches = []
    for i, j in enumerate(best_b):
        if best_a[j] != i:
            continue
        best = dist[i, j]
        if dist.shape[1] > 1:
            second = np.partition(dist[i], 1)[1]
            if not best < ratio * second:
                continue
        matches.append(Match(i, int(j), float(best)))
    return matches


# ========== TWO-VIEW GEOMETRY ==========

def _hartley(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    spread = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    s = math.sqrt(2.0) / spread if spread > 0 else 1.0
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _homog(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def _unit_f(F: np.ndarray) -> np.ndarray:
    F = F / np.linalg.norm(F)
    flat = F.ravel()
    return F if flat[np.argmax(np.abs(flat))] > 0 else -F


def eight_point(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Normalized 8-point estimate with rank 2 enforced; x_b^T F x_a = 0"""
    Ta, Tb = _hartley(xa), _hartley(xb)
    na = _homog(xa) @ Ta.T
    nb = _homog(xb) @ Tb.T
    A = np.einsum("ni,nj->nij", nb, na).reshape(-1, 9)
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    u, s, vt = np.linalg.svd(F)
    F = u @ np.diag([s[0], s[1], 0.0]) @ vt
    return _unit_f(Tb.T @ F @ Ta)


def sampson_distance(F: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """First-order geometric epipolar error in pixels"""
    ha, hb = _homog(xa), _homog(xb)
    fa = ha @ F.T
    fb = hb @ F
    num = np.sum(hb * fa, axis=1) ** 2
    den = fa[:, 0] ** 2 + fa[:, 1] ** 2 + fb[:, 0] ** 2 + fb[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def epipolar_residuals(F: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """|x_b^T F x_a| in Hartley-normalized coordinates with a unit-norm F"""
    Ta, Tb = _hartley(xa), _hartley(xb)
    Fn = np.linalg.inv(Tb).T @ F @ np.linalg.inv(Ta)
    Fn /= np.linalg.norm(Fn)
    na = _homog(xa) @ Ta.T
    nb = _homog(xb) @ Tb.T
    return np.abs(np.sum(nb * (na @ Fn.T), axis=1))


def verify_geometry(matches: Sequence[Match], feats_a: Sequence[Feature], feats_b: Sequence[Feature],
                    threshold_px: float = 1.0, seed: int = 0, max_iterations: int = 2000,
                    confidence: float = 0.99) -> Tuple[np.ndarray, List[Match]]:
    """RANSAC fundamental matrix; returns (F, inlier matches)"""
    if len(matches) < 8:
        raise EstimationError("geometric verification needs at least 8 matches", len(matches))
    xa = _positions(feats_a)[[m.index_a for m in matches]]
    xb = _positions(feats_b)[[m.index_b for m in matches]]
    n = len(matches)
    rng = np.random.default_rng(seed)
    best = np.zeros(n, dtype=bool)
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        sample = rng.choice(n, size=8, replace=False)
        try:
            F = eight_point(xa[sample], xb[sample])
        except np.linalg.LinAlgError:
            continue
        inliers = sampson_distance(F, xa, xb) < threshold_px
        if inliers.sum() > best.sum():
            best = inliers
            w = best.sum() / n
            if w >= 1.0:
                needed = 0
            else:
                needed = int(math.ceil(math.log(1.0 - confidence) / math.log(max(1.0 - w ** 8, 1e-300))))
    if best.sum() < 8:
        raise EstimationError("too few RANSAC inliers", int(best.sum()))
    for _ in range(3):
        F = eight_point(xa[best], xb[best])
        refined = sampson_distance(F, xa, xb) < threshold_px
        if refined.sum() < 8 or np.array_equal(refined, best):
            break
        best = refined
    F = eight_point(xa[best], xb[best])
    inliers = sampson_distance(F, xa, xb) < threshold_px
    if inliers.sum() < 8:
        raise EstimationError("too few inliers after refinement", int(inliers.sum()))
    logger.debug("verified %d/%d matches in %d iterations", int(inliers.sum()), n, it, extra={"stage": "verify"})
    return F, [m for m, keep in zip(matches, inliers) if keep]


def decompose_essential(E: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2] / np.linalg.norm(u[:, 2])
    R1, R2 = u @ W @ vt, u @ W.T @ vt
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


# ========== TRIANGULATION ==========

def _normalized(cam: Camera, x: float, y: float) -> Tuple[float, float]:
    return (x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy


def triangulate(obs: Sequence[Tuple[Camera, float, float]]) -> np.ndarray:
    """Linear (DLT) triangulation from two or more views"""
    if len(obs) < 2:
        raise ValidationError(f"triangulation needs at least 2 observations, got {len(obs)}")
    centers = np.stack([cam.center for cam, _, _ in obs])
    extent = np.max(np.linalg.norm(centers - centers[0], axis=1))
    if extent < 1e-12 * (1.0 + np.max(np.linalg.norm(centers, axis=1))):
        raise DegenerateGeometryError("all observing cameras share one centre; no parallax")
    rows = []
    for cam, x, y in obs:
        P = np.hstack([cam.R, cam.translation[:, None]])
        u, v = _normalized(cam, x, y)
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, vt = np.linalg.svd(A)
    if s[-2] / s[0] < 1e-9:
        raise DegenerateGeometryError("observation rays are parallel")
    X = vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X[:3]):
        raise DegenerateGeometryError("observation rays meet at infinity")
    return X[:3] / X[3]


def _triangulate_pairs(cam_a: Camera, cam_b: Camera, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Batched two-view DLT"""
    Pa = np.hstack([cam_a.R, cam_a.translation[:, None]])
    Pb = np.hstack([cam_b.R, cam_b.translation[:, None]])
    ua = (xa - [cam_a.cx, cam_a.cy]) / [cam_a.fx, cam_a.fy]
    ub = (xb - [cam_b.cx, cam_b.cy]) / [cam_b.fx, cam_b.fy]
    A = np.stack([
        ua[:, 0, None] * Pa[2] - Pa[0], ua[:, 1, None] * Pa[2] - Pa[1],
        ub[:, 0, None] * Pb[2] - Pb[0], ub[:, 1, None] * Pb[2] - Pb[1],
    ], axis=1)
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[:, :3] / X[:, 3:4]


def triangulation_angles(center_a: np.ndarray, center_b: np.ndarray, points: np.ndarray) -> np.ndarray:
    ra = points - center_a
    rb = points - center_b
    cos = np.sum(ra * rb, axis=1) / (np.linalg.norm(ra, axis=1) * np.linalg.norm(rb, axis=1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def _reproj(cam: Camera, points: np.ndarray, uv: np.ndarray) -> np.ndarray:
    proj, z = cam.project(points)
    err = np.linalg.norm(proj - uv, axis=1)
    return np.where(z > 0, err, np.inf)


# ========== NONLINEAR REFINEMENT ==========

def _projection_jacobian(cam_points: np.ndarray, fx: float, fy: float) -> np.ndarray:
    x, y, z = cam_points[:, 0], cam_points[:, 1], cam_points[:, 2]
    J = np.zeros((len(z), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    return J


def _skew(v: np.ndarray) -> np.ndarray:
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def bundle_adjust(Rs: List[np.ndarray], ts: List[np.ndarray], points: np.ndarray,
                  obs_cam: np.ndarray, obs_pt: np.ndarray, obs_uv: np.ndarray, intr: Intrinsics,
                  fixed_cams: Sequence[int] = (0,), fixed_points: bool = False,
                  max_iterations: int = 100, tolerance: float = 1e-8):
    """Levenberg-Marquardt over poses and points with dense normal equations.

    Rotations are updated by left-multiplying exp(omega). Steps that do not
    lower the squared reprojection error are rejected.
    Returns (Rs, ts, points, initial_cost, final_cost).
    """
    n_cams = len(Rs)
    free_cams = [c for c in range(n_cams) if c not in set(fixed_cams)]
    cam_col = {c: 6 * i for i, c in enumerate(free_cams)}
    n_cam_params = 6 * len(free_cams)
    n_params = n_cam_params + (0 if fixed_points else 3 * len(points))
    fx, fy, cx, cy = intr.fx, intr.fy, intr.cx, intr.cy

    def residuals(Rs_, ts_, pts_):
        R = np.stack(Rs_)[obs_cam]
        t = np.stack(ts_)[obs_cam]
        pc = np.einsum("nij,nj->ni", R, pts_[obs_pt]) + t
        uv = np.stack([fx * pc[:, 0] / pc[:, 2] + cx, fy * pc[:, 1] / pc[:, 2] + cy], axis=1)
        return (uv - obs_uv).ravel(), pc, R

    r, pc, R_obs = residuals(Rs, ts, points)
    cost = float(r @ r)
    initial_cost = cost
    lam = 1e-3
    n_obs = len(obs_cam)
    rows = np.arange(n_obs)
    for it in range(max_iterations):
        Jp = _projection_jacobian(pc, fx, fy)
        J = np.zeros((2 * n_obs, n_params))
        for c in free_cams:
            sel = rows[obs_cam == c]
            if not len(sel):
                continue
            col = cam_col[c]
            d_rot = -Jp[sel] @ _skew(pc[sel] - np.stack(ts)[c])
            for k in range(2):
                J[2 * sel + k, col:col + 3] = d_rot[:, k, :]
                J[2 * sel + k, col + 3:col + 6] = Jp[sel, k, :]
        if not fixed_points:
            d_pt = Jp @ R_obs
            for k in range(2):
                for j in range(3):
                    J[2 * rows + k, n_cam_params + 3 * obs_pt + j] = d_pt[:, k, j]
        H = J.T @ J
        g = J.T @ r
        diag = np.diag(H).copy()
        diag[diag < 1e-12] = 1e-12
        improved = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_Rs = list(Rs)
            new_ts = list(ts)
            for c in free_cams:
                col = cam_col[c]
                new_Rs[c] = rotvec_to_matrix(step[col:col + 3]) @ Rs[c]
                new_ts[c] = ts[c] + step[col + 3:col + 6]
            new_pts = points if fixed_points else points + step[n_cam_params:].reshape(-1, 3)
            new_r, new_pc, new_R = residuals(new_Rs, new_ts, new_pts)
            new_cost = float(new_r @ new_r) if np.all(new_pc[:, 2] > 0) else np.inf
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                Rs, ts, points = new_Rs, new_ts, new_pts
                r, pc, R_obs, cost = new_r, new_pc, new_R, new_cost
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved or rel < tolerance:
            break
    logger.debug("bundle adjustment: cost %.6g -> %.6g after %d iterations", initial_cost, cost, it + 1,
                 extra={"stage": "ba"})
    return Rs, ts, points, initial_cost, cost


def solve_pnp(points: np.ndarray, uv: np.ndarray, intr: Intrinsics, threshold: float = 2.0,
              seed: int = 0, iterations: int = 500) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RANSAC over 6-point DLT, then LM refinement on the inliers; returns (R, t, inlier mask)"""
    n = len(points)
    if n < MIN_PNP:
        raise EstimationError("PnP needs at least 6 correspondences", n)
    norm = (uv - [intr.cx, intr.cy]) / [intr.fx, intr.fy]
    cam_tmp = Camera(intr.fx, intr.fy, intr.cx, intr.cy)

    def dlt(idx):
        X = _homog(points[idx])
        u, v = norm[idx, 0:1], norm[idx, 1:2]
        zero = np.zeros_like(X)
        A = np.vstack([np.hstack([X, zero, -u * X]), np.hstack([zero, X, -v * X])])
        _, _, vt = np.linalg.svd(A)
        P = vt[-1].reshape(3, 4)
        U, s, Vt = np.linalg.svd(P[:, :3])
        R = U @ Vt
        scale = s.mean()
        if np.linalg.det(R) < 0:
            R, scale = -R, -scale
        t = P[:, 3] / scale
        if np.sign(np.linalg.det(P[:, :3])) != np.sign(scale):
            R, t = -R, -t
        if np.mean((points[idx] @ R.T + t)[:, 2] > 0) < 0.5:
            R, t = -R, -t
        if np.linalg.det(R) < 0:
            return None
        return R, t

    def errors(R, t):
        return _reproj(cam_tmp.with_pose(R, t), points, uv)

    rng = np.random.default_rng(seed)
    best_mask = np.zeros(n, dtype=bool)
    best_pose = None
    for _ in range(iterations if n > MIN_PNP else 1):
        idx = rng.choice(n, size=MIN_PNP, replace=False) if n > MIN_PNP else np.arange(n)
        try:
            pose = dlt(idx)
        except np.linalg.LinAlgError:
            continue
        if pose is None:
            continue
        mask = errors(*pose) < threshold
        if mask.sum() > best_mask.sum():
            best_mask, best_pose = mask, pose
            if mask.all():
                break
    if best_pose is None or best_mask.sum() < MIN_PNP:
        raise EstimationError("too few PnP inliers", int(best_mask.sum()))
    R, t = best_pose
    sel = np.nonzero(best_mask)[0]
    Rs, ts, _, _, _ = bundle_adjust([R], [t], points[sel], np.zeros(len(sel), dtype=int), np.arange(len(sel)),
                                    uv[sel], intr, fixed_cams=(), fixed_points=True)
    R, t = Rs[0], ts[0]
    return R, t, errors(R, t) < threshold


# ========== INCREMENTAL RECONSTRUCTION ==========

@dataclass
class _Verified:
    F: np.ndarray
    inliers: List[Match]


class _TrackBook:
    """Map (view, feature) -> point id and the per-point observation lists"""

    def __init__(self):
        self.owner: Dict[Tuple[int, int], int] = {}
        self.tracks: List[Dict[int, int]] = []
        self.points: List[np.ndarray] = []
        self.alive: List[bool] = []

    def add_point(self, X: np.ndarray, obs: Sequence[Tuple[int, int]]) -> int:
        pid = len(self.points)
        self.points.append(np.asarray(X, dtype=np.float64))
        self.tracks.append({})
        self.alive.append(True)
        for view, feat in obs:
            self.observe(pid, view, feat)
        return pid

    def observe(self, pid: int, view: int, feat: int) -> bool:
        if view in self.tracks[pid] or (view, feat) in self.owner:
            return False
        self.tracks[pid][view] = feat
        self.owner[(view, feat)] = pid
        return True

    def forget(self, pid: int, view: int) -> None:
        feat = self.tracks[pid].pop(view)
        del self.owner[(view, feat)]
        if len(self.tracks[pid]) < 2:
            self.kill(pid)

    def kill(self, pid: int) -> None:
        for view, feat in list(self.tracks[pid].items()):
            del self.owner[(view, feat)]
        self.tracks[pid] = {}
        self.alive[pid] = False

    def live_ids(self) -> List[int]:
        return [i for i, a in enumerate(self.alive) if a]


def _verify_pairs(features: List[List[Feature]], cfg: SfmConfig) -> Dict[Tuple[int, int], _Verified]:
    pairs = list(itertools.combinations(range(len(features)), 2))

    def work(pair):
        i, j = pair
        matches = match_features(features[i], features[j], cfg.ratio)
        try:
            F, inliers = verify_geometry(matches, features[i], features[j], cfg.ransac_threshold,
                                         seed=cfg.seed + 7919 * i + j, max_iterations=cfg.ransac_iterations,
                                         confidence=cfg.ransac_confidence)
        except EstimationError as e:
            logger.info("pair (%d, %d) rejected: %s", i, j, e, extra={"stage": "verify"})
            return pair, None
        logger.info("pair (%d, %d): %d matches, %d inliers", i, j, len(matches), len(inliers),
                    extra={"stage": "verify"})
        return pair, _Verified(F, inliers)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(work, pairs))
    else:
        results = [work(p) for p in pairs]
    return {pair: v for pair, v in results if v is not None}


def _pose_support(base: Camera, R: np.ndarray, t: np.ndarray, xa: np.ndarray, xb: np.ndarray,
                  threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """Points in front of both cameras that reproject within `threshold`; returns (mask, points)"""
    cam_b = base.with_pose(R, t)
    X = _triangulate_pairs(base, cam_b, xa, xb)
    good = np.zeros(len(X), dtype=bool)
    idx = np.nonzero(np.isfinite(X).all(axis=1))[0]
    Xf = X[idx]
    front = (Xf[:, 2] > 0) & ((Xf @ R.T + t)[:, 2] > 0)
    fits = (_reproj(base, Xf, xa[idx]) < threshold) & (_reproj(cam_b, Xf, xb[idx]) < threshold)
    good[idx] = front & fits
    return good, X


def _initial_pair(verified, features, intr: Intrinsics, cfg: SfmConfig):
    """Pick the pair with most inliers whose refined relative pose has enough parallax.

    The decomposition is chosen by how many matches it reprojects, not only by
    cheirality, so a fundamental matrix that fits no rigid motion is rejected.
    The chosen pose is refined by two-view bundle adjustment before the angle test.
    """
    K = intr.K
    base = Camera(intr.fx, intr.fy, intr.cx, intr.cy)
    for (i, j), v in sorted(verified.items(), key=lambda kv: (-len(kv[1].inliers), kv[0])):
        xa = _positions(features[i])[[m.index_a for m in v.inliers]]
        xb = _positions(features[j])[[m.index_b for m in v.inliers]]
        E = K.T @ v.F @ K
        best = None
        for R, t in decompose_essential(E):
            good, X = _pose_support(base, R, t, xa, xb, cfg.reproj_threshold)
            if best is None or good.sum() > best[0].sum():
                best = (good, R, t, X)
        ok, R, t, X = best
        n = int(ok.sum())
        if n < 8:
            logger.info("pair (%d, %d) skipped for initialization: %d points fit a rigid motion", i, j, n,
                        extra={"stage": "init"})
            continue
        Rs, ts, _, _, _ = bundle_adjust(
            [np.eye(3), R], [np.zeros(3), t], X[ok], np.repeat([0, 1], n), np.tile(np.arange(n), 2),
            np.vstack([xa[ok], xb[ok]]), intr, fixed_cams=(0,),
            max_iterations=cfg.ba_max_iterations, tolerance=cfg.ba_tolerance)
        R, t = Rs[1], ts[1]
        if not np.linalg.norm(t) > 0:
            continue
        t = t / np.linalg.norm(t)
        good, X = _pose_support(base, R, t, xa, xb, cfg.reproj_threshold)
        if good.sum() < 8:
            continue
        angles = triangulation_angles(np.zeros(3), -R.T @ t, X[good])
        median = float(np.median(angles))
        if median <= cfg.min_triangulation_angle:
            logger.info("pair (%d, %d) skipped for initialization: median angle %.2f deg", i, j, median,
                        extra={"stage": "init"})
            continue
        logger.info("initial pair (%d, %d): %d points, median angle %.2f deg", i, j, int(good.sum()), median,
                    extra={"stage": "init"})
        return (i, j), R, t
    raise ReconstructionError("no verifiable initial pair", stage="sfm-init")


def _descriptor_images(images, masks, cfg):
    grays, sources = [], []
    for img, mask in zip(images, masks):
        gray = to_grayscale(img) if img.channels == 3 else img
        grays.append(gray)
        if cfg.descriptor_source == "masked" and mask is not None and img.channels == 3:
            sources.append(to_grayscale(composite_white(img, mask)))
        else:
            sources.append(gray)
    return grays, sources


def _sample_colors(images: Sequence[Raster], features, tracks) -> np.ndarray:
    colors = []
    for track in tracks:
        samples = []
        for view, feat in track:
            f = features[view][feat]
            img = images[view]
            r = int(np.clip(round(f.y), 0, img.height - 1))
            c = int(np.clip(round(f.x), 0, img.width - 1))
            px = img.data[r, c]
            samples.append(px if img.channels == 3 else np.repeat(px, 3))
        colors.append(np.mean(samples, axis=0))
    return np.array(colors).reshape(-1, 3)


def incremental_reconstruct(images: Sequence[Raster], masks: Sequence[Optional[BinaryMask]],
                            intr: Intrinsics, cfg: Optional[SfmConfig] = None) -> Reconstruction:
    cfg = cfg or SfmConfig()
    if len(images) < 2:
        raise ValidationError(f"reconstruction needs at least 2 images, got {len(images)}")
    if len(masks) != len(images):
        raise ValidationError(f"got {len(images)} images but {len(masks)} masks")
    n_views = len(images)
    masks = [m if m is not None else BinaryMask(np.ones((img.height, img.width), dtype=bool))
             for img, m in zip(images, masks)]

    grays, sources = _descriptor_images(images, masks, cfg)
    features = [detect_features_masked(g, m, cfg.max_features, s) for g, m, s in zip(grays, masks, sources)]
    for v, f in enumerate(features):
        logger.info("view %d: %d features", v, len(f), extra={"stage": "detect"})

    verified = _verify_pairs(features, cfg)
    (i0, j0), R1, t1 = _initial_pair(verified, features, intr, cfg)

    Rs: List[Optional[np.ndarray]] = [None] * n_views
    ts: List[Optional[np.ndarray]] = [None] * n_views
    Rs[i0], ts[i0] = np.eye(3), np.zeros(3)
    Rs[j0], ts[j0] = R1, t1
    book = _TrackBook()
    base = Camera(intr.fx, intr.fy, intr.cx, intr.cy)

    def cam(v):
        return base.with_pose(Rs[v], ts[v]) if v != i0 else base

    def pair_matches(a, b):
        if (a, b) in verified:
            return [(m.index_a, m.index_b) for m in verified[(a, b)].inliers]
        if (b, a) in verified:
            return [(m.index_b, m.index_a) for m in verified[(b, a)].inliers]
        return []

    def triangulate_new(a, b):
        cand = [(fa, fb) for fa, fb in pair_matches(a, b)
                if (a, fa) not in book.owner and (b, fb) not in book.owner]
        if not cand:
            return 0
        xa = _positions(features[a])[[c[0] for c in cand]]
        xb = _positions(features[b])[[c[1] for c in cand]]
        ca, cb = cam(a), cam(b)
        X = _triangulate_pairs(ca, cb, xa, xb)
        good = np.isfinite(X).all(axis=1)
        good[good] &= (_reproj(ca, X[good], xa[good]) < cfg.reproj_threshold) & \
                      (_reproj(cb, X[good], xb[good]) < cfg.reproj_threshold)
        added = 0
        for k in np.nonzero(good)[0]:
            book.add_point(X[k], [(a, cand[k][0]), (b, cand[k][1])])
            added += 1
        return added

    def extend_tracks(a, b):
        """Attach b's features to points already observed through their partner in a"""
        for fa, fb in pair_matches(a, b):
            pid = book.owner.get((a, fa))
            if pid is None or (b, fb) in book.owner or b in book.tracks[pid]:
                continue
            if _reproj(cam(b), book.points[pid][None], _positions(features[b])[[fb]])[0] < cfg.reproj_threshold:
                book.observe(pid, b, fb)

    def filter_outliers():
        removed = 0
        for pid in book.live_ids():
            for view, feat in list(book.tracks[pid].items()):
                uv = _positions(features[view])[[feat]]
                if _reproj(cam(view), book.points[pid][None], uv)[0] > cfg.reproj_threshold:
                    book.forget(pid, view)
                    removed += 1
                    if not book.alive[pid]:
                        break
        return removed

    def run_ba():
        registered = [v for v in range(n_views) if Rs[v] is not None]
        order = {v: k for k, v in enumerate(registered)}
        live = book.live_ids()
        if not live:
            return
        obs_cam, obs_pt, obs_uv = [], [], []
        for k, pid in enumerate(live):
            for view, feat in book.tracks[pid].items():
                obs_cam.append(order[view])
                obs_pt.append(k)
                obs_uv.append(_positions(features[view])[feat])
        new_R, new_t, pts, c0, c1 = bundle_adjust(
            [Rs[v] for v in registered], [ts[v] for v in registered], np.stack([book.points[p] for p in live]),
            np.array(obs_cam), np.array(obs_pt), np.array(obs_uv), intr,
            fixed_cams=(order[i0],), max_iterations=cfg.ba_max_iterations, tolerance=cfg.ba_tolerance)
        scale = 1.0 / np.linalg.norm(new_t[order[j0]])
        for v in registered:
            Rs[v] = new_R[order[v]]
            ts[v] = new_t[order[v]] * scale if v != i0 else np.zeros(3)
        ts[j0] = ts[j0] / np.linalg.norm(ts[j0])
        for k, pid in enumerate(live):
            book.points[pid] = pts[k] * scale
        logger.info("bundle adjustment over %d views, %d points: rms %.4f -> %.4f px", len(registered), len(live),
                    math.sqrt(c0 / max(len(obs_cam), 1)), math.sqrt(c1 / max(len(obs_cam), 1)),
                    extra={"stage": "ba"})

    triangulate_new(i0, j0)
    filter_outliers()
    run_ba()
    filter_outliers()

    skipped: List[Dict[str, object]] = []
    pending = [v for v in range(n_views) if v not in (i0, j0)]
    deferred: Dict[int, str] = {}
    while pending:
        scores = []
        for v in pending:
            if v in deferred:
                continue
            corr = {}
            for r in range(n_views):
                if Rs[r] is None:
                    continue
                for fr, fv in pair_matches(r, v):
                    pid = book.owner.get((r, fr))
                    if pid is not None and fv not in corr:
                        corr[fv] = pid
            scores.append((len(corr), v, corr))
        if not scores:
            break
        scores.sort(key=lambda s: (-s[0], s[1]))
        count, v, corr = scores[0]
        if count < MIN_PNP:
            for c, other, _ in scores:
                deferred[other] = f"only {c} 2D-3D correspondences"
            break
        fv_list = sorted(corr)
        pts3 = np.stack([book.points[corr[f]] for f in fv_list])
        uv = _positions(features[v])[fv_list]
        try:
            R, t, inl = solve_pnp(pts3, uv, intr, cfg.reproj_threshold, seed=cfg.seed + v)
        except EstimationError as e:
            deferred[v] = str(e)
            logger.info("view %d deferred: %s", v, e, extra={"stage": "register"})
            continue
        pending.remove(v)
        Rs[v], ts[v] = R, t
        for f, ok in zip(fv_list, inl):
            if ok:
                book.observe(corr[f], v, f)
        logger.info("registered view %d with %d/%d inliers", v, int(inl.sum()), len(fv_list),
                    extra={"stage": "register"})
        for r in range(n_views):
            if Rs[r] is not None and r != v:
                extend_tracks(r, v)
                triangulate_new(r, v)
        filter_outliers()
        run_ba()
        filter_outliers()
        # new points may rescue views that failed before
        deferred.clear()

    for v in sorted(pending):
        reason = deferred.get(v, "too few 2D-3D correspondences")
        skipped.append({"view": v, "reason": reason})
        logger.warning("view %d skipped: %s", v, reason, extra={"stage": "register"})

    live = book.live_ids()
    tracks = [sorted(book.tracks[p].items()) for p in live]
    points = np.stack([book.points[p] for p in live]) if live else np.zeros((0, 3))
    cloud = SparseCloud(points, _sample_colors(images, features, tracks), [list(t) for t in tracks])
    cameras = [cam(v) if Rs[v] is not None else None for v in range(n_views)]
    logger.info("reconstruction: %d points, %d/%d views", len(cloud), sum(c is not None for c in cameras),
                n_views, extra={"stage": "sfm"})
    return Reconstruction(cloud, cameras, features, (i0, j0), skipped)


# ========== BACKGROUND FILTERING ==========

def filter_background_points(cloud: SparseCloud, cameras: Sequence[Optional[Camera]],
                             masks: Sequence[BinaryMask], fraction: float = 1.0,
                             all_views: bool = False) -> SparseCloud:
    """Keep points inside the object mask in at least ceil(fraction * n) of n views.

    The n views are those observing the point, or every registered view with a
    mask when `all_views` is set. A point behind a camera counts as outside.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError(f"fraction must lie in [0, 1], got {fraction}")
    if len(cameras) != len(masks):
        raise ValidationError(f"got {len(cameras)} cameras but {len(masks)} masks")
    registered = [v for v in range(len(cameras)) if cameras[v] is not None and masks[v] is not None]
    keep = np.zeros(len(cloud), dtype=bool)
    for i, track in enumerate(cloud.tracks):
        if all_views:
            views = registered
        else:
            views = [v for v, _ in track if cameras[v] is not None and masks[v] is not None]
        if not views:
            continue
        support = 0
        for v in views:
            uv, z = cameras[v].project(cloud.points[i][None])
            support += int(z[0] > 0 and masks[v].contains(uv[:, 0], uv[:, 1])[0])
        keep[i] = support >= math.ceil(fraction * len(views) - 1e-9)
    logger.info("background filter kept %d/%d points", int(keep.sum()), len(cloud), extra={"stage": "filter"})
    return cloud.subset(keep)


def reprojection_errors(cloud: SparseCloud, cameras: Sequence[Optional[Camera]],
                        features: Sequence[Sequence[Feature]]) -> np.ndarray:
    errs = []
    for i, track in enumerate(cloud.tracks):
        for view, feat in track:
            if cameras[view] is None:
                continue
            f = features[view][feat]
            errs.append(_reproj(cameras[view], cloud.points[i][None], np.array([[f.x, f.y]]))[0])
    return np.array(errs)
