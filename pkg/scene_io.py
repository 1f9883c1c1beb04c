"""Scene manifests, camera JSON, splat and point-cloud PLY files, and synthetic scenes.

Manifest JSON (paths are relative to the manifest's directory)::

    {
      "intrinsics": {"fx": 64.0, "fy": 64.0, "cx": 31.5, "cy": 31.5, "width": 64, "height": 64},
      "views": [
        {"name": "view_000",
         "image": "images/view_000.png",
         "mask": "masks/view_000.pgm",             # optional
         "attention": "attention/view_000.npy",    # optional
         "camera": {"quaternion": [w, x, y, z], "translation": [tx, ty, tz]},  # optional
         "split": "train"}                         # "train" (default) or "eval"
      ]
    }

Cameras use x_cam = R x_world + t with +z forward, +x right and +y down.
"""
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from plyfile import PlyData, PlyElement

from camera import Camera, Intrinsics, look_at
from errors import SceneFormatError, ValidationError
from gaussians import GaussianCloud, RenderSettings, accumulated_alpha, logit, rasterize, rgb_to_sh
from imaging import (BinaryMask, Raster, attention_for_view, load_attention, load_image, load_mask, save_attention,
                     save_image, save_mask)

logger = logging.getLogger(__name__)

SPLAT_PROPERTIES = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                    "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")
SPLAT_RECORD_BYTES = 4 * len(SPLAT_PROPERTIES)
SPLITS = ("train", "eval")


# ========== MANIFEST ==========

@dataclass
class ViewRecord:
    name: str
    image: str
    mask: Optional[str] = None
    attention: Optional[str] = None
    camera: Optional[Camera] = None
    split: str = "train"

    def to_dict(self) -> dict:
        d = {"name": self.name, "image": self.image, "split": self.split}
        if self.mask:
            d["mask"] = self.mask
        if self.attention:
            d["attention"] = self.attention
        if self.camera is not None:
            cam = self.camera.to_dict()
            d["camera"] = {"quaternion": cam["quaternion"], "translation": cam["translation"]}
        return d


@dataclass
class SceneManifest:
    intrinsics: Intrinsics
    views: List[ViewRecord]
    root: str = "."

    def resolve(self, rel: str) -> str:
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.to_dict(), "views": [v.to_dict() for v in self.views]}


@dataclass
class SceneView:
    record: ViewRecord
    image: Raster
    mask: Optional[BinaryMask] = None
    attention: Optional[Raster] = None

    @property
    def camera(self) -> Optional[Camera]:
        return self.record.camera


@dataclass
class Scene:
    manifest: SceneManifest
    views: List[SceneView]

    @property
    def intrinsics(self) -> Intrinsics:
        return self.manifest.intrinsics

    def split(self, name: str) -> List[SceneView]:
        return [v for v in self.views if v.record.split == name]

    def require_cameras(self) -> None:
        missing = [v.record.name for v in self.views if v.camera is None]
        if missing:
            raise ValidationError(f"views without camera poses: {', '.join(missing)}")


def _read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise SceneFormatError(path, "file not found") from e
    except json.JSONDecodeError as e:
        raise SceneFormatError(path, f"malformed JSON: {e}") from e
    except OSError as e:
        raise SceneFormatError(path, f"cannot read: {e}") from e


def write_json(data, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def _intrinsics(d: dict, path: str) -> Intrinsics:
    try:
        return Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                          int(d["width"]), int(d["height"]))
    except (KeyError, TypeError, ValueError) as e:
        raise SceneFormatError(path, f"bad intrinsics block: {e!r}") from e


def _camera(d: dict, intr: Intrinsics, path: str, where: str) -> Camera:
    try:
        return Camera.from_dict(d, intr)
    except (KeyError, TypeError, ValueError) as e:
        raise SceneFormatError(path, f"{where}: bad camera: {e}") from e


def parse_manifest(path: str) -> SceneManifest:
    data = _read_json(path)
    if not isinstance(data, dict) or "intrinsics" not in data or not isinstance(data.get("views"), list):
        raise SceneFormatError(path, "manifest needs an 'intrinsics' object and a 'views' list")
    intr = _intrinsics(data["intrinsics"], path)
    views = []
    for i, v in enumerate(data["views"]):
        if not isinstance(v, dict) or "image" not in v:
            raise SceneFormatError(path, f"view {i}: missing 'image'")
        name = str(v.get("name", f"view_{i:03d}"))
        split = v.get("split", "train")
        if split not in SPLITS:
            raise SceneFormatError(path, f"view {name}: unknown split {split!r}")
        cam = _camera(v["camera"], intr, path, f"view {name}") if v.get("camera") else None
        views.append(ViewRecord(name, v["image"], v.get("mask"), v.get("attention"), cam, split))
    return SceneManifest(intr, views, os.path.dirname(os.path.abspath(path)))


def _load_file(loader, manifest: SceneManifest, rel: str, manifest_path: str, name: str):
    full = manifest.resolve(rel)
    if not os.path.exists(full):
        raise SceneFormatError(manifest_path, f"view {name}: missing file {full}")
    return loader(full)


def load_scene(path: str) -> Scene:
    """Parse the manifest and decode every image, mask and attention map it references"""
    manifest = parse_manifest(path)
    intr = manifest.intrinsics
    views = []
    for rec in manifest.views:
        image = _load_file(load_image, manifest, rec.image, path, rec.name)
        if image.width != intr.width or image.height != intr.height:
            raise SceneFormatError(path, f"view {rec.name}: image is {image.width}x{image.height}, "
                                         f"intrinsics say {intr.width}x{intr.height}")
        mask = _load_file(load_mask, manifest, rec.mask, path, rec.name) if rec.mask else None
        if mask is not None and not mask.same_size(image):
            raise SceneFormatError(path, f"view {rec.name}: mask is {mask.width}x{mask.height}, "
                                         f"image is {image.width}x{image.height}")
        attn = _load_file(load_attention, manifest, rec.attention, path, rec.name) if rec.attention else None
        if attn is not None and not attn.same_size(image):
            raise SceneFormatError(path, f"view {rec.name}: attention is {attn.width}x{attn.height}, "
                                         f"image is {image.width}x{image.height}")
        views.append(SceneView(rec, image, mask, attn))
    logger.info("loaded %d views from %s", len(views), path, extra={"stage": "load"})
    return Scene(manifest, views)


def save_manifest(manifest: SceneManifest, path: str) -> None:
    write_json(manifest.to_dict(), path)


# ========== CAMERAS ==========

def save_cameras(cameras: Dict[str, Camera], intr: Intrinsics, path: str) -> None:
    """Named cameras sharing one intrinsics block; floats keep full precision"""
    write_json({
        "intrinsics": intr.to_dict(),
        "cameras": [dict(name=name, **{k: cam.to_dict()[k] for k in ("quaternion", "translation")})
                    for name, cam in cameras.items()],
    }, path)


def load_cameras(path: str) -> Tuple[Intrinsics, Dict[str, Camera]]:
    data = _read_json(path)
    if not isinstance(data, dict) or "intrinsics" not in data or not isinstance(data.get("cameras"), list):
        raise SceneFormatError(path, "cameras file needs 'intrinsics' and a 'cameras' list")
    intr = _intrinsics(data["intrinsics"], path)
    cams = {}
    for i, c in enumerate(data["cameras"]):
        name = str(c.get("name", f"view_{i:03d}"))
        cams[name] = _camera(c, intr, path, f"camera {name}")
    return intr, cams


def save_camera(cam: Camera, intr: Intrinsics, path: str) -> None:
    """Single camera with image size, the input of `main.py render`"""
    d = cam.to_dict()
    d.update(width=intr.width, height=intr.height)
    write_json(d, path)


def load_camera(path: str, view: Optional[str] = None) -> Tuple[Camera, Intrinsics]:
    """One camera from a single-camera file or from a `cameras.json` collection.

    In a collection `view` is a camera name or a 0-based index; it may be
    omitted only when the collection holds exactly one camera.
    """
    d = _read_json(path)
    if not isinstance(d, dict):
        raise SceneFormatError(path, "camera file must hold a JSON object")
    if "cameras" not in d:
        if view is not None:
            raise ValidationError(f"{path} holds a single camera; --view does not apply")
        intr = _intrinsics(d, path)
        return _camera(d, intr, path, "camera"), intr
    intr, cams = load_cameras(path)
    names = list(cams)
    if view is None:
        if len(names) != 1:
            raise ValidationError(f"{path} holds {len(names)} cameras; pick one with --view")
        return cams[names[0]], intr
    if view in cams:
        return cams[view], intr
    if view.isdigit() and int(view) < len(names):
        return cams[names[int(view)]], intr
    raise ValidationError(f"no camera {view!r} in {path}; have {', '.join(names)}")


# ========== PLY ==========

def _splat_element(cloud: GaussianCloud) -> PlyElement:
    arr = np.empty(len(cloud), dtype=[(name, "<f4") for name in SPLAT_PROPERTIES])
    columns = np.hstack([cloud.positions, cloud.colors, cloud.opacity_logits[:, None],
                         cloud.log_scales, cloud.rotations]) if len(cloud) else np.zeros((0, 14))
    for k, name in enumerate(SPLAT_PROPERTIES):
        arr[name] = columns[:, k]
    return PlyElement.describe(arr, "vertex")


def splats_to_bytes(cloud: GaussianCloud) -> bytes:
    """Binary little-endian PLY, 14 float32 properties per splat"""
    buf = io.BytesIO()
    PlyData([_splat_element(cloud)], text=False, byte_order="<").write(buf)
    return buf.getvalue()


def save_splats(cloud: GaussianCloud, path: str) -> None:
    with open(path, "wb") as f:
        f.write(splats_to_bytes(cloud))
    logger.info("wrote %d splats to %s", len(cloud), path, extra={"stage": "save"})


def _parse_header(data: bytes, path: str) -> Tuple[int, int, str, List[str]]:
    """(header length, vertex count, format, vertex property names)"""
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise SceneFormatError(path, "malformed PLY header")
    header_len = end + len(b"end_header\n")
    fmt, count, props, in_vertex = None, None, [], False
    for line in data[:end].decode("ascii", errors="replace").splitlines()[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format" and len(parts) >= 2:
            fmt = parts[1]
        elif parts[0] == "element" and len(parts) == 3:
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                try:
                    count = int(parts[2])
                except ValueError:
                    raise SceneFormatError(path, f"bad vertex count {parts[2]!r}") from None
            elif not parts[2].isdigit():
                raise SceneFormatError(path, f"bad count {parts[2]!r} for element {parts[1]!r}")
            elif int(parts[2]) > 0:
                raise SceneFormatError(path, f"unexpected element {parts[1]!r}")
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] not in ("property",):
            raise SceneFormatError(path, f"malformed PLY header line {line!r}")
    if fmt is None or count is None:
        raise SceneFormatError(path, "PLY header lacks a format line or a vertex element")
    return header_len, count, fmt, props


def load_splats(path: str) -> GaussianCloud:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise SceneFormatError(path, f"cannot read: {e}") from e
    header_len, count, fmt, props = _parse_header(data, path)
    unknown = [p for p in props if p not in SPLAT_PROPERTIES]
    missing = [p for p in SPLAT_PROPERTIES if p not in props]
    if unknown or missing:
        raise SceneFormatError(path, f"unexpected splat properties: unknown {unknown}, missing {missing}")
    if fmt != "binary_little_endian":
        raise SceneFormatError(path, f"splat PLY must be binary_little_endian, got {fmt}")
    expected = header_len + count * SPLAT_RECORD_BYTES
    if len(data) < expected:
        raise SceneFormatError(path, f"truncated payload: expected {expected} bytes, got {len(data)}")
    try:
        vertex = PlyData.read(io.BytesIO(data))["vertex"]
    except Exception as e:
        raise SceneFormatError(path, f"cannot parse PLY: {e}") from e
    col = {name: np.asarray(vertex[name], dtype=np.float64) for name in SPLAT_PROPERTIES}
    return GaussianCloud(
        positions=np.stack([col["x"], col["y"], col["z"]], axis=1),
        rotations=np.stack([col[f"rot_{i}"] for i in range(4)], axis=1),
        log_scales=np.stack([col[f"scale_{i}"] for i in range(3)], axis=1),
        opacity_logits=col["opacity"],
        colors=np.stack([col[f"f_dc_{i}"] for i in range(3)], axis=1),
    )


@dataclass
class PointSet:
    """Coloured points without tracks, as read back from a sparse-cloud PLY"""

    points: np.ndarray
    colors: np.ndarray


def save_point_cloud(points: np.ndarray, colors: np.ndarray, path: str) -> None:
    """ASCII PLY with double coordinates and 8-bit colour"""
    arr = np.empty(len(points), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8"),
                                       ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    if len(points):
        arr["x"], arr["y"], arr["z"] = points[:, 0], points[:, 1], points[:, 2]
        rgb = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        arr["red"], arr["green"], arr["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    PlyData([PlyElement.describe(arr, "vertex")], text=True).write(path)


def load_point_cloud(path: str) -> PointSet:
    try:
        vertex = PlyData.read(path)["vertex"]
    except FileNotFoundError as e:
        raise SceneFormatError(path, "file not found") from e
    except Exception as e:
        raise SceneFormatError(path, f"cannot parse PLY: {e}") from e
    names = vertex.data.dtype.names
    if not {"x", "y", "z"} <= set(names):
        raise SceneFormatError(path, "point cloud needs x, y, z properties")
    points = np.stack([np.asarray(vertex[k], dtype=np.float64) for k in ("x", "y", "z")], axis=1)
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([np.asarray(vertex[k], dtype=np.float64) for k in ("red", "green", "blue")], axis=1) / 255.0
    else:
        colors = np.full((len(points), 3), 0.5)
    return PointSet(points, colors)


def is_splat_ply(path: str) -> bool:
    try:
        with open(path, "rb") as f:
            head = f.read(4096)
    except OSError as e:
        raise SceneFormatError(path, f"cannot read: {e}") from e
    return b"property float f_dc_0" in head


# ========== SYNTHETIC SCENES ==========

@dataclass
class SyntheticSpec:
    seed: int = 0
    object: str = "cuboid"
    views: int = 4
    eval_views: int = 0
    size: int = 64
    background: str = "white"
    noise: float = 0.0
    splats: int = 20
    radius: float = 4.0
    elevation: float = 25.0
    arc: float = 60.0
    cells: int = 6

    def __post_init__(self):
        if self.object not in ("cuboid", "phantom"):
            raise ValidationError(f"object must be 'cuboid' or 'phantom', got {self.object!r}")
        if self.background not in ("white", "clutter"):
            raise ValidationError(f"background must be 'white' or 'clutter', got {self.background!r}")
        if self.views < 2:
            raise ValidationError(f"need at least 2 views, got {self.views}")
        if self.eval_views < 0:
            raise ValidationError(f"eval_views must be >= 0, got {self.eval_views}")
        if self.size < 32:
            raise ValidationError(f"image size must be >= 32, got {self.size}")
        if self.noise < 0:
            raise ValidationError(f"noise must be >= 0, got {self.noise}")
        if self.splats < 1 or self.cells < 1 or self.radius <= 0:
            raise ValidationError("splats, cells and radius must be positive")

    @classmethod
    def from_json(cls, path: str) -> "SyntheticSpec":
        data = _read_json(path)
        if not isinstance(data, dict):
            raise SceneFormatError(path, "spec must be a JSON object")
        try:
            return cls(**data)
        except TypeError as e:
            raise SceneFormatError(path, str(e)) from e

    @property
    def intrinsics(self) -> Intrinsics:
        c = (self.size - 1) / 2.0
        return Intrinsics(float(self.size), float(self.size), c, c, self.size, self.size)


def ring_cameras(spec: SyntheticSpec) -> List[Camera]:
    """Cameras spread over an arc of the ring, all looking at the origin"""
    total = spec.views + spec.eval_views
    half = math.radians(spec.arc) / 2.0
    elev = math.radians(spec.elevation)
    cams = []
    for theta in np.linspace(-half, half, total):
        center = spec.radius * np.array([math.cos(elev) * math.sin(theta), -math.sin(elev),
                                         -math.cos(elev) * math.cos(theta)])
        R, t = look_at(center, np.zeros(3))
        cams.append(Camera.from_pose(spec.intrinsics, R, t))
    return cams


def eval_indices(spec: SyntheticSpec) -> List[int]:
    """Held-out views, spread through the interior of the arc"""
    total = spec.views + spec.eval_views
    if spec.eval_views == 0:
        return []
    step = total / spec.eval_views
    return sorted({min(total - 1, int(step * (k + 0.5))) for k in range(spec.eval_views)})


SUPERSAMPLE = 3


def _pixel_rays(cam: Camera, intr: Intrinsics, dx: float = 0.0, dy: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    d = np.stack([(xs + dx - cam.cx) / cam.fx, (ys + dy - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1)
    d = d @ cam.R
    return cam.center, d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class Cuboid:
    half: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.6, 0.7]))
    yaw: float = 25.0
    textures: Optional[np.ndarray] = None

    @property
    def rotation(self) -> np.ndarray:
        a = math.radians(self.yaw)
        return np.array([[math.cos(a), 0.0, math.sin(a)], [0.0, 1.0, 0.0], [-math.sin(a), 0.0, math.cos(a)]])

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(hit distance or inf, colour) per ray"""
        Rb = self.rotation
        o = Rb.T @ origin
        d = dirs @ Rb
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-self.half - o) / d
            t2 = (self.half - o) / d
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        t_in = np.nanmax(near, axis=-1)
        t_out = np.nanmin(far, axis=-1)
        hit = (t_out >= t_in) & (t_in > 0)
        axis = np.nanargmax(near, axis=-1)
        p = o + np.where(hit, t_in, 0.0)[..., None] * d
        colors = np.zeros(dirs.shape)
        cells = self.textures.shape[1]
        for ax in range(3):
            a1, a2 = [k for k in range(3) if k != ax]
            for side, sign in enumerate((-1.0, 1.0)):
                sel = hit & (axis == ax) & (np.sign(p[..., ax]) == sign)
                u = (p[sel, a1] + self.half[a1]) / (2.0 * self.half[a1])
                v = (p[sel, a2] + self.half[a2]) / (2.0 * self.half[a2])
                iu = np.clip((u * cells).astype(int), 0, cells - 1)
                iv = np.clip((v * cells).astype(int), 0, cells - 1)
                colors[sel] = self.textures[2 * ax + side, iu, iv]
        return np.where(hit, t_in, np.inf), colors


GROUND_Y = 1.0
GROUND_CELL = 0.3
SKY = 0.75


def _ground(origin: np.ndarray, dirs: np.ndarray, table: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Textured plane y = GROUND_Y below the object (+y is down)"""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (GROUND_Y - origin[1]) / dirs[..., 1]
    hit = (dirs[..., 1] > 0) & (t > 0)
    t = np.where(hit, t, np.inf)
    p = origin + np.where(hit, t, 0.0)[..., None] * dirs
    n = table.shape[0]
    ix = np.floor(p[..., 0] / GROUND_CELL).astype(int) % n
    iz = np.floor(p[..., 2] / GROUND_CELL).astype(int) % n
    colors = np.where(hit[..., None], table[ix, iz], SKY)
    return t, colors


def _render_cuboid(cuboid: Cuboid, cam: Camera, intr: Intrinsics,
                   ground_table: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Supersampled ray cast; a pixel is object when any of its samples hits the cuboid first"""
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    color = np.zeros((intr.height, intr.width, 3))
    bits = np.zeros((intr.height, intr.width), dtype=bool)
    for dy in offsets:
        for dx in offsets:
            origin, dirs = _pixel_rays(cam, intr, dx, dy)
            t_obj, obj_col = cuboid.intersect(origin, dirs)
            if ground_table is not None:
                t_bg, bg_col = _ground(origin, dirs, ground_table)
                hit = np.isfinite(t_obj) & (t_obj < t_bg)
            else:
                hit = np.isfinite(t_obj)
                bg_col = np.ones(dirs.shape)
            color += np.where(hit[..., None], obj_col, bg_col)
            bits |= hit
    return color / SUPERSAMPLE ** 2, bits


def phantom_cloud(spec: SyntheticSpec, rng: np.random.Generator) -> GaussianCloud:
    """Random splats near the origin; values are float32-representable so PLY round trips are exact"""
    n = spec.splats
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    cloud = GaussianCloud(
        positions=rng.uniform(-0.6, 0.6, (n, 3)),
        rotations=q,
        log_scales=np.log(rng.uniform(0.08, 0.2, (n, 3))),
        opacity_logits=np.array([logit(p) for p in rng.uniform(0.5, 0.95, n)]),
        colors=rgb_to_sh(rng.uniform(0.1, 0.9, (n, 3))),
    )
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors"):
        setattr(cloud, name, getattr(cloud, name).astype(np.float32).astype(np.float64))
    return cloud


def phantom_settings(spec: SyntheticSpec) -> RenderSettings:
    return RenderSettings(spec.size, spec.size, background=(1.0, 1.0, 1.0))


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> SceneManifest:
    """Write a complete scene: images, masks, attention, cameras, manifest and ground truth.

    The phantom's float renders are kept under truth/ next to the PNGs so the
    ground-truth cloud can be checked against them without 8-bit loss.
    """
    rng = np.random.default_rng(spec.seed)
    intr = spec.intrinsics
    cams = ring_cameras(spec)
    held_out = set(eval_indices(spec))
    for sub in ("images", "masks", "attention", "truth"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    if spec.object == "phantom":
        truth = phantom_cloud(spec, rng)
        save_splats(truth, os.path.join(out_dir, "truth", "cloud.ply"))
        settings = phantom_settings(spec)
    else:
        cuboid = Cuboid(textures=rng.uniform(0.05, 0.95, (6, spec.cells, spec.cells, 3)))
        write_json({"half_extents": cuboid.half.tolist(), "yaw_degrees": cuboid.yaw,
                    "ground_y": GROUND_Y if spec.background == "clutter" else None},
                   os.path.join(out_dir, "truth", "geometry.json"))
    ground_table = rng.uniform(0.0, 1.0, (16, 16, 3))

    records = []
    for k, cam in enumerate(cams):
        name = f"view_{k:03d}"
        if spec.object == "phantom":
            rendered = rasterize(truth, cam, settings)
            bits = accumulated_alpha(truth, cam, settings) > 0.0
            np.save(os.path.join(out_dir, "truth", name + ".npy"), rendered.data)
            if spec.background == "clutter":
                cells = rng.uniform(0.0, 1.0, (spec.size // 4 + 1, spec.size // 4 + 1, 3))
                clutter = np.repeat(np.repeat(cells, 4, axis=0), 4, axis=1)[:spec.size, :spec.size]
                pixels = np.where(bits[..., None], rendered.data, clutter)
            else:
                pixels = rendered.data.copy()
        else:
            pixels, bits = _render_cuboid(cuboid, cam, intr, ground_table if spec.background == "clutter" else None)
        if spec.noise > 0:
            noisy = pixels + rng.standard_normal(pixels.shape) * (spec.noise / 255.0)
            pixels = np.where(bits[..., None], np.clip(noisy, 0.0, 1.0), pixels)

        image = Raster(pixels)
        mask = BinaryMask(bits)
        save_image(image, os.path.join(out_dir, "images", name + ".png"))
        save_mask(mask, os.path.join(out_dir, "masks", name + ".pgm"))
        save_attention(attention_for_view(image, mask), os.path.join(out_dir, "attention", name))
        records.append(ViewRecord(
            name, f"images/{name}.png", f"masks/{name}.pgm", f"attention/{name}.npy", cam,
            "eval" if k in held_out else "train",
        ))

    manifest = SceneManifest(intr, records, os.path.abspath(out_dir))
    save_manifest(manifest, os.path.join(out_dir, "scene.json"))
    save_cameras({r.name: r.camera for r in records}, intr, os.path.join(out_dir, "cameras.json"))
    write_json(asdict(spec), os.path.join(out_dir, "truth", "spec.json"))
    logger.info("synthetic %s scene with %d views written to %s", spec.object, len(records), out_dir,
                extra={"stage": "synth"})
    return manifest
