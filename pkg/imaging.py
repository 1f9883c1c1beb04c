"""2D rasters, Sobel attention masks, saliency thresholding and white compositing.

Every image in the pipeline is a `Raster`: a (height, width, channels) float64
array with values nominally in [0, 1]. Gradient fields produced by the Sobel
stage are stored in the same type and may leave that range.
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from errors import SceneFormatError, ValidationError

logger = logging.getLogger(__name__)


# ========== TYPES ==========

@dataclass(frozen=True)
class Raster:
    """Row-major raster with 1 or 3 channels"""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValidationError(f"raster must be HxW, HxWx1 or HxWx3, got shape {np.shape(self.data)}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError("raster must be at least 1x1")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """The single channel as an HxW array"""
        if self.channels != 1:
            raise ValidationError("plane requires a single-channel raster")
        return self.data[:, :, 0]

    def same_size(self, other) -> bool:
        return self.height == other.height and self.width == other.width

    @classmethod
    def full(cls, height: int, width: int, value, channels: int = 3) -> "Raster":
        arr = np.empty((height, width, channels), dtype=np.float64)
        arr[...] = value
        return cls(arr)


@dataclass(frozen=True)
class Kernel3x3:
    coefficients: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coefficients, dtype=np.float64)
        if arr.size != 9:
            raise ValidationError(f"a 3x3 kernel needs exactly 9 coefficients, got {arr.size}")
        object.__setattr__(self, "coefficients", arr.reshape(3, 3))


@dataclass(frozen=True)
class BinaryMask:
    """True marks object pixels"""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits, dtype=bool)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"mask must be a non-empty HxW array, got shape {np.shape(self.bits)}")
        object.__setattr__(self, "bits", arr)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def same_size(self, other) -> bool:
        return self.height == other.height and self.width == other.width

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Mask lookup at rounded subpixel positions; outside the frame is False"""
        xi = np.rint(np.asarray(x, dtype=np.float64))
        yi = np.rint(np.asarray(y, dtype=np.float64))
        inside = (xi >= 0) & (xi < self.width) & (yi >= 0) & (yi < self.height)
        out = np.zeros(np.shape(xi), dtype=bool)
        out[inside] = self.bits[yi[inside].astype(int), xi[inside].astype(int)]
        return out


SOBEL_X = Kernel3x3([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]])
SOBEL_Y = Kernel3x3([[-1, -2, -1], [0, 0, 0], [1, 2, 1]])
IDENTITY = Kernel3x3([[0, 0, 0], [0, 1, 0], [0, 0, 0]])

DEFAULT_SALIENCY_THRESHOLD = 0.5


def _require_channels(img: Raster, channels: int, name: str) -> None:
    if img.channels != channels:
        raise ValidationError(f"{name} must have {channels} channel(s), got {img.channels}")


def _require_same_size(a, b, name_a: str, name_b: str) -> None:
    if not a.same_size(b):
        raise ValidationError(
            f"{name_a} is {a.width}x{a.height} but {name_b} is {b.width}x{b.height}"
        )


# ========== ATTENTION PIPELINE ==========

def to_grayscale(img: Raster) -> Raster:
    """Unweighted channel mean"""
    _require_channels(img, 3, "img")
    return Raster(img.data.sum(axis=2) / 3.0)


def convolve3x3(img: Raster, k: Kernel3x3) -> Raster:
    """Cross-correlation with clamp-to-edge padding"""
    _require_channels(img, 1, "img")
    plane = img.plane
    h, w = plane.shape
    padded = np.pad(plane, 1, mode="edge")
    out = np.zeros_like(plane)
    for j in range(3):
        for i in range(3):
            out += k.coefficients[j, i] * padded[j:j + h, i:i + w]
    return Raster(out)


def sobel_gradients(img: Raster) -> Tuple[Raster, Raster]:
    return convolve3x3(img, SOBEL_X), convolve3x3(img, SOBEL_Y)


def gradient_magnitude(gx: Raster, gy: Raster) -> Raster:
    _require_same_size(gx, gy, "gx", "gy")
    return Raster(np.hypot(gx.data, gy.data))


def normalize_attention(g: Raster) -> Raster:
    """Min-max normalize to [0, 1]; a constant input maps to all zeros"""
    lo = float(g.data.min())
    hi = float(g.data.max())
    if hi == lo:
        return Raster(np.zeros_like(g.data))
    return Raster(np.clip((g.data - lo) / (hi - lo), 0.0, 1.0))


def attention_mask(img: Raster, enhance: float = 0.0) -> Raster:
    """Grayscale -> Sobel -> magnitude -> min-max normalization.

    With `enhance` > 0 the grayscale image is first boosted by its own
    normalized edge map (F' = F + enhance * A * F) and the pipeline is rerun.
    """
    gray = to_grayscale(img)
    attn = normalize_attention(gradient_magnitude(*sobel_gradients(gray)))
    if enhance > 0.0:
        boosted = enhance_features(gray, attn, enhance)
        attn = normalize_attention(gradient_magnitude(*sobel_gradients(boosted)))
    return attn


def classical_saliency(img: Raster) -> Raster:
    """Edge-strength saliency, a coarse stand-in for a learned segmentation map"""
    return attention_mask(img)


def enhance_features(f: Raster, a: Raster, lam: float) -> Raster:
    """F' = F + lam * (A * F), per channel"""
    _require_channels(a, 1, "attention")
    _require_same_size(f, a, "features", "attention")
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    return Raster(f.data + lam * (a.data * f.data))


# ========== MASKS ==========

def threshold_saliency(sal: Raster, t: float = DEFAULT_SALIENCY_THRESHOLD) -> BinaryMask:
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {t}")
    _require_channels(sal, 1, "saliency")
    return BinaryMask(sal.plane >= t)


def saliency_fallback_mask(img: Raster, t: float = DEFAULT_SALIENCY_THRESHOLD) -> BinaryMask:
    """Threshold the classical saliency and fill enclosed holes"""
    edges = threshold_saliency(classical_saliency(img), t)
    return BinaryMask(ndimage.binary_fill_holes(edges.bits))


def composite_white(img: Raster, mask: BinaryMask) -> Raster:
    _require_channels(img, 3, "img")
    _require_same_size(img, mask, "img", "mask")
    out = np.where(mask.bits[:, :, None], img.data, 1.0)
    return Raster(out)


def attention_for_view(img: Raster, mask: Optional[BinaryMask], source: str = "composited") -> Raster:
    """Attention map for one training view.

    `source="composited"` whitens the background first when a mask is known,
    so clutter outside the object does not attract weight.
    """
    if source not in ("composited", "original"):
        raise ValidationError(f"attention source must be 'composited' or 'original', got {source!r}")
    if source == "composited" and mask is not None:
        img = composite_white(img, mask)
    return attention_mask(img)


# ========== CODECS ==========

def _to_bytes(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)


def load_image(path: str) -> Raster:
    """PNG, PPM (P6) or PGM (P5); 8-bit values are divided by 255"""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "1", "I", "I;16", "F"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise SceneFormatError(path, f"cannot decode image: {e}") from e
    return Raster(arr / 255.0)


def save_image(img: Raster, path: str) -> None:
    """Format follows the extension; values are rounded and clamped to 8 bits"""
    pixels = _to_bytes(img.data)
    if img.channels == 1:
        im = Image.fromarray(np.ascontiguousarray(pixels[:, :, 0]))
    else:
        im = Image.fromarray(pixels)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm" and img.channels == 3:
        im = im.convert("L")
    im.save(path)


def load_mask(path: str) -> BinaryMask:
    """Any nonzero pixel is object"""
    img = load_image(path)
    plane = img.data.mean(axis=2)
    return BinaryMask(plane > 0.0)


def save_mask(mask: BinaryMask, path: str) -> None:
    """0/255 PGM (or PNG by extension)"""
    Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8)).save(path)


def save_attention(attn: Raster, stem: str) -> Tuple[str, str]:
    """Quantized PGM for inspection plus a lossless .npy sidecar for training"""
    pgm_path = stem + ".pgm"
    npy_path = stem + ".npy"
    save_image(attn, pgm_path)
    np.save(npy_path, attn.plane)
    return pgm_path, npy_path


def load_attention(path: str) -> Raster:
    """Read the .npy sidecar, or a quantized image as a fallback"""
    if path.endswith(".npy"):
        try:
            arr = np.load(path)
        except (OSError, ValueError) as e:
            raise SceneFormatError(path, f"cannot read attention sidecar: {e}") from e
        return Raster(arr)
    img = load_image(path)
    return Raster(img.data.mean(axis=2))
