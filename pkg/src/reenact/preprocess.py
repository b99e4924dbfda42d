"""Frame sampling, face cropping, grid split, resizing and compression proxy.

The compression proxy replaces a real H.264 encoder: every 8x8 block of each
channel is DCT-transformed, its coefficients are uniformly quantized with step
``2 ** (qp / 6)`` (the quantizer step doubles every 6 qp, as in H.264), and the
block is transformed back. ``qp == 0`` is an exact passthrough.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.fft import dctn, idctn

log = logging.getLogger(__name__)

BLOCK = 8


@dataclass
class Frame:
    pixels: np.ndarray  # H x W x 3, uint8
    frame_index: int = 0
    video_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"frame pixels must be H x W x 3, got {self.pixels.shape}")
        if self.pixels.shape[0] < 8 or self.pixels.shape[1] < 8:
            raise ValueError(f"frame must be at least 8x8, got {self.pixels.shape[:2]}")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")


@dataclass(frozen=True)
class FaceBox:
    center_x: float
    center_y: float
    width: float
    height: float
    source: str = "annotation"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"face box must have positive size, got {self.width}x{self.height}")

    def intersects(self, height: int, width: int) -> bool:
        x0, x1 = self.center_x - self.width / 2, self.center_x + self.width / 2
        y0, y1 = self.center_y - self.height / 2, self.center_y + self.height / 2
        return x1 > 0 and y1 > 0 and x0 < width and y0 < height


@dataclass(frozen=True)
class CompressionLevel:
    name: str
    qp: int

    def __post_init__(self):
        if self.qp < 0:
            raise ValueError(f"qp must be >= 0, got {self.qp}")

    @property
    def step(self) -> float:
        return 2.0 ** (self.qp / 6.0)

    @classmethod
    def from_qp(cls, qp: int) -> "CompressionLevel":
        return cls(QP_NAMES.get(int(qp), "custom"), int(qp))


QP_NAMES = {0: "no-c", 23: "easy-c", 40: "hard-c"}
NO_C = CompressionLevel("no-c", 0)
EASY_C = CompressionLevel("easy-c", 23)
HARD_C = CompressionLevel("hard-c", 40)
LEVELS = (NO_C, EASY_C, HARD_C)


@dataclass
class PreprocessConfig:
    resolution: int = 64
    margin: float = 1.0
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        if self.margin < 1.0:
            raise ValueError("margin must be >= 1.0")
        if (self.mean is None) != (self.std is None):
            raise ValueError("mean and std must be given together")


REGION_NAMES = ("x1_full_face", "x2_top_left", "x3_top_right", "x4_bottom_left", "x5_bottom_right")


@dataclass
class RegionSet:
    """Full face plus the four grid quadrants, each 3 x S x S."""

    x1_full_face: np.ndarray
    x2_top_left: np.ndarray
    x3_top_right: np.ndarray
    x4_bottom_left: np.ndarray
    x5_bottom_right: np.ndarray

    def __post_init__(self):
        shapes = {r.shape for r in self.regions()}
        if len(shapes) != 1:
            raise ValueError(f"all regions must share one resolution, got {shapes}")
        (shape,) = shapes
        if len(shape) != 3 or shape[0] != 3 or shape[1] != shape[2]:
            raise ValueError(f"regions must be 3 x S x S, got {shape}")

    def regions(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in REGION_NAMES]

    @property
    def resolution(self) -> int:
        return self.x1_full_face.shape[1]

    def as_array(self) -> np.ndarray:
        return np.stack(self.regions())


# -- frame sampling --------------------------------------------------------

def sample_frames(frames: Sequence, k: int, seed: int) -> list:
    """Pick ``k`` distinct frames uniformly without replacement, in index order."""
    if k > len(frames):
        raise ValueError(f"cannot sample {k} frames from {len(frames)}")
    if k < 0:
        raise ValueError("k must be non-negative")
    rng = np.random.Generator(np.random.Philox(seed))
    idx = np.sort(rng.choice(len(frames), size=k, replace=False))
    return [frames[i] for i in idx]


# -- cropping --------------------------------------------------------------

def crop_window(height: int, width: int, box: FaceBox, margin: float = 1.0) -> tuple[int, int, int]:
    """Top, left and side of the square crop for ``box`` inside a frame."""
    if margin < 1.0:
        raise ValueError("margin must be >= 1.0")
    if not box.intersects(height, width):
        raise ValueError(f"face box {box} does not intersect the {height}x{width} frame")
    side = int(round(margin * max(box.width, box.height)))
    side = max(side, 1)
    limit = min(height, width)
    if side > limit:
        warnings.warn(f"crop side {side} exceeds frame size {limit}; clamping", RuntimeWarning, stacklevel=3)
        side = limit
    left = int(round(box.center_x - side / 2))
    top = int(round(box.center_y - side / 2))
    left = min(max(left, 0), width - side)
    top = min(max(top, 0), height - side)
    return top, left, side


def square_crop(frame, box: FaceBox, margin: float = 1.0) -> np.ndarray:
    """Square crop centred on the face; shifted, not shrunk, to stay in frame."""
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    top, left, side = crop_window(pixels.shape[0], pixels.shape[1], box, margin)
    return pixels[top:top + side, left:left + side].copy()


def grid_split(face: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """2x2 split at floor(H/2), floor(W/2): top-left, top-right, bottom-left, bottom-right."""
    h, w = face.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"grid_split needs at least 2x2, got {h}x{w}")
    r, c = h // 2, w // 2
    return face[:r, :c], face[:r, c:], face[r:, :c], face[r:, c:]


# -- resizing --------------------------------------------------------------

@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] interpolation matrix, half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        src = (d + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(image: np.ndarray, target: int, target_w: int | None = None) -> np.ndarray:
    """Bilinear resize of an H x W (x C) image to ``target`` x ``target``.

    Separable: rows and columns are interpolated with fixed weight matrices.
    The output is float64 and stays within the input's value range.
    """
    target_w = target if target_w is None else target_w
    if target < 1 or target_w < 1:
        raise ValueError("target size must be positive")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (target, target_w):
        return img.copy()
    rh = _bilinear_matrix(h, target)
    rw = _bilinear_matrix(w, target_w)
    if img.ndim == 2:
        return rh @ img @ rw.T
    out = np.einsum("ah,hwc->awc", rh, img)
    return np.einsum("bw,awc->abc", rw, out)


# -- compression proxy -----------------------------------------------------

def degrade(image: np.ndarray, level: CompressionLevel | int, seed: int = 0) -> np.ndarray:
    """Blockwise DCT quantization of an 8-bit image (H x W or H x W x C).

    ``seed`` is accepted for interface symmetry; the transform is
    deterministic. Returns uint8 for uint8 input.
    """
    if isinstance(level, (int, np.integer)):
        level = CompressionLevel.from_qp(int(level))
    img = np.asarray(image)
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError(f"degrade needs images of at least 8x8, got {img.shape[:2]}")
    if level.qp == 0:
        return img.copy()
    squeeze = img.ndim == 2
    x = img[..., None] if squeeze else img
    h, w, c = x.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    xf = x.astype(np.float64)
    if ph or pw:
        xf = np.pad(xf, ((0, ph), (0, pw), (0, 0)), mode="edge")
    hb, wb = xf.shape[0] // BLOCK, xf.shape[1] // BLOCK
    # (hb, 8, wb, 8, c) -> blocks over axes 1 and 3
    blocks = xf.reshape(hb, BLOCK, wb, BLOCK, c)
    coef = dctn(blocks, type=2, norm="ortho", axes=(1, 3))
    q = level.step
    coef = np.round(coef / q) * q
    rec = idctn(coef, type=2, norm="ortho", axes=(1, 3)).reshape(hb * BLOCK, wb * BLOCK, c)[:h, :w]
    if np.issubdtype(img.dtype, np.integer):
        out = np.clip(np.round(rec), 0, 255).astype(img.dtype)
    else:
        lo, hi = (0.0, 1.0) if img.max(initial=0) <= 1.0 else (0.0, 255.0)
        out = np.clip(rec, lo, hi).astype(img.dtype)
    return out[..., 0] if squeeze else out


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 255.0) -> float:
    mse = np.mean((np.asarray(reference, np.float64) - np.asarray(test, np.float64)) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


# -- full pipeline ---------------------------------------------------------

def _to_chw(img: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    x = img / 255.0
    if config.mean is not None:
        x = (x - np.asarray(config.mean)) / np.asarray(config.std)
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


def make_region_set(frame, box: FaceBox, level: CompressionLevel | int = NO_C, config: PreprocessConfig | None = None, seed: int = 0) -> RegionSet:
    """degrade -> square crop -> 2x2 split -> resize all five -> scale to [0, 1]."""
    config = config or PreprocessConfig()
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    degraded = degrade(pixels, level, seed)
    face = square_crop(degraded, box, config.margin)
    s = config.resolution
    parts = [face, *grid_split(face)]
    return RegionSet(*(_to_chw(resize_bilinear(p, s), config) for p in parts))


def region_mask(mask: np.ndarray, box: FaceBox, config: PreprocessConfig | None = None) -> np.ndarray:
    """Map a frame-space mask into full-face crop space at model resolution."""
    config = config or PreprocessConfig()
    top, left, side = crop_window(mask.shape[0], mask.shape[1], box, config.margin)
    crop = mask[top:top + side, left:left + side].astype(np.float64)
    return resize_bilinear(crop, config.resolution)


def build_region_array(frames: Sequence, boxes: Sequence[FaceBox], level: CompressionLevel | int, config: PreprocessConfig | None = None) -> np.ndarray:
    """Stack RegionSets for many frames into a float32 [N, 5, 3, S, S] array."""
    config = config or PreprocessConfig()
    s = config.resolution
    out = np.empty((len(frames), 5, 3, s, s), dtype=np.float32)
    for i, (fr, bx) in enumerate(zip(frames, boxes)):
        out[i] = make_region_set(fr, bx, level, config).as_array()
    return out
