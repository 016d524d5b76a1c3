"""
Frame standardization: fan extraction, annotation removal,
square padding / resize and training-time augmentation.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import cv2
import numpy as np
from scipy import ndimage

from ..config import PreprocessConfig
from ..errors import DomainError, NoForegroundError, ShapeError
from ..models import AugmentationPolicy
from .storage import read_png, write_png

logger = logging.getLogger(__name__)


def _as_float(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32, copy=False)


# ==================== Fan ====================

def fan_box(fan_mask: np.ndarray) -> Tuple[slice, slice]:
    rows = np.flatnonzero(fan_mask.any(axis=1))
    cols = np.flatnonzero(fan_mask.any(axis=0))
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def extract_fan(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Largest nonzero 8-connected component, holes filled, cropped to its box.
    Returns (cropped image, full-size fan mask)."""
    if image.size == 0:
        raise DomainError("extract_fan: empty image")
    foreground = (image > 0) if image.ndim == 2 else np.any(image > 0, axis=2)
    if not foreground.any():
        raise NoForegroundError("no foreground: image has no nonzero pixel")

    n, labels, stats, _ = cv2.connectedComponentsWithStats(foreground.astype(np.uint8), connectivity=8)
    largest = 1 + int(np.argmax(stats[1:n, cv2.CC_STAT_AREA]))
    mask = ndimage.binary_fill_holes(labels == largest)

    return image[fan_box(mask)], mask


# ==================== Annotations ====================

def chroma(image: np.ndarray) -> np.ndarray:
    """max channel - min channel, on [0, 1] intensities."""
    img = _as_float(image)
    return img.max(axis=2) - img.min(axis=2)


def annotation_mask(
    image: np.ndarray,
    chroma_threshold: float = PreprocessConfig.chroma_threshold,
    dilation_px: int = PreprocessConfig.dilation_px,
) -> np.ndarray:
    """Colored pixels, dilated by an elliptical kernel of radius dilation_px."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 color image, got shape {image.shape}")
    marked = (chroma(image) > chroma_threshold).astype(np.uint8)
    if dilation_px > 0 and marked.any():
        kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * dilation_px + 1, 2 * dilation_px + 1))
        marked = cv2.dilate(marked, kernel)
    return marked.astype(bool)


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luminance; gray pixels keep their exact value."""
    img = _as_float(image)
    lum = cv2.cvtColor(img, cv2.COLOR_RGB2GRAY)
    is_gray = (img[..., 0] == img[..., 1]) & (img[..., 1] == img[..., 2])
    return np.where(is_gray, img[..., 0], lum).astype(np.float32)


def remove_annotations(
    image: np.ndarray,
    chroma_threshold: float = PreprocessConfig.chroma_threshold,
    dilation_px: int = PreprocessConfig.dilation_px,
    inpaint_radius_px: int = PreprocessConfig.inpaint_radius_px,
    return_mask: bool = False,
):
    """Inpaint colored overlays (Telea fast marching) and return grayscale."""
    mask = annotation_mask(image, chroma_threshold, dilation_px)
    gray = to_gray(image)
    if mask.any():
        gray = cv2.inpaint(gray, mask.astype(np.uint8), inpaint_radius_px, cv2.INPAINT_TELEA)
        gray = np.clip(gray, 0.0, 1.0).astype(np.float32)
    return (gray, mask) if return_mask else gray


# ==================== Geometry ====================

def pad_to_square(image: np.ndarray) -> np.ndarray:
    """Zero-pad the shorter side equally; odd remainder goes bottom/right."""
    h, w = image.shape[:2]
    if h == w:
        return image
    total = abs(h - w)
    before, after = total // 2, total - total // 2
    pad = [(before, after), (0, 0)] if h < w else [(0, 0), (before, after)]
    pad += [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="constant", constant_values=0)


def standardize(image: np.ndarray, size: int = PreprocessConfig.image_size) -> np.ndarray:
    if image.size == 0:
        raise DomainError("standardize: empty image")
    square = pad_to_square(_as_float(image))
    if square.shape[0] == size:
        return square.copy()
    return cv2.resize(square, (size, size), interpolation=cv2.INTER_LINEAR)


def _sample(rng: np.random.Generator, bounds: Tuple[float, float]) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def augment(
    image: np.ndarray,
    policy: AugmentationPolicy,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Rotate, translate, then jitter brightness / contrast / saturation."""
    rng = rng if rng is not None else np.random.default_rng(policy.seed)
    angle = _sample(rng, policy.rotation_deg_range)
    tx = _sample(rng, policy.translation_frac_range)
    ty = _sample(rng, policy.translation_frac_range)
    brightness = _sample(rng, policy.brightness_range)
    contrast = _sample(rng, policy.contrast_range)
    saturation = _sample(rng, policy.saturation_range)

    out = _as_float(image).copy()
    h, w = out.shape[:2]

    if angle != 0.0 or tx != 0.0 or ty != 0.0:
        rotation = np.vstack([cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0), [0, 0, 1]])
        shift = np.array([[1, 0, tx * w], [0, 1, ty * h], [0, 0, 1]], dtype=np.float64)
        matrix = (shift @ rotation)[:2]
        out = cv2.warpAffine(out, matrix, (w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0)

    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        mean = float(out.mean())
        out = mean + contrast * (out - mean)
    if saturation != 1.0 and out.ndim == 3 and out.shape[2] == 3:
        gray = cv2.cvtColor(out.astype(np.float32), cv2.COLOR_RGB2GRAY)[..., None]
        out = gray + saturation * (out - gray)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ==================== Batch ====================

def preprocess_frame(
    image: np.ndarray,
    config: PreprocessConfig,
    masks: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[np.ndarray, int, Dict[str, np.ndarray]]:
    """Full chain for one stored frame. Structure masks, when given, follow
    the same crop and resize. Returns (standardized, inpainted pixel count, masks)."""
    if image.ndim == 3:
        gray, mask = remove_annotations(
            image, config.chroma_threshold, config.dilation_px, config.inpaint_radius_px, return_mask=True
        )
        inpainted = int(mask.sum())
    else:
        gray, inpainted = _as_float(image), 0
    crop, fan = extract_fan(gray)
    box = fan_box(fan)
    std_masks = {
        name: standardize(m[box].astype(np.float32), config.image_size) >= 0.5
        for name, m in (masks or {}).items()
    }
    return standardize(crop, config.image_size), inpainted, std_masks


def load_frame(path, config: PreprocessConfig) -> np.ndarray:
    return preprocess_frame(read_png(path, color=True), config)[0]


def process_directory(in_dir: str, out_dir: str, config: PreprocessConfig) -> Dict[str, dict]:
    """Standardize every PNG under in_dir into out_dir; returns the sidecar report."""
    src, dst = Path(in_dir), Path(out_dir)
    paths = sorted(src.rglob("*.png"))
    if not paths:
        raise DomainError(f"no PNG images under {in_dir}")

    report: Dict[str, dict] = {}
    for path in paths:
        rel = path.relative_to(src).as_posix()
        try:
            out, inpainted, _ = preprocess_frame(read_png(path, color=True), config)
        except NoForegroundError:
            logger.warning(f"Skipping {rel}: no foreground")
            report[rel] = {"status": "skipped", "inpainted_pixels": 0}
            continue
        write_png(dst / rel, out)
        report[rel] = {"status": "ok", "inpainted_pixels": inpainted}

    n_ok = sum(1 for r in report.values() if r["status"] == "ok")
    logger.info(f"Preprocessed {n_ok}/{len(paths)} images into {out_dir}")
    return report
