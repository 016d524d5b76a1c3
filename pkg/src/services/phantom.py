"""
Synthetic fetal ultrasound phantom.
Renders fan-shaped frames with class-specific geometry, burned-in
annotations and heart videos. Every output is a pure function of its spec.
"""

import logging
import math
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np

from ..config import ZeroShotConfig
from ..constants import (
    ViewClass, BrainSubview, Subgroup, Split, GA_MIN_DAYS, GA_MAX_DAYS,
    VIDEO_MIN_FRAMES, VIDEO_MAX_FRAMES, SEG_STRUCTURES,
)
from ..errors import DomainError
from ..models import ImageRecord, PhantomImage, PhantomSpec, QuantileModel, VideoRecord, format_ga
from .growth import load_quantile_models, median_hc_mm

logger = logging.getLogger(__name__)

DEFAULT_HEIGHT = 224
DEFAULT_WIDTH = 256

FAN_HALF_ANGLE_DEG = 48.0
FAN_NEAR_FIELD_PX = 12
HEAD_ASPECT = 0.8              # minor / major semi-axis
ANNOTATION_RGB = (1.0, 0.95, 0.15)

ANNOTATION_TAGS: Dict[ViewClass, str] = {
    ViewClass.BRAIN: "HC",
    ViewClass.ABDOMEN: "AC",
    ViewClass.FEMUR: "FL",
    ViewClass.HEART: "4CH",
    ViewClass.CERVIX: "CX",
    ViewClass.OTHER: "US",
}


@lru_cache(maxsize=4)
def default_quantiles(path: Optional[str] = None) -> Dict[float, QuantileModel]:
    return load_quantile_models(path or ZeroShotConfig().quantile_path)


def ellipse_perimeter(a: float, b: float) -> float:
    """Ramanujan's second approximation."""
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))


def head_semi_axes(hc_mm: float, spacing_mm: float) -> Tuple[float, float]:
    """Semi-axes (px) of the ellipse whose perimeter in mm equals hc_mm."""
    unit = ellipse_perimeter(1.0, HEAD_ASPECT)
    a = hc_mm / spacing_mm / unit
    return a, a * HEAD_ASPECT


# ==================== Geometry helpers ====================

def _grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:height, 0:width].astype(np.float64)


def _ellipse(yy, xx, cy, cx, a, b, angle: float = 0.0) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _segment(yy, xx, p0, p1, half_width: float) -> np.ndarray:
    """Pixels within half_width of the segment p0-p1 (points as (y, x))."""
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / length2, 0.0, 1.0)
    dist2 = (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2
    return dist2 <= half_width ** 2


def fan_geometry(height: int, width: int) -> Tuple[float, float, float]:
    """Apex row, apex column, radius."""
    return 6.0, width / 2.0, height - 10.0


def fan_mask(height: int, width: int) -> np.ndarray:
    yy, xx = _grid(height, width)
    ay, ax, radius = fan_geometry(height, width)
    dy, dx = yy - ay, xx - ax
    r = np.hypot(dy, dx)
    angle = np.degrees(np.arctan2(np.abs(dx), dy))
    return (dy > 0) & (r <= radius) & (r >= FAN_NEAR_FIELD_PX) & (angle <= FAN_HALF_ANGLE_DEG)


# ==================== Class signatures ====================

def _draw_brain(img, structures, yy, xx, cy, cx, spec, models):
    hc = median_hc_mm(spec.ga_days, models)
    a, b = head_semi_axes(hc, spec.pixel_spacing_mm)
    wall = max(2.0, 0.07 * b)
    head = _ellipse(yy, xx, cy, cx, a, b)
    inner = _ellipse(yy, xx, cy, cx, max(a - wall, 1.0), max(b - wall, 1.0))
    img[head] = 0.45
    img[head & ~inner] = 0.92
    img[_segment(yy, xx, (cy, cx - 0.8 * a), (cy, cx + 0.8 * a), max(1.0, 0.02 * b)) & inner] = 0.8

    subview = spec.brain_subview or BrainSubview.TRANSTHALAMIC
    if subview == BrainSubview.TRANSTHALAMIC:
        for side in (-1, 1):
            img[_ellipse(yy, xx, cy + side * 0.2 * b, cx, 0.16 * a, 0.14 * b) & inner] = 0.18
    elif subview == BrainSubview.TRANSCEREBELLUM:
        for side in (-1, 1):
            img[_ellipse(yy, xx, cy + side * 0.16 * b, cx + 0.55 * a, 0.13 * a, 0.13 * a) & inner] = 0.85
    else:
        img[_segment(yy, xx, (cy - 0.35 * b, cx - 0.5 * a), (cy - 0.35 * b, cx + 0.45 * a), max(1.0, 0.06 * b)) & inner] = 0.16

    structures["head"] = head
    return (a, b), hc


def _draw_abdomen(img, structures, yy, xx, cy, cx, spec, models):
    ac = 0.87 * median_hc_mm(spec.ga_days, models)
    r = ac / spec.pixel_spacing_mm / (2 * math.pi)
    body = _ellipse(yy, xx, cy, cx, r, r)
    inner = _ellipse(yy, xx, cy, cx, max(r - 2.5, 1.0), max(r - 2.5, 1.0))
    stomach = _ellipse(yy, xx, cy - 0.2 * r, cx - 0.3 * r, 0.32 * r, 0.24 * r) & inner
    spine = _ellipse(yy, xx, cy + 0.62 * r, cx + 0.1 * r, 0.16 * r, 0.16 * r) & inner
    img[body] = 0.5
    img[body & ~inner] = 0.78
    img[stomach] = 0.12
    img[spine] = 0.95
    structures.update(abdomen=body, stomach=stomach, spine=spine)


def _heart_chambers(yy, xx, cy, cx, r, scales, chd: bool) -> Dict[str, np.ndarray]:
    """Quarter discs separated by a septal cross. scales: atrial, ventricular."""
    gap = 0.12 * r
    rq = 0.85 * r
    atrial, ventricular = scales
    quadrants = {
        "ra": (yy < cy - gap) & (xx < cx - gap),
        "la": (yy < cy - gap) & (xx > cx + gap),
        "rv": (yy > cy + gap) & (xx < cx - gap),
        "lv": (yy > cy + gap) & (xx > cx + gap),
    }
    chambers = {}
    for name, quad in quadrants.items():
        radius = rq * (atrial if name in ("ra", "la") else ventricular)
        if chd and name == "lv":
            radius *= 0.45
        chambers[name] = quad & _ellipse(yy, xx, cy, cx, radius, radius)
    return chambers


def _draw_heart(img, structures, yy, xx, cy, cx, spec, models, phase: float = 0.0):
    r = (22.0 + 22.0 * (spec.ga_days - GA_MIN_DAYS) / (GA_MAX_DAYS - GA_MIN_DAYS)) / spec.pixel_spacing_mm
    r = min(r, 0.3 * img.shape[0])
    swing = 0.12 * math.sin(phase)
    disc = _ellipse(yy, xx, cy, cx, r, r)
    img[disc] = 0.8
    chambers = _heart_chambers(yy, xx, cy, cx, r, (1.0 + swing, 1.0 - swing), spec.chd)
    for mask in chambers.values():
        img[mask] = 0.1
    structures.update(chambers)


def _draw_femur(img, structures, yy, xx, cy, cx, spec, models, rng):
    length = 0.2 * median_hc_mm(spec.ga_days, models) / spec.pixel_spacing_mm
    angle = math.radians(rng.uniform(-20.0, 20.0))
    dy, dx = 0.5 * length * math.sin(angle), 0.5 * length * math.cos(angle)
    bar = _segment(yy, xx, (cy - dy, cx - dx), (cy + dy, cx + dx), max(1.5, 0.04 * length))
    img[bar] = 0.95
    structures["femur"] = bar


def _draw_cervix(img, structures, yy, xx, cy, cx, spec, models, rng):
    half = 0.22 * img.shape[0] * rng.uniform(0.9, 1.1)
    tip = (int(cx - 1.1 * half), int(cy))
    top = (int(cx + half), int(cy - 0.5 * half))
    bottom = (int(cx + half), int(cy + 0.5 * half))
    wedge = np.zeros(img.shape, np.uint8)
    cv2.fillPoly(wedge, [np.array([tip, top, bottom], np.int32)], 1)
    wedge = wedge.astype(bool)
    img[wedge] = 0.62
    img[_segment(yy, xx, (cy, cx - 0.9 * half), (cy, cx + half), 1.2) & wedge] = 0.15


def _draw_other(img, structures, yy, xx, cy, cx, spec, models, rng):
    for _ in range(rng.integers(3, 6)):
        by = cy + rng.uniform(-0.25, 0.25) * img.shape[0]
        bx = cx + rng.uniform(-0.25, 0.25) * img.shape[1]
        ra, rb = rng.uniform(6, 18, size=2)
        img[_ellipse(yy, xx, by, bx, ra, rb, rng.uniform(0, math.pi))] = rng.uniform(0.5, 0.7)


# ==================== Public API ====================

def _render(
    spec: PhantomSpec,
    height: int,
    width: int,
    models: Dict[float, QuantileModel],
    phase: float = 0.0,
    noise_key: Tuple[int, ...] = (),
) -> PhantomImage:
    rng = np.random.default_rng([spec.noise_seed, *noise_key])
    geo_rng = np.random.default_rng([spec.noise_seed, 7])
    yy, xx = _grid(height, width)
    fan = fan_mask(height, width)
    _, _, radius = fan_geometry(height, width)

    # depth-attenuated tissue
    depth = np.hypot(yy - 6.0, xx - width / 2.0) / radius
    img = 0.36 - 0.1 * depth

    cy = 0.57 * height + geo_rng.uniform(-4, 4)
    cx = width / 2.0 + geo_rng.uniform(-4, 4)
    structures: Dict[str, np.ndarray] = {}
    axes, hc = None, None

    view = spec.view_class
    if view == ViewClass.BRAIN:
        axes, hc = _draw_brain(img, structures, yy, xx, cy, cx, spec, models)
    elif view == ViewClass.ABDOMEN:
        _draw_abdomen(img, structures, yy, xx, cy, cx, spec, models)
    elif view == ViewClass.HEART:
        _draw_heart(img, structures, yy, xx, cy, cx, spec, models, phase)
    elif view == ViewClass.FEMUR:
        _draw_femur(img, structures, yy, xx, cy, cx, spec, models, geo_rng)
    elif view == ViewClass.CERVIX:
        _draw_cervix(img, structures, yy, xx, cy, cx, spec, models, geo_rng)
    else:
        _draw_other(img, structures, yy, xx, cy, cx, spec, models, geo_rng)

    # multiplicative speckle, zero background
    img = img * rng.uniform(0.9, 1.1, size=img.shape)
    img = np.clip(np.where(fan, img, 0.0), 0.0, 1.0).astype(np.float32)
    structures = {k: (v & fan) for k, v in structures.items()}

    rgb = np.repeat(img[:, :, None], 3, axis=2)
    annotation = np.zeros((height, width), dtype=bool)
    pixels = img.copy()
    if spec.annotation_text:
        glyphs = np.zeros((height, width), np.uint8)
        origin = (int(0.12 * width), int(0.82 * height))
        cv2.putText(glyphs, spec.annotation_text, origin, cv2.FONT_HERSHEY_SIMPLEX, 0.45, 1, 1, cv2.LINE_8)
        annotation = glyphs.astype(bool)
        rgb[annotation] = np.asarray(ANNOTATION_RGB, dtype=np.float32)
        gray = cv2.cvtColor(rgb, cv2.COLOR_RGB2GRAY)
        pixels[annotation] = gray[annotation]

    return PhantomImage(
        pixels=pixels,
        fan_mask=fan,
        annotation_mask=annotation,
        spec=spec,
        rgb=rgb,
        structures=structures,
        head_axes_px=axes,
        hc_mm=hc,
    )


def gen_image(
    spec: PhantomSpec,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    models: Optional[Dict[float, QuantileModel]] = None,
) -> PhantomImage:
    """Render one deterministic phantom frame."""
    return _render(spec, height, width, models or default_quantiles())


def gen_video(
    spec: PhantomSpec,
    n_frames: int,
    chd: bool,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    models: Optional[Dict[float, QuantileModel]] = None,
) -> np.ndarray:
    """Heart-view frame sequence (T x H x W) with oscillating chambers."""
    if not VIDEO_MIN_FRAMES <= n_frames <= VIDEO_MAX_FRAMES:
        raise DomainError(f"n_frames={n_frames} outside [{VIDEO_MIN_FRAMES}, {VIDEO_MAX_FRAMES}]")
    models = models or default_quantiles()
    heart = PhantomSpec(
        view_class=ViewClass.HEART,
        ga_days=spec.ga_days,
        pixel_spacing_mm=spec.pixel_spacing_mm,
        noise_seed=spec.noise_seed,
        chd=chd,
    )
    period = 8.0 + (spec.noise_seed % 5)
    frames = [
        _render(heart, height, width, models, phase=2 * math.pi * t / period, noise_key=(t,)).pixels
        for t in range(n_frames)
    ]
    return np.stack(frames)


def spec_for(record: ImageRecord, noise_seed: int, annotation_text: Optional[str] = None,
             subview: Optional[BrainSubview] = None) -> PhantomSpec:
    return PhantomSpec(
        view_class=record.view or ViewClass.OTHER,
        ga_days=record.ga_days,
        pixel_spacing_mm=record.pixel_spacing_mm,
        annotation_text=annotation_text,
        noise_seed=noise_seed,
        brain_subview=subview,
    )


def _allocate(class_mix: Dict[str, float], n: int) -> List[str]:
    """Largest-remainder allocation of n slots to classes."""
    names = sorted(class_mix)
    weights = np.array([class_mix[c] for c in names], dtype=np.float64)
    if weights.sum() <= 0 or np.any(weights < 0):
        raise DomainError("class_mix must hold non-negative weights with a positive sum")
    quota = weights / weights.sum() * n
    counts = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return [c for c, k in zip(names, counts) for _ in range(k)]


class PhantomDataset:
    """Manifest of phantom records plus the specs that render them."""

    def __init__(self, records: List[ImageRecord], specs: Dict[str, PhantomSpec],
                 height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH):
        self.records = records
        self.specs = specs
        self.height = height
        self.width = width

    def __len__(self) -> int:
        return len(self.records)

    def render(self, image_id: str, annotate: bool = True) -> PhantomImage:
        spec = self.specs[image_id]
        if not annotate and spec.annotation_text:
            spec = PhantomSpec(spec.view_class, spec.ga_days, spec.pixel_spacing_mm, None,
                               spec.noise_seed, spec.brain_subview, spec.chd)
        return gen_image(spec, self.height, self.width)


def gen_dataset(
    n_patients: int,
    images_per_patient: int,
    class_mix: Dict[str, float],
    seed: int,
    pixel_spacing_mm: float = 1.0,
    annotation_rate: float = 0.0,
    subview_label_rate: float = 0.5,
    test_fraction: float = 0.2,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
) -> PhantomDataset:
    """Deterministic patient-structured phantom manifest."""
    if n_patients < 1:
        raise DomainError("n_patients must be >= 1")
    if not class_mix:
        raise DomainError("class_mix must not be empty")
    for name in class_mix:
        ViewClass(name)

    rng = np.random.default_rng(seed)
    n_total = n_patients * images_per_patient
    views = _allocate(class_mix, n_total)
    rng.shuffle(views)

    n_test = int(round(test_fraction * n_patients)) if n_patients > 1 else 0
    test_patients = set(rng.permutation(n_patients)[:n_test].tolist())
    patient_ga = rng.integers(GA_MIN_DAYS, GA_MAX_DAYS + 1, size=n_patients)
    subviews = list(BrainSubview)
    models = default_quantiles()

    records: List[ImageRecord] = []
    specs: Dict[str, PhantomSpec] = {}
    for p in range(n_patients):
        patient_id = f"p{p:04d}"
        ga = int(patient_ga[p])
        for j in range(images_per_patient):
            view = ViewClass(views[p * images_per_patient + j])
            image_id = f"{patient_id}_i{j:03d}"
            noise_seed = int(np.random.SeedSequence([seed, p, j]).generate_state(1)[0])
            subview = subviews[int(rng.integers(len(subviews)))] if view == ViewClass.BRAIN else None
            labels = {view.value}
            if subview is not None and rng.random() < subview_label_rate:
                labels.add(subview.value)
            text = None
            if rng.random() < annotation_rate:
                text = f"{ANNOTATION_TAGS[view]} {format_ga(ga).replace(' ', '')}"
            spec = PhantomSpec(view, ga, pixel_spacing_mm, text, noise_seed, subview)
            specs[image_id] = spec
            records.append(ImageRecord(
                image_id=image_id,
                patient_id=patient_id,
                image_path=f"images/{image_id}.png",
                labels=frozenset(labels),
                ga_days=ga,
                pixel_spacing_mm=pixel_spacing_mm,
                subgroup=Subgroup.STANDARD_VIEW,
                split=Split.TEST if p in test_patients else Split.TRAIN,
                view=view,
                hc_mm=median_hc_mm(ga, models) if view == ViewClass.BRAIN else None,
                mask_paths={
                    s: f"masks/{image_id}_{s}.png" for s in SEG_STRUCTURES.get(view.value, [])
                },
            ))

    logger.info(f"Phantom dataset: {len(records)} images, {n_patients} patients, {len(test_patients)} test patients")
    return PhantomDataset(records, specs, height, width)


def gen_video_dataset(
    n_videos: int,
    chd_rate: float,
    seed: int,
    pixel_spacing_mm: float = 1.0,
    test_fraction: float = 0.2,
) -> List[Tuple[VideoRecord, PhantomSpec]]:
    """One heart video per patient; lengths uniform in [16, 128]."""
    rng = np.random.default_rng([seed, 1])
    n_chd = int(round(chd_rate * n_videos))
    chd_flags = np.array([True] * n_chd + [False] * (n_videos - n_chd))
    rng.shuffle(chd_flags)
    n_test = int(round(test_fraction * n_videos))
    test_idx = set(rng.permutation(n_videos)[:n_test].tolist())
    out = []
    for v in range(n_videos):
        ga = int(rng.integers(GA_MIN_DAYS, GA_MAX_DAYS + 1))
        n_frames = int(rng.integers(VIDEO_MIN_FRAMES, VIDEO_MAX_FRAMES + 1))
        spec = PhantomSpec(ViewClass.HEART, ga, pixel_spacing_mm,
                           noise_seed=int(np.random.SeedSequence([seed, 2, v]).generate_state(1)[0]),
                           chd=bool(chd_flags[v]))
        record = VideoRecord(
            video_id=f"v{v:04d}",
            patient_id=f"vp{v:04d}",
            video_path=f"videos/v{v:04d}.npz",
            n_frames=n_frames,
            chd=bool(chd_flags[v]),
            split=Split.TEST if v in test_idx else Split.TRAIN,
        )
        out.append((record, spec))
    return out
