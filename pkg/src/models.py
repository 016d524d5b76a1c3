"""
Data models for the fetal ultrasound toolkit.
"""

import os
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from .constants import (
    ViewClass, BrainSubview, Subgroup, Split, ValidityStatus, GARule,
    GA_MIN_DAYS, GA_MAX_DAYS, N_CAPTIONS, CLIP_FRAMES,
    ROTATION_DEG, TRANSLATION_FRAC, JITTER_RANGE,
)
from .errors import DomainError


def format_ga(ga_days: int) -> str:
    """Render GA as weeks + days, e.g. 143 -> '20w 3d'."""
    return f"{ga_days // 7}w {ga_days % 7}d"


def format_spacing(spacing_mm: float) -> str:
    return f"{spacing_mm:g} mm/px"


def check_ga(ga_days: int) -> None:
    if not GA_MIN_DAYS <= int(ga_days) <= GA_MAX_DAYS:
        raise DomainError(f"ga_days={ga_days} outside [{GA_MIN_DAYS}, {GA_MAX_DAYS}]")


def run_timestamp() -> datetime:
    """UTC now; SOURCE_DATE_EPOCH pins it for reproducible result files."""
    epoch = os.getenv("SOURCE_DATE_EPOCH")
    if epoch:
        return datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    return datetime.now(timezone.utc)


# ==================== Phantom ====================

@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one synthetic ultrasound frame."""
    view_class: ViewClass
    ga_days: int
    pixel_spacing_mm: float
    annotation_text: Optional[str] = None
    noise_seed: int = 0
    brain_subview: Optional[BrainSubview] = None
    chd: bool = False

    def __post_init__(self):
        check_ga(self.ga_days)
        if not self.pixel_spacing_mm > 0:
            raise DomainError(f"pixel_spacing_mm must be > 0, got {self.pixel_spacing_mm}")


@dataclass
class PhantomImage:
    """Rendered phantom frame plus its ground truth."""
    pixels: np.ndarray             # H x W float in [0, 1]
    fan_mask: np.ndarray           # H x W bool
    annotation_mask: np.ndarray    # H x W bool
    spec: PhantomSpec
    rgb: np.ndarray                # H x W x 3, carries the colored annotation
    structures: Dict[str, np.ndarray] = field(default_factory=dict)
    head_axes_px: Optional[Tuple[float, float]] = None   # semi-axes (a, b)
    hc_mm: Optional[float] = None


# ==================== Curation ====================

@dataclass
class ImageRecord:
    """One image of the manifest."""
    image_id: str
    patient_id: str
    image_path: str
    labels: FrozenSet[str] = frozenset()
    ga_days: Optional[int] = None
    pixel_spacing_mm: Optional[float] = None
    subgroup: Subgroup = Subgroup.STANDARD_VIEW
    split: Split = Split.TRAIN
    view: Optional[ViewClass] = None
    hc_mm: Optional[float] = None
    caption: Optional[str] = None                  # textbook records only
    mask_paths: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = frozenset(self.labels)
        if not self.patient_id:
            raise DomainError(f"{self.image_id}: patient_id is required")
        if not self.labels and self.subgroup not in (Subgroup.UNLABELED, Subgroup.TEXTBOOK):
            raise DomainError(f"{self.image_id}: labels required for subgroup {self.subgroup.value}")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "patient_id": self.patient_id,
            "image_path": self.image_path,
            "labels": sorted(self.labels),
            "ga_days": self.ga_days,
            "pixel_spacing_mm": self.pixel_spacing_mm,
            "subgroup": self.subgroup.value,
            "split": self.split.value,
            "view": self.view.value if self.view else None,
            "hc_mm": self.hc_mm,
            "caption": self.caption,
            "mask_paths": dict(self.mask_paths),
        }

    @classmethod
    def from_row(cls, row: dict) -> "ImageRecord":
        """Create from a manifest line."""
        return cls(
            image_id=row["image_id"],
            patient_id=row["patient_id"],
            image_path=row["image_path"],
            labels=frozenset(row.get("labels") or ()),
            ga_days=row.get("ga_days"),
            pixel_spacing_mm=row.get("pixel_spacing_mm"),
            subgroup=Subgroup(row.get("subgroup", Subgroup.STANDARD_VIEW.value)),
            split=Split(row.get("split", Split.TRAIN.value)),
            view=ViewClass(row["view"]) if row.get("view") else None,
            hc_mm=row.get("hc_mm"),
            caption=row.get("caption"),
            mask_paths=row.get("mask_paths") or {},
        )


@dataclass(frozen=True)
class CaptionSet:
    """Five caption variants for one image."""
    image_id: str
    captions: Tuple[str, ...]

    def __post_init__(self):
        if len(self.captions) != N_CAPTIONS:
            raise DomainError(f"{self.image_id}: expected {N_CAPTIONS} captions, got {len(self.captions)}")
        if len(set(self.captions)) != N_CAPTIONS:
            raise DomainError(f"{self.image_id}: captions are not pairwise distinct")


@dataclass(frozen=True)
class ShardEntry:
    """One (image, caption) pair inside a shard."""
    image_id: str
    image_path: str
    caption: str
    captions: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "caption": self.caption,
            "captions": list(self.captions),
        }

    @classmethod
    def from_row(cls, row: dict) -> "ShardEntry":
        return cls(
            image_id=row["image_id"],
            image_path=row["image_path"],
            caption=row["caption"],
            captions=tuple(row.get("captions") or ()),
        )


@dataclass
class VideoRecord:
    """One heart video of the CHD manifest."""
    video_id: str
    patient_id: str
    video_path: str
    n_frames: int
    chd: bool
    split: Split = Split.TRAIN

    def to_dict(self) -> dict:
        row = asdict(self)
        row["split"] = self.split.value
        return row

    @classmethod
    def from_row(cls, row: dict) -> "VideoRecord":
        return cls(
            video_id=row["video_id"],
            patient_id=row["patient_id"],
            video_path=row["video_path"],
            n_frames=int(row["n_frames"]),
            chd=bool(row["chd"]),
            split=Split(row.get("split", Split.TRAIN.value)),
        )


# ==================== Preprocess ====================

@dataclass(frozen=True)
class AugmentationPolicy:
    """Sampling ranges for training-time augmentation."""
    rotation_deg_range: Tuple[float, float] = ROTATION_DEG
    translation_frac_range: Tuple[float, float] = TRANSLATION_FRAC
    brightness_range: Tuple[float, float] = JITTER_RANGE
    contrast_range: Tuple[float, float] = JITTER_RANGE
    saturation_range: Tuple[float, float] = JITTER_RANGE
    seed: int = 0

    def __post_init__(self):
        for name, identity in (
            ("rotation_deg_range", 0.0),
            ("translation_frac_range", 0.0),
            ("brightness_range", 1.0),
            ("contrast_range", 1.0),
            ("saturation_range", 1.0),
        ):
            lo, hi = getattr(self, name)
            if not lo <= identity <= hi:
                raise DomainError(f"{name}={lo, hi} must contain identity value {identity}")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls((0.0, 0.0), (0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), seed)


# ==================== Zero-shot ====================

@dataclass(frozen=True)
class QuantileModel:
    """HC(t) = b0 + b1 t + b2 t^2 + b3 t^3 + b4 t^4 for one percentile."""
    percentile: float
    coefficients: Tuple[float, float, float, float, float]

    def __call__(self, ga_days) -> np.ndarray:
        return np.polynomial.polynomial.polyval(np.asarray(ga_days, dtype=np.float64), self.coefficients)


@dataclass
class GAEstimate:
    ga_days: int
    top_candidates: List[int]
    rule: GARule = GARule.MEDIAN_TOP_K
    valid: Optional[bool] = None

    def __post_init__(self):
        check_ga(self.ga_days)


@dataclass(frozen=True)
class ValidityCheck:
    """Outcome of the percentile-band plausibility check."""
    status: ValidityStatus
    hc_lo: Optional[float] = None
    hc_hi: Optional[float] = None
    reason: Optional[str] = None

    @property
    def valid(self) -> bool:
        return self.status == ValidityStatus.VALID

    def __bool__(self) -> bool:
        return self.valid


# ==================== Probes ====================

@dataclass(frozen=True)
class ClipSample:
    """16 frame indices drawn from one video."""
    video_id: str
    frame_indices: Tuple[int, ...]

    def __post_init__(self):
        if len(self.frame_indices) != CLIP_FRAMES:
            raise DomainError(f"clip must hold {CLIP_FRAMES} frames, got {len(self.frame_indices)}")
        if any(b <= a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise DomainError("clip frame indices must be strictly increasing")

    @property
    def span(self) -> int:
        return self.frame_indices[-1] - self.frame_indices[0] + 1

    def coverage(self, video_length: int) -> float:
        return self.span / video_length


@dataclass(frozen=True)
class Checkpoint:
    """One saved pretraining epoch."""
    epoch: int
    path: str
    loss: float
    seed: int
    step: int = 0


# ==================== Metrics ====================

@dataclass
class ProbeRun:
    """One (fold, seed) training/evaluation outcome."""
    task: str
    model: str
    fold: int
    seed_index: int
    metric: str
    value: float
    timestamp: datetime = field(default_factory=run_timestamp)
    mode: str = "cv"

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "model": self.model,
            "fold": self.fold,
            "seed_index": self.seed_index,
            "metric": self.metric,
            "value": self.value,
            "timestamp": self.timestamp.isoformat(),
            "mode": self.mode,
        }

    @classmethod
    def from_row(cls, row: dict) -> "ProbeRun":
        ts = row["timestamp"]
        return cls(
            task=row["task"],
            model=row["model"],
            fold=int(row["fold"]),
            seed_index=int(row["seed_index"]),
            metric=row["metric"],
            value=float(row["value"]),
            timestamp=datetime.fromisoformat(ts) if isinstance(ts, str) else ts,
            mode=row.get("mode", "cv"),
        )
