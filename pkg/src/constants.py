"""
Constants and Enums for the fetal ultrasound toolkit.
"""

from enum import Enum
from typing import Dict, List, Tuple


class ViewClass(str, Enum):
    """Standard fetal view rendered by the phantom."""
    ABDOMEN = "abdomen"
    BRAIN = "brain"
    FEMUR = "femur"
    HEART = "heart"
    CERVIX = "cervix"
    OTHER = "other"


class BrainSubview(str, Enum):
    """Fine-grained head planes."""
    TRANSCEREBELLUM = "transcerebellum"
    TRANSTHALAMIC = "transthalamic"
    TRANSVENTRICULAR = "transventricular"


class Subgroup(str, Enum):
    """Pretraining data subgroups."""
    STANDARD_VIEW = "standard_view"
    MULTI_KEYWORD = "multi_keyword"
    UNLABELED = "unlabeled"
    TEXTBOOK = "textbook"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class CombineMode(str, Enum):
    """Frame-to-clip feature combination."""
    AVERAGE = "average"
    CONCATENATE = "concatenate"


class ProjectionMethod(str, Enum):
    PCA = "pca"
    UMAP_LIKE = "umap-like"


class PromptStyle(str, Enum):
    """Inference prompt bank flavour."""
    TYPICAL = "typical"
    CAPTION = "caption"


class GARule(str, Enum):
    """How the GA prediction is picked from the sweep."""
    MEDIAN_TOP_K = "median"
    ARGMAX = "argmax"


class ValidityStatus(str, Enum):
    VALID = "valid"
    INVALID = "invalid"
    EXCLUDED = "excluded"


class Subcommand(str, Enum):
    """CLI subcommands."""
    PHANTOM = "phantom"
    PREPROCESS = "preprocess"
    CURATE = "curate"
    PRETRAIN = "pretrain"
    ZEROSHOT = "zeroshot"
    PROBE = "probe"
    REPORT = "report"
    INTERPRET = "interpret"


# Gestational age window in days (14w0d .. 40w0d)
GA_MIN_DAYS: int = 98
GA_MAX_DAYS: int = 280

# HC evaluation restriction (median HC at 14 and 40 weeks)
HC_MIN_MM: float = 100.0
HC_MAX_MM: float = 342.0

# Percentiles carried by the quantile coefficient file
P_LOW: float = 2.5
P_MEDIAN: float = 50.0
P_HIGH: float = 97.5

MAX_TOKENS: int = 117
N_CAPTIONS: int = 5
N_PROMPTS: int = 5
PSEUDO_LABEL_THRESHOLD: float = 0.9
GA_TOP_K: int = 15

CLIP_FRAMES: int = 16
CLIP_STRIDE: int = 4
VIDEO_MIN_FRAMES: int = 16
VIDEO_MAX_FRAMES: int = 128
UNIFORM_CLIP_MAX_FRAMES: int = 64

N_FOLDS: int = 5
N_SEEDS: int = 5

# Zero-shot target views (the "other" view is excluded from evaluation)
FIVE_VIEWS: List[str] = [
    ViewClass.ABDOMEN.value,
    ViewClass.BRAIN.value,
    ViewClass.FEMUR.value,
    ViewClass.HEART.value,
    ViewClass.CERVIX.value,
]

# The 12 standard anatomical views of the hospital data source
STANDARD_VIEWS: List[str] = [
    "abdomen", "brain", "cord", "diaphragm", "feet", "femur",
    "heart", "kidney", "lips & nose", "orbit", "profile", "spine",
]

# Subviews allowed next to their parent view for standard_view routing
SUBVIEWS: Dict[str, List[str]] = {
    "brain": [s.value for s in BrainSubview],
    "heart": ["lvot", "rvot", "4ch", "3vv", "3vt"],
}

# Keywords used by phantom data (a subset of the full lexicon)
PHANTOM_KEYWORDS: List[str] = [
    "abdomen", "brain", "femur", "heart", "cervix",
    "transcerebellum", "transthalamic", "transventricular", "other",
]

# Segmentation structures per phantom view
SEG_STRUCTURES: Dict[str, List[str]] = {
    ViewClass.BRAIN.value: ["head"],
    ViewClass.ABDOMEN.value: ["abdomen", "stomach", "spine"],
    ViewClass.HEART.value: ["la", "ra", "lv", "rv"],
    ViewClass.FEMUR.value: ["femur"],
}

# Augmentation defaults
ROTATION_DEG: Tuple[float, float] = (-7.0, 7.0)
TRANSLATION_FRAC: Tuple[float, float] = (-0.05, 0.05)
JITTER_RANGE: Tuple[float, float] = (0.85, 1.15)

# Annotation removal defaults
CHROMA_THRESHOLD: float = 0.15
ANNOTATION_DILATION_PX: int = 2
INPAINT_RADIUS_PX: int = 3

# Upsampling per subgroup for shard building
UPSAMPLE_FACTORS: Dict[str, int] = {
    Subgroup.STANDARD_VIEW.value: 1,
    Subgroup.MULTI_KEYWORD.value: 1,
    Subgroup.UNLABELED.value: 1,
    Subgroup.TEXTBOOK.value: 10,
}

# Decoder parameter ceiling
SEG_DECODER_MAX_PARAMS: int = 1_700_000
