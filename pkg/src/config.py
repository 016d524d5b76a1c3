"""
Configuration.
Process settings come from the environment, experiment settings from one
hierarchical YAML file per experiment.
"""

import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml
from dotenv import load_dotenv

from .constants import (
    FIVE_VIEWS, MAX_TOKENS, CHROMA_THRESHOLD, ANNOTATION_DILATION_PX,
    INPAINT_RADIUS_PX, PSEUDO_LABEL_THRESHOLD, GA_TOP_K, UPSAMPLE_FACTORS,
    N_FOLDS, N_SEEDS, SEG_STRUCTURES, PromptStyle, CombineMode, ProjectionMethod,
)
from .errors import ConfigError

load_dotenv()

PACKAGE_ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = PACKAGE_ROOT / "data"


@dataclass(frozen=True)
class Config:
    """Process-level configuration."""

    # Paths
    DATA_ROOT: str = os.getenv("FETAL_DATA_ROOT", "data/phantom")
    OUT_DIR: str = os.getenv("FETAL_OUT_DIR", "runs")
    RUNS_DB: str = os.getenv("FETAL_RUNS_DB", "runs/probe_runs.db")

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO").upper()
    DEBUG: bool = os.getenv("DEBUG", "false").lower() == "true"

    # Contract checks on embeddings (unit norm etc.)
    CHECK_CONTRACTS: bool = os.getenv("FETAL_CHECK_CONTRACTS", "false").lower() == "true"

    def validate(self) -> None:
        """Validate required config."""
        if self.LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"LOG_LEVEL must be a logging level name, got {self.LOG_LEVEL}")
        if not self.OUT_DIR:
            raise ValueError("FETAL_OUT_DIR must not be empty")


config = Config()


# ==================== Experiment sections ====================

@dataclass(frozen=True)
class PhantomConfig:
    height: int = 224
    width: int = 256
    n_patients: int = 200
    images_per_patient: int = 10
    class_mix: Dict[str, float] = field(default_factory=lambda: {v: 0.2 for v in FIVE_VIEWS})
    pixel_spacing_mm: float = 1.0
    annotation_rate: float = 0.0
    subview_label_rate: float = 0.5
    test_fraction: float = 0.2
    n_videos: int = 0
    chd_rate: float = 0.5
    seed: int = 0

    def validate(self) -> List[str]:
        problems = []
        if self.n_patients < 1:
            problems.append("n_patients: must be >= 1")
        if self.images_per_patient < 1:
            problems.append("images_per_patient: must be >= 1")
        if not self.class_mix:
            problems.append("class_mix: must not be empty")
        if self.pixel_spacing_mm <= 0:
            problems.append("pixel_spacing_mm: must be > 0")
        if not 0.0 <= self.annotation_rate <= 1.0:
            problems.append("annotation_rate: must be in [0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            problems.append("test_fraction: must be in (0, 1)")
        return problems


@dataclass(frozen=True)
class PreprocessConfig:
    chroma_threshold: float = CHROMA_THRESHOLD
    dilation_px: int = ANNOTATION_DILATION_PX
    inpaint_radius_px: int = INPAINT_RADIUS_PX
    image_size: int = 224

    def validate(self) -> List[str]:
        problems = []
        if not 0.0 < self.chroma_threshold < 1.0:
            problems.append("chroma_threshold: must be in (0, 1)")
        if self.dilation_px < 0:
            problems.append("dilation_px: must be >= 0")
        if self.inpaint_radius_px < 1:
            problems.append("inpaint_radius_px: must be >= 1")
        if self.image_size < 8:
            problems.append("image_size: must be >= 8")
        return problems


@dataclass(frozen=True)
class CurationConfig:
    lexicon_path: str = str(DATA_DIR / "lexicon.yaml")
    template_path: str = str(DATA_DIR / "templates" / "captions.yaml")
    shard_size: int = 256
    n_shards: Optional[int] = None
    upsample: Dict[str, int] = field(default_factory=lambda: dict(UPSAMPLE_FACTORS))
    pseudo_label_threshold: float = PSEUDO_LABEL_THRESHOLD
    cv_folds: int = N_FOLDS
    feature_size: int = 16
    seed: int = 0

    def validate(self) -> List[str]:
        problems = []
        if self.shard_size < 1:
            problems.append("shard_size: must be >= 1")
        for name, factor in self.upsample.items():
            if int(factor) != factor or factor < 1:
                problems.append(f"upsample.{name}: must be an integer >= 1")
        if not 0.0 < self.pseudo_label_threshold < 1.0:
            problems.append("pseudo_label_threshold: must be in (0, 1)")
        return problems


@dataclass(frozen=True)
class TokenizerConfig:
    vocab_size: int = 2048
    max_tokens: int = MAX_TOKENS

    def validate(self) -> List[str]:
        return [] if self.max_tokens >= 2 else ["max_tokens: must be >= 2"]


@dataclass(frozen=True)
class ModelConfig:
    """Dual encoder shape. Paper scale: 224 / 14 / 24 layers / 12 text layers / 768."""
    image_size: int = 64
    patch_size: int = 8
    in_channels: int = 1
    vision_layers: int = 4
    vision_width: int = 128
    vision_heads: int = 4
    text_layers: int = 2
    text_width: int = 128
    text_heads: int = 4
    shared_dim: int = 128
    max_tokens: int = MAX_TOKENS
    vocab_size: int = 2048
    mlp_ratio: int = 4
    temperature_init: float = 0.07
    min_temperature: float = 0.01

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> List[str]:
        problems = []
        if self.patch_size < 1 or self.image_size % self.patch_size:
            problems.append("image_size: must be divisible by patch_size")
        if self.shared_dim <= 0:
            problems.append("shared_dim: must be > 0")
        if self.vision_width % self.vision_heads:
            problems.append("vision_width: must be divisible by vision_heads")
        if self.text_width % self.text_heads:
            problems.append("text_width: must be divisible by text_heads")
        if self.temperature_init < self.min_temperature:
            problems.append("temperature_init: must be >= min_temperature")
        return problems


@dataclass(frozen=True)
class TrainConfig:
    """Pretraining schedule. Paper: 20 epochs, 5e-6, 2000 warmup, batch 140/GPU."""
    epochs: int = 5
    base_lr: float = 1e-4
    warmup_steps: int = 100
    schedule: str = "cosine"
    weight_decay: float = 0.1
    betas: Tuple[float, float] = (0.9, 0.98)
    batch_size: int = 64
    augment: bool = True
    num_workers: int = 0
    seed: int = 0

    def validate(self) -> List[str]:
        problems = []
        if self.epochs < 1:
            problems.append("epochs: must be >= 1")
        if self.warmup_steps < 0:
            problems.append("warmup_steps: must be >= 0")
        if self.base_lr <= 0:
            problems.append("base_lr: must be > 0")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.schedule != "cosine":
            problems.append("schedule: only 'cosine' is supported")
        return problems


@dataclass(frozen=True)
class ZeroShotConfig:
    prompt_path: str = str(DATA_DIR / "prompts" / "views.yaml")
    subview_prompt_path: str = str(DATA_DIR / "prompts" / "brain_subviews.yaml")
    prompt_style: str = PromptStyle.CAPTION.value
    quantile_path: str = str(DATA_DIR / "quantiles" / "hc_synthetic.txt")
    classes: List[str] = field(default_factory=lambda: list(FIVE_VIEWS))
    ga_top_k: int = GA_TOP_K

    def validate(self) -> List[str]:
        problems = []
        if self.prompt_style not in {s.value for s in PromptStyle}:
            problems.append(f"prompt_style: must be one of {[s.value for s in PromptStyle]}")
        if not self.classes:
            problems.append("classes: must not be empty")
        if self.ga_top_k < 1:
            problems.append("ga_top_k: must be >= 1")
        return problems


@dataclass(frozen=True)
class LinearProbeConfig:
    """Plain gradient descent on a single affine layer."""
    lr: float = 1.0
    epochs: int = 300
    weight_decay: float = 0.0

    def validate(self) -> List[str]:
        problems = []
        if self.lr <= 0:
            problems.append("lr: must be > 0")
        if self.epochs < 1:
            problems.append("epochs: must be >= 1")
        return problems


@dataclass(frozen=True)
class SegDecoderConfig:
    """Lightweight UNETR-style decoder over four encoder taps."""
    hidden_size: int = 128
    num_layers: int = 4
    patch_size: int = 8
    image_size: int = 64
    in_channels: int = 1
    feature_size: int = 16
    out_channels: int = 1
    kernel_size: int = 3
    max_params: int = 1_700_000

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def chain_size(self) -> int:
        """Resolution reached by the four x2 upsampling stages."""
        return self.grid_size * 16

    @property
    def tap_layers(self) -> Tuple[int, int, int, int]:
        """1-based block indices N_L/4, N_L/2, 3N_L/4, N_L."""
        n = self.num_layers
        return (n // 4, n // 2, (3 * n) // 4, n)

    def validate(self) -> List[str]:
        problems = []
        if self.kernel_size != 3:
            problems.append("kernel_size: must be 3")
        if self.num_layers < 4:
            problems.append("num_layers: need at least 4 blocks to tap")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            problems.append("image_size: must be divisible by patch_size")
        elif self.chain_size < self.image_size:
            problems.append(
                f"image_size: {self.image_size} not reachable by the upsampling chain "
                f"(grid {self.grid_size} x 16 = {self.chain_size})"
            )
        return problems


@dataclass(frozen=True)
class SegTrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    feature_size: int = 16
    seed: int = 0

    def validate(self) -> List[str]:
        problems = []
        if self.lr <= 0:
            problems.append("lr: must be > 0")
        if self.epochs < 1:
            problems.append("epochs: must be >= 1")
        return problems


@dataclass(frozen=True)
class ProbeConfig:
    view: LinearProbeConfig = field(default_factory=LinearProbeConfig)
    chd: LinearProbeConfig = field(default_factory=lambda: LinearProbeConfig(lr=0.5, epochs=300))
    chd_combine: str = CombineMode.CONCATENATE.value
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    support_sizes: List[int] = field(default_factory=lambda: [2, 8, 32])
    seg_views: List[str] = field(default_factory=lambda: ["brain"])

    def validate(self) -> List[str]:
        problems = [f"view.{p}" for p in self.view.validate()]
        problems += [f"chd.{p}" for p in self.chd.validate()]
        problems += [f"seg.{p}" for p in self.seg.validate()]
        if self.chd_combine not in {m.value for m in CombineMode}:
            problems.append(f"chd_combine: must be one of {[m.value for m in CombineMode]}")
        if any(n < 1 for n in self.support_sizes):
            problems.append("support_sizes: all sizes must be >= 1")
        unknown = [v for v in self.seg_views if v not in SEG_STRUCTURES]
        if unknown:
            problems.append(f"seg_views: no structures defined for {unknown}")
        return problems


@dataclass(frozen=True)
class HarnessConfig:
    master_seed: int = 0
    n_folds: int = N_FOLDS
    n_seeds: int = N_SEEDS
    test_fraction: float = 0.2
    jobs: int = 1

    def validate(self) -> List[str]:
        problems = []
        if self.n_folds < 2:
            problems.append("n_folds: must be >= 2")
        if self.n_seeds < 1:
            problems.append("n_seeds: must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            problems.append("test_fraction: must be in (0, 1)")
        if self.jobs < 1:
            problems.append("jobs: must be >= 1")
        return problems


@dataclass(frozen=True)
class InterpretConfig:
    tap_layer: int = -1
    method: str = ProjectionMethod.PCA.value
    n_neighbors: int = 15
    max_channels: Optional[int] = None
    n_images: int = 4

    def validate(self) -> List[str]:
        if self.method not in {m.value for m in ProjectionMethod}:
            return [f"method: must be one of {[m.value for m in ProjectionMethod]}"]
        return []


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: every section plus global seed."""
    name: str = "default"
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    zeroshot: ZeroShotConfig = field(default_factory=ZeroShotConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    interpret: InterpretConfig = field(default_factory=InterpretConfig)

    def validate(self) -> List[str]:
        problems = []
        for f in fields(self):
            section = getattr(self, f.name)
            if is_dataclass(section):
                problems += [f"{f.name}.{p}" for p in section.validate()]
        if self.model.vocab_size != self.tokenizer.vocab_size:
            problems.append("model.vocab_size: must equal tokenizer.vocab_size")
        if self.model.max_tokens != self.tokenizer.max_tokens:
            problems.append("model.max_tokens: must equal tokenizer.max_tokens")
        return problems


# ==================== Loading ====================

def _coerce(tp: Any, value: Any, key: str, problems: List[str]) -> Any:
    """Coerce a YAML value to the annotated field type."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if is_dataclass(tp):
        if not isinstance(value, dict):
            problems.append(f"{key}: expected a mapping")
            return tp()
        return _build(tp, value, key, problems)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(inner, value, key, problems)
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            problems.append(f"{key}: expected a list")
            return []
        return [_coerce(args[0], v, f"{key}[{i}]", problems) for i, v in enumerate(value)]
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            problems.append(f"{key}: expected a list of {len(args)} values")
            return tuple()
        return tuple(_coerce(a, v, f"{key}[{i}]", problems) for i, (a, v) in enumerate(zip(args, value)))
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            problems.append(f"{key}: expected a mapping")
            return {}
        return {str(k): _coerce(args[1], v, f"{key}.{k}", problems) for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{key}: expected true/false, got {value!r}")
        return bool(value)
    if tp in (int, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{key}: expected a number, got {value!r}")
            return tp()
        if tp is int and int(value) != value:
            problems.append(f"{key}: expected an integer, got {value!r}")
        return tp(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{key}: expected a string, got {value!r}")
        return str(value)
    return value


def _build(cls, data: Dict[str, Any], prefix: str, problems: List[str]):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for extra in sorted(set(data) - known):
        problems.append(f"{prefix + '.' if prefix else ''}{extra}: unknown field")
    kwargs = {}
    for name in known & set(data):
        key = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(hints[name], data[name], key, problems)
    return cls(**kwargs)


def _apply_override(tree: Dict[str, Any], override: str, problems: List[str]) -> None:
    if "=" not in override:
        problems.append(f"{override}: override must look like section.field=value")
        return
    path, raw = override.split("=", 1)
    keys = path.strip().split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            problems.append(f"{path}: cannot descend into a scalar")
            return
    node[keys[-1]] = yaml.safe_load(raw)


def load_experiment(path: Optional[str] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Load YAML config, apply dotted overrides, validate every field."""
    tree: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                tree = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"{path}: {e}")
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")

    problems: List[str] = []
    for override in overrides:
        _apply_override(tree, override, problems)
    experiment = _build(ExperimentConfig, tree, "", problems)
    problems += experiment.validate()
    if problems:
        raise ConfigError(problems)
    return experiment


def with_seed(experiment: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Propagate a --seed flag into every seeded section."""
    return replace(
        experiment,
        seed=seed,
        phantom=replace(experiment.phantom, seed=seed),
        curation=replace(experiment.curation, seed=seed),
        train=replace(experiment.train, seed=seed),
        harness=replace(experiment.harness, master_seed=seed),
    )
