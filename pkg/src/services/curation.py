"""
Pretraining data curation.
Caption templating, subgroup routing, confident-learning label filtering,
pseudo-labeling and dedup-aware sharding.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import yaml
from cleanlab import count
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedGroupKFold

from ..config import CurationConfig
from ..constants import Subgroup, STANDARD_VIEWS, SUBVIEWS, N_CAPTIONS, N_FOLDS, PSEUDO_LABEL_THRESHOLD, MAX_TOKENS
from ..errors import DedupError, DomainError, UnknownLabelSetError
from ..models import CaptionSet, ImageRecord, ShardEntry, format_ga, format_spacing
from .storage import read_jsonl, write_jsonl
from .tokenizer import Vocab, token_count

logger = logging.getLogger(__name__)


# ==================== Lexicon ====================

@dataclass(frozen=True)
class Lexicon:
    keywords: Tuple[str, ...]
    standard_views: FrozenSet[str] = frozenset(STANDARD_VIEWS)
    subviews: Dict[str, FrozenSet[str]] = field(
        default_factory=lambda: {k: frozenset(v) for k, v in SUBVIEWS.items()}
    )

    @classmethod
    def load(cls, path: str = CurationConfig.lexicon_path) -> "Lexicon":
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        return cls(
            keywords=tuple(data.get("keywords", ())),
            standard_views=frozenset(data.get("standard_views", STANDARD_VIEWS)),
            subviews={k: frozenset(v) for k, v in (data.get("subviews") or SUBVIEWS).items()},
        )


def route_subgroup(record: ImageRecord, lexicon: Optional[Lexicon] = None) -> Subgroup:
    """standard_view: one standard view plus only its own subviews."""
    if record.subgroup == Subgroup.TEXTBOOK:
        return Subgroup.TEXTBOOK
    if not record.labels:
        return Subgroup.UNLABELED
    lexicon = lexicon or Lexicon(keywords=())
    views = record.labels & lexicon.standard_views
    if len(views) == 1:
        view = next(iter(views))
        if record.labels - views <= lexicon.subviews.get(view, frozenset()):
            return Subgroup.STANDARD_VIEW
    return Subgroup.MULTI_KEYWORD


# ==================== Captions ====================

def label_key(labels: Iterable[str]) -> str:
    return "+".join(sorted(labels))


class TemplateBank:
    """Versioned caption skeletons, five per label set."""

    def __init__(self, data: dict):
        self.version = data.get("version")
        clauses = data.get("clauses") or {}
        self.ga_clauses: List[str] = list(clauses.get("ga", ()))
        self.spacing_clauses: List[str] = list(clauses.get("spacing", ()))
        self.label_sets: Dict[str, List[str]] = {k: list(v) for k, v in (data.get("label_sets") or {}).items()}
        self.textbook: List[str] = list(data.get("textbook", ()))

        problems = []
        for name, clause_list in (("ga", self.ga_clauses), ("spacing", self.spacing_clauses), ("textbook", self.textbook)):
            if len(clause_list) != N_CAPTIONS:
                problems.append(f"{name}: expected {N_CAPTIONS} entries, got {len(clause_list)}")
        for key, skeletons in self.label_sets.items():
            if len(skeletons) != N_CAPTIONS or len(set(skeletons)) != N_CAPTIONS:
                problems.append(f"label set {key}: expected {N_CAPTIONS} distinct skeletons")
        if problems:
            raise DomainError("invalid template bank: " + "; ".join(problems))

    @classmethod
    def load(cls, path: str = CurationConfig.template_path) -> "TemplateBank":
        with open(path, "r", encoding="utf-8") as f:
            return cls(yaml.safe_load(f) or {})

    def skeletons(self, labels: Iterable[str]) -> List[str]:
        labels = frozenset(labels)
        key = label_key(labels)
        if key not in self.label_sets:
            raise UnknownLabelSetError(labels)
        return self.label_sets[key]


def build_caption_set(record: ImageRecord, templates: TemplateBank, vocab: Optional[Vocab] = None) -> CaptionSet:
    """Five captions filled with GA and pixel spacing; textbook records
    wrap their own caption instead."""
    if record.subgroup == Subgroup.TEXTBOOK:
        if not record.caption:
            raise DomainError(f"{record.image_id}: textbook record without caption")
        captions = tuple(t.format(caption=record.caption) for t in templates.textbook)
    else:
        if not record.labels:
            raise DomainError(f"{record.image_id}: cannot caption an unlabeled record")
        skeletons = templates.skeletons(record.labels)
        captions = []
        for i, skeleton in enumerate(skeletons):
            ga = templates.ga_clauses[i].format(ga=format_ga(record.ga_days)) if record.ga_days is not None else ""
            spacing = (
                templates.spacing_clauses[i].format(spacing=format_spacing(record.pixel_spacing_mm))
                if record.pixel_spacing_mm is not None else ""
            )
            captions.append(skeleton.format(ga=ga, spacing=spacing))
        captions = tuple(captions)

    if vocab is not None:
        for caption in captions:
            if token_count(caption, vocab) > MAX_TOKENS:
                raise DomainError(f"{record.image_id}: caption exceeds {MAX_TOKENS} tokens: {caption!r}")
    return CaptionSet(image_id=record.image_id, captions=captions)


# ==================== Confident learning ====================

def confident_thresholds(oof_probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-class mean self-confidence; +inf for classes with no support."""
    labels = np.asarray(labels, dtype=int)
    thresholds = np.asarray(count.get_confident_thresholds(labels, oof_probs), dtype=np.float64)
    support = np.bincount(labels, minlength=oof_probs.shape[1]) > 0
    return np.where(support, thresholds, np.inf)


def confident_flags(oof_probs: np.ndarray, labels: Sequence[int]) -> Set[int]:
    """Indices whose confident class exists and disagrees with the given label
    (the off-diagonal of the uncalibrated confident joint)."""
    probs = np.asarray(oof_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise DomainError(f"oof_probs {probs.shape} and labels {labels.shape} disagree")
    if labels.size == 0:
        return set()
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise DomainError("labels must index columns of oof_probs")

    thresholds = confident_thresholds(probs, labels)
    if not (probs >= thresholds - 1e-6).any():
        return set()
    _, off_diagonal = count.compute_confident_joint(
        labels, probs, thresholds=thresholds, calibrate=False, return_indices_of_off_diagonals=True,
    )
    return set(np.asarray(off_diagonal, dtype=int).tolist())


def oof_probabilities(
    features: np.ndarray,
    labels: Sequence[int],
    patient_ids: Sequence[str],
    n_folds: int = N_FOLDS,
    seed: int = 0,
) -> np.ndarray:
    """Out-of-fold class probabilities from patient-grouped stratified CV."""
    labels = np.asarray(labels, dtype=int)
    groups = np.asarray(patient_ids)
    n_classes = int(labels.max()) + 1
    if len(np.unique(groups)) < n_folds:
        raise DomainError(f"need at least {n_folds} patients for {n_folds}-fold CV")

    probs = np.zeros((len(labels), n_classes))
    splitter = StratifiedGroupKFold(n_splits=n_folds, shuffle=True, random_state=seed)
    for fold, (train_idx, test_idx) in enumerate(splitter.split(features, labels, groups)):
        clf = LogisticRegression(max_iter=1000)
        clf.fit(features[train_idx], labels[train_idx])
        probs[np.ix_(test_idx, clf.classes_)] = clf.predict_proba(features[test_idx])
        logger.debug(f"Confident-learning fold {fold}: {len(train_idx)} train / {len(test_idx)} held out")
    return probs


# ==================== Pseudo-labeling ====================

def pseudo_label(probs: Sequence[float], threshold: float = PSEUDO_LABEL_THRESHOLD) -> Optional[int]:
    """Argmax class when its probability strictly exceeds threshold."""
    p = np.asarray(probs, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6:
        raise DomainError(f"probabilities sum to {p.sum():.8f}, expected 1")
    best = int(np.argmax(p))
    return best if p[best] > threshold else None


def pseudo_label_records(
    records: Sequence[ImageRecord],
    probs: np.ndarray,
    classes: Sequence[str],
    threshold: float = PSEUDO_LABEL_THRESHOLD,
) -> List[ImageRecord]:
    """Label unlabeled records with confident predictions; drop the rest."""
    kept = []
    for record, p in zip(records, probs):
        cls = pseudo_label(p, threshold)
        if cls is not None:
            kept.append(replace(record, labels=frozenset({classes[cls]})))
    logger.info(f"Pseudo-labeled {len(kept)}/{len(records)} unlabeled records")
    return kept


def refine_brain_subviews(
    records: Sequence[ImageRecord],
    probs: np.ndarray,
    subviews: Sequence[str],
    parent: str = "brain",
    threshold: float = PSEUDO_LABEL_THRESHOLD,
) -> List[ImageRecord]:
    """Attach a subview when confident; otherwise keep the general label."""
    out = []
    for record, p in zip(records, probs):
        if record.labels == frozenset({parent}):
            cls = pseudo_label(p, threshold)
            if cls is not None:
                record = replace(record, labels=frozenset({parent, subviews[cls]}))
        out.append(record)
    return out


# ==================== Sharding ====================

def build_shards(
    items: Sequence[Tuple[ImageRecord, CaptionSet]],
    upsample_map: Dict[str, int],
    shard_size: int,
    n_shards: Optional[int] = None,
    seed: int = 0,
) -> List[List[ShardEntry]]:
    """Replicate records per subgroup factor and spread replicas over
    distinct shards, filling the emptiest shards first."""
    if shard_size < 1:
        raise DomainError("shard_size must be >= 1")
    factors = []
    for record, _ in items:
        factor = upsample_map.get(record.subgroup.value, 1)
        if int(factor) != factor or factor < 1:
            raise DomainError(f"upsample factor for {record.subgroup.value} must be an integer >= 1, got {factor}")
        factors.append(int(factor))

    total = sum(factors)
    shard_count = n_shards if n_shards is not None else max(1, math.ceil(total / shard_size))
    if factors and max(factors) > shard_count:
        raise DedupError(f"cannot satisfy dedup: upsample factor {max(factors)} exceeds {shard_count} shards")

    shards: List[List[ShardEntry]] = [[] for _ in range(shard_count)]
    fill = np.zeros(shard_count, dtype=int)
    order = sorted(range(len(items)), key=lambda i: -factors[i])
    for i in order:
        record, caption_set = items[i]
        targets = np.argsort(fill, kind="stable")[: factors[i]]
        for k, s in enumerate(sorted(targets.tolist())):
            shards[s].append(ShardEntry(
                image_id=record.image_id,
                image_path=record.image_path,
                caption=caption_set.captions[k % len(caption_set.captions)],
                captions=caption_set.captions,
            ))
            fill[s] += 1

    rng = np.random.default_rng(seed)
    for shard in shards:
        rng.shuffle(shard)
        ids = [e.image_id for e in shard]
        assert len(ids) == len(set(ids)), "duplicate image in shard"
    logger.info(f"Built {shard_count} shards from {len(items)} records ({total} pairs)")
    return shards


def write_shards(out_dir: str, shards: Sequence[Sequence[ShardEntry]]) -> List[Path]:
    return [
        write_jsonl(Path(out_dir) / f"shard-{i:05d}.jsonl", (e.to_dict() for e in shard))
        for i, shard in enumerate(shards)
    ]


def read_shards(shard_dir: str) -> List[List[ShardEntry]]:
    paths = sorted(Path(shard_dir).glob("shard-*.jsonl"))
    if not paths:
        raise DomainError(f"no shard files under {shard_dir}")
    return [[ShardEntry.from_row(r) for r in read_jsonl(p)] for p in paths]


# ==================== Manifests ====================

def write_manifest(path: str, records: Iterable[ImageRecord]) -> Path:
    return write_jsonl(path, (r.to_dict() for r in records))


def read_manifest(path: str) -> List[ImageRecord]:
    return [ImageRecord.from_row(row) for row in read_jsonl(path)]
