"""
Zero-shot inference.
Prompt-ensembled view classification, GA estimation from a sweep of
GA-bearing prompts and the HC percentile validity check.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml
from tqdm import tqdm

from ..constants import (
    GARule, PromptStyle, ValidityStatus, ViewClass, SUBVIEWS,
    GA_MIN_DAYS, GA_MAX_DAYS, GA_TOP_K, HC_MIN_MM, HC_MAX_MM, N_PROMPTS, P_LOW, P_HIGH,
)
from ..errors import DomainError, ShapeError
from ..models import GAEstimate, ImageRecord, QuantileModel, ValidityCheck, check_ga
from .curation import TemplateBank, build_caption_set
from .encoders import DualEncoder, embed_images, embed_texts
from .metrics import confusion_matrix, macro_f1, per_class_f1
from .tokenizer import Vocab, encode_batch

logger = logging.getLogger(__name__)

# texts -> unit-norm rows
EncodeFn = Callable[[Sequence[str]], np.ndarray]

GA_DAYS = np.arange(GA_MIN_DAYS, GA_MAX_DAYS + 1)


def text_encode_fn(model: DualEncoder, vocab: Vocab) -> EncodeFn:
    def encode(texts: Sequence[str]) -> np.ndarray:
        return embed_texts(model, encode_batch(texts, vocab, model.config.max_tokens))
    return encode


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, 1e-12)


# ==================== Prompt banks ====================

@dataclass(frozen=True)
class PromptBank:
    """Class name -> five prompts."""
    prompts: Dict[str, Tuple[str, ...]]

    def __post_init__(self):
        if not self.prompts:
            raise DomainError("prompt bank is empty")
        for name, prompts in self.prompts.items():
            if len(prompts) != N_PROMPTS:
                raise DomainError(f"class {name}: expected {N_PROMPTS} prompts, got {len(prompts)}")

    @property
    def classes(self) -> List[str]:
        return list(self.prompts)

    def subset(self, classes: Sequence[str]) -> "PromptBank":
        missing = [c for c in classes if c not in self.prompts]
        if missing:
            raise DomainError(f"prompt bank has no prompts for: {', '.join(missing)}")
        return PromptBank({c: self.prompts[c] for c in classes})

    @classmethod
    def load(cls, path: str, style: str = PromptStyle.CAPTION.value) -> "PromptBank":
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if style not in data:
            raise DomainError(f"{path}: no '{style}' prompt style")
        return cls({str(k): tuple(v or ()) for k, v in data[style].items()})


def class_embeddings(bank: Mapping[str, Sequence[str]], encode_fn: EncodeFn) -> Dict[str, np.ndarray]:
    """Average the unit prompt embeddings of each class, then renormalize."""
    prompts = bank.prompts if isinstance(bank, PromptBank) else bank
    if not prompts:
        raise DomainError("class_embeddings: no classes")
    out = {}
    for name, texts in prompts.items():
        if not texts:
            raise DomainError(f"class {name}: missing prompts")
        embs = _unit(np.asarray(encode_fn(list(texts)), dtype=np.float64))
        out[name] = _unit(embs.mean(axis=0))
    return out


def classify(image_emb: np.ndarray, class_embs: Mapping[str, np.ndarray]) -> Tuple[str, Dict[str, float]]:
    """Highest cosine wins; ties go to the first class name in sorted order."""
    if not class_embs:
        raise DomainError("classify: empty class map")
    names = sorted(class_embs)
    scores = {name: float(np.dot(image_emb, class_embs[name])) for name in names}
    best = names[0]
    for name in names[1:]:
        if scores[name] > scores[best]:
            best = name
    return best, scores


def classify_batch(image_embs: np.ndarray, class_embs: Mapping[str, np.ndarray]) -> Tuple[List[str], np.ndarray]:
    """Vectorized classify; returns predictions and an N x C score matrix
    with columns in sorted class order."""
    if not class_embs:
        raise DomainError("classify: empty class map")
    names = sorted(class_embs)
    matrix = np.stack([class_embs[n] for n in names])
    scores = np.asarray(image_embs) @ matrix.T
    # argmax returns the first maximum, i.e. the smallest name
    return [names[i] for i in np.argmax(scores, axis=1)], scores


# ==================== GA estimation ====================

class GAPromptGenerator:
    """Five brain-view prompts per GA day, built from the caption templates."""

    def __init__(self, templates: TemplateBank, labels: Sequence[str] = (ViewClass.BRAIN.value,)):
        self.templates = templates
        self.labels = frozenset(labels)
        templates.skeletons(self.labels)

    def prompts(self, ga_days: int, pixel_spacing_mm: float) -> Tuple[str, ...]:
        record = ImageRecord(
            image_id=f"ga-{ga_days}",
            patient_id="prompt",
            image_path="",
            labels=self.labels,
            ga_days=int(ga_days),
            pixel_spacing_mm=pixel_spacing_mm,
        )
        return build_caption_set(record, self.templates).captions


def select_ga(
    days: Sequence[int],
    scores: Sequence[float],
    top_k: int = GA_TOP_K,
    rule: GARule = GARule.MEDIAN_TOP_K,
) -> GAEstimate:
    """Top-k by score (ties toward smaller GA); median or argmax of them."""
    days = [int(d) for d in days]
    scores = np.asarray(scores, dtype=np.float64)
    if len(days) != len(scores) or not days:
        raise ShapeError(f"{len(days)} GA candidates but {len(scores)} scores")
    order = sorted(range(len(days)), key=lambda i: (-scores[i], days[i]))
    top = [days[i] for i in order[:top_k]]
    if rule == GARule.ARGMAX:
        ga = top[0]
    else:
        ga = sorted(top)[len(top) // 2]
    return GAEstimate(ga_days=ga, top_candidates=top, rule=GARule(rule))


class GAEstimator:
    """Scores the 183-day sweep against an image embedding. Prompt
    embeddings are cached per pixel spacing."""

    def __init__(self, generator: GAPromptGenerator, encode_fn: EncodeFn, top_k: int = GA_TOP_K):
        self.generator = generator
        self.encode_fn = encode_fn
        self.top_k = top_k
        self._cache: Dict[float, np.ndarray] = {}

    def prompt_matrix(self, pixel_spacing_mm: float) -> np.ndarray:
        """Row t = mean of the five unit prompt embeddings for day t."""
        key = round(float(pixel_spacing_mm), 6)
        if key not in self._cache:
            texts = [p for t in GA_DAYS for p in self.generator.prompts(int(t), pixel_spacing_mm)]
            embs = _unit(np.asarray(self.encode_fn(texts), dtype=np.float64))
            self._cache[key] = embs.reshape(len(GA_DAYS), N_PROMPTS, -1).mean(axis=1)
            logger.debug(f"Encoded {len(texts)} GA prompts for spacing {pixel_spacing_mm}")
        return self._cache[key]

    def scores(self, image_emb: np.ndarray, pixel_spacing_mm: Optional[float]) -> np.ndarray:
        if pixel_spacing_mm is None or not pixel_spacing_mm > 0:
            raise DomainError("GA estimation needs a known pixel spacing")
        # mean of cosines == cosine against the mean prompt embedding
        return self.prompt_matrix(pixel_spacing_mm) @ np.asarray(image_emb, dtype=np.float64)

    def estimate(self, image_emb: np.ndarray, pixel_spacing_mm: Optional[float],
                 rule: GARule = GARule.MEDIAN_TOP_K) -> GAEstimate:
        return select_ga(GA_DAYS, self.scores(image_emb, pixel_spacing_mm), self.top_k, rule)


def estimate_ga(
    image_emb: np.ndarray,
    generator: GAPromptGenerator,
    encode_fn: EncodeFn,
    pixel_spacing_mm: Optional[float],
    top_k: int = GA_TOP_K,
    rule: GARule = GARule.MEDIAN_TOP_K,
) -> GAEstimate:
    return GAEstimator(generator, encode_fn, top_k).estimate(image_emb, pixel_spacing_mm, rule)


# ==================== Validity ====================

def hc_percentile_bounds(ga_days: int, models: Mapping[float, QuantileModel]) -> Tuple[float, float]:
    check_ga(ga_days)
    for p in (P_LOW, P_HIGH):
        if p not in models:
            raise DomainError(f"quantile model for percentile {p:g} missing")
    return float(models[P_LOW](ga_days)), float(models[P_HIGH](ga_days))


def check_validity(true_hc_mm: float, estimate: GAEstimate, models: Mapping[float, QuantileModel]) -> ValidityCheck:
    """Valid iff the true HC lies inside the percentile band at the predicted GA.
    HC outside the evaluation range is excluded, not judged."""
    if not HC_MIN_MM <= true_hc_mm <= HC_MAX_MM:
        return ValidityCheck(
            ValidityStatus.EXCLUDED,
            reason=f"hc_out_of_range: {true_hc_mm:g} mm not in [{HC_MIN_MM:g}, {HC_MAX_MM:g}]",
        )
    lo, hi = hc_percentile_bounds(estimate.ga_days, models)
    valid = lo <= true_hc_mm <= hi
    estimate.valid = valid
    return ValidityCheck(ValidityStatus.VALID if valid else ValidityStatus.INVALID, lo, hi)


# ==================== Evaluation ====================

@dataclass
class ZeroShotEvalSet:
    """Standardized images with their view labels."""
    images: np.ndarray
    labels: List[str]
    image_ids: Optional[List[str]] = None

    def __len__(self) -> int:
        return len(self.labels)


def evaluate_views(
    image_embs: np.ndarray,
    labels: Sequence[str],
    class_embs: Mapping[str, np.ndarray],
    image_ids: Optional[Sequence[str]] = None,
) -> dict:
    """Per-image predictions, per-class F1, macro-F1 and confusion matrix."""
    classes = sorted(class_embs)
    preds, scores = classify_batch(image_embs, class_embs)
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(preds))]
    return {
        "classes": classes,
        "macro_f1": macro_f1(preds, labels, classes),
        "per_class_f1": per_class_f1(preds, labels, classes),
        "confusion_matrix": confusion_matrix(preds, labels, classes).tolist(),
        "predictions": [
            {"image_id": i, "label": y, "prediction": p, "scores": dict(zip(classes, map(float, s)))}
            for i, y, p, s in zip(ids, labels, preds, scores)
        ],
    }


def zero_shot_macro_f1(model: DualEncoder, vocab: Vocab, eval_set: ZeroShotEvalSet, bank: PromptBank) -> float:
    if len(eval_set) == 0:
        raise DomainError("zero-shot eval set is empty")
    class_embs = class_embeddings(bank, text_encode_fn(model, vocab))
    preds, _ = classify_batch(embed_images(model, eval_set.images), class_embs)
    return macro_f1(preds, eval_set.labels, sorted(class_embs))


def evaluate_ga(
    image_embs: np.ndarray,
    records: Sequence[ImageRecord],
    estimator: GAEstimator,
    models: Mapping[float, QuantileModel],
    rules: Sequence[GARule] = (GARule.MEDIAN_TOP_K, GARule.ARGMAX),
) -> dict:
    """Run both selection rules over brain images and report validity rates."""
    if len(image_embs) != len(records):
        raise ShapeError(f"{len(image_embs)} embeddings for {len(records)} records")
    rows = []
    counts = {GARule(r).value: {"valid": 0, "invalid": 0, "excluded": 0} for r in rules}
    for emb, record in tqdm(list(zip(image_embs, records)), desc="GA sweep", disable=len(records) < 50):
        scores = estimator.scores(emb, record.pixel_spacing_mm)
        row = {"image_id": record.image_id, "true_ga_days": record.ga_days, "hc_mm": record.hc_mm}
        for rule in rules:
            rule = GARule(rule)
            estimate = select_ga(GA_DAYS, scores, estimator.top_k, rule)
            if record.hc_mm is None:
                check = ValidityCheck(ValidityStatus.EXCLUDED, reason="hc_missing")
            else:
                check = check_validity(record.hc_mm, estimate, models)
            counts[rule.value][check.status.value] += 1
            row[rule.value] = {
                "ga_days": estimate.ga_days,
                "status": check.status.value,
                "hc_lo": check.hc_lo,
                "hc_hi": check.hc_hi,
                "reason": check.reason,
            }
        rows.append(row)

    summary = {}
    for rule, c in counts.items():
        judged = c["valid"] + c["invalid"]
        summary[rule] = {**c, "validity_rate": c["valid"] / judged if judged else None}
    return {"rules": summary, "predictions": rows}


def brain_subview_report(
    image_embs: np.ndarray,
    records: Sequence[ImageRecord],
    bank: Mapping[str, Sequence[str]],
    encode_fn: EncodeFn,
) -> Optional[dict]:
    """Zero-shot over the brain subviews, restricted to records carrying a
    subview label; None when no record does."""
    subviews = set(SUBVIEWS[ViewClass.BRAIN.value])
    keep = [i for i, r in enumerate(records) if r.labels & subviews]
    if not keep:
        return None
    labels = [sorted(records[i].labels & subviews)[0] for i in keep]
    return evaluate_views(image_embs[keep], labels, class_embeddings(bank, encode_fn),
                          [records[i].image_id for i in keep])
