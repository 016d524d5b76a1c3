"""
Frozen-encoder probes.
Clip sampling for heart videos, frame-feature combination and the linear
head used for view classification and CHD detection.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import LinearProbeConfig, PreprocessConfig
from ..constants import (
    CombineMode, CLIP_FRAMES, CLIP_STRIDE, VIDEO_MIN_FRAMES, VIDEO_MAX_FRAMES, UNIFORM_CLIP_MAX_FRAMES,
)
from ..errors import DegenerateDataError, DomainError, ShapeError
from ..models import ClipSample
from .encoders import DualEncoder, embed_images
from .preprocess import preprocess_frame

logger = logging.getLogger(__name__)

CLIP_SPAN = (CLIP_FRAMES - 1) * CLIP_STRIDE + 1   # 61


# ==================== Clips ====================

def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5).astype(int)


def sample_clips(video_length: int, video_id: str = "") -> List[ClipSample]:
    """One evenly spaced clip for short videos; strided clips spread over
    longer ones."""
    t = int(video_length)
    if not VIDEO_MIN_FRAMES <= t <= VIDEO_MAX_FRAMES:
        raise DomainError(f"video length {t} outside [{VIDEO_MIN_FRAMES}, {VIDEO_MAX_FRAMES}]")
    if t <= UNIFORM_CLIP_MAX_FRAMES:
        indices = _round_half_up(np.linspace(0, t - 1, CLIP_FRAMES))
        return [ClipSample(video_id, tuple(indices.tolist()))]

    n_clips = math.ceil((t - (CLIP_SPAN - 1)) / 8)
    starts = _round_half_up(np.linspace(0, t - CLIP_SPAN, n_clips))
    offsets = np.arange(CLIP_FRAMES) * CLIP_STRIDE
    return [ClipSample(video_id, tuple((s + offsets).tolist())) for s in starts]


def combine_frames(frame_embs: np.ndarray, mode: CombineMode = CombineMode.CONCATENATE) -> np.ndarray:
    frame_embs = np.asarray(frame_embs)
    if frame_embs.ndim != 2 or frame_embs.shape[0] != CLIP_FRAMES:
        raise ShapeError(f"expected {CLIP_FRAMES} x d frame embeddings, got {frame_embs.shape}")
    if CombineMode(mode) == CombineMode.AVERAGE:
        return frame_embs.mean(axis=0)
    return frame_embs.reshape(-1)


def video_frame_embeddings(model: DualEncoder, frames: np.ndarray, preprocess: PreprocessConfig) -> np.ndarray:
    """Standardize every frame of a T x H x W video and embed it."""
    std = np.stack([preprocess_frame(f, preprocess)[0] for f in frames])
    return embed_images(model, std)


def clip_features(
    frame_embs: np.ndarray,
    mode: CombineMode = CombineMode.CONCATENATE,
    video_id: str = "",
) -> np.ndarray:
    """One feature row per sampled clip of a T x d frame-embedding sequence."""
    clips = sample_clips(len(frame_embs), video_id)
    return np.stack([combine_frames(frame_embs[list(c.frame_indices)], mode) for c in clips])


# ==================== Linear probe ====================

@dataclass
class LinearHead:
    """Affine map on frozen features. Binary heads emit one logit."""
    weight: np.ndarray        # k x C (C = 1 when binary)
    bias: np.ndarray
    classes: List
    binary: bool = False
    best_epoch: int = 0
    best_val_loss: float = float("nan")

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weight + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """N x C class probabilities; binary heads return P(positive) per row."""
        z = self.logits(features)
        if self.binary:
            return 1.0 / (1.0 + np.exp(-z[:, 0]))
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, features: np.ndarray) -> List:
        p = self.predict_proba(features)
        if self.binary:
            return [self.classes[int(v > 0.5)] for v in p]
        return [self.classes[i] for i in np.argmax(p, axis=1)]


def _targets(labels: Sequence, classes: List, binary: bool) -> torch.Tensor:
    index = {c: i for i, c in enumerate(classes)}
    unknown = set(labels) - set(index)
    if unknown:
        raise DomainError(f"labels outside class set: {sorted(map(str, unknown))}")
    y = torch.tensor([index[v] for v in labels])
    return y.float().unsqueeze(1) if binary else y


def fit_linear_probe(
    features: np.ndarray,
    labels: Sequence,
    config: Optional[LinearProbeConfig] = None,
    val_features: Optional[np.ndarray] = None,
    val_labels: Optional[Sequence] = None,
    classes: Optional[Sequence] = None,
    binary: bool = False,
    seed: int = 0,
) -> LinearHead:
    """Full-batch gradient descent on cross-entropy (binary cross-entropy
    when binary); the epoch with the lowest validation loss is kept."""
    config = config or LinearProbeConfig()
    labels = list(labels)
    if len(set(labels)) < 2:
        raise DegenerateDataError(f"linear probe needs at least two classes, got {sorted(map(str, set(labels)))}")
    classes = list(classes) if classes is not None else sorted(set(labels))
    if binary and len(classes) != 2:
        raise DomainError(f"binary probe needs exactly two classes, got {classes}")

    x = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    y = _targets(labels, classes, binary)
    if val_features is not None and val_labels is not None and len(val_labels):
        xv = torch.as_tensor(np.asarray(val_features), dtype=torch.float32)
        yv = _targets(list(val_labels), classes, binary)
    else:
        xv, yv = x, y

    generator = torch.Generator().manual_seed(seed)
    head = nn.Linear(x.shape[1], 1 if binary else len(classes))
    with torch.no_grad():
        head.weight.copy_(torch.randn(head.weight.shape, generator=generator) * 0.01)
        head.bias.zero_()
    loss_fn = F.binary_cross_entropy_with_logits if binary else F.cross_entropy
    optimizer = torch.optim.SGD(head.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    best_loss, best_epoch = math.inf, 0
    best_state = {k: v.clone() for k, v in head.state_dict().items()}
    for epoch in range(1, config.epochs + 1):
        optimizer.zero_grad()
        loss = loss_fn(head(x), y)
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            val_loss = float(loss_fn(head(xv), yv))
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = {k: v.clone() for k, v in head.state_dict().items()}

    logger.debug(f"Linear probe: best validation loss {best_loss:.4f} at epoch {best_epoch}")
    return LinearHead(
        weight=best_state["weight"].numpy().astype(np.float64).T,
        bias=best_state["bias"].numpy().astype(np.float64),
        classes=classes,
        binary=binary,
        best_epoch=best_epoch,
        best_val_loss=best_loss,
    )


# ==================== CHD clip probe ====================

def clip_dataset(
    videos: Sequence[np.ndarray],
    labels: Sequence[int],
    mode: CombineMode = CombineMode.CONCATENATE,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clip rows, their inherited video labels and the owning video index."""
    rows, ys, owners = [], [], []
    for v, (frame_embs, label) in enumerate(zip(videos, labels)):
        feats = clip_features(frame_embs, mode)
        rows.append(feats)
        ys += [int(label)] * len(feats)
        owners += [v] * len(feats)
    return np.concatenate(rows), np.asarray(ys), np.asarray(owners)


def video_scores(head: LinearHead, videos: Sequence[np.ndarray], mode: CombineMode = CombineMode.CONCATENATE) -> np.ndarray:
    """Video-level CHD probability: mean over its clips."""
    return np.array([float(np.mean(head.predict_proba(clip_features(v, mode)))) for v in videos])


# ==================== Frozen contract ====================

def parameter_fingerprint(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
