"""
Interpretability: ScoreCAM saliency over the image encoder and 2-D
projections of embedding sets.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.decomposition import PCA
from sklearn.manifold import SpectralEmbedding
from sklearn.metrics import silhouette_score

from ..constants import ProjectionMethod
from ..errors import DegenerateDataError, DomainError, ShapeError
from .storage import write_png

logger = logging.getLogger(__name__)


# ==================== ScoreCAM ====================

def _minmax(x: torch.Tensor) -> Optional[torch.Tensor]:
    lo, hi = x.min(), x.max()
    if float(hi - lo) <= 0:
        return None
    return (x - lo) / (hi - lo)


@torch.no_grad()
def scorecam(
    image: np.ndarray,
    target_emb: np.ndarray,
    encoder,
    tap_layer: int = -1,
    max_channels: Optional[int] = None,
    batch_size: int = 64,
) -> np.ndarray:
    """H x W saliency in [0, 1] for how strongly each region pulls the image
    embedding towards target_emb.

    encoder needs image_taps(N x H x W) -> list of N x K x g x g grids and
    encode_image(N x H x W) -> N x d unit embeddings."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ShapeError(f"expected an H x W image, got {image.shape}")
    if float(image.max() - image.min()) <= 0:
        raise DegenerateDataError("ScoreCAM needs a non-constant image")
    target = torch.as_tensor(np.asarray(target_emb, dtype=np.float32))
    norm = float(target.norm())
    if norm == 0:
        raise DomainError("target embedding is the zero vector")
    target = target / norm

    x = torch.as_tensor(image)
    h, w = image.shape
    grid = encoder.image_taps(x[None])[tap_layer][0]          # K x g x g
    if max_channels is not None:
        grid = grid[:max_channels]
    upsampled = F.interpolate(grid[:, None], size=(h, w), mode="bilinear", align_corners=False)[:, 0]

    maps: List[torch.Tensor] = []
    for channel in upsampled:
        m = _minmax(channel)
        if m is not None:
            maps.append(m)
    if not maps:
        logger.warning("Every activation map at the tap layer is constant; saliency is empty")
        return np.zeros((h, w), dtype=np.float32)
    maps_t = torch.stack(maps)                                  # K' x H x W

    scores = []
    for start in range(0, len(maps_t), batch_size):
        masked = maps_t[start: start + batch_size] * x
        scores.append(encoder.encode_image(masked) @ target)
    weights = torch.softmax(torch.cat(scores), dim=0)

    cam = torch.relu((weights[:, None, None] * maps_t).sum(dim=0))
    cam = _minmax(cam)
    if cam is None:
        return np.zeros((h, w), dtype=np.float32)
    return cam.numpy().astype(np.float32)


def saliency_ratio(cam: np.ndarray, inside: np.ndarray, region: Optional[np.ndarray] = None) -> float:
    """Mean saliency inside a structure over mean saliency in the rest of
    region (whole image by default)."""
    inside = np.asarray(inside, bool)
    region = np.ones_like(inside) if region is None else np.asarray(region, bool)
    outside = region & ~inside
    if not inside.any() or not outside.any():
        raise DomainError("saliency ratio needs pixels both inside and outside the structure")
    out_mean = float(cam[outside].mean())
    return float("inf") if out_mean == 0 else float(cam[inside].mean()) / out_mean


def overlay(image: np.ndarray, cam: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Grayscale blend of the image and its saliency map."""
    return np.clip((1 - alpha) * np.asarray(image, np.float32) + alpha * cam, 0.0, 1.0)


def export_saliency(out_dir: str, name: str, image: np.ndarray, cam: np.ndarray) -> List[Path]:
    out = Path(out_dir)
    return [
        write_png(out / f"{name}_saliency.png", cam),
        write_png(out / f"{name}_overlay.png", overlay(image, cam)),
    ]


# ==================== Projection ====================

def _pca_signs(components: np.ndarray) -> np.ndarray:
    """+1/-1 per component so its largest-magnitude loading is positive."""
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return signs


def project_embeddings(
    embeddings: np.ndarray,
    method: ProjectionMethod = ProjectionMethod.PCA,
    seed: int = 0,
    n_neighbors: int = 15,
) -> np.ndarray:
    """N x 2 coordinates. pca is deterministic up to the sign convention;
    umap-like is a spectral layout of the k-nearest-neighbour graph."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected N x d embeddings, got {x.shape}")
    n, d = x.shape
    if n < 3:
        raise DomainError(f"projection needs at least 3 points, got {n}")
    if d < 2:
        raise DomainError(f"projection needs d >= 2, got {d}")

    method = ProjectionMethod(method)
    if method == ProjectionMethod.PCA:
        pca = PCA(n_components=2, svd_solver="full").fit(x)
        signs = _pca_signs(pca.components_)
        coords = (x - pca.mean_) @ (pca.components_ * signs[:, None]).T
        # exact zeros for directions without variance
        coords[:, pca.explained_variance_ <= 1e-12 * max(1.0, pca.explained_variance_[0])] = 0.0
        return coords

    layout = SpectralEmbedding(
        n_components=2,
        affinity="nearest_neighbors",
        n_neighbors=max(2, min(n_neighbors, n - 1)),
        random_state=seed,
    )
    return layout.fit_transform(x)


def silhouette(coords: np.ndarray, labels: Sequence) -> float:
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise DegenerateDataError("silhouette needs at least two labels")
    return float(silhouette_score(coords, labels))


def write_projection(path: str, coords: np.ndarray, ids: Optional[Sequence[str]] = None,
                     labels: Optional[Sequence[str]] = None) -> Path:
    """Tab-separated x/y columns; id and label columns when given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for i, (x, y) in enumerate(coords):
            cols = [f"{x:.6f}", f"{y:.6f}"]
            if ids is not None:
                cols.insert(0, str(ids[i]))
            if labels is not None:
                cols.append(str(labels[i]))
            f.write("\t".join(cols) + "\n")
    return path
