import numpy as np
import pytest
import torch

from src.constants import ProjectionMethod
from src.errors import DegenerateDataError, DomainError
from src.services.interpret import (
    export_saliency, project_embeddings, saliency_ratio, scorecam, silhouette, write_projection,
)


class PatchEncoder:
    """Fixed encoder: taps are 4x4 block means, the embedding is the
    normalized (top, bottom) brightness split."""

    def __init__(self, channels=None):
        self.channels = channels

    def image_taps(self, images):
        pooled = torch.nn.functional.avg_pool2d(images[:, None], 4)
        grid = pooled if self.channels is None else pooled * self.channels[None, :, None, None]
        return [grid]

    def encode_image(self, images):
        h = images.shape[-2] // 2
        top = images[:, :h].flatten(1).sum(1)
        bottom = images[:, h:].flatten(1).sum(1)
        return torch.nn.functional.normalize(torch.stack([top, bottom], dim=1) + 1e-6, dim=1)


def test_single_channel_equals_normalized_map(rng):
    image = rng.random((16, 16)).astype(np.float32)
    cam = scorecam(image, np.array([1.0, 0.0]), PatchEncoder())
    grid = torch.nn.functional.avg_pool2d(torch.as_tensor(image)[None, None], 4)
    up = torch.nn.functional.interpolate(grid, size=(16, 16), mode="bilinear", align_corners=False)[0, 0].numpy()
    expected = (up - up.min()) / (up.max() - up.min())
    np.testing.assert_allclose(cam, expected, atol=1e-5)


def test_output_range_and_scale_invariance(rng):
    image = rng.random((16, 16)).astype(np.float32)
    encoder = PatchEncoder(torch.tensor([1.0, -1.0, 0.5]))
    a = scorecam(image, np.array([0.3, 0.7]), encoder)
    b = scorecam(image, np.array([3.0, 7.0]), encoder)
    assert a.min() >= 0.0 and a.max() <= 1.0
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_constant_image_rejected():
    with pytest.raises(DegenerateDataError):
        scorecam(np.ones((16, 16), np.float32), np.array([1.0, 0.0]), PatchEncoder())


def test_zero_target_rejected(rng):
    with pytest.raises(DomainError):
        scorecam(rng.random((16, 16)), np.zeros(2), PatchEncoder())


def test_saliency_ratio():
    cam = np.zeros((4, 4))
    cam[:2] = 1.0
    cam[2:] = 0.25
    inside = np.zeros((4, 4), bool)
    inside[:2] = True
    assert saliency_ratio(cam, inside) == pytest.approx(4.0)
    with pytest.raises(DomainError):
        saliency_ratio(cam, np.ones((4, 4), bool))


def test_export_saliency(tmp_path, rng):
    paths = export_saliency(str(tmp_path), "x", rng.random((8, 8)), rng.random((8, 8)))
    assert [p.name for p in paths] == ["x_saliency.png", "x_overlay.png"]
    assert all(p.exists() for p in paths)


# ==================== Projection ====================

def test_pca_collinear_points():
    coords = project_embeddings(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    np.testing.assert_array_equal(coords[:, 1], 0.0)
    assert coords[0, 0] < coords[1, 0] < coords[2, 0]


def test_pca_translation_invariant(rng):
    x = rng.normal(size=(20, 5))
    np.testing.assert_allclose(project_embeddings(x), project_embeddings(x + 7.5), atol=1e-9)


def test_pca_sign_convention(rng):
    x = rng.normal(size=(20, 5))
    np.testing.assert_allclose(project_embeddings(-x), -project_embeddings(x), atol=1e-9)


def test_projection_errors():
    with pytest.raises(DomainError):
        project_embeddings(np.zeros((2, 4)))
    with pytest.raises(DomainError):
        project_embeddings(np.zeros((5, 1)))


def test_umap_like_is_seeded(rng):
    centers = rng.normal(0, 5, size=(3, 6))
    x = np.concatenate([c + rng.normal(0, 0.2, size=(10, 6)) for c in centers])
    a = project_embeddings(x, ProjectionMethod.UMAP_LIKE, seed=1, n_neighbors=5)
    b = project_embeddings(x, ProjectionMethod.UMAP_LIKE, seed=1, n_neighbors=5)
    assert a.shape == (30, 2)
    np.testing.assert_allclose(a, b)


def test_silhouette_on_separated_clusters(rng):
    coords = np.concatenate([rng.normal(0, 0.1, size=(10, 2)), rng.normal(5, 0.1, size=(10, 2))])
    assert silhouette(coords, ["a"] * 10 + ["b"] * 10) > 0.9
    with pytest.raises(DegenerateDataError):
        silhouette(coords, ["a"] * 20)


def test_write_projection(tmp_path):
    path = write_projection(str(tmp_path / "p.tsv"), np.array([[1.0, 2.0]]), ["i0"], ["brain"])
    assert path.read_text() == "i0\t1.000000\t2.000000\tbrain\n"
