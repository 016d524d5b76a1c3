"""Shared fixtures."""

import numpy as np
import pytest
import torch

from src.config import ModelConfig
from src.services.encoders import DualEncoder


TINY_MODEL = ModelConfig(
    image_size=32,
    patch_size=8,
    vision_layers=4,
    vision_width=32,
    vision_heads=2,
    text_layers=1,
    text_width=32,
    text_heads=2,
    shared_dim=16,
    vocab_size=300,
)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY_MODEL


@pytest.fixture
def tiny_model() -> DualEncoder:
    torch.manual_seed(0)
    return DualEncoder(TINY_MODEL).eval()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


def unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)
