import numpy as np
import pytest
import torch

from src.config import SegDecoderConfig, SegTrainConfig
from src.errors import ConfigError, ShapeError
from src.services.encoders import count_parameters
from src.services.segmentation import (
    SegDataset, build_seg_decoder, decoder_config_for, seg_decoder_params, train_seg,
)

from conftest import TINY_MODEL


@pytest.mark.parametrize("hidden, target", [(768, 1.32e6), (1024, 1.59e6)])
def test_parameter_budget(hidden, target):
    cfg = SegDecoderConfig(hidden_size=hidden, num_layers=24, patch_size=14, image_size=224,
                           feature_size=40, out_channels=3, max_params=2_000_000)
    decoder = build_seg_decoder(cfg)
    assert count_parameters(decoder) == seg_decoder_params(cfg)
    assert abs(seg_decoder_params(cfg) - target) / target <= 0.05


def test_tap_layers():
    assert SegDecoderConfig(num_layers=12).tap_layers == (3, 6, 9, 12)
    assert SegDecoderConfig(num_layers=4).tap_layers == (1, 2, 3, 4)


def test_invalid_configs(tiny_model):
    with pytest.raises(ConfigError):
        build_seg_decoder(SegDecoderConfig(num_layers=3))
    with pytest.raises(ConfigError):
        build_seg_decoder(SegDecoderConfig(image_size=512, patch_size=64, hidden_size=32))
    with pytest.raises(ConfigError):
        build_seg_decoder(SegDecoderConfig(hidden_size=64, image_size=32, patch_size=8), tiny_model)


def test_output_shape_and_zero_init(tiny_model):
    decoder = build_seg_decoder(decoder_config_for(tiny_model, 2), tiny_model).eval()
    images = torch.rand(3, 1, 32, 32)
    with torch.no_grad():
        logits = decoder(images, tiny_model.image_taps(images))
    assert logits.shape == (3, 2, 32, 32)
    torch.testing.assert_close(torch.sigmoid(logits), torch.full_like(logits, 0.5))


def test_wrong_tap_count(tiny_model):
    decoder = build_seg_decoder(decoder_config_for(tiny_model, 1), tiny_model)
    images = torch.rand(2, 1, 32, 32)
    with pytest.raises(ShapeError):
        decoder(images, tiny_model.image_taps(images)[:3])


def test_dataset_shapes():
    with pytest.raises(ShapeError):
        SegDataset(np.zeros((2, 8, 8)), np.zeros((2, 1, 8, 8), bool), ["a", "b"])
    with pytest.raises(ShapeError):
        SegDataset(np.zeros((2, 8, 8)), np.zeros((3, 1, 8, 8), bool), ["a"])


def disks(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    images, masks = [], []
    for _ in range(n):
        cy, cx = rng.uniform(10, 22, size=2)
        r = rng.uniform(5, 9)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        images.append(np.where(mask, 0.9, 0.1) + rng.normal(0, 0.02, size=mask.shape))
        masks.append(mask[None])
    return SegDataset(np.array(images, np.float32), np.array(masks), ["disk"])


@pytest.mark.slow
def test_learns_disk_on_frozen_encoder(tiny_model):
    decoder = build_seg_decoder(decoder_config_for(tiny_model, 1), tiny_model)
    _, report = train_seg(decoder, tiny_model, disks(64), SegTrainConfig(epochs=30, batch_size=16), val=disks(16, seed=1))
    assert report["disk"] >= 0.7
    assert count_parameters(tiny_model, trainable_only=True) == 0
