"""
Lightweight multilabel segmentation decoder on frozen vision-tower taps.
UNETR layout with depthwise-separable convolutions and depthwise
transposed-convolution upsampling.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from ..config import SegDecoderConfig, SegTrainConfig
from ..errors import ConfigError, ShapeError
from .encoders import DualEncoder, count_parameters, freeze
from .metrics import dsc

logger = logging.getLogger(__name__)


# ==================== Blocks ====================

class DSConv(nn.Sequential):
    """Depthwise 3x3, pointwise 1x1, batch norm, ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3):
        super().__init__(
            nn.Conv2d(in_ch, in_ch, kernel_size, padding=kernel_size // 2, groups=in_ch, bias=False),
            nn.Conv2d(in_ch, out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3):
        super().__init__(DSConv(in_ch, out_ch, kernel_size), DSConv(out_ch, out_ch, kernel_size))


class DWUp(nn.ConvTranspose2d):
    """x2 depthwise transposed convolution."""

    def __init__(self, channels: int):
        super().__init__(channels, channels, kernel_size=2, stride=2, groups=channels, bias=False)


class Proj(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(nn.Conv2d(in_ch, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch))


class UpPath(nn.Sequential):
    """Project a token grid, then n x (upsample, separable conv)."""

    def __init__(self, hidden: int, out_ch: int, n_up: int, kernel_size: int = 3):
        layers: List[nn.Module] = [Proj(hidden, out_ch)]
        for _ in range(n_up):
            layers += [DWUp(out_ch), DSConv(out_ch, out_ch, kernel_size)]
        super().__init__(*layers)


class UpStage(nn.Module):
    """Upsample, concatenate the skip, fuse."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, kernel_size: int = 3):
        super().__init__()
        self.up = DWUp(in_ch)
        self.block = ConvBlock(in_ch + skip_ch, out_ch, kernel_size)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.block(torch.cat([self.up(x), skip], dim=1))


# ==================== Decoder ====================

class SegDecoder(nn.Module):
    def __init__(self, cfg: SegDecoderConfig):
        super().__init__()
        problems = cfg.validate()
        if problems:
            raise ConfigError([f"seg_decoder.{p}" for p in problems])
        self.config = cfg
        h, f, k = cfg.hidden_size, cfg.feature_size, cfg.kernel_size

        self.encoder1 = ConvBlock(cfg.in_channels, f, k)
        self.encoder2 = UpPath(h, 2 * f, 3, k)
        self.encoder3 = UpPath(h, 4 * f, 2, k)
        self.encoder4 = UpPath(h, 8 * f, 1, k)
        self.bottleneck = Proj(h, 8 * f)
        self.decoder5 = UpStage(8 * f, 8 * f, 8 * f, k)
        self.decoder4 = UpStage(8 * f, 4 * f, 4 * f, k)
        self.decoder3 = UpStage(4 * f, 2 * f, 2 * f, k)
        self.decoder2 = UpStage(2 * f, f, f, k)
        self.out = nn.Conv2d(f, cfg.out_channels, 1)
        # zero head: every structure starts at probability 0.5
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

        n = count_parameters(self)
        if n > cfg.max_params:
            raise ConfigError(f"seg_decoder: {n} parameters exceed the {cfg.max_params} budget")

    def forward(self, images: torch.Tensor, taps: Sequence[torch.Tensor]) -> torch.Tensor:
        """images N x C x H x W, taps = four N x hidden x g x g grids -> N x Ns x H x W logits."""
        if len(taps) != 4:
            raise ShapeError(f"expected 4 encoder taps, got {len(taps)}")
        size = self.config.image_size
        chain = self.config.chain_size
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.shape[-2:] != (size, size):
            raise ShapeError(f"expected {size} x {size} images, got {tuple(images.shape[-2:])}")
        x1 = images if chain == size else F.interpolate(images, size=(chain, chain), mode="bilinear", align_corners=False)

        z3, z6, z9, z12 = taps
        enc1 = self.encoder1(x1)
        enc2 = self.encoder2(z3)
        enc3 = self.encoder3(z6)
        enc4 = self.encoder4(z9)
        dec4 = self.decoder5(self.bottleneck(z12), enc4)
        dec3 = self.decoder4(dec4, enc3)
        dec2 = self.decoder3(dec3, enc2)
        dec1 = self.decoder2(dec2, enc1)
        logits = self.out(dec1)
        if chain != size:
            logits = F.interpolate(logits, size=(size, size), mode="bilinear", align_corners=False)
        return logits


def seg_decoder_params(cfg: SegDecoderConfig) -> int:
    """Closed-form parameter count of SegDecoder."""
    h, f, c, ns = cfg.hidden_size, cfg.feature_size, cfg.in_channels, cfg.out_channels
    return 22 * h * f + 385 * f * f + (1003 + c) * f + 9 * c + ns * (f + 1)


def build_seg_decoder(cfg: SegDecoderConfig, encoder: Optional[DualEncoder] = None) -> SegDecoder:
    if encoder is not None:
        enc = encoder.config
        problems = []
        if enc.vision_width != cfg.hidden_size:
            problems.append(f"seg_decoder.hidden_size: {cfg.hidden_size} != encoder width {enc.vision_width}")
        if enc.vision_layers != cfg.num_layers:
            problems.append(f"seg_decoder.num_layers: {cfg.num_layers} != encoder depth {enc.vision_layers}")
        if (enc.image_size, enc.patch_size) != (cfg.image_size, cfg.patch_size):
            problems.append("seg_decoder.image_size: must match the encoder image and patch size")
        if problems:
            raise ConfigError(problems)
    decoder = SegDecoder(cfg)
    logger.info(f"Segmentation decoder: {count_parameters(decoder):,} parameters, taps {cfg.tap_layers}")
    return decoder


def decoder_config_for(encoder: DualEncoder, out_channels: int, feature_size: int = 16) -> SegDecoderConfig:
    enc = encoder.config
    return SegDecoderConfig(
        hidden_size=enc.vision_width,
        num_layers=enc.vision_layers,
        patch_size=enc.patch_size,
        image_size=enc.image_size,
        in_channels=enc.in_channels,
        feature_size=feature_size,
        out_channels=out_channels,
    )


# ==================== Training ====================

@dataclass
class SegDataset:
    images: np.ndarray           # N x H x W
    masks: np.ndarray            # N x Ns x H x W bool
    structures: List[str]

    def __post_init__(self):
        if self.masks.ndim != 4 or self.images.ndim != 3:
            raise ShapeError(f"expected N x H x W images and N x Ns x H x W masks, got {self.images.shape} / {self.masks.shape}")
        if self.masks.shape[0] != self.images.shape[0] or self.masks.shape[-2:] != self.images.shape[-2:]:
            raise ShapeError(f"mask shape {self.masks.shape} does not match images {self.images.shape}")
        if self.masks.shape[1] != len(self.structures):
            raise ShapeError(f"{self.masks.shape[1]} mask channels for {len(self.structures)} structures")

    def __len__(self) -> int:
        return len(self.images)


@torch.no_grad()
def encoder_taps(encoder: DualEncoder, images: np.ndarray, layers: Tuple[int, ...], batch_size: int = 64) -> List[torch.Tensor]:
    """Token grids at the 1-based tap layers, computed once."""
    encoder.eval()
    out: List[List[torch.Tensor]] = [[] for _ in layers]
    for start in range(0, len(images), batch_size):
        grids = encoder.image_taps(torch.as_tensor(images[start: start + batch_size], dtype=torch.float32))
        for i, layer in enumerate(layers):
            out[i].append(grids[layer - 1])
    return [torch.cat(t) for t in out]


def seg_loss(logits: torch.Tensor, targets: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Per-channel BCE plus soft Dice, equally weighted."""
    bce = F.binary_cross_entropy_with_logits(logits, targets)
    probs = torch.sigmoid(logits)
    dims = (0, 2, 3)
    inter = (probs * targets).sum(dims)
    dice = (2 * inter + eps) / (probs.sum(dims) + targets.sum(dims) + eps)
    return bce + (1 - dice).mean()


def evaluate_seg(decoder: SegDecoder, dataset: SegDataset, taps: List[torch.Tensor], batch_size: int = 32) -> Dict[str, float]:
    """Per-structure DSC averaged over images, plus the unweighted mean."""
    decoder.eval()
    per: Dict[str, List[float]] = {s: [] for s in dataset.structures}
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            logits = decoder(torch.as_tensor(dataset.images[sl], dtype=torch.float32), [t[sl] for t in taps])
            pred = (logits > 0).numpy()
            for n in range(pred.shape[0]):
                for c, name in enumerate(dataset.structures):
                    per[name].append(dsc(pred[n, c], dataset.masks[start + n, c]))
    report = {name: float(np.mean(v)) for name, v in per.items()}
    report["mean"] = float(np.mean([report[s] for s in dataset.structures]))
    return report


def train_seg(
    decoder: SegDecoder,
    encoder: DualEncoder,
    dataset: SegDataset,
    config: Optional[SegTrainConfig] = None,
    val: Optional[SegDataset] = None,
) -> Tuple[SegDecoder, Dict[str, float]]:
    """Train the decoder on a frozen encoder; returns the decoder and the
    per-structure DSC on val (or train when no val set is given)."""
    config = config or SegTrainConfig()
    size = decoder.config.image_size
    if dataset.images.shape[-2:] != (size, size):
        raise ShapeError(f"images are {dataset.images.shape[-2:]}, decoder expects {size} x {size}")
    if dataset.masks.shape[1] != decoder.config.out_channels:
        raise ShapeError(f"{dataset.masks.shape[1]} mask channels, decoder has {decoder.config.out_channels}")

    freeze(encoder)
    layers = decoder.config.tap_layers
    taps = encoder_taps(encoder, dataset.images, layers)
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.SGD(decoder.parameters(), lr=config.lr, momentum=config.momentum)
    images = torch.as_tensor(dataset.images, dtype=torch.float32)
    masks = torch.as_tensor(dataset.masks, dtype=torch.float32)

    for epoch in tqdm(range(config.epochs), desc="Segmentation", leave=False):
        decoder.train()
        order = torch.randperm(len(dataset), generator=generator)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start: start + config.batch_size]
            # batch norm needs more than one sample
            if len(idx) < 2:
                continue
            logits = decoder(images[idx], [t[idx] for t in taps])
            loss = seg_loss(logits, masks[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
        logger.debug(f"seg epoch {epoch + 1}: loss {total / len(dataset):.4f}")

    target = val or dataset
    target_taps = taps if target is dataset else encoder_taps(encoder, target.images, layers)
    report = evaluate_seg(decoder, target, target_taps)
    logger.info("Segmentation DSC: " + ", ".join(f"{k}={v:.3f}" for k, v in report.items()))
    return decoder, report
