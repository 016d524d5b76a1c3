"""
Dual encoder: patch-based vision transformer and causal text transformer
projecting into one shared, unit-normalized embedding space.
"""

import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import ModelConfig, config
from ..errors import ConfigError, ContractError, DomainError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
INIT_STD = 0.02


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * mlp_ratio),
            nn.GELU(),
            nn.Linear(width * mlp_ratio, width),
        )

    def forward(self, x: torch.Tensor, attn_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.ln_1(x)
        x = x + self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)[0]
        return x + self.mlp(self.ln_2(x))


class VisionTower(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.vision_width
        self.image_size = cfg.image_size
        self.grid_size = cfg.grid_size
        self.patch_embed = nn.Conv2d(cfg.in_channels, w, kernel_size=cfg.patch_size, stride=cfg.patch_size, bias=False)
        self.cls_token = nn.Parameter(torch.zeros(w))
        self.pos_embed = nn.Parameter(torch.zeros(self.grid_size ** 2 + 1, w))
        self.ln_pre = nn.LayerNorm(w)
        self.blocks = nn.ModuleList([Block(w, cfg.vision_heads, cfg.mlp_ratio) for _ in range(cfg.vision_layers)])
        self.ln_post = nn.LayerNorm(w)
        self.proj = nn.Linear(w, cfg.shared_dim, bias=False)

    def forward_features(self, images: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Pooled class-token feature and the token grid after every block
        (each N x width x grid x grid)."""
        n = images.shape[0]
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(n, 1, -1)
        x = self.ln_pre(torch.cat([cls, x], dim=1) + self.pos_embed)
        grids = []
        for block in self.blocks:
            x = block(x)
            grids.append(x[:, 1:].transpose(1, 2).reshape(n, -1, self.grid_size, self.grid_size))
        return self.ln_post(x[:, 0]), grids

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        pooled, _ = self.forward_features(images)
        return self.proj(pooled)


class TextTower(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.text_width
        self.vocab_size = cfg.vocab_size
        self.max_tokens = cfg.max_tokens
        self.token_embed = nn.Embedding(cfg.vocab_size, w)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_tokens, w))
        self.blocks = nn.ModuleList([Block(w, cfg.text_heads, cfg.mlp_ratio) for _ in range(cfg.text_layers)])
        self.ln_final = nn.LayerNorm(w)
        self.proj = nn.Linear(w, cfg.shared_dim, bias=False)
        mask = torch.full((cfg.max_tokens, cfg.max_tokens), float("-inf")).triu(1)
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, ids: torch.Tensor, eot_id: int) -> torch.Tensor:
        x = self.token_embed(ids) + self.pos_embed
        mask = self.causal_mask.to(x.dtype)
        for block in self.blocks:
            x = block(x, attn_mask=mask)
        x = self.ln_final(x)
        # first end-of-text position; sequences without one read the last slot
        is_eot = ids == eot_id
        pos = torch.where(is_eot.any(dim=1), is_eot.int().argmax(dim=1), torch.full_like(ids[:, 0], ids.shape[1] - 1))
        return self.proj(x[torch.arange(ids.shape[0]), pos])


class DualEncoder(nn.Module):
    """Image and text towers sharing a projection space and a learnable temperature."""

    def __init__(self, cfg: ModelConfig, eot_id: int = 257):
        super().__init__()
        problems = cfg.validate()
        if problems:
            raise ConfigError([f"model.{p}" for p in problems])
        self.config = cfg
        self.eot_id = eot_id
        self.visual = VisionTower(cfg)
        self.text = TextTower(cfg)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(cfg.temperature_init)))
        self.apply(_init_weights)
        for p in (self.visual.cls_token, self.visual.pos_embed, self.text.pos_embed):
            nn.init.trunc_normal_(p, std=INIT_STD)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp().clamp(min=self.config.min_temperature)

    def _check_images(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(1)
        size = self.config.image_size
        if images.dim() != 4 or images.shape[1] != self.config.in_channels or images.shape[-2:] != (size, size):
            raise ShapeError(
                f"expected images N x {self.config.in_channels} x {size} x {size}, got {tuple(images.shape)}"
            )
        return images

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.visual(self._check_images(images)), dim=-1)

    def image_taps(self, images: torch.Tensor) -> List[torch.Tensor]:
        """Per-block token grids for the segmentation decoder."""
        return self.visual.forward_features(self._check_images(images))[1]

    def encode_text(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dim() != 2 or ids.shape[1] != self.config.max_tokens:
            raise ShapeError(f"expected token ids N x {self.config.max_tokens}, got {tuple(ids.shape)}")
        if ids.numel() and (int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0):
            raise DomainError(f"token id outside [0, {self.config.vocab_size})")
        return F.normalize(self.text(ids, self.eot_id), dim=-1)

    def forward(self, images: torch.Tensor, ids: torch.Tensor):
        return self.encode_image(images), self.encode_text(ids), self.temperature


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.trunc_normal_(module.weight, std=INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=INIT_STD)
    elif isinstance(module, nn.MultiheadAttention):
        nn.init.trunc_normal_(module.in_proj_weight, std=INIT_STD)
        nn.init.zeros_(module.in_proj_bias)


# ==================== Similarity ====================

def check_unit(name: str, embs, tol: float = 1e-4) -> None:
    values = embs.detach().cpu().numpy() if isinstance(embs, torch.Tensor) else np.asarray(embs)
    norms = np.linalg.norm(values, axis=-1)
    if norms.size and np.max(np.abs(norms - 1.0)) > tol:
        raise ContractError(f"{name} are not unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.2e})")


def similarity(image_embs, text_embs, temperature, check: Optional[bool] = None):
    """logits[i, j] = image_i . text_j / temperature (numpy or torch)."""
    if check is None:
        check = config.CHECK_CONTRACTS
    if check:
        check_unit("image embeddings", image_embs)
        check_unit("text embeddings", text_embs)
    return image_embs @ text_embs.T / temperature


# ==================== Parameter counts ====================

def block_params(width: int, mlp_ratio: int = 4) -> int:
    # attention 4w^2 + 4w, mlp 2*ratio*w^2 + (ratio + 1)w, two layer norms 4w
    return (4 + 2 * mlp_ratio) * width ** 2 + (9 + mlp_ratio) * width


def vision_tower_params(cfg: ModelConfig) -> int:
    w = cfg.vision_width
    return (
        cfg.in_channels * cfg.patch_size ** 2 * w
        + w
        + (cfg.grid_size ** 2 + 1) * w
        + 4 * w
        + cfg.vision_layers * block_params(w, cfg.mlp_ratio)
        + w * cfg.shared_dim
    )


def text_tower_params(cfg: ModelConfig) -> int:
    w = cfg.text_width
    return (
        cfg.vocab_size * w
        + cfg.max_tokens * w
        + cfg.text_layers * block_params(w, cfg.mlp_ratio)
        + 2 * w
        + w * cfg.shared_dim
    )


def dual_encoder_params(cfg: ModelConfig) -> int:
    return vision_tower_params(cfg) + text_tower_params(cfg) + 1


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


# ==================== Checkpoints ====================

def save_checkpoint(path: str, model: DualEncoder, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "eot_id": model.eot_id,
        "meta": dict(meta or {}),
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_checkpoint(path: str) -> Tuple[DualEncoder, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {version}")
    cfg_dict = dict(payload["config"])
    cfg_dict = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg_dict.items()}
    model = DualEncoder(ModelConfig(**cfg_dict), eot_id=payload.get("eot_id", 257))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("meta", {})


def import_weights(model: nn.Module, state_dict: Dict[str, torch.Tensor]) -> Tuple[List[str], List[str]]:
    """Copy tensors whose name and shape match; returns (loaded, skipped)."""
    own = model.state_dict()
    loaded, skipped = [], []
    for name, tensor in state_dict.items():
        if name in own and own[name].shape == tensor.shape:
            own[name] = tensor.to(own[name].dtype)
            loaded.append(name)
        else:
            skipped.append(name)
    model.load_state_dict(own)
    logger.info(f"Imported {len(loaded)} tensors, skipped {len(skipped)}")
    return loaded, skipped


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


@torch.no_grad()
def embed_images(model: DualEncoder, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Unit image embeddings for an N x H x W float array."""
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        batch = torch.as_tensor(images[start: start + batch_size], dtype=torch.float32)
        out.append(model.encode_image(batch).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.config.shared_dim), np.float32)


@torch.no_grad()
def embed_texts(model: DualEncoder, ids: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(ids), batch_size):
        batch = torch.as_tensor(ids[start: start + batch_size], dtype=torch.long)
        out.append(model.encode_text(batch).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.config.shared_dim), np.float32)
