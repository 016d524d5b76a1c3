"""
Contrastive pretraining.
Symmetric InfoNCE loss, warmup + cosine schedule, shard-aware batching
and per-epoch checkpoints with selection by zero-shot macro-F1.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..config import PreprocessConfig, TrainConfig, config
from ..errors import ConfigError, ContractError, DomainError
from ..models import AugmentationPolicy, Checkpoint, ShardEntry
from .encoders import DualEncoder, check_unit, load_checkpoint, save_checkpoint
from .preprocess import augment, load_frame
from .storage import write_jsonl
from .tokenizer import Vocab, encode_batch
from .zeroshot import PromptBank, ZeroShotEvalSet, zero_shot_macro_f1

logger = logging.getLogger(__name__)

NO_DECAY_SUFFIXES = ("pos_embed", "cls_token", "token_embed.weight", "log_temperature")


# ==================== Loss and schedule ====================

def clip_loss(image_embs: torch.Tensor, text_embs: torch.Tensor, temperature) -> torch.Tensor:
    """1/2 (CE over rows + CE over columns) with diagonal targets."""
    n = image_embs.shape[0]
    if n == 0:
        raise DomainError("clip_loss needs at least one pair")
    if config.CHECK_CONTRACTS:
        check_unit("image embeddings", image_embs)
        check_unit("text embeddings", text_embs)
    # elementwise product keeps logits(I, T) == logits(T, I).T bit for bit
    logits = (image_embs[:, None, :] * text_embs[None, :, :]).sum(dim=-1) / temperature
    targets = torch.arange(n, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def lr_at(step: int, train: TrainConfig, total_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay reaching 0 on the last
    executed step, total_steps - 1."""
    if step < 0:
        raise DomainError(f"step must be >= 0, got {step}")
    if step < train.warmup_steps:
        return train.base_lr * step / train.warmup_steps
    span = max(1, total_steps - 1 - train.warmup_steps)
    progress = min(1.0, (step - train.warmup_steps) / span)
    return train.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def param_groups(model: torch.nn.Module, weight_decay: float) -> List[dict]:
    """Decay matrices only; norms, biases, embeddings of positions and the
    temperature are left alone."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim < 2 or name.endswith(NO_DECAY_SUFFIXES):
            no_decay.append(p)
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


# ==================== Batching ====================

class ShardBatchSampler:
    """Batches drawn from one shard at a time, so replicas of an upsampled
    image (which sit in different shards) never share a batch."""

    def __init__(self, shards: Sequence[Sequence[ShardEntry]], batch_size: int, seed: int = 0):
        sizes = [len(s) for s in shards if s]
        if not sizes:
            raise DomainError("no shard entries to train on")
        if batch_size > max(sizes):
            raise ConfigError(f"train.batch_size: {batch_size} exceeds the largest shard ({max(sizes)} pairs)")
        self.shards = [list(s) for s in shards if s]
        self.batch_size = batch_size
        self.seed = seed

    def batches(self, epoch: int) -> List[List[ShardEntry]]:
        rng = np.random.default_rng([self.seed, epoch])
        out = []
        for s in rng.permutation(len(self.shards)):
            shard = self.shards[s]
            order = rng.permutation(len(shard))
            for start in range(0, len(order), self.batch_size):
                batch = [shard[i] for i in order[start: start + self.batch_size]]
                # a single pair carries no contrastive signal
                if len(batch) > 1:
                    out.append(batch)
        # interleave shards
        return [out[i] for i in rng.permutation(len(out))]

    def __len__(self) -> int:
        return len(self.batches(0))


def check_batch(batch: Sequence[ShardEntry]) -> None:
    ids = [e.image_id for e in batch]
    if len(ids) != len(set(ids)):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ContractError(f"batch holds duplicate images: {', '.join(dupes)}")


# ==================== Trainer ====================

class Pretrainer:
    """Single-writer training loop over curated shards."""

    def __init__(
        self,
        model: DualEncoder,
        vocab: Vocab,
        train: TrainConfig,
        data_root: str,
        out_dir: str,
        preprocess: Optional[PreprocessConfig] = None,
        policy: Optional[AugmentationPolicy] = None,
    ):
        if vocab.vocab_size > model.config.vocab_size:
            raise ConfigError(
                f"model.vocab_size: {model.config.vocab_size} smaller than tokenizer vocab ({vocab.vocab_size})"
            )
        self.model = model
        self.vocab = vocab
        self.train = train
        self.data_root = Path(data_root)
        self.out_dir = Path(out_dir)
        base = preprocess or PreprocessConfig()
        self.preprocess = PreprocessConfig(
            base.chroma_threshold, base.dilation_px, base.inpaint_radius_px, model.config.image_size
        )
        self.policy = policy or (AugmentationPolicy(seed=train.seed) if train.augment
                                 else AugmentationPolicy.identity(train.seed))
        self.history: List[Dict[str, float]] = []
        self._images: Dict[str, np.ndarray] = {}
        self._tokens: Dict[str, np.ndarray] = {}

    # ---- data ----

    def _image(self, path: str) -> np.ndarray:
        if path not in self._images:
            self._images[path] = load_frame(self.data_root / path, self.preprocess)
        return self._images[path]

    def _ids(self, caption: str) -> np.ndarray:
        if caption not in self._tokens:
            self._tokens[caption] = encode_batch([caption], self.vocab, self.model.config.max_tokens)[0]
        return self._tokens[caption]

    def _caption(self, entry: ShardEntry, key: Tuple[int, ...]) -> str:
        """One of the five variants per step; the stored caption when the entry has none."""
        if not entry.captions:
            return entry.caption
        rng = np.random.default_rng([self.train.seed, *key, 1])
        return entry.captions[int(rng.integers(len(entry.captions)))]

    def _augmented(self, entry: ShardEntry, key: Tuple[int, ...]) -> np.ndarray:
        rng = np.random.default_rng([self.train.seed, *key])
        return augment(self._image(entry.image_path), self.policy, rng)

    def _tensors(self, batch: Sequence[ShardEntry], epoch: int, step: int,
                 pool: Optional[ThreadPoolExecutor]) -> Tuple[torch.Tensor, torch.Tensor]:
        keys = [(epoch, step, i) for i in range(len(batch))]
        if pool is not None:
            images = list(pool.map(self._augmented, batch, keys))
        else:
            images = [self._augmented(e, k) for e, k in zip(batch, keys)]
        ids = np.stack([self._ids(self._caption(e, k)) for e, k in zip(batch, keys)])
        return torch.as_tensor(np.stack(images)), torch.as_tensor(ids, dtype=torch.long)

    # ---- loop ----

    def fit(self, shards: Sequence[Sequence[ShardEntry]]) -> List[Checkpoint]:
        torch.manual_seed(self.train.seed)
        sampler = ShardBatchSampler(shards, self.train.batch_size, self.train.seed)
        steps_per_epoch = len(sampler)
        total_steps = steps_per_epoch * self.train.epochs
        optimizer = torch.optim.AdamW(
            param_groups(self.model, self.train.weight_decay),
            lr=lr_at(0, self.train, total_steps),
            betas=tuple(self.train.betas),
        )
        ckpt_dir = self.out_dir / "checkpoints"
        checkpoints: List[Checkpoint] = []
        logger.info(f"Pretraining: {self.train.epochs} epochs x {steps_per_epoch} steps, batch {self.train.batch_size}")

        pool = ThreadPoolExecutor(self.train.num_workers) if self.train.num_workers > 0 else None
        step = 0
        try:
            for epoch in range(self.train.epochs):
                self.model.train()
                losses = []
                for batch in tqdm(sampler.batches(epoch), desc=f"Epoch {epoch + 1}", leave=False):
                    check_batch(batch)
                    images, ids = self._tensors(batch, epoch, step, pool)
                    lr = lr_at(step, self.train, total_steps)
                    for group in optimizer.param_groups:
                        group["lr"] = lr

                    image_embs, text_embs, temperature = self.model(images, ids)
                    loss = clip_loss(image_embs, text_embs, temperature)
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()

                    value = float(loss.item())
                    losses.append(value)
                    self.history.append({"epoch": epoch + 1, "step": step, "lr": lr, "loss": value})
                    logger.debug(f"step {step}: lr={lr:.3e} loss={value:.5f}")
                    step += 1

                mean_loss = float(np.mean(losses)) if losses else float("nan")
                path = ckpt_dir / f"epoch-{epoch + 1:03d}.pt"
                meta = {"epoch": epoch + 1, "loss": mean_loss, "seed": self.train.seed, "step": step}
                save_checkpoint(str(path), self.model, meta)
                checkpoints.append(Checkpoint(epoch + 1, str(path), mean_loss, self.train.seed, step))
                logger.info(f"Epoch {epoch + 1}/{self.train.epochs}: mean loss {mean_loss:.4f} -> {path.name}")
        finally:
            if pool is not None:
                pool.shutdown()

        write_jsonl(self.out_dir / "train_log.jsonl", self.history)
        write_jsonl(self.out_dir / "checkpoints.jsonl", ({
            "epoch": c.epoch, "path": c.path, "loss": c.loss, "seed": c.seed, "step": c.step,
        } for c in checkpoints))
        return checkpoints

    @property
    def initial_loss(self) -> Optional[float]:
        return self.history[0]["loss"] if self.history else None

    def epoch_losses(self) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for row in self.history:
            by_epoch.setdefault(int(row["epoch"]), []).append(row["loss"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def train(shards, model: DualEncoder, vocab: Vocab, train_config: TrainConfig,
          data_root: str, out_dir: str, preprocess: Optional[PreprocessConfig] = None) -> List[Checkpoint]:
    return Pretrainer(model, vocab, train_config, data_root, out_dir, preprocess).fit(shards)


# ==================== Checkpoint selection ====================

def checkpoint_scorer(vocab: Vocab, eval_set: ZeroShotEvalSet, bank: PromptBank) -> Callable[[Checkpoint], float]:
    def score(checkpoint: Checkpoint) -> float:
        model, _ = load_checkpoint(checkpoint.path)
        return zero_shot_macro_f1(model, vocab, eval_set, bank)
    return score


def select_checkpoint(
    checkpoints: Sequence[Checkpoint],
    eval_set: Sequence,
    score_fn: Callable[[Checkpoint], float],
) -> Tuple[Checkpoint, List[float]]:
    """Highest score wins; ties go to the earliest epoch."""
    if not checkpoints:
        raise DomainError("no checkpoints to select from")
    if len(eval_set) == 0:
        raise DomainError("zero-shot eval set is empty")
    ordered = sorted(checkpoints, key=lambda c: c.epoch)
    scores = [float(score_fn(c)) for c in ordered]
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    logger.info(f"Selected epoch {ordered[best].epoch} (macro-F1 {scores[best]:.4f}) from {len(ordered)} checkpoints")
    return ordered[best], scores
