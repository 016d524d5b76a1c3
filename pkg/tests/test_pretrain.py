import math
from dataclasses import replace

import pytest
import torch

from src.config import PreprocessConfig, TrainConfig
from src.constants import ViewClass
from src.errors import ConfigError, ContractError, DomainError
from src.models import Checkpoint, PhantomSpec, ShardEntry
from src.services.encoders import DualEncoder
from src.services.phantom import gen_image
from src.services.pretrain import (
    Pretrainer, ShardBatchSampler, check_batch, clip_loss, lr_at, param_groups, select_checkpoint,
)
from src.services.storage import write_png
from src.services.tokenizer import train_bpe

from conftest import TINY_MODEL


# ==================== Loss ====================

def test_clip_loss_single_pair():
    e = torch.tensor([[1.0, 0.0]])
    assert clip_loss(e, e, 0.07).item() == pytest.approx(0.0, abs=1e-6)


def test_clip_loss_orthogonal_pairs():
    e = torch.eye(2)
    assert clip_loss(e, e, 1.0).item() == pytest.approx(0.31326, abs=1e-5)


def test_clip_loss_identical_embeddings():
    e = torch.tensor([[0.6, 0.8]] * 4)
    assert clip_loss(e, e, 0.07).item() == pytest.approx(math.log(4), abs=1e-5)


def test_clip_loss_symmetric(rng):
    a = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(5, 8))), dim=1)
    b = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(5, 8))), dim=1)
    assert clip_loss(a, b, 0.1).item() == pytest.approx(clip_loss(b, a, 0.1).item(), abs=1e-12)


def test_clip_loss_empty():
    with pytest.raises(DomainError):
        clip_loss(torch.zeros(0, 2), torch.zeros(0, 2), 0.07)


# ==================== Schedule ====================

def test_lr_schedule():
    train = TrainConfig(base_lr=1e-3, warmup_steps=10)
    # 111 steps run as 0..110
    assert lr_at(0, train, 111) == 0.0
    assert lr_at(5, train, 111) == pytest.approx(5e-4)
    assert lr_at(10, train, 111) == pytest.approx(1e-3)
    assert lr_at(60, train, 111) == pytest.approx(5e-4)
    assert lr_at(110, train, 111) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DomainError):
        lr_at(-1, train, 111)


def test_lr_last_executed_step_is_zero():
    train = TrainConfig(base_lr=1e-3, warmup_steps=3)
    for total in (5, 8, 40):
        assert lr_at(total - 1, train, total) == pytest.approx(0.0, abs=1e-9 * train.base_lr)
        assert lr_at(total - 2, train, total) > 0.0


def test_no_decay_groups(tiny_model):
    decay, no_decay = param_groups(tiny_model, 0.1)
    no_decay_ids = {id(p) for p in no_decay["params"]}
    assert id(tiny_model.log_temperature) in no_decay_ids
    assert id(tiny_model.visual.pos_embed) in no_decay_ids
    assert all(p.ndim >= 2 for p in decay["params"])


# ==================== Batching ====================

def entry(image_id: str) -> ShardEntry:
    return ShardEntry(image_id, f"images/{image_id}.png", f"caption {image_id}")


def test_sampler_never_mixes_shards():
    shards = [[entry(f"s{s}_{i}") for i in range(6)] for s in range(3)]
    for batch in ShardBatchSampler(shards, 4, seed=0).batches(0):
        assert len({e.image_id.split("_")[0] for e in batch}) == 1
        check_batch(batch)


def test_sampler_batch_larger_than_shard():
    with pytest.raises(ConfigError):
        ShardBatchSampler([[entry("a"), entry("b")]], 3)


def test_check_batch_duplicates():
    with pytest.raises(ContractError):
        check_batch([entry("a"), entry("b"), entry("a")])


# ==================== Selection ====================

def test_select_checkpoint_first_best():
    checkpoints = [Checkpoint(e, f"epoch-{e}.pt", 1.0, 0) for e in (1, 2, 3)]
    scores = {1: 0.3, 2: 0.8, 3: 0.8}
    best, got = select_checkpoint(checkpoints, [0], lambda c: scores[c.epoch])
    assert best.epoch == 2
    assert got == [0.3, 0.8, 0.8]


def test_select_checkpoint_errors():
    with pytest.raises(DomainError):
        select_checkpoint([], [0], lambda c: 0.0)
    with pytest.raises(DomainError):
        select_checkpoint([Checkpoint(1, "a.pt", 1.0, 0)], [], lambda c: 0.0)


# ==================== Training ====================

@pytest.fixture
def phantom_pairs(tmp_path):
    captions = {
        ViewClass.BRAIN: "Ultrasound image of the fetal brain.",
        ViewClass.HEART: "Ultrasound image of the fetal heart.",
    }
    entries = []
    for i in range(40):
        view = ViewClass.BRAIN if i % 2 else ViewClass.HEART
        image = gen_image(PhantomSpec(view, 150, 1.0, noise_seed=i), 64, 72)
        write_png(tmp_path / "images" / f"x{i}.png", image.pixels)
        entries.append(ShardEntry(f"x{i}", f"images/x{i}.png", captions[view]))
    vocab = train_bpe(list(captions.values()), 280)
    return tmp_path, [entries[:20], entries[20:]], vocab


def test_training_writes_one_checkpoint_per_epoch(phantom_pairs):
    root, shards, vocab = phantom_pairs
    torch.manual_seed(0)
    trainer = Pretrainer(
        DualEncoder(TINY_MODEL), vocab, TrainConfig(epochs=2, batch_size=10, warmup_steps=2, base_lr=1e-3),
        str(root), str(root / "run"), PreprocessConfig(),
    )
    checkpoints = trainer.fit(shards)
    assert [c.epoch for c in checkpoints] == [1, 2]
    assert all((root / "run" / "checkpoints" / f"epoch-00{e}.pt").exists() for e in (1, 2))
    assert (root / "run" / "train_log.jsonl").exists()
    assert len(trainer.history) == 2 * 4


@pytest.mark.slow
def test_training_reduces_loss(phantom_pairs):
    root, shards, vocab = phantom_pairs
    torch.manual_seed(0)
    train = TrainConfig(epochs=6, batch_size=10, warmup_steps=4, base_lr=2e-3, augment=False)
    trainer = Pretrainer(DualEncoder(TINY_MODEL), vocab, train, str(root), str(root / "run"))
    trainer.fit(shards)
    losses = trainer.epoch_losses()
    assert losses[-1] < trainer.initial_loss


def test_vocab_must_fit_model(phantom_pairs):
    root, _, vocab = phantom_pairs
    small = DualEncoder(replace(TINY_MODEL, vocab_size=260))
    with pytest.raises(ConfigError):
        Pretrainer(small, vocab, TrainConfig(), str(root), str(root / "run"))
