"""
Byte-level BPE tokenizer with start/end/pad specials and a fixed
117-token budget (specials included).
"""

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..constants import MAX_TOKENS
from ..errors import DomainError

logger = logging.getLogger(__name__)

N_BYTES = 256
SOT_ID = 256
EOT_ID = 257
PAD_ID = 258
ALPHABET_SIZE = 259
FORMAT_HEADER = "#fetal-bpe v1"

# words with their leading space, single digits, punctuation runs, whitespace
PRETOKENIZE = re.compile(r" ?[A-Za-z]+| ?\d| ?[^\sA-Za-z\d]+|\s+")


def pretokenize(text: str) -> List[str]:
    return PRETOKENIZE.findall(text)


@dataclass(frozen=True)
class Vocab:
    """Ordered merges over the byte alphabet."""
    merges: Tuple[Tuple[bytes, bytes], ...]
    token_bytes: Tuple[bytes, ...] = field(init=False, repr=False)
    token_to_id: Dict[bytes, int] = field(init=False, repr=False, compare=False)
    ranks: Dict[Tuple[int, int], int] = field(init=False, repr=False, compare=False)

    sot_id: int = SOT_ID
    eot_id: int = EOT_ID
    pad_id: int = PAD_ID

    def __post_init__(self):
        tokens = [bytes([b]) for b in range(N_BYTES)] + [b"<sot>", b"<eot>", b"<pad>"]
        token_to_id = {t: i for i, t in enumerate(tokens[:N_BYTES])}
        ranks = {}
        for rank, (left, right) in enumerate(self.merges):
            if left not in token_to_id or right not in token_to_id:
                raise DomainError(f"merge {rank} references an unknown token")
            pair = (token_to_id[left], token_to_id[right])
            merged = left + right
            ranks[pair] = ALPHABET_SIZE + rank
            token_to_id.setdefault(merged, ALPHABET_SIZE + rank)
            tokens.append(merged)
        object.__setattr__(self, "token_bytes", tuple(tokens))
        object.__setattr__(self, "token_to_id", token_to_id)
        object.__setattr__(self, "ranks", ranks)

    @property
    def vocab_size(self) -> int:
        return ALPHABET_SIZE + len(self.merges)

    # ==================== Serialization ====================

    def save(self, path: str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{FORMAT_HEADER} vocab_size={self.vocab_size}"]
        lines += [f"{a.hex()} {b.hex()}" for a, b in self.merges]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(FORMAT_HEADER):
            raise DomainError(f"{path}: not a vocab file")
        merges = []
        for lineno, line in enumerate(lines[1:], 2):
            if not line.strip():
                continue
            try:
                a, b = line.split()
                merges.append((bytes.fromhex(a), bytes.fromhex(b)))
            except ValueError:
                raise DomainError(f"{path}:{lineno}: malformed merge line")
        return cls(tuple(merges))


def _merge_word(word: Tuple[int, ...], pair: Tuple[int, int], new_id: int) -> Tuple[int, ...]:
    out, i = [], 0
    while i < len(word):
        if i + 1 < len(word) and (word[i], word[i + 1]) == pair:
            out.append(new_id)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Sequence[str], vocab_size: int) -> Vocab:
    """Greedy most-frequent-pair merges; ties go to the lexicographically
    smallest byte pair."""
    if not corpus:
        raise DomainError("train_bpe: empty corpus")
    if vocab_size <= ALPHABET_SIZE:
        raise DomainError(f"vocab_size must exceed the {ALPHABET_SIZE}-symbol alphabet, got {vocab_size}")

    words = Counter(tuple(chunk.encode("utf-8")) for text in corpus for chunk in pretokenize(text))
    token_bytes: List[bytes] = [bytes([b]) for b in range(N_BYTES)] + [b"", b"", b""]
    merges: List[Tuple[bytes, bytes]] = []

    while ALPHABET_SIZE + len(merges) < vocab_size:
        pairs: Counter = Counter()
        for word, freq in words.items():
            for pair in zip(word, word[1:]):
                pairs[pair] += freq
        if not pairs:
            logger.warning(f"BPE corpus exhausted after {len(merges)} merges (asked for {vocab_size - ALPHABET_SIZE})")
            break
        best = min(pairs, key=lambda p: (-pairs[p], token_bytes[p[0]], token_bytes[p[1]]))
        new_id = ALPHABET_SIZE + len(merges)
        merges.append((token_bytes[best[0]], token_bytes[best[1]]))
        token_bytes.append(token_bytes[best[0]] + token_bytes[best[1]])
        words = Counter({_merge_word(w, best, new_id): f for w, f in words.items()})

    logger.info(f"Trained BPE vocab: {ALPHABET_SIZE + len(merges)} tokens from {len(corpus)} texts")
    return Vocab(tuple(merges))


def _encode_chunk(chunk: str, vocab: Vocab) -> List[int]:
    word = tuple(chunk.encode("utf-8"))
    while len(word) > 1:
        ranked = [(vocab.ranks[p], p) for p in zip(word, word[1:]) if p in vocab.ranks]
        if not ranked:
            break
        new_id, pair = min(ranked)
        word = _merge_word(word, pair, new_id)
    return list(word)


def tokenize(text: str, vocab: Vocab) -> List[int]:
    """Token ids without specials."""
    ids: List[int] = []
    for chunk in pretokenize(text):
        ids.extend(_encode_chunk(chunk, vocab))
    return ids


def token_count(text: str, vocab: Vocab) -> int:
    """Length including start and end tokens."""
    return len(tokenize(text, vocab)) + 2


def encode(text: str, vocab: Vocab, max_len: int = MAX_TOKENS) -> List[int]:
    """SOT + tokens + EOT, prefix-truncated and padded to exactly max_len."""
    if max_len < 2:
        raise DomainError("max_len must leave room for start and end tokens")
    body = tokenize(text, vocab)[: max_len - 2]
    ids = [vocab.sot_id, *body, vocab.eot_id]
    return ids + [vocab.pad_id] * (max_len - len(ids))


def encode_batch(texts: Sequence[str], vocab: Vocab, max_len: int = MAX_TOKENS) -> np.ndarray:
    return np.array([encode(t, vocab, max_len) for t in texts], dtype=np.int64)


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    """Inverse of encode: stops at the first end token, drops specials."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if i == vocab.eot_id:
            break
        if i in (vocab.sot_id, vocab.pad_id):
            continue
        if not 0 <= i < vocab.vocab_size:
            raise DomainError(f"token id {i} outside vocab of size {vocab.vocab_size}")
        out += vocab.token_bytes[i]
    return out.decode("utf-8", errors="replace")
