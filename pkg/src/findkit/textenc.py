"""Word-level tokenizer and a small transformer text encoder.

Query text becomes a padded id sequence plus a boolean mask, then a stack of
pre-norm encoder layers turns it into per-token features. Padding positions
are masked out of every attention, so downstream consumers can rely on
unmasked outputs being a function of unmasked inputs only.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .transformer import EncoderLayer

PAD, UNK, BOS = 0, 1, 2
RESERVED = {"<pad>": PAD, "<unk>": UNK, "<bos>": BOS}

_WORD_RE = re.compile(r"[a-z0-9]+")

# Mirrors the small/base/large axis: (layers, dim) per size name.
SIZE_PROFILES = {"small": (2, 64), "base": (4, 128), "large": (6, 256)}

DEFAULT_MAX_LEN = 64


def normalize_words(text: str) -> list[str]:
    """Lowercase and strip punctuation, keeping alphanumeric word runs."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """token -> id map with dense ids; PAD/UNK/BOS reserved at 0/1/2."""

    token_to_id: dict[str, int]

    def __post_init__(self):
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be dense from 0")
        for tok, idx in RESERVED.items():
            if self.token_to_id.get(tok) != idx:
                raise ValueError(f"reserved token {tok!r} must have id {idx}")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, idx in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
                fh.write(f"{tok}\t{idx}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        mapping: dict[str, int] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, idx = line.split("\t")
                mapping[tok] = int(idx)
        return cls(mapping)


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocabulary:
    """Count word types over the corpus and keep those with count >= min_count.

    Ordering is deterministic: reserved tokens first, then frequency
    descending, ties broken lexicographically.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for text in corpus:
        for word in normalize_words(text):
            counts[word] = counts.get(word, 0) + 1
    kept = [w for w, c in counts.items() if c >= min_count]
    kept.sort(key=lambda w: (-counts[w], w))

    mapping = dict(RESERVED)
    for word in kept:
        mapping[word] = len(mapping)
    return Vocabulary(mapping)


@dataclass
class TokenSequence:
    """Fixed-length id sequence with an attention mask (True = real token)."""

    ids: Tensor  # (T,) long
    mask: Tensor  # (T,) bool

    def __post_init__(self):
        assert self.ids.shape == self.mask.shape
        assert bool(((self.ids != PAD) == self.mask).all()), "mask must mark non-PAD"


def tokenize(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    """Map text to ids, truncate at max_len, right-pad with PAD."""
    words = normalize_words(text)[:max_len]
    ids = [vocab.id_for(w) for w in words]
    ids = ids + [PAD] * (max_len - len(ids))
    ids_t = torch.tensor(ids, dtype=torch.long)
    return TokenSequence(ids=ids_t, mask=ids_t != PAD)


def tokenize_batch(texts: list[str], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN):
    """Stacked (B, T) ids and mask for a batch of queries."""
    seqs = [tokenize(t, vocab, max_len) for t in texts]
    return torch.stack([s.ids for s in seqs]), torch.stack([s.mask for s in seqs])


class TextEncoder(nn.Module):
    """Embedding + learned positions + pre-norm encoder stack.

    forward() takes (B, T) ids with a (B, T) mask and returns (B, T, dim)
    token features. A final LayerNorm closes the pre-norm stack.
    """

    def __init__(
        self,
        vocab_size: int,
        dim: int = 64,
        num_layers: int = 2,
        num_heads: int = 4,
        max_len: int = DEFAULT_MAX_LEN,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.zeros(max_len, dim))
        self.layers = nn.ModuleList(EncoderLayer(dim, num_heads) for _ in range(num_layers))
        self.final_norm = nn.LayerNorm(dim)
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, ids: Tensor, mask: Tensor) -> Tensor:
        if ids.dim() == 1:
            ids, mask = ids[None], mask[None]
        if int(ids.max()) >= self.vocab_size:
            raise ValueError(f"token id {int(ids.max())} out of range for vocab size {self.vocab_size}")
        t = ids.shape[1]
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.max_len}")
        x = self.embed(ids) + self.pos[:t].to(self.embed.weight.dtype)
        for layer in self.layers:
            x = layer(x, key_mask=mask)
        return self.final_norm(x)

    @classmethod
    def from_size(cls, vocab_size: int, size: str, num_heads: int = 4, max_len: int = DEFAULT_MAX_LEN):
        if size not in SIZE_PROFILES:
            raise ValueError(f"unknown text encoder size {size!r}; choose from {sorted(SIZE_PROFILES)}")
        layers, dim = SIZE_PROFILES[size]
        return cls(vocab_size, dim=dim, num_layers=layers, num_heads=num_heads, max_len=max_len)
