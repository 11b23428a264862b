"""Token vocabulary and the prompt/response sequence container."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PAD, MASK, EOS = "<pad>", "<mask>", "<eos>"
RESERVED = (PAD, MASK, EOS)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    mask_id: int
    eos_id: int
    pad_id: int

    def __post_init__(self):
        n = len(self.tokens)
        if len(set(self.tokens)) != n:
            raise ValueError("vocabulary symbols must be distinct")
        if n < 8:
            raise ValueError(f"vocabulary needs at least 8 symbols, got {n}")
        ids = (self.mask_id, self.eos_id, self.pad_id)
        if len(set(ids)) != 3 or not all(0 <= i < n for i in ids):
            raise ValueError(f"reserved ids must be distinct valid indices, got {ids}")

    @classmethod
    def build(cls, symbols: Sequence[str]) -> "Vocabulary":
        """Reserved symbols take ids 0-2 (pad, mask, eos); `symbols` follow in order."""
        return cls(tuple(RESERVED) + tuple(symbols), mask_id=1, eos_id=2, pad_id=0)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def reserved_ids(self) -> tuple[int, int, int]:
        return (self.pad_id, self.mask_id, self.eos_id)

    @property
    def usable_ids(self) -> np.ndarray:
        """Ids of every non-reserved symbol."""
        reserved = set(self.reserved_ids)
        return np.array([i for i in range(len(self)) if i not in reserved], dtype=np.int64)

    def encode(self, symbols: Sequence[str]) -> list[int]:
        index = {s: i for i, s in enumerate(self.tokens)}
        return [index[s] for s in symbols]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "mask_id": self.mask_id,
                "eos_id": self.eos_id, "pad_id": self.pad_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), d["mask_id"], d["eos_id"], d["pad_id"])


@dataclass
class TokenSequence:
    """A prompt followed by a response; only the response region is ever corrupted."""

    tokens: np.ndarray
    prompt_len: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ValueError("tokens must be one-dimensional")
        if not 0 <= self.prompt_len <= len(self.tokens):
            raise ValueError("prompt_len out of range")

    @classmethod
    def from_parts(cls, prompt: Sequence[int], response: Sequence[int]) -> "TokenSequence":
        return cls(np.concatenate([np.asarray(prompt, np.int64), np.asarray(response, np.int64)]),
                   len(prompt))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def prompt(self) -> np.ndarray:
        return self.tokens[: self.prompt_len]

    @property
    def response(self) -> np.ndarray:
        return self.tokens[self.prompt_len:]

    @property
    def response_len(self) -> int:
        return len(self.tokens) - self.prompt_len


@dataclass(frozen=True)
class Example:
    """A task instance: prompt ids and the reference response ids (without EOS)."""

    prompt: tuple[int, ...]
    response: tuple[int, ...]

    def target(self, eos_id: int, block_size: int) -> list[int]:
        """Response followed by EOS, repeated to fill the last block."""
        n = len(self.response) + 1
        total = -(-n // block_size) * block_size
        return list(self.response) + [eos_id] * (total - len(self.response))
