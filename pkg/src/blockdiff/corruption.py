"""Noise levels and the two corruption processes (mask and uniform substitution)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vocab import TokenSequence, Vocabulary


@dataclass
class NoiseSpec:
    mode: str = "fixed"
    t_fixed: float = 0.75
    t_low: float = 0.2
    t_high: float = 0.9
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode == "fixed":
            if not 0.0 <= self.t_fixed <= 1.0:
                raise ValueError("t_fixed must lie in [0, 1]")
        elif self.mode == "uniform-range":
            if not 0.0 <= self.t_low <= self.t_high <= 1.0:
                raise ValueError("need 0 <= t_low <= t_high <= 1")
        else:
            raise ValueError(f"unknown noise mode {self.mode!r}")


@dataclass
class CorruptedSequence:
    tokens: TokenSequence
    corruption_mask: np.ndarray
    noise_level: float

    @property
    def prompt_len(self) -> int:
        return self.tokens.prompt_len


def sample_noise_level(spec: NoiseSpec, rng: np.random.Generator | None = None) -> float:
    if spec.mode == "fixed":
        return float(spec.t_fixed)
    rng = np.random.default_rng(spec.rng_seed) if rng is None else rng
    return float(rng.uniform(spec.t_low, spec.t_high))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _select(clean: TokenSequence, t: float, rng: np.random.Generator) -> np.ndarray:
    if clean.response_len == 0:
        raise ValueError("sequence has an empty response region")
    if not 0.0 <= t <= 1.0:
        raise ValueError("noise level must lie in [0, 1]")
    hit = np.zeros(len(clean), dtype=bool)
    hit[clean.prompt_len:] = rng.random(clean.response_len) < t
    return hit


def mask_corrupt(clean: TokenSequence, t: float, seed, vocab: Vocabulary) -> CorruptedSequence:
    """Each response position independently becomes MASK with probability ``t``."""
    rng = _rng(seed)
    hit = _select(clean, t, rng)
    tokens = clean.tokens.copy()
    tokens[hit] = vocab.mask_id
    return CorruptedSequence(TokenSequence(tokens, clean.prompt_len), hit, float(t))


def uniform_corrupt(clean: TokenSequence, t: float, seed, vocab: Vocabulary) -> CorruptedSequence:
    """Each response position, with probability ``t``, is redrawn uniformly from the usable symbols.

    A redraw may land on the original symbol, in which case the corruption
    mask leaves that position unflagged: the mask marks positions that differ.
    """
    rng = _rng(seed)
    hit = _select(clean, t, rng)
    pool = vocab.usable_ids
    tokens = clean.tokens.copy()
    tokens[hit] = pool[rng.integers(0, len(pool), size=int(hit.sum()))]
    changed = tokens != clean.tokens
    return CorruptedSequence(TokenSequence(tokens, clean.prompt_len), changed, float(t))
