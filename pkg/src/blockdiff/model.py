"""Small bidirectional transformer with block-diffusion attention.

The network consumes *embedding vectors* rather than token ids so that decoders
can feed mask vectors, token rows, or any interpolation between them through
the same code path. Position enters inside :meth:`forward` (rotary by default,
or a learned table), identically for every kind of input vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPES = {"float32": torch.float32, "float64": torch.float64}
EMBED_INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_seq_len: int = 64
    block_size: int = 32
    rng_seed: int = 0
    mlp_ratio: int = 4
    tie_embeddings: bool = False
    positional: str = "rope"
    dtype: str = "float32"

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        for name in ("vocab_size", "embed_dim", "num_layers", "num_heads", "max_seq_len", "block_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if self.positional not in ("rope", "learned"):
            raise ValueError("positional must be 'rope' or 'learned'")
        if self.positional == "rope" and (self.embed_dim // self.num_heads) % 2:
            raise ValueError("rotary positions need an even head dimension")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BlockAttentionPlan:
    """Which positions may attend to which, for a prompt followed by blocks.

    Prompt positions see the prompt only. Block ``k`` sees the prompt, every
    earlier block, and itself (bidirectionally). The final block may be
    shorter than ``block_size`` when ``total_len`` truncates it.
    """

    prompt_len: int
    num_blocks: int
    block_size: int
    total_len: int

    def block_ids(self) -> np.ndarray:
        """Per-position block index; -1 marks the prompt."""
        ids = np.full(self.total_len, -1, dtype=np.int64)
        gen = np.arange(self.total_len - self.prompt_len)
        ids[self.prompt_len:] = gen // self.block_size
        return ids

    def block_range(self, k: int) -> range:
        start = self.prompt_len + k * self.block_size
        return range(start, min(start + self.block_size, self.total_len))

    def allowed(self, length: int | None = None) -> torch.Tensor:
        """Boolean ``(length, length)`` matrix; entry ``[i, j]`` means i attends to j.

        Positions at or beyond ``total_len`` are padding: nobody attends to them
        and they attend only to themselves.
        """
        length = self.total_len if length is None else length
        if length < self.total_len:
            raise ValueError("length shorter than the plan")
        ids = torch.from_numpy(self.block_ids())
        out = torch.zeros(length, length, dtype=torch.bool)
        n = self.total_len
        out[:n, :n] = ids[None, :] <= ids[:, None]
        pad = torch.arange(n, length)
        out[pad, pad] = True
        return out

    def attends(self, i: int, j: int) -> bool:
        ids = self.block_ids()
        return bool(ids[j] <= ids[i])


def build_attention_plan(prompt_len: int, num_blocks: int, block_size: int,
                         max_seq_len: int | None = None, total_len: int | None = None) -> BlockAttentionPlan:
    if num_blocks < 1:
        raise ValueError("attention plan needs at least one block")
    if prompt_len < 0:
        raise ValueError("prompt_len must be non-negative")
    full = prompt_len + num_blocks * block_size
    if total_len is None:
        total_len = full
    if not prompt_len + (num_blocks - 1) * block_size < total_len <= full:
        raise ValueError("total_len must end inside the last block")
    if max_seq_len is not None and total_len > max_seq_len:
        raise ValueError(f"plan length {total_len} exceeds max_seq_len {max_seq_len}")
    return BlockAttentionPlan(prompt_len, num_blocks, block_size, total_len)


@dataclass
class EmbeddingTable:
    """Input embedding rows; ``mask_vector`` is a view of row ``mask_id``."""

    vectors: torch.Tensor
    mask_id: int

    @property
    def mask_vector(self) -> torch.Tensor:
        return self.vectors[self.mask_id]

    def lookup(self, ids) -> torch.Tensor:
        return self.vectors[torch.as_tensor(ids, dtype=torch.long)]


@dataclass
class ModelOutput:
    logits: torch.Tensor
    probs: torch.Tensor = field(repr=False)


PlanLike = Union[BlockAttentionPlan, Sequence[BlockAttentionPlan], torch.Tensor]


def rotary_tables(n: int, head_dim: int, dtype: torch.dtype, base: float = 10000.0):
    inv = 1.0 / base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = torch.arange(n, dtype=torch.float64)[:, None] * inv[None]
    return ang.cos().to(dtype), ang.sin().to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor, rotary=None) -> torch.Tensor:
        b, n, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        if rotary is not None:
            q, k = apply_rotary(q, *rotary), apply_rotary(k, *rotary)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        att = scores.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, allowed, rotary=None):
        x = x + self.attn(self.ln1(x), allowed, rotary)
        return x + self.mlp(self.ln2(x))


class DiffusionTransformer(nn.Module):
    def __init__(self, config: ModelConfig, mask_id: int):
        super().__init__()
        if not 0 <= mask_id < config.vocab_size:
            raise ValueError("mask_id outside the vocabulary")
        self.config = config
        self.mask_id = mask_id
        c = config
        self.tok_embed = nn.Embedding(c.vocab_size, c.embed_dim)
        if c.positional == "learned":
            self.pos_embed = nn.Parameter(torch.empty(c.max_seq_len, c.embed_dim))
        self.layers = nn.ModuleList(Block(c.embed_dim, c.num_heads, c.mlp_ratio) for _ in range(c.num_layers))
        self.ln_f = nn.LayerNorm(c.embed_dim)
        self.head = nn.Linear(c.embed_dim, c.vocab_size, bias=not c.tie_embeddings)
        if c.tie_embeddings:
            self.head.weight = self.tok_embed.weight
        self.reset_parameters(c.rng_seed)
        self.to(DTYPES[c.dtype])

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_f"):
                    p.fill_(1.0)
                elif name in ("tok_embed.weight", "pos_embed"):
                    p.copy_(EMBED_INIT_STD * torch.randn(p.shape, generator=gen))
                else:
                    p.copy_(0.02 * torch.randn(p.shape, generator=gen))

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_embed.weight.dtype

    def embedding_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.tok_embed.weight, self.mask_id)

    def embed_tokens(self, tokens) -> torch.Tensor:
        ids = torch.as_tensor(np.asarray(tokens), dtype=torch.long) if not torch.is_tensor(tokens) else tokens.long()
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("token id out of range")
        return self.tok_embed(ids)

    def forward(self, inputs: torch.Tensor, plan: PlanLike) -> ModelOutput:
        squeeze = inputs.dim() == 2
        x = inputs[None] if squeeze else inputs
        b, n, _ = x.shape
        if n > self.config.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len {self.config.max_seq_len}")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input embedding")
        allowed = _allowed_matrix(plan, n, b)
        h = x.to(self.dtype)
        rotary = None
        if self.config.positional == "learned":
            h = h + self.pos_embed[:n]
        else:
            rotary = rotary_tables(n, self.config.embed_dim // self.config.num_heads, self.dtype)
        for layer in self.layers:
            h = layer(h, allowed, rotary)
        logits = self.head(self.ln_f(h))
        probs = F.softmax(logits, dim=-1)
        if squeeze:
            logits, probs = logits[0], probs[0]
        return ModelOutput(logits, probs)

    def forward_tokens(self, tokens, plan: PlanLike) -> ModelOutput:
        return self(self.embed_tokens(tokens), plan)


def _allowed_matrix(plan: PlanLike, n: int, b: int) -> torch.Tensor:
    if torch.is_tensor(plan):
        m = plan.bool()
    elif isinstance(plan, BlockAttentionPlan):
        m = plan.allowed(n)
    else:
        m = torch.stack([p.allowed(n) for p in plan])
    if m.dim() == 2:
        m = m.expand(b, n, n)
    if m.shape != (b, n, n):
        raise ValueError(f"attention plan shape {tuple(m.shape)} does not match inputs ({b}, {n})")
    return m
