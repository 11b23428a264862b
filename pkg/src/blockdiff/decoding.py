"""Block-wise decoders: one-way threshold decoding, full-block refinement, and
soft parallel decoding with hybrid (token/mask interpolated) input states.

All decoders share one model interface: ``model.embed_tokens(ids)``,
``model.embedding_table()``, ``model.mask_id``, ``model.config`` and
``model(inputs, plan) -> ModelOutput``. Scripted stand-ins in the tests only
implement that surface.
"""

from __future__ import annotations

import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch

from .model import EmbeddingTable, build_attention_plan

log = logging.getLogger(__name__)

DECODERS = ("threshold-baseline", "uniform-refine", "spd")
CONVERGENCE = ("consistency", "confidence", "both")
PRESETS = {"math": {"tau_dec": 0.5}, "code": {"tau_dec": 0.65}}


class DecodeError(RuntimeError):
    def __init__(self, message: str, trace: "DecodeTrace | None" = None):
        super().__init__(message)
        self.trace = trace


@dataclass
class DecodeConfig:
    """Decoder selection and thresholds.

    ``contiguous_prefix``, ``hybrid_embedding`` and ``convergence`` only apply
    to the refining decoders; leaving them ``None`` picks the defaults.
    """

    decoder: str = "spd"
    tau_dec: float = 0.5
    tau_acc: float = 0.9
    block_size: int = 32
    max_new_tokens: int = 64
    max_steps_per_block: int | None = None
    contiguous_prefix: bool | None = None
    hybrid_embedding: bool | None = None
    convergence: str | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}")
        if not 0.0 <= self.tau_dec <= 1.0 or not 0.0 <= self.tau_acc <= 1.0:
            raise ValueError("tau_dec and tau_acc must lie in [0, 1]")
        if self.block_size < 1 or self.max_new_tokens < 1:
            raise ValueError("block_size and max_new_tokens must be positive")
        if self.max_steps_per_block is None:
            self.max_steps_per_block = 4 * self.block_size
        if self.max_steps_per_block < self.block_size:
            raise ValueError("max_steps_per_block must be at least block_size")
        if self.convergence is not None and self.convergence not in CONVERGENCE:
            raise ValueError(f"convergence must be one of {CONVERGENCE}")
        if self.decoder == "threshold-baseline":
            bad = [k for k in ("contiguous_prefix", "hybrid_embedding", "convergence") if getattr(self, k) is not None]
            if bad:
                raise ValueError(f"threshold-baseline does not take {', '.join(bad)}")
        if self.decoder == "uniform-refine":
            bad = [k for k in ("contiguous_prefix", "hybrid_embedding") if getattr(self, k) is not None]
            if bad:
                raise ValueError(f"uniform-refine does not take {', '.join(bad)}")

    @property
    def prefix(self) -> bool:
        return True if self.contiguous_prefix is None else self.contiguous_prefix

    @property
    def hybrid(self) -> bool:
        return True if self.hybrid_embedding is None else self.hybrid_embedding

    @property
    def criteria(self) -> str:
        return self.convergence or "both"

    def to_dict(self) -> dict:
        return asdict(self)


# -- state ------------------------------------------------------------------

@dataclass
class BlockState:
    positions: range
    mask_set: list[int]
    token_set: list[int]
    predictions: np.ndarray
    confidences: np.ndarray
    step: int = 0

    @classmethod
    def fully_masked(cls, positions: range) -> "BlockState":
        n = len(positions)
        return cls(positions, list(positions), [], np.full(n, -1, dtype=np.int64), np.zeros(n), 0)

    def promote(self, promoted: Sequence[int]) -> None:
        self.token_set = sorted(set(self.token_set) | set(promoted))
        taken = set(self.token_set)
        self.mask_set = [p for p in self.positions if p not in taken]

    def local(self, pos: int) -> int:
        return pos - self.positions.start


@dataclass
class SoftState:
    """Per-position input vectors for a block plus where each came from."""

    vectors: torch.Tensor
    provenance: list[tuple]  # ("mask",) | ("hybrid", token_id, pi) | ("token", token_id)


def promote_prefix(state: BlockState, confidences, tau_dec: float, contiguous_prefix: bool = True) -> list[int]:
    """Positions to move from the mask set to the token set this step.

    ``confidences`` is aligned with ``state.positions``. With the contiguous
    rule, the longest left-aligned run of mask positions with confidence
    strictly above ``tau_dec`` is promoted; otherwise every such position is.
    Either way an empty selection falls back to the leftmost mask position.
    """
    if not state.mask_set:
        raise ValueError("block has no mask positions left")
    conf = np.asarray(confidences, dtype=np.float64)
    picked = []
    for pos in state.mask_set:
        if conf[state.local(pos)] > tau_dec:
            picked.append(pos)
        elif contiguous_prefix:
            break
    return picked or [state.mask_set[0]]


def hybrid_embeddings(token_vectors: torch.Tensor, mask_vector: torch.Tensor, pi: torch.Tensor,
                      eps: float = 1e-6) -> tuple[torch.Tensor, torch.Tensor]:
    """Norm-preserving interpolation between token rows and the mask vector.

    Returns ``(vectors, fallback)``; ``fallback[i]`` marks rows whose raw mix
    vanished (antiparallel inputs) and were replaced by the mask vector.
    """
    pi = pi.to(token_vectors.dtype).unsqueeze(-1)
    mix = pi * token_vectors + (1 - pi) * mask_vector
    target = pi * token_vectors.norm(dim=-1, keepdim=True) + (1 - pi) * mask_vector.norm()
    norm = mix.norm(dim=-1, keepdim=True)
    fallback = (norm <= eps * target).squeeze(-1)
    out = mix / norm.clamp_min(torch.finfo(mix.dtype).tiny) * target
    if fallback.any():
        out = torch.where(fallback.unsqueeze(-1), mask_vector.expand_as(out), out)
    return out, fallback


def make_hybrid_embedding(token_id: int, pi: float, table: EmbeddingTable) -> torch.Tensor:
    if not 0.0 <= pi <= 1.0:
        raise ValueError("pi must lie in [0, 1]")
    if not 0 <= token_id < len(table.vectors):
        raise ValueError("token id out of range")
    with torch.no_grad():
        vec, fb = hybrid_embeddings(table.vectors[token_id][None], table.mask_vector,
                                    torch.tensor([pi], dtype=table.vectors.dtype))
    if fb[0]:
        log.warning("hybrid embedding for token %d at pi=%.6f vanished; using the mask vector", token_id, pi)
    return vec[0]


# -- trace ------------------------------------------------------------------

@dataclass
class StepRecord:
    block: int
    step: int
    promoted: list[int]
    predictions: list[int]
    confidences: list[float]
    converged: bool = False
    cause: str | None = None
    fallbacks: int = 0

    @property
    def min_conf(self) -> float:
        return min(self.confidences)


@dataclass
class DecodeTrace:
    steps: list[StepRecord] = field(default_factory=list)
    forward_passes: int = 0
    generated_tokens: int = 0
    blocks: int = 0
    complete: bool = False
    wall_time: float = 0.0
    block_steps: list[int] = field(default_factory=list)
    commits: list[tuple[int, list[int]]] = field(default_factory=list)

    def causes(self) -> Counter:
        return Counter(s.cause for s in self.steps if s.converged)

    def to_records(self) -> list[dict]:
        """Line records for the trace file: promote/converge/commit events and a summary."""
        out = []
        for s in self.steps:
            if s.promoted:
                out.append({"block": s.block, "step": s.step, "event": "promote", "positions": s.promoted,
                            "cause": None, "min_conf": s.min_conf})
            if s.converged:
                out.append({"block": s.block, "step": s.step, "event": "converge", "positions": [],
                            "cause": s.cause, "min_conf": s.min_conf})
        for block, positions in self.commits:
            out.append({"block": block, "step": self.block_steps[block], "event": "commit",
                        "positions": positions, "cause": None, "min_conf": None})
        out.append({"event": "summary", "forward_passes": self.forward_passes,
                    "generated_tokens": self.generated_tokens, "wall_time": self.wall_time,
                    "complete": self.complete, "blocks": self.blocks})
        return out

    def write(self, path, include_wall_time: bool = True) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.to_records():
                if not include_wall_time:
                    r.pop("wall_time", None)
                f.write(json.dumps(r, sort_keys=True) + "\n")


# -- block decoders ---------------------------------------------------------

class _Session:
    """Forward-pass plumbing for one block: context is frozen, block inputs vary."""

    def __init__(self, model, context: Sequence[int], prompt_len: int, block: range, block_size: int):
        self.model = model
        self.block = block
        self.table = model.embedding_table()
        with torch.no_grad():
            self.ctx_vecs = model.embed_tokens(np.asarray(context, dtype=np.int64)).detach()
        k = (block.start - prompt_len) // block_size
        self.plan = build_attention_plan(prompt_len, k + 1, block_size, total_len=block.stop)
        self.mask_vec = self.table.mask_vector.detach()

    def masked_inputs(self) -> SoftState:
        n = len(self.block)
        return SoftState(self.mask_vec.expand(n, -1).clone(), [("mask",)] * n)

    @torch.no_grad()
    def predict(self, soft: SoftState) -> tuple[np.ndarray, np.ndarray]:
        inputs = torch.cat([self.ctx_vecs, soft.vectors.to(self.ctx_vecs.dtype)], dim=0)
        out = self.model(inputs, self.plan)
        logits = out.logits[self.block.start:self.block.stop]
        if not torch.isfinite(logits).all():
            raise DecodeError("non-finite logits")
        probs = out.probs[self.block.start:self.block.stop].double()
        conf, yhat = probs.max(dim=-1)
        return yhat.numpy().astype(np.int64), conf.numpy()

    def token_vectors(self, ids) -> torch.Tensor:
        return self.table.vectors[torch.as_tensor(ids, dtype=torch.long)].detach()


def _convergence(cfg: DecodeConfig, yhat, prev, conf) -> str | None:
    crit = cfg.criteria
    if crit in ("consistency", "both") and prev is not None and np.array_equal(yhat, prev):
        return "consistency"
    if crit in ("confidence", "both") and conf.min() > cfg.tau_acc:
        return "confidence"
    return None


def spd_decode_block(model, block: range, context: Sequence[int], prompt_len: int, cfg: DecodeConfig,
                     trace: DecodeTrace, block_index: int = 0) -> np.ndarray:
    """Refine one block from all-mask inputs, promoting mask positions into hybrid states."""
    sess = _Session(model, context, prompt_len, block, cfg.block_size)
    state = BlockState.fully_masked(block)
    soft = sess.masked_inputs()
    prev = None
    yhat = None
    for step in range(1, cfg.max_steps_per_block + 1):
        yhat, conf = sess.predict(soft)
        trace.forward_passes += 1
        state.predictions, state.confidences, state.step = yhat, conf, step
        promoted = promote_prefix(state, conf, cfg.tau_dec, cfg.prefix) if state.mask_set else []
        state.promote(promoted)

        vecs = sess.mask_vec.expand(len(block), -1).clone()
        prov: list[tuple] = [("mask",)] * len(block)
        fallbacks = 0
        if state.token_set:
            idx = np.array([state.local(p) for p in state.token_set])
            toks = yhat[idx]
            if cfg.hybrid:
                pis = torch.as_tensor(conf[idx])
                h, fb = hybrid_embeddings(sess.token_vectors(toks), sess.mask_vec, pis)
                fallbacks = int(fb.sum())
                for i, tok, pi in zip(idx, toks, conf[idx]):
                    prov[i] = ("hybrid", int(tok), float(pi))
            else:
                h = sess.token_vectors(toks)
                for i, tok in zip(idx, toks):
                    prov[i] = ("token", int(tok))
            vecs[torch.as_tensor(idx)] = h.to(vecs.dtype)
        soft = SoftState(vecs, prov)

        cause = _convergence(cfg, yhat, prev, conf)
        if cause is None and step == cfg.max_steps_per_block:
            cause = "cap"
        trace.steps.append(StepRecord(block_index, step, list(promoted), yhat.tolist(), conf.tolist(),
                                      cause is not None, cause, fallbacks))
        if cause:
            break
        prev = yhat
    trace.block_steps.append(step)
    return yhat


def threshold_baseline_decode_block(model, block: range, context: Sequence[int], prompt_len: int,
                                    cfg: DecodeConfig, trace: DecodeTrace, block_index: int = 0) -> np.ndarray:
    """One-way decoding: commit every mask position above ``tau_dec`` (or the single best)."""
    sess = _Session(model, context, prompt_len, block, cfg.block_size)
    soft = sess.masked_inputs()
    committed = np.full(len(block), -1, dtype=np.int64)
    step = 0
    while (committed < 0).any():
        step += 1
        yhat, conf = sess.predict(soft)
        trace.forward_passes += 1
        open_ = np.flatnonzero(committed < 0)
        chosen = open_[conf[open_] > cfg.tau_dec]
        if not len(chosen):
            chosen = open_[[int(np.argmax(conf[open_]))]]
        committed[chosen] = yhat[chosen]
        soft.vectors[torch.as_tensor(chosen)] = sess.token_vectors(committed[chosen]).to(soft.vectors.dtype)
        for i in chosen:
            soft.provenance[i] = ("token", int(committed[i]))
        done = not (committed < 0).any()
        trace.steps.append(StepRecord(block_index, step, [block.start + int(i) for i in chosen],
                                      yhat.tolist(), conf.tolist(), done, "full" if done else None))
    trace.block_steps.append(step)
    return committed


def uniform_refine_decode_block(model, block: range, context: Sequence[int], prompt_len: int,
                                cfg: DecodeConfig, trace: DecodeTrace, block_index: int = 0) -> np.ndarray:
    """Re-predict and overwrite every block position with its top-1 token each step."""
    sess = _Session(model, context, prompt_len, block, cfg.block_size)
    soft = sess.masked_inputs()
    prev = None
    for step in range(1, cfg.max_steps_per_block + 1):
        yhat, conf = sess.predict(soft)
        trace.forward_passes += 1
        soft = SoftState(sess.token_vectors(yhat).to(soft.vectors.dtype), [("token", int(t)) for t in yhat])
        cause = _convergence(cfg, yhat, prev, conf)
        if cause is None and step == cfg.max_steps_per_block:
            cause = "cap"
        promoted = list(block) if step == 1 else []
        trace.steps.append(StepRecord(block_index, step, promoted, yhat.tolist(), conf.tolist(),
                                      cause is not None, cause))
        if cause:
            break
        prev = yhat
    trace.block_steps.append(step)
    return yhat


BLOCK_DECODERS = {
    "spd": spd_decode_block,
    "threshold-baseline": threshold_baseline_decode_block,
    "uniform-refine": uniform_refine_decode_block,
}


# -- generation -------------------------------------------------------------

@dataclass
class Generation:
    tokens: np.ndarray       # every committed token, in order
    response: np.ndarray     # committed tokens before the first EOS
    trace: DecodeTrace

    @property
    def complete(self) -> bool:
        return self.trace.complete


def count_generated(tokens: np.ndarray, eos_id: int, pad_id: int) -> int:
    """Committed non-pad tokens up to and including the first EOS."""
    hits = np.flatnonzero(tokens == eos_id)
    upto = tokens[: hits[0] + 1] if len(hits) else tokens
    return int((upto != pad_id).sum())


def generate(model, prompt: Sequence[int], cfg: DecodeConfig, eos_id: int, pad_id: int) -> Generation:
    """Decode blocks left to right until a committed block contains EOS or the budget runs out."""
    prompt = list(int(t) for t in prompt)
    max_len = model.config.max_seq_len
    if len(prompt) + cfg.max_new_tokens > max_len:
        raise ValueError(f"prompt ({len(prompt)}) + max_new_tokens ({cfg.max_new_tokens}) exceeds {max_len}")
    decode_block = BLOCK_DECODERS[cfg.decoder]
    trace = DecodeTrace()
    context = list(prompt)
    out: list[int] = []
    t0 = time.monotonic()
    n_blocks = -(-cfg.max_new_tokens // cfg.block_size)
    for k in range(n_blocks):
        start = len(prompt) + k * cfg.block_size
        block = range(start, min(start + cfg.block_size, len(prompt) + cfg.max_new_tokens))
        try:
            toks = decode_block(model, block, context, len(prompt), cfg, trace, k)
        except DecodeError as err:
            err.trace = trace
            raise
        trace.blocks += 1
        trace.commits.append((k, list(block)))
        context.extend(int(t) for t in toks)
        out.extend(int(t) for t in toks)
        if (toks == eos_id).any():
            trace.complete = True
            break
    trace.wall_time = time.monotonic() - t0
    tokens = np.array(out, dtype=np.int64)
    trace.generated_tokens = count_generated(tokens, eos_id, pad_id)
    hits = np.flatnonzero(tokens == eos_id)
    response = tokens[: hits[0]] if len(hits) else tokens
    if not trace.complete:
        log.debug("generation exhausted %d tokens without EOS", cfg.max_new_tokens)
    return Generation(tokens, response, trace)
