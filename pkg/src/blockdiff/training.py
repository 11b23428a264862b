"""Training objectives (masked, uniform, on-policy) and the training loop.

Every example is trained block-wise: one response block is drawn per example,
earlier blocks stay clean as context, later blocks are dropped. This matches
what the block decoder sees at inference time.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corruption import CorruptedSequence, NoiseSpec, mask_corrupt, sample_noise_level, uniform_corrupt
from .model import BlockAttentionPlan, DiffusionTransformer, ModelOutput, build_attention_plan
from .vocab import Example, TokenSequence, Vocabulary

log = logging.getLogger(__name__)

OBJECTIVES = ("mdlm", "udlm", "oput")

# Fine-tuning schedule of the large-model runs, kept as a named preset.
LARGE_MODEL_PRESET = dict(epochs=2, batch_size=8, learning_rate=2e-6, lr_schedule="cosine")


@dataclass
class TrainConfig:
    objective: str = "oput"
    epochs: int = 2
    batch_size: int = 8
    learning_rate: float = 3e-4
    lr_schedule: str = "cosine"
    separate_iterations: bool = True
    rollout_sampling: str = "categorical"
    rng_seed: int = 0
    weight_decay: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    warmup_steps: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        if self.rollout_sampling not in ("categorical", "greedy"):
            raise ValueError("rollout_sampling must be 'categorical' or 'greedy'")
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class LossReport:
    """Loss terms for one step.

    ``loss_mask`` is the loss on the mask-corrupted input; ``loss_pred`` the
    loss on the second noisy input (the on-policy rollout, or the uniform
    corruption for the uniform objective). The masked objective only fills
    ``loss_mask``.
    """

    loss_mask: float
    loss_pred: float
    loss_total: float
    per_position: list[tuple[int, str, float]] = field(default_factory=list)


class NonFiniteLossError(FloatingPointError):
    pass


def position_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood of ``targets`` at every position, shape of ``targets``."""
    logp = F.log_softmax(logits, dim=-1)
    return -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


# -- single-sequence objectives ---------------------------------------------

def _check_pair(clean: TokenSequence, corrupted: CorruptedSequence, output: ModelOutput):
    if len(clean) != len(corrupted.tokens) or output.logits.shape[0] != len(clean):
        raise ValueError("clean, corrupted and output lengths disagree")
    if clean.prompt_len != corrupted.prompt_len:
        raise ValueError("clean and corrupted prompt regions disagree")


def mdlm_loss(clean: TokenSequence, corrupted: CorruptedSequence, output: ModelOutput,
              mask_id: int) -> LossReport:
    """``(1/t) * sum over masked positions of -log p(x0_i | x_t)``."""
    _check_pair(clean, corrupted, output)
    masked = np.flatnonzero(corrupted.tokens.tokens == mask_id)
    t = corrupted.noise_level
    if len(masked) and t <= 0:
        raise ValueError("noise level 0 with masked positions present")
    if not len(masked):
        return LossReport(0.0, 0.0, 0.0)
    nll = position_nll(output.logits, torch.as_tensor(clean.tokens)).detach().double().numpy()
    per = [(int(i), "mask", float(nll[i] / t)) for i in masked]
    total = float(sum(v for _, _, v in per))
    return LossReport(total, 0.0, total, per)


def all_position_loss(clean: TokenSequence, output: ModelOutput, term: str) -> tuple[float, list]:
    """Sum of -log p(x0_i) over every response position, with no noise weighting."""
    nll = position_nll(output.logits, torch.as_tensor(clean.tokens)).detach().double().numpy()
    per = [(i, term, float(nll[i])) for i in range(clean.prompt_len, len(clean))]
    return float(sum(v for _, _, v in per)), per


def udlm_loss(clean: TokenSequence, corrupted: CorruptedSequence, output: ModelOutput) -> LossReport:
    """Uniform-noise objective; the value is reported in ``loss_pred``."""
    _check_pair(clean, corrupted, output)
    v, per = all_position_loss(clean, output, "uniform")
    return LossReport(0.0, v, v, per)


def on_policy_loss(clean: TokenSequence, out_masked: ModelOutput, out_pred: ModelOutput) -> LossReport:
    lm, per_m = all_position_loss(clean, out_masked, "mask")
    lp, per_p = all_position_loss(clean, out_pred, "pred")
    return LossReport(lm, lp, lm + lp, per_m + per_p)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF draw per row of ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def rollout_predicted_sequence(masked: CorruptedSequence, output: ModelOutput, mask_id: int,
                               sampling: str = "categorical", seed=None) -> CorruptedSequence:
    """Fill each MASK position from the model's distribution; copy everything else."""
    probs = output.probs.detach()
    if not torch.allclose(probs.sum(-1), torch.ones((), dtype=probs.dtype), atol=1e-4):
        raise ValueError("output rows are not normalized")
    tokens = masked.tokens.tokens.copy()
    where = np.flatnonzero(tokens == mask_id)
    if len(where):
        rows = probs[torch.as_tensor(where)].double().numpy()
        if sampling == "greedy":
            tokens[where] = rows.argmax(-1)
        else:
            rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
            tokens[where] = sample_categorical(rows, rng)
    return CorruptedSequence(TokenSequence(tokens, masked.prompt_len), masked.corruption_mask.copy(),
                             masked.noise_level)


# -- batched training -------------------------------------------------------

@dataclass
class Batch:
    clean: torch.Tensor          # (B, L) long, PAD beyond each row's length
    region: torch.Tensor         # (B, L) bool, the noisy block being trained
    plans: list[BlockAttentionPlan]
    allowed: torch.Tensor        # (B, L, L) bool
    lengths: list[int]

    @property
    def context_lens(self) -> list[int]:
        return [p.total_len - _block_len(p) for p in self.plans]


def _block_len(plan: BlockAttentionPlan) -> int:
    return len(plan.block_range(plan.num_blocks - 1))


def block_view(example: Example, block: int, vocab: Vocabulary, block_size: int) -> tuple[TokenSequence, BlockAttentionPlan]:
    """Prompt plus clean blocks before ``block`` as context; ``block`` as the response region."""
    target = example.target(vocab.eos_id, block_size)
    ctx = list(example.prompt) + target[: block * block_size]
    seq = TokenSequence.from_parts(ctx, target[block * block_size:(block + 1) * block_size])
    plan = build_attention_plan(len(example.prompt), block + 1, block_size)
    return seq, plan


def num_blocks(example: Example, block_size: int) -> int:
    return -(-(len(example.response) + 1) // block_size)


def collate(views: Sequence[tuple[TokenSequence, BlockAttentionPlan]], pad_id: int) -> Batch:
    n = max(len(s) for s, _ in views)
    clean = torch.full((len(views), n), pad_id, dtype=torch.long)
    region = torch.zeros(len(views), n, dtype=torch.bool)
    for r, (s, _) in enumerate(views):
        clean[r, : len(s)] = torch.from_numpy(s.tokens)
        region[r, s.prompt_len: len(s)] = True
    plans = [p for _, p in views]
    allowed = torch.stack([p.allowed(n) for p in plans])
    return Batch(clean, region, plans, allowed, [len(s) for s, _ in views])


def _corrupt_batch(batch: Batch, t: float, rng: np.random.Generator, vocab: Vocabulary, kind: str) -> torch.Tensor:
    fn = mask_corrupt if kind == "mask" else uniform_corrupt
    out = batch.clean.clone()
    for r, n in enumerate(batch.lengths):
        seq = TokenSequence(batch.clean[r, :n].numpy(), batch.context_lens[r])
        out[r, :n] = torch.from_numpy(fn(seq, t, rng, vocab).tokens.tokens)
    return out


@torch.no_grad()
def rollout_batch(noisy: torch.Tensor, probs: torch.Tensor, mask_id: int, sampling: str,
                  rng: np.random.Generator) -> torch.Tensor:
    """Batched version of :func:`rollout_predicted_sequence`; returns a new token tensor."""
    out = noisy.clone()
    where = noisy == mask_id
    if where.any():
        rows = probs[where].double().numpy()
        fill = rows.argmax(-1) if sampling == "greedy" else sample_categorical(rows, rng)
        out[where] = torch.from_numpy(fill)
    return out


def branch_loss(model: DiffusionTransformer, inputs: torch.Tensor, batch: Batch) -> tuple[torch.Tensor, ModelOutput]:
    """All-region-position cross-entropy against the clean tokens, averaged over the batch."""
    out = model(model.embed_tokens(inputs), batch.allowed)
    nll = position_nll(out.logits, batch.clean)
    return (nll * batch.region).sum() / len(batch.lengths), out


def masked_branch_loss(model: DiffusionTransformer, inputs: torch.Tensor, batch: Batch, t: float,
                       mask_id: int) -> torch.Tensor:
    out = model(model.embed_tokens(inputs), batch.allowed)
    nll = position_nll(out.logits, batch.clean)
    masked = (inputs == mask_id) & batch.region
    if masked.any() and t <= 0:
        raise ValueError("noise level 0 with masked positions present")
    if not masked.any():
        return (out.logits * 0).sum()
    return (nll * masked).sum() / (t * len(batch.lengths))


def oput_joint_loss(model: DiffusionTransformer, batch: Batch, masked: torch.Tensor, mask_id: int,
                    sampling: str, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(L_mask, L_pred, predicted_tokens)`` with the rollout drawn from the masked pass."""
    l_mask, out = branch_loss(model, masked, batch)
    predicted = rollout_batch(masked, out.probs.detach(), mask_id, sampling, rng)
    l_pred, _ = branch_loss(model, predicted, batch)
    return l_mask, l_pred, predicted


class Trainer:
    """Owns the optimizer, the seeded RNG stream and the step log for one model."""

    def __init__(self, model: DiffusionTransformer, vocab: Vocabulary, cfg: TrainConfig,
                 noise: NoiseSpec, total_updates: int | None = None):
        self.model, self.vocab, self.cfg, self.noise = model, vocab, cfg, noise
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.noise_rng = np.random.default_rng(noise.rng_seed)
        self.opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas,
                                     weight_decay=cfg.weight_decay)
        self.total_updates = total_updates
        self.updates = 0
        self.log: list[dict] = []

    def lr_at(self, k: int) -> float:
        base = self.cfg.learning_rate
        if self.cfg.warmup_steps and k < self.cfg.warmup_steps:
            return base * (k + 1) / self.cfg.warmup_steps
        if self.cfg.lr_schedule == "constant" or not self.total_updates:
            return base
        frac = min(1.0, k / max(1, self.total_updates))
        return base * 0.5 * (1.0 + math.cos(math.pi * frac))

    def _update(self, loss: torch.Tensor, phase: str, t: float, seed: int, **extra) -> float:
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite {phase} loss at update {self.updates} (t={t}, seed={seed})")
        lr = self.lr_at(self.updates)
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.log.append({"step": self.updates, "phase": phase, "loss": value, "t": t, "lr": lr,
                         "seed": seed, **extra})
        self.updates += 1
        return value

    def make_batch(self, examples: Sequence[Example]) -> Batch:
        bs = self.model.config.block_size
        views = []
        for ex in examples:
            k = int(self.rng.integers(num_blocks(ex, bs)))
            views.append(block_view(ex, k, self.vocab, bs))
        return collate(views, self.vocab.pad_id)

    def step(self, examples: Sequence[Example]) -> LossReport:
        """One training iteration of the configured objective on a batch."""
        self.model.train()
        batch = self.make_batch(examples)
        t = sample_noise_level(self.noise, self.noise_rng)
        seed = int(self.rng.integers(2**31))
        rng = np.random.default_rng(seed)
        mask_id = self.model.mask_id
        masked = _corrupt_batch(batch, t, rng, self.vocab, "mask")
        obj = self.cfg.objective

        if obj == "mdlm":
            loss = masked_branch_loss(self.model, masked, batch, t, mask_id)
            v = self._update(loss, "mask", t, seed)
            return LossReport(v, 0.0, v)

        def second_input() -> torch.Tensor:
            if obj == "udlm":
                return _corrupt_batch(batch, t, rng, self.vocab, "uniform")
            with torch.no_grad():
                out = self.model(self.model.embed_tokens(masked), batch.allowed)
            return rollout_batch(masked, out.probs, mask_id, self.cfg.rollout_sampling, rng)

        second_phase = "uniform" if obj == "udlm" else "pred"
        if self.cfg.separate_iterations:
            l_mask, _ = branch_loss(self.model, masked, batch)
            vm = self._update(l_mask, "mask", t, seed)
            l_pred, _ = branch_loss(self.model, second_input(), batch)
            vp = self._update(l_pred, second_phase, t, seed)
            return LossReport(vm, vp, vm + vp)

        if obj == "oput":
            l_mask, l_pred, _ = oput_joint_loss(self.model, batch, masked, mask_id,
                                                self.cfg.rollout_sampling, rng)
        else:
            l_mask, _ = branch_loss(self.model, masked, batch)
            l_pred, _ = branch_loss(self.model, second_input(), batch)
        vm, vp = float(l_mask.detach()), float(l_pred.detach())
        total = self._update(l_mask + l_pred, "joint", t, seed, loss_mask=vm, loss_pred=vp)
        return LossReport(vm, vp, total)


def updates_per_step(cfg: TrainConfig) -> int:
    return 2 if cfg.separate_iterations and cfg.objective != "mdlm" else 1


@dataclass
class TrainResult:
    log: list[dict]
    skipped: int
    steps: int


def filter_dataset(dataset: Iterable[Example], vocab: Vocabulary, max_seq_len: int,
                   block_size: int) -> tuple[list[Example], int]:
    kept, skipped = [], 0
    for ex in dataset:
        if len(ex.prompt) + len(ex.target(vocab.eos_id, block_size)) > max_seq_len:
            skipped += 1
        else:
            kept.append(ex)
    if skipped:
        log.warning("skipped %d examples longer than max_seq_len=%d", skipped, max_seq_len)
    return kept, skipped


def train(model: DiffusionTransformer, vocab: Vocabulary, dataset: Sequence[Example], cfg: TrainConfig,
          noise: NoiseSpec, max_steps: int | None = None) -> TrainResult:
    """Run ``cfg.epochs`` passes over ``dataset`` (optionally capped at ``max_steps`` iterations)."""
    data, skipped = filter_dataset(dataset, vocab, model.config.max_seq_len, model.config.block_size)
    if not data:
        raise ValueError("dataset is empty after filtering")
    per_epoch = -(-len(data) // cfg.batch_size)
    steps = cfg.epochs * per_epoch if max_steps is None else min(max_steps, cfg.epochs * per_epoch)
    trainer = Trainer(model, vocab, cfg, noise, total_updates=steps * updates_per_step(cfg))
    done = 0
    for _ in range(cfg.epochs):
        order = trainer.rng.permutation(len(data))
        for b in range(per_epoch):
            if done >= steps:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            trainer.step([data[i] for i in idx])
            done += 1
    model.eval()
    return TrainResult(trainer.log, skipped, done)


def write_log(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
