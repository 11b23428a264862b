"""Synthetic tasks with checkable answers, dataset files, scoring and self-distillation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict, field
from typing import Iterable, Sequence

import numpy as np

from .decoding import DecodeConfig, generate
from .vocab import Example, Vocabulary

log = logging.getLogger(__name__)

FAMILIES = ("copy", "reverse", "modular-arithmetic", "sorted-sequence")
OPERATORS = ("+", "-", "*")


@dataclass
class TaskSpec:
    """A task family and its size knobs.

    ``min_len``/``max_len`` count prompt items (operations, for the arithmetic
    family). An arithmetic prompt is a start digit followed by one token per
    operation, such as ``3 +5``, so response item i lines up with prompt item
    i + 1. ``num_symbols`` is the digit slice of the vocabulary; the
    arithmetic family uses the first ``modulus`` digits. ``identity_prob`` is
    the chance an operand is its operator's identity (0 for +/-, 1 for *), so
    the running value often carries over unchanged; other operands are
    uniform over the remaining digits. Uniform operands give no first-order
    signal about a sum, which stalls small models on a long plateau.
    """

    family: str = "modular-arithmetic"
    min_len: int = 4
    max_len: int = 8
    num_symbols: int = 10
    modulus: int = 7
    operators: str = "+-"
    identity_prob: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.num_symbols < 2:
            raise ValueError("num_symbols must be at least 2")
        if self.family == "modular-arithmetic":
            if not 2 <= self.modulus <= self.num_symbols:
                raise ValueError("modulus must lie in [2, num_symbols]")
            if not self.operators or any(o not in OPERATORS for o in self.operators):
                raise ValueError(f"operators must be drawn from {''.join(OPERATORS)}")
            if not 0.0 <= self.identity_prob <= 1.0:
                raise ValueError("identity_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def task_vocabulary(spec: TaskSpec) -> Vocabulary:
    digits = [str(d) for d in range(spec.num_symbols)]
    if spec.family != "modular-arithmetic":
        return Vocabulary.build(digits)
    steps = [o + str(d) for o in spec.operators for d in range(spec.modulus)]
    return Vocabulary.build(digits + steps)


def _digit(vocab: Vocabulary, d: int) -> int:
    return vocab.tokens.index(str(d))


def _value(vocab: Vocabulary, token_id: int) -> int:
    return int(vocab.tokens[token_id])


def reference_response(spec: TaskSpec, prompt: Sequence[int], vocab: Vocabulary) -> list[int]:
    """The unique correct response for ``prompt`` under ``spec``."""
    prompt = list(prompt)
    if spec.family == "copy":
        return prompt
    if spec.family == "reverse":
        return prompt[::-1]
    if spec.family == "sorted-sequence":
        return sorted(prompt, key=lambda t: _value(vocab, t))
    # a0 (op1 a1) (op2 a2) ... -> running value after each operation
    acc = _value(vocab, prompt[0])
    out = []
    for t in prompt[1:]:
        op, x = vocab.tokens[t][0], int(vocab.tokens[t][1:])
        if op == "+":
            acc = (acc + x) % spec.modulus
        elif op == "-":
            acc = (acc - x) % spec.modulus
        else:
            acc = (acc * x) % spec.modulus
        out.append(_digit(vocab, acc))
    return out


def _sample_prompt(spec: TaskSpec, vocab: Vocabulary, rng: np.random.Generator) -> list[int]:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    if spec.family == "modular-arithmetic":
        prompt = [_digit(vocab, int(rng.integers(spec.modulus)))]
        for _ in range(n):
            op = spec.operators[int(rng.integers(len(spec.operators)))]
            identity = 1 if op == "*" else 0
            if spec.identity_prob > 0 and rng.random() < spec.identity_prob:
                x = identity
            elif spec.identity_prob > 0:
                x = int(rng.choice([d for d in range(spec.modulus) if d != identity]))
            else:
                x = int(rng.integers(spec.modulus))
            prompt.append(vocab.tokens.index(op + str(x)))
        return prompt
    if spec.family == "sorted-sequence":
        n = min(n, spec.num_symbols)
        vals = rng.permutation(spec.num_symbols)[:n]
    else:
        vals = rng.integers(0, spec.num_symbols, size=n)
    return [_digit(vocab, int(v)) for v in vals]


def generate_task_dataset(spec: TaskSpec, n: int) -> list[Example]:
    if n < 1:
        raise ValueError("need at least one example")
    vocab = task_vocabulary(spec)
    rng = np.random.default_rng(spec.rng_seed)
    out = []
    for _ in range(n):
        prompt = _sample_prompt(spec, vocab, rng)
        response = reference_response(spec, prompt, vocab)
        ex = Example(tuple(prompt), tuple(response))
        assert score_response(ex, response, vocab), "reference response failed its own check"
        out.append(ex)
    return out


def normalize_response(response: Sequence[int], vocab: Vocabulary) -> list[int]:
    """Drop everything from the first EOS on, then drop padding."""
    out = []
    for t in response:
        t = int(t)
        if t == vocab.eos_id:
            break
        if t != vocab.pad_id:
            out.append(t)
    return out


def score_response(example: Example, response: Sequence[int], vocab: Vocabulary) -> bool:
    """Exact match against the reference answer after normalization."""
    return normalize_response(response, vocab) == list(example.response)


# -- dataset files ----------------------------------------------------------

def example_record(ex: Example, meta: dict | None = None) -> str:
    rec = {"prompt": list(ex.prompt), "response": list(ex.response)}
    if meta is not None:
        rec["meta"] = meta
    return json.dumps(rec)


def write_dataset(path, examples: Iterable[Example], metas: Iterable[dict] | None = None) -> None:
    examples = list(examples)
    metas = list(metas) if metas is not None else [None] * len(examples)
    with open(path, "w", encoding="utf-8") as f:
        for ex, meta in zip(examples, metas):
            f.write(example_record(ex, meta) + "\n")


def read_dataset(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                out.append(Example(tuple(rec["prompt"]), tuple(rec["response"])))
            except KeyError as err:
                raise ValueError(f"{path}:{line_no}: missing field {err}") from None
    return out


# -- self-distillation ------------------------------------------------------

DISTILL_THRESHOLD = 0.95


@dataclass
class DistilledExample:
    prompt: tuple[int, ...]
    response: tuple[int, ...]
    metadata: dict = field(default_factory=dict)

    def as_example(self) -> Example:
        return Example(self.prompt, self.response)


@dataclass
class DistillStats:
    kept: int = 0
    discarded: int = 0


def self_distill(model, vocab: Vocabulary, prompts: Sequence[Sequence[int]], budget: int,
                 block_size: int = 32) -> tuple[list[DistilledExample], DistillStats]:
    """Answer each prompt with conservative one-way decoding; keep only finished answers."""
    cfg = DecodeConfig(decoder="threshold-baseline", tau_dec=DISTILL_THRESHOLD,
                       block_size=block_size, max_new_tokens=budget)
    kept, stats = [], DistillStats()
    for prompt in prompts:
        gen = generate(model, prompt, cfg, vocab.eos_id, vocab.pad_id)
        if not gen.complete:
            stats.discarded += 1
            continue
        meta = {"threshold": DISTILL_THRESHOLD, "block_size": block_size,
                "forward_passes": gen.trace.forward_passes, "complete": True}
        kept.append(DistilledExample(tuple(int(t) for t in prompt), tuple(int(t) for t in gen.response), meta))
        stats.kept += 1
    if not kept:
        log.warning("self-distillation kept no examples out of %d prompts", len(prompts))
    return kept, stats
