import numpy as np
import pytest
import torch

from blockdiff.model import DiffusionTransformer, EmbeddingTable, ModelConfig, ModelOutput
from blockdiff.vocab import Vocabulary


@pytest.fixture
def vocab8():
    return Vocabulary.build(list("abcde"))


@pytest.fixture
def tiny_model(vocab8):
    cfg = ModelConfig(vocab_size=len(vocab8), embed_dim=16, num_layers=2, num_heads=2, max_seq_len=24,
                      block_size=4, rng_seed=3)
    return DiffusionTransformer(cfg, vocab8.mask_id).eval()


class ScriptedModel:
    """Stands in for the transformer in decoder tests.

    ``script(call, block_inputs)`` returns a (block_len, vocab) probability
    array for the block under decode; ``call`` counts forwards within the
    current block. Context positions get a uniform distribution.
    """

    def __init__(self, vocab_size, script, block_size=4, max_seq_len=32, mask_id=1, dim=8, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.vectors = torch.randn(vocab_size, dim, generator=g, dtype=torch.float64)
        self.mask_id = mask_id
        self.script = script
        self.config = ModelConfig(vocab_size=vocab_size, embed_dim=dim, num_layers=1, num_heads=1,
                                  max_seq_len=max_seq_len, block_size=block_size)
        self.calls = 0
        self.seen = []
        self._block_start = None

    def eval(self):
        return self

    def embedding_table(self):
        return EmbeddingTable(self.vectors, self.mask_id)

    def embed_tokens(self, tokens):
        return self.vectors[torch.as_tensor(np.asarray(tokens), dtype=torch.long)]

    def __call__(self, inputs, plan):
        n = inputs.shape[0]
        ids = plan.block_ids()
        start = int(np.flatnonzero(ids == ids.max())[0])
        if start != self._block_start:
            self._block_start, self.calls = start, 0
        block_inputs = inputs[start:n]
        self.seen.append(block_inputs.clone())
        probs_block = np.asarray(self.script(self.calls, block_inputs), dtype=np.float64)
        self.calls += 1
        v = self.vectors.shape[0]
        probs = np.full((n, v), 1.0 / v)
        probs[start:n] = probs_block
        probs_t = torch.as_tensor(probs)
        return ModelOutput(torch.log(probs_t.clamp_min(1e-300)), probs_t)


def point_mass(tokens, v, conf=1.0):
    """Rows putting ``conf`` on each token and the rest spread evenly."""
    out = np.full((len(tokens), v), (1.0 - conf) / (v - 1))
    out[np.arange(len(tokens)), tokens] = conf
    return out


@pytest.fixture
def scripted():
    return ScriptedModel


class AnswerModel(ScriptedModel):
    """Predicts a fixed token sequence per prompt with constant confidence.

    ``answers`` maps a prompt tuple to the tokens it should generate; the
    prompt is recovered from the input vectors, which are exact token rows.
    """

    def __init__(self, vocab_size, answers, conf=0.99, **kw):
        super().__init__(vocab_size, None, **kw)
        self.answers = {tuple(k): list(v) for k, v in answers.items()}
        self.conf = conf

    def __call__(self, inputs, plan):
        prompt = inputs[:plan.prompt_len]
        ids = torch.cdist(prompt, self.vectors).argmin(-1).tolist()
        answer = self.answers[tuple(ids)]
        k = int(plan.block_ids().max())
        block = plan.block_range(k)
        offset = block.start - plan.prompt_len
        self.script = lambda call, _: point_mass(answer[offset:offset + len(block)], self.vectors.shape[0],
                                                 self.conf)
        return super().__call__(inputs, plan)


# -- acceptance summary -----------------------------------------------------

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
