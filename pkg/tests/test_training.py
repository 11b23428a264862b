import math

import numpy as np
import pytest
import torch
from scipy import stats

from blockdiff.checkpoint import save_checkpoint
from blockdiff.corruption import CorruptedSequence, NoiseSpec, uniform_corrupt
from blockdiff.model import DiffusionTransformer, ModelConfig, ModelOutput
from blockdiff.tasks import TaskSpec, generate_task_dataset, task_vocabulary
from blockdiff.training import (LARGE_MODEL_PRESET, TrainConfig, Trainer, branch_loss, collate, block_view,
                                mdlm_loss, on_policy_loss, oput_joint_loss, rollout_batch,
                                rollout_predicted_sequence, sample_categorical, train, udlm_loss,
                                _corrupt_batch)
from blockdiff.vocab import Example, TokenSequence, Vocabulary


@pytest.fixture
def vocab16():
    return Vocabulary.build([chr(ord("a") + i) for i in range(13)])


def _uniform_output(n, v):
    logits = torch.zeros(n, v, dtype=torch.float64)
    return ModelOutput(logits, torch.softmax(logits, -1))


def _point_mass_output(tokens, v):
    logits = torch.full((len(tokens), v), -1e4, dtype=torch.float64)
    logits[torch.arange(len(tokens)), torch.as_tensor(tokens)] = 0.0
    return ModelOutput(logits, torch.softmax(logits, -1))


def _masked(clean, positions, t, mask_id):
    tokens = clean.tokens.copy()
    tokens[positions] = mask_id
    hit = np.zeros(len(clean), bool)
    hit[positions] = True
    return CorruptedSequence(TokenSequence(tokens, clean.prompt_len), hit, t)


def test_large_model_preset_values():
    assert LARGE_MODEL_PRESET == dict(epochs=2, batch_size=8, learning_rate=2e-6, lr_schedule="cosine")
    cfg = TrainConfig(**LARGE_MODEL_PRESET)
    assert cfg.separate_iterations and cfg.rollout_sampling == "categorical"


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(epochs=0), dict(objective="x")])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_mdlm_no_masks_is_zero(vocab16):
    clean = TokenSequence([3, 4, 5, 6, 7], 2)
    corrupted = _masked(clean, [], 0.5, vocab16.mask_id)
    assert mdlm_loss(clean, corrupted, _uniform_output(5, 16), vocab16.mask_id).loss_total == 0.0


def test_mdlm_point_mass_is_zero(vocab16):
    clean = TokenSequence([3, 4, 5, 6], 2)
    corrupted = _masked(clean, [3], 1.0, vocab16.mask_id)
    rep = mdlm_loss(clean, corrupted, _point_mass_output(clean.tokens, 16), vocab16.mask_id)
    assert rep.loss_total == pytest.approx(0.0, abs=1e-9)


def test_mdlm_uniform_closed_form(vocab16):
    clean = TokenSequence([3, 4, 5, 6, 7, 8], 2)
    corrupted = _masked(clean, [2, 4, 5], 0.5, vocab16.mask_id)
    rep = mdlm_loss(clean, corrupted, _uniform_output(6, 16), vocab16.mask_id)
    assert rep.loss_total == pytest.approx((1 / 0.5) * 3 * math.log(16), rel=1e-12)
    assert sorted(p for p, _, _ in rep.per_position) == [2, 4, 5]
    assert all(v >= 0 for _, _, v in rep.per_position)


def test_mdlm_rejects_zero_noise_with_masks(vocab16):
    clean = TokenSequence([3, 4, 5, 6], 2)
    with pytest.raises(ValueError):
        mdlm_loss(clean, _masked(clean, [3], 0.0, vocab16.mask_id), _uniform_output(4, 16), vocab16.mask_id)


def test_udlm_closed_forms(vocab16):
    clean = TokenSequence([3, 4, 5, 6, 7, 8, 9], 3)
    corrupted = uniform_corrupt(clean, 0.5, 0, vocab16)
    assert udlm_loss(clean, corrupted, _uniform_output(7, 16)).loss_total == pytest.approx(4 * math.log(16))
    assert udlm_loss(clean, corrupted, _point_mass_output(clean.tokens, 16)).loss_total == pytest.approx(0, abs=1e-9)


def test_udlm_has_no_noise_dependence(vocab16):
    clean = TokenSequence([3, 4, 5, 6, 7, 8, 9], 3)
    c = uniform_corrupt(clean, 0.5, 0, vocab16)
    out = _uniform_output(7, 16)
    out.logits[4, 2] = 3.0
    out = ModelOutput(out.logits, torch.softmax(out.logits, -1))
    a = udlm_loss(clean, CorruptedSequence(c.tokens, c.corruption_mask, 0.3), out).loss_total
    b = udlm_loss(clean, CorruptedSequence(c.tokens, c.corruption_mask, 0.9), out).loss_total
    assert a == b


def test_mdlm_and_all_position_loss_differ(vocab16):
    # same masked input: the masked objective carries 1/t and skips visible positions
    clean = TokenSequence([3, 4, 5, 6, 7, 8], 2)
    corrupted = _masked(clean, [3, 5], 0.25, vocab16.mask_id)
    out = _uniform_output(6, 16)
    assert mdlm_loss(clean, corrupted, out, vocab16.mask_id).loss_total == pytest.approx(4 * 2 * math.log(16))
    assert on_policy_loss(clean, out, out).loss_mask == pytest.approx(4 * math.log(16))


def test_rollout_copies_unmasked(vocab16):
    clean = TokenSequence([3, 4, 5, 6, 7, 8], 2)
    none = _masked(clean, [], 0.5, vocab16.mask_id)
    out = rollout_predicted_sequence(none, _uniform_output(6, 16), vocab16.mask_id, seed=0)
    assert np.array_equal(out.tokens.tokens, clean.tokens)
    some = _masked(clean, [2, 5], 0.5, vocab16.mask_id)
    for seed in range(25):
        out = rollout_predicted_sequence(some, _uniform_output(6, 16), vocab16.mask_id, seed=seed)
        keep = [0, 1, 3, 4]
        assert np.array_equal(out.tokens.tokens[keep], clean.tokens[keep])


def test_rollout_point_mass(vocab16):
    clean = TokenSequence([3, 4, 5, 6], 2)
    masked = _masked(clean, [3], 0.5, vocab16.mask_id)
    target = np.array([0, 0, 0, 11])
    for sampling in ("categorical", "greedy"):
        out = rollout_predicted_sequence(masked, _point_mass_output(target, 16), vocab16.mask_id, sampling, 4)
        assert out.tokens.tokens[3] == 11


def test_rollout_two_token_frequency(vocab16):
    clean = TokenSequence([3, 4, 5], 2)
    masked = _masked(clean, [2], 0.5, vocab16.mask_id)
    probs = torch.zeros(3, 16, dtype=torch.float64)
    probs[:, 0] = 1.0
    probs[2] = 0.0
    probs[2, 4], probs[2, 9] = 0.7, 0.3
    out = ModelOutput(torch.log(probs.clamp_min(1e-300)), probs)
    rng = np.random.default_rng(123)
    draws = [rollout_predicted_sequence(masked, out, vocab16.mask_id, seed=rng).tokens.tokens[2]
             for _ in range(10_000)]
    assert set(draws) == {4, 9}
    assert abs(np.mean(np.array(draws) == 4) - 0.7) < 0.02


def test_categorical_sampler_chi_square():
    p = np.array([0.05, 0.1, 0.2, 0.15, 0.25, 0.1, 0.1, 0.05])
    # p-values over 200 seeds are uniform (1.0% below 0.01), so one fixed seed is a fair check
    rng = np.random.default_rng(0)
    draws = sample_categorical(np.tile(p, (10_000, 1)), rng)
    observed = np.bincount(draws, minlength=8)
    assert stats.chisquare(observed, 10_000 * p).pvalue > 0.01


def test_rollout_rejects_unnormalized(vocab16):
    clean = TokenSequence([3, 4, 5], 2)
    masked = _masked(clean, [2], 0.5, vocab16.mask_id)
    bad = ModelOutput(torch.zeros(3, 16), torch.full((3, 16), 0.5))
    with pytest.raises(ValueError):
        rollout_predicted_sequence(masked, bad, vocab16.mask_id, seed=0)


# -- batched steps ----------------------------------------------------------

def _setup(objective="oput", separate=True, t=0.75, seed=0, family="reverse"):
    spec = TaskSpec(family=family, min_len=3, max_len=6, num_symbols=6, rng_seed=seed)
    vocab = task_vocabulary(spec)
    data = generate_task_dataset(spec, 32)
    cfg = ModelConfig(vocab_size=len(vocab), embed_dim=32, num_layers=2, num_heads=4, max_seq_len=14,
                      block_size=8, rng_seed=seed)
    model = DiffusionTransformer(cfg, vocab.mask_id)
    tcfg = TrainConfig(objective=objective, batch_size=8, learning_rate=1e-3, separate_iterations=separate,
                       lr_schedule="constant", rng_seed=seed)
    return model, vocab, data, tcfg, NoiseSpec(t_fixed=t, rng_seed=seed)


def test_zero_noise_branches_agree():
    model, vocab, data, tcfg, noise = _setup(separate=False, t=0.0)
    rep = Trainer(model, vocab, tcfg, noise).step(data[:8])
    assert rep.loss_mask == rep.loss_pred


def test_joint_total_matches_recomputation():
    model, vocab, data, _, _ = _setup()
    batch = collate([block_view(ex, 0, vocab, 8) for ex in data[:8]], vocab.pad_id)
    masked = _corrupt_batch(batch, 0.75, np.random.default_rng(0), vocab, "mask")
    l_mask, l_pred, predicted = oput_joint_loss(model, batch, masked, vocab.mask_id, "categorical",
                                                np.random.default_rng(5))
    again_mask, _ = branch_loss(model, masked, batch)
    again_pred, _ = branch_loss(model, predicted, batch)
    assert float((l_mask + l_pred).detach()) == pytest.approx(again_mask.item() + again_pred.item(), abs=1e-6)


def test_no_gradient_through_sampling():
    model, vocab, data, _, _ = _setup()
    batch = collate([block_view(ex, 0, vocab, 8) for ex in data[:8]], vocab.pad_id)
    masked = _corrupt_batch(batch, 0.75, np.random.default_rng(0), vocab, "mask")
    out = model(model.embed_tokens(masked), batch.allowed)
    predicted = rollout_batch(masked, out.probs, vocab.mask_id, "categorical", np.random.default_rng(1))
    assert predicted.grad_fn is None and not predicted.requires_grad
    assert predicted.dtype == torch.long
    # the rollout seed moves the loss value
    values = set()
    for seed in range(4):
        _, l_pred, _ = oput_joint_loss(model, batch, masked, vocab.mask_id, "categorical",
                                       np.random.default_rng(seed))
        values.add(round(l_pred.item(), 6))
    assert len(values) > 1


def test_point_mass_model_has_zero_branch_losses(vocab8):
    # a model whose head ignores its input and always emits the clean token
    class Oracle(torch.nn.Module):
        def __init__(self, clean):
            super().__init__()
            self.clean = clean
            self.w = torch.nn.Parameter(torch.zeros(()))

        def embed_tokens(self, t):
            return t.float().unsqueeze(-1)

        def forward(self, x, allowed):
            logits = torch.full((*self.clean.shape, len(vocab8)), -1e4) + self.w
            logits.scatter_(-1, self.clean.unsqueeze(-1), 0.0)
            return ModelOutput(logits, torch.softmax(logits, -1))

    ex = [Example((3, 4), (5, 6)), Example((4,), (7, 3, 5))]
    batch = collate([block_view(e, 0, vocab8, 4) for e in ex], vocab8.pad_id)
    masked = _corrupt_batch(batch, 0.75, np.random.default_rng(0), vocab8, "mask")
    l_mask, l_pred, _ = oput_joint_loss(Oracle(batch.clean), batch, masked, vocab8.mask_id, "categorical",
                                        np.random.default_rng(0))
    assert l_mask.item() == pytest.approx(0, abs=1e-6) and l_pred.item() == pytest.approx(0, abs=1e-6)


def test_oput_log_phases():
    model, vocab, data, tcfg, noise = _setup()
    tr = Trainer(model, vocab, tcfg, noise)
    tr.step(data[:8])
    assert [r["phase"] for r in tr.log] == ["mask", "pred"]
    assert set(tr.log[0]) >= {"step", "phase", "loss", "t", "lr", "seed"}


def test_joint_mode_single_update():
    model, vocab, data, _, noise = _setup()
    tcfg = TrainConfig(objective="oput", separate_iterations=False)
    tr = Trainer(model, vocab, tcfg, noise)
    rep = tr.step(data[:8])
    assert [r["phase"] for r in tr.log] == ["joint"]
    assert rep.loss_total == pytest.approx(rep.loss_mask + rep.loss_pred, abs=1e-6)


def test_pred_step_uses_updated_parameters():
    # the pred-branch rollout in separate mode sees parameters after the mask update
    model, vocab, data, tcfg, noise = _setup()
    tr = Trainer(model, vocab, tcfg, noise)
    seen = []
    orig = model.forward

    def spy(x, plan):
        seen.append(model.head.weight.detach().clone())
        return orig(x, plan)

    model.forward = spy
    tr.step(data[:8])
    # mask forward, rollout forward, pred forward
    assert len(seen) == 3
    assert not torch.equal(seen[0], seen[1]) and torch.equal(seen[1], seen[2])


def test_mdlm_log_has_mask_phase_only():
    model, vocab, data, _, noise = _setup()
    res = train(model, vocab, data, TrainConfig(objective="mdlm", epochs=1, batch_size=8), noise)
    assert {r["phase"] for r in res.log} == {"mask"}


def test_udlm_dispatch_uses_uniform_branch():
    model, vocab, data, _, noise = _setup()
    tr = Trainer(model, vocab, TrainConfig(objective="udlm"), noise)
    tr.step(data[:8])
    assert [r["phase"] for r in tr.log] == ["mask", "uniform"]


def test_single_example_overfit():
    model, vocab, data, _, _ = _setup()
    cfg = TrainConfig(objective="mdlm", epochs=50, batch_size=1, learning_rate=1e-3, lr_schedule="constant")
    res = train(model, vocab, data[:1], cfg, NoiseSpec(t_fixed=0.75))
    losses = [r["loss"] for r in res.log]
    assert res.steps == 50
    assert losses[-1] <= losses[0]


def test_over_long_examples_skipped():
    model, vocab, data, tcfg, noise = _setup()
    long = Example(tuple([3] * 20), (4, 5))
    res = train(model, vocab, data[:4] + [long], TrainConfig(epochs=1, batch_size=8), noise)
    assert res.skipped == 1


def test_training_is_deterministic(tmp_path):
    paths = []
    for run in range(2):
        model, vocab, data, tcfg, noise = _setup()
        res = train(model, vocab, data, TrainConfig(objective="oput", epochs=1, batch_size=8), noise)
        p = tmp_path / f"{run}.ckpt"
        save_checkpoint(p, model, vocab)
        paths.append((p.read_bytes(), [r["loss"] for r in res.log]))
    assert paths[0] == paths[1]


def _masked_block_accuracy(model, vocab, data, bs):
    from blockdiff.training import num_blocks
    views = [block_view(e, k, vocab, bs) for e in data for k in range(num_blocks(e, bs))]
    batch = collate(views, vocab.pad_id)
    x = batch.clean.clone()
    x[batch.region] = vocab.mask_id
    with torch.no_grad():
        pred = model(model.embed_tokens(x), batch.allowed).logits.argmax(-1)
    return float((pred == batch.clean)[batch.region].float().mean())


def test_oput_overfits_small_set():
    # budget found by doubling: 100 epochs reach 0.996, 150 reach 1.0
    model, vocab, data, _, noise = _setup()
    cfg = TrainConfig(objective="oput", epochs=150, batch_size=8, learning_rate=3e-3, lr_schedule="cosine")
    train(model, vocab, data, cfg, noise)
    assert _masked_block_accuracy(model, vocab, data, 8) >= 0.99
