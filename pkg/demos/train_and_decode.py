"""
Train, then decode with and without revision
============================================

Trains a small block-diffusion model on a toy task with the masked objective,
fine-tunes a copy with on-policy training, and decodes the same prompt three
ways: one-way threshold decoding on the baseline, and soft parallel decoding
on both checkpoints. Runs in about a minute on one CPU core.
"""

#%%
import copy

import torch

from blockdiff import (DecodeConfig, DiffusionTransformer, ModelConfig, NoiseSpec, TaskSpec, TrainConfig, evaluate,
                       generate, generate_task_dataset, score_response, task_vocabulary, train)

torch.manual_seed(0)

#%%
# Step 1. Data: reverse a string of digits
# ----------------------------------------
spec = TaskSpec(family="reverse", min_len=4, max_len=7, num_symbols=8, rng_seed=0)
vocab = task_vocabulary(spec)
data = generate_task_dataset(spec, 512)
test = generate_task_dataset(TaskSpec(**{**spec.to_dict(), "rng_seed": 1}), 50)
print("prompt  :", " ".join(vocab.decode(data[0].prompt)))
print("response:", " ".join(vocab.decode(data[0].response)))

#%%
# Step 2. Masked-diffusion pretraining
# ------------------------------------
cfg = ModelConfig(vocab_size=len(vocab), embed_dim=48, num_layers=2, num_heads=4, max_seq_len=16,
                  block_size=8, rng_seed=0)
baseline = DiffusionTransformer(cfg, vocab.mask_id)
noise = NoiseSpec(mode="uniform-range", t_low=0.05, t_high=1.0, rng_seed=0)
res = train(baseline, vocab, data, TrainConfig(objective="mdlm", epochs=25, batch_size=32, learning_rate=2e-3,
                                               lr_schedule="constant", warmup_steps=20), noise)
print(f"mdlm: {res.steps} steps, last loss {res.log[-1]['loss']:.3f}")

#%%
# Step 3. On-policy fine-tuning of a copy
# ---------------------------------------
# Each step trains on a masked input, then on the model's own one-shot guess
# at the masked positions, with the loss on every position both times.
oput = copy.deepcopy(baseline)
res = train(oput, vocab, data, TrainConfig(objective="oput", epochs=8, batch_size=32, learning_rate=5e-4), noise)
print("oput: last losses", {r["phase"]: round(r["loss"], 3) for r in res.log[-2:]})

#%%
# Step 4. Decode one prompt and watch the steps
# ---------------------------------------------
def show(name, model, dcfg, ex):
    gen = generate(model, ex.prompt, dcfg, vocab.eos_id, vocab.pad_id)
    print(f"\n{name}: {gen.trace.forward_passes} forwards, correct={score_response(ex, gen.tokens, vocab)}")
    for s in gen.trace.steps:
        preds = "".join(vocab.tokens[t] if len(vocab.tokens[t]) == 1 else "_" for t in s.predictions)
        print(f"  step {s.step}: predicted {preds}  promoted {len(s.promoted)}  cause {s.cause}")


ex = test[0]
print("\ntarget:", "".join(vocab.decode(ex.response)))
show("threshold 0.9, baseline", baseline, DecodeConfig(decoder="threshold-baseline", tau_dec=0.9, block_size=8,
                                                       max_new_tokens=8), ex)
show("SPD 0.5, baseline", baseline, DecodeConfig(tau_dec=0.5, block_size=8, max_new_tokens=8), ex)
show("SPD 0.5, on-policy", oput, DecodeConfig(tau_dec=0.5, block_size=8, max_new_tokens=8), ex)

#%%
# Step 5. Accuracy and tokens per forward over the test set
# ---------------------------------------------------------
for name, model, dcfg in [
    ("baseline, threshold 0.9", baseline, DecodeConfig(decoder="threshold-baseline", tau_dec=0.9, block_size=8,
                                                       max_new_tokens=8)),
    ("baseline, threshold 0.0", baseline, DecodeConfig(decoder="threshold-baseline", tau_dec=0.0, block_size=8,
                                                       max_new_tokens=8)),
    ("on-policy, SPD 0.5", oput, DecodeConfig(tau_dec=0.5, block_size=8, max_new_tokens=8)),
    ("on-policy, SPD 0.0", oput, DecodeConfig(tau_dec=0.0, block_size=8, max_new_tokens=8)),
]:
    report, _ = evaluate(model, vocab, test, dcfg, timing=False)
    print(f"{name:26s} accuracy {report.accuracy:.2f}  tpf {report.tpf:.2f}")
