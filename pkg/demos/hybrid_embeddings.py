"""
Hybrid embeddings
=================

A promoted position is fed to the network as a blend of its predicted token's
embedding and the mask embedding, weighted by the model's confidence. The
blend is rescaled so that its length interpolates the two lengths linearly,
which a plain weighted sum does not do.
"""

#%%
import torch

from blockdiff import DiffusionTransformer, ModelConfig, make_hybrid_embedding
from blockdiff.tasks import TaskSpec, task_vocabulary

#%%
# Step 1. An untrained model gives us an embedding table
# ------------------------------------------------------
vocab = task_vocabulary(TaskSpec(family="copy", num_symbols=6))
model = DiffusionTransformer(ModelConfig(vocab_size=len(vocab), embed_dim=32, num_layers=1, num_heads=2,
                                         max_seq_len=16, block_size=4), vocab.mask_id)
table = model.embedding_table()
token = vocab.encode(["3"])[0]
e, m = table.vectors[token], table.mask_vector
print(f"|e(3)| = {e.norm():.4f}   |e_mask| = {m.norm():.4f}")

#%%
# Step 2. Sweep the confidence weight
# -----------------------------------
# The raw blend shrinks in the middle because the two vectors point in
# different directions; the hybrid keeps the interpolated length and the
# raw blend's direction.
print(f"{'pi':>5} {'|raw|':>8} {'|hybrid|':>9} {'target':>8} {'cos':>10}")
for pi in (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0):
    raw = pi * e + (1 - pi) * m
    h = make_hybrid_embedding(token, pi, table)
    target = pi * e.norm() + (1 - pi) * m.norm()
    cos = torch.dot(h, raw) / (h.norm() * raw.norm())
    print(f"{pi:5.2f} {raw.norm():8.4f} {h.norm():9.4f} {target:8.4f} {cos:10.7f}")
