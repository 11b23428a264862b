"""Self-describing checkpoint container.

Layout::

    b"BDCKPT\\x00\\x01"        8-byte magic
    uint64 little-endian    header length in bytes
    header                  UTF-8 JSON, sorted keys
    tensor payload          raw little-endian bytes, in header order

The header records the model config, the tie/untie flag, seed, vocabulary and
format version, plus each tensor's name, dtype, shape and byte offset.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import DiffusionTransformer, ModelConfig
from .vocab import Vocabulary

MAGIC = b"BDCKPT\x00\x01"
FORMAT_VERSION = 1
_NP_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def save_checkpoint(path, model: DiffusionTransformer, vocab: Vocabulary, meta: dict | None = None) -> None:
    tensors = []
    chunks = []
    offset = 0
    for name, t in model.state_dict().items():
        if model.config.tie_embeddings and name == "head.weight":
            continue
        arr = t.detach().cpu().numpy().astype(_NP_DTYPES[t.dtype], copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        tensors.append({"name": name, "dtype": _NP_DTYPES[t.dtype], "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "byte_order": "little",
        "config": model.config.to_dict(),
        "tie_embeddings": model.config.tie_embeddings,
        "seed": model.config.rng_seed,
        "mask_id": model.mask_id,
        "vocab": vocab.to_dict(),
        "meta": meta or {},
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in chunks:
            f.write(raw)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path) -> tuple[DiffusionTransformer, Vocabulary, dict]:
    """Returns ``(model, vocab, header)``; the model is in eval mode."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start: start + n].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    payload = memoryview(data)[start + n:]
    model = DiffusionTransformer(ModelConfig(**header["config"]), header["mask_id"])
    state = {}
    for rec in header["tensors"]:
        buf = payload[rec["offset"]: rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(buf, dtype=rec["dtype"]).reshape(rec["shape"])
        state[rec["name"]] = torch.from_numpy(arr.copy())
    if model.config.tie_embeddings:
        state["head.weight"] = state["tok_embed.weight"]
    model.load_state_dict(state)
    model.eval()
    return model, Vocabulary.from_dict(header["vocab"]), header
