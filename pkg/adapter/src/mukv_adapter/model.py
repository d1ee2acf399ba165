"""Tiny causal transformer checkpoint management and byte-level text codec.

The checkpoint is built deterministically from a seed and saved to disk, so
the smoke pipeline loads the same pretrained weights on every run without
any network access. Hidden width equals the engine's concat dim (H * D).
"""

from __future__ import annotations

from pathlib import Path

import torch
from transformers import GPT2Config, GPT2LMHeadModel

from mukv.core import ModelGeometry

VOCAB_SIZE = 256  # byte-level


def build_checkpoint(path: str | Path, geometry: ModelGeometry, seed: int = 0, n_positions: int = 512) -> None:
    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=VOCAB_SIZE,
        n_positions=n_positions,
        n_embd=geometry.concat_dim,
        n_layer=geometry.num_layers,
        n_head=geometry.num_heads,
        bos_token_id=None,
        eos_token_id=None,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        attn_implementation="eager",
    )
    model = GPT2LMHeadModel(config)
    model.eval()
    model.save_pretrained(path)


def load_model(path: str | Path) -> GPT2LMHeadModel:
    model = GPT2LMHeadModel.from_pretrained(path, attn_implementation="eager")
    model.eval()
    return model


def check_geometry(model: GPT2LMHeadModel, geometry: ModelGeometry) -> None:
    cfg = model.config
    if (
        cfg.n_layer != geometry.num_layers
        or cfg.n_head != geometry.num_heads
        or cfg.n_embd != geometry.concat_dim
    ):
        raise ValueError(
            f"model (L={cfg.n_layer}, H={cfg.n_head}, C={cfg.n_embd}) does not match "
            f"geometry (L={geometry.num_layers}, H={geometry.num_heads}, C={geometry.concat_dim})"
        )


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_ids(ids: list[int]) -> str:
    return bytes(int(i) % VOCAB_SIZE for i in ids).decode("utf-8", errors="replace")
