"""Greedy decoding with an engine-assembled KV context injected as past KV."""

from __future__ import annotations

import numpy as np
import torch
from transformers import DynamicCache

from mukv.retrieval import ContextKv

from .model import decode_ids, encode_text


class ContextTooLargeError(Exception):
    """Context rows plus question and generation exceed the model window."""


def _cache_from_context(context: ContextKv | None, heads: int, head_dim: int) -> tuple[DynamicCache, int]:
    cache = DynamicCache()
    if context is None or context.rows == 0:
        return cache, 0
    rows = context.rows
    for layer, (k, v) in enumerate(zip(context.layer_keys, context.layer_values)):
        kt = torch.from_numpy(np.ascontiguousarray(k)).reshape(rows, heads, head_dim).permute(1, 0, 2)
        vt = torch.from_numpy(np.ascontiguousarray(v)).reshape(rows, heads, head_dim).permute(1, 0, 2)
        cache.update(kt.unsqueeze(0).contiguous(), vt.unsqueeze(0).contiguous(), layer)
    return cache, rows


@torch.no_grad()
def decode_with_context(model, question: str, context: ContextKv | None, max_new_tokens: int = 32) -> str:
    """Greedy decode of up to max_new_tokens, conditioned on the context rows.

    With no context this degenerates to plain prompting. Deterministic for
    fixed weights and inputs.
    """
    ids = encode_text(question)
    if not ids:
        raise ValueError("question text encodes to zero tokens")
    heads = model.config.n_head
    head_dim = model.config.n_embd // heads
    cache, rows = _cache_from_context(context, heads, head_dim)
    window = model.config.n_positions
    if rows + len(ids) + max_new_tokens > window:
        raise ContextTooLargeError(
            f"context rows ({rows}) + question ({len(ids)}) + generation ({max_new_tokens}) "
            f"exceed the model window ({window})"
        )
    current = torch.tensor([ids], dtype=torch.long)
    position = rows
    generated: list[int] = []
    for _ in range(max_new_tokens):
        length = current.shape[1]
        out = model(
            input_ids=current,
            past_key_values=cache,
            position_ids=torch.arange(position, position + length).unsqueeze(0),
            attention_mask=torch.ones(1, position + length, dtype=torch.long),
            use_cache=True,
        )
        cache = out.past_key_values
        position += length
        next_id = int(out.logits[0, -1].argmax())
        generated.append(next_id)
        current = torch.tensor([[next_id]], dtype=torch.long)
    return decode_ids(generated)
