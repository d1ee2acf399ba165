"""Per-granularity prefills over synthetic visual tokens, KV and attention
extraction, and emission of engine wire records.

One prefill per granularity per segment, each conditioned on its own
granularity's compressed history (rolling context rows injected as past KV).
The resulting KV rows are split into the plan's blocks; each block's
attention payload is the block-column submatrix of the chosen layer's
attention, renormalized per query row so it stays row-stochastic.
"""

from __future__ import annotations

import numpy as np
import torch
from transformers import DynamicCache

from mukv.core import BlockId, GranularityLevel, ModelGeometry
from mukv.dcp import AttentionPayload
from mukv.granularity import GranularityPlan
from mukv.retrieval import QuestionRecord
from mukv.wire import RawBlock, SegmentRecord

from .config import AdapterConfig
from .model import encode_text

EMBED_SCALE = 0.5


def synth_segment_tokens(seed: int, segment_index: int, geometry: ModelGeometry) -> np.ndarray:
    """Random-projected image-patch stand-ins for one segment's token grid.

    Shared across the three granularity prefills; embedding depends only on
    (seed, segment, token index).
    """
    rng = np.random.default_rng([seed, segment_index])
    return (EMBED_SCALE * rng.normal(size=(geometry.tokens_per_segment, geometry.concat_dim))).astype(
        np.float32
    )


def _cache_from_rows(past, heads: int, head_dim: int) -> tuple[DynamicCache, int]:
    """Per-layer (rows, C) numpy KV -> DynamicCache of (1, H, rows, D)."""
    cache = DynamicCache()
    rows = 0
    if past is None:
        return cache, 0
    for layer, (k, v) in enumerate(past):
        rows = k.shape[0]
        if rows == 0:
            continue
        kt = torch.from_numpy(np.ascontiguousarray(k)).reshape(rows, heads, head_dim).permute(1, 0, 2)
        vt = torch.from_numpy(np.ascontiguousarray(v)).reshape(rows, heads, head_dim).permute(1, 0, 2)
        cache.update(kt.unsqueeze(0).contiguous(), vt.unsqueeze(0).contiguous(), layer)
    return cache, rows


def _concat_heads(tensor: torch.Tensor) -> np.ndarray:
    """(H, n, D) -> (n, H*D) with head 0's dims first."""
    h, n, d = tensor.shape
    return tensor.permute(1, 0, 2).reshape(n, h * d).numpy().astype(np.float32)


@torch.no_grad()
def prefill(model, embeds: np.ndarray, past, heads: int, head_dim: int):
    """Run one granularity prefill; returns (keys, values, attentions).

    keys/values: per layer (n, C) float32 for the current tokens only.
    attentions: per layer (H, n, past+n) for the current query rows.
    """
    cache, past_rows = _cache_from_rows(past, heads, head_dim)
    n = embeds.shape[0]
    inputs = torch.from_numpy(embeds).unsqueeze(0)
    out = model(
        inputs_embeds=inputs,
        past_key_values=cache,
        position_ids=torch.arange(past_rows, past_rows + n).unsqueeze(0),
        attention_mask=torch.ones(1, past_rows + n, dtype=torch.long),
        output_attentions=True,
        use_cache=True,
    )
    keys, values = [], []
    for layer in out.past_key_values.layers:
        keys.append(_concat_heads(layer.keys[0, :, past_rows:, :]))
        values.append(_concat_heads(layer.values[0, :, past_rows:, :]))
    attentions = [a[0] for a in out.attentions]
    return keys, values, attentions


def _block_payload(attention: torch.Tensor, start: int, stop: int, raw: bool) -> AttentionPayload:
    """Column-restricted, row-renormalized attention for one block's tokens."""
    sub = attention[:, start:stop, start:stop].to(torch.float64)
    sub = sub / sub.sum(dim=-1, keepdim=True).clamp_min(1e-9)
    if raw:
        return AttentionPayload.from_raw(sub.numpy().astype(np.float32))
    return AttentionPayload.from_aggregated(sub.sum(dim=(0, 1)).numpy().astype(np.float32))


def _level_blocks(plan: GranularityPlan, level: GranularityLevel):
    """(sub_index, token index list) for every block at a level, plan order."""
    geo = plan.geometry
    if level is GranularityLevel.SEGMENT:
        return [(0, list(plan.segment_indices))]
    if level is GranularityLevel.FRAME:
        return [(frame_id, list(idx)) for frame_id, idx in plan.frame_blocks]
    return [
        (frame_id * geo.super_patches_per_frame + sp, list(idx))
        for frame_id, sp, idx in plan.patch_blocks
    ]


def extract_segment(
    model,
    config: AdapterConfig,
    plan: GranularityPlan,
    segment_index: int,
    rolling: dict[GranularityLevel, list],
    time_span: tuple[float, float],
) -> SegmentRecord:
    """Three independent prefills, one record. rolling holds per-granularity
    past KV obtained from the engine store's rolling_context."""
    geo = plan.geometry
    tokens = synth_segment_tokens(config.seed, segment_index, geo)
    layer_idx = config.layer_index()
    blocks = []
    for level in plan.levels:
        level_blocks = _level_blocks(plan, level)
        token_idx = [i for _, idx in level_blocks for i in idx]
        try:
            keys, values, attentions = prefill(
                model, tokens[token_idx], rolling.get(level), geo.num_heads, geo.head_dim
            )
        except Exception as exc:
            raise RuntimeError(f"prefill failed at granularity {level.label}: {exc}") from exc
        attention = attentions[layer_idx]
        offset = 0
        for sub, idx in level_blocks:
            n = len(idx)
            start, stop = offset, offset + n
            offset = stop
            blocks.append(
                RawBlock(
                    block_id=BlockId(level, segment_index, sub),
                    token_count=n,
                    payload=_block_payload(attention, start, stop, config.raw_attention),
                    layer_keys=[k[start:stop].copy() for k in keys],
                    layer_values=[v[start:stop].copy() for v in values],
                )
            )
    record = SegmentRecord(
        segment_index=segment_index,
        time_start=time_span[0],
        time_end=time_span[1],
        geometry=geo,
        blocks=blocks,
    )
    record.blocks = record.canonical_blocks()
    return record


@torch.no_grad()
def extract_question(model, config: AdapterConfig, text: str, asked_at: float) -> QuestionRecord:
    """Question query projections from the chosen attention layer."""
    ids = encode_text(text)
    if not ids:
        raise ValueError("question text encodes to zero tokens")
    captured = {}
    block = model.transformer.h[config.layer_index()].attn.c_attn

    def hook(_module, _inputs, output):
        captured["qkv"] = output.detach()

    handle = block.register_forward_hook(hook)
    try:
        model(input_ids=torch.tensor([ids], dtype=torch.long))
    finally:
        handle.remove()
    width = config.geometry.concat_dim
    query = captured["qkv"][0, :, :width]  # query third of the fused projection
    return QuestionRecord(query_tokens=query.numpy().astype(np.float32), asked_at=float(asked_at))
