import math
from dataclasses import replace

import numpy as np
import pytest

from mukv.config import EngineConfig
from mukv.core import BlockId, ModelGeometry
from mukv.dcp import AttentionPayload, compress_segment
from mukv.granularity import validate_record
from mukv.store import Store
from mukv.wire import RawBlock, SegmentRecord

# Smallest non-degenerate grid; matches the minimal wire example.
TINY = ModelGeometry(
    num_layers=1, num_heads=1, head_dim=2,
    patches_per_frame=4, frames_per_segment=1, super_patches_per_frame=2,
)
# Small grid with multiple frames/layers for pipeline tests.
SMALL = ModelGeometry(
    num_layers=2, num_heads=2, head_dim=8,
    patches_per_frame=8, frames_per_segment=2, super_patches_per_frame=2,
)
# Reference token grid at desk-scale layer/head/dim.
DESK = ModelGeometry(
    num_layers=2, num_heads=2, head_dim=8,
    patches_per_frame=196, frames_per_segment=4, super_patches_per_frame=4,
)


@pytest.fixture
def tiny_config():
    return replace(EngineConfig(), geometry=TINY)


@pytest.fixture
def small_config():
    return replace(EngineConfig(), geometry=SMALL)


@pytest.fixture
def desk_config():
    return replace(EngineConfig(), geometry=DESK)


def random_payload(rng, n, heads, raw=False):
    if raw:
        a = rng.uniform(0.1, 1.0, size=(heads, n, n))
        a /= a.sum(axis=2, keepdims=True)
        return AttentionPayload.from_raw(a.astype(np.float32))
    agg = rng.uniform(0.5, 1.5, size=n)
    agg *= (heads * n) / agg.sum()
    return AttentionPayload.from_aggregated(agg.astype(np.float32))


def random_record(rng, config, t, raw_attention=False):
    """A plan-valid segment record with random content."""
    geo = config.geometry
    plan = config.plan()
    blocks = []
    for key, n in plan.expected_blocks().items():
        blocks.append(
            RawBlock(
                block_id=BlockId(key.granularity, t, key.sub_index),
                token_count=n,
                payload=random_payload(rng, n, geo.num_heads, raw_attention),
                layer_keys=[rng.normal(size=(n, geo.concat_dim)).astype(np.float32) for _ in range(geo.num_layers)],
                layer_values=[rng.normal(size=(n, geo.concat_dim)).astype(np.float32) for _ in range(geo.num_layers)],
            )
        )
    start, end = config.time_span(t)
    record = SegmentRecord(segment_index=t, time_start=start, time_end=end, geometry=geo, blocks=blocks)
    record.blocks = record.canonical_blocks()
    return record


def ingest_records(records, config, store=None):
    plan = config.plan()
    store = store or Store(config.geometry, config.policy_snapshot())
    for record in records:
        validate_record(record, plan)
        store.append_segment(compress_segment(record, config.retention), record.segment_index)
    return store


def fill_store(rng, config, segments, raw_attention=False):
    records = [random_record(rng, config, t, raw_attention) for t in range(segments)]
    return ingest_records(records, config), records


# -- independent oracles (kept naive on purpose) ------------------------------


def dft_magnitude_mean_oracle(keys):
    """O(n^2) DFT via the explicit transform matrix, then magnitude mean."""
    m = np.asarray(keys, dtype=np.float64)
    n = m.shape[0]
    j = np.arange(n)
    w = np.exp(-2j * np.pi * np.outer(j, j) / n)
    return np.abs(w @ m).mean(axis=1)


def attention_indicator_oracle(raw, n, heads):
    """Literal triple loop over heads and query rows."""
    out = [0.0] * n
    for h in range(heads):
        for i in range(n):
            for k in range(n):
                out[k] += float(raw[h][i][k])
    return [x / (heads * n) for x in out]


def topk_oracle(scores, rho):
    """Full sort with explicit (score desc, index asc) tie-breaking."""
    n = len(scores)
    kappa = max(1, math.floor(rho * n))
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return sorted(order[:kappa])


def cosine_oracle(a, b):
    """fsum-based cosine; 0.0 for degenerate norms (retrieval convention)."""
    dot = math.fsum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(math.fsum(float(x) * float(x) for x in a))
    nb = math.sqrt(math.fsum(float(y) * float(y) for y in b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return dot / (na * nb)


def parallel_retrieval_oracle(query, store, asked_at, k, level):
    """Exhaustive scan + sort; returns the top-k block ids."""
    scored = [
        (b, cosine_oracle(query, b.summary))
        for b in store.blocks(level)
        if b.timestamp <= asked_at
    ]
    scored.sort(key=lambda bs: (-bs[1], bs[0].timestamp, bs[0].block_id))
    return [b.block_id for b, _ in scored[:k]]
