"""Streaming multi-granularity KV-cache engine.

Stores transformer KV blocks at patch/frame/segment scale, prunes them with
fused attention + frequency scores, and serves timestamp-constrained queries
through two-stage retrieval, returning an assembled per-layer KV context.
"""

from .config import EngineConfig, default_geometry
from .core import (
    ALL_LEVELS,
    BlockId,
    GranularityLevel,
    ModelGeometry,
    PerLevel,
    cosine,
    mean_pool_rows,
    minmax_normalize,
)
from .dcp import (
    AttentionPayload,
    IndicatorMode,
    PayloadKind,
    RetentionPolicy,
    attention_indicator,
    compress_block,
    compress_segment,
    frequency_indicator,
    fuse_scores,
    select_topk,
)
from .granularity import Coverage, GranularityPlan, build_plan, validate_record
from .retrieval import (
    ContextKv,
    QuestionRecord,
    RetrievalConfig,
    RetrievalMode,
    RetrievalResult,
    assemble_context,
    question_embedding,
    retrieve,
)
from .store import CompressedBlock, Store, StoreView
from .wire import (
    RawBlock,
    SegmentRecord,
    decode_context,
    decode_question,
    decode_segment,
    decode_stream,
    encode_context,
    encode_question,
    encode_segment,
)

__version__ = "0.1.0"
