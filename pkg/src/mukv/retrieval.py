"""Two-stage semi-hierarchical retrieval over a store snapshot.

Stage 1 scores every block's summary against the pooled question embedding
by cosine, independently per granularity, keeping the top 2k candidates.
Stage 2 blends each candidate's score with its alignment to a global query
averaged from the top segment summaries, then truncates to k. Parallel and
fully hierarchical modes are kept as baselines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import ALL_LEVELS, BlockId, GranularityLevel, PerLevel, cosine, mean_pool_rows
from .errors import (
    EmptyMatrixError,
    EmptyQuestionError,
    MissingBlockError,
    NoSegmentsError,
    ValidationError,
    ZeroVectorError,
)
from .store import CompressedBlock, Store, StoreView

logger = logging.getLogger(__name__)


class RetrievalMode(str, Enum):
    PARALLEL = "parallel"
    HIERARCHICAL = "hierarchical"
    SEMI_HIERARCHICAL = "semi_hierarchical"


@dataclass(frozen=True)
class RetrievalConfig:
    """Budgets and blend factors per granularity.

    The coherence factor for the segment level is pinned to 0: global
    queries are derived from segment summaries, so reranking them against
    themselves would be circular.
    """

    k: PerLevel = PerLevel(20, 32, 12)
    coherence: PerLevel = PerLevel(0.3, 0.3, 0.0)
    global_n: int = 5
    mode: RetrievalMode = RetrievalMode.SEMI_HIERARCHICAL
    hier_top_segments: int = 5
    levels: tuple[GranularityLevel, ...] = ALL_LEVELS

    def __post_init__(self):
        if self.coherence.get(GranularityLevel.SEGMENT) != 0.0:
            raise ValueError("segment-level coherence factor must be 0")
        for level in self.levels:
            k = self.k.get(level)
            if int(k) < 1:
                raise ValueError(f"k[{level.label}]={k} must be >= 1")
            lam = self.coherence.get(level)
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"coherence[{level.label}]={lam} outside [0, 1]")
        if self.global_n < 1:
            raise ValueError("global_n must be >= 1")
        if self.hier_top_segments < 1:
            raise ValueError("hier_top_segments must be >= 1")

    def to_dict(self) -> dict:
        return {
            "k": [int(x) for x in self.k.as_tuple()],
            "lambda": list(self.coherence.as_tuple()),
            "global_n": self.global_n,
            "mode": self.mode.value,
            "hier_top_segments": self.hier_top_segments,
            "levels": [lv.label for lv in self.levels],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RetrievalConfig":
        levels = tuple(
            GranularityLevel.from_label(x) for x in data.get("levels", [lv.label for lv in ALL_LEVELS])
        )
        return cls(
            k=PerLevel.of(data.get("k", [20, 32, 12])),
            coherence=PerLevel.of(data.get("lambda", [0.3, 0.3, 0.0])),
            global_n=int(data.get("global_n", 5)),
            mode=RetrievalMode(data.get("mode", "semi_hierarchical")),
            hier_top_segments=int(data.get("hier_top_segments", 5)),
            levels=levels,
        )


@dataclass(frozen=True)
class QuestionRecord:
    """Pooled-before-scoring question query tokens plus the ask timestamp."""

    query_tokens: np.ndarray  # N_q x C float32
    asked_at: float


@dataclass(frozen=True)
class SelectedBlock:
    block: CompressedBlock
    stage1: float
    stage2: float

    @property
    def block_id(self) -> BlockId:
        return self.block.block_id


@dataclass
class RetrievalResult:
    """Per-granularity selections, sorted by final score (ties: earlier first)."""

    mode: RetrievalMode
    selections: dict[GranularityLevel, list[SelectedBlock]] = field(default_factory=dict)
    global_query: np.ndarray | None = None

    def level(self, level: GranularityLevel) -> list[SelectedBlock]:
        return self.selections.get(level, [])

    def all_blocks(self) -> list[SelectedBlock]:
        return [sb for level in ALL_LEVELS for sb in self.selections.get(level, [])]

    def block_ids(self, level: GranularityLevel) -> list[BlockId]:
        return [sb.block_id for sb in self.level(level)]


@dataclass(frozen=True)
class ProvenanceSpan:
    block_id: BlockId
    timestamp: float
    row_start: int
    row_end: int


@dataclass
class ContextKv:
    """Per-layer concatenated retained KV handed to a downstream decoder."""

    layer_keys: list[np.ndarray]
    layer_values: list[np.ndarray]
    provenance: list[ProvenanceSpan]

    @property
    def rows(self) -> int:
        return int(self.layer_keys[0].shape[0]) if self.layer_keys else 0


def question_embedding(record: QuestionRecord) -> np.ndarray:
    """Row mean of the question query tokens."""
    tokens = np.asarray(record.query_tokens)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise EmptyQuestionError(f"question needs at least one query token, got shape {tokens.shape}")
    if not np.all(np.isfinite(tokens)):
        raise ValidationError("question query tokens contain non-finite entries")
    try:
        return mean_pool_rows(tokens)
    except EmptyMatrixError as exc:  # pragma: no cover - guarded above
        raise EmptyQuestionError(str(exc)) from exc


def _score(query, block: CompressedBlock) -> float:
    try:
        return cosine(query, block.summary)
    except ZeroVectorError:
        logger.debug("degenerate summary or query at %s, scoring 0", block.block_id)
        return 0.0


def _ranked(candidates: list[tuple[CompressedBlock, float]]) -> list[tuple[CompressedBlock, float]]:
    return sorted(candidates, key=lambda bs: (-bs[1], bs[0].timestamp, bs[0].block_id))


def stage1_parallel(
    query, view: StoreView, config: RetrievalConfig
) -> dict[GranularityLevel, list[tuple[CompressedBlock, float]]]:
    """Cosine-score all blocks per granularity; keep the top 2k with scores."""
    out: dict[GranularityLevel, list[tuple[CompressedBlock, float]]] = {}
    for level in config.levels:
        scored = [(b, _score(query, b)) for b in view.level(level)]
        out[level] = _ranked(scored)[: 2 * int(config.k.get(level))]
    return out


def global_query(segment_candidates: list[tuple[CompressedBlock, float]], n: int) -> np.ndarray:
    """Mean of the top-min(n, available) segment summaries from stage 1."""
    if not segment_candidates:
        raise NoSegmentsError("no segment-level candidates to derive a global query")
    top = segment_candidates[: min(n, len(segment_candidates))]
    return np.stack([b.summary for b, _ in top]).astype(np.float64).mean(axis=0)


def stage2_rerank(
    candidates: dict[GranularityLevel, list[tuple[CompressedBlock, float]]],
    global_q,
    config: RetrievalConfig,
) -> RetrievalResult:
    """Blend stage-1 scores with alignment to the global query, keep top k.

    With coherence 0 at a granularity the rerank is an exact truncation of
    its stage-1 list (always the case for segments).
    """
    result = RetrievalResult(mode=RetrievalMode.SEMI_HIERARCHICAL, global_query=np.asarray(global_q))
    for level, cands in candidates.items():
        lam = float(config.coherence.get(level))
        rescored = []
        for block, s in cands:
            if lam == 0.0:
                final = s
            else:
                gamma = _score(global_q, block)
                final = (1.0 - lam) * s + lam * gamma
            rescored.append((block, s, final))
        rescored.sort(key=lambda t: (-t[2], t[0].timestamp, t[0].block_id))
        result.selections[level] = [
            SelectedBlock(block=b, stage1=s, stage2=f)
            for b, s, f in rescored[: int(config.k.get(level))]
        ]
    return result


def _truncate_stage1(
    candidates: dict[GranularityLevel, list[tuple[CompressedBlock, float]]],
    config: RetrievalConfig,
    mode: RetrievalMode,
) -> RetrievalResult:
    result = RetrievalResult(mode=mode)
    for level, cands in candidates.items():
        result.selections[level] = [
            SelectedBlock(block=b, stage1=s, stage2=s) for b, s in cands[: int(config.k.get(level))]
        ]
    return result


def _retrieve_hierarchical(query, view: StoreView, config: RetrievalConfig) -> RetrievalResult:
    """Gate frame/patch candidates by the top segments, question as query throughout."""
    result = RetrievalResult(mode=RetrievalMode.HIERARCHICAL)
    segment_ranked = _ranked([(b, _score(query, b)) for b in view.level(GranularityLevel.SEGMENT)])
    gate = {b.block_id.segment_index for b, _ in segment_ranked[: config.hier_top_segments]}
    if GranularityLevel.SEGMENT in config.levels:
        result.selections[GranularityLevel.SEGMENT] = [
            SelectedBlock(block=b, stage1=s, stage2=s)
            for b, s in segment_ranked[: int(config.k.get(GranularityLevel.SEGMENT))]
        ]
    for level in (GranularityLevel.FRAME, GranularityLevel.PATCH):
        if level not in config.levels:
            continue
        children = [b for b in view.level(level) if b.block_id.segment_index in gate]
        ranked = _ranked([(b, _score(query, b)) for b in children])
        result.selections[level] = [
            SelectedBlock(block=b, stage1=s, stage2=s) for b, s in ranked[: int(config.k.get(level))]
        ]
    return result


def retrieve(record: QuestionRecord, store: Store, config: RetrievalConfig) -> RetrievalResult:
    """Snapshot at the ask time, then dispatch on the configured mode."""
    view = store.snapshot(record.asked_at)
    query = question_embedding(record)
    if config.mode is RetrievalMode.HIERARCHICAL:
        return _retrieve_hierarchical(query, view, config)
    candidates = stage1_parallel(query, view, config)
    if config.mode is RetrievalMode.PARALLEL:
        return _truncate_stage1(candidates, config, RetrievalMode.PARALLEL)
    segment_candidates = candidates.get(GranularityLevel.SEGMENT, [])
    if not segment_candidates:
        logger.info("no segment candidates at t=%s; degrading to parallel", record.asked_at)
        return _truncate_stage1(candidates, config, RetrievalMode.SEMI_HIERARCHICAL)
    g = global_query(segment_candidates, config.global_n)
    return stage2_rerank(candidates, g, config)


def assemble_context(result: RetrievalResult, store: Store) -> ContextKv:
    """Concatenate selected blocks' per-layer KV in temporal order.

    Order: timestamp ascending, coarse before fine at equal timestamps, then
    sub index. Emits one provenance span per block; spans are disjoint and
    cover every row.
    """
    chosen: list[CompressedBlock] = []
    for sb in result.all_blocks():
        block = store.find(sb.block_id)
        if block is None:
            raise MissingBlockError(f"selected block {sb.block_id} is not in the store")
        chosen.append(block)
    chosen.sort(
        key=lambda b: (b.timestamp, -int(b.block_id.granularity), b.block_id.sub_index)
    )
    geo = store.geometry
    empty = np.zeros((0, geo.concat_dim), dtype=np.float32)
    layer_keys, layer_values = [], []
    for layer in range(geo.num_layers):
        if chosen:
            layer_keys.append(np.concatenate([b.layer_keys[layer] for b in chosen], axis=0))
            layer_values.append(np.concatenate([b.layer_values[layer] for b in chosen], axis=0))
        else:
            layer_keys.append(empty)
            layer_values.append(empty)
    provenance = []
    row = 0
    for block in chosen:
        provenance.append(
            ProvenanceSpan(
                block_id=block.block_id,
                timestamp=block.timestamp,
                row_start=row,
                row_end=row + block.kappa,
            )
        )
        row += block.kappa
    return ContextKv(layer_keys=layer_keys, layer_values=layer_values, provenance=provenance)
