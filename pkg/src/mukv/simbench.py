"""Synthetic streams with ground-truth relevance, plus a benchmark harness.

Streams plant a hidden query direction into the last-layer keys of relevant
segments so retrieval quality is checkable by construction; an optional
distractor block scores high against the question but low against the
stream's global direction, exercising the stage-2 demotion. Key sequences
realize a per-segment static/dynamic frequency profile.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import EngineConfig
from .core import ALL_LEVELS, BlockId, GranularityLevel, ModelGeometry
from .dcp import AttentionPayload, compress_segment
from .errors import LabelMismatchError
from .granularity import build_plan, validate_record
from .retrieval import QuestionRecord, RetrievalMode, RetrievalResult, assemble_context, retrieve
from .store import Store
from .wire import RawBlock, SegmentRecord

DYNAMIC_MODULATION = 0.8


@dataclass(frozen=True)
class DistractorSpec:
    """A patch block aligned to the question but not to the stream context.

    host_segment must not be relevant; target_sub_index names the patch
    inside the relevant segment that shares both signals.
    """

    host_segment: int
    host_sub_index: int = 0
    target_sub_index: int = 0

    def to_dict(self) -> dict:
        return {
            "host_segment": self.host_segment,
            "host_sub_index": self.host_sub_index,
            "target_sub_index": self.target_sub_index,
        }


@dataclass(frozen=True)
class SyntheticScenario:
    seed: int = 0
    num_segments: int = 8
    geometry: ModelGeometry = None  # type: ignore[assignment]
    relevant_segments: frozenset[int] = frozenset()
    distractor: DistractorSpec | None = None
    noise_sigma: float = 0.0
    frequency_profile: str = "mixed"  # static | dynamic | mixed
    raw_attention: bool = False

    def __post_init__(self):
        if self.geometry is None:
            from .config import default_geometry

            object.__setattr__(self, "geometry", default_geometry())
        if self.distractor is not None and self.distractor.host_segment in self.relevant_segments:
            raise ValueError("distractor host segment must be disjoint from relevant segments")
        if self.frequency_profile not in ("static", "dynamic", "mixed"):
            raise ValueError(f"unknown frequency profile {self.frequency_profile!r}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_segments": self.num_segments,
            "geometry": self.geometry.to_dict(),
            "relevant_segments": sorted(self.relevant_segments),
            "distractor": self.distractor.to_dict() if self.distractor else None,
            "noise_sigma": self.noise_sigma,
            "frequency_profile": self.frequency_profile,
            "raw_attention": self.raw_attention,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticScenario":
        distractor = data.get("distractor")
        return cls(
            seed=int(data.get("seed", 0)),
            num_segments=int(data["num_segments"]),
            geometry=ModelGeometry.from_dict(data["geometry"]) if "geometry" in data else None,
            relevant_segments=frozenset(int(x) for x in data.get("relevant_segments", [])),
            distractor=DistractorSpec(**distractor) if distractor else None,
            noise_sigma=float(data.get("noise_sigma", 0.0)),
            frequency_profile=str(data.get("frequency_profile", "mixed")),
            raw_attention=bool(data.get("raw_attention", False)),
        )

    @classmethod
    def from_file(cls, path) -> "SyntheticScenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _axis(c: int, i: int) -> np.ndarray:
    v = np.zeros(c, dtype=np.float64)
    v[i] = 1.0
    return v


def _orthogonal_direction(rng: np.random.Generator, c: int) -> np.ndarray:
    """Random unit direction with no component on the planted axes 0 and 1."""
    v = rng.normal(size=c)
    v[0] = 0.0
    v[1] = 0.0
    norm = np.linalg.norm(v)
    if norm < 1e-9:  # vanishing probability; retry deterministically
        v[2] = 1.0
        norm = 1.0
    return v / norm


def _segment_is_dynamic(profile: str, t: int) -> bool:
    if profile == "dynamic":
        return True
    if profile == "static":
        return False
    return t % 2 == 1


def _block_rows(rng, base: np.ndarray, n: int, modulation: float, sigma: float) -> np.ndarray:
    signs = np.cos(np.pi * np.arange(n))  # +1/-1 at the Nyquist rate
    rows = np.outer(1.0 + modulation * signs, base)
    if sigma > 0:
        rows = rows + sigma * rng.normal(size=rows.shape)
    return rows.astype(np.float32)


def _payload(rng, n: int, heads: int, raw: bool) -> AttentionPayload:
    if raw:
        a = rng.uniform(0.1, 1.0, size=(heads, n, n))
        a /= a.sum(axis=2, keepdims=True)
        return AttentionPayload.from_raw(a.astype(np.float32))
    agg = rng.uniform(0.5, 1.5, size=n)
    agg *= (heads * n) / agg.sum()
    return AttentionPayload.from_aggregated(agg.astype(np.float32))


def gen_stream(
    scenario: SyntheticScenario, config: EngineConfig
) -> tuple[list[SegmentRecord], list[QuestionRecord], list[frozenset[BlockId]]]:
    """Deterministic per seed. Returns (records, questions, labels per question).

    Structural knobs (fps, coverage, enabled levels) come from the config;
    the scenario supplies geometry and content.
    """
    geo = scenario.geometry
    if geo.concat_dim < 4:
        raise ValueError("scenario geometry needs concat_dim >= 4 for planted directions")
    cfg = replace(config, geometry=geo)
    plan = cfg.plan()
    expected = plan.expected_blocks()
    c = geo.concat_dim

    global_dir = _axis(c, 0)
    question_dir = _axis(c, 1)
    # Shares both the global signal and the question signal; unit norm.
    consistent_dir = 0.9 * global_dir + math.sqrt(0.19) * question_dir

    records = []
    for t in range(scenario.num_segments):
        rng = np.random.default_rng([scenario.seed, 1000 + t])
        modulation = DYNAMIC_MODULATION if _segment_is_dynamic(scenario.frequency_profile, t) else 0.0
        relevant = t in scenario.relevant_segments
        fallback = global_dir if relevant else _orthogonal_direction(rng, c)

        blocks = []
        for key, n in expected.items():
            level, sub = key.granularity, key.sub_index
            if scenario.distractor is not None:
                d = scenario.distractor
                if level is GranularityLevel.PATCH:
                    if t == d.host_segment and sub == d.host_sub_index:
                        base = question_dir
                    elif relevant and sub == d.target_sub_index:
                        base = consistent_dir
                    else:
                        base = _orthogonal_direction(rng, c)
                else:
                    # Coherent global context: every segment/frame summary
                    # points along the stream direction.
                    base = global_dir
            else:
                base = fallback
            last_keys = _block_rows(rng, base, n, modulation, scenario.noise_sigma)
            layer_keys, layer_values = [], []
            for layer in range(geo.num_layers):
                if layer == geo.num_layers - 1:
                    layer_keys.append(last_keys)
                else:
                    layer_keys.append((0.1 * rng.normal(size=(n, c))).astype(np.float32))
                layer_values.append((0.1 * rng.normal(size=(n, c))).astype(np.float32))
            blocks.append(
                RawBlock(
                    block_id=BlockId(level, t, sub),
                    token_count=n,
                    payload=_payload(rng, n, geo.num_heads, scenario.raw_attention),
                    layer_keys=layer_keys,
                    layer_values=layer_values,
                )
            )
        start, end = cfg.time_span(t)
        record = SegmentRecord(
            segment_index=t, time_start=start, time_end=end, geometry=geo, blocks=blocks
        )
        record.blocks = record.canonical_blocks()
        records.append(record)

    asked_at = scenario.num_segments * cfg.segment_seconds + 1.0
    if scenario.distractor is not None:
        qdir = math.sqrt(0.19) * global_dir + 0.9 * question_dir
    else:
        qdir = global_dir
    tokens = np.tile(qdir.astype(np.float32), (3, 1))
    questions = [QuestionRecord(query_tokens=tokens, asked_at=asked_at)]
    relevant_blocks = frozenset(
        BlockId(key.granularity, t, key.sub_index)
        for t in scenario.relevant_segments
        for key in expected
    )
    labels = [relevant_blocks]
    return records, questions, labels


def write_stream(records: list[SegmentRecord], path) -> None:
    from .wire import encode_segment

    with open(path, "wb") as fh:
        for record in records:
            fh.write(encode_segment(record))


# -- recall ------------------------------------------------------------------


@dataclass
class RecallReport:
    """Exact-fraction recall of relevant blocks inside the selections."""

    per_level: dict[GranularityLevel, Fraction | None]
    overall: Fraction | None

    def to_dict(self) -> dict:
        def fmt(x):
            return None if x is None else [x.numerator, x.denominator]

        return {
            "per_level": {g.label: fmt(self.per_level[g]) for g in ALL_LEVELS},
            "overall": fmt(self.overall),
        }


def eval_recall(results: list[RetrievalResult], labels: list[frozenset[BlockId]]) -> RecallReport:
    """Fraction of ground-truth-relevant blocks appearing in the selections."""
    if len(results) != len(labels):
        raise LabelMismatchError(f"{len(results)} results but {len(labels)} label sets")
    hits = {g: 0 for g in ALL_LEVELS}
    totals = {g: 0 for g in ALL_LEVELS}
    for result, relevant in zip(results, labels):
        for level in ALL_LEVELS:
            level_relevant = {b for b in relevant if b.granularity is level}
            totals[level] += len(level_relevant)
            selected = set(result.block_ids(level))
            hits[level] += len(level_relevant & selected)
    per_level = {
        g: (Fraction(hits[g], totals[g]) if totals[g] else None) for g in ALL_LEVELS
    }
    total_relevant = sum(totals.values())
    overall = Fraction(sum(hits.values()), total_relevant) if total_relevant else None
    return RecallReport(per_level=per_level, overall=overall)


# -- benchmark ---------------------------------------------------------------

BENCH_COLUMNS = [
    "sweep",
    "point",
    "stored_tokens",
    "context_rows",
    "recall_parallel",
    "recall_hierarchical",
    "recall_semi_hierarchical",
    "ingest_seconds",
    "query_seconds",
]


@dataclass
class BenchRow:
    sweep: str
    point: str
    stored_tokens: int
    context_rows: int
    recall: dict[RetrievalMode, Fraction | None]
    ingest_seconds: float
    query_seconds: float

    def as_csv_row(self) -> list:
        def fmt(x):
            return "" if x is None else f"{float(x):.6f}"

        return [
            self.sweep,
            self.point,
            self.stored_tokens,
            self.context_rows,
            fmt(self.recall[RetrievalMode.PARALLEL]),
            fmt(self.recall[RetrievalMode.HIERARCHICAL]),
            fmt(self.recall[RetrievalMode.SEMI_HIERARCHICAL]),
            f"{self.ingest_seconds:.4f}",
            f"{self.query_seconds:.4f}",
        ]


def parse_sweep(spec: str) -> tuple[str, list[str]]:
    """'rho=1.0,0.5,0.25' -> ('rho', ['1.0', '0.5', '0.25']); '' -> ('', [])."""
    spec = spec.strip()
    if not spec:
        return "", []
    if "=" not in spec:
        raise ValueError(f"sweep spec must look like 'rho=1.0,0.5', got {spec!r}")
    kind, _, points = spec.partition("=")
    kind = kind.strip().lower()
    if kind not in ("rho", "alpha", "lambda", "mode"):
        raise ValueError(f"unknown sweep dimension {kind!r}")
    values = [p.strip() for p in points.split(",") if p.strip()]
    return kind, values


def _parse_triple(point: str) -> tuple[float, float, float]:
    parts = point.split(":")
    if len(parts) == 1:
        v = float(parts[0])
        return (v, v, v)
    if len(parts) == 3:
        return tuple(float(x) for x in parts)  # type: ignore[return-value]
    raise ValueError(f"expected a value or p:f:s triple, got {point!r}")


def apply_sweep_point(config: EngineConfig, kind: str, point: str) -> EngineConfig:
    if kind == "rho":
        return config.with_overrides(rho=_parse_triple(point))
    if kind == "alpha":
        return config.with_overrides(alpha=_parse_triple(point))
    if kind == "lambda":
        parts = _parse_triple(point)
        if ":" not in point:
            parts = (parts[0], parts[1], 0.0)  # segment coherence is pinned to 0
        return config.with_overrides(coherence=parts)
    if kind == "mode":
        return config.with_overrides(mode=point)
    raise ValueError(f"unknown sweep dimension {kind!r}")


def run_bench(config: EngineConfig, scenario: SyntheticScenario, sweep_spec: str) -> list[BenchRow]:
    """One row per sweep point; recall evaluated under all three modes.

    Token counts are the device-independent metric; wall-clock columns are
    informational and never part of pass/fail checks.
    """
    kind, points = parse_sweep(sweep_spec)
    rows = []
    for point in points:
        cfg = apply_sweep_point(replace(config, geometry=scenario.geometry), kind, point)
        records, questions, labels = gen_stream(scenario, cfg)
        plan = cfg.plan()
        store = Store(cfg.geometry, cfg.policy_snapshot())
        t0 = time.perf_counter()
        for record in records:
            validate_record(record, plan)
            store.append_segment(compress_segment(record, cfg.retention), record.segment_index)
        ingest_seconds = time.perf_counter() - t0

        recall: dict[RetrievalMode, Fraction | None] = {}
        query_seconds = 0.0
        context_rows = 0
        for mode in RetrievalMode:
            mode_cfg = replace(cfg.retrieval, mode=mode)
            t1 = time.perf_counter()
            results = [retrieve(q, store, mode_cfg) for q in questions]
            elapsed = time.perf_counter() - t1
            recall[mode] = eval_recall(results, labels).overall
            if mode is cfg.retrieval.mode:
                query_seconds = elapsed
                if results:
                    context_rows = assemble_context(results[0], store).rows
        rows.append(
            BenchRow(
                sweep=kind,
                point=point,
                stored_tokens=store.total_tokens,
                context_rows=context_rows,
                recall=recall,
                ingest_seconds=ingest_seconds,
                query_seconds=query_seconds,
            )
        )
    return rows


def render_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(BENCH_COLUMNS)
    for row in rows:
        writer.writerow(row.as_csv_row())
    return buf.getvalue()


def render_table(rows: list[BenchRow]) -> str:
    table = [BENCH_COLUMNS] + [[str(x) for x in row.as_csv_row()] for row in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(BENCH_COLUMNS))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table]
    return "\n".join(lines)
