"""Bit-exact binary codecs for segment records, question records, and
context exports.

All integers little-endian, all floats IEEE-754 binary32 little-endian
(timestamps binary64). Formats carry explicit lengths; the decoder verifies
every declared length against the remaining buffer before allocating.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import BlockId, GranularityLevel, ModelGeometry
from .dcp import AttentionPayload, PayloadKind
from .errors import (
    BadMagicError,
    FormatError,
    LengthOverflowError,
    TruncatedFileError,
    VersionMismatchError,
)
from .retrieval import ContextKv, ProvenanceSpan, QuestionRecord

WIRE_VERSION = 1
SEGMENT_MAGIC = b"MUKS"
QUESTION_MAGIC = b"MUKQ"
CONTEXT_MAGIC = b"MUKC"

_RECORD_PREFIX = struct.Struct("<4sIQ")  # magic, version, record length


@dataclass
class RawBlock:
    """One uncompressed granularity block as it arrives from a producer."""

    block_id: BlockId
    token_count: int
    payload: AttentionPayload
    layer_keys: list[np.ndarray]
    layer_values: list[np.ndarray]


@dataclass
class SegmentRecord:
    """Raw per-segment ingestion payload across all granularities."""

    segment_index: int
    time_start: float
    time_end: float
    geometry: ModelGeometry
    blocks: list[RawBlock]

    def canonical_blocks(self) -> list[RawBlock]:
        """Coarse-to-fine, then sub index; fixed so encoding is deterministic."""
        return sorted(self.blocks, key=lambda b: (-int(b.block_id.granularity), b.block_id.sub_index))


class _Reader:
    """Cursor with bounds checking over an immutable byte buffer."""

    def __init__(self, data: bytes, start: int = 0, end: int | None = None):
        self.data = data
        self.pos = start
        self.end = len(data) if end is None else end

    @property
    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, nbytes: int, what: str) -> bytes:
        if nbytes < 0 or nbytes > self.remaining:
            raise LengthOverflowError(
                f"{what}: need {nbytes} bytes, only {self.remaining} remain"
            )
        out = self.data[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        if s.size > self.remaining:
            raise TruncatedFileError(f"{what}: buffer ends inside a {s.size}-byte field")
        out = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return out

    def f32_array(self, count: int, what: str) -> np.ndarray:
        raw = self.take(count * 4, what)
        return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float32)


def _f32_bytes(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


# -- segment records (.muks) -------------------------------------------------


def encode_segment(record: SegmentRecord) -> bytes:
    geo = record.geometry
    body = [
        struct.pack("<Qdd", record.segment_index, record.time_start, record.time_end),
        struct.pack(
            "<7I",
            geo.num_layers,
            geo.num_heads,
            geo.head_dim,
            geo.concat_dim,
            geo.patches_per_frame,
            geo.frames_per_segment,
            geo.super_patches_per_frame,
        ),
        struct.pack("<I", len(record.blocks)),
    ]
    for block in record.canonical_blocks():
        body.append(
            struct.pack(
                "<BQII",
                int(block.block_id.granularity),
                block.block_id.segment_index,
                block.block_id.sub_index,
                block.token_count,
            )
        )
        body.append(struct.pack("<B", block.payload.kind.value))
        body.append(_f32_bytes(block.payload.data()))
        for k, v in zip(block.layer_keys, block.layer_values):
            body.append(_f32_bytes(k))
            body.append(_f32_bytes(v))
    payload = b"".join(body)
    total = _RECORD_PREFIX.size + len(payload)
    return _RECORD_PREFIX.pack(SEGMENT_MAGIC, WIRE_VERSION, total) + payload


def _read_prefix(reader: _Reader, magic: bytes, what: str) -> int:
    got_magic, version, record_len = reader.unpack("<4sIQ", what)
    if got_magic != magic:
        raise BadMagicError(f"{what}: magic {got_magic!r} is not {magic!r}")
    if version != WIRE_VERSION:
        raise VersionMismatchError(f"{what}: version {version}, expected {WIRE_VERSION}")
    return record_len


def decode_segment(data: bytes, offset: int = 0) -> tuple[SegmentRecord, int]:
    """Decode one segment record starting at offset; returns (record, next offset)."""
    reader = _Reader(data, offset)
    record_len = _read_prefix(reader, SEGMENT_MAGIC, "segment record")
    if record_len < _RECORD_PREFIX.size:
        raise FormatError(f"declared record length {record_len} smaller than its header")
    if offset + record_len > len(data):
        raise TruncatedFileError(
            f"declared record length {record_len} overruns the buffer ({len(data) - offset} bytes)"
        )
    reader.end = offset + record_len

    segment_index, t_start, t_end = reader.unpack("<Qdd", "segment header")
    layers, heads, head_dim, concat, p, f, s = reader.unpack("<7I", "geometry echo")
    try:
        geometry = ModelGeometry(layers, heads, head_dim, p, f, s)
    except Exception as exc:
        raise FormatError(f"geometry echo is not a valid geometry: {exc}") from exc
    if geometry.concat_dim != concat:
        raise FormatError(f"geometry echo C={concat} != H*D={geometry.concat_dim}")

    (n_blocks,) = reader.unpack("<I", "block count")
    blocks = []
    for i in range(n_blocks):
        gran, seg_echo, sub, n = reader.unpack("<BQII", f"block {i} header")
        try:
            level = GranularityLevel(gran)
        except ValueError:
            raise FormatError(f"block {i}: unknown granularity tag {gran}") from None
        (kind_tag,) = reader.unpack("<B", f"block {i} payload kind")
        if kind_tag == PayloadKind.RAW.value:
            flat = reader.f32_array(heads * n * n, f"block {i} raw attention")
            payload = AttentionPayload.from_raw(flat.reshape(heads, n, n))
        elif kind_tag == PayloadKind.AGGREGATED.value:
            payload = AttentionPayload.from_aggregated(reader.f32_array(n, f"block {i} aggregated attention"))
        else:
            raise FormatError(f"block {i}: unknown payload kind {kind_tag}")
        layer_keys, layer_values = [], []
        for layer in range(layers):
            layer_keys.append(reader.f32_array(n * concat, f"block {i} layer {layer} K").reshape(n, concat))
            layer_values.append(reader.f32_array(n * concat, f"block {i} layer {layer} V").reshape(n, concat))
        blocks.append(
            RawBlock(
                block_id=BlockId(level, seg_echo, sub),
                token_count=n,
                payload=payload,
                layer_keys=layer_keys,
                layer_values=layer_values,
            )
        )
    if reader.pos != reader.end:
        raise FormatError(
            f"record declares {record_len} bytes but parsing consumed {reader.pos - offset}"
        )
    record = SegmentRecord(
        segment_index=segment_index,
        time_start=t_start,
        time_end=t_end,
        geometry=geometry,
        blocks=blocks,
    )
    return record, reader.pos


def decode_stream(data: bytes) -> Iterator[SegmentRecord]:
    """Decode a stream of concatenated segment records."""
    offset = 0
    while offset < len(data):
        record, offset = decode_segment(data, offset)
        yield record


def scan_record_length(data: bytes, offset: int) -> int | None:
    """Best-effort declared length of the record at offset, for resync."""
    if offset + _RECORD_PREFIX.size > len(data):
        return None
    _, _, record_len = _RECORD_PREFIX.unpack_from(data, offset)
    if record_len < _RECORD_PREFIX.size:
        return None
    return record_len


# -- question records (.mukq) ------------------------------------------------


def encode_question(record: QuestionRecord) -> bytes:
    tokens = np.asarray(record.query_tokens, dtype=np.float32)
    if tokens.ndim != 2:
        raise ValueError(f"query tokens must be 2-D, got shape {tokens.shape}")
    n_q, c = tokens.shape
    body = struct.pack("<dII", record.asked_at, n_q, c) + _f32_bytes(tokens)
    total = _RECORD_PREFIX.size + len(body)
    return _RECORD_PREFIX.pack(QUESTION_MAGIC, WIRE_VERSION, total) + body


def decode_question(data: bytes) -> QuestionRecord:
    reader = _Reader(data)
    record_len = _read_prefix(reader, QUESTION_MAGIC, "question record")
    if record_len > len(data):
        raise TruncatedFileError(f"declared length {record_len} overruns the buffer")
    reader.end = record_len
    asked_at, n_q, c = reader.unpack("<dII", "question header")
    tokens = reader.f32_array(n_q * c, "question tokens").reshape(n_q, c)
    if reader.pos != reader.end:
        raise FormatError("question record has trailing bytes inside its declared length")
    return QuestionRecord(query_tokens=tokens, asked_at=asked_at)


# -- context exports (.mukc) -------------------------------------------------

_PROV_ENTRY = struct.Struct("<BQIdII")


def encode_context(context: ContextKv) -> bytes:
    layers = len(context.layer_keys)
    rows = context.rows
    c = int(context.layer_keys[0].shape[1]) if layers else 0
    body = [struct.pack("<IIII", layers, c, rows, len(context.provenance))]
    for span in context.provenance:
        body.append(
            _PROV_ENTRY.pack(
                int(span.block_id.granularity),
                span.block_id.segment_index,
                span.block_id.sub_index,
                span.timestamp,
                span.row_start,
                span.row_end,
            )
        )
    for k, v in zip(context.layer_keys, context.layer_values):
        body.append(struct.pack("<I", rows))
        body.append(_f32_bytes(k))
        body.append(_f32_bytes(v))
    payload = b"".join(body)
    total = _RECORD_PREFIX.size + len(payload)
    return _RECORD_PREFIX.pack(CONTEXT_MAGIC, WIRE_VERSION, total) + payload


def decode_context(data: bytes) -> ContextKv:
    reader = _Reader(data)
    record_len = _read_prefix(reader, CONTEXT_MAGIC, "context export")
    if record_len > len(data):
        raise TruncatedFileError(f"declared length {record_len} overruns the buffer")
    reader.end = record_len
    layers, c, rows, n_prov = reader.unpack("<IIII", "context header")
    provenance = []
    for i in range(n_prov):
        gran, seg, sub, ts, start, end = reader.unpack("<BQIdII", f"provenance {i}")
        try:
            level = GranularityLevel(gran)
        except ValueError:
            raise FormatError(f"provenance {i}: unknown granularity tag {gran}") from None
        provenance.append(ProvenanceSpan(BlockId(level, seg, sub), ts, start, end))
    layer_keys, layer_values = [], []
    for layer in range(layers):
        (rows_echo,) = reader.unpack("<I", f"layer {layer} frame")
        if rows_echo != rows:
            raise FormatError(f"layer {layer} frames {rows_echo} rows, header says {rows}")
        layer_keys.append(reader.f32_array(rows * c, f"layer {layer} K").reshape(rows, c))
        layer_values.append(reader.f32_array(rows * c, f"layer {layer} V").reshape(rows, c))
    if reader.pos != reader.end:
        raise FormatError("context export has trailing bytes inside its declared length")
    return ContextKv(layer_keys=layer_keys, layer_values=layer_values, provenance=provenance)
