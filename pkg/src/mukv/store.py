"""Append-only multi-granularity block store.

One strictly-sequential writer, any number of readers. Snapshots are
immutable timestamp-bounded views. Persistence is a binary manifest plus one
slab file per granularity; every block region carries a CRC32 and the
manifest records offsets so single blocks can be read without scanning.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ALL_LEVELS, BlockId, GranularityLevel, ModelGeometry, mean_pool_rows
from .errors import (
    BadMagicError,
    ChecksumFailureError,
    DuplicateSegmentError,
    OutOfOrderSegmentError,
    TruncatedFileError,
    UnknownBlockError,
    ValidationError,
    VersionMismatchError,
)

MANIFEST_MAGIC = b"MUKV"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest"

_SLAB_NAMES = {
    GranularityLevel.PATCH: "patch.slab",
    GranularityLevel.FRAME: "frame.slab",
    GranularityLevel.SEGMENT: "segment.slab",
}


@dataclass(frozen=True)
class CompressedBlock:
    """A retained-token KV block at one granularity.

    layer_keys/layer_values hold one (kappa x C) float32 matrix per layer;
    summary is the mean of the retained last-layer keys.
    """

    block_id: BlockId
    timestamp: float
    retained_indices: np.ndarray
    layer_keys: tuple[np.ndarray, ...]
    layer_values: tuple[np.ndarray, ...]
    summary: np.ndarray
    fused_scores: np.ndarray

    @property
    def kappa(self) -> int:
        return int(self.retained_indices.shape[0])

    def check(self, geometry: ModelGeometry) -> None:
        """Recomputable invariants; used by tests and by load()."""
        c = geometry.concat_dim
        if len(self.layer_keys) != geometry.num_layers or len(self.layer_values) != geometry.num_layers:
            raise ValidationError(f"{self.block_id}: expected {geometry.num_layers} layers")
        for k, v in zip(self.layer_keys, self.layer_values):
            if k.shape != (self.kappa, c) or v.shape != (self.kappa, c):
                raise ValidationError(f"{self.block_id}: layer KV shape mismatch")
        if self.kappa > 1 and np.any(np.diff(self.retained_indices.astype(np.int64)) <= 0):
            raise ValidationError(f"{self.block_id}: retained indices not strictly ascending")
        recomputed = mean_pool_rows(self.layer_keys[-1])
        if not np.allclose(recomputed, self.summary, atol=1e-6):
            raise ValidationError(f"{self.block_id}: stored summary drifts from retained keys")

    def encode(self) -> bytes:
        parts = [
            struct.pack(
                "<BQIdI",
                int(self.block_id.granularity),
                self.block_id.segment_index,
                self.block_id.sub_index,
                float(self.timestamp),
                self.kappa,
            ),
            np.ascontiguousarray(self.retained_indices, dtype="<u4").tobytes(),
            np.ascontiguousarray(self.summary, dtype="<f4").tobytes(),
            np.ascontiguousarray(self.fused_scores, dtype="<f4").tobytes(),
        ]
        for k, v in zip(self.layer_keys, self.layer_values):
            parts.append(np.ascontiguousarray(k, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes, geometry: ModelGeometry) -> "CompressedBlock":
        c = geometry.concat_dim
        head = struct.Struct("<BQIdI")
        if len(buf) < head.size:
            raise TruncatedFileError("block frame shorter than its fixed header")
        gran, seg, sub, ts, kappa = head.unpack_from(buf, 0)
        offset = head.size
        need = kappa * 4 + c * 4 + kappa * 4 + geometry.num_layers * 2 * kappa * c * 4
        if len(buf) - offset != need:
            raise TruncatedFileError(
                f"block frame length {len(buf)} does not match kappa={kappa}"
            )

        def take(count, dtype):
            nonlocal offset
            nbytes = count * 4
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).copy()
            offset += nbytes
            return arr

        retained = take(kappa, "<u4").astype(np.uint32)
        summary = take(c, "<f4").astype(np.float32)
        scores = take(kappa, "<f4").astype(np.float32)
        keys, values = [], []
        for _ in range(geometry.num_layers):
            keys.append(take(kappa * c, "<f4").astype(np.float32).reshape(kappa, c))
            values.append(take(kappa * c, "<f4").astype(np.float32).reshape(kappa, c))
        return cls(
            block_id=BlockId(GranularityLevel(gran), seg, sub),
            timestamp=ts,
            retained_indices=retained,
            layer_keys=tuple(keys),
            layer_values=tuple(values),
            summary=summary,
            fused_scores=scores,
        )


@dataclass(frozen=True)
class StoreView:
    """Immutable snapshot: exactly the blocks with timestamp <= the cutoff."""

    geometry: ModelGeometry
    cutoff: float
    blocks: dict[GranularityLevel, tuple[CompressedBlock, ...]]

    def level(self, level: GranularityLevel) -> tuple[CompressedBlock, ...]:
        return self.blocks.get(level, ())

    @property
    def block_count(self) -> int:
        return sum(len(v) for v in self.blocks.values())


@dataclass
class StoreStats:
    """Memory accounting report."""

    segments: int
    frames: int
    block_counts: dict[GranularityLevel, int]
    token_counts: dict[GranularityLevel, int]
    total_tokens: int
    tokens_per_300_frames: float
    estimated_bytes: int

    def to_dict(self) -> dict:
        return {
            "segments": self.segments,
            "frames": self.frames,
            "blocks": {g.label: self.block_counts[g] for g in ALL_LEVELS},
            "tokens": {g.label: self.token_counts[g] for g in ALL_LEVELS},
            "total_tokens": self.total_tokens,
            "tokens_per_300_frames": self.tokens_per_300_frames,
            "estimated_bytes": self.estimated_bytes,
        }


@dataclass(frozen=True)
class _ManifestEntry:
    block_id: BlockId
    timestamp: float
    offset: int
    length: int
    crc: int


class Store:
    """Append-only store of CompressedBlocks with snapshot isolation.

    policy is an opaque JSON-able snapshot of the configuration that filled
    the store; it rides along in the manifest for provenance.
    """

    def __init__(self, geometry: ModelGeometry, policy: dict | None = None):
        self.geometry = geometry
        self.policy = dict(policy or {})
        self.segment_count = 0
        self._blocks: dict[GranularityLevel, list[CompressedBlock]] = {g: [] for g in ALL_LEVELS}
        self._timestamps: dict[GranularityLevel, list[float]] = {g: [] for g in ALL_LEVELS}
        self._index: dict[BlockId, CompressedBlock] = {}

    # -- writing ---------------------------------------------------------

    def append_segment(self, blocks: list[CompressedBlock], t: int) -> None:
        """Append one segment's blocks; t must be the next segment index."""
        if t < self.segment_count:
            raise DuplicateSegmentError(f"segment {t} already ingested (next is {self.segment_count})")
        if t > self.segment_count:
            raise OutOfOrderSegmentError(f"segment {t} arrived before segment {self.segment_count}")
        for block in blocks:
            if block.block_id.segment_index != t:
                raise ValidationError(f"block {block.block_id} does not belong to segment {t}")
            if block.block_id in self._index:
                raise ValidationError(f"block {block.block_id} appended twice")
        for block in sorted(blocks, key=lambda b: b.block_id):
            level = block.block_id.granularity
            prior = self._timestamps[level]
            if prior and block.timestamp < prior[-1]:
                raise ValidationError(f"block {block.block_id} breaks timestamp monotonicity")
            self._blocks[level].append(block)
            prior.append(block.timestamp)
            self._index[block.block_id] = block
        self.segment_count = t + 1

    # -- reading ---------------------------------------------------------

    def snapshot(self, t_query: float) -> StoreView:
        """Immutable view of every block with timestamp <= t_query."""
        import bisect

        out = {}
        for level in ALL_LEVELS:
            n = bisect.bisect_right(self._timestamps[level], t_query)
            out[level] = tuple(self._blocks[level][:n])
        return StoreView(geometry=self.geometry, cutoff=t_query, blocks=out)

    def find(self, block_id: BlockId) -> CompressedBlock | None:
        return self._index.get(block_id)

    def blocks(self, level: GranularityLevel) -> tuple[CompressedBlock, ...]:
        return tuple(self._blocks[level])

    def rolling_context(
        self,
        level: GranularityLevel,
        t: int,
        window: int | None = None,
    ) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer concatenated retained KV at one granularity up to segment t-1.

        window, when given, keeps only the last `window` blocks. Used to
        condition a segment-t prefill on the compressed history.
        """
        if t > self.segment_count:
            raise ValidationError(f"segment {t} not ingested yet (have {self.segment_count})")
        chosen = [b for b in self._blocks[level] if b.block_id.segment_index < t]
        if window is not None:
            chosen = chosen[-window:]
        c = self.geometry.concat_dim
        empty = np.zeros((0, c), dtype=np.float32)
        out = []
        for layer in range(self.geometry.num_layers):
            if chosen:
                k = np.concatenate([b.layer_keys[layer] for b in chosen], axis=0)
                v = np.concatenate([b.layer_values[layer] for b in chosen], axis=0)
            else:
                k, v = empty, empty
            out.append((k, v))
        return out

    @property
    def total_tokens(self) -> int:
        return sum(b.kappa for blocks in self._blocks.values() for b in blocks)

    def stats(self) -> StoreStats:
        block_counts = {g: len(self._blocks[g]) for g in ALL_LEVELS}
        token_counts = {g: sum(b.kappa for b in self._blocks[g]) for g in ALL_LEVELS}
        total = sum(token_counts.values())
        frames = self.segment_count * self.geometry.frames_per_segment
        per_300 = total / frames * 300.0 if frames else 0.0
        geo = self.geometry
        return StoreStats(
            segments=self.segment_count,
            frames=frames,
            block_counts=block_counts,
            token_counts=token_counts,
            total_tokens=total,
            tokens_per_300_frames=per_300,
            estimated_bytes=total * geo.num_layers * 2 * geo.concat_dim * 4,
        )

    # -- persistence -----------------------------------------------------

    def persist(self, path: str | Path) -> None:
        """Write manifest + slabs; requires a quiescent writer."""
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        entries: dict[GranularityLevel, list[_ManifestEntry]] = {}
        for level in ALL_LEVELS:
            offset = 0
            level_entries = []
            with open(root / _SLAB_NAMES[level], "wb") as slab:
                for block in self._blocks[level]:
                    frame = block.encode()
                    slab.write(frame)
                    level_entries.append(
                        _ManifestEntry(
                            block_id=block.block_id,
                            timestamp=block.timestamp,
                            offset=offset,
                            length=len(frame),
                            crc=zlib.crc32(frame),
                        )
                    )
                    offset += len(frame)
            entries[level] = level_entries
        (root / MANIFEST_NAME).write_bytes(self._encode_manifest(entries))

    def _encode_manifest(self, entries: dict[GranularityLevel, list[_ManifestEntry]]) -> bytes:
        geo = self.geometry
        policy_blob = json.dumps(self.policy, sort_keys=True, separators=(",", ":")).encode()
        parts = [
            MANIFEST_MAGIC,
            struct.pack("<I", FORMAT_VERSION),
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
            struct.pack("<Q", self.segment_count),
            struct.pack("<I", len(policy_blob)),
            policy_blob,
        ]
        for level in ALL_LEVELS:
            parts.append(struct.pack("<Q", len(entries[level])))
            for e in entries[level]:
                parts.append(
                    struct.pack(
                        "<BQIdQQI",
                        int(e.block_id.granularity),
                        e.block_id.segment_index,
                        e.block_id.sub_index,
                        e.timestamp,
                        e.offset,
                        e.length,
                        e.crc,
                    )
                )
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @staticmethod
    def _decode_manifest(data: bytes) -> tuple[ModelGeometry, int, dict, dict[GranularityLevel, list[_ManifestEntry]]]:
        if len(data) < 4:
            raise TruncatedFileError("manifest shorter than its magic")
        if data[:4] != MANIFEST_MAGIC:
            raise BadMagicError(f"manifest magic {data[:4]!r} is not {MANIFEST_MAGIC!r}")
        if len(data) < 8:
            raise TruncatedFileError("manifest truncated before version")
        if zlib.crc32(data[:-4]) != struct.unpack_from("<I", data, len(data) - 4)[0]:
            raise ChecksumFailureError("manifest checksum mismatch")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"manifest version {version}, expected {FORMAT_VERSION}")
        offset = 8
        layers, heads, head_dim, concat, p, f, s = struct.unpack_from("<7I", data, offset)
        offset += 28
        geometry = ModelGeometry(layers, heads, head_dim, p, f, s)
        if geometry.concat_dim != concat:
            raise ChecksumFailureError("manifest geometry echo is inconsistent (C != H*D)")
        (segment_count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        (policy_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + policy_len > len(data) - 4:
            raise TruncatedFileError("manifest policy blob overruns the file")
        policy = json.loads(data[offset : offset + policy_len].decode()) if policy_len else {}
        offset += policy_len
        entry = struct.Struct("<BQIdQQI")
        entries: dict[GranularityLevel, list[_ManifestEntry]] = {}
        for level in ALL_LEVELS:
            if offset + 8 > len(data) - 4:
                raise TruncatedFileError("manifest block table truncated")
            (count,) = struct.unpack_from("<Q", data, offset)
            offset += 8
            if offset + count * entry.size > len(data) - 4:
                raise TruncatedFileError("manifest block table truncated")
            level_entries = []
            prev_end = -1
            for _ in range(count):
                gran, seg, sub, ts, off, length, crc = entry.unpack_from(data, offset)
                offset += entry.size
                if off <= prev_end:
                    raise ChecksumFailureError("manifest offsets are not strictly increasing")
                prev_end = off
                level_entries.append(
                    _ManifestEntry(BlockId(GranularityLevel(gran), seg, sub), ts, off, length, crc)
                )
            entries[level] = level_entries
        return geometry, segment_count, policy, entries

    @classmethod
    def load(cls, path: str | Path) -> "Store":
        """Read the whole store back, verifying every block checksum."""
        root = Path(path)
        manifest_path = root / MANIFEST_NAME
        if not manifest_path.exists():
            raise TruncatedFileError(f"no manifest at {manifest_path}")
        geometry, segment_count, policy, entries = cls._decode_manifest(manifest_path.read_bytes())
        store = cls(geometry, policy)
        for level in ALL_LEVELS:
            slab = (root / _SLAB_NAMES[level]).read_bytes() if entries[level] else b""
            for e in entries[level]:
                if e.offset + e.length > len(slab):
                    raise TruncatedFileError(f"slab for {level.label} ends inside block {e.block_id}")
                frame = slab[e.offset : e.offset + e.length]
                if zlib.crc32(frame) != e.crc:
                    raise ChecksumFailureError(f"checksum mismatch for block {e.block_id}")
                block = CompressedBlock.decode(frame, geometry)
                if block.block_id != e.block_id:
                    raise ChecksumFailureError(f"slab block id {block.block_id} != manifest {e.block_id}")
                store._blocks[level].append(block)
                store._timestamps[level].append(block.timestamp)
                store._index[block.block_id] = block
        store.segment_count = segment_count
        return store

    @classmethod
    def load_block(cls, path: str | Path, block_id: BlockId) -> CompressedBlock:
        """Random access to a single block via manifest offsets."""
        root = Path(path)
        geometry, _, _, entries = cls._decode_manifest((root / MANIFEST_NAME).read_bytes())
        for e in entries[block_id.granularity]:
            if e.block_id == block_id:
                with open(root / _SLAB_NAMES[block_id.granularity], "rb") as slab:
                    slab.seek(e.offset)
                    frame = slab.read(e.length)
                if len(frame) != e.length:
                    raise TruncatedFileError(f"slab ends inside block {block_id}")
                if zlib.crc32(frame) != e.crc:
                    raise ChecksumFailureError(f"checksum mismatch for block {block_id}")
                return CompressedBlock.decode(frame, geometry)
        raise UnknownBlockError(f"no block {block_id} in store at {root}")
