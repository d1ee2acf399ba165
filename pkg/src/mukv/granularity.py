"""Partitioning of a segment's token grid into segment/frame/patch blocks,
and validation of ingested records against that plan.

Coverage selects whether frame/patch blocks exist for the middle frame only
(matching a per-segment summary reading) or for all frames (which is what
the default memory accounting assumes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ALL_LEVELS, BlockId, GranularityLevel, ModelGeometry
from .dcp import PayloadKind
from .errors import (
    DuplicateBlockError,
    MissingBlockError,
    ShapeMismatchError,
    UnknownBlockError,
    ValidationError,
)
from .wire import SegmentRecord

RAW_ROW_SUM_TOL = 1e-3
AGGREGATED_SUM_TOL = 1e-2


class Coverage(str, Enum):
    MIDDLE_ONLY = "middle_only"
    ALL_FRAMES = "all_frames"


@dataclass(frozen=True)
class GranularityPlan:
    """Index partitioning of one segment's P*F token grid."""

    geometry: ModelGeometry
    coverage_frame: Coverage
    coverage_patch: Coverage
    levels: tuple[GranularityLevel, ...]
    segment_indices: tuple[int, ...]
    frame_blocks: tuple[tuple[int, tuple[int, ...]], ...]
    patch_blocks: tuple[tuple[int, int, tuple[int, ...]], ...]

    def expected_blocks(self) -> dict[BlockId, int]:
        """Block ids (segment index 0) -> token count, honoring enabled levels."""
        geo = self.geometry
        out: dict[BlockId, int] = {}
        if GranularityLevel.SEGMENT in self.levels:
            out[BlockId(GranularityLevel.SEGMENT, 0, 0)] = len(self.segment_indices)
        if GranularityLevel.FRAME in self.levels:
            for frame_id, indices in self.frame_blocks:
                out[BlockId(GranularityLevel.FRAME, 0, frame_id)] = len(indices)
        if GranularityLevel.PATCH in self.levels:
            for frame_id, sp, indices in self.patch_blocks:
                sub = frame_id * geo.super_patches_per_frame + sp
                out[BlockId(GranularityLevel.PATCH, 0, sub)] = len(indices)
        return out

    def tokens_per_segment(self) -> int:
        """Uncompressed token count one segment contributes across levels."""
        return sum(self.expected_blocks().values())


def _covered_frames(coverage: Coverage, frames: int) -> list[int]:
    if coverage is Coverage.MIDDLE_ONLY:
        return [frames // 2]
    return list(range(frames))


def build_plan(
    geometry: ModelGeometry,
    coverage_frame: Coverage = Coverage.ALL_FRAMES,
    coverage_patch: Coverage = Coverage.ALL_FRAMES,
    levels: tuple[GranularityLevel, ...] = ALL_LEVELS,
) -> GranularityPlan:
    """Deterministic plan; geometry invariants are checked by ModelGeometry."""
    p = geometry.patches_per_frame
    s = geometry.super_patches_per_frame
    size = geometry.super_patch_size
    frame_blocks = []
    for frame_id in _covered_frames(coverage_frame, geometry.frames_per_segment):
        base = frame_id * p
        frame_blocks.append((frame_id, tuple(range(base, base + p))))
    patch_blocks = []
    for frame_id in _covered_frames(coverage_patch, geometry.frames_per_segment):
        base = frame_id * p
        for sp in range(s):
            start = sp * size
            end = (sp + 1) * size if sp < s - 1 else p  # remainder joins the last super-patch
            patch_blocks.append((frame_id, sp, tuple(range(base + start, base + end))))
    return GranularityPlan(
        geometry=geometry,
        coverage_frame=coverage_frame,
        coverage_patch=coverage_patch,
        levels=tuple(levels),
        segment_indices=tuple(range(geometry.tokens_per_segment)),
        frame_blocks=tuple(frame_blocks),
        patch_blocks=tuple(patch_blocks),
    )


def _check_payload(block, heads: int) -> None:
    n = block.token_count
    payload = block.payload
    if payload.kind is PayloadKind.RAW:
        a = payload.raw
        if a is None or a.shape != (heads, n, n):
            got = None if a is None else a.shape
            raise ShapeMismatchError(
                f"{block.block_id}: raw attention expected ({heads}, {n}, {n}), got {got}"
            )
        if not np.all(np.isfinite(a)):
            raise ValidationError(f"{block.block_id}: raw attention has non-finite entries")
        row_sums = a.astype(np.float64).sum(axis=2)
        if not np.allclose(row_sums, 1.0, atol=RAW_ROW_SUM_TOL):
            worst = float(np.abs(row_sums - 1.0).max())
            raise ValidationError(
                f"{block.block_id}: attention rows must sum to 1 (worst drift {worst:.2e})"
            )
    else:
        agg = payload.aggregated
        if agg is None or agg.shape != (n,):
            got = None if agg is None else agg.shape
            raise ShapeMismatchError(
                f"{block.block_id}: aggregated attention expected ({n},), got {got}"
            )
        if not np.all(np.isfinite(agg)):
            raise ValidationError(f"{block.block_id}: aggregated attention has non-finite entries")
        if np.any(agg < 0):
            raise ValidationError(f"{block.block_id}: aggregated attention has negative entries")
        total = float(agg.astype(np.float64).sum())
        expected = float(heads * n)
        if abs(total - expected) > AGGREGATED_SUM_TOL * expected:
            raise ValidationError(
                f"{block.block_id}: aggregated attention sums to {total:.4f}, expected ~{expected}"
            )


def validate_record(record: SegmentRecord, plan: GranularityPlan) -> None:
    """Confirm a record's blocks cover the plan with the right shapes.

    Raises ShapeMismatchError, MissingBlockError, DuplicateBlockError,
    UnknownBlockError, or ValidationError naming the offending block.
    """
    geo = plan.geometry
    if record.geometry != geo:
        raise ShapeMismatchError(
            f"geometry echo {record.geometry} does not match the plan's {geo}"
        )
    if not (math.isfinite(record.time_start) and math.isfinite(record.time_end)):
        raise ValidationError("record time span has non-finite endpoints")
    if record.time_end <= record.time_start:
        raise ValidationError(
            f"record time span [{record.time_start}, {record.time_end}] is empty or reversed"
        )

    expected = plan.expected_blocks()
    seen: set[BlockId] = set()
    for block in record.blocks:
        bid = block.block_id
        if bid.segment_index != record.segment_index:
            raise ValidationError(
                f"{bid}: block belongs to segment {bid.segment_index}, record is {record.segment_index}"
            )
        key = BlockId(bid.granularity, 0, bid.sub_index)
        if key not in expected:
            raise UnknownBlockError(f"{bid}: not a block of the plan")
        if key in seen:
            raise DuplicateBlockError(f"{bid}: appears twice in the record")
        seen.add(key)

        want_n = expected[key]
        if block.token_count != want_n:
            raise ShapeMismatchError(
                f"{bid}: expected {want_n} tokens, got {block.token_count}"
            )
        if len(block.layer_keys) != geo.num_layers or len(block.layer_values) != geo.num_layers:
            raise ShapeMismatchError(
                f"{bid}: expected {geo.num_layers} layers, got "
                f"{len(block.layer_keys)}K/{len(block.layer_values)}V"
            )
        want_shape = (want_n, geo.concat_dim)
        for layer, (k, v) in enumerate(zip(block.layer_keys, block.layer_values)):
            for name, m in (("K", k), ("V", v)):
                if m.shape != want_shape:
                    raise ShapeMismatchError(
                        f"{bid}: layer {layer} {name} expected {want_shape}, got {m.shape}"
                    )
                if m.dtype != np.float32:
                    raise ShapeMismatchError(
                        f"{bid}: layer {layer} {name} must be float32, got {m.dtype}"
                    )
                if not np.all(np.isfinite(m)):
                    raise ValidationError(f"{bid}: layer {layer} {name} has non-finite entries")
        _check_payload(block, geo.num_heads)

    missing = set(expected) - seen
    if missing:
        worst = sorted(missing)[0]
        raise MissingBlockError(
            f"record for segment {record.segment_index} is missing "
            f"{BlockId(worst.granularity, record.segment_index, worst.sub_index)}"
            + (f" and {len(missing) - 1} more" if len(missing) > 1 else "")
        )
