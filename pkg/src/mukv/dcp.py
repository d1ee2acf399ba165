"""Dual-signal KV compression.

Two per-token indicators are fused into one retention score: an attention
indicator aggregated over the last layer's heads and query rows, and a
frequency indicator from a DFT of the key matrix along the token axis.
Frequency-bin row i is identified with token i; that axis choice is a fixed
engine constant, not a config knob.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from .core import BlockId, GranularityLevel, PerLevel, mean_pool_rows, minmax_normalize
from .errors import EmptyMatrixError, LengthMismatchError, ShapeMismatchError
from .store import CompressedBlock

if TYPE_CHECKING:
    from .wire import RawBlock, SegmentRecord


class PayloadKind(Enum):
    RAW = 0
    AGGREGATED = 1


@dataclass(frozen=True)
class AttentionPayload:
    """Last-layer attention for one block, raw (H x n x n) or pre-aggregated.

    Aggregated entries are sum_h sum_i A[h, i, j]; the adapter performs those
    inner sums so wire records stay O(n) instead of O(H * n^2).
    """

    kind: PayloadKind
    raw: np.ndarray | None = None
    aggregated: np.ndarray | None = None

    @classmethod
    def from_raw(cls, tensor: np.ndarray) -> "AttentionPayload":
        return cls(kind=PayloadKind.RAW, raw=np.asarray(tensor, dtype=np.float32))

    @classmethod
    def from_aggregated(cls, vector: np.ndarray) -> "AttentionPayload":
        return cls(kind=PayloadKind.AGGREGATED, aggregated=np.asarray(vector, dtype=np.float32))

    def data(self) -> np.ndarray:
        return self.raw if self.kind is PayloadKind.RAW else self.aggregated


class IndicatorMode(str, Enum):
    DUAL = "dual"
    ATTENTION_ONLY = "attention_only"
    FREQUENCY_ONLY = "frequency_only"
    RANDOM = "random"


@dataclass(frozen=True)
class RetentionPolicy:
    """Per-granularity compression knobs.

    attention_only/frequency_only are, by construction, dual fusion with the
    attention weight forced to 1 or 0.
    """

    alpha: PerLevel
    rho: PerLevel
    indicator_mode: IndicatorMode = IndicatorMode.DUAL
    keep_high_frequency: bool = True
    seed: int = 0

    def __post_init__(self):
        for level in GranularityLevel:
            a = self.alpha.get(level)
            r = self.rho.get(level)
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"alpha[{level.label}]={a} outside [0, 1]")
            if not 0.0 < r <= 1.0:
                raise ValueError(f"rho[{level.label}]={r} outside (0, 1]")

    def effective_alpha(self, level: GranularityLevel) -> float:
        if self.indicator_mode is IndicatorMode.ATTENTION_ONLY:
            return 1.0
        if self.indicator_mode is IndicatorMode.FREQUENCY_ONLY:
            return 0.0
        return float(self.alpha.get(level))

    def to_dict(self) -> dict:
        return {
            "alpha": list(self.alpha.as_tuple()),
            "rho": list(self.rho.as_tuple()),
            "indicator_mode": self.indicator_mode.value,
            "keep_high_frequency": self.keep_high_frequency,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RetentionPolicy":
        return cls(
            alpha=PerLevel.of(data["alpha"]),
            rho=PerLevel.of(data["rho"]),
            indicator_mode=IndicatorMode(data.get("indicator_mode", "dual")),
            keep_high_frequency=bool(data.get("keep_high_frequency", True)),
            seed=int(data.get("seed", 0)),
        )


def attention_indicator(payload: AttentionPayload, n: int, heads: int) -> np.ndarray:
    """Mean attention mass received by each token: (1/(H*n)) sum_h sum_i A[h,i,j]."""
    if payload.kind is PayloadKind.RAW:
        a = payload.raw
        if a is None or a.shape != (heads, n, n):
            got = None if a is None else a.shape
            raise ShapeMismatchError(f"raw attention must be ({heads}, {n}, {n}), got {got}")
        return a.astype(np.float64, copy=False).sum(axis=(0, 1)) / (heads * n)
    agg = payload.aggregated
    if agg is None or agg.shape != (n,):
        got = None if agg is None else agg.shape
        raise ShapeMismatchError(f"aggregated attention must be ({n},), got {got}")
    return agg.astype(np.float64, copy=False) / (heads * n)


def frequency_indicator(keys) -> np.ndarray:
    """Mean DFT magnitude per token over all feature dimensions.

    Unnormalized forward transform along the token axis; the constant factor
    cancels under the min-max normalization applied before fusion.
    """
    m = np.asarray(keys)
    if m.ndim != 2 or m.shape[0] == 0:
        raise EmptyMatrixError(f"key matrix must be non-empty 2-D, got shape {m.shape}")
    spectrum = np.abs(np.fft.fft(m.astype(np.float64, copy=False), axis=0))
    return spectrum.mean(axis=1)


def fuse_scores(att, fft, alpha: float, keep_high_frequency: bool = True) -> np.ndarray:
    """alpha * minmax(att) + (1 - alpha) * minmax(fft).

    With keep_high_frequency=False the frequency operand is negated before
    normalization, flipping retention toward low-frequency tokens.
    """
    a = np.asarray(att, dtype=np.float64).ravel()
    f = np.asarray(fft, dtype=np.float64).ravel()
    if a.shape != f.shape:
        raise LengthMismatchError(f"score lengths differ: {a.shape[0]} vs {f.shape[0]}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    if not keep_high_frequency:
        f = -f
    return alpha * minmax_normalize(a) + (1.0 - alpha) * minmax_normalize(f)


def retention_count(rho: float, n: int) -> int:
    """kappa = max(1, floor(rho * n)); the floor of 1 keeps blocks non-empty."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho={rho} outside (0, 1]")
    return max(1, math.floor(rho * n))


def select_topk(scores, rho: float) -> np.ndarray:
    """Indices of the kappa largest scores, ties to the smaller index.

    The returned index list is sorted ascending so original token order is
    preserved in the retained slices.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    kappa = retention_count(rho, s.shape[0])
    order = np.argsort(-s, kind="stable")  # stable: equal scores keep index order
    return np.sort(order[:kappa]).astype(np.int64)


def block_seed(stream_seed: int, block_id: BlockId) -> int:
    """Stable per-block seed so parallel scheduling cannot change results."""
    digest = hashlib.blake2b(
        struct.pack(
            "<QQBI",
            stream_seed & 0xFFFFFFFFFFFFFFFF,
            block_id.segment_index,
            int(block_id.granularity),
            block_id.sub_index,
        ),
        digest_size=8,
    ).digest()
    return int.from_bytes(digest, "little")


def compress_block(
    block: "RawBlock",
    policy: RetentionPolicy,
    timestamp: float,
    heads: int,
) -> CompressedBlock:
    """Prune one raw block to its granularity budget.

    The same retained index set is applied to every layer's K and V; the
    block summary is the mean of the retained last-layer keys. Deterministic
    for fixed inputs and seed. A DegenerateBlock (kappa = 0) cannot occur
    because retention_count floors at one token.
    """
    level = block.block_id.granularity
    n = block.token_count
    rho = float(policy.rho.get(level))
    if policy.indicator_mode is IndicatorMode.RANDOM:
        rng = np.random.default_rng(block_seed(policy.seed, block.block_id))
        kappa = retention_count(rho, n)
        keep = np.sort(rng.permutation(n)[:kappa]).astype(np.int64)
        fused = np.zeros(n, dtype=np.float64)
    else:
        att = attention_indicator(block.payload, n, heads)
        freq = frequency_indicator(block.layer_keys[-1])
        fused = fuse_scores(att, freq, policy.effective_alpha(level), policy.keep_high_frequency)
        keep = select_topk(fused, rho)
    return CompressedBlock(
        block_id=block.block_id,
        timestamp=float(timestamp),
        retained_indices=keep.astype(np.uint32),
        layer_keys=tuple(np.ascontiguousarray(k[keep], dtype=np.float32) for k in block.layer_keys),
        layer_values=tuple(np.ascontiguousarray(v[keep], dtype=np.float32) for v in block.layer_values),
        summary=mean_pool_rows(block.layer_keys[-1][keep]),
        fused_scores=fused[keep].astype(np.float32),
    )


def compress_segment(record: "SegmentRecord", policy: RetentionPolicy) -> list[CompressedBlock]:
    """Compress every block of a validated segment record.

    The block timestamp is the midpoint of the segment's time span.
    """
    timestamp = (record.time_start + record.time_end) / 2.0
    heads = record.geometry.num_heads
    return [compress_block(b, policy, timestamp, heads) for b in record.blocks]
