"""Foundational types and shared vector operations.

Conventions used everywhere downstream: tensors are float32 at rest,
accumulations run in float64 and results are rounded back to float32 when
stored; C-dimensional vectors concatenate heads head-major (head 0's dims
first).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import EmptyMatrixError, InvalidGeometryError, ZeroVectorError

# Norms below this are treated as degenerate zero vectors.
ZERO_NORM_EPS = 1e-12


class GranularityLevel(IntEnum):
    """Grouping scale of a block, totally ordered fine to coarse."""

    PATCH = 0
    FRAME = 1
    SEGMENT = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, text: str) -> "GranularityLevel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown granularity level: {text!r}") from None


ALL_LEVELS = (GranularityLevel.PATCH, GranularityLevel.FRAME, GranularityLevel.SEGMENT)


@dataclass(frozen=True, order=True)
class BlockId:
    """Identity of one stored block: (granularity, segment, sub index).

    Tuple ordering doubles as the deterministic tie-break order.
    """

    granularity: GranularityLevel
    segment_index: int
    sub_index: int

    def __str__(self) -> str:
        return f"{self.granularity.label}:{self.segment_index}:{self.sub_index}"

    @classmethod
    def parse(cls, text: str) -> "BlockId":
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"block id must look like 'frame:3:0', got {text!r}")
        return cls(GranularityLevel.from_label(parts[0]), int(parts[1]), int(parts[2]))


@dataclass(frozen=True)
class ModelGeometry:
    """Shape contract for KV tensors and the token grid of one stream."""

    num_layers: int
    num_heads: int
    head_dim: int
    patches_per_frame: int
    frames_per_segment: int
    super_patches_per_frame: int

    def __post_init__(self):
        for name in (
            "num_layers",
            "num_heads",
            "head_dim",
            "patches_per_frame",
            "frames_per_segment",
            "super_patches_per_frame",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidGeometryError(f"{name} must be a positive integer, got {value!r}")
        if self.super_patches_per_frame >= self.patches_per_frame:
            raise InvalidGeometryError(
                f"super_patches_per_frame ({self.super_patches_per_frame}) must be "
                f"smaller than patches_per_frame ({self.patches_per_frame})"
            )

    @property
    def concat_dim(self) -> int:
        """Feature width with heads concatenated."""
        return self.num_heads * self.head_dim

    @property
    def tokens_per_segment(self) -> int:
        return self.patches_per_frame * self.frames_per_segment

    @property
    def super_patch_size(self) -> int:
        return self.patches_per_frame // self.super_patches_per_frame

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "patches_per_frame": self.patches_per_frame,
            "frames_per_segment": self.frames_per_segment,
            "super_patches_per_frame": self.super_patches_per_frame,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelGeometry":
        return cls(**{k: int(v) for k, v in data.items()})


@dataclass(frozen=True)
class PerLevel:
    """One value per granularity level (patch, frame, segment)."""

    patch: float
    frame: float
    segment: float

    def get(self, level: GranularityLevel):
        return (self.patch, self.frame, self.segment)[level]

    def as_tuple(self) -> tuple:
        return (self.patch, self.frame, self.segment)

    @classmethod
    def of(cls, value) -> "PerLevel":
        """Build from a scalar, a (patch, frame, segment) sequence, or a dict."""
        if isinstance(value, PerLevel):
            return value
        if isinstance(value, dict):
            return cls(value["patch"], value["frame"], value["segment"])
        if isinstance(value, (list, tuple)):
            if len(value) != 3:
                raise ValueError(f"per-level triple must have 3 entries, got {value!r}")
            return cls(*value)
        return cls(value, value, value)


def cosine(a, b) -> float:
    """Cosine similarity of two equal-length vectors, in [-1, 1].

    Raises ZeroVectorError when either norm is below ZERO_NORM_EPS; callers
    scoring blocks treat that as score 0 and log it.
    """
    va = np.asarray(a, dtype=np.float64).ravel()
    vb = np.asarray(b, dtype=np.float64).ravel()
    if va.shape != vb.shape:
        raise ValueError(f"vector lengths differ: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        raise ZeroVectorError(f"degenerate vector norm ({na:.3e}, {nb:.3e})")
    return float(np.dot(va, vb) / (na * nb))


def mean_pool_rows(matrix) -> np.ndarray:
    """Component-wise mean over rows, accumulated in float64, stored float32."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.shape[0] == 0:
        raise EmptyMatrixError("cannot pool an empty matrix")
    return m.astype(np.float64, copy=False).mean(axis=0).astype(np.float32)


def minmax_normalize(scores) -> np.ndarray:
    """Map scores to [0, 1]; a constant vector maps to all zeros.

    The all-zeros choice makes a degenerate indicator contribute nothing to
    the fused score, leaving tie-breaking to token order.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("cannot normalize an empty score vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("score vector contains non-finite entries")
    lo = float(s.min())
    hi = float(s.max())
    if hi == lo:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)
