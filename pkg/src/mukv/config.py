"""Declarative engine configuration: one JSON file plus flag overrides.

Defaults reproduce the reference operating point: 0.5 fps, 4-frame segments,
196 patches per frame grouped into 4 super-patches, alpha (0.5, 0.7, 0.8),
rho (0.1, 0.1, 0.8), k (20, 32, 12), lambda (0.3, 0.3, 0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .core import ALL_LEVELS, GranularityLevel, ModelGeometry, PerLevel
from .dcp import IndicatorMode, RetentionPolicy
from .granularity import Coverage, GranularityPlan, build_plan
from .retrieval import RetrievalConfig, RetrievalMode


def default_geometry() -> ModelGeometry:
    # Desk-scale layer/head/dim; real values arrive via the producer's echo.
    return ModelGeometry(
        num_layers=2,
        num_heads=2,
        head_dim=8,
        patches_per_frame=196,
        frames_per_segment=4,
        super_patches_per_frame=4,
    )


@dataclass(frozen=True)
class EngineConfig:
    geometry: ModelGeometry = field(default_factory=default_geometry)
    fps: float = 0.5
    coverage_frame: Coverage = Coverage.ALL_FRAMES
    coverage_patch: Coverage = Coverage.ALL_FRAMES
    levels: tuple[GranularityLevel, ...] = ALL_LEVELS
    retention: RetentionPolicy = field(
        default_factory=lambda: RetentionPolicy(alpha=PerLevel(0.5, 0.7, 0.8), rho=PerLevel(0.1, 0.1, 0.8))
    )
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    store_path: str = "store"
    seed: int = 0
    # warn (never evict) when the estimated store size crosses this
    byte_budget_warning: int | None = None

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if not self.levels:
            raise ValueError("at least one granularity level must be enabled")
        if self.byte_budget_warning is not None and self.byte_budget_warning < 1:
            raise ValueError("byte_budget_warning must be positive when set")

    @property
    def segment_seconds(self) -> float:
        return self.geometry.frames_per_segment / self.fps

    def time_span(self, segment_index: int) -> tuple[float, float]:
        return segment_index * self.segment_seconds, (segment_index + 1) * self.segment_seconds

    def plan(self) -> GranularityPlan:
        return build_plan(self.geometry, self.coverage_frame, self.coverage_patch, self.levels)

    def policy_snapshot(self) -> dict:
        """Provenance blob persisted in the store manifest."""
        snap = self.retention.to_dict()
        snap.update(
            {
                "fps": self.fps,
                "coverage_frame": self.coverage_frame.value,
                "coverage_patch": self.coverage_patch.value,
                "levels": [lv.label for lv in self.levels],
            }
        )
        return snap

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "fps": self.fps,
            "coverage": {"frame": self.coverage_frame.value, "patch": self.coverage_patch.value},
            "levels": [lv.label for lv in self.levels],
            "retention": self.retention.to_dict(),
            "retrieval": self.retrieval.to_dict(),
            "store_path": self.store_path,
            "seed": self.seed,
            "byte_budget_warning": self.byte_budget_warning,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        cfg = cls()
        geometry = ModelGeometry.from_dict(data["geometry"]) if "geometry" in data else cfg.geometry
        coverage = data.get("coverage", {})
        levels = tuple(
            GranularityLevel.from_label(x) for x in data.get("levels", [lv.label for lv in ALL_LEVELS])
        )
        seed = int(data.get("seed", 0))
        retention_data = dict(data.get("retention", {}))
        retention_data.setdefault("alpha", [0.5, 0.7, 0.8])
        retention_data.setdefault("rho", [0.1, 0.1, 0.8])
        retention_data.setdefault("seed", seed)
        retrieval_data = dict(data.get("retrieval", {}))
        retrieval_data.setdefault("levels", [lv.label for lv in levels])
        return cls(
            geometry=geometry,
            fps=float(data.get("fps", 0.5)),
            coverage_frame=Coverage(coverage.get("frame", "all_frames")),
            coverage_patch=Coverage(coverage.get("patch", "all_frames")),
            levels=levels,
            retention=RetentionPolicy.from_dict(retention_data),
            retrieval=RetrievalConfig.from_dict(retrieval_data),
            store_path=str(data.get("store_path", "store")),
            seed=seed,
            byte_budget_warning=(
                int(data["byte_budget_warning"])
                if data.get("byte_budget_warning") is not None
                else None
            ),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "EngineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    # -- flag overrides --------------------------------------------------

    def with_overrides(
        self,
        *,
        store_path: str | None = None,
        mode: str | None = None,
        rho=None,
        alpha=None,
        k=None,
        coherence=None,
        indicator_mode: str | None = None,
        keep_high_frequency: bool | None = None,
        fps: float | None = None,
        seed: int | None = None,
        levels=None,
    ) -> "EngineConfig":
        cfg = self
        if store_path is not None:
            cfg = replace(cfg, store_path=store_path)
        if fps is not None:
            cfg = replace(cfg, fps=fps)
        if seed is not None:
            cfg = replace(cfg, seed=seed, retention=replace(cfg.retention, seed=seed))
        if levels is not None:
            lv = tuple(GranularityLevel.from_label(x) for x in levels)
            cfg = replace(cfg, levels=lv, retrieval=replace(cfg.retrieval, levels=lv))
        retention = cfg.retention
        if rho is not None:
            retention = replace(retention, rho=PerLevel.of(rho))
        if alpha is not None:
            retention = replace(retention, alpha=PerLevel.of(alpha))
        if indicator_mode is not None:
            retention = replace(retention, indicator_mode=IndicatorMode(indicator_mode))
        if keep_high_frequency is not None:
            retention = replace(retention, keep_high_frequency=keep_high_frequency)
        if retention is not cfg.retention:
            cfg = replace(cfg, retention=retention)
        retrieval = cfg.retrieval
        if k is not None:
            retrieval = replace(retrieval, k=PerLevel.of(k))
        if coherence is not None:
            retrieval = replace(retrieval, coherence=PerLevel.of(coherence))
        if mode is not None:
            retrieval = replace(retrieval, mode=RetrievalMode(mode))
        if retrieval is not cfg.retrieval:
            cfg = replace(cfg, retrieval=retrieval)
        return cfg
