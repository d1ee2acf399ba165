"""Adapter configuration: model location, geometry echo, and extraction knobs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from mukv.core import ModelGeometry

LAYER_CHOICES = ("last", "penultimate", "middle")


def tiny_geometry() -> ModelGeometry:
    return ModelGeometry(
        num_layers=2,
        num_heads=2,
        head_dim=8,
        patches_per_frame=4,
        frames_per_segment=2,
        super_patches_per_frame=2,
    )


@dataclass(frozen=True)
class AdapterConfig:
    model_dir: str
    out_dir: str
    geometry: ModelGeometry = field(default_factory=tiny_geometry)
    fps: float = 0.5
    indicator_layer: str = "last"  # last | penultimate | middle
    raw_attention: bool = False
    max_new_tokens: int = 32
    seed: int = 0
    n_positions: int = 512

    def __post_init__(self):
        if self.indicator_layer not in LAYER_CHOICES:
            raise ValueError(f"indicator_layer must be one of {LAYER_CHOICES}")

    def layer_index(self) -> int:
        if self.indicator_layer == "last":
            return self.geometry.num_layers - 1
        if self.indicator_layer == "penultimate":
            return max(self.geometry.num_layers - 2, 0)
        return self.geometry.num_layers // 2

    def to_dict(self) -> dict:
        return {
            "model_dir": self.model_dir,
            "out_dir": self.out_dir,
            "geometry": self.geometry.to_dict(),
            "fps": self.fps,
            "indicator_layer": self.indicator_layer,
            "raw_attention": self.raw_attention,
            "max_new_tokens": self.max_new_tokens,
            "seed": self.seed,
            "n_positions": self.n_positions,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AdapterConfig":
        return cls(
            model_dir=data["model_dir"],
            out_dir=data["out_dir"],
            geometry=ModelGeometry.from_dict(data["geometry"]) if "geometry" in data else tiny_geometry(),
            fps=float(data.get("fps", 0.5)),
            indicator_layer=str(data.get("indicator_layer", "last")),
            raw_attention=bool(data.get("raw_attention", False)),
            max_new_tokens=int(data.get("max_new_tokens", 32)),
            seed=int(data.get("seed", 0)),
            n_positions=int(data.get("n_positions", 512)),
        )

    @classmethod
    def from_file(cls, path) -> "AdapterConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
